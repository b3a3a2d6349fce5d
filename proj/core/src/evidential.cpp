#include "ume/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ume::evidential {

namespace {

double softplus(double x) {
    // log1p(exp(x)) without overflow for large x.
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

void require_same_size(Eigen::Index a, Eigen::Index b, const char* what) {
    if (a != b) {
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) +
                                    " vs " + std::to_string(b) + ")");
    }
}

}  // namespace

EvidenceVector::EvidenceVector(Vector values) : values_(std::move(values)) {
    for (Eigen::Index k = 0; k < values_.size(); ++k) {
        if (!std::isfinite(values_[k]) || values_[k] < 0.0) {
            throw std::invalid_argument("evidence[" + std::to_string(k) +
                                        "] must be finite and non-negative, got " +
                                        std::to_string(values_[k]));
        }
    }
}

double FusionTrace::max_conflict() const {
    return conflicts.empty() ? 0.0 : *std::max_element(conflicts.begin(), conflicts.end());
}

EvidenceVector evidence_from_logits(const Vector& logits) {
    Vector e(logits.size());
    for (Eigen::Index k = 0; k < logits.size(); ++k) {
        if (!std::isfinite(logits[k])) {
            throw std::invalid_argument("evidence_from_logits: logit[" + std::to_string(k) +
                                        "] is not finite");
        }
        e[k] = softplus(logits[k]);
    }
    return EvidenceVector(std::move(e));
}

DirichletOpinion opinion_from_evidence(const EvidenceVector& evidence) {
    DirichletOpinion op;
    op.alpha = evidence.values().array() + 1.0;
    op.strength = op.alpha.sum();
    op.belief = evidence.values() / op.strength;
    op.uncertainty = static_cast<double>(evidence.size()) / op.strength;
    return op;
}

double conflict(const DirichletOpinion& prev, const DirichletOpinion& curr) {
    require_same_size(prev.size(), curr.size(), "conflict");
    const double cross = curr.belief.sum() * prev.belief.sum() - curr.belief.dot(prev.belief);
    // Rounding can leave a tiny negative residue when the beliefs coincide.
    return std::clamp(cross, 0.0, 1.0);
}

std::vector<double> chain_conflicts(std::span<const DirichletOpinion> opinions) {
    std::vector<double> c(opinions.size(), 0.0);
    for (std::size_t m = 1; m < opinions.size(); ++m) {
        c[m] = conflict(opinions[m - 1], opinions[m]);
    }
    return c;
}

double fuse_uncertainty(std::span<const DirichletOpinion> opinions) {
    if (opinions.empty()) {
        throw std::invalid_argument("fuse_uncertainty: need at least one opinion");
    }
    const auto c = chain_conflicts(opinions);
    double num = 1.0;
    double den = 1.0;
    for (std::size_t m = 0; m < opinions.size(); ++m) {
        num *= opinions[m].uncertainty;
        den *= 1.0 - std::min(c[m], kMaxConflict);
    }
    return num / den;
}

std::vector<double> propagate_weights_unclamped(std::span<const DirichletOpinion> opinions) {
    if (opinions.empty()) {
        throw std::invalid_argument("propagate_weights: need at least one opinion");
    }
    const auto c = chain_conflicts(opinions);
    std::vector<double> w(opinions.size());
    w[0] = 1.0;
    for (std::size_t m = 1; m < opinions.size(); ++m) {
        // u and C of the previous expert feed the next weight; C^1 = 0 gives w^2 = u^1.
        w[m] = w[m - 1] * opinions[m - 1].uncertainty / (1.0 - std::min(c[m - 1], kMaxConflict));
    }
    return w;
}

std::vector<double> propagate_weights(std::span<const DirichletOpinion> opinions) {
    auto w = propagate_weights_unclamped(opinions);
    for (auto& v : w) v = std::clamp(v, 0.0, kMaxWeight);
    return w;
}

double successor_weight(std::span<const DirichletOpinion> predecessors) {
    if (predecessors.empty()) return 1.0;
    const auto w = propagate_weights_unclamped(predecessors);
    const auto c = chain_conflicts(predecessors);
    const std::size_t last = predecessors.size() - 1;
    const double next = w[last] * predecessors[last].uncertainty / (1.0 - std::min(c[last], kMaxConflict));
    return std::clamp(next, 0.0, kMaxWeight);
}

Vector aggregate_evidence(std::span<const EvidenceVector> evidences, std::span<const double> weights,
                          double eta) {
    if (!(eta > 0.0)) {
        throw std::invalid_argument("aggregate_evidence: eta must be > 0, got " + std::to_string(eta));
    }
    if (evidences.empty()) {
        throw std::invalid_argument("aggregate_evidence: need at least one expert");
    }
    require_same_size(static_cast<Eigen::Index>(evidences.size()),
                      static_cast<Eigen::Index>(weights.size()), "aggregate_evidence");
    const double top = *std::max_element(weights.begin(), weights.end());
    std::vector<double> soft(weights.size());
    double z = 0.0;
    for (std::size_t m = 0; m < weights.size(); ++m) {
        soft[m] = std::exp((weights[m] - top) / eta);
        z += soft[m];
    }
    Vector out = Vector::Zero(evidences.front().size());
    for (std::size_t m = 0; m < evidences.size(); ++m) {
        require_same_size(evidences[m].size(), out.size(), "aggregate_evidence");
        out += (soft[m] / z) * evidences[m].values();
    }
    return out;
}

Vector predict_probabilities(const Vector& fused_evidence) {
    return fused_evidence.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

FusionTrace fuse(std::span<const EvidenceVector> evidences, double eta, FusionMode mode) {
    if (evidences.empty()) {
        throw std::invalid_argument("fuse: need at least one expert");
    }
    FusionTrace trace;
    std::vector<DirichletOpinion> opinions;
    opinions.reserve(evidences.size());
    for (const auto& e : evidences) opinions.push_back(opinion_from_evidence(e));
    for (const auto& op : opinions) trace.uncertainties.push_back(op.uncertainty);

    if (mode == FusionMode::dst) {
        trace.conflicts = chain_conflicts(opinions);
        trace.weights = propagate_weights(opinions);
        trace.fused_uncertainty = fuse_uncertainty(opinions);
        trace.fused_evidence = aggregate_evidence(evidences, trace.weights, eta);
    } else {
        trace.conflicts.assign(evidences.size(), 0.0);
        trace.weights.assign(evidences.size(), 1.0);
        double u = 1.0;
        for (const auto& op : opinions) u *= op.uncertainty;
        trace.fused_uncertainty = u;
        Vector mean = Vector::Zero(evidences.front().size());
        for (const auto& e : evidences) {
            require_same_size(e.size(), mean.size(), "fuse");
            mean += e.values();
        }
        trace.fused_evidence = mean / static_cast<double>(evidences.size());
    }
    trace.probabilities = predict_probabilities(trace.fused_evidence);
    return trace;
}

}  // namespace ume::evidential
