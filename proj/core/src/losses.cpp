#include "ume/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace ume::losses {

namespace {

constexpr double kProbFloor = 1e-7;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Vector check_targets(const Vector& y, Eigen::Index k) {
    if (y.size() != k) {
        throw std::invalid_argument("target vector has " + std::to_string(y.size()) +
                                    " entries, expected " + std::to_string(k));
    }
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0) {
            throw std::invalid_argument("target vector must be multi-hot (0/1)");
        }
    }
    return y;
}

LossValue marginal_likelihood_loss(const evidential::EvidenceVector& e, const Vector& y) {
    check_targets(y, e.size());
    const double positives = y.sum();
    if (positives <= 0.0) {
        throw std::invalid_argument("marginal_likelihood_loss: at least one positive label required");
    }
    const Vector alpha = e.values().array() + 1.0;
    const double s = alpha.sum();
    LossValue out;
    out.value = (y.array() * (std::log(s) - alpha.array().log())).sum();
    out.gradient = (positives / s) - (y.array() / alpha.array());
    return out;
}

LossValue evidence_kl_loss(const evidential::EvidenceVector& e, const Vector& y) {
    using boost::math::digamma;
    using boost::math::trigamma;
    check_targets(y, e.size());
    const auto k = static_cast<double>(e.size());
    const Vector mask = (1.0 - y.array()).matrix();
    const Vector alpha = (1.0 + mask.array() * e.values().array()).matrix();
    const double s = alpha.sum();

    double value = std::lgamma(s) - std::lgamma(k);
    const double psi_s = digamma(s);
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
        value += -std::lgamma(alpha[i]) + (alpha[i] - 1.0) * (digamma(alpha[i]) - psi_s);
    }
    const double tri_s = trigamma(s);
    LossValue out;
    out.value = std::max(value, 0.0);
    out.gradient.resize(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
        const double d_alpha = (alpha[i] - 1.0) * trigamma(alpha[i]) - (s - k) * tri_s;
        out.gradient[i] = mask[i] * d_alpha;
    }
    return out;
}

double anneal(int epoch, const AnnealSchedule& schedule) {
    if (schedule.horizon < 1) {
        throw std::invalid_argument("anneal: horizon must be >= 1");
    }
    return std::min(1.0, static_cast<double>(std::max(epoch, 0)) / schedule.horizon);
}

LossValue bce_loss(const Vector& p, const Vector& y) {
    check_targets(y, p.size());
    LossValue out;
    out.gradient.resize(p.size());
    for (Eigen::Index k = 0; k < p.size(); ++k) {
        const double q = std::clamp(p[k], kProbFloor, 1.0 - kProbFloor);
        out.value += -y[k] * std::log(q) - (1.0 - y[k]) * std::log(1.0 - q);
        out.gradient[k] = p[k] - y[k];
    }
    return out;
}

std::vector<int> paired_halves(int n) {
    std::vector<int> partner(static_cast<std::size_t>(2 * n));
    for (int i = 0; i < n; ++i) {
        partner[static_cast<std::size_t>(i)] = i + n;
        partner[static_cast<std::size_t>(i + n)] = i;
    }
    return partner;
}

namespace {

struct NormalizedRows {
    Matrix unit;
    Vector norm;
};

NormalizedRows normalize_rows(const Matrix& z) {
    NormalizedRows out{z, Vector(z.rows())};
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double n = z.row(i).norm();
        if (!(n > 0.0)) {
            throw std::invalid_argument("ntxent_loss: projection " + std::to_string(i) + " has zero norm");
        }
        out.norm[i] = n;
        out.unit.row(i) /= n;
    }
    return out;
}

void check_pairs(const Matrix& z, std::span<const int> partner, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("ntxent_loss: tau must be > 0");
    if (z.rows() < 2 || z.rows() % 2 != 0) {
        throw std::invalid_argument("ntxent_loss: need an even number (>= 2) of projections");
    }
    if (static_cast<Eigen::Index>(partner.size()) != z.rows()) {
        throw std::invalid_argument("ntxent_loss: pair map size mismatch");
    }
    for (std::size_t i = 0; i < partner.size(); ++i) {
        if (partner[i] < 0 || partner[i] >= z.rows() || partner[i] == static_cast<int>(i)) {
            throw std::invalid_argument("ntxent_loss: invalid partner index");
        }
    }
}

}  // namespace

std::vector<double> ntxent_terms(const Matrix& projections, std::span<const int> partner, double tau) {
    check_pairs(projections, partner, tau);
    const auto rows = normalize_rows(projections);
    const Matrix sim = rows.unit * rows.unit.transpose();
    const Eigen::Index n2 = projections.rows();
    std::vector<double> terms(static_cast<std::size_t>(n2));
    for (Eigen::Index i = 0; i < n2; ++i) {
        double top = -1e300;
        for (Eigen::Index k = 0; k < n2; ++k) {
            if (k != i) top = std::max(top, sim(i, k) / tau);
        }
        double z = 0.0;
        for (Eigen::Index k = 0; k < n2; ++k) {
            if (k != i) z += std::exp(sim(i, k) / tau - top);
        }
        terms[static_cast<std::size_t>(i)] = -(sim(i, partner[static_cast<std::size_t>(i)]) / tau - top) + std::log(z);
    }
    return terms;
}

MatrixLoss ntxent_loss(const Matrix& projections, std::span<const int> partner, double tau) {
    check_pairs(projections, partner, tau);
    const auto rows = normalize_rows(projections);
    const Matrix sim = rows.unit * rows.unit.transpose();
    const Eigen::Index n2 = projections.rows();
    const double scale = 1.0 / static_cast<double>(n2);

    // d loss / d sim(i, k), before symmetrization.
    Matrix g = Matrix::Zero(n2, n2);
    MatrixLoss out;
    for (Eigen::Index i = 0; i < n2; ++i) {
        double top = -1e300;
        for (Eigen::Index k = 0; k < n2; ++k) {
            if (k != i) top = std::max(top, sim(i, k) / tau);
        }
        double z = 0.0;
        for (Eigen::Index k = 0; k < n2; ++k) {
            if (k != i) z += std::exp(sim(i, k) / tau - top);
        }
        const auto p = static_cast<Eigen::Index>(partner[static_cast<std::size_t>(i)]);
        out.value += scale * (-(sim(i, p) / tau - top) + std::log(z));
        for (Eigen::Index k = 0; k < n2; ++k) {
            if (k == i) continue;
            const double q = std::exp(sim(i, k) / tau - top) / z;
            g(i, k) = scale * (q - (k == p ? 1.0 : 0.0)) / tau;
        }
    }
    // sim = U U^T, so dU = (g + g^T) U.
    const Matrix d_unit = (g + g.transpose()) * rows.unit;
    out.gradient.resize(n2, projections.cols());
    for (Eigen::Index i = 0; i < n2; ++i) {
        const auto u = rows.unit.row(i);
        const double radial = u.dot(d_unit.row(i));
        out.gradient.row(i) = (d_unit.row(i) - radial * u) / rows.norm[i];
    }
    return out;
}

double combine_single(const SingleExpertParts& parts, double lambda) {
    return parts.marginal_likelihood + lambda * parts.evidence_kl + parts.classification +
           parts.key_classification + parts.contrastive;
}

SingleExpertLoss single_expert_loss(const Vector& logits, const Vector& key_logits, const Vector& y,
                                    double contrastive, int epoch, const AnnealSchedule& schedule) {
    const auto evidence = evidential::evidence_from_logits(logits);
    const Vector d_evidence_d_logit = logits.unaryExpr([](double x) { return sigmoid(x); });
    const double lambda = anneal(epoch, schedule);

    const auto ml = marginal_likelihood_loss(evidence, y);
    const auto kl = evidence_kl_loss(evidence, y);
    const auto bce = bce_loss(d_evidence_d_logit, y);
    const auto key_bce = bce_loss(key_logits.unaryExpr([](double x) { return sigmoid(x); }), y);

    SingleExpertLoss out;
    out.parts = {ml.value, kl.value, bce.value, key_bce.value, contrastive};
    out.value = combine_single(out.parts, lambda);
    out.grad_logits = ((ml.gradient + lambda * kl.gradient).array() * d_evidence_d_logit.array()).matrix() +
                      bce.gradient;
    out.grad_key_logits = key_bce.gradient;
    return out;
}

MatrixLoss masked_ensemble_loss(const Matrix& per_sample_per_expert, const Matrix& weights,
                                double epsilon) {
    if (per_sample_per_expert.rows() != weights.rows() || per_sample_per_expert.cols() != weights.cols()) {
        throw std::invalid_argument("masked_ensemble_loss: loss and weight shapes differ");
    }
    MatrixLoss out;
    out.gradient = (weights.array() > epsilon).cast<double>().matrix();
    out.value = (out.gradient.array() * per_sample_per_expert.array()).sum();
    return out;
}

}  // namespace ume::losses
