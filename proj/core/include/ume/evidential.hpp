#pragma once

#include <span>
#include <vector>

#include "ume/tensor.hpp"

/// Subjective-logic opinions over K singleton labels and the sequential
/// adjacent-expert fusion used to weight an ensemble of evidential experts.
///
/// Everything in this header is a pure function of its arguments.
namespace ume::evidential {

/// Largest conflict value used as a divisor in `1 - C`.
inline constexpr double kMaxConflict = 1.0 - 1e-6;
/// Propagated weights are clamped into [0, kMaxWeight] before exp(w / eta).
inline constexpr double kMaxWeight = 10.0;

/// Non-negative evidence, one entry per label.
class EvidenceVector {
public:
    EvidenceVector() = default;
    /// Throws std::invalid_argument if any entry is negative or non-finite.
    explicit EvidenceVector(Vector values);

    [[nodiscard]] const Vector& values() const noexcept { return values_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return values_.size(); }
    [[nodiscard]] double operator[](Eigen::Index k) const { return values_[k]; }

private:
    Vector values_;
};

struct DirichletOpinion {
    Vector alpha;
    Vector belief;
    double uncertainty = 1.0;
    double strength = 0.0;

    [[nodiscard]] Eigen::Index size() const noexcept { return alpha.size(); }
};

enum class FusionMode { dst, average };

struct FusionTrace {
    std::vector<double> conflicts;      // C^1 = 0
    std::vector<double> uncertainties;  // u^m of each expert
    std::vector<double> weights;        // w^1 = 1, clamped
    double fused_uncertainty = 1.0;
    Vector fused_evidence;
    Vector probabilities;

    /// Largest adjacent-pair conflict; 0 for a single expert.
    [[nodiscard]] double max_conflict() const;
};

/// Softplus map from unconstrained logits to evidence.
EvidenceVector evidence_from_logits(const Vector& logits);

DirichletOpinion opinion_from_evidence(const EvidenceVector& evidence);

/// Cross-label belief mass between two opinions: sum over i != j of
/// b_i(curr) * b_j(prev). Symmetric in its arguments.
double conflict(const DirichletOpinion& prev, const DirichletOpinion& curr);

/// Conflicts C^1..C^M for an ordered chain of opinions (C^1 = 0).
std::vector<double> chain_conflicts(std::span<const DirichletOpinion> opinions);

/// prod_m u^m / prod_m (1 - C^m). Reported only; it does not drive prediction.
double fuse_uncertainty(std::span<const DirichletOpinion> opinions);

/// w^1 = 1, w^{m+1} = w^m u^m / (1 - C^m), each clamped to [0, kMaxWeight].
std::vector<double> propagate_weights(std::span<const DirichletOpinion> opinions);

/// Clamped weight of the expert that follows `predecessors`; 1 when empty.
double successor_weight(std::span<const DirichletOpinion> predecessors);

/// Same recursion without the clamp. Used to state the growth criterion.
std::vector<double> propagate_weights_unclamped(std::span<const DirichletOpinion> opinions);

/// sum_m softmax(w / eta)_m * e^m. Throws on eta <= 0 or size mismatch.
Vector aggregate_evidence(std::span<const EvidenceVector> evidences, std::span<const double> weights,
                          double eta);

Vector predict_probabilities(const Vector& fused_evidence);

/// Full pipeline over M experts' evidence for one sample.
FusionTrace fuse(std::span<const EvidenceVector> evidences, double eta, FusionMode mode);

}  // namespace ume::evidential
