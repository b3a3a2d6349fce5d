#pragma once

#include <span>
#include <vector>

#include "ume/evidential.hpp"
#include "ume/tensor.hpp"

/// Training objectives. Every loss returns its value together with the
/// analytic gradient with respect to its direct input.
namespace ume::losses {

struct LossValue {
    double value = 0.0;
    Vector gradient;
};

/// Gradient of the contrastive loss with respect to each projection row.
struct MatrixLoss {
    double value = 0.0;
    Matrix gradient;
};

struct AnnealSchedule {
    int horizon = 10;  // epochs until the KL term reaches full weight
};

/// Multi-hot target vector; throws if the entries are not 0/1 or the size is wrong.
Vector check_targets(const Vector& y, Eigen::Index k);

/// Negative log marginal likelihood of the positive labels under Dir(e + 1):
/// sum_k y_k (ln S - ln alpha_k). Gradient w.r.t. the evidence.
LossValue marginal_likelihood_loss(const evidential::EvidenceVector& e, const Vector& y);

/// KL(Dir(1 + (1 - y) * e) || Dir(1)). Gradient w.r.t. the evidence; zero on
/// target coordinates.
LossValue evidence_kl_loss(const evidential::EvidenceVector& e, const Vector& y);

double anneal(int epoch, const AnnealSchedule& schedule);

/// Summed binary cross-entropy. Gradient is w.r.t. the pre-sigmoid logits (p - y).
LossValue bce_loss(const Vector& p, const Vector& y);

/// NT-Xent over the rows of `projections` (2N rows). `partner[i]` is the row
/// index of the positive for anchor i. Mean over all anchors.
MatrixLoss ntxent_loss(const Matrix& projections, std::span<const int> partner, double tau);

/// Positives of row i are row i + n and vice versa, for 2n rows.
std::vector<int> paired_halves(int n);

/// Per-anchor NT-Xent terms (no gradient); useful for charging each sample
/// its own share of the batch loss.
std::vector<double> ntxent_terms(const Matrix& projections, std::span<const int> partner, double tau);

struct SingleExpertParts {
    double marginal_likelihood = 0.0;
    double evidence_kl = 0.0;
    double classification = 0.0;      // on real tokens
    double key_classification = 0.0;  // on key tokens
    double contrastive = 0.0;
};

/// L_ml + lambda * L_kl + L_C + L_C(key) + L_cl.
double combine_single(const SingleExpertParts& parts, double lambda);

/// Gradients of one expert's per-sample objective with respect to the
/// real-token logits, key-token logits and the sample's two projections.
struct SingleExpertLoss {
    SingleExpertParts parts;
    double value = 0.0;
    Vector grad_logits;
    Vector grad_key_logits;
};

/// Evidential and classification terms of the single-expert objective for one
/// sample. `contrastive` is the sample's precomputed share of the batch NT-Xent
/// term (its gradient is produced by ntxent_loss).
SingleExpertLoss single_expert_loss(const Vector& logits, const Vector& key_logits, const Vector& y,
                                    double contrastive, int epoch, const AnnealSchedule& schedule);

/// Sum over (sample i, expert m) of [w_i^m > epsilon] * loss(i, m). The gradient
/// is d total / d loss(i, m), i.e. the indicator itself.
MatrixLoss masked_ensemble_loss(const Matrix& per_sample_per_expert, const Matrix& weights,
                                double epsilon);

}  // namespace ume::losses
