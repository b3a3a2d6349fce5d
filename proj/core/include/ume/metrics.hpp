#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ume/data.hpp"
#include "ume/trainer.hpp"

/// Evaluation metrics and the diagnostic analyses over routing records and
/// fusion traces.
namespace ume::metrics {

/// rows x labels 0/1 matrix.
class MultiHot {
public:
    MultiHot() = default;
    MultiHot(std::size_t rows, int labels);
    /// Each row lists the active label ids. Throws on ids outside [0, labels).
    static MultiHot from_sets(const std::vector<std::vector<int>>& sets, int labels);

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] int labels() const noexcept { return labels_; }
    [[nodiscard]] bool at(std::size_t row, int label) const {
        return bits_[row * static_cast<std::size_t>(labels_) + static_cast<std::size_t>(label)] != 0;
    }
    void set(std::size_t row, int label, bool on = true);

private:
    std::size_t rows_ = 0;
    int labels_ = 0;
    std::vector<std::uint8_t> bits_;
};

struct ClassScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::int64_t support = 0;    // gold positives
    std::int64_t predicted = 0;  // predicted positives
    std::int64_t true_positives = 0;
};

struct F1Report {
    double micro = 0.0;
    double macro = 0.0;
    std::vector<ClassScore> per_class;
};

/// Micro from pooled counts; macro is the unweighted mean of per-class F1.
/// A class with no gold and no predicted positives scores 0, or is left out
/// of the mean when `ignore_empty` is set. Throws on a shape mismatch.
F1Report micro_macro_f1(const MultiHot& predicted, const MultiHot& gold, bool ignore_empty = false);

/// The N labels with the smallest train counts, ties broken by label name.
std::vector<int> least_frequent_labels(const data::LabelTree& tree, int n);

/// Macro-F1 restricted to the N least frequent labels.
double tail_macro_f1(const MultiHot& predicted, const MultiHot& gold, const data::LabelTree& tree, int n,
                     bool ignore_empty = false);

enum class Bucket { head = 0, medium = 1, tail = 2 };
inline constexpr int kBuckets = 3;
const char* bucket_name(Bucket b);

/// Level of the deepest gold label: 1 head, 2 medium, 3 or deeper tail.
Bucket level_bucket(const data::LabelTree& tree, const std::vector<int>& gold);

/// Train-count terciles of the rarest gold label: the rarest third of labels
/// is tail, the most frequent third head. Needs tree.train_counts.
Bucket frequency_bucket(const data::LabelTree& tree, const std::vector<int>& gold);

struct ParticipationTable {
    int experts = 0;
    /// shares[bucket][expert] in percent; empty when the bucket has no samples.
    std::vector<std::vector<double>> shares;
    std::vector<std::size_t> counts;  // samples per bucket

    [[nodiscard]] bool present(Bucket b) const {
        const auto i = static_cast<std::size_t>(b);
        return i < counts.size() && counts[i] > 0;
    }
    [[nodiscard]] double share(Bucket b, int expert) const {
        return shares[static_cast<std::size_t>(b)][static_cast<std::size_t>(expert)];
    }
};

/// Per-sample weight shares w^m / sum_j w^j averaged within each bucket.
ParticipationTable participation(const std::vector<trainer::RoutingRecord>& routing,
                                 const std::vector<Bucket>& buckets);

struct ConflictBin {
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
    std::size_t errors = 0;
    [[nodiscard]] double error_rate() const { return count ? static_cast<double>(errors) / count : 0.0; }
};

/// Five bins of width 0.2 over [0, 1]; the last bin is closed.
std::vector<ConflictBin> conflict_error_bins(const std::vector<double>& conflicts, const std::vector<char>& correct);

/// Percent of samples whose last-expert weight exceeds the threshold.
double utilization(const std::vector<trainer::RoutingRecord>& routing, double threshold = 0.5);

/// Mean conflict between the last two experts; 0 for a single expert.
double avg_last_conflict(const std::vector<evidential::FusionTrace>& traces);

/// Spearman rank correlation with average ranks for ties. 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Everything one evaluation produces.
struct EvalReport {
    std::string fusion_mode;
    int experts = 0;
    std::size_t samples = 0;
    F1Report f1;
    std::vector<std::pair<int, double>> tail_macro;  // (N, macro-F1 over the N rarest labels)
    ParticipationTable participation;
    std::vector<ConflictBin> conflict_bins;
    double utilization = 0.0;
    double avg_last_conflict = 0.0;
    double mean_fused_uncertainty = 0.0;
    double conflict_error_spearman = 0.0;  // over samples with conflict in [0.2, 1]
};

struct EvalOptions {
    std::vector<int> tail_n;  // empty: ceil(K/4)
    bool ignore_empty = false;
    bool frequency_buckets = false;
    double utilization_threshold = 0.5;
};

/// Exact-match correctness per sample (predicted set equals gold set).
EvalReport evaluate(const data::LabelTree& tree, const std::vector<std::vector<int>>& gold,
                    const std::vector<trainer::Prediction>& predictions, const trainer::TrainConfig& cfg,
                    const EvalOptions& options);

/// Routing records recovered from fusion traces.
std::vector<trainer::RoutingRecord> routing_from_traces(const std::vector<trainer::Prediction>& predictions,
                                                        double epsilon);

struct SweepRow {
    double value = 0.0;
    EvalReport report;
    double wall_seconds = 0.0;
};

/// One report per value; `run` trains (if needed) and evaluates.
std::vector<SweepRow> sweep(const std::string& axis, const std::vector<double>& values,
                            const std::function<EvalReport(double)>& run);

// -- report files ---------------------------------------------------------

void write_per_class_csv(std::ostream& out, const data::LabelTree& tree, const F1Report& f1);
void write_participation_csv(std::ostream& out, const ParticipationTable& table);
void write_conflict_csv(std::ostream& out, const std::vector<ConflictBin>& bins);
void write_sweep_csv(std::ostream& out, const std::string& axis, const std::vector<SweepRow>& rows);
/// Structured summary (JSON object).
std::string summary_json(const EvalReport& report);

}  // namespace ume::metrics
