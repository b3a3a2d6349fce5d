#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ume/data.hpp"
#include "ume/encoder.hpp"
#include "ume/evidential.hpp"
#include "ume/losses.hpp"

/// Sequential specialization: a backbone stage followed by one stage per
/// expert, each gated by the uncertainty its predecessors leave behind.
namespace ume::trainer {

struct TrainConfig {
    int experts = 3;
    double eta = 0.9;
    double epsilon = 0.5;
    int rank = 8;
    double lr = 0.01;
    int batch = 32;
    int epochs = 10;         // per stage
    int anneal = 0;          // KL warm-up horizon in epochs; 0 means `epochs`
    double gamma = 0.1;      // key-token keep threshold on gold probability mass
    double tau_g = 1.0;      // Gumbel-softmax temperature
    double tau = 0.5;        // contrastive temperature
    // sigma(e) > 2/3 is e > ln 2 = softplus(0), i.e. logit > 0.
    double threshold = 2.0 / 3.0;
    evidential::FusionMode fusion = evidential::FusionMode::dst;
    std::uint64_t seed = 1;
    double momentum = 0.9;
    int early_stop = 0;  // patience in epochs on dev micro-F1; 0 disables
    int update = 1;      // batches accumulated per optimizer step
    int warmup = 0;      // optimizer steps of linear learning-rate warm-up

    int vocab = 256;
    int hidden = 64;
    int blocks = 2;
    int heads = 4;
    int label_rounds = 2;
    int workers = 1;  // read-only evaluation threads

    [[nodiscard]] encoder::ModelConfig model_config() const;
    [[nodiscard]] losses::AnnealSchedule anneal_schedule() const;
};

/// Throws std::invalid_argument naming the first offending field.
void validate(const TrainConfig& cfg);

/// Non-finite loss during training.
class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Routing quantities of one sample over experts 1..m.
struct RoutingRecord {
    std::vector<double> weights;        // clamped w^1..w^m
    std::vector<double> conflicts;      // C^1..C^m, C^1 = 0
    std::vector<double> uncertainties;  // u^1..u^m
    std::vector<char> mask;             // w^j > epsilon

    [[nodiscard]] std::size_t size() const noexcept { return weights.size(); }
};

/// Routing from already computed per-expert evidence. Average fusion gives
/// unit weights and zero conflicts.
RoutingRecord routing_from_evidence(std::span<const evidential::EvidenceVector> evidences, double epsilon,
                                    evidential::FusionMode mode = evidential::FusionMode::dst);

/// Weight the next expert would receive given its predecessors' evidence.
double successor_weight(std::span<const evidential::EvidenceVector> predecessors);

/// Evidence of experts 0..experts-1 for one token sequence. The trunk runs once.
std::vector<evidential::EvidenceVector> expert_evidence(const encoder::ExpertEnsemble& ensemble,
                                                        std::span<const int> tokens, int experts);

/// Per-sample evidence of the first `experts` experts; row i matches indices[i].
using EvidenceTable = std::vector<std::vector<evidential::EvidenceVector>>;
EvidenceTable evidence_table(const encoder::ExpertEnsemble& ensemble, const data::Corpus& corpus,
                             const std::vector<std::size_t>& indices, int experts, int workers = 1);

std::vector<RoutingRecord> compute_routing(const encoder::ExpertEnsemble& ensemble, const data::Corpus& corpus,
                                           const std::vector<std::size_t>& indices, int upto, double epsilon);

struct Prediction {
    std::vector<int> labels;  // ascending
    evidential::FusionTrace trace;
};

/// Labels whose fused probability exceeds the threshold.
std::vector<int> threshold_labels(const Vector& probabilities, double threshold);

Prediction predict_from_evidence(std::span<const evidential::EvidenceVector> evidences, const TrainConfig& cfg);

/// Fuses the first cfg.experts experts of the ensemble.
Prediction predict(const encoder::ExpertEnsemble& ensemble, const data::Sample& sample, const TrainConfig& cfg);

std::vector<Prediction> predict_all(const EvidenceTable& table, const TrainConfig& cfg);

/// One JSON object per line. Stage banners, per-epoch losses, warnings.
class RunLog {
public:
    RunLog() = default;
    explicit RunLog(std::ostream* out) : out_(out) {}

    void stage_banner(int stage, const std::string& name, std::size_t samples);
    void epoch(int stage, int epoch, double loss, double lambda, double masked_in_fraction, double mean_conflict,
               double dev_micro_f1);
    void stage_end(int stage, std::size_t masked_in, std::size_t total, double mean_uncertainty,
                   double mean_conflict, double dev_micro_f1);
    void warning(int stage, const std::string& message);

    [[nodiscard]] std::size_t banners() const noexcept { return banners_; }
    [[nodiscard]] const std::vector<std::string>& warnings() const noexcept { return warnings_; }

private:
    std::ostream* out_ = nullptr;
    std::size_t banners_ = 0;
    std::vector<std::string> warnings_;

    void write(const std::string& line);
};

struct StageReport {
    int stage = 0;  // 0 is the backbone; expert m trains in stage m
    std::size_t masked_in = 0;
    std::size_t total = 0;
    double masked_in_fraction = 0.0;
    double mean_uncertainty = 0.0;  // of this stage's expert over the train split
    double mean_conflict = 0.0;     // C^m over the train split
    std::vector<double> epoch_losses;
    double dev_micro_f1 = 0.0;
    int epochs_run = 0;
    bool skipped = false;  // nothing passed the mask
};

/// Owns the training split view, the run log and the frozen-trunk feature
/// cache shared by all expert stages.
class Trainer {
public:
    Trainer(TrainConfig cfg, const data::Corpus& corpus, data::Splits splits, RunLog* log = nullptr);

    [[nodiscard]] const TrainConfig& config() const noexcept { return cfg_; }
    /// Routing parameters may change between stages; model fields may not.
    void set_routing(double epsilon, evidential::FusionMode mode);

    /// Trains embeddings, blocks, heads and label embeddings with both
    /// classification terms and the contrastive term, then freezes the backbone.
    encoder::ExpertEnsemble train_backbone(const data::LabelTree& tree, StageReport* report = nullptr);

    /// Trains adapter `expert` (0-based) on the samples its predecessors route to it.
    StageReport train_expert_stage(int expert, encoder::ExpertEnsemble& ensemble);

    /// Backbone, then experts 0..cfg.experts-1. Returns one report per stage.
    std::vector<StageReport> train_all(const data::LabelTree& tree, encoder::ExpertEnsemble& out);

    /// Drops cached trunk features; required if the backbone changes.
    void invalidate_features();

    [[nodiscard]] double dev_micro_f1(const encoder::ExpertEnsemble& ensemble, int experts);

private:
    struct Features {
        std::vector<Matrix> real;  // last feed-forward input at the pooled position
        std::vector<Matrix> key;   // same for the key-token sequence
    };

    TrainConfig cfg_;
    const data::Corpus& corpus_;
    data::Splits splits_;
    RunLog* log_;
    std::optional<Features> train_features_;
    std::optional<std::vector<Matrix>> dev_features_;

    void ensure_features(const encoder::ExpertEnsemble& ensemble);
};

/// Micro-F1 over aligned predicted and gold label sets.
double micro_f1(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& gold);

}  // namespace ume::trainer
