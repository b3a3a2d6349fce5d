#include "ume/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace ume::trainer {

using encoder::ExpertEnsemble;
using encoder::FeedForwardCache;
using encoder::GradTarget;
using encoder::HeadsCache;
using encoder::Parameters;
using encoder::TrunkCache;
using evidential::EvidenceVector;
using evidential::FusionMode;

encoder::ModelConfig TrainConfig::model_config() const {
    encoder::ModelConfig m;
    m.vocab_size = vocab;
    m.hidden = hidden;
    m.blocks = blocks;
    m.heads = heads;
    m.rank = rank;
    m.experts = experts;
    m.label_rounds = label_rounds;
    return m;
}

losses::AnnealSchedule TrainConfig::anneal_schedule() const { return {anneal > 0 ? anneal : epochs}; }

void validate(const TrainConfig& c) {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("invalid config: " + what);
    };
    require(c.experts >= 1, "experts must be >= 1");
    require(c.eta > 0.0, "eta must be > 0");
    require(c.epsilon >= 0.0 && c.epsilon < 1.0, "epsilon must be in [0, 1)");
    require(c.rank >= 1 && c.rank <= c.hidden, "r must be in [1, hidden]");
    require(c.lr > 0.0 && std::isfinite(c.lr), "lr must be > 0");
    require(c.batch >= 1, "batch must be >= 1");
    require(c.epochs >= 0, "epoch must be >= 0");
    require(c.anneal >= 0, "anneal must be >= 0");
    require(c.gamma > 0.0 && c.gamma < 1.0, "gamma must be in (0, 1)");
    require(c.tau_g > 0.0, "tau-g must be > 0");
    require(c.tau > 0.0, "tau must be > 0");
    require(c.threshold >= 0.0 && c.threshold <= 1.0, "thre must be in [0, 1]");
    require(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
    require(c.early_stop >= 0, "early-stop must be >= 0");
    require(c.update >= 1, "update must be >= 1");
    require(c.warmup >= 0, "warmup must be >= 0");
    require(c.vocab > data::kFirstContentToken, "vocab too small");
    require(c.hidden >= 2 && c.heads >= 1 && c.hidden % c.heads == 0, "hidden must be a multiple of heads");
    require(c.blocks >= 1, "blocks must be >= 1");
    require(c.label_rounds >= 0, "label-rounds must be >= 0");
    require(c.workers >= 1, "workers must be >= 1");
}

// ---------------------------------------------------------------------------
// Routing and prediction

RoutingRecord routing_from_evidence(std::span<const EvidenceVector> evidences, double epsilon, FusionMode mode) {
    RoutingRecord r;
    const std::size_t m = evidences.size();
    std::vector<evidential::DirichletOpinion> ops;
    ops.reserve(m);
    for (const auto& e : evidences) ops.push_back(evidential::opinion_from_evidence(e));
    for (const auto& op : ops) r.uncertainties.push_back(op.uncertainty);
    if (mode == FusionMode::dst) {
        r.conflicts = evidential::chain_conflicts(ops);
        r.weights = evidential::propagate_weights(ops);
    } else {
        r.conflicts.assign(m, 0.0);
        r.weights.assign(m, 1.0);
    }
    r.mask.resize(m);
    for (std::size_t j = 0; j < m; ++j) r.mask[j] = r.weights[j] > epsilon ? 1 : 0;
    return r;
}

double successor_weight(std::span<const EvidenceVector> predecessors) {
    std::vector<evidential::DirichletOpinion> ops;
    ops.reserve(predecessors.size());
    for (const auto& e : predecessors) ops.push_back(evidential::opinion_from_evidence(e));
    return evidential::successor_weight(ops);
}

namespace {

Matrix pooled_row(const Matrix& x_last_mid) { return x_last_mid.topRows(1); }

EvidenceVector evidence_at(const ExpertEnsemble& ens, const Matrix& pooled_input, int expert) {
    FeedForwardCache f;
    ens.head_forward(pooled_input, expert, f);
    return evidential::evidence_from_logits(ens.classify(f.y.row(0).transpose()));
}

Matrix trunk_features(const ExpertEnsemble& ens, std::span<const int> tokens) {
    const auto seq = ExpertEnsemble::with_cls(tokens);
    TrunkCache trunk;
    ens.trunk_forward(ens.embed(seq), seq, trunk);
    return pooled_row(trunk.x_last_mid);
}

/// Runs fn(i) for i in [0, n) on `workers` threads with a static partition.
template <class F>
void parallel_for(std::size_t n, int workers, F&& fn) {
    const auto w = static_cast<std::size_t>(std::max(1, workers));
    if (w == 1 || n < 2 * w) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + w - 1) / w;
    for (std::size_t t = 0; t < w; ++t) {
        const std::size_t lo = t * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

Vector multi_hot(const std::vector<int>& gold, int k) {
    Vector y = Vector::Zero(k);
    for (int g : gold) y[g] = 1.0;
    return y;
}

}  // namespace

std::vector<EvidenceVector> expert_evidence(const ExpertEnsemble& ensemble, std::span<const int> tokens,
                                            int experts) {
    if (experts < 1 || experts > ensemble.config().experts) {
        throw std::out_of_range("expert count " + std::to_string(experts) + " outside [1, " +
                                std::to_string(ensemble.config().experts) + "]");
    }
    const Matrix x = trunk_features(ensemble, tokens);
    std::vector<EvidenceVector> out;
    out.reserve(static_cast<std::size_t>(experts));
    for (int m = 0; m < experts; ++m) out.push_back(evidence_at(ensemble, x, m));
    return out;
}

EvidenceTable evidence_table(const ExpertEnsemble& ensemble, const data::Corpus& corpus,
                             const std::vector<std::size_t>& indices, int experts, int workers) {
    EvidenceTable table(indices.size());
    parallel_for(indices.size(), workers, [&](std::size_t i) {
        table[i] = expert_evidence(ensemble, corpus.samples.at(indices[i]).tokens, experts);
    });
    return table;
}

std::vector<RoutingRecord> compute_routing(const ExpertEnsemble& ensemble, const data::Corpus& corpus,
                                           const std::vector<std::size_t>& indices, int upto, double epsilon) {
    const auto table = evidence_table(ensemble, corpus, indices, upto);
    std::vector<RoutingRecord> out;
    out.reserve(table.size());
    for (const auto& row : table) out.push_back(routing_from_evidence(row, epsilon));
    return out;
}

std::vector<int> threshold_labels(const Vector& probabilities, double threshold) {
    std::vector<int> out;
    for (Eigen::Index k = 0; k < probabilities.size(); ++k) {
        if (probabilities[k] > threshold) out.push_back(static_cast<int>(k));
    }
    return out;
}

Prediction predict_from_evidence(std::span<const EvidenceVector> evidences, const TrainConfig& cfg) {
    const auto m = std::min<std::size_t>(evidences.size(), static_cast<std::size_t>(cfg.experts));
    Prediction p;
    p.trace = evidential::fuse(evidences.first(m), cfg.eta, cfg.fusion);
    p.labels = threshold_labels(p.trace.probabilities, cfg.threshold);
    return p;
}

Prediction predict(const ExpertEnsemble& ensemble, const data::Sample& sample, const TrainConfig& cfg) {
    const auto ev = expert_evidence(ensemble, sample.tokens, cfg.experts);
    return predict_from_evidence(ev, cfg);
}

std::vector<Prediction> predict_all(const EvidenceTable& table, const TrainConfig& cfg) {
    std::vector<Prediction> out;
    out.reserve(table.size());
    for (const auto& row : table) out.push_back(predict_from_evidence(row, cfg));
    return out;
}

double micro_f1(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& gold) {
    if (predicted.size() != gold.size()) throw std::invalid_argument("micro_f1: row count mismatch");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        std::vector<int> both;
        std::set_intersection(predicted[i].begin(), predicted[i].end(), gold[i].begin(), gold[i].end(),
                              std::back_inserter(both));
        tp += both.size();
        fp += predicted[i].size() - both.size();
        fn += gold[i].size() - both.size();
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Run log

void RunLog::write(const std::string& line) {
    if (out_ != nullptr) {
        *out_ << line << '\n';
        out_->flush();
    }
}

void RunLog::stage_banner(int stage, const std::string& name, std::size_t samples) {
    ++banners_;
    write(nlohmann::json{{"event", "stage"}, {"stage", stage}, {"name", name}, {"samples", samples}}.dump());
}

void RunLog::epoch(int stage, int epoch, double loss, double lambda, double masked_in_fraction, double mean_conflict,
                   double dev_micro_f1) {
    write(nlohmann::json{{"event", "epoch"},
                         {"stage", stage},
                         {"epoch", epoch},
                         {"loss", loss},
                         {"lambda", lambda},
                         {"masked_in_fraction", masked_in_fraction},
                         {"mean_conflict", mean_conflict},
                         {"dev_micro_f1", dev_micro_f1}}
              .dump());
}

void RunLog::stage_end(int stage, std::size_t masked_in, std::size_t total, double mean_uncertainty,
                       double mean_conflict, double dev_micro_f1) {
    write(nlohmann::json{{"event", "stage_end"},
                         {"stage", stage},
                         {"masked_in", masked_in},
                         {"total", total},
                         {"mean_uncertainty", mean_uncertainty},
                         {"mean_conflict", mean_conflict},
                         {"dev_micro_f1", dev_micro_f1}}
              .dump());
}

void RunLog::warning(int stage, const std::string& message) {
    warnings_.push_back(message);
    write(nlohmann::json{{"event", "warning"}, {"stage", stage}, {"message", message}}.dump());
}

// ---------------------------------------------------------------------------
// Optimizer

namespace {

/// SGD with heavy-ball momentum over the tensors selected by `trainable`.
class Sgd {
public:
    template <class Pred>
    Sgd(const Parameters& like, const TrainConfig& cfg, Pred trainable)
        : velocity_(like.zeros_like()), lr_(cfg.lr), momentum_(cfg.momentum), warmup_(cfg.warmup) {
        const_cast<Parameters&>(like).for_each(
            [&](const std::string& name, const auto&) { selected_.push_back(trainable(name)); });
    }

    void step(Parameters& params, Parameters& grads, double scale) {
        ++steps_;
        const double lr = warmup_ > 0 ? lr_ * std::min(1.0, static_cast<double>(steps_) / warmup_) : lr_;
        auto p = params.views();
        auto g = grads.views();
        auto v = velocity_.views();
        for (std::size_t t = 0; t < p.size(); ++t) {
            if (!selected_[t]) continue;
            for (Eigen::Index j = 0; j < p[t].size(); ++j) {
                v[t].data[j] = momentum_ * v[t].data[j] + scale * g[t].data[j];
                p[t].data[j] -= lr * v[t].data[j];
            }
        }
    }

private:
    Parameters velocity_;
    std::vector<bool> selected_;
    double lr_;
    double momentum_;
    int warmup_;
    long steps_ = 0;
};

void require_finite(double loss, int stage, int epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss in stage " << stage << ", epoch " << epoch << ", batch " << batch
            << "; lower lr or raise batch";
        throw TrainingDiverged(msg.str());
    }
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, int batch, std::mt19937_64& rng) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
        const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch));
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

Vector sigmoid(const Vector& x) {
    return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

/// Forward state of one sequence through the backbone (no adapter).
struct SequencePass {
    std::vector<int> tokens;
    Matrix embedded;
    TrunkCache trunk;
    FeedForwardCache head;
    HeadsCache heads;
};

void forward_sequence(const ExpertEnsemble& ens, std::vector<int> tokens, SequencePass& s) {
    s.tokens = std::move(tokens);
    s.embedded = ens.embed(s.tokens);
    ens.trunk_forward(s.embedded, s.tokens, s.trunk);
    ens.head_forward(pooled_row(s.trunk.x_last_mid), std::nullopt, s.head);
    ens.heads_forward(s.head.y.row(0).transpose(), s.heads);
}

/// d loss / d embedded input for a pass, given d loss / d logits and d loss / d projection.
Matrix backward_sequence(const ExpertEnsemble& ens, const SequencePass& s, const Vector& d_logits, const Vector& d_z,
                         const GradTarget& target) {
    const Vector d_h = ens.heads_backward(s.heads, d_logits, d_z, target);
    const Matrix d_row = ens.head_backward(s.head, d_h.transpose(), target);
    Matrix d_mid = Matrix::Zero(s.trunk.x_last_mid.rows(), s.trunk.x_last_mid.cols());
    d_mid.row(0) = d_row.row(0);
    return ens.trunk_backward(s.trunk, d_mid, target);
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig cfg, const data::Corpus& corpus, data::Splits splits, RunLog* log)
    : cfg_(cfg), corpus_(corpus), splits_(std::move(splits)), log_(log) {
    validate(cfg_);
    for (auto* part : {&splits_.train, &splits_.dev, &splits_.test}) {
        for (auto i : *part) {
            if (i >= corpus_.size()) throw std::out_of_range("split index " + std::to_string(i) + " outside corpus");
        }
    }
}

void Trainer::set_routing(double epsilon, FusionMode mode) {
    TrainConfig next = cfg_;
    next.epsilon = epsilon;
    next.fusion = mode;
    validate(next);
    cfg_ = next;
}

void Trainer::invalidate_features() {
    train_features_.reset();
    dev_features_.reset();
}

double Trainer::dev_micro_f1(const ExpertEnsemble& ensemble, int experts) {
    if (splits_.dev.empty()) return 0.0;
    std::vector<std::vector<int>> pred, gold;
    pred.reserve(splits_.dev.size());
    gold.reserve(splits_.dev.size());
    TrainConfig c = cfg_;
    c.experts = experts;
    if (experts == 0) {
        // Backbone stage: plain sigmoid over the shared classifier.
        for (auto i : splits_.dev) {
            const auto seq = ExpertEnsemble::with_cls(corpus_.samples[i].tokens);
            const auto h = ensemble.encode(ensemble.embed(seq), std::nullopt).pooled;
            pred.push_back(threshold_labels(sigmoid(ensemble.classify(h)), 0.5));
            gold.push_back(corpus_.samples[i].gold);
        }
        return micro_f1(pred, gold);
    }
    ensure_features(ensemble);
    for (std::size_t n = 0; n < splits_.dev.size(); ++n) {
        std::vector<EvidenceVector> ev;
        for (int m = 0; m < experts; ++m) ev.push_back(evidence_at(ensemble, (*dev_features_)[n], m));
        pred.push_back(predict_from_evidence(ev, c).labels);
        gold.push_back(corpus_.samples[splits_.dev[n]].gold);
    }
    return micro_f1(pred, gold);
}

ExpertEnsemble Trainer::train_backbone(const data::LabelTree& tree, StageReport* report) {
    if (splits_.train.empty()) throw std::invalid_argument("train_backbone: empty train split");
    ExpertEnsemble ens(cfg_.model_config(), tree, cfg_.seed);
    invalidate_features();
    if (log_) log_->stage_banner(0, "backbone", splits_.train.size());

    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + 17);
    Parameters grads = ens.params().zeros_like();
    Sgd opt(ens.params(), cfg_, [](const std::string& name) { return !encoder::is_adapter_tensor(name); });
    GradTarget target{&grads, true, true, true, -1};
    const int k = ens.num_labels();

    StageReport rep;
    rep.stage = 0;
    rep.total = rep.masked_in = splits_.train.size();
    rep.masked_in_fraction = 1.0;
    double best = -1.0;
    int stale = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
        const auto batches = make_batches(splits_.train, cfg_.batch, rng);
        double epoch_loss = 0.0;
        int pending = 0;
        grads.set_zero();
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            const auto n = static_cast<Eigen::Index>(batch.size());
            const Matrix label_states = ens.label_tree_encode();
            std::vector<SequencePass> real(batch.size()), key(batch.size());
            std::vector<encoder::TokenMaskResult> masks(batch.size());
            Matrix z(2 * n, cfg_.hidden);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const auto& s = corpus_.samples[batch[i]];
                forward_sequence(ens, ExpertEnsemble::with_cls(s.tokens), real[i]);
                masks[i] = encoder::key_token_mask(real[i].embedded, real[i].tokens, label_states, s.gold,
                                                   cfg_.gamma, cfg_.tau_g, rng, 0);
                forward_sequence(ens, masks[i].masked, key[i]);
                z.row(static_cast<Eigen::Index>(i)) = real[i].heads.z.transpose();
                z.row(n + static_cast<Eigen::Index>(i)) = key[i].heads.z.transpose();
            }
            const auto partner = losses::paired_halves(static_cast<int>(n));
            const auto cl = losses::ntxent_loss(z, partner, cfg_.tau);
            double batch_loss = cl.value;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const auto& s = corpus_.samples[batch[i]];
                const Vector y = multi_hot(s.gold, k);
                const auto bce = losses::bce_loss(sigmoid(real[i].heads.logits), y);
                const auto key_bce = losses::bce_loss(sigmoid(key[i].heads.logits), y);
                batch_loss += inv_n * (bce.value + key_bce.value);
                const auto ii = static_cast<Eigen::Index>(i);
                const Matrix d_real =
                    backward_sequence(ens, real[i], inv_n * bce.gradient, cl.gradient.row(ii).transpose(), target);
                ens.embedding_backward(real[i].tokens, d_real, target);
                const Matrix d_key = backward_sequence(ens, key[i], inv_n * key_bce.gradient,
                                                       cl.gradient.row(n + ii).transpose(), target);
                ens.embedding_backward(key[i].tokens, d_key, target);
                ens.mask_backward(real[i].tokens, real[i].embedded, masks[i], s.gold, cfg_.tau_g, d_key, label_states,
                                  target);
            }
            require_finite(batch_loss, 0, epoch, b);
            epoch_loss += batch_loss;
            if (++pending == cfg_.update || b + 1 == batches.size()) {
                opt.step(ens.params(), grads, 1.0 / pending);
                grads.set_zero();
                pending = 0;
            }
        }
        epoch_loss /= static_cast<double>(batches.size());
        rep.epoch_losses.push_back(epoch_loss);
        rep.epochs_run = epoch;
        rep.dev_micro_f1 = dev_micro_f1(ens, 0);
        if (log_) log_->epoch(0, epoch, epoch_loss, 0.0, 1.0, 0.0, rep.dev_micro_f1);
        if (cfg_.early_stop > 0) {
            if (rep.dev_micro_f1 > best) {
                best = rep.dev_micro_f1;
                stale = 0;
            } else if (++stale >= cfg_.early_stop) {
                break;
            }
        }
    }
    ens.freeze_backbone();
    if (log_) log_->stage_end(0, rep.masked_in, rep.total, 1.0, 0.0, rep.dev_micro_f1);
    if (report) *report = rep;
    return ens;
}

void Trainer::ensure_features(const ExpertEnsemble& ens) {
    if (!ens.backbone_frozen()) throw std::logic_error("expert stages require a frozen backbone");
    if (!train_features_) {
        // One key-token draw per sample, shared by every expert stage.
        std::mt19937_64 rng(cfg_.seed * 0xD1B54A32D192ED03ULL + 29);
        const Matrix label_states = ens.label_tree_encode();
        Features f;
        f.real.reserve(splits_.train.size());
        f.key.reserve(splits_.train.size());
        for (auto i : splits_.train) {
            const auto& s = corpus_.samples[i];
            const auto seq = ExpertEnsemble::with_cls(s.tokens);
            const Matrix emb = ens.embed(seq);
            TrunkCache trunk;
            ens.trunk_forward(emb, seq, trunk);
            f.real.push_back(pooled_row(trunk.x_last_mid));
            const auto mask = encoder::key_token_mask(emb, seq, label_states, s.gold, cfg_.gamma, cfg_.tau_g, rng, 0);
            ens.trunk_forward(ens.embed(mask.masked), mask.masked, trunk);
            f.key.push_back(pooled_row(trunk.x_last_mid));
        }
        train_features_ = std::move(f);
    }
    if (!dev_features_) {
        std::vector<Matrix> dev(splits_.dev.size());
        parallel_for(splits_.dev.size(), cfg_.workers,
                     [&](std::size_t n) { dev[n] = trunk_features(ens, corpus_.samples[splits_.dev[n]].tokens); });
        dev_features_ = std::move(dev);
    }
}

StageReport Trainer::train_expert_stage(int expert, ExpertEnsemble& ens) {
    if (expert < 0 || expert >= ens.config().experts) {
        throw std::out_of_range("expert index " + std::to_string(expert) + " outside the ensemble");
    }
    ensure_features(ens);
    const int stage = expert + 1;
    const auto& feats = *train_features_;
    const std::size_t total = splits_.train.size();
    const int k = ens.num_labels();
    if (log_) log_->stage_banner(stage, "expert " + std::to_string(stage), total);

    // Predecessors are frozen, so their routing is fixed for the whole stage.
    std::vector<std::size_t> routed;  // positions into the train split
    std::vector<double> conflicts(total, 0.0);
    for (std::size_t n = 0; n < total; ++n) {
        std::vector<EvidenceVector> ev;
        for (int m = 0; m < expert; ++m) ev.push_back(evidence_at(ens, feats.real[n], m));
        const double w = cfg_.fusion == FusionMode::dst ? successor_weight(ev) : 1.0;
        if (w > cfg_.epsilon) routed.push_back(n);
    }

    StageReport rep;
    rep.stage = stage;
    rep.total = total;
    rep.masked_in = routed.size();
    rep.masked_in_fraction = total ? static_cast<double>(routed.size()) / static_cast<double>(total) : 0.0;

    std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + 101 * static_cast<std::uint64_t>(stage));
    Parameters grads = ens.params().zeros_like();
    const std::string prefix = "adapter." + std::to_string(expert) + ".";
    Sgd opt(ens.params(), cfg_, [&](const std::string& name) { return name.rfind(prefix, 0) == 0; });
    GradTarget target{&grads, false, false, false, expert};
    const auto schedule = cfg_.anneal_schedule();

    auto mean_conflict_now = [&] {
        if (expert == 0 || cfg_.fusion != FusionMode::dst) return 0.0;
        double sum = 0.0;
        for (std::size_t n = 0; n < total; ++n) {
            const auto prev = evidential::opinion_from_evidence(evidence_at(ens, feats.real[n], expert - 1));
            const auto curr = evidential::opinion_from_evidence(evidence_at(ens, feats.real[n], expert));
            conflicts[n] = evidential::conflict(prev, curr);
            sum += conflicts[n];
        }
        return total ? sum / static_cast<double>(total) : 0.0;
    };

    if (routed.empty()) {
        const std::string msg = "no sample passed the routing mask; adapter " + std::to_string(stage) + " left untouched";
        if (log_) log_->warning(stage, msg);
        rep.skipped = true;
    }

    double best = -1.0;
    int stale = 0;
    for (int epoch = 1; epoch <= cfg_.epochs && !routed.empty(); ++epoch) {
        const double lambda = losses::anneal(epoch, schedule);
        const auto batches = make_batches(routed, cfg_.batch, rng);
        double epoch_loss = 0.0;
        int pending = 0;
        grads.set_zero();
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            const auto n = static_cast<Eigen::Index>(batch.size());
            std::vector<FeedForwardCache> real(batch.size()), key(batch.size());
            std::vector<HeadsCache> real_h(batch.size()), key_h(batch.size());
            Matrix z(2 * n, cfg_.hidden);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                ens.head_forward(feats.real[batch[i]], expert, real[i]);
                ens.heads_forward(real[i].y.row(0).transpose(), real_h[i]);
                ens.head_forward(feats.key[batch[i]], expert, key[i]);
                ens.heads_forward(key[i].y.row(0).transpose(), key_h[i]);
                z.row(static_cast<Eigen::Index>(i)) = real_h[i].z.transpose();
                z.row(n + static_cast<Eigen::Index>(i)) = key_h[i].z.transpose();
            }
            const auto partner = losses::paired_halves(static_cast<int>(n));
            const auto terms = losses::ntxent_terms(z, partner, cfg_.tau);
            const auto cl = losses::ntxent_loss(z, partner, cfg_.tau);
            const double inv_n = 1.0 / static_cast<double>(n);
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const auto ii = static_cast<Eigen::Index>(i);
                const auto& s = corpus_.samples[splits_.train[batch[i]]];
                const double share = 0.5 * (terms[i] + terms[i + batch.size()]);
                const auto loss =
                    losses::single_expert_loss(real_h[i].logits, key_h[i].logits, multi_hot(s.gold, k), share, epoch,
                                               schedule);
                batch_loss += inv_n * loss.value;
                // Sum over samples of the per-sample shares is n times the batch mean.
                const Vector d_h_real =
                    ens.heads_backward(real_h[i], inv_n * loss.grad_logits, cl.gradient.row(ii).transpose(), target);
                (void)ens.head_backward(real[i], d_h_real.transpose(), target);
                const Vector d_h_key = ens.heads_backward(key_h[i], inv_n * loss.grad_key_logits,
                                                          cl.gradient.row(n + ii).transpose(), target);
                (void)ens.head_backward(key[i], d_h_key.transpose(), target);
            }
            require_finite(batch_loss, stage, epoch, b);
            epoch_loss += batch_loss;
            if (++pending == cfg_.update || b + 1 == batches.size()) {
                opt.step(ens.params(), grads, 1.0 / pending);
                grads.set_zero();
                pending = 0;
            }
        }
        epoch_loss /= static_cast<double>(batches.size());
        rep.epoch_losses.push_back(epoch_loss);
        rep.epochs_run = epoch;
        rep.dev_micro_f1 = dev_micro_f1(ens, stage);
        if (log_) {
            log_->epoch(stage, epoch, epoch_loss, lambda, rep.masked_in_fraction, mean_conflict_now(),
                        rep.dev_micro_f1);
        }
        if (cfg_.early_stop > 0) {
            if (rep.dev_micro_f1 > best) {
                best = rep.dev_micro_f1;
                stale = 0;
            } else if (++stale >= cfg_.early_stop) {
                break;
            }
        }
    }

    double u_sum = 0.0;
    for (std::size_t n = 0; n < total; ++n) {
        u_sum += evidential::opinion_from_evidence(evidence_at(ens, feats.real[n], expert)).uncertainty;
    }
    rep.mean_uncertainty = total ? u_sum / static_cast<double>(total) : 1.0;
    rep.mean_conflict = mean_conflict_now();
    if (rep.skipped) rep.dev_micro_f1 = dev_micro_f1(ens, stage);
    if (log_) log_->stage_end(stage, rep.masked_in, rep.total, rep.mean_uncertainty, rep.mean_conflict, rep.dev_micro_f1);
    return rep;
}

std::vector<StageReport> Trainer::train_all(const data::LabelTree& tree, ExpertEnsemble& out) {
    std::vector<StageReport> reports(1);
    out = train_backbone(tree, &reports[0]);
    for (int m = 0; m < cfg_.experts; ++m) reports.push_back(train_expert_stage(m, out));
    return reports;
}

}  // namespace ume::trainer
