#include "ume/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ume::metrics {

MultiHot::MultiHot(std::size_t rows, int labels)
    : rows_(rows), labels_(labels), bits_(rows * static_cast<std::size_t>(labels), 0) {
    if (labels < 0) throw std::invalid_argument("MultiHot: negative label count");
}

MultiHot MultiHot::from_sets(const std::vector<std::vector<int>>& sets, int labels) {
    MultiHot m(sets.size(), labels);
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (int k : sets[i]) m.set(i, k);
    }
    return m;
}

void MultiHot::set(std::size_t row, int label, bool on) {
    if (row >= rows_ || label < 0 || label >= labels_) {
        throw std::out_of_range("MultiHot: entry (" + std::to_string(row) + ", " + std::to_string(label) +
                                ") outside " + std::to_string(rows_) + " x " + std::to_string(labels_));
    }
    bits_[row * static_cast<std::size_t>(labels_) + static_cast<std::size_t>(label)] = on ? 1 : 0;
}

namespace {

double f1_of(std::int64_t tp, std::int64_t predicted, std::int64_t support) {
    const auto denom = predicted + support;
    return denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
}

double macro_over(const F1Report& r, const std::vector<int>& labels, bool ignore_empty) {
    double sum = 0.0;
    std::size_t n = 0;
    for (int k : labels) {
        const auto& c = r.per_class[static_cast<std::size_t>(k)];
        if (ignore_empty && c.support == 0 && c.predicted == 0) continue;
        sum += c.f1;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

F1Report micro_macro_f1(const MultiHot& predicted, const MultiHot& gold, bool ignore_empty) {
    if (predicted.rows() != gold.rows() || predicted.labels() != gold.labels()) {
        throw std::invalid_argument("micro_macro_f1: prediction matrix is " + std::to_string(predicted.rows()) + " x " +
                                    std::to_string(predicted.labels()) + " but gold is " +
                                    std::to_string(gold.rows()) + " x " + std::to_string(gold.labels()));
    }
    const int k = gold.labels();
    F1Report r;
    r.per_class.resize(static_cast<std::size_t>(k));
    std::int64_t tp = 0, pp = 0, gp = 0;
    for (int c = 0; c < k; ++c) {
        auto& s = r.per_class[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < gold.rows(); ++i) {
            const bool p = predicted.at(i, c);
            const bool g = gold.at(i, c);
            s.true_positives += (p && g) ? 1 : 0;
            s.predicted += p ? 1 : 0;
            s.support += g ? 1 : 0;
        }
        s.precision = s.predicted ? static_cast<double>(s.true_positives) / static_cast<double>(s.predicted) : 0.0;
        s.recall = s.support ? static_cast<double>(s.true_positives) / static_cast<double>(s.support) : 0.0;
        s.f1 = f1_of(s.true_positives, s.predicted, s.support);
        tp += s.true_positives;
        pp += s.predicted;
        gp += s.support;
    }
    r.micro = f1_of(tp, pp, gp);
    std::vector<int> all(static_cast<std::size_t>(k));
    std::iota(all.begin(), all.end(), 0);
    r.macro = macro_over(r, all, ignore_empty);
    return r;
}

std::vector<int> least_frequent_labels(const data::LabelTree& tree, int n) {
    if (tree.train_counts.size() != static_cast<std::size_t>(tree.size())) {
        throw std::invalid_argument("least_frequent_labels: label tree has no train counts");
    }
    if (n < 0 || n > tree.size()) {
        throw std::invalid_argument("tail size " + std::to_string(n) + " outside [0, " + std::to_string(tree.size()) +
                                    "]");
    }
    std::vector<int> order(static_cast<std::size_t>(tree.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto ca = tree.train_counts[static_cast<std::size_t>(a)];
        const auto cb = tree.train_counts[static_cast<std::size_t>(b)];
        return ca != cb ? ca < cb : tree.name(a) < tree.name(b);
    });
    order.resize(static_cast<std::size_t>(n));
    return order;
}

double tail_macro_f1(const MultiHot& predicted, const MultiHot& gold, const data::LabelTree& tree, int n,
                     bool ignore_empty) {
    const auto r = micro_macro_f1(predicted, gold, ignore_empty);
    // Summing in label order makes N = K reproduce the global macro bit for bit.
    auto labels = least_frequent_labels(tree, n);
    std::sort(labels.begin(), labels.end());
    return macro_over(r, labels, ignore_empty);
}

const char* bucket_name(Bucket b) {
    switch (b) {
        case Bucket::head: return "head";
        case Bucket::medium: return "medium";
        case Bucket::tail: return "tail";
    }
    return "?";
}

Bucket level_bucket(const data::LabelTree& tree, const std::vector<int>& gold) {
    int deepest = 1;
    for (int g : gold) deepest = std::max(deepest, tree.level(g));
    return deepest <= 1 ? Bucket::head : deepest == 2 ? Bucket::medium : Bucket::tail;
}

Bucket frequency_bucket(const data::LabelTree& tree, const std::vector<int>& gold) {
    if (tree.train_counts.size() != static_cast<std::size_t>(tree.size())) {
        throw std::invalid_argument("frequency_bucket: label tree has no train counts");
    }
    const auto order = least_frequent_labels(tree, tree.size());
    std::vector<int> rank(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    int rarest = tree.size();
    for (int g : gold) rarest = std::min(rarest, rank[static_cast<std::size_t>(g)]);
    const double pos = static_cast<double>(rarest) / static_cast<double>(tree.size());
    return pos < 1.0 / 3.0 ? Bucket::tail : pos < 2.0 / 3.0 ? Bucket::medium : Bucket::head;
}

ParticipationTable participation(const std::vector<trainer::RoutingRecord>& routing,
                                 const std::vector<Bucket>& buckets) {
    if (routing.size() != buckets.size()) throw std::invalid_argument("participation: routing/bucket size mismatch");
    ParticipationTable t;
    t.experts = routing.empty() ? 0 : static_cast<int>(routing.front().size());
    const auto m = static_cast<std::size_t>(t.experts);
    std::vector<std::vector<double>> sums(kBuckets, std::vector<double>(m, 0.0));
    t.counts.assign(kBuckets, 0);
    for (std::size_t i = 0; i < routing.size(); ++i) {
        const auto& w = routing[i].weights;
        if (w.size() != m) throw std::invalid_argument("participation: records disagree on the expert count");
        const double total = std::accumulate(w.begin(), w.end(), 0.0);
        const auto b = static_cast<std::size_t>(buckets[i]);
        ++t.counts[b];
        // w^1 = 1 keeps total > 0.
        for (std::size_t j = 0; j < m; ++j) sums[b][j] += w[j] / total;
    }
    t.shares.resize(kBuckets);
    for (std::size_t b = 0; b < kBuckets; ++b) {
        if (t.counts[b] == 0) continue;
        t.shares[b].resize(m);
        for (std::size_t j = 0; j < m; ++j) t.shares[b][j] = 100.0 * sums[b][j] / static_cast<double>(t.counts[b]);
    }
    return t;
}

std::vector<ConflictBin> conflict_error_bins(const std::vector<double>& conflicts, const std::vector<char>& correct) {
    if (conflicts.size() != correct.size()) throw std::invalid_argument("conflict_error_bins: size mismatch");
    std::vector<ConflictBin> bins(5);
    for (int b = 0; b < 5; ++b) {
        bins[static_cast<std::size_t>(b)].lo = 0.2 * b;
        bins[static_cast<std::size_t>(b)].hi = 0.2 * (b + 1);
    }
    for (std::size_t i = 0; i < conflicts.size(); ++i) {
        const double c = std::clamp(conflicts[i], 0.0, 1.0);
        const auto b = std::min<std::size_t>(4, static_cast<std::size_t>(c / 0.2));
        ++bins[b].count;
        if (!correct[i]) ++bins[b].errors;
    }
    return bins;
}

double utilization(const std::vector<trainer::RoutingRecord>& routing, double threshold) {
    if (routing.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& r : routing) {
        if (!r.weights.empty() && r.weights.back() > threshold) ++hit;
    }
    return 100.0 * static_cast<double>(hit) / static_cast<double>(routing.size());
}

double avg_last_conflict(const std::vector<evidential::FusionTrace>& traces) {
    if (traces.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& t : traces) sum += t.conflicts.size() >= 2 ? t.conflicts.back() : 0.0;
    return sum / static_cast<double>(traces.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("spearman: size mismatch");
    if (x.size() < 2) return 0.0;
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return (sxx > 0.0 && syy > 0.0) ? sxy / std::sqrt(sxx * syy) : 0.0;
}

std::vector<trainer::RoutingRecord> routing_from_traces(const std::vector<trainer::Prediction>& predictions,
                                                        double epsilon) {
    std::vector<trainer::RoutingRecord> out;
    out.reserve(predictions.size());
    for (const auto& p : predictions) {
        trainer::RoutingRecord r;
        r.weights = p.trace.weights;
        r.conflicts = p.trace.conflicts;
        r.uncertainties = p.trace.uncertainties;
        for (double w : r.weights) r.mask.push_back(w > epsilon ? 1 : 0);
        out.push_back(std::move(r));
    }
    return out;
}

EvalReport evaluate(const data::LabelTree& tree, const std::vector<std::vector<int>>& gold,
                    const std::vector<trainer::Prediction>& predictions, const trainer::TrainConfig& cfg,
                    const EvalOptions& options) {
    if (gold.size() != predictions.size()) throw std::invalid_argument("evaluate: gold/prediction size mismatch");
    EvalReport rep;
    rep.fusion_mode = cfg.fusion == evidential::FusionMode::dst ? "dst" : "average";
    rep.experts = predictions.empty() ? 0 : static_cast<int>(predictions.front().trace.weights.size());
    rep.samples = gold.size();

    std::vector<std::vector<int>> pred_sets;
    pred_sets.reserve(predictions.size());
    for (const auto& p : predictions) pred_sets.push_back(p.labels);
    const auto pm = MultiHot::from_sets(pred_sets, tree.size());
    const auto gm = MultiHot::from_sets(gold, tree.size());
    rep.f1 = micro_macro_f1(pm, gm, options.ignore_empty);

    auto tail_n = options.tail_n;
    if (tail_n.empty()) tail_n.push_back((tree.size() + 3) / 4);
    if (tree.train_counts.size() == static_cast<std::size_t>(tree.size())) {
        for (int n : tail_n) {
            rep.tail_macro.emplace_back(n, macro_over(rep.f1, least_frequent_labels(tree, n), options.ignore_empty));
        }
    }

    const auto routing = routing_from_traces(predictions, cfg.epsilon);
    std::vector<Bucket> buckets;
    buckets.reserve(gold.size());
    for (const auto& g : gold) {
        buckets.push_back(options.frequency_buckets ? frequency_bucket(tree, g) : level_bucket(tree, g));
    }
    rep.participation = participation(routing, buckets);

    std::vector<double> conflicts;
    std::vector<char> correct;
    std::vector<evidential::FusionTrace> traces;
    double u_sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        conflicts.push_back(predictions[i].trace.max_conflict());
        correct.push_back(predictions[i].labels == gold[i] ? 1 : 0);
        traces.push_back(predictions[i].trace);
        u_sum += predictions[i].trace.fused_uncertainty;
    }
    rep.conflict_bins = conflict_error_bins(conflicts, correct);
    rep.utilization = utilization(routing, options.utilization_threshold);
    rep.avg_last_conflict = avg_last_conflict(traces);
    rep.mean_fused_uncertainty = predictions.empty() ? 0.0 : u_sum / static_cast<double>(predictions.size());

    std::vector<double> hi_c, hi_err;
    for (std::size_t i = 0; i < conflicts.size(); ++i) {
        if (conflicts[i] >= 0.2) {
            hi_c.push_back(conflicts[i]);
            hi_err.push_back(correct[i] ? 0.0 : 1.0);
        }
    }
    rep.conflict_error_spearman = spearman(hi_c, hi_err);
    return rep;
}

std::vector<SweepRow> sweep(const std::string& axis, const std::vector<double>& values,
                            const std::function<EvalReport(double)>& run) {
    if (values.empty()) throw std::invalid_argument("sweep over '" + axis + "' needs at least one value");
    std::vector<SweepRow> rows;
    for (double v : values) {
        const auto t0 = std::chrono::steady_clock::now();
        SweepRow row;
        row.value = v;
        row.report = run(v);
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_per_class_csv(std::ostream& out, const data::LabelTree& tree, const F1Report& f1) {
    out << "label,level,train_count,support,predicted,precision,recall,f1\n";
    for (int k = 0; k < tree.size(); ++k) {
        const auto& c = f1.per_class[static_cast<std::size_t>(k)];
        const auto count = tree.train_counts.empty() ? -1 : tree.train_counts[static_cast<std::size_t>(k)];
        out << tree.name(k) << ',' << tree.level(k) << ',' << count << ',' << c.support << ',' << c.predicted << ','
            << c.precision << ',' << c.recall << ',' << c.f1 << '\n';
    }
}

void write_participation_csv(std::ostream& out, const ParticipationTable& table) {
    out << "bucket,expert,share_percent,samples\n";
    for (int b = 0; b < kBuckets; ++b) {
        const auto bucket = static_cast<Bucket>(b);
        if (!table.present(bucket)) {
            out << bucket_name(bucket) << ",,absent,0\n";
            continue;
        }
        for (int m = 0; m < table.experts; ++m) {
            out << bucket_name(bucket) << ',' << m + 1 << ',' << table.share(bucket, m) << ','
                << table.counts[static_cast<std::size_t>(b)] << '\n';
        }
    }
}

void write_conflict_csv(std::ostream& out, const std::vector<ConflictBin>& bins) {
    out << "bin_lo,bin_hi,count,errors,error_rate\n";
    for (const auto& b : bins) {
        out << b.lo << ',' << b.hi << ',' << b.count << ',' << b.errors << ',' << b.error_rate() << '\n';
    }
}

void write_sweep_csv(std::ostream& out, const std::string& axis, const std::vector<SweepRow>& rows) {
    out << axis << ",micro_f1,macro_f1,tail_n,tail_macro_f1,utilization,avg_last_conflict,wall_seconds\n";
    for (const auto& r : rows) {
        const auto& t = r.report.tail_macro;
        out << r.value << ',' << r.report.f1.micro << ',' << r.report.f1.macro << ','
            << (t.empty() ? 0 : t.front().first) << ',' << (t.empty() ? 0.0 : t.front().second) << ','
            << r.report.utilization << ',' << r.report.avg_last_conflict << ',' << r.wall_seconds << '\n';
    }
}

std::string summary_json(const EvalReport& r) {
    nlohmann::json j;
    j["fusion_mode"] = r.fusion_mode;
    j["experts"] = r.experts;
    j["samples"] = r.samples;
    j["micro_f1"] = r.f1.micro;
    j["macro_f1"] = r.f1.macro;
    j["tail_macro_f1"] = nlohmann::json::array();
    for (const auto& [n, v] : r.tail_macro) j["tail_macro_f1"].push_back({{"n", n}, {"macro_f1", v}});
    nlohmann::json part = nlohmann::json::object();
    for (int b = 0; b < kBuckets; ++b) {
        const auto bucket = static_cast<Bucket>(b);
        part[bucket_name(bucket)] = r.participation.present(bucket)
                                        ? nlohmann::json(r.participation.shares[static_cast<std::size_t>(b)])
                                        : nlohmann::json(nullptr);
    }
    j["participation_percent"] = part;
    j["conflict_bins"] = nlohmann::json::array();
    for (const auto& b : r.conflict_bins) {
        j["conflict_bins"].push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"error_rate", b.error_rate()}});
    }
    j["last_expert_utilization_percent"] = r.utilization;
    j["avg_last_conflict"] = r.avg_last_conflict;
    j["mean_fused_uncertainty"] = r.mean_fused_uncertainty;
    j["conflict_error_spearman"] = r.conflict_error_spearman;
    return j.dump(2);
}

}  // namespace ume::metrics
