#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "ume/checkpoint.hpp"
#include "ume/config.hpp"
#include "ume/data.hpp"
#include "ume/metrics.hpp"
#include "ume/trainer.hpp"

namespace ume::cli {

namespace fs = std::filesystem;
using config::ConfigError;
using config::RunConfig;

namespace {

using KeyValues = std::map<std::string, std::string>;

struct Loaded {
    data::LabelTree tree;
    data::Corpus corpus;
    data::Splits splits;
    std::size_t closure_warnings = 0;
};

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& p, const std::string& text) {
    ensure_parent(p);
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw data::DataError("cannot write " + p.string());
    out << text;
}

void echo_config(const fs::path& dir, RunConfig cfg) {
    write_text(dir / "config.txt", config::echo(config::run_fields(cfg)));
}

Loaded load_data(const RunConfig& cfg, std::ostream& out) {
    Loaded d;
    d.tree = data::parse_label_tree(cfg.tree_path());
    auto parsed = data::parse_corpus(cfg.corpus_path(), d.tree, cfg.train.vocab);
    d.corpus = std::move(parsed.corpus);
    d.closure_warnings = parsed.closure_warnings;
    d.splits = data::parse_splits(cfg.splits_path(), d.corpus.size());
    data::count_labels(d.tree, d.corpus, d.splits.train);
    if (d.closure_warnings > 0) {
        out << "warning: " << d.closure_warnings << " records lacked ancestor labels; ancestors were added\n";
    }
    return d;
}

const std::vector<std::size_t>& split_indices(const Loaded& d, const std::string& split) {
    if (split == "train") return d.splits.train;
    if (split == "dev") return d.splits.dev;
    return d.splits.test;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    for (const auto& item : split_list(text)) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || !std::isfinite(v)) throw ConfigError("values: cannot parse '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("values: need at least one value");
    return out;
}

std::vector<int> parse_tail_n(const std::string& text, int labels) {
    if (text == "auto") return {};
    std::vector<int> out;
    for (double v : parse_values(text)) {
        if (v != std::floor(v) || v < 1 || v > labels) {
            throw ConfigError("tail-n entries must be integers in [1, " + std::to_string(labels) + "]");
        }
        out.push_back(static_cast<int>(v));
    }
    return out;
}

/// Training settings stored in the checkpoint, overridden by keys the user set explicitly.
trainer::TrainConfig effective_train_config(const trainer::TrainConfig& stored, const KeyValues& explicit_values) {
    trainer::TrainConfig cfg = stored;
    auto fields = config::train_fields(cfg);
    KeyValues overrides;
    for (const auto& f : fields) {
        if (auto it = explicit_values.find(f.key); it != explicit_values.end()) overrides.insert(*it);
    }
    config::apply_values(fields, overrides);
    try {
        trainer::validate(cfg);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

struct Evaluated {
    trainer::TrainConfig train;
    metrics::EvalReport report;
    trainer::EvidenceTable table;
    std::vector<std::vector<int>> gold;
    data::LabelTree tree;
    metrics::EvalOptions options;
};

Evaluated evaluate_checkpoint(RunConfig& cfg, const KeyValues& explicit_values, std::ostream& out) {
    const auto path = cfg.checkpoint_path();
    auto ck = checkpoint::load(path);
    Evaluated ev;
    ev.train = effective_train_config(ck.config, explicit_values);
    if (ev.train.experts > ck.ensemble.config().experts) {
        throw ConfigError("checkpoint " + path.string() + " has " + std::to_string(ck.ensemble.config().experts) +
                          " experts; cannot evaluate " + std::to_string(ev.train.experts));
    }
    cfg.train = ev.train;
    const auto d = load_data(cfg, out);
    if (d.tree.names() != ck.ensemble.tree().names()) {
        throw data::DataError("label tree " + cfg.tree_path().string() + " does not match checkpoint " + path.string());
    }
    ev.tree = d.tree;
    const auto& idx = split_indices(d, cfg.split);
    if (idx.empty()) throw data::DataError("split '" + cfg.split + "' is empty");
    ev.table = trainer::evidence_table(ck.ensemble, d.corpus, idx, ev.train.experts, ev.train.workers);
    for (auto i : idx) ev.gold.push_back(d.corpus.samples[i].gold);
    ev.options.tail_n = parse_tail_n(cfg.tail_n, d.tree.size());
    ev.options.ignore_empty = cfg.ignore_empty_classes;
    ev.options.frequency_buckets = cfg.bucketing == "frequency";
    ev.report = metrics::evaluate(ev.tree, ev.gold, trainer::predict_all(ev.table, ev.train), ev.train, ev.options);
    return ev;
}

void print_report(std::ostream& out, const metrics::EvalReport& r) {
    out << std::fixed << std::setprecision(4);
    out << "fusion=" << r.fusion_mode << " experts=" << r.experts << " samples=" << r.samples << '\n';
    out << "micro_f1=" << r.f1.micro << " macro_f1=" << r.f1.macro << '\n';
    for (const auto& [n, v] : r.tail_macro) out << "tail_macro_f1[N=" << n << "]=" << v << '\n';
    out << "last_expert_utilization=" << r.utilization << "% avg_last_conflict=" << r.avg_last_conflict << '\n';
    out.unsetf(std::ios::floatfield);
}

void write_eval_files(const fs::path& dir, const RunConfig& cfg, const Evaluated& ev) {
    fs::create_directories(dir);
    echo_config(dir, cfg);
    write_text(dir / "summary.json", metrics::summary_json(ev.report) + "\n");
    std::ostringstream pc;
    metrics::write_per_class_csv(pc, ev.tree, ev.report.f1);
    write_text(dir / "per_class.csv", pc.str());
}

// -- commands -------------------------------------------------------------

int cmd_gen_data(RunConfig& cfg, std::ostream& out) {
    const auto gen = data::generate_synthetic(cfg.generator);
    ensure_parent(cfg.tree_path());
    data::write_label_tree(cfg.tree_path(), gen.tree);
    ensure_parent(cfg.corpus_path());
    data::write_corpus(cfg.corpus_path(), gen.corpus, gen.tree);
    ensure_parent(cfg.splits_path());
    data::write_splits(cfg.splits_path(), gen.splits);
    echo_config(cfg.data_dir, cfg);
    const auto stats = data::imbalance_stats(gen.corpus, gen.tree.size());
    out << "samples=" << gen.corpus.size() << " labels=" << gen.tree.size() << " depth=" << gen.tree.depth()
        << " train=" << gen.splits.train.size() << " dev=" << gen.splits.dev.size()
        << " test=" << gen.splits.test.size() << '\n';
    out << "imbalance_ratio=" << stats.imbalance_ratio << " (target " << cfg.generator.target_ir
        << ") n_max=" << stats.n_max << " n_min=" << stats.n_min << " exponent=" << gen.exponent << '\n';
    out << "wrote " << cfg.corpus_path().string() << ", " << cfg.tree_path().string() << ", "
        << cfg.splits_path().string() << '\n';
    return kOk;
}

int cmd_train(RunConfig& cfg, std::ostream& out) {
    const auto d = load_data(cfg, out);
    fs::create_directories(cfg.out_dir);
    echo_config(cfg.out_dir, cfg);
    std::ofstream log_file(fs::path(cfg.out_dir) / "train.log", std::ios::trunc);
    trainer::RunLog log(&log_file);
    trainer::Trainer tr(cfg.train, d.corpus, d.splits, &log);
    encoder::ExpertEnsemble ens;
    const auto reports = tr.train_all(d.tree, ens);
    ensure_parent(cfg.checkpoint_path());
    checkpoint::save(cfg.checkpoint_path(), ens, cfg.train, cfg.train.experts);
    out << std::fixed << std::setprecision(4);
    for (const auto& r : reports) {
        out << "stage " << r.stage << (r.stage == 0 ? " (backbone)" : "") << ": epochs=" << r.epochs_run
            << " final_loss=" << (r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back())
            << " masked_in=" << 100.0 * r.masked_in_fraction << "%";
        if (r.stage > 0) out << " mean_u=" << r.mean_uncertainty << " mean_conflict=" << r.mean_conflict;
        out << " dev_micro_f1=" << r.dev_micro_f1 << (r.skipped ? " [skipped]" : "") << '\n';
    }
    out.unsetf(std::ios::floatfield);
    out << "checkpoint " << cfg.checkpoint_path().string() << '\n';
    return kOk;
}

int cmd_eval(RunConfig& cfg, const KeyValues& explicit_values, std::ostream& out) {
    const auto ev = evaluate_checkpoint(cfg, explicit_values, out);
    const auto dir = fs::path(cfg.out_dir) / ("eval-" + cfg.split);
    write_eval_files(dir, cfg, ev);
    print_report(out, ev.report);
    out << "report " << dir.string() << '\n';
    return kOk;
}

int cmd_analyze(RunConfig& cfg, const KeyValues& explicit_values, std::ostream& out) {
    const auto ev = evaluate_checkpoint(cfg, explicit_values, out);
    const auto dir = fs::path(cfg.out_dir) / ("analysis-" + cfg.split);
    write_eval_files(dir, cfg, ev);

    std::ostringstream part, bins;
    metrics::write_participation_csv(part, ev.report.participation);
    write_text(dir / "participation.csv", part.str());
    metrics::write_conflict_csv(bins, ev.report.conflict_bins);
    write_text(dir / "conflict_bins.csv", bins.str());

    // Prefixes of the ensemble: metrics as experts are added.
    std::ostringstream experts;
    experts << "experts,metric,value\n";
    for (int m = 1; m <= ev.train.experts; ++m) {
        auto c = ev.train;
        c.experts = m;
        const auto r = metrics::evaluate(ev.tree, ev.gold, trainer::predict_all(ev.table, c), c, ev.options);
        experts << m << ",micro_f1," << r.f1.micro << '\n' << m << ",macro_f1," << r.f1.macro << '\n';
        for (const auto& [n, v] : r.tail_macro) experts << m << ",tail_macro_f1_n" << n << ',' << v << '\n';
        experts << m << ",utilization_percent," << r.utilization << '\n'
                << m << ",avg_last_conflict," << r.avg_last_conflict << '\n';
    }
    write_text(dir / "experts.csv", experts.str());

    // eta only enters inference, so its sensitivity needs no retraining.
    std::ostringstream eta;
    eta << "eta,metric,value\n";
    for (double e : {0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 2.0}) {
        auto c = ev.train;
        c.eta = e;
        const auto r = metrics::evaluate(ev.tree, ev.gold, trainer::predict_all(ev.table, c), c, ev.options);
        eta << e << ",micro_f1," << r.f1.micro << '\n' << e << ",macro_f1," << r.f1.macro << '\n';
    }
    write_text(dir / "eta.csv", eta.str());

    std::ostringstream thre;
    thre << "threshold,metric,value\n";
    for (double t : {0.5, 0.55, 0.6, 2.0 / 3.0, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95}) {
        auto c = ev.train;
        c.threshold = t;
        const auto r = metrics::evaluate(ev.tree, ev.gold, trainer::predict_all(ev.table, c), c, ev.options);
        thre << t << ",micro_f1," << r.f1.micro << '\n' << t << ",macro_f1," << r.f1.macro << '\n';
    }
    write_text(dir / "thresholds.csv", thre.str());

    print_report(out, ev.report);
    out << "analysis " << dir.string() << '\n';
    return kOk;
}

int cmd_sweep(RunConfig& cfg, std::ostream& out) {
    const auto values = parse_values(cfg.values);
    int max_experts = cfg.train.experts;
    if (cfg.axis == "experts") {
        max_experts = 0;
        for (double v : values) {
            if (v != std::floor(v) || v < 1 || v > 64) throw ConfigError("experts values must be integers in [1, 64]");
            max_experts = std::max(max_experts, static_cast<int>(v));
        }
    } else if (cfg.axis == "epsilon") {
        for (double v : values) {
            if (!(v >= 0.0 && v < 1.0)) throw ConfigError("epsilon values must be in [0, 1)");
        }
    } else {
        for (double v : values) {
            if (!(v > 0.0)) throw ConfigError("eta values must be > 0");
        }
    }
    const auto d = load_data(cfg, out);
    const auto& idx = split_indices(d, cfg.split);
    if (idx.empty()) throw data::DataError("split '" + cfg.split + "' is empty");
    fs::create_directories(cfg.out_dir);
    echo_config(cfg.out_dir, cfg);
    std::ofstream log_file(fs::path(cfg.out_dir) / ("sweep-" + cfg.axis + ".log"), std::ios::trunc);
    trainer::RunLog log(&log_file);

    auto base = cfg.train;
    base.experts = max_experts;
    trainer::Trainer tr(base, d.corpus, d.splits, &log);
    const auto backbone = tr.train_backbone(d.tree);

    metrics::EvalOptions options;
    options.tail_n = parse_tail_n(cfg.tail_n, d.tree.size());
    options.ignore_empty = cfg.ignore_empty_classes;
    options.frequency_buckets = cfg.bucketing == "frequency";
    std::vector<std::vector<int>> gold;
    for (auto i : idx) gold.push_back(d.corpus.samples[i].gold);

    const auto rows = metrics::sweep(cfg.axis, values, [&](double v) {
        auto c = cfg.train;
        if (cfg.axis == "eta") c.eta = v;
        if (cfg.axis == "epsilon") c.epsilon = v;
        if (cfg.axis == "experts") c.experts = static_cast<int>(v);
        tr.set_routing(c.epsilon, c.fusion);
        auto ens = backbone;
        for (int m = 0; m < c.experts; ++m) tr.train_expert_stage(m, ens);
        const auto table = trainer::evidence_table(ens, d.corpus, idx, c.experts, c.workers);
        return metrics::evaluate(d.tree, gold, trainer::predict_all(table, c), c, options);
    });

    std::ostringstream csv;
    metrics::write_sweep_csv(csv, cfg.axis, rows);
    const auto path = fs::path(cfg.out_dir) / ("sweep-" + cfg.axis + ".csv");
    write_text(path, csv.str());
    out << csv.str() << "table " << path.string() << '\n';
    return kOk;
}

struct Command {
    const char* name;
    const char* help;
};

constexpr Command kCommands[] = {
    {"gen-data", "generate a synthetic long-tailed hierarchical corpus"},
    {"train", "train the backbone and every expert stage, write a checkpoint and run log"},
    {"eval", "evaluate a checkpoint on a split"},
    {"analyze", "evaluation plus participation, conflict, expert-count, eta and threshold tables"},
    {"sweep", "train and evaluate once per value of eta, epsilon or experts"},
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Uncertainty-gated multi-expert fusion for long-tailed hierarchical multi-label classification"};
    app.name("ume");
    app.require_subcommand(1, 1);

    RunConfig defaults;
    const auto default_fields = config::run_fields(defaults);
    KeyValues flags;
    std::string config_file;
    std::map<std::string, CLI::App*> subs;
    for (const auto& c : kCommands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", config_file, "key=value config file; flags override its values");
        for (const auto& f : default_fields) {
            const std::string key = f.key;
            sub->add_option_function<std::string>(
                "--" + key, [&flags, key](const std::string& v) { flags[key] = v; },
                f.doc + " (default: " + f.get() + ")");
        }
        subs[c.name] = sub;
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kConfigError;
    }

    try {
        KeyValues explicit_values;
        if (!config_file.empty()) explicit_values = config::read_key_values(config_file);
        for (const auto& [k, v] : flags) explicit_values[k] = v;
        RunConfig cfg;
        config::apply_values(config::run_fields(cfg), explicit_values);
        config::validate(cfg);

        if (subs["gen-data"]->parsed()) return cmd_gen_data(cfg, out);
        if (subs["train"]->parsed()) return cmd_train(cfg, out);
        if (subs["eval"]->parsed()) return cmd_eval(cfg, explicit_values, out);
        if (subs["analyze"]->parsed()) return cmd_analyze(cfg, explicit_values, out);
        if (subs["sweep"]->parsed()) return cmd_sweep(cfg, out);
        err << "no command given\n";
        return kConfigError;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const data::InfeasibleIr& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const data::DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const checkpoint::CheckpointError& e) {
        err << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        err << "runtime error: " << e.what() << '\n';
        return kRuntimeError;
    }
}

}  // namespace ume::cli
