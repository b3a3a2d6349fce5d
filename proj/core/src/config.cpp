#include "ume/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <type_traits>

namespace ume::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Shortest decimal form that reads back to the same double.
std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const auto t = trim(text);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size() || t.empty()) {
        throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(v)) throw ConfigError("config key '" + key + "': value must be finite");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    const auto t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <class T>
Field number(const std::string& key, T& ref, const std::string& doc) {
    return Field{key, doc,
                 [&ref] {
                     if constexpr (std::is_floating_point_v<T>) {
                         return format_double(ref);
                     } else {
                         return std::to_string(ref);
                     }
                 },
                 [&ref, key](const std::string& v) { ref = parse_number<T>(key, v); }};
}

Field text(const std::string& key, std::string& ref, const std::string& doc) {
    return Field{key, doc, [&ref] { return ref; }, [&ref](const std::string& v) { ref = trim(v); }};
}

Field flag(const std::string& key, bool& ref, const std::string& doc) {
    return Field{key, doc, [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref, key](const std::string& v) { ref = parse_bool(key, v); }};
}

}  // namespace

std::string fusion_name(evidential::FusionMode mode) {
    return mode == evidential::FusionMode::dst ? "dst" : "average";
}

evidential::FusionMode parse_fusion(const std::string& t) {
    const auto v = trim(t);
    if (v == "dst") return evidential::FusionMode::dst;
    if (v == "average") return evidential::FusionMode::average;
    throw ConfigError("fusion-mode must be 'dst' or 'average', got '" + t + "'");
}

std::vector<Field> train_fields(trainer::TrainConfig& c) {
    return {
        number("experts", c.experts, "number of experts M"),
        number("eta", c.eta, "temperature of the weight softmax"),
        number("epsilon", c.epsilon, "routing threshold: expert m trains on samples with w > epsilon"),
        number("r", c.rank, "adapter rank"),
        number("lr", c.lr, "learning rate"),
        number("batch", c.batch, "batch size"),
        number("epoch", c.epochs, "epochs per stage"),
        number("anneal", c.anneal, "KL warm-up horizon in epochs (0: epoch)"),
        number("gamma", c.gamma, "key-token keep threshold on gold probability mass"),
        number("tau-g", c.tau_g, "Gumbel-softmax temperature"),
        number("tau", c.tau, "contrastive temperature"),
        number("thre", c.threshold, "prediction threshold on the fused probability"),
        Field{"fusion-mode", "dst or average",
              [&c] { return fusion_name(c.fusion); },
              [&c](const std::string& v) { c.fusion = parse_fusion(v); }},
        number("seed", c.seed, "random seed for generation, initialization and shuffling"),
        number("momentum", c.momentum, "SGD momentum"),
        number("early-stop", c.early_stop, "patience in epochs on dev micro-F1 (0: off)"),
        number("update", c.update, "batches accumulated per optimizer step"),
        number("warmup", c.warmup, "optimizer steps of linear learning-rate warm-up"),
        number("vocab", c.vocab, "vocabulary size"),
        number("hidden", c.hidden, "encoder width"),
        number("blocks", c.blocks, "encoder blocks"),
        number("heads", c.heads, "attention heads"),
        number("label-rounds", c.label_rounds, "message-passing rounds over the label tree"),
        number("workers", c.workers, "evaluation threads"),
    };
}

std::vector<Field> generator_fields(data::GeneratorConfig& g) {
    return {
        number("depth", g.depth, "label tree depth"),
        number("roots", g.roots, "top-level labels"),
        number("branching", g.branching, "children per internal label"),
        number("ir", g.target_ir, "target imbalance ratio of leaf frequencies"),
        number("tokens-per-label", g.tokens_per_label, "content tokens owned by each label"),
        number("seq-length", g.seq_length, "tokens per sample"),
        number("noise", g.noise_rate, "fraction of uniform noise tokens"),
        number("paths-per-sample", g.paths_per_sample, "gold root-to-node paths per sample"),
        number("partial-path-rate", g.partial_path_rate, "fraction of samples whose path stops above the leaves"),
        number("samples", g.num_samples, "corpus size"),
        number("train-fraction", g.train_fraction, "train share of the corpus"),
        number("dev-fraction", g.dev_fraction, "dev share of the corpus"),
    };
}

std::vector<Field> run_fields(RunConfig& c) {
    auto fields = train_fields(c.train);
    for (auto& f : fields) {
        // Shared keys also drive the generator.
        if (f.key == "seed") {
            f.set = [&c](const std::string& v) {
                c.train.seed = parse_number<std::uint64_t>("seed", v);
                c.generator.seed = c.train.seed;
            };
        } else if (f.key == "vocab") {
            f.set = [&c](const std::string& v) {
                c.train.vocab = parse_number<int>("vocab", v);
                c.generator.vocab_size = c.train.vocab;
            };
        }
    }
    for (auto& f : generator_fields(c.generator)) fields.push_back(std::move(f));
    fields.push_back(text("data-dir", c.data_dir, "directory for generated corpus, tree and splits"));
    fields.push_back(text("corpus", c.corpus, "corpus file (default <data-dir>/corpus.jsonl)"));
    fields.push_back(text("tree", c.tree, "label-tree file (default <data-dir>/tree.tsv)"));
    fields.push_back(text("splits", c.splits, "split manifest (default <data-dir>/splits.json)"));
    fields.push_back(text("out-dir", c.out_dir, "output directory for checkpoints, logs and reports"));
    fields.push_back(text("checkpoint", c.checkpoint, "checkpoint file (default <out-dir>/model.ckpt)"));
    fields.push_back(text("split", c.split, "split to evaluate: train, dev or test"));
    fields.push_back(text("tail-n", c.tail_n, "comma list of N for tail macro-F1, or auto for ceil(K/4)"));
    fields.push_back(text("bucketing", c.bucketing, "participation buckets: level or frequency"));
    fields.push_back(flag("ignore-empty-classes", c.ignore_empty_classes,
                          "drop classes with no gold and no predictions from macro-F1"));
    fields.push_back(text("axis", c.axis, "sweep axis: eta, epsilon or experts"));
    fields.push_back(text("values", c.values, "comma list of sweep values"));
    fields.push_back(text("graph", c.graph, "informational only"));
    fields.push_back(text("multi", c.multi, "informational only"));
    fields.push_back(text("wandb", c.wandb, "informational only"));
    return fields;
}

std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& source) {
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(number) + ": expected key=value");
        }
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(number) + ": empty key");
        if (!out.emplace(key, trim(line.substr(eq + 1))).second) {
            throw ConfigError(source + ":" + std::to_string(number) + ": key '" + key + "' repeated");
        }
    }
    return out;
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_key_values(in, path.string());
}

void apply_values(const std::vector<Field>& fields, const std::map<std::string, std::string>& values) {
    for (const auto& [key, value] : values) {
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
        if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
        it->set(value);
    }
}

std::string echo(const std::vector<Field>& fields) {
    std::string out;
    for (const auto& f : fields) out += f.key + "=" + f.get() + "\n";
    return out;
}

trainer::TrainConfig train_config_from_echo(const std::string& text) {
    trainer::TrainConfig cfg;
    std::istringstream in(text);
    apply_values(train_fields(cfg), parse_key_values(in, "config echo"));
    return cfg;
}

std::filesystem::path RunConfig::corpus_path() const {
    return corpus.empty() ? std::filesystem::path(data_dir) / "corpus.jsonl" : std::filesystem::path(corpus);
}
std::filesystem::path RunConfig::tree_path() const {
    return tree.empty() ? std::filesystem::path(data_dir) / "tree.tsv" : std::filesystem::path(tree);
}
std::filesystem::path RunConfig::splits_path() const {
    return splits.empty() ? std::filesystem::path(data_dir) / "splits.json" : std::filesystem::path(splits);
}
std::filesystem::path RunConfig::checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out_dir) / "model.ckpt" : std::filesystem::path(checkpoint);
}

void validate(RunConfig& c) {
    try {
        trainer::validate(c.train);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    static const std::set<std::string> splits{"train", "dev", "test"};
    if (!splits.count(c.split)) throw ConfigError("split must be train, dev or test, got '" + c.split + "'");
    if (c.bucketing != "level" && c.bucketing != "frequency") {
        throw ConfigError("bucketing must be level or frequency, got '" + c.bucketing + "'");
    }
    if (c.axis != "eta" && c.axis != "epsilon" && c.axis != "experts") {
        throw ConfigError("axis must be eta, epsilon or experts, got '" + c.axis + "'");
    }
    const auto& g = c.generator;
    if (!(g.train_fraction > 0.0 && g.dev_fraction >= 0.0 && g.train_fraction + g.dev_fraction < 1.0)) {
        throw ConfigError("train-fraction + dev-fraction must leave a nonempty test share");
    }
    if (!(g.noise_rate >= 0.0 && g.noise_rate <= 1.0)) throw ConfigError("noise must be in [0, 1]");
    if (!(g.partial_path_rate >= 0.0 && g.partial_path_rate <= 1.0)) {
        throw ConfigError("partial-path-rate must be in [0, 1]");
    }
}

}  // namespace ume::config
