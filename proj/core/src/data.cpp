#include "ume/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ume::data {

namespace {

std::string line_suffix(std::size_t line) {
    return line == 0 ? std::string{} : " (line " + std::to_string(line) + ")";
}

}  // namespace

DataError::DataError(const std::string& what, std::size_t line)
    : std::runtime_error(what + line_suffix(line)), line_(line) {}

InfeasibleIr::InfeasibleIr(double requested, double achievable)
    : std::invalid_argument("imbalance ratio " + std::to_string(requested) +
                            " is not achievable for the requested sizes; closest achievable bound is " +
                            std::to_string(achievable)),
      achievable_(achievable) {}

// ---------------------------------------------------------------------------
// LabelTree

LabelTree::LabelTree(std::vector<std::string> names, std::vector<int> parents)
    : names_(std::move(names)), parents_(std::move(parents)) {
    const int k = static_cast<int>(names_.size());
    if (k < 1) throw DataError("label tree must contain at least one label");
    if (static_cast<int>(parents_.size()) != k) throw DataError("label tree: parent list size mismatch");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) throw DataError("label tree: empty label name");
        if (!seen.insert(n).second) throw DataError("label tree: duplicate label name '" + n + "'");
    }
    children_.assign(static_cast<std::size_t>(k), {});
    for (int i = 0; i < k; ++i) {
        const int p = parents_[static_cast<std::size_t>(i)];
        if (p == kNoParent) continue;
        if (p < 0 || p >= k || p == i) throw DataError("label tree: invalid parent of '" + names_[static_cast<std::size_t>(i)] + "'");
        children_[static_cast<std::size_t>(p)].push_back(i);
    }
    levels_.assign(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < k; ++i) {
        if (parents_[static_cast<std::size_t>(i)] == kNoParent) {
            order_.push_back(i);
            levels_[static_cast<std::size_t>(i)] = 1;
        }
    }
    for (std::size_t head = 0; head < order_.size(); ++head) {
        const int v = order_[head];
        for (int c : children_[static_cast<std::size_t>(v)]) {
            levels_[static_cast<std::size_t>(c)] = levels_[static_cast<std::size_t>(v)] + 1;
            order_.push_back(c);
        }
    }
    if (static_cast<int>(order_.size()) != k) {
        throw DataError("label tree contains a cycle");
    }
    depth_ = *std::max_element(levels_.begin(), levels_.end());
}

std::optional<int> LabelTree::find(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<int>(it - names_.begin());
}

std::vector<int> LabelTree::path_closure(const std::vector<int>& labels) const {
    std::set<int> out;
    for (int l : labels) {
        for (int v = l; v != kNoParent; v = parent(v)) {
            if (!out.insert(v).second) break;
        }
    }
    return {out.begin(), out.end()};
}

LabelTree make_balanced_tree(int depth, int roots, int branching) {
    if (depth < 1 || roots < 1 || branching < 1) {
        throw std::invalid_argument("make_balanced_tree: depth, roots and branching must be >= 1");
    }
    std::vector<std::string> names;
    std::vector<int> parents;
    std::vector<int> frontier;
    for (int r = 0; r < roots; ++r) {
        names.push_back("r" + std::to_string(r));
        parents.push_back(LabelTree::kNoParent);
        frontier.push_back(r);
    }
    for (int level = 2; level <= depth; ++level) {
        std::vector<int> next;
        for (int p : frontier) {
            for (int b = 0; b < branching; ++b) {
                names.push_back(names[static_cast<std::size_t>(p)] + "." + std::to_string(b));
                parents.push_back(p);
                next.push_back(static_cast<int>(names.size()) - 1);
            }
        }
        frontier = std::move(next);
    }
    return LabelTree(std::move(names), std::move(parents));
}

// ---------------------------------------------------------------------------
// Statistics

CorpusStats imbalance_stats(const Corpus& corpus, const std::vector<std::size_t>& indices, int num_labels) {
    if (indices.empty()) throw std::invalid_argument("imbalance_stats: corpus is empty");
    CorpusStats st;
    st.counts.assign(static_cast<std::size_t>(num_labels), 0);
    for (auto i : indices) {
        for (int l : corpus.samples.at(i).gold) st.counts.at(static_cast<std::size_t>(l))++;
    }
    st.n_min = 0;
    for (auto c : st.counts) {
        if (c < 1) continue;
        st.n_max = std::max(st.n_max, c);
        st.n_min = st.n_min == 0 ? c : std::min(st.n_min, c);
    }
    st.imbalance_ratio = st.n_min > 0 ? static_cast<double>(st.n_max) / static_cast<double>(st.n_min) : 1.0;
    return st;
}

CorpusStats imbalance_stats(const Corpus& corpus, int num_labels) {
    std::vector<std::size_t> all(corpus.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return imbalance_stats(corpus, all, num_labels);
}

void count_labels(LabelTree& tree, const Corpus& corpus, const std::vector<std::size_t>& indices) {
    tree.train_counts.assign(static_cast<std::size_t>(tree.size()), 0);
    for (auto i : indices) {
        for (int l : corpus.samples.at(i).gold) tree.train_counts[static_cast<std::size_t>(l)]++;
    }
}

Corpus subset(const Corpus& corpus, const std::vector<std::size_t>& indices) {
    Corpus out;
    out.samples.reserve(indices.size());
    for (auto i : indices) out.samples.push_back(corpus.samples.at(i));
    return out;
}

Splits make_splits(std::size_t n, double train_fraction, double dev_fraction, std::uint64_t seed) {
    if (train_fraction < 0 || dev_fraction < 0 || train_fraction + dev_fraction > 1.0 + 1e-12) {
        throw std::invalid_argument("make_splits: fractions must be non-negative and sum to <= 1");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    const auto n_dev = std::min(n - n_train, static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(n))));
    Splits s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.dev.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), idx.end());
    for (auto* part : {&s.train, &s.dev, &s.test}) std::sort(part->begin(), part->end());
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic generator

std::vector<int> label_vocabulary(const GeneratorConfig& cfg, int label) {
    std::vector<int> v(static_cast<std::size_t>(cfg.tokens_per_label));
    std::iota(v.begin(), v.end(), kFirstContentToken + label * cfg.tokens_per_label);
    return v;
}

namespace {

// Integer allocation of `total` proportional to `weights` (largest remainder).
std::vector<std::int64_t> allocate(std::int64_t total, const std::vector<double>& weights) {
    const double z = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::int64_t> out(weights.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::int64_t used = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = static_cast<double>(total) * weights[i] / z;
        out[i] = static_cast<std::int64_t>(std::floor(exact));
        used += out[i];
        rem.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t j = 0; used < total; ++j, ++used) out[rem[j % rem.size()].second]++;
    return out;
}

// Terminal label of each path slot, before shuffling. Leaves are ranked by a
// seeded permutation and receive weight rank^-exponent; a deterministic share
// of each leaf's slots is truncated to a shallower ancestor.
struct SlotPlan {
    std::vector<int> terminals;
    std::vector<std::int64_t> counts;  // per-label path counts
    double ir = 1.0;
    std::int64_t min_leaf = 0;
};

SlotPlan plan_slots(const LabelTree& tree, const std::vector<int>& ranked_leaves, std::int64_t slots,
                    double exponent, double partial_rate) {
    std::vector<double> w(ranked_leaves.size());
    for (std::size_t r = 0; r < w.size(); ++r) w[r] = std::pow(static_cast<double>(r + 1), -exponent);
    const auto per_leaf = allocate(slots, w);

    SlotPlan plan;
    plan.counts.assign(static_cast<std::size_t>(tree.size()), 0);
    plan.min_leaf = -1;
    for (std::size_t r = 0; r < ranked_leaves.size(); ++r) {
        const int leaf = ranked_leaves[r];
        const int depth = tree.level(leaf);
        const auto truncated = depth > 1 ? static_cast<std::int64_t>(std::llround(partial_rate * static_cast<double>(per_leaf[r]))) : 0;
        const auto full = per_leaf[r] - truncated;
        plan.min_leaf = plan.min_leaf < 0 ? full : std::min(plan.min_leaf, full);
        for (std::int64_t j = 0; j < per_leaf[r]; ++j) {
            int terminal = leaf;
            if (j >= full) {
                // Round-robin over shallower levels 1 .. depth-1.
                const int stop_level = 1 + static_cast<int>((j - full) % (depth - 1));
                while (tree.level(terminal) > stop_level) terminal = tree.parent(terminal);
            }
            plan.terminals.push_back(terminal);
            for (int v = terminal; v != LabelTree::kNoParent; v = tree.parent(v)) {
                plan.counts[static_cast<std::size_t>(v)]++;
            }
        }
    }
    std::int64_t lo = 0, hi = 0;
    for (auto c : plan.counts) {
        if (c < 1) continue;
        hi = std::max(hi, c);
        lo = lo == 0 ? c : std::min(lo, c);
    }
    plan.ir = lo > 0 ? static_cast<double>(hi) / static_cast<double>(lo) : 1.0;
    return plan;
}

}  // namespace

GeneratedData generate_synthetic(const GeneratorConfig& cfg) {
    if (cfg.branching < 1) throw std::invalid_argument("generate_synthetic: branching must be >= 1");
    if (cfg.depth < 2 || cfg.depth > 4) throw std::invalid_argument("generate_synthetic: depth must be in [2, 4]");
    if (cfg.roots < 1) throw std::invalid_argument("generate_synthetic: roots must be >= 1");
    if (cfg.num_samples < 1) throw std::invalid_argument("generate_synthetic: num_samples must be >= 1");
    if (cfg.seq_length < 1) throw std::invalid_argument("generate_synthetic: seq_length must be >= 1");
    if (cfg.paths_per_sample < 1) throw std::invalid_argument("generate_synthetic: paths_per_sample must be >= 1");
    if (cfg.noise_rate < 0.0 || cfg.noise_rate > 1.0) throw std::invalid_argument("generate_synthetic: noise_rate must be in [0, 1]");
    if (cfg.partial_path_rate < 0.0 || cfg.partial_path_rate >= 1.0) {
        throw std::invalid_argument("generate_synthetic: partial_path_rate must be in [0, 1)");
    }
    if (!(cfg.target_ir >= 1.0)) throw std::invalid_argument("generate_synthetic: target_ir must be >= 1");

    GeneratedData out;
    out.tree = make_balanced_tree(cfg.depth, cfg.roots, cfg.branching);
    const LabelTree& tree = out.tree;
    if (kFirstContentToken + tree.size() * cfg.tokens_per_label > cfg.vocab_size) {
        throw std::invalid_argument("generate_synthetic: vocab_size " + std::to_string(cfg.vocab_size) +
                                    " too small for " + std::to_string(tree.size()) + " labels x " +
                                    std::to_string(cfg.tokens_per_label) + " tokens");
    }

    std::mt19937_64 rng(cfg.seed);
    std::vector<int> leaves;
    for (int l : tree.topological_order()) {
        if (tree.is_leaf(l)) leaves.push_back(l);
    }
    std::shuffle(leaves.begin(), leaves.end(), rng);
    const std::int64_t slots = static_cast<std::int64_t>(cfg.num_samples) * cfg.paths_per_sample;

    // Fit the power-law exponent so the realized ratio hits the target.
    auto ir_at = [&](double s) { return plan_slots(tree, leaves, slots, s, cfg.partial_path_rate); };
    const SlotPlan flat = ir_at(0.0);
    double lo = 0.0;
    double hi = 0.0;
    SlotPlan best = flat;
    if (cfg.target_ir < flat.ir * 0.9) {
        throw InfeasibleIr(cfg.target_ir, flat.ir);
    }
    if (cfg.target_ir > flat.ir) {
        // Largest exponent that still leaves every leaf at least one full path.
        hi = 1.0;
        while (hi < 64.0 && ir_at(hi).min_leaf >= 1 && ir_at(hi).ir < cfg.target_ir) hi *= 2.0;
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + hi);
            const auto p = ir_at(mid);
            if (p.min_leaf >= 1 && p.ir < cfg.target_ir) lo = mid; else hi = mid;
        }
        const auto below = ir_at(lo);
        const auto above = ir_at(hi);
        best = below;
        out.exponent = lo;
        if (above.min_leaf >= 1 && std::abs(above.ir - cfg.target_ir) < std::abs(below.ir - cfg.target_ir)) {
            best = above;
            out.exponent = hi;
        }
        if (std::abs(best.ir - cfg.target_ir) > 0.1 * cfg.target_ir) {
            throw InfeasibleIr(cfg.target_ir, best.ir);
        }
    }

    std::vector<int> terminals = best.terminals;
    std::shuffle(terminals.begin(), terminals.end(), rng);

    const int n_noise = static_cast<int>(std::lround(cfg.noise_rate * cfg.seq_length));
    std::uniform_int_distribution<int> noise_token(kFirstContentToken, cfg.vocab_size - 1);
    std::uniform_int_distribution<int> vocab_slot(0, cfg.tokens_per_label - 1);
    out.corpus.samples.reserve(static_cast<std::size_t>(cfg.num_samples));
    for (int s = 0; s < cfg.num_samples; ++s) {
        std::vector<int> terms(terminals.begin() + static_cast<std::ptrdiff_t>(s) * cfg.paths_per_sample,
                               terminals.begin() + static_cast<std::ptrdiff_t>(s + 1) * cfg.paths_per_sample);
        Sample sample;
        sample.gold = tree.path_closure(terms);
        // Deeper labels are more specific and contribute proportionally more tokens.
        std::vector<double> level_weight;
        for (int l : sample.gold) level_weight.push_back(tree.level(l));
        std::discrete_distribution<std::size_t> pick_label(level_weight.begin(), level_weight.end());

        std::vector<char> is_noise(static_cast<std::size_t>(cfg.seq_length), 0);
        std::fill(is_noise.begin(), is_noise.begin() + n_noise, 1);
        std::shuffle(is_noise.begin(), is_noise.end(), rng);
        sample.tokens.reserve(static_cast<std::size_t>(cfg.seq_length));
        for (int t = 0; t < cfg.seq_length; ++t) {
            if (is_noise[static_cast<std::size_t>(t)]) {
                sample.tokens.push_back(noise_token(rng));
            } else {
                const int label = sample.gold[pick_label(rng)];
                sample.tokens.push_back(kFirstContentToken + label * cfg.tokens_per_label + vocab_slot(rng));
            }
        }
        out.corpus.samples.push_back(std::move(sample));
    }
    out.splits = make_splits(out.corpus.size(), cfg.train_fraction, cfg.dev_fraction, cfg.seed);
    count_labels(out.tree, out.corpus, out.splits.train);
    return out;
}

// ---------------------------------------------------------------------------
// File formats

LabelTree parse_label_tree(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label tree file '" + path.string() + "'");
    std::vector<std::string> names;
    std::map<std::string, int> index;
    std::vector<int> parents;
    auto intern = [&](const std::string& n) {
        auto [it, fresh] = index.emplace(n, static_cast<int>(names.size()));
        if (fresh) {
            names.push_back(n);
            parents.push_back(LabelTree::kNoParent);
        }
        return it->second;
    };
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw DataError("malformed edge, expected 'parent<TAB>child'", lineno);
        }
        const std::string parent = line.substr(0, tab);
        const std::string child = line.substr(tab + 1);
        if (parent.empty() || child.empty()) throw DataError("empty label name", lineno);
        if (parent == child) throw DataError("label tree contains a cycle at '" + child + "'", lineno);
        const int p = intern(parent);
        const int c = intern(child);
        if (parents[static_cast<std::size_t>(c)] != LabelTree::kNoParent && parents[static_cast<std::size_t>(c)] != p) {
            throw DataError("label '" + child + "' has more than one parent", lineno);
        }
        // Walking up from p must not reach c.
        for (int v = p; v != LabelTree::kNoParent; v = parents[static_cast<std::size_t>(v)]) {
            if (v == c) throw DataError("label tree contains a cycle at '" + child + "'", lineno);
        }
        parents[static_cast<std::size_t>(c)] = p;
    }
    if (names.empty()) throw DataError("label tree file '" + path.string() + "' has no edges");
    // Renumber breadth-first (roots and children in order of first appearance)
    // so that a written tree parses back with identical label ids.
    const LabelTree raw(names, parents);
    std::vector<int> new_id(names.size());
    for (std::size_t i = 0; i < raw.topological_order().size(); ++i) {
        new_id[static_cast<std::size_t>(raw.topological_order()[i])] = static_cast<int>(i);
    }
    std::vector<std::string> bfs_names(names.size());
    std::vector<int> bfs_parents(names.size());
    for (std::size_t old = 0; old < names.size(); ++old) {
        const auto id = static_cast<std::size_t>(new_id[old]);
        bfs_names[id] = names[old];
        bfs_parents[id] = parents[old] == LabelTree::kNoParent ? LabelTree::kNoParent
                                                               : new_id[static_cast<std::size_t>(parents[old])];
    }
    return LabelTree(std::move(bfs_names), std::move(bfs_parents));
}

void write_label_tree(const std::filesystem::path& path, const LabelTree& tree) {
    for (int l = 0; l < tree.size(); ++l) {
        if (tree.parent(l) == LabelTree::kNoParent && tree.is_leaf(l)) {
            throw DataError("label '" + tree.name(l) + "' has neither parent nor children and cannot be written as an edge");
        }
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    for (int l : tree.topological_order()) {
        for (int c : tree.children(l)) out << tree.name(l) << '\t' << tree.name(c) << '\n';
    }
}

int token_id(const std::string& word, int vocab_size) {
    int value = 0;
    const auto* first = word.data();
    const auto* last = word.data() + word.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec == std::errc{} && ptr == last) {
        if (value < 0 || value >= vocab_size) {
            throw std::out_of_range("token id " + word + " outside vocabulary of size " + std::to_string(vocab_size));
        }
        return value;
    }
    // FNV-1a into the content range.
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : word) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    const auto range = static_cast<std::uint64_t>(vocab_size - kFirstContentToken);
    return kFirstContentToken + static_cast<int>(h % range);
}

ParsedCorpus parse_corpus(const std::filesystem::path& path, const LabelTree& tree, int vocab_size) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file '" + path.string() + "'");
    ParsedCorpus out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed record: ") + e.what(), lineno);
        }
        if (!rec.is_object() || !rec.contains("text") || !rec.contains("labels") || !rec["text"].is_string() ||
            !rec["labels"].is_array()) {
            throw DataError("record needs a string 'text' and an array 'labels'", lineno);
        }
        Sample s;
        std::istringstream words(rec["text"].get<std::string>());
        std::string w;
        while (words >> w) {
            try {
                s.tokens.push_back(token_id(w, vocab_size));
            } catch (const std::out_of_range& e) {
                throw DataError(e.what(), lineno);
            }
        }
        std::vector<int> labels;
        for (const auto& l : rec["labels"]) {
            if (!l.is_string()) throw DataError("label names must be strings", lineno);
            const auto id = tree.find(l.get<std::string>());
            if (!id) throw DataError("unknown label '" + l.get<std::string>() + "'", lineno);
            labels.push_back(*id);
        }
        if (labels.empty()) throw DataError("record has no labels", lineno);
        std::sort(labels.begin(), labels.end());
        labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
        s.gold = tree.path_closure(labels);
        if (s.gold.size() != labels.size()) ++out.closure_warnings;
        out.corpus.samples.push_back(std::move(s));
    }
    return out;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus, const LabelTree& tree) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    for (const auto& s : corpus.samples) {
        std::string text;
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            if (i) text += ' ';
            text += std::to_string(s.tokens[i]);
        }
        nlohmann::json labels = nlohmann::json::array();
        for (int l : s.gold) labels.push_back(tree.name(l));
        out << nlohmann::json{{"text", text}, {"labels", labels}}.dump() << '\n';
    }
}

Splits parse_splits(const std::filesystem::path& path, std::size_t corpus_size) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split manifest '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed split manifest: ") + e.what());
    }
    Splits s;
    std::set<std::size_t> seen;
    for (auto [key, dst] : {std::pair{"train", &s.train}, std::pair{"dev", &s.dev}, std::pair{"test", &s.test}}) {
        if (!j.contains(key) || !j[key].is_array()) throw DataError(std::string("split manifest lacks '") + key + "'");
        for (const auto& v : j[key]) {
            if (!v.is_number_unsigned()) throw DataError("split indices must be non-negative integers");
            const auto idx = v.get<std::size_t>();
            if (idx >= corpus_size) throw DataError("split index " + std::to_string(idx) + " out of range");
            if (!seen.insert(idx).second) throw DataError("split index " + std::to_string(idx) + " appears twice");
            dst->push_back(idx);
        }
    }
    return s;
}

void write_splits(const std::filesystem::path& path, const Splits& splits) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << nlohmann::json{{"train", splits.train}, {"dev", splits.dev}, {"test", splits.test}}.dump() << '\n';
}

}  // namespace ume::data
