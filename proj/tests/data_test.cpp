#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

#include "ume/data.hpp"

using namespace ume::data;
namespace fs = std::filesystem;

namespace {

// Scratch directory removed on scope exit.
struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("ume-data-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    fs::path write(const std::string& name, const std::string& body) const {
        std::ofstream(path / name) << body;
        return path / name;
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Corpus corpus_with_counts(const std::vector<std::pair<int, int>>& label_counts) {
    Corpus c;
    for (auto [label, n] : label_counts) {
        for (int i = 0; i < n; ++i) c.samples.push_back({{2}, {label}});
    }
    return c;
}

int deepest(const LabelTree& tree, const std::vector<int>& labels) {
    return *std::max_element(labels.begin(), labels.end(),
                             [&](int a, int b) { return tree.level(a) < tree.level(b); });
}

// Descends from the roots towards the child whose subtree collects the most
// vocabulary hits; stops when no child subtree has at least two hits.
int frequency_oracle_terminal(const GeneratorConfig& cfg, const LabelTree& tree, const std::vector<int>& tokens) {
    std::vector<int> hits(static_cast<std::size_t>(tree.size()), 0);
    for (int t : tokens) {
        const int label = (t - kFirstContentToken) / cfg.tokens_per_label;
        if (t >= kFirstContentToken && label < tree.size()) hits[static_cast<std::size_t>(label)]++;
    }
    std::vector<int> subtree = hits;
    const auto& order = tree.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (tree.parent(*it) != LabelTree::kNoParent) {
            subtree[static_cast<std::size_t>(tree.parent(*it))] += subtree[static_cast<std::size_t>(*it)];
        }
    }
    auto best_of = [&](const std::vector<int>& options) {
        return *std::max_element(options.begin(), options.end(), [&](int a, int b) {
            return subtree[static_cast<std::size_t>(a)] < subtree[static_cast<std::size_t>(b)];
        });
    };
    std::vector<int> roots;
    for (int l = 0; l < tree.size(); ++l) {
        if (tree.parent(l) == LabelTree::kNoParent) roots.push_back(l);
    }
    int node = best_of(roots);
    while (!tree.is_leaf(node)) {
        const int child = best_of(tree.children(node));
        if (subtree[static_cast<std::size_t>(child)] < 2) break;
        node = child;
    }
    return node;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("imbalance ratio examples") {
    CHECK(imbalance_stats(corpus_with_counts({{0, 49}, {1, 1}}), 2).imbalance_ratio == 49.0);
    CHECK(imbalance_stats(corpus_with_counts({{0, 7}, {1, 7}, {2, 7}}), 3).imbalance_ratio == 1.0);
    const auto st = imbalance_stats(corpus_with_counts({{0, 10}, {1, 5}, {2, 2}}), 4);
    CHECK(st.imbalance_ratio == 5.0);
    CHECK(st.n_min == 2);
    CHECK(st.n_max == 10);
    CHECK(st.counts == std::vector<std::int64_t>{10, 5, 2, 0});
    CHECK_THROWS_AS(imbalance_stats(Corpus{}, 3), std::invalid_argument);
}

TEST_CASE("imbalance ratio is at least one on random corpora") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> n(1, 50);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::pair<int, int>> counts;
        for (int l = 0; l < 6; ++l) {
            if (rng() % 3) counts.emplace_back(l, n(rng));
        }
        if (counts.empty()) counts.emplace_back(0, 1);
        CHECK(imbalance_stats(corpus_with_counts(counts), 6).imbalance_ratio >= 1.0);
    }
}

TEST_CASE("flat single-chain generator gives equal counts") {
    GeneratorConfig cfg;
    cfg.depth = 2;
    cfg.roots = 1;
    cfg.branching = 1;
    cfg.target_ir = 1.0;
    cfg.partial_path_rate = 0.0;  // truncated paths would inflate the root
    cfg.num_samples = 200;
    const auto g = generate_synthetic(cfg);
    const auto st = imbalance_stats(g.corpus, g.tree.size());
    CHECK(st.imbalance_ratio == 1.0);
    CHECK(st.counts[0] == st.counts[1]);
}

TEST_CASE("generator hits the requested imbalance within ten percent") {
    GeneratorConfig cfg;
    cfg.depth = 2;
    cfg.roots = 1;
    cfg.branching = 5;
    cfg.target_ir = 50.0;
    cfg.num_samples = 1000;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        cfg.seed = seed;
        const auto g = generate_synthetic(cfg);
        const double ir = imbalance_stats(g.corpus, g.tree.size()).imbalance_ratio;
        CHECK(ir >= 45.0);
        CHECK(ir <= 55.0);
    }

    GeneratorConfig def;
    def.num_samples = 2000;
    const auto g = generate_synthetic(def);
    const double ir = imbalance_stats(g.corpus, g.tree.size()).imbalance_ratio;
    CHECK(ir == doctest::Approx(def.target_ir).epsilon(0.1));
}

TEST_CASE("infeasible imbalance is rejected with the achievable bound") {
    GeneratorConfig cfg;
    cfg.depth = 2;
    cfg.roots = 1;
    cfg.branching = 5;
    cfg.num_samples = 50;
    cfg.target_ir = 5000.0;
    try {
        (void)generate_synthetic(cfg);
        FAIL("expected InfeasibleIr");
    } catch (const InfeasibleIr& e) {
        CHECK(e.achievable() < 5000.0);
        CHECK(e.achievable() >= 1.0);
        CHECK(std::string(e.what()).find("achievable") != std::string::npos);
    }
    cfg.target_ir = 50.0;
    cfg.depth = 5;
    CHECK_THROWS_AS((void)generate_synthetic(cfg), std::invalid_argument);
    cfg.depth = 2;
    cfg.branching = 0;
    CHECK_THROWS_AS((void)generate_synthetic(cfg), std::invalid_argument);
}

TEST_CASE("generation is deterministic given the seed") {
    GeneratorConfig cfg;
    cfg.num_samples = 500;
    TempDir dir;
    const auto a = generate_synthetic(cfg);
    const auto b = generate_synthetic(cfg);
    write_corpus(dir.path / "a.jsonl", a.corpus, a.tree);
    write_corpus(dir.path / "b.jsonl", b.corpus, b.tree);
    CHECK(slurp(dir.path / "a.jsonl") == slurp(dir.path / "b.jsonl"));
    CHECK(a.splits.train == b.splits.train);

    cfg.seed = 2;
    const auto c = generate_synthetic(cfg);
    write_corpus(dir.path / "c.jsonl", c.corpus, c.tree);
    CHECK(slurp(dir.path / "a.jsonl") != slurp(dir.path / "c.jsonl"));
}

TEST_CASE("generated samples are path closed and use disjoint label vocabularies") {
    GeneratorConfig cfg;
    cfg.num_samples = 1000;
    const auto g = generate_synthetic(cfg);
    for (const auto& s : g.corpus.samples) {
        CHECK(!s.gold.empty());
        CHECK(g.tree.path_closure(s.gold) == s.gold);
        CHECK(static_cast<int>(s.tokens.size()) == cfg.seq_length);
    }
    std::set<int> seen;
    for (int l = 0; l < g.tree.size(); ++l) {
        for (int t : label_vocabulary(cfg, l)) CHECK(seen.insert(t).second);
    }
}

TEST_CASE("a frequency-count oracle recovers the deepest gold label") {
    for (double noise : {0.0, 0.3}) {
        GeneratorConfig cfg;
        cfg.noise_rate = noise;
        cfg.num_samples = 2000;
        const auto g = generate_synthetic(cfg);
        std::size_t correct = 0;
        for (const auto& s : g.corpus.samples) {
            correct += frequency_oracle_terminal(cfg, g.tree, s.tokens) == deepest(g.tree, s.gold);
        }
        const double acc = static_cast<double>(correct) / static_cast<double>(g.corpus.size());
        INFO("noise " << noise << " accuracy " << acc);
        CHECK(acc >= 0.9);
    }
}

TEST_CASE("splits are disjoint, cover the corpus and repeat under a seed") {
    for (std::size_t n : {0u, 1u, 7u, 100u, 1001u}) {
        const auto s = make_splits(n, 5.0 / 7.0, 1.0 / 7.0, 9);
        std::set<std::size_t> all;
        for (const auto* part : {&s.train, &s.dev, &s.test}) {
            for (auto i : *part) CHECK(all.insert(i).second);
        }
        CHECK(all.size() == n);
        const auto again = make_splits(n, 5.0 / 7.0, 1.0 / 7.0, 9);
        CHECK(again.train == s.train);
        CHECK(again.dev == s.dev);
        CHECK(again.test == s.test);
    }
    CHECK(make_splits(1000, 0.7, 0.1, 1).train != make_splits(1000, 0.7, 0.1, 2).train);
    CHECK_THROWS_AS((void)make_splits(10, 0.8, 0.3, 1), std::invalid_argument);
}

TEST_CASE("split manifests round trip and reject overlap") {
    TempDir dir;
    const auto s = make_splits(50, 0.6, 0.2, 4);
    write_splits(dir.path / "s.json", s);
    const auto back = parse_splits(dir.path / "s.json", 50);
    CHECK(back.train == s.train);
    CHECK(back.dev == s.dev);
    CHECK(back.test == s.test);
    CHECK_THROWS_AS((void)parse_splits(dir.path / "s.json", 10), DataError);
    const auto dup = dir.write("dup.json", R"({"train":[0,1],"dev":[1],"test":[]})");
    CHECK_THROWS_AS((void)parse_splits(dup, 5), DataError);
}

TEST_CASE("label tree files") {
    TempDir dir;
    const auto tree = parse_label_tree(dir.write("t.tsv", "a\tb\na\tc\nb\td\n"));
    CHECK(tree.size() == 4);
    CHECK(tree.depth() == 3);
    const int d = *tree.find("d");
    CHECK(tree.level(d) == 3);
    CHECK(tree.name(tree.parent(d)) == "b");
    for (int l = 0; l < tree.size(); ++l) {
        if (tree.parent(l) != LabelTree::kNoParent) CHECK(tree.level(l) == tree.level(tree.parent(l)) + 1);
    }

    write_label_tree(dir.path / "out.tsv", tree);
    const auto again = parse_label_tree(dir.path / "out.tsv");
    CHECK(again.names() == tree.names());
    CHECK(again.parents() == tree.parents());

    try {
        (void)parse_label_tree(dir.write("cycle.tsv", "a\tb\nb\ta\n"));
        FAIL("expected a cycle error");
    } catch (const DataError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("cycle") != std::string::npos);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    try {
        (void)parse_label_tree(dir.write("bad.tsv", "a\tb\nno tab here\n"));
        FAIL("expected a malformed-line error");
    } catch (const DataError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS((void)parse_label_tree(dir.write("two.tsv", "a\tc\nb\tc\n")), DataError);
    CHECK_THROWS_AS((void)parse_label_tree(dir.path / "missing.tsv"), DataError);
    CHECK_THROWS_AS((void)parse_label_tree(dir.write("empty.tsv", "")), DataError);
}

TEST_CASE("path closure") {
    const auto tree = make_balanced_tree(3, 2, 2);
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
        std::vector<int> labels;
        for (int l = 0; l < tree.size(); ++l) {
            if (rng() % 5 == 0) labels.push_back(l);
        }
        const auto closed = tree.path_closure(labels);
        CHECK(std::is_sorted(closed.begin(), closed.end()));
        CHECK(tree.path_closure(closed) == closed);
        for (int l : closed) {
            if (tree.parent(l) != LabelTree::kNoParent) {
                CHECK(std::binary_search(closed.begin(), closed.end(), tree.parent(l)));
            }
        }
        for (int l : labels) CHECK(std::binary_search(closed.begin(), closed.end(), l));
    }
}

TEST_CASE("corpus files") {
    TempDir dir;
    const auto tree = parse_label_tree(dir.write("t.tsv", "a\tb\nb\tc\n"));

    const auto empty = parse_corpus(dir.write("empty.jsonl", ""), tree, 50);
    CHECK(empty.corpus.size() == 0);
    CHECK(empty.closure_warnings == 0);

    const auto leaf = parse_corpus(dir.write("leaf.jsonl", R"({"text": "3 4 hello", "labels": ["c"]})" "\n"), tree, 50);
    REQUIRE(leaf.corpus.size() == 1);
    CHECK(leaf.closure_warnings == 1);
    CHECK(leaf.corpus.samples[0].gold.size() == 3);
    CHECK(leaf.corpus.samples[0].tokens[0] == 3);
    CHECK(leaf.corpus.samples[0].tokens[2] >= kFirstContentToken);

    const auto closed = parse_corpus(dir.write("closed.jsonl", R"({"text": "3", "labels": ["a", "b"]})" "\n"), tree, 50);
    CHECK(closed.closure_warnings == 0);

    const std::string good = R"({"text": "3", "labels": ["a"]})";
    try {
        (void)parse_corpus(dir.write("unknown.jsonl", good + "\n" + good + "\n" + R"({"text": "3", "labels": ["zz"]})" + "\n"),
                           tree, 50);
        FAIL("expected unknown label");
    } catch (const DataError& e) {
        CHECK(e.line() == 3);
        CHECK(std::string(e.what()).find("zz") != std::string::npos);
    }
    try {
        (void)parse_corpus(dir.write("malformed.jsonl", good + "\n{not json\n"), tree, 50);
        FAIL("expected malformed line");
    } catch (const DataError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS((void)parse_corpus(dir.write("oov.jsonl", R"({"text": "99", "labels": ["a"]})"), tree, 50), DataError);
    CHECK_THROWS_AS((void)parse_corpus(dir.write("nolabels.jsonl", R"({"text": "3", "labels": []})"), tree, 50), DataError);

    GeneratorConfig cfg;
    cfg.num_samples = 100;
    const auto g = generate_synthetic(cfg);
    write_corpus(dir.path / "g.jsonl", g.corpus, g.tree);
    const auto back = parse_corpus(dir.path / "g.jsonl", g.tree, cfg.vocab_size);
    REQUIRE(back.corpus.size() == g.corpus.size());
    for (std::size_t i = 0; i < back.corpus.size(); ++i) {
        CHECK(back.corpus.samples[i].tokens == g.corpus.samples[i].tokens);
        CHECK(back.corpus.samples[i].gold == g.corpus.samples[i].gold);
    }
}

TEST_CASE("in-memory tree validation") {
    CHECK_THROWS_AS(LabelTree({}, {}), DataError);
    CHECK_THROWS_AS(LabelTree({"a", "a"}, {-1, -1}), DataError);
    CHECK_THROWS_AS(LabelTree({"a", "b", "c"}, {2, 0, 1}), DataError);
    CHECK_THROWS_AS(LabelTree({"a"}, {0}), DataError);
    const LabelTree one({"x"}, {LabelTree::kNoParent});
    CHECK(one.depth() == 1);
    CHECK(one.is_leaf(0));
}

}  // TEST_SUITE
