#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

/// Label hierarchies, corpora, the synthetic long-tailed generator and the
/// on-disk formats for all three.
namespace ume::data {

/// Reserved token ids. Content tokens start at kFirstContentToken.
inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kFirstContentToken = 2;

/// Raised for malformed input files; carries the 1-based line number (0 when
/// the problem is not tied to a line).
class DataError : public std::runtime_error {
public:
    DataError(const std::string& what, std::size_t line = 0);
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class LabelTree {
public:
    static constexpr int kNoParent = -1;

    LabelTree() = default;
    /// Parents are indices into `names`; kNoParent marks a root. Throws
    /// DataError on cycles, duplicate or empty names, and bad indices.
    LabelTree(std::vector<std::string> names, std::vector<int> parents);

    [[nodiscard]] int size() const noexcept { return static_cast<int>(names_.size()); }
    [[nodiscard]] int depth() const noexcept { return depth_; }
    [[nodiscard]] const std::string& name(int label) const { return names_.at(static_cast<std::size_t>(label)); }
    [[nodiscard]] const std::vector<std::string>& names() const noexcept { return names_; }
    [[nodiscard]] int parent(int label) const { return parents_.at(static_cast<std::size_t>(label)); }
    [[nodiscard]] const std::vector<int>& parents() const noexcept { return parents_; }
    /// 1-based level; roots are level 1.
    [[nodiscard]] int level(int label) const { return levels_.at(static_cast<std::size_t>(label)); }
    [[nodiscard]] const std::vector<int>& children(int label) const {
        return children_.at(static_cast<std::size_t>(label));
    }
    [[nodiscard]] bool is_leaf(int label) const { return children(label).empty(); }
    [[nodiscard]] std::optional<int> find(const std::string& name) const;
    /// Label ids ordered root-first; every parent precedes its children.
    [[nodiscard]] const std::vector<int>& topological_order() const noexcept { return order_; }

    /// Label plus all ancestors, sorted ascending.
    [[nodiscard]] std::vector<int> path_closure(const std::vector<int>& labels) const;

    std::vector<std::int64_t> train_counts;  // filled by count_labels(); empty until then

private:
    std::vector<std::string> names_;
    std::vector<int> parents_;
    std::vector<int> levels_;
    std::vector<std::vector<int>> children_;
    std::vector<int> order_;
    int depth_ = 0;
};

struct Sample {
    std::vector<int> tokens;
    std::vector<int> gold;  // sorted, path-closed label ids
};

struct Corpus {
    std::vector<Sample> samples;
    [[nodiscard]] std::size_t size() const noexcept { return samples.size(); }
};

struct Splits {
    std::vector<std::size_t> train;
    std::vector<std::size_t> dev;
    std::vector<std::size_t> test;
};

struct CorpusStats {
    std::vector<std::int64_t> counts;  // per label
    std::int64_t n_min = 0;            // over labels with count >= 1
    std::int64_t n_max = 0;
    double imbalance_ratio = 1.0;
};

struct GeneratorConfig {
    int depth = 3;
    int roots = 3;
    int branching = 3;
    double target_ir = 50.0;
    int vocab_size = 256;
    int tokens_per_label = 5;
    int seq_length = 16;
    double noise_rate = 0.3;
    int paths_per_sample = 1;
    /// Fraction of samples whose path stops above the leaf level, split evenly
    /// across the shallower levels.
    double partial_path_rate = 0.3;
    int num_samples = 7000;
    double train_fraction = 5.0 / 7.0;
    double dev_fraction = 1.0 / 7.0;
    std::uint64_t seed = 1;
};

struct GeneratedData {
    Corpus corpus;
    LabelTree tree;
    Splits splits;
    double exponent = 0.0;  // fitted power-law exponent of leaf frequencies
};

/// Raised when the requested imbalance ratio cannot be met at the requested size.
class InfeasibleIr : public std::invalid_argument {
public:
    InfeasibleIr(double requested, double achievable);
    [[nodiscard]] double achievable() const noexcept { return achievable_; }

private:
    double achievable_;
};

/// Balanced tree with `roots` level-1 labels and `branching` children per
/// internal label down to `depth` levels.
LabelTree make_balanced_tree(int depth, int roots, int branching);

GeneratedData generate_synthetic(const GeneratorConfig& cfg);

/// Content-token vocabulary owned by a label in the synthetic generator.
std::vector<int> label_vocabulary(const GeneratorConfig& cfg, int label);

/// Result of reading a corpus file.
struct ParsedCorpus {
    Corpus corpus;
    std::size_t closure_warnings = 0;  // records whose gold set lacked ancestors
};

/// Label-tree file: one `parent<TAB>child` edge per line.
LabelTree parse_label_tree(const std::filesystem::path& path);
void write_label_tree(const std::filesystem::path& path, const LabelTree& tree);

/// Corpus file: one JSON object per line with `text` and `labels`.
/// Numeric tokens are used as ids (must be < vocab_size); other words are
/// hashed into the content range.
ParsedCorpus parse_corpus(const std::filesystem::path& path, const LabelTree& tree, int vocab_size);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus, const LabelTree& tree);

/// Split manifest: JSON object with `train`, `dev`, `test` index arrays.
Splits parse_splits(const std::filesystem::path& path, std::size_t corpus_size);
void write_splits(const std::filesystem::path& path, const Splits& splits);

/// Seeded shuffle-and-cut into disjoint train/dev/test index sets.
Splits make_splits(std::size_t n, double train_fraction, double dev_fraction, std::uint64_t seed);

/// Maps a whitespace-delimited word to a token id.
int token_id(const std::string& word, int vocab_size);

CorpusStats imbalance_stats(const Corpus& corpus, int num_labels);
CorpusStats imbalance_stats(const Corpus& corpus, const std::vector<std::size_t>& indices, int num_labels);

/// Fills tree.train_counts from the given sample subset.
void count_labels(LabelTree& tree, const Corpus& corpus, const std::vector<std::size_t>& indices);

Corpus subset(const Corpus& corpus, const std::vector<std::size_t>& indices);

}  // namespace ume::data
