#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ume/data.hpp"
#include "ume/tensor.hpp"

/// Tiny text encoder with a frozen-able transformer backbone, per-expert
/// low-rank adapters on the last feed-forward input projection, a
/// hierarchy-propagated label embedding table, and the shared
/// classification/projection heads.
namespace ume::encoder {

struct ModelConfig {
    int vocab_size = 256;
    int hidden = 64;
    int blocks = 2;
    int heads = 4;
    int rank = 8;
    int experts = 3;
    int label_rounds = 2;  // message-passing rounds over the label tree
};

struct LayerNormParams {
    Vector gain;
    Vector bias;
};

struct BlockParams {
    LayerNormParams ln1;
    Matrix wq, wk, wv, wo;
    Vector bq, bk, bv, bo;
    LayerNormParams ln2;
    Matrix w_in;  // hidden x hidden; adapted in the last block
    Vector b_in;
    Matrix w_out;
    Vector b_out;
};

/// delta W = b * a, with a: rank x hidden, b: hidden x rank.
struct AdapterParams {
    Matrix a;
    Matrix b;
};

/// Flat view of one tensor's storage.
struct TensorView {
    std::string name;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;
    bool is_vector;
    [[nodiscard]] Eigen::Index size() const noexcept { return rows * cols; }
};

struct Parameters {
    Matrix token_embedding;  // vocab x hidden
    std::vector<BlockParams> blocks;
    LayerNormParams final_ln;
    std::vector<AdapterParams> adapters;
    Matrix classifier;  // labels x hidden
    Vector classifier_bias;
    Matrix proj1;  // hidden x hidden
    Matrix proj2;
    Matrix label_embedding;  // labels x hidden

    /// Visits every tensor as (name, Matrix& or Vector&) in a fixed order.
    template <class F>
    void for_each(F&& f);
    template <class F>
    void for_each(F&& f) const;

    /// Same shapes, all zeros.
    [[nodiscard]] Parameters zeros_like() const;
    void set_zero();
    /// this += scale * other, tensor by tensor.
    void add_scaled(const Parameters& other, double scale);
    [[nodiscard]] std::size_t count() const;
    [[nodiscard]] std::vector<TensorView> views();
};

bool is_adapter_tensor(const std::string& name);
/// Index of the expert owning an adapter tensor; -1 for other tensors.
int adapter_owner(const std::string& name);

struct EncodeResult {
    Vector pooled;        // first-position output state
    Matrix token_states;  // N x hidden
};

struct TokenMaskResult {
    std::vector<char> kept;     // per position of the input sequence
    std::vector<int> masked;    // tokens with dropped positions set to the pad id
    Matrix probabilities;       // positions x labels, Gumbel-softmax samples
    std::vector<double> gold_mass;  // sum over gold labels of each row
};

/// Fixed sinusoidal position term for one position.
Vector position_encoding(int position, int hidden);

/// Row-normalized (self + parent + children) mean operator raised to `rounds`.
Matrix label_propagation(const data::LabelTree& tree, int rounds);

/// Gumbel-softmax key-token selection. Position i is kept iff the sampled
/// probability mass on the gold labels exceeds gamma. Throws on an empty
/// gold set or gamma outside (0, 1) or tau_g <= 0.
TokenMaskResult key_token_mask(const Matrix& token_embeddings, std::span<const int> tokens,
                               const Matrix& label_embeddings, std::span<const int> gold, double gamma,
                               double tau_g, std::mt19937_64& rng, std::optional<int> always_keep = std::nullopt);

class ExpertEnsemble;

/// Intermediate values of one block's attention sublayer.
struct AttentionCache {
    Matrix x;        // block input
    Matrix ln_hat;   // normalized input
    Vector ln_inv_std;
    Matrix z;        // layer-normed input
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head
    Matrix o;        // concatenated head outputs
    Matrix x_mid;    // x + attention
};

/// Intermediate values of a feed-forward sublayer (+ final norm when it is the
/// last block).
struct FeedForwardCache {
    Matrix x_mid;
    Matrix ln_hat;
    Vector ln_inv_std;
    Matrix z;
    Matrix adapter_hidden;  // z a^T, empty when no adapter
    Matrix u;
    Matrix r;
    Matrix x_out;
    Matrix final_hat;  // only for the last block
    Vector final_inv_std;
    Matrix y;
    int expert = -1;
};

/// Everything before the last block's feed-forward sublayer. Frozen once the
/// backbone is frozen, so it can be computed once per sample and reused.
struct TrunkCache {
    std::vector<int> tokens;
    std::vector<AttentionCache> attention;     // one per block
    std::vector<FeedForwardCache> feedforward; // one per block except the last
    Matrix x_last_mid;                         // input to the last feed-forward sublayer
};

/// Head projections for one pooled state.
struct HeadsCache {
    Vector h;
    Vector logits;
    Vector proj_hidden;  // W1 h before relu
    Vector z;            // projection
};

/// Gradient routing for one backward pass.
struct GradTarget {
    Parameters* grads = nullptr;
    bool backbone = true;  // embeddings, blocks, final norm
    bool heads = true;     // classifier and projector
    bool labels = true;    // label embedding table
    int adapter = -1;      // adapter receiving gradient, -1 for none
};

class ExpertEnsemble {
public:
    ExpertEnsemble() = default;
    /// Gaussian initialization; every adapter b starts at exactly zero.
    ExpertEnsemble(const ModelConfig& cfg, data::LabelTree tree, std::uint64_t seed);
    /// Rebuilds from stored tensors (checkpoint loading). Shapes are validated.
    ExpertEnsemble(const ModelConfig& cfg, data::LabelTree tree, Parameters params, bool frozen);

    [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
    [[nodiscard]] const data::LabelTree& tree() const noexcept { return tree_; }
    [[nodiscard]] int num_labels() const noexcept { return tree_.size(); }
    [[nodiscard]] Parameters& params() noexcept { return params_; }
    [[nodiscard]] const Parameters& params() const noexcept { return params_; }

    [[nodiscard]] bool backbone_frozen() const noexcept { return frozen_; }
    void freeze_backbone() noexcept { frozen_ = true; }

    /// Token lookup plus sinusoidal position term. Throws on ids outside the vocabulary.
    [[nodiscard]] Matrix embed(std::span<const int> tokens) const;

    /// Full forward. `expert` selects one adapter (0-based); nullopt is the
    /// backbone-only pass.
    [[nodiscard]] EncodeResult encode(const Matrix& embedded, std::optional<int> expert) const;

    /// Diagnostic: the last feed-forward input projection applies the summed
    /// delta of all experts at once.
    [[nodiscard]] EncodeResult encode_all_experts(const Matrix& embedded) const;

    [[nodiscard]] Matrix label_tree_encode() const;
    [[nodiscard]] Vector classify(const Vector& h) const;
    [[nodiscard]] Vector project(const Vector& h) const;

    [[nodiscard]] std::size_t parameter_count() const { return params_.count(); }
    /// Parameters owned by a single expert's adapter pair.
    [[nodiscard]] std::size_t adapter_parameter_count() const;

    // -- training interface -------------------------------------------------

    /// Prepends the classification token.
    [[nodiscard]] static std::vector<int> with_cls(std::span<const int> tokens);

    void trunk_forward(const Matrix& embedded, std::span<const int> tokens, TrunkCache& cache) const;
    /// Runs the last feed-forward sublayer and final norm on the given rows of
    /// the trunk output.
    void head_forward(const Matrix& x_last_mid, std::optional<int> expert, FeedForwardCache& cache) const;
    void heads_forward(const Vector& h, HeadsCache& cache) const;

    /// Backprop from d loss / d logits and d loss / d projection into the pooled state.
    [[nodiscard]] Vector heads_backward(const HeadsCache& cache, const Vector& d_logits, const Vector& d_z,
                                        const GradTarget& target) const;
    /// Backprop from d loss / d output rows into d loss / d x_last_mid.
    [[nodiscard]] Matrix head_backward(const FeedForwardCache& cache, const Matrix& d_y,
                                       const GradTarget& target) const;
    /// Backprop through the trunk into the embedding table; returns d loss / d embedded input.
    Matrix trunk_backward(const TrunkCache& cache, const Matrix& d_x_last_mid, const GradTarget& target) const;
    /// Accumulates embedding-table gradients for an embedded sequence.
    void embedding_backward(std::span<const int> tokens, const Matrix& d_embedded, const GradTarget& target) const;
    /// Straight-through gradient of the key-token mask into token and label embeddings.
    void mask_backward(std::span<const int> tokens, const Matrix& embedded, const TokenMaskResult& mask,
                       std::span<const int> gold, double tau_g, const Matrix& d_masked_embedded,
                       const Matrix& label_states, const GradTarget& target) const;

private:
    ModelConfig cfg_;
    data::LabelTree tree_;
    Parameters params_;
    Matrix propagation_;
    bool frozen_ = false;

    void validate_shapes() const;
};

// ---------------------------------------------------------------------------

template <class F>
void Parameters::for_each(F&& f) {
    f(std::string("token_embedding"), token_embedding);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        auto& b = blocks[i];
        const std::string p = "block." + std::to_string(i) + ".";
        f(p + "ln1.gain", b.ln1.gain);
        f(p + "ln1.bias", b.ln1.bias);
        f(p + "wq", b.wq);
        f(p + "bq", b.bq);
        f(p + "wk", b.wk);
        f(p + "bk", b.bk);
        f(p + "wv", b.wv);
        f(p + "bv", b.bv);
        f(p + "wo", b.wo);
        f(p + "bo", b.bo);
        f(p + "ln2.gain", b.ln2.gain);
        f(p + "ln2.bias", b.ln2.bias);
        f(p + "w_in", b.w_in);
        f(p + "b_in", b.b_in);
        f(p + "w_out", b.w_out);
        f(p + "b_out", b.b_out);
    }
    f(std::string("final_ln.gain"), final_ln.gain);
    f(std::string("final_ln.bias"), final_ln.bias);
    for (std::size_t m = 0; m < adapters.size(); ++m) {
        f("adapter." + std::to_string(m) + ".a", adapters[m].a);
        f("adapter." + std::to_string(m) + ".b", adapters[m].b);
    }
    f(std::string("classifier"), classifier);
    f(std::string("classifier_bias"), classifier_bias);
    f(std::string("proj1"), proj1);
    f(std::string("proj2"), proj2);
    f(std::string("label_embedding"), label_embedding);
}

template <class F>
void Parameters::for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each([&](const std::string& name, auto& t) {
        f(name, static_cast<const std::remove_reference_t<decltype(t)>&>(t));
    });
}

}  // namespace ume::encoder
