#include "ume/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <type_traits>

namespace ume::encoder {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <class T>
constexpr bool kIsVector = std::is_same_v<std::remove_cv_t<T>, Vector>;

void fill_normal(Matrix& m, Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
    Matrix y = x * w.transpose();
    y.rowwise() += b.transpose();
    return y;
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, Matrix& hat, Vector& inv_std) {
    const auto d = static_cast<double>(x.cols());
    hat.resize(x.rows(), x.cols());
    inv_std.resize(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).sum() / d;
        const double var = (x.row(i).array() - mean).square().sum() / d;
        inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
        hat.row(i) = (x.row(i).array() - mean) * inv_std[i];
    }
    Matrix y = hat.array().rowwise() * p.gain.transpose().array();
    y.rowwise() += p.bias.transpose();
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Vector& inv_std, const LayerNormParams& p,
                           LayerNormParams* grad) {
    if (grad != nullptr) {
        grad->gain += (dy.array() * hat.array()).colwise().sum().transpose().matrix();
        grad->bias += dy.colwise().sum().transpose();
    }
    const auto d = static_cast<double>(dy.cols());
    const Matrix dhat = dy.array().rowwise() * p.gain.transpose().array();
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double sum_dhat = dhat.row(i).sum();
        const double sum_dhat_hat = dhat.row(i).dot(hat.row(i));
        dx.row(i) = (inv_std[i] / d) * (d * dhat.row(i).array() - sum_dhat - hat.row(i).array() * sum_dhat_hat);
    }
    return dx;
}

void softmax_rows(Matrix& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double top = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - top).exp();
        s.row(i) /= s.row(i).sum();
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

Parameters Parameters::zeros_like() const {
    Parameters out = *this;
    out.set_zero();
    return out;
}

void Parameters::set_zero() {
    for_each([](const std::string&, auto& t) { t.setZero(); });
}

std::vector<TensorView> Parameters::views() {
    std::vector<TensorView> out;
    for_each([&](const std::string& name, auto& t) {
        using T = std::remove_reference_t<decltype(t)>;
        out.push_back({name, t.data(), t.rows(), t.cols(), kIsVector<T>});
    });
    return out;
}

void Parameters::add_scaled(const Parameters& other, double scale) {
    auto mine = views();
    auto theirs = const_cast<Parameters&>(other).views();
    if (mine.size() != theirs.size()) throw std::invalid_argument("add_scaled: parameter layouts differ");
    for (std::size_t i = 0; i < mine.size(); ++i) {
        if (mine[i].size() != theirs[i].size()) throw std::invalid_argument("add_scaled: shape mismatch at " + mine[i].name);
        for (Eigen::Index j = 0; j < mine[i].size(); ++j) mine[i].data[j] += scale * theirs[i].data[j];
    }
}

std::size_t Parameters::count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
}

bool is_adapter_tensor(const std::string& name) { return name.rfind("adapter.", 0) == 0; }

int adapter_owner(const std::string& name) {
    if (!is_adapter_tensor(name)) return -1;
    return std::stoi(name.substr(8, name.find('.', 8) - 8));
}

// ---------------------------------------------------------------------------
// Free functions

Vector position_encoding(int position, int hidden) {
    Vector pe(hidden);
    for (int i = 0; i < hidden; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / hidden);
        pe[i] = std::sin(position * freq);
        if (i + 1 < hidden) pe[i + 1] = std::cos(position * freq);
    }
    return pe;
}

Matrix label_propagation(const data::LabelTree& tree, int rounds) {
    if (rounds < 0) throw std::invalid_argument("label_propagation: rounds must be >= 0");
    const int k = tree.size();
    Matrix step = Matrix::Zero(k, k);
    for (int i = 0; i < k; ++i) {
        std::vector<int> nbrs{i};
        if (tree.parent(i) != data::LabelTree::kNoParent) nbrs.push_back(tree.parent(i));
        for (int c : tree.children(i)) nbrs.push_back(c);
        for (int j : nbrs) step(i, j) = 1.0 / static_cast<double>(nbrs.size());
    }
    Matrix out = Matrix::Identity(k, k);
    for (int r = 0; r < rounds; ++r) out = step * out;
    return out;
}

TokenMaskResult key_token_mask(const Matrix& token_embeddings, std::span<const int> tokens,
                               const Matrix& label_embeddings, std::span<const int> gold, double gamma,
                               double tau_g, std::mt19937_64& rng, std::optional<int> always_keep) {
    if (gold.empty()) throw std::invalid_argument("key_token_mask: gold label set is empty");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("key_token_mask: gamma must be in (0, 1)");
    if (!(tau_g > 0.0)) throw std::invalid_argument("key_token_mask: tau_g must be > 0");
    if (token_embeddings.rows() != static_cast<Eigen::Index>(tokens.size())) {
        throw std::invalid_argument("key_token_mask: token/embedding length mismatch");
    }
    const Eigen::Index n = token_embeddings.rows();
    const Eigen::Index k = label_embeddings.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(token_embeddings.cols()));
    std::uniform_real_distribution<double> unif(1e-12, 1.0);

    TokenMaskResult out;
    out.probabilities = (token_embeddings * label_embeddings.transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) {
            out.probabilities(i, j) = (out.probabilities(i, j) - std::log(-std::log(unif(rng)))) / tau_g;
        }
    }
    softmax_rows(out.probabilities);
    out.kept.assign(static_cast<std::size_t>(n), 0);
    out.gold_mass.assign(static_cast<std::size_t>(n), 0.0);
    out.masked.assign(tokens.begin(), tokens.end());
    for (Eigen::Index i = 0; i < n; ++i) {
        double mass = 0.0;
        for (int g : gold) mass += out.probabilities(i, g);
        const auto ui = static_cast<std::size_t>(i);
        out.gold_mass[ui] = mass;
        out.kept[ui] = (mass > gamma || (always_keep && *always_keep == i)) ? 1 : 0;
        if (!out.kept[ui]) out.masked[ui] = data::kPadToken;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ExpertEnsemble

ExpertEnsemble::ExpertEnsemble(const ModelConfig& cfg, data::LabelTree tree, std::uint64_t seed)
    : cfg_(cfg), tree_(std::move(tree)) {
    if (cfg_.hidden < 2 || cfg_.heads < 1 || cfg_.hidden % cfg_.heads != 0) {
        throw std::invalid_argument("hidden size must be a positive multiple of the head count");
    }
    if (cfg_.rank < 1 || cfg_.rank > cfg_.hidden) throw std::invalid_argument("adapter rank must be in [1, hidden]");
    if (cfg_.blocks < 1) throw std::invalid_argument("need at least one encoder block");
    if (cfg_.experts < 1) throw std::invalid_argument("need at least one expert");
    if (cfg_.vocab_size <= data::kFirstContentToken) throw std::invalid_argument("vocabulary too small");

    std::mt19937_64 rng(seed);
    const Eigen::Index d = cfg_.hidden;
    const Eigen::Index k = tree_.size();
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    auto ln = [&] { return LayerNormParams{Vector::Ones(d), Vector::Zero(d)}; };

    fill_normal(params_.token_embedding, cfg_.vocab_size, d, 1.0, rng);
    params_.blocks.resize(static_cast<std::size_t>(cfg_.blocks));
    for (auto& b : params_.blocks) {
        b.ln1 = ln();
        fill_normal(b.wq, d, d, w_std, rng);
        fill_normal(b.wk, d, d, w_std, rng);
        fill_normal(b.wv, d, d, w_std, rng);
        fill_normal(b.wo, d, d, 0.5 * w_std, rng);
        b.bq = b.bk = b.bv = b.bo = Vector::Zero(d);
        b.ln2 = ln();
        fill_normal(b.w_in, d, d, w_std, rng);
        b.b_in = Vector::Zero(d);
        fill_normal(b.w_out, d, d, 0.5 * w_std, rng);
        b.b_out = Vector::Zero(d);
    }
    params_.final_ln = ln();
    fill_normal(params_.classifier, k, d, w_std, rng);
    params_.classifier_bias = Vector::Zero(k);
    fill_normal(params_.proj1, d, d, w_std, rng);
    fill_normal(params_.proj2, d, d, w_std, rng);
    fill_normal(params_.label_embedding, k, d, 1.0, rng);
    // Separate stream: the first M adapters do not depend on how many follow.
    std::mt19937_64 adapter_rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    params_.adapters.resize(static_cast<std::size_t>(cfg_.experts));
    for (auto& a : params_.adapters) {
        fill_normal(a.a, cfg_.rank, d, w_std, adapter_rng);
        a.b = Matrix::Zero(d, cfg_.rank);
    }
    propagation_ = label_propagation(tree_, cfg_.label_rounds);
}

ExpertEnsemble::ExpertEnsemble(const ModelConfig& cfg, data::LabelTree tree, Parameters params, bool frozen)
    : cfg_(cfg), tree_(std::move(tree)), params_(std::move(params)), frozen_(frozen) {
    validate_shapes();
    propagation_ = label_propagation(tree_, cfg_.label_rounds);
}

void ExpertEnsemble::validate_shapes() const {
    const Eigen::Index d = cfg_.hidden;
    const Eigen::Index k = tree_.size();
    auto expect = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("parameter shape mismatch: ") + what);
    };
    expect(params_.token_embedding.rows() == cfg_.vocab_size && params_.token_embedding.cols() == d, "token_embedding");
    expect(static_cast<int>(params_.blocks.size()) == cfg_.blocks, "blocks");
    for (const auto& b : params_.blocks) {
        expect(b.wq.rows() == d && b.wq.cols() == d && b.w_in.rows() == d && b.w_in.cols() == d, "block weights");
    }
    expect(static_cast<int>(params_.adapters.size()) == cfg_.experts, "adapters");
    for (const auto& a : params_.adapters) {
        expect(a.a.rows() == cfg_.rank && a.a.cols() == d && a.b.rows() == d && a.b.cols() == cfg_.rank, "adapter");
    }
    expect(params_.classifier.rows() == k && params_.classifier.cols() == d, "classifier");
    expect(params_.label_embedding.rows() == k && params_.label_embedding.cols() == d, "label_embedding");
}

std::size_t ExpertEnsemble::adapter_parameter_count() const {
    return static_cast<std::size_t>(2 * cfg_.rank * cfg_.hidden);
}

std::vector<int> ExpertEnsemble::with_cls(std::span<const int> tokens) {
    std::vector<int> out;
    out.reserve(tokens.size() + 1);
    out.push_back(data::kClsToken);
    out.insert(out.end(), tokens.begin(), tokens.end());
    return out;
}

Matrix ExpertEnsemble::embed(std::span<const int> tokens) const {
    Matrix h(static_cast<Eigen::Index>(tokens.size()), cfg_.hidden);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t < 0 || t >= cfg_.vocab_size) {
            throw std::out_of_range("token id " + std::to_string(t) + " at position " + std::to_string(i) +
                                    " is outside the vocabulary of size " + std::to_string(cfg_.vocab_size));
        }
        h.row(static_cast<Eigen::Index>(i)) =
            params_.token_embedding.row(t) + position_encoding(static_cast<int>(i), cfg_.hidden).transpose();
    }
    return h;
}

void ExpertEnsemble::trunk_forward(const Matrix& embedded, std::span<const int> tokens, TrunkCache& cache) const {
    const int blocks = cfg_.blocks;
    const Eigen::Index dh = cfg_.hidden / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.attention.resize(static_cast<std::size_t>(blocks));
    cache.feedforward.resize(static_cast<std::size_t>(blocks - 1));
    Matrix x = embedded;
    for (int bi = 0; bi < blocks; ++bi) {
        const auto& p = params_.blocks[static_cast<std::size_t>(bi)];
        auto& a = cache.attention[static_cast<std::size_t>(bi)];
        a.x = x;
        a.z = layer_norm(x, p.ln1, a.ln_hat, a.ln_inv_std);
        a.q = linear(a.z, p.wq, p.bq);
        a.k = linear(a.z, p.wk, p.bk);
        a.v = linear(a.z, p.wv, p.bv);
        a.o.resize(x.rows(), cfg_.hidden);
        a.probs.resize(static_cast<std::size_t>(cfg_.heads));
        for (int h = 0; h < cfg_.heads; ++h) {
            const Eigen::Index c0 = h * dh;
            Matrix s = (a.q.middleCols(c0, dh) * a.k.middleCols(c0, dh).transpose()) * scale;
            softmax_rows(s);
            a.o.middleCols(c0, dh) = s * a.v.middleCols(c0, dh);
            a.probs[static_cast<std::size_t>(h)] = std::move(s);
        }
        a.x_mid = a.x + linear(a.o, p.wo, p.bo);
        if (bi + 1 < blocks) {
            auto& f = cache.feedforward[static_cast<std::size_t>(bi)];
            f.x_mid = a.x_mid;
            f.z = layer_norm(f.x_mid, p.ln2, f.ln_hat, f.ln_inv_std);
            f.u = linear(f.z, p.w_in, p.b_in);
            f.r = f.u.cwiseMax(0.0);
            f.x_out = f.x_mid + linear(f.r, p.w_out, p.b_out);
            x = f.x_out;
        } else {
            cache.x_last_mid = a.x_mid;
        }
    }
}

void ExpertEnsemble::head_forward(const Matrix& x_last_mid, std::optional<int> expert, FeedForwardCache& f) const {
    const auto& p = params_.blocks.back();
    f.expert = expert.value_or(-1);
    if (expert && (*expert < 0 || *expert >= cfg_.experts)) {
        throw std::out_of_range("expert index " + std::to_string(*expert) + " outside [0, " +
                                std::to_string(cfg_.experts) + ")");
    }
    f.x_mid = x_last_mid;
    f.z = layer_norm(f.x_mid, p.ln2, f.ln_hat, f.ln_inv_std);
    f.u = linear(f.z, p.w_in, p.b_in);
    if (expert) {
        const auto& ad = params_.adapters[static_cast<std::size_t>(*expert)];
        f.adapter_hidden = f.z * ad.a.transpose();
        f.u.noalias() += f.adapter_hidden * ad.b.transpose();
    } else {
        f.adapter_hidden.resize(0, 0);
    }
    f.r = f.u.cwiseMax(0.0);
    f.x_out = f.x_mid + linear(f.r, p.w_out, p.b_out);
    f.y = layer_norm(f.x_out, params_.final_ln, f.final_hat, f.final_inv_std);
}

EncodeResult ExpertEnsemble::encode(const Matrix& embedded, std::optional<int> expert) const {
    EncodeResult out;
    if (embedded.rows() == 0) {
        out.pooled = Vector::Zero(cfg_.hidden);
        out.token_states.resize(0, cfg_.hidden);
        return out;
    }
    TrunkCache trunk;
    trunk_forward(embedded, {}, trunk);
    FeedForwardCache head;
    head_forward(trunk.x_last_mid, expert, head);
    out.token_states = std::move(head.y);
    out.pooled = out.token_states.row(0).transpose();
    return out;
}

EncodeResult ExpertEnsemble::encode_all_experts(const Matrix& embedded) const {
    TrunkCache trunk;
    trunk_forward(embedded, {}, trunk);
    const auto& p = params_.blocks.back();
    Matrix hat;
    Vector inv_std;
    const Matrix z = layer_norm(trunk.x_last_mid, p.ln2, hat, inv_std);
    Matrix u = linear(z, p.w_in, p.b_in);
    for (const auto& ad : params_.adapters) u.noalias() += (z * ad.a.transpose()) * ad.b.transpose();
    const Matrix x_out = trunk.x_last_mid + linear(u.cwiseMax(0.0), p.w_out, p.b_out);
    EncodeResult out;
    out.token_states = layer_norm(x_out, params_.final_ln, hat, inv_std);
    out.pooled = out.token_states.row(0).transpose();
    return out;
}

Matrix ExpertEnsemble::label_tree_encode() const { return propagation_ * params_.label_embedding; }

Vector ExpertEnsemble::classify(const Vector& h) const { return params_.classifier * h + params_.classifier_bias; }

Vector ExpertEnsemble::project(const Vector& h) const {
    return params_.proj2 * (params_.proj1 * h).cwiseMax(0.0);
}

void ExpertEnsemble::heads_forward(const Vector& h, HeadsCache& c) const {
    c.h = h;
    c.logits = classify(h);
    c.proj_hidden = params_.proj1 * h;
    c.z = params_.proj2 * c.proj_hidden.cwiseMax(0.0);
}

Vector ExpertEnsemble::heads_backward(const HeadsCache& c, const Vector& d_logits, const Vector& d_z,
                                      const GradTarget& target) const {
    const Vector relu = c.proj_hidden.cwiseMax(0.0);
    const Vector d_relu = params_.proj2.transpose() * d_z;
    const Vector d_hidden = (c.proj_hidden.array() > 0.0).select(d_relu, 0.0);
    if (target.grads != nullptr && target.heads) {
        auto& g = *target.grads;
        g.classifier.noalias() += d_logits * c.h.transpose();
        g.classifier_bias += d_logits;
        g.proj2.noalias() += d_z * relu.transpose();
        g.proj1.noalias() += d_hidden * c.h.transpose();
    }
    return params_.classifier.transpose() * d_logits + params_.proj1.transpose() * d_hidden;
}

Matrix ExpertEnsemble::head_backward(const FeedForwardCache& f, const Matrix& d_y, const GradTarget& target) const {
    const auto& p = params_.blocks.back();
    Parameters* g = target.grads;
    const bool bb = g != nullptr && target.backbone;
    BlockParams* gb = bb ? &g->blocks.back() : nullptr;

    const Matrix d_out = layer_norm_backward(d_y, f.final_hat, f.final_inv_std, params_.final_ln,
                                             bb ? &g->final_ln : nullptr);
    if (gb) {
        gb->w_out.noalias() += d_out.transpose() * f.r;
        gb->b_out += d_out.colwise().sum().transpose();
    }
    const Matrix d_u = (f.u.array() > 0.0).select(d_out * p.w_out, 0.0);
    Matrix d_z = d_u * p.w_in;
    if (gb) {
        gb->w_in.noalias() += d_u.transpose() * f.z;
        gb->b_in += d_u.colwise().sum().transpose();
    }
    if (f.expert >= 0) {
        const auto& ad = params_.adapters[static_cast<std::size_t>(f.expert)];
        const Matrix d_hidden = d_u * ad.b;
        d_z.noalias() += d_hidden * ad.a;
        if (g != nullptr && target.adapter == f.expert) {
            auto& ga = g->adapters[static_cast<std::size_t>(f.expert)];
            ga.b.noalias() += d_u.transpose() * f.adapter_hidden;
            ga.a.noalias() += d_hidden.transpose() * f.z;
        }
    }
    return d_out + layer_norm_backward(d_z, f.ln_hat, f.ln_inv_std, p.ln2, gb ? &gb->ln2 : nullptr);
}

Matrix ExpertEnsemble::trunk_backward(const TrunkCache& cache, const Matrix& d_x_last_mid,
                                      const GradTarget& target) const {
    const Eigen::Index dh = cfg_.hidden / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Parameters* g = target.grads;
    const bool bb = g != nullptr && target.backbone;

    Matrix d_mid = d_x_last_mid;
    for (int bi = cfg_.blocks - 1; bi >= 0; --bi) {
        const auto& p = params_.blocks[static_cast<std::size_t>(bi)];
        BlockParams* gb = bb ? &g->blocks[static_cast<std::size_t>(bi)] : nullptr;
        if (bi + 1 < cfg_.blocks) {
            // Feed-forward sublayer of a non-final block; d_mid currently holds d x_out.
            const auto& f = cache.feedforward[static_cast<std::size_t>(bi)];
            const Matrix& d_out = d_mid;
            if (gb) {
                gb->w_out.noalias() += d_out.transpose() * f.r;
                gb->b_out += d_out.colwise().sum().transpose();
            }
            const Matrix d_u = (f.u.array() > 0.0).select(d_out * p.w_out, 0.0);
            if (gb) {
                gb->w_in.noalias() += d_u.transpose() * f.z;
                gb->b_in += d_u.colwise().sum().transpose();
            }
            const Matrix d_z = d_u * p.w_in;
            d_mid = d_out + layer_norm_backward(d_z, f.ln_hat, f.ln_inv_std, p.ln2, gb ? &gb->ln2 : nullptr);
        }
        const auto& a = cache.attention[static_cast<std::size_t>(bi)];
        // d_mid is d x_mid = d (x + attn).
        if (gb) {
            gb->wo.noalias() += d_mid.transpose() * a.o;
            gb->bo += d_mid.colwise().sum().transpose();
        }
        const Matrix d_o = d_mid * p.wo;
        Matrix d_q(a.q.rows(), a.q.cols()), d_k(a.k.rows(), a.k.cols()), d_v(a.v.rows(), a.v.cols());
        for (int h = 0; h < cfg_.heads; ++h) {
            const Eigen::Index c0 = h * dh;
            const Matrix& prob = a.probs[static_cast<std::size_t>(h)];
            const Matrix d_p = d_o.middleCols(c0, dh) * a.v.middleCols(c0, dh).transpose();
            d_v.middleCols(c0, dh) = prob.transpose() * d_o.middleCols(c0, dh);
            Matrix d_s = prob.array() * (d_p.colwise() - (d_p.array() * prob.array()).rowwise().sum().matrix()).array();
            d_s *= scale;
            d_q.middleCols(c0, dh) = d_s * a.k.middleCols(c0, dh);
            d_k.middleCols(c0, dh) = d_s.transpose() * a.q.middleCols(c0, dh);
        }
        if (gb) {
            gb->wq.noalias() += d_q.transpose() * a.z;
            gb->wk.noalias() += d_k.transpose() * a.z;
            gb->wv.noalias() += d_v.transpose() * a.z;
            gb->bq += d_q.colwise().sum().transpose();
            gb->bk += d_k.colwise().sum().transpose();
            gb->bv += d_v.colwise().sum().transpose();
        }
        const Matrix d_z = d_q * p.wq + d_k * p.wk + d_v * p.wv;
        d_mid = d_mid + layer_norm_backward(d_z, a.ln_hat, a.ln_inv_std, p.ln1, gb ? &gb->ln1 : nullptr);
    }
    return d_mid;
}

void ExpertEnsemble::embedding_backward(std::span<const int> tokens, const Matrix& d_embedded,
                                        const GradTarget& target) const {
    if (target.grads == nullptr || !target.backbone) return;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        target.grads->token_embedding.row(tokens[i]) += d_embedded.row(static_cast<Eigen::Index>(i));
    }
}

void ExpertEnsemble::mask_backward(std::span<const int> tokens, const Matrix& embedded, const TokenMaskResult& mask,
                                   std::span<const int> gold, double tau_g, const Matrix& d_masked_embedded,
                                   const Matrix& label_states, const GradTarget& target) const {
    if (target.grads == nullptr) return;
    const Eigen::Index n = embedded.rows();
    const Eigen::Index k = label_states.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
    const auto& emb = params_.token_embedding;
    const Matrix& prob = mask.probabilities;

    // Straight-through: forward uses the hard keep bit, backward treats it as
    // the gold probability mass.
    Matrix d_scores = Matrix::Zero(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int t = tokens[static_cast<std::size_t>(i)];
        if (t == data::kClsToken) continue;
        const double d_mass = d_masked_embedded.row(i).dot(emb.row(t) - emb.row(data::kPadToken));
        if (d_mass == 0.0) continue;
        Vector d_p = Vector::Zero(k);
        for (int gl : gold) d_p[gl] = d_mass;
        const double inner = prob.row(i).dot(d_p);
        for (Eigen::Index j = 0; j < k; ++j) d_scores(i, j) = prob(i, j) * (d_p[j] - inner) / tau_g * scale;
    }
    if (target.backbone) {
        const Matrix d_h = d_scores * label_states;
        for (Eigen::Index i = 0; i < n; ++i) target.grads->token_embedding.row(tokens[static_cast<std::size_t>(i)]) += d_h.row(i);
    }
    if (target.labels) {
        const Matrix d_labels = d_scores.transpose() * embedded;
        target.grads->label_embedding.noalias() += propagation_.transpose() * d_labels;
    }
}

}  // namespace ume::encoder
