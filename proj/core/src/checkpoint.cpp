#include "ume/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ume/config.hpp"

namespace ume::checkpoint {

namespace {

constexpr char kMagic[8] = {'U', 'M', 'E', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    template <class T>
    void pod(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        out_.append(buf, sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        out_.append(s);
    }
    void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}

    template <class T>
    T pod(const char* what) {
        T v;
        need(sizeof(T), what);
        std::memcpy(&v, in_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str(const char* what) {
        const auto n = pod<std::uint64_t>(what);
        need(n, what);
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void raw(void* p, std::size_t n, const char* what) {
        need(n, what);
        std::memcpy(p, in_.data() + pos_, n);
        pos_ += n;
    }
    [[nodiscard]] bool done() const noexcept { return pos_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t pos_ = 0;

    void need(std::size_t n, const char* what) const {
        if (n > in_.size() - pos_) {
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                                  std::to_string(pos_));
        }
    }
};

}  // namespace

std::string encode(const encoder::ExpertEnsemble& ensemble, const trainer::TrainConfig& config, int trained_experts) {
    Writer w;
    w.raw(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kFormatVersion);
    trainer::TrainConfig echo_cfg = config;
    w.str(config::echo(config::train_fields(echo_cfg)));

    const auto& tree = ensemble.tree();
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(tree.size()));
    for (int k = 0; k < tree.size(); ++k) {
        w.str(tree.name(k));
        w.pod<std::int32_t>(tree.parent(k));
    }
    w.pod<std::uint8_t>(tree.train_counts.empty() ? 0 : 1);
    for (auto c : tree.train_counts) w.pod<std::int64_t>(c);

    w.pod<std::uint8_t>(ensemble.backbone_frozen() ? 1 : 0);
    w.pod<std::int32_t>(trained_experts);

    const auto& mc = ensemble.config();
    for (int v : {mc.vocab_size, mc.hidden, mc.blocks, mc.heads, mc.rank, mc.experts, mc.label_rounds}) {
        w.pod<std::int32_t>(v);
    }

    std::uint32_t count = 0;
    ensemble.params().for_each([&](const std::string&, const auto&) { ++count; });
    w.pod<std::uint32_t>(count);
    ensemble.params().for_each([&](const std::string& name, const auto& t) {
        w.str(name);
        w.pod<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
        w.pod<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
        w.raw(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()));
    });
    return w.take();
}

Checkpoint decode(const std::string& bytes) {
    Reader r(bytes);
    char magic[sizeof kMagic];
    r.raw(magic, sizeof magic, "magic");
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
    const auto version = r.pod<std::uint32_t>("version");
    if (version != kFormatVersion) {
        throw CheckpointError("checkpoint format version mismatch: found " + std::to_string(version) + ", expected " +
                              std::to_string(kFormatVersion));
    }
    Checkpoint out;
    try {
        out.config = config::train_config_from_echo(r.str("config"));
    } catch (const config::ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config echo is invalid: ") + e.what());
    }

    const auto k = r.pod<std::uint32_t>("label count");
    std::vector<std::string> names(k);
    std::vector<int> parents(k);
    for (std::uint32_t i = 0; i < k; ++i) {
        names[i] = r.str("label name");
        parents[i] = r.pod<std::int32_t>("label parent");
    }
    data::LabelTree tree;
    try {
        tree = data::LabelTree(std::move(names), std::move(parents));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("checkpoint label tree is invalid: ") + e.what());
    }
    if (r.pod<std::uint8_t>("count flag") != 0) {
        tree.train_counts.resize(k);
        for (auto& c : tree.train_counts) c = r.pod<std::int64_t>("train count");
    }

    const bool frozen = r.pod<std::uint8_t>("frozen flag") != 0;
    out.trained_experts = r.pod<std::int32_t>("trained experts");

    encoder::ModelConfig mc;
    for (int* v : {&mc.vocab_size, &mc.hidden, &mc.blocks, &mc.heads, &mc.rank, &mc.experts, &mc.label_rounds}) {
        *v = r.pod<std::int32_t>("model config");
    }
    if (mc.hidden < 1 || mc.blocks < 1 || mc.experts < 0 || mc.rank < 1 || mc.vocab_size < 1 || mc.heads < 1) {
        throw CheckpointError("checkpoint model config is invalid");
    }

    // Shape the parameter tree, then fill it tensor by tensor in stored order.
    encoder::Parameters params;
    params.blocks.resize(static_cast<std::size_t>(mc.blocks));
    params.adapters.resize(static_cast<std::size_t>(mc.experts));
    const auto count = r.pod<std::uint32_t>("tensor count");
    std::uint32_t expected = 0;
    params.for_each([&](const std::string&, const auto&) { ++expected; });
    if (count != expected) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, expected " +
                              std::to_string(expected));
    }
    params.for_each([&](const std::string& name, auto& t) {
        const auto stored = r.str("tensor name");
        if (stored != name) throw CheckpointError("checkpoint tensor '" + stored + "' found where '" + name + "' expected");
        const auto rows = r.pod<std::uint64_t>("tensor rows");
        const auto cols = r.pod<std::uint64_t>("tensor cols");
        using T = std::remove_reference_t<decltype(t)>;
        if constexpr (std::is_same_v<T, Vector>) {
            if (cols != 1) throw CheckpointError("checkpoint tensor '" + name + "' must be a column vector");
            t.resize(static_cast<Eigen::Index>(rows));
        } else {
            t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        }
        r.raw(t.data(), sizeof(double) * static_cast<std::size_t>(t.size()), "tensor data");
    });
    if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");

    try {
        out.ensemble = encoder::ExpertEnsemble(mc, std::move(tree), std::move(params), frozen);
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint tensors are inconsistent: ") + e.what());
    }
    return out;
}

void save(const std::filesystem::path& path, const encoder::ExpertEnsemble& ensemble,
          const trainer::TrainConfig& config, int trained_experts) {
    const auto bytes = encode(ensemble, config, trained_experts);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return decode(buf.str());
}

}  // namespace ume::checkpoint
