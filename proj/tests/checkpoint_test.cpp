#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ume/checkpoint.hpp"
#include "ume/config.hpp"
#include "ume/data.hpp"
#include "ume/trainer.hpp"

using namespace ume;
using namespace ume::checkpoint;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    trainer::TrainConfig cfg;
    data::GeneratedData data;
    encoder::ExpertEnsemble ens;

    Fixture() {
        cfg.experts = 2;
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.blocks = 1;
        cfg.rank = 4;
        cfg.epochs = 1;
        cfg.vocab = 64;
        cfg.eta = 0.7;
        data::GeneratorConfig g;
        g.depth = 2;
        g.roots = 2;
        g.branching = 2;
        g.target_ir = 4.0;
        g.vocab_size = 64;
        g.seq_length = 10;
        g.num_samples = 60;
        data = data::generate_synthetic(g);
        trainer::Trainer t(cfg, data.corpus, data.splits);
        t.train_all(data.tree, ens);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save, load and save again gives identical bytes") {
    const Fixture f;
    const auto dir = fs::temp_directory_path() / "ume-ckpt-test";
    fs::create_directories(dir);
    save(dir / "a.ckpt", f.ens, f.cfg, 2);
    const auto loaded = load(dir / "a.ckpt");
    save(dir / "b.ckpt", loaded.ensemble, loaded.config, loaded.trained_experts);
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
    CHECK(loaded.trained_experts == 2);
    CHECK(loaded.config.eta == 0.7);
    CHECK(loaded.ensemble.backbone_frozen());
    CHECK(loaded.ensemble.tree().names() == f.data.tree.names());
    CHECK(loaded.ensemble.tree().train_counts == f.data.tree.train_counts);
    auto a = loaded.config;
    auto b = f.cfg;
    CHECK(config::echo(config::train_fields(a)) == config::echo(config::train_fields(b)));
    fs::remove_all(dir);
}

TEST_CASE("a reloaded model predicts exactly as before") {
    const Fixture f;
    const auto back = decode(encode(f.ens, f.cfg, 2));
    for (auto i : f.data.splits.test) {
        const auto& s = f.data.corpus.samples[i];
        const auto a = trainer::predict(f.ens, s, f.cfg);
        const auto b = trainer::predict(back.ensemble, s, back.config);
        CHECK(a.labels == b.labels);
        CHECK(a.trace.probabilities == b.trace.probabilities);
        CHECK(a.trace.weights == b.trace.weights);
    }
}

TEST_CASE("a wrong version is reported with found and expected values") {
    const Fixture f;
    auto bytes = encode(f.ens, f.cfg, 2);
    bytes[8] = 7;  // version field follows the 8-byte magic
    CHECK_THROWS_WITH_AS((void)decode(bytes), doctest::Contains("found 7, expected 1"), CheckpointError);
}

TEST_CASE("corrupt inputs are rejected") {
    const Fixture f;
    const auto bytes = encode(f.ens, f.cfg, 2);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        const auto cut = static_cast<std::size_t>(rng() % bytes.size());
        CHECK_THROWS_AS((void)decode(bytes.substr(0, cut)), CheckpointError);
    }
    CHECK_THROWS_WITH_AS((void)decode(bytes.substr(0, bytes.size() - 1)), doctest::Contains("truncated"), CheckpointError);
    CHECK_THROWS_WITH_AS((void)decode(bytes + "x"), doctest::Contains("trailing"), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS((void)decode(bad_magic), doctest::Contains("magic"), CheckpointError);
    CHECK_THROWS_AS((void)load(fs::temp_directory_path() / "ume-no-such.ckpt"), CheckpointError);
}

}  // TEST_SUITE
