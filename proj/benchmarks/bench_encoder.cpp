#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ume/data.hpp"
#include "ume/encoder.hpp"

namespace {

std::vector<int> tokens(int n, int vocab) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> d(ume::data::kFirstContentToken, vocab - 1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& t : out) t = d(rng);
    return ume::encoder::ExpertEnsemble::with_cls(out);
}

void BM_EncodeWithAdapter(benchmark::State& state) {
    const ume::encoder::ModelConfig cfg;
    const ume::encoder::ExpertEnsemble ens(cfg, ume::data::make_balanced_tree(3, 3, 3), 1);
    const auto seq = tokens(static_cast<int>(state.range(0)), cfg.vocab_size);
    const auto emb = ens.embed(seq);
    for (auto _ : state) benchmark::DoNotOptimize(ens.encode(emb, 0));
}
BENCHMARK(BM_EncodeWithAdapter)->Arg(16)->Arg(64);

// Frozen-trunk path used by expert stages: only the last feed-forward sublayer runs.
void BM_AdaptedHead(benchmark::State& state) {
    const ume::encoder::ModelConfig cfg;
    ume::encoder::ExpertEnsemble ens(cfg, ume::data::make_balanced_tree(3, 3, 3), 1);
    ens.freeze_backbone();
    const auto seq = tokens(16, cfg.vocab_size);
    ume::encoder::TrunkCache trunk;
    ens.trunk_forward(ens.embed(seq), seq, trunk);
    for (auto _ : state) {
        ume::encoder::FeedForwardCache head;
        ens.head_forward(trunk.x_last_mid, 0, head);
        benchmark::DoNotOptimize(head.y);
    }
}
BENCHMARK(BM_AdaptedHead);

}  // namespace
