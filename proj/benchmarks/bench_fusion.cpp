#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ume/evidential.hpp"

namespace {

std::vector<ume::evidential::EvidenceVector> random_evidence(int experts, int labels) {
    std::mt19937_64 rng(1);
    std::exponential_distribution<double> d(0.5);
    std::vector<ume::evidential::EvidenceVector> out;
    for (int m = 0; m < experts; ++m) {
        ume::Vector e(labels);
        for (int k = 0; k < labels; ++k) e[k] = d(rng);
        out.emplace_back(e);
    }
    return out;
}

void BM_DstFusion(benchmark::State& state) {
    const auto ev = random_evidence(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(ume::evidential::fuse(ev, 0.9, ume::evidential::FusionMode::dst));
    }
}
BENCHMARK(BM_DstFusion)->Args({3, 39})->Args({5, 39})->Args({5, 363});

void BM_Conflict(benchmark::State& state) {
    const auto ev = random_evidence(2, static_cast<int>(state.range(0)));
    const auto a = ume::evidential::opinion_from_evidence(ev[0]);
    const auto b = ume::evidential::opinion_from_evidence(ev[1]);
    for (auto _ : state) benchmark::DoNotOptimize(ume::evidential::conflict(a, b));
}
BENCHMARK(BM_Conflict)->Arg(39)->Arg(363);

}  // namespace
