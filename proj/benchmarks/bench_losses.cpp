#include <benchmark/benchmark.h>

#include <random>

#include "ume/losses.hpp"

namespace {

ume::Vector random_vector(int n, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, hi);
    ume::Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = d(rng);
    return v;
}

ume::Vector targets(int n) {
    ume::Vector y = ume::Vector::Zero(n);
    for (int i = 0; i < n; i += 7) y[i] = 1.0;
    return y;
}

void BM_SingleExpertLoss(benchmark::State& state) {
    const int k = static_cast<int>(state.range(0));
    const auto logits = random_vector(k, -3.0, 3.0, 1);
    const auto key = random_vector(k, -3.0, 3.0, 2);
    const auto y = targets(k);
    for (auto _ : state) {
        benchmark::DoNotOptimize(ume::losses::single_expert_loss(logits, key, y, 0.0, 3, {10}));
    }
}
BENCHMARK(BM_SingleExpertLoss)->Arg(39)->Arg(363);

void BM_NtXent(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    std::mt19937_64 rng(3);
    std::normal_distribution<double> d;
    ume::Matrix z(2 * n, 64);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = d(rng);
    const auto partner = ume::losses::paired_halves(n);
    for (auto _ : state) benchmark::DoNotOptimize(ume::losses::ntxent_loss(z, partner, 0.5));
}
BENCHMARK(BM_NtXent)->Arg(16)->Arg(32);

}  // namespace
