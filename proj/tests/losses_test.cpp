#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "ume/losses.hpp"

using namespace ume;
using namespace ume::losses;
using evidential::EvidenceVector;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

EvidenceVector ev(std::initializer_list<double> v) { return EvidenceVector(vec(v)); }

Vector random_targets(Eigen::Index k, std::mt19937_64& rng, bool need_positive) {
    std::bernoulli_distribution coin(0.35);
    Vector y(k);
    for (Eigen::Index i = 0; i < k; ++i) y[i] = coin(rng) ? 1.0 : 0.0;
    if (need_positive && y.sum() == 0.0) y[static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(k))] = 1.0;
    return y;
}

Vector sigmoid(const Vector& x) {
    return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

constexpr int kTrials = 100;
constexpr double kRel = 1e-4;

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("marginal likelihood examples") {
    CHECK(marginal_likelihood_loss(ev({1, 0}), vec({1, 0})).value ==
          doctest::Approx(std::log(3.0) - std::log(2.0)).epsilon(1e-12));
    CHECK(marginal_likelihood_loss(ev({0, 0, 0}), vec({0, 1, 0})).value == doctest::Approx(std::log(3.0)));
    CHECK(marginal_likelihood_loss(ev({1e9, 0}), vec({1, 0})).value < 1e-8);
    CHECK_THROWS_AS(marginal_likelihood_loss(ev({1, 0}), vec({0, 0})), std::invalid_argument);
    CHECK_THROWS_AS(marginal_likelihood_loss(ev({1, 0}), vec({1, 0, 0})), std::invalid_argument);
    CHECK_THROWS_AS(marginal_likelihood_loss(ev({1, 0}), vec({0.5, 0})), std::invalid_argument);
}

TEST_CASE("marginal likelihood matches simplex quadrature") {
    CHECK(std::abs(marginal_likelihood_loss(ev({1, 0}), vec({1, 0})).value -
                   oracle::marginal_likelihood_by_quadrature(vec({2, 1}), vec({1, 0}))) < 1e-4);
    std::mt19937_64 rng(7);
    for (int t = 0; t < 20; ++t) {
        const Eigen::Index k = 2 + t % 2;
        const Vector e = oracle::uniform(k, 0.0, 4.0, rng);
        const Vector y = random_targets(k, rng, true);
        const double closed = marginal_likelihood_loss(EvidenceVector(e), y).value;
        const double numeric = oracle::marginal_likelihood_by_quadrature((e.array() + 1.0).matrix(), y);
        CHECK(std::abs(closed - numeric) < 1e-4);
    }
}

TEST_CASE("marginal likelihood is monotone in evidence") {
    // With one positive the slope on it is 1/S - 1/alpha < 0. With several, a
    // dominant positive can raise the others' terms, so only wrong-label
    // monotonicity holds in general.
    std::mt19937_64 rng(9);
    for (int t = 0; t < 500; ++t) {
        const Vector e = oracle::uniform(5, 0.0, 10.0, rng);
        const bool one_hot = t % 2 == 0;
        Vector y = one_hot ? Vector::Zero(5) : random_targets(5, rng, true);
        if (one_hot) y[t % 5] = 1.0;
        const double base = marginal_likelihood_loss(EvidenceVector(e), y).value;
        for (Eigen::Index k = 0; k < 5; ++k) {
            Vector more = e;
            more[k] += 0.1;
            const double v = marginal_likelihood_loss(EvidenceVector(more), y).value;
            if (y[k] < 0.5) {
                CHECK(v > base);
            } else if (one_hot) {
                CHECK(v < base);
            }
        }
    }
}

TEST_CASE("evidence KL examples") {
    CHECK(evidence_kl_loss(ev({5, 0, 0}), vec({1, 0, 0})).value == doctest::Approx(0.0).epsilon(1e-12));
    const double expected = std::log(2.0) - 0.5;
    CHECK(evidence_kl_loss(ev({5, 1}), vec({1, 0})).value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(evidence_kl_loss(ev({5, 1}), vec({1, 0})).value == doctest::Approx(0.1931).epsilon(1e-3));
    CHECK(evidence_kl_loss(ev({7, 1}), vec({1, 0})).value == evidence_kl_loss(ev({5, 1}), vec({1, 0})).value);
}

TEST_CASE("evidence KL matches a Monte-Carlo estimate") {
    const auto mc = oracle::kl_to_uniform_dirichlet(vec({1, 2}), 1'000'000, 101);
    const double closed = evidence_kl_loss(ev({5, 1}), vec({1, 0})).value;
    CHECK(std::abs(closed - mc.mean) < 3.0 * mc.standard_error);

    std::mt19937_64 rng(13);
    for (int t = 0; t < 4; ++t) {
        const Vector e = oracle::uniform(4, 0.0, 3.0, rng);
        const Vector y = random_targets(4, rng, false);
        const Vector alpha = (1.0 + (1.0 - y.array()) * e.array()).matrix();
        const auto est = oracle::kl_to_uniform_dirichlet(alpha, 200'000, 200 + static_cast<std::uint64_t>(t));
        CHECK(std::abs(evidence_kl_loss(EvidenceVector(e), y).value - est.mean) < 3.0 * est.standard_error);
    }
}

TEST_CASE("evidence KL ignores target evidence") {
    std::mt19937_64 rng(15);
    for (int t = 0; t < 500; ++t) {
        const Vector e = oracle::uniform(5, 0.0, 6.0, rng);
        const Vector y = random_targets(5, rng, false);
        const double base = evidence_kl_loss(EvidenceVector(e), y).value;
        for (Eigen::Index k = 0; k < 5; ++k) {
            if (y[k] < 0.5) continue;
            Vector more = e;
            more[k] += 0.25;
            CHECK(evidence_kl_loss(EvidenceVector(more), y).value == base);
        }
    }
}

TEST_CASE("evidence KL grows with a lone wrong label's evidence") {
    std::mt19937_64 rng(16);
    std::uniform_real_distribution<double> amount(0.0, 20.0);
    for (int t = 0; t < 500; ++t) {
        Vector y = Vector::Zero(5);
        y[t % 5] = 1.0;
        const Eigen::Index wrong = (t % 5 + 1 + t % 4) % 5;
        Vector e = oracle::uniform(5, 0.0, 6.0, rng).cwiseProduct(y);
        e[wrong] = amount(rng);
        Vector more = e;
        more[wrong] += 0.05;
        CHECK(evidence_kl_loss(EvidenceVector(more), y).value > evidence_kl_loss(EvidenceVector(e), y).value);
    }
}

TEST_CASE("evidence KL can fall when a second wrong label gains evidence") {
    // At zero evidence the slope is -(S - K) psi'(S) < 0 once another wrong
    // label holds evidence: the Dirichlet becomes more balanced.
    const Vector y = vec({1, 0, 0});
    CHECK(evidence_kl_loss(ev({0, 4, 0.1}), y).value < evidence_kl_loss(ev({0, 4, 0}), y).value);
    CHECK(evidence_kl_loss(ev({0, 4, 0}), y).gradient[2] < 0.0);
}

TEST_CASE("anneal schedule") {
    const AnnealSchedule s{10};
    CHECK(anneal(0, s) == 0.0);
    CHECK(anneal(10, s) == 1.0);
    CHECK(anneal(3, s) == doctest::Approx(0.3));
    CHECK(anneal(25, s) == 1.0);
    CHECK_THROWS_AS(anneal(1, AnnealSchedule{0}), std::invalid_argument);
}

TEST_CASE("binary cross-entropy examples") {
    CHECK(bce_loss(vec({1.0 - 1e-7}), vec({1})).value < 1e-6);
    CHECK(bce_loss(vec({0.5}), vec({1})).value == doctest::Approx(std::log(2.0)));
    CHECK(bce_loss(vec({0.5, 0.5}), vec({1, 0})).value == doctest::Approx(2.0 * std::log(2.0)));
    CHECK(std::isfinite(bce_loss(vec({0.0, 1.0}), vec({1, 0})).value));
}

TEST_CASE("contrastive examples") {
    Matrix one(2, 3);
    one << 1, 0, 0, 0.5, 0.5, 0;
    const auto pair = paired_halves(1);
    CHECK(ntxent_loss(one, pair, 0.5).value == doctest::Approx(0.0).epsilon(1e-12));

    // Positives identical, negatives orthogonal, tau = 1.
    Matrix z(4, 2);
    z << 1, 0, 0, 1, 1, 0, 0, 1;
    const auto p2 = paired_halves(2);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
    CHECK(ntxent_loss(z, p2, 1.0).value == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.5514).epsilon(1e-4));
    for (double t : ntxent_terms(z, p2, 1.0)) CHECK(t == doctest::Approx(expected).epsilon(1e-12));

    CHECK(ntxent_loss(5.0 * z, p2, 1.0).value == doctest::Approx(expected).epsilon(1e-12));

    Matrix zero = z;
    zero.row(1).setZero();
    CHECK_THROWS_AS(ntxent_loss(zero, p2, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(ntxent_loss(z, p2, 0.0), std::invalid_argument);
}

TEST_CASE("contrastive loss is invariant to positive rescaling") {
    std::mt19937_64 rng(19);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    for (int t = 0; t < 200; ++t) {
        const Matrix z = unflatten(oracle::uniform(6 * 4, -1.0, 1.0, rng), 6, 4);
        const auto p = paired_halves(3);
        CHECK(ntxent_loss(scale(rng) * z, p, 0.5).value == doctest::Approx(ntxent_loss(z, p, 0.5).value).epsilon(1e-11));
    }
}

TEST_CASE("single-expert objective") {
    SingleExpertParts zero;
    CHECK(combine_single(zero, 0.7) == 0.0);
    const SingleExpertParts parts{0.4, 0.2, 0.3, 0.3, 0.1};
    CHECK(combine_single(parts, 0.5) == doctest::Approx(1.2));

    const Vector logits = vec({3.0, -2.0, 0.5});
    const Vector y = vec({1, 0, 0});
    const auto at0 = single_expert_loss(logits, logits, y, 0.0, 0, AnnealSchedule{10});
    CHECK(at0.value == doctest::Approx(at0.parts.marginal_likelihood + at0.parts.classification +
                                       at0.parts.key_classification));
    CHECK(at0.parts.evidence_kl > 0.0);
}

TEST_CASE("masked ensemble examples") {
    Matrix ones = Matrix::Ones(2, 2);
    CHECK(masked_ensemble_loss(ones, Matrix::Ones(2, 2), 0.5).value == 4.0);

    Matrix w(2, 2);
    w << 1, 0.3, 1, 0.3;
    const auto closed = masked_ensemble_loss(ones, w, 0.5);
    CHECK(closed.value == 2.0);
    CHECK(closed.gradient.col(1).isZero());

    w << 1, 0.6, 1, 0.4;
    CHECK(masked_ensemble_loss(ones, w, 0.5).value == 3.0);
    CHECK_THROWS_AS(masked_ensemble_loss(ones, Matrix::Ones(3, 2), 0.5), std::invalid_argument);
}

TEST_CASE("masked ensemble with an open mask is the plain sum") {
    std::mt19937_64 rng(21);
    for (int t = 0; t < 200; ++t) {
        const Matrix l = unflatten(oracle::uniform(12, 0.0, 5.0, rng), 4, 3);
        const Matrix w = unflatten(oracle::uniform(12, 0.2, 3.0, rng), 4, 3);
        CHECK(masked_ensemble_loss(l, w, 0.1).value == doctest::Approx(l.sum()).epsilon(1e-14));
    }
}

TEST_CASE("loss gradients match central differences") {
    std::mt19937_64 rng(99);
    for (int t = 0; t < kTrials; ++t) {
        const Eigen::Index k = 2 + static_cast<Eigen::Index>(t % 7);
        const Vector y = random_targets(k, rng, true);
        const Vector e = oracle::uniform(k, 0.05, 8.0, rng);

        auto ml = [&](const Vector& x) { return marginal_likelihood_loss(EvidenceVector(x), y).value; };
        CHECK(oracle::gradient_error(ml, e, marginal_likelihood_loss(EvidenceVector(e), y).gradient) < kRel);

        auto kl = [&](const Vector& x) { return evidence_kl_loss(EvidenceVector(x), y).value; };
        CHECK(oracle::gradient_error(kl, e, evidence_kl_loss(EvidenceVector(e), y).gradient) < kRel);

        const Vector logits = oracle::uniform(k, -4.0, 4.0, rng);
        auto bce = [&](const Vector& x) { return bce_loss(sigmoid(x), y).value; };
        CHECK(oracle::gradient_error(bce, logits, bce_loss(sigmoid(logits), y).gradient) < kRel);

        const Vector key = oracle::uniform(k, -4.0, 4.0, rng);
        const int epoch = t % 12;
        const AnnealSchedule schedule{10};
        const auto single = single_expert_loss(logits, key, y, 0.0, epoch, schedule);
        auto f_real = [&](const Vector& x) { return single_expert_loss(x, key, y, 0.0, epoch, schedule).value; };
        auto f_key = [&](const Vector& x) { return single_expert_loss(logits, x, y, 0.0, epoch, schedule).value; };
        CHECK(oracle::gradient_error(f_real, logits, single.grad_logits) < kRel);
        CHECK(oracle::gradient_error(f_key, key, single.grad_key_logits) < kRel);

        const int n = 1 + t % 4;
        const Eigen::Index d = 3 + t % 3;
        const Matrix z = unflatten(oracle::uniform(2 * n * d, -1.0, 1.0, rng), 2 * n, d);
        const auto partner = paired_halves(n);
        const double tau = 0.3 + 0.1 * (t % 5);
        auto cl = [&](const Vector& x) { return ntxent_loss(unflatten(x, 2 * n, d), partner, tau).value; };
        CHECK(oracle::gradient_error(cl, flatten(z), flatten(ntxent_loss(z, partner, tau).gradient)) < kRel);

        const Matrix losses = unflatten(oracle::uniform(6, 0.0, 2.0, rng), 3, 2);
        const Matrix w = unflatten(oracle::uniform(6, 0.0, 1.0, rng), 3, 2);
        auto masked = [&](const Vector& x) { return masked_ensemble_loss(unflatten(x, 3, 2), w, 0.5).value; };
        CHECK(oracle::gradient_error(masked, flatten(losses), flatten(masked_ensemble_loss(losses, w, 0.5).gradient)) <
              kRel);
    }
}

TEST_CASE("per-anchor terms average to the batch loss") {
    std::mt19937_64 rng(23);
    for (int t = 0; t < 100; ++t) {
        const Matrix z = unflatten(oracle::uniform(8 * 5, -1.0, 1.0, rng), 8, 5);
        const auto p = paired_halves(4);
        double mean = 0.0;
        for (double v : ntxent_terms(z, p, 0.5)) mean += v / 8.0;
        CHECK(mean == doctest::Approx(ntxent_loss(z, p, 0.5).value).epsilon(1e-12));
    }
}

}  // TEST_SUITE
