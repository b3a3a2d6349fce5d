#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <boost/math/quadrature/tanh_sinh.hpp>

namespace ume::oracle {

namespace {

double log_dirichlet_normalizer(const Vector& alpha) {
    double out = std::lgamma(alpha.sum());
    for (Eigen::Index k = 0; k < alpha.size(); ++k) out -= std::lgamma(alpha[k]);
    return out;
}

// Dirichlet density at p; alpha >= 1 keeps it bounded on the closed simplex.
double density(const Vector& alpha, const Vector& p, double log_norm) {
    double log_p = log_norm;
    for (Eigen::Index k = 0; k < alpha.size(); ++k) {
        if (alpha[k] == 1.0) continue;
        if (p[k] <= 0.0) return 0.0;
        log_p += (alpha[k] - 1.0) * std::log(p[k]);
    }
    return std::exp(log_p);
}

// Trapezoid sums after the tanh-sinh substitution: p^(alpha - 1) with a
// fractional exponent has an unbounded derivative on the simplex boundary,
// which stalls the plain trapezoid rule.
double expected_component(const Vector& alpha, Eigen::Index k) {
    boost::math::quadrature::tanh_sinh<double> rule;
    const double log_norm = log_dirichlet_normalizer(alpha);
    if (alpha.size() == 2) {
        auto f = [&](double t) {
            Vector p(2);
            p << t, 1.0 - t;
            return p[k] * density(alpha, p, log_norm);
        };
        return rule.integrate(f, 0.0, 1.0);
    }
    if (alpha.size() == 3) {
        // p1 = t, p2 = (1 - t) s; Jacobian (1 - t).
        auto outer = [&](double t) {
            auto inner = [&](double s) {
                Vector p(3);
                p << t, (1.0 - t) * s, (1.0 - t) * (1.0 - s);
                return p[k] * density(alpha, p, log_norm);
            };
            return (1.0 - t) * rule.integrate(inner, 0.0, 1.0);
        };
        return rule.integrate(outer, 0.0, 1.0);
    }
    throw std::invalid_argument("quadrature oracle supports K = 2 or 3");
}

}  // namespace

double marginal_likelihood_by_quadrature(const Vector& alpha, const Vector& y) {
    double out = 0.0;
    for (Eigen::Index k = 0; k < y.size(); ++k) {
        if (y[k] > 0.5) out -= std::log(expected_component(alpha, k));
    }
    return out;
}

MonteCarlo kl_to_uniform_dirichlet(const Vector& alpha, std::size_t draws, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto k = alpha.size();
    std::vector<std::gamma_distribution<double>> gammas;
    for (Eigen::Index j = 0; j < k; ++j) gammas.emplace_back(alpha[j], 1.0);
    const double log_norm = log_dirichlet_normalizer(alpha);
    const double log_uniform = std::lgamma(static_cast<double>(k));  // density of Dir(1) is (K-1)!

    double sum = 0.0;
    double sum_sq = 0.0;
    Vector g(k);
    for (std::size_t n = 0; n < draws; ++n) {
        for (Eigen::Index j = 0; j < k; ++j) g[j] = gammas[static_cast<std::size_t>(j)](rng);
        const double total = g.sum();
        // log p_j = log g_j - log total avoids underflow on tiny components.
        double log_ratio = log_norm - log_uniform;
        for (Eigen::Index j = 0; j < k; ++j) {
            if (alpha[j] != 1.0) log_ratio += (alpha[j] - 1.0) * (std::log(g[j]) - std::log(total));
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    const double n = static_cast<double>(draws);
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean) * n / (n - 1.0);
    return {mean, std::sqrt(var / n)};
}

double central_difference(const std::function<double(const Vector&)>& f, const Vector& x, Eigen::Index i,
                          double step) {
    Vector plus = x;
    Vector minus = x;
    plus[i] += step;
    minus[i] -= step;
    return (f(plus) - f(minus)) / (2.0 * step);
}

bool relatively_close(double a, double b, double rel, double floor) {
    return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), floor});
}

double gradient_error(const std::function<double(const Vector&)>& f, const Vector& x, const Vector& analytic,
                      double step, double floor) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double fd = central_difference(f, x, i, step);
        const double scale = std::max({std::abs(fd), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(fd - analytic[i]) / scale);
    }
    return worst;
}

F1Pair brute_force_f1(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& gold,
                      int labels) {
    long tp_all = 0, fp_all = 0, fn_all = 0;
    double macro = 0.0;
    for (int c = 0; c < labels; ++c) {
        long tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            const std::set<int> p(predicted[i].begin(), predicted[i].end());
            const std::set<int> g(gold[i].begin(), gold[i].end());
            const bool in_p = p.count(c) > 0;
            const bool in_g = g.count(c) > 0;
            tp += in_p && in_g;
            fp += in_p && !in_g;
            fn += !in_p && in_g;
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
        if (tp > 0) macro += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    }
    F1Pair out;
    const long denom = 2 * tp_all + fp_all + fn_all;
    out.micro = denom ? 2.0 * tp_all / static_cast<double>(denom) : 0.0;
    out.macro = labels ? macro / labels : 0.0;
    return out;
}

Vector uniform(Eigen::Index n, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(lo, hi);
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = d(rng);
    return v;
}

}  // namespace ume::oracle
