#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ume/encoder.hpp"

/// Scalar probes of the encoder output used for finite-difference checks.
namespace ume::oracle {

/// c_logits . logits + c_z . projection of the pooled state.
struct Probe {
    Vector c_logits;
    Vector c_z;
};

Probe random_probe(int labels, int hidden, std::mt19937_64& rng);

double probe_loss(const encoder::ExpertEnsemble& ens, const std::vector<int>& tokens, std::optional<int> expert,
                  const Probe& probe);

/// Analytic gradient of probe_loss, routed by `target`.
void probe_backward(const encoder::ExpertEnsemble& ens, const std::vector<int>& tokens, std::optional<int> expert,
                    const Probe& probe, const encoder::GradTarget& target);

/// Throws std::logic_error when no tensor has that name.
encoder::TensorView find_view(encoder::Parameters& p, const std::string& name);

/// Largest relative error of the analytic adapter gradient against central
/// differences, over both factors of `expert`. `grads` receives the analytic
/// gradient so callers can inspect isolation.
double adapter_gradient_error(encoder::ExpertEnsemble& ens, const std::vector<int>& tokens, int expert,
                              const Probe& probe, encoder::Parameters& grads);

/// False when central differences of the probe at steps 1e-5 and 1e-7
/// disagree on any adapter coordinate, i.e. a ReLU kink lies within a step.
bool adapter_probe_is_smooth(encoder::ExpertEnsemble& ens, const std::vector<int>& tokens, int expert,
                             const Probe& probe);

}  // namespace ume::oracle
