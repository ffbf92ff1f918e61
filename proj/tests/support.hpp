#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "eviscrib/autograd.hpp"
#include "eviscrib/params.hpp"

namespace eviscrib::testing {

struct GradCheck {
  int checked = 0;
  int failed = 0;
  int kinks = 0;       // coordinates skipped because the two step sizes disagree
  double worst = 0.0;  // largest relative error among coordinates above the absolute floor
};

/// Compares reverse-mode gradients of a scalar `loss` against central
/// differences on `samples` random coordinates drawn across `inputs`.
/// A coordinate passes if |a - n| <= rtol * max(|a|, |n|) or |a - n| <= floor,
/// floor = atol * max(1, |loss|) (round-off of the difference quotient).
/// Piecewise-linear activations make some coordinates straddle a kink; those
/// are detected by a second estimate at step h/4 disagreeing with the first,
/// skipped and replaced by a fresh draw (at most `samples` replacements).
inline GradCheck grad_check(const std::function<Var()>& loss, const std::vector<Var>& inputs, int samples,
                            std::uint64_t seed, double h = 1e-5, double rtol = 1e-3, double atol = 1e-8) {
  for (const auto& v : inputs) v.node()->grad = Tensor();
  const Var l0 = loss();
  const double floor = atol * std::max(1.0, std::abs(l0.value()[0]));
  l0.backward();
  std::vector<Tensor> analytic;
  for (const auto& v : inputs) analytic.push_back(v.has_grad() ? v.grad() : Tensor::zeros_like(v.value()));

  std::mt19937_64 rng(seed);
  GradCheck out;
  NoGradGuard no_grad;
  auto close = [&](double a, double b) {
    const double diff = std::abs(a - b);
    return diff <= rtol * std::max(std::abs(a), std::abs(b)) || diff <= floor;
  };
  for (int s = 0; out.checked < samples && s < 2 * samples; ++s) {
    const std::size_t which = s < static_cast<int>(inputs.size()) && samples >= static_cast<int>(inputs.size())
                                  ? s
                                  : std::uniform_int_distribution<std::size_t>(0, inputs.size() - 1)(rng);
    Var v = inputs[which];
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, v.value().size() - 1)(rng);
    const double orig = v.value()[i];
    auto central = [&](double step) {
      v.mutable_value()[i] = orig + step;
      const double up = loss().value()[0];
      v.mutable_value()[i] = orig - step;
      const double down = loss().value()[0];
      v.mutable_value()[i] = orig;
      return (up - down) / (2 * step);
    };
    const double numeric = central(h);
    if (!close(numeric, central(h / 4))) {
      ++out.kinks;
      continue;
    }
    const double a = analytic[which][i];
    const double diff = std::abs(a - numeric);
    ++out.checked;
    if (diff > floor) out.worst = std::max(out.worst, diff / std::max(std::abs(a), std::abs(numeric)));
    if (!close(a, numeric)) ++out.failed;
  }
  return out;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

/// Trainable parameters of a set, as gradient-check inputs.
inline std::vector<Var> trainable(const ParameterSet& p) {
  std::vector<Var> out;
  for (const auto& e : p.entries())
    if (e.trainable) out.push_back(e.var);
  return out;
}

}  // namespace eviscrib::testing
