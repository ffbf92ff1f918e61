#include "eviscrib/egc.hpp"

#include <algorithm>
#include <cmath>

#include "eviscrib/errors.hpp"
#include "eviscrib/losses.hpp"
#include "eviscrib/ops.hpp"

namespace eviscrib::egc {

namespace {

// Batch mean of the per-image maximum confidence 1 - U.
double mean_max_confidence(const Tensor& u) {
  if (u.ndim() != 3 || u.dim(0) < 1) throw ContractError("update_threshold: expected (N, H, W) uncertainty");
  const int n = u.dim(0);
  const std::size_t hw = static_cast<std::size_t>(u.dim(1)) * u.dim(2);
  double total = 0.0;
  for (int b = 0; b < n; ++b) {
    double best = -INFINITY;
    for (std::size_t i = 0; i < hw; ++i) best = std::max(best, 1.0 - u[b * hw + i]);
    total += best;
  }
  return total / n;
}

}  // namespace

ThresholdState ThresholdState::initial(int num_classes, int iter_max) {
  if (iter_max <= 0) throw ConfigError("threshold: iter_max must be positive");
  if (num_classes < 2) throw ConfigError("threshold: need at least two classes");
  return {1.0 / num_classes, 0, iter_max, num_classes};
}

double update_threshold(const Tensor& u_cnn, const Tensor& u_mamba, ThresholdState& state) {
  if (state.iter_max <= 0) throw ConfigError("threshold: iter_max must be positive");
  if (state.iter < 0 || state.iter > state.iter_max) throw ContractError("threshold: iter outside [0, iter_max]");
  expect_same_shape(u_cnn, u_mamba, "update_threshold");
  if (state.iter == 0) {
    state.lambda = 1.0 / state.num_classes;
    return state.lambda;
  }
  const double eta = static_cast<double>(state.iter) / state.iter_max;
  const double prev = state.lambda;
  const double lam_cnn = eta * mean_max_confidence(u_cnn) + (1.0 - eta) * prev;
  const double lam_mamba = eta * mean_max_confidence(u_mamba) + (1.0 - eta) * prev;
  state.lambda = std::clamp(std::min(lam_cnn, lam_mamba), 0.0, 1.0);
  return state.lambda;
}

PartitionMasks partition(const Tensor& u_cnn, const Tensor& u_mamba, double lambda) {
  expect_same_shape(u_cnn, u_mamba, "partition");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("partition: lambda must lie in [0, 1]");
  PartitionMasks m;
  m.consistent = Tensor(u_cnn.shape());
  m.inconsistent = Tensor(u_cnn.shape());
  for (std::size_t i = 0; i < u_cnn.size(); ++i) {
    const bool c = (1.0 - u_cnn[i]) > lambda && (1.0 - u_mamba[i]) > lambda;
    m.consistent[i] = c ? 1.0 : 0.0;
    m.inconsistent[i] = c ? 0.0 : 1.0;
  }
  return m;
}

Regions split_regions(const Var& logits_cnn, const Var& logits_mamba, const Var& prob_cnn, const Var& prob_mamba,
                      const PartitionMasks& masks) {
  expect_same_shape(logits_cnn.value(), logits_mamba.value(), "split_regions logits");
  expect_same_shape(prob_cnn.value(), prob_mamba.value(), "split_regions probabilities");
  expect_same_shape(logits_cnn.value(), prob_cnn.value(), "split_regions");
  return {ops::mask_pixels(logits_cnn, masks.consistent), ops::mask_pixels(logits_mamba, masks.consistent),
          ops::mask_pixels(prob_cnn, masks.inconsistent), ops::mask_pixels(prob_mamba, masks.inconsistent)};
}

Tensor confidence(const Tensor& probs) {
  if (probs.ndim() != 4) throw ContractError("confidence: expected (N, C, H, W)");
  const int n = probs.dim(0), c = probs.dim(1);
  const std::size_t hw = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
  Tensor out({n, probs.dim(2), probs.dim(3)});
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double best = probs[static_cast<std::size_t>(b) * c * hw + i];
      for (int k = 1; k < c; ++k) best = std::max(best, probs[(static_cast<std::size_t>(b) * c + k) * hw + i]);
      out[b * hw + i] = best;
    }
  return out;
}

Tensor sharpen(const Tensor& probs, double epsilon) {
  if (!(epsilon > 0.0)) throw DomainError("sharpen: epsilon must be positive");
  if (probs.ndim() != 4) throw ContractError("sharpen: expected (N, C, H, W)");
  const int n = probs.dim(0), c = probs.dim(1);
  const std::size_t hw = static_cast<std::size_t>(probs.dim(2)) * probs.dim(3);
  Tensor out(probs.shape());
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double z = 0.0;
      for (int k = 0; k < c; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
        out[idx] = std::pow(std::max(probs[idx], 0.0), 1.0 / epsilon);
        z += out[idx];
      }
      if (z <= 0.0) continue;
      for (int k = 0; k < c; ++k) out[(static_cast<std::size_t>(b) * c + k) * hw + i] /= z;
    }
  return out;
}

Guidance evidence_guidance(const Var& prob_cnn_ic, const Var& prob_mamba_ic, double epsilon) {
  expect_same_shape(prob_cnn_ic.value(), prob_mamba_ic.value(), "evidence_guidance");
  const Tensor conf_cnn = confidence(prob_cnn_ic.value());
  const Tensor conf_mamba = confidence(prob_mamba_ic.value());
  Guidance g;
  g.high_cnn = Tensor(conf_cnn.shape());
  g.high_mamba = Tensor(conf_cnn.shape());
  for (std::size_t i = 0; i < conf_cnn.size(); ++i) {
    g.high_cnn[i] = conf_cnn[i] > conf_mamba[i] ? 1.0 : 0.0;
    g.high_mamba[i] = conf_mamba[i] > conf_cnn[i] ? 1.0 : 0.0;
  }
  // Guides are plain tensors: no gradient reaches the guiding branch.
  const Tensor guide_cnn = sharpen(prob_cnn_ic.value(), epsilon);
  const Tensor guide_mamba = sharpen(prob_mamba_ic.value(), epsilon);
  g.loss_a = losses::masked_mse(prob_mamba_ic, guide_cnn, g.high_cnn);
  g.loss_b = losses::masked_mse(prob_cnn_ic, guide_mamba, g.high_mamba);
  return g;
}

LabelBatch argmax_labels(const Tensor& scores) {
  if (scores.ndim() != 4) throw ContractError("argmax_labels: expected (N, C, H, W)");
  const int n = scores.dim(0), c = scores.dim(1);
  const std::size_t hw = static_cast<std::size_t>(scores.dim(2)) * scores.dim(3);
  LabelBatch out{n, scores.dim(2), scores.dim(3), std::vector<int>(n * hw)};
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      int best = 0;
      double best_v = scores[static_cast<std::size_t>(b) * c * hw + i];
      for (int k = 1; k < c; ++k) {
        const double v = scores[(static_cast<std::size_t>(b) * c + k) * hw + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out.values[b * hw + i] = best;
    }
  return out;
}

Var cross_pseudo_loss(const Var& logits_cnn_c, const Var& logits_mamba_c, const Tensor& consistent) {
  expect_same_shape(logits_cnn_c.value(), logits_mamba_c.value(), "cross_pseudo_loss");
  const LabelBatch pseudo_cnn = argmax_labels(logits_cnn_c.value());
  const LabelBatch pseudo_mamba = argmax_labels(logits_mamba_c.value());
  return ops::add(losses::masked_cross_entropy(logits_cnn_c, pseudo_mamba, consistent),
                  losses::masked_cross_entropy(logits_mamba_c, pseudo_cnn, consistent));
}

}  // namespace eviscrib::egc
