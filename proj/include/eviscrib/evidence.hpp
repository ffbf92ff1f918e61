#pragma once

#include <cstdint>
#include <vector>

#include "eviscrib/autograd.hpp"

namespace eviscrib::evidence {

/// Per-pixel Dirichlet quantities for an (N, C, H, W) evidence grid.
struct EvidenceMaps {
  Tensor evidence;     // (N, C, H, W), in [1/e, e]
  Tensor alpha;        // evidence + 1
  Tensor strength;     // (N, H, W), sum over classes of alpha
  Tensor belief;       // evidence / strength
  Tensor uncertainty;  // (N, H, W), C / strength
  Tensor prob;         // alpha / strength
};

/// e = exp(tanh(P / tau)). Throws DomainError unless tau > 0.
Tensor evidence_from_logits(const Tensor& logits, double tau);
/// Differentiable form of evidence_from_logits.
Var evidence_from_logits(const Var& logits, double tau);

/// Dirichlet parameters, belief, uncertainty and expected probability.
EvidenceMaps dirichlet_stats(const Tensor& evidence);

/// alpha = e + 1, differentiable.
Var dirichlet_alpha(const Var& evidence);
/// alpha / sum_k alpha over dim 1, differentiable.
Var expected_probability(const Var& alpha);

/// Dirichlet density at p. Zero when p is off the simplex (|sum p - 1| > 1e-9
/// or any component outside [0, 1]). Throws DomainError if any alpha <= 0.
double dirichlet_pdf(const std::vector<double>& p, const std::vector<double>& alpha);

/// u = C / S for the given logits; always in (0, 1].
Tensor uncertainty_map(const Tensor& logits, double tau);

/// Linear map of u in [0, 1] to 8-bit gray for one (H, W) slice of an (N, H, W) map.
std::vector<std::uint8_t> uncertainty_to_gray(const Tensor& uncertainty, int index);

}  // namespace eviscrib::evidence
