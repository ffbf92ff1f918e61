#pragma once

#include <stdexcept>
#include <vector>

#include "eviscrib/autograd.hpp"
#include "eviscrib/labels.hpp"

namespace eviscrib::losses {

/// Raised by total_loss when any component is NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pairwise kernel of the gated CRF term.
struct CrfKernel {
  double sigma_xy = 5.0;         // pixels
  double sigma_intensity = 0.1;  // image units in [0, 1]
  int radius = 5;                // square window half-width
};

struct LossConfig {
  double gamma = 0.1;  // weight of the CRF term in the supervised loss
  CrfKernel crf;
  int iter_max = 2000;
};

/// Softmax cross-entropy averaged over pixels with mask != 0; zero for an empty mask.
/// logits (N, C, H, W); targets (N, H, W) with values in [0, C) wherever the mask is set.
Var masked_cross_entropy(const Var& logits, const LabelBatch& targets, const Tensor& mask);

/// Cross-entropy over scribble pixels only (label < C); label C is unannotated.
Var partial_ce(const Var& logits, const LabelBatch& scribble);

/// (1/P) sum_i sum_{j in window(i), j != i} k(x_i, x_j) ||p_i - p_j||^2 with a
/// Gaussian spatial/intensity kernel; P is the number of contributing ordered pairs.
/// probs (N, C, H, W), image (N, 1, H, W).
Var gated_crf(const Var& probs, const Tensor& image, const CrfKernel& kernel);

double digamma(double x);
double trigamma(double x);

/// Expected cross-entropy under Dir(alpha): psi(S) - psi(alpha_true).
/// Throws ContractError unless y is one-hot.
double ece_loss(const std::vector<double>& alpha, const std::vector<double>& y);

/// KL[Dir(alpha_tilde) || Dir(1)].
double kl_to_uniform(const std::vector<double>& alpha_tilde);

/// min(1, 2 iter / iter_max).
double annealing_coefficient(int iter, int iter_max);

/// Evidential loss over scribble pixels: mean of ece + phi * kl(alpha_tilde),
/// alpha_tilde = y + (1 - y) alpha. alpha (N, C, H, W); zero when nothing is labeled.
Var pedl_loss(const Var& alpha, const LabelBatch& scribble, int iter, int iter_max);

/// Mean squared error over all channels of pixels with mask != 0; zero for an
/// empty mask. `target` is a constant.
Var masked_mse(const Var& pred, const Tensor& target, const Tensor& mask);

struct LossComponents {
  Var pce_cnn, pce_mamba;
  Var crf_cnn, crf_mamba;
  Var evi;  // both branches
  Var ic;   // inconsistent-region guidance
  Var c;    // consistent-region pseudo supervision
};

/// pce_cnn + gamma crf_cnn + pce_mamba + gamma crf_mamba + evi + ic + c.
/// Unset components count as zero. Throws NonFiniteLoss on NaN/Inf.
Var total_loss(const LossComponents& parts, double gamma);

}  // namespace eviscrib::losses
