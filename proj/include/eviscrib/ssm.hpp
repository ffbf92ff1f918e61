#pragma once

#include <Eigen/Dense>
#include <vector>

namespace eviscrib::ssm {

/// Continuous single-channel state-space model h' = A h + B x, y = C h + D x.
struct SSMParams {
  Eigen::MatrixXd a;     // N x N
  Eigen::VectorXd b;     // N
  Eigen::VectorXd c;     // N (output projection)
  double d = 0.0;
  double delta = 1.0;    // step size, > 0
};

struct DiscreteSSM {
  Eigen::MatrixXd a_bar;  // N x N
  Eigen::VectorXd b_bar;  // N
};

/// Zero-order hold: A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - I) delta B.
/// Diagonal A takes a scalar path that switches to a series below |delta a| < 1e-4;
/// dense A uses the exponential of the augmented matrix [[dA, dB], [0, 0]].
/// Throws DomainError for delta <= 0 or non-finite inputs.
DiscreteSSM zoh_discretize(const SSMParams& params);

/// y_t = C h_t + D x_t with h_t = A_bar h_{t-1} + B_bar x_t, h_0 = 0.
std::vector<double> ssm_scan(const DiscreteSSM& disc, const Eigen::VectorXd& c, double d,
                             const std::vector<double>& x);

/// K = (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar).
std::vector<double> ssm_conv_kernel(const DiscreteSSM& disc, const Eigen::VectorXd& c, int length);

/// y_t = sum_{j<=t} kernel_j x_{t-j} + d x_t.
std::vector<double> causal_convolve(const std::vector<double>& kernel, double d,
                                    const std::vector<double>& x);

}  // namespace eviscrib::ssm
