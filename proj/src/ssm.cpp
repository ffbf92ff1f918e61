#include "eviscrib/ssm.hpp"

#include <unsupported/Eigen/MatrixFunctions>
#include <cmath>

#include "eviscrib/errors.hpp"

namespace eviscrib::ssm {

namespace {
bool is_diagonal(const Eigen::MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (i != j && m(i, j) != 0.0) return false;
  return true;
}
}  // namespace

DiscreteSSM zoh_discretize(const SSMParams& params) {
  const Eigen::Index n = params.a.rows();
  if (params.a.cols() != n || params.b.size() != n)
    throw ContractError("zoh_discretize: A must be N x N and B length N");
  if (!(params.delta > 0.0) || !std::isfinite(params.delta))
    throw DomainError("zoh_discretize: step size must be positive and finite");
  if (!params.a.allFinite() || !params.b.allFinite())
    throw DomainError("zoh_discretize: non-finite A or B");

  const double dt = params.delta;
  DiscreteSSM out;
  if (is_diagonal(params.a)) {
    out.a_bar = Eigen::MatrixXd::Zero(n, n);
    out.b_bar.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = dt * params.a(i, i);
      out.a_bar(i, i) = std::exp(z);
      // (e^z - 1) / z, removable singularity at z = 0.
      const double phi = std::abs(z) < 1e-4 ? 1.0 + z / 2.0 + z * z / 6.0 : std::expm1(z) / z;
      out.b_bar(i) = phi * dt * params.b(i);
    }
    return out;
  }
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + 1, n + 1);
  aug.topLeftCorner(n, n) = dt * params.a;
  aug.topRightCorner(n, 1) = dt * params.b;
  const Eigen::MatrixXd e = aug.exp();
  out.a_bar = e.topLeftCorner(n, n);
  out.b_bar = e.topRightCorner(n, 1);
  return out;
}

std::vector<double> ssm_scan(const DiscreteSSM& disc, const Eigen::VectorXd& c, double d,
                             const std::vector<double>& x) {
  if (c.size() != disc.b_bar.size()) throw ContractError("ssm_scan: C length must equal state size");
  Eigen::VectorXd h = Eigen::VectorXd::Zero(disc.b_bar.size());
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    h = disc.a_bar * h + disc.b_bar * x[t];
    y[t] = c.dot(h) + d * x[t];
  }
  return y;
}

std::vector<double> ssm_conv_kernel(const DiscreteSSM& disc, const Eigen::VectorXd& c, int length) {
  if (length < 1) throw ContractError("ssm_conv_kernel: length must be >= 1");
  if (c.size() != disc.b_bar.size()) throw ContractError("ssm_conv_kernel: C length must equal state size");
  std::vector<double> k(static_cast<std::size_t>(length));
  Eigen::VectorXd v = disc.b_bar;  // A_bar^j B_bar
  for (int j = 0; j < length; ++j) {
    k[static_cast<std::size_t>(j)] = c.dot(v);
    v = disc.a_bar * v;
  }
  return k;
}

std::vector<double> causal_convolve(const std::vector<double>& kernel, double d,
                                    const std::vector<double>& x) {
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double s = d * x[t];
    for (std::size_t j = 0; j <= t && j < kernel.size(); ++j) s += kernel[j] * x[t - j];
    y[t] = s;
  }
  return y;
}

}  // namespace eviscrib::ssm
