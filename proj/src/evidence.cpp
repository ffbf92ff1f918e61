#include "eviscrib/evidence.hpp"

#include <algorithm>
#include <cmath>

#include "eviscrib/errors.hpp"

namespace eviscrib::evidence {

namespace {
void check_tau(double tau) {
  if (!(tau > 0.0)) throw DomainError("evidence: tau must be positive");
}

void check_nchw(const Tensor& t, const char* what) {
  if (t.ndim() != 4) throw ContractError(std::string(what) + ": expected (N, C, H, W), got " + shape_str(t.shape()));
}
}  // namespace

Tensor evidence_from_logits(const Tensor& logits, double tau) {
  check_tau(tau);
  Tensor e(logits.shape());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::exp(std::tanh(logits[i] / tau));
  return e;
}

Var evidence_from_logits(const Var& logits, double tau) {
  Tensor e = evidence_from_logits(logits.value(), tau);
  return make_op(std::move(e), {logits}, [tau](Node& self) {
    Node& in = *self.parents[0];
    Tensor& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double t = std::tanh(in.value[i] / tau);
      g[i] += self.grad[i] * self.value[i] * (1.0 - t * t) / tau;
    }
  });
}

EvidenceMaps dirichlet_stats(const Tensor& evidence) {
  check_nchw(evidence, "dirichlet_stats");
  const int n = evidence.dim(0), c = evidence.dim(1);
  const std::size_t hw = static_cast<std::size_t>(evidence.dim(2)) * evidence.dim(3);
  for (double v : evidence.values())
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("dirichlet_stats: evidence must be finite and >= 0");
  EvidenceMaps m;
  m.evidence = evidence;
  m.alpha = Tensor(evidence.shape());
  m.belief = Tensor(evidence.shape());
  m.prob = Tensor(evidence.shape());
  m.strength = Tensor({n, evidence.dim(2), evidence.dim(3)});
  m.uncertainty = Tensor(m.strength.shape());
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double s = 0.0;
      for (int k = 0; k < c; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
        m.alpha[idx] = evidence[idx] + 1.0;
        s += m.alpha[idx];
      }
      m.strength[b * hw + i] = s;
      m.uncertainty[b * hw + i] = c / s;
      for (int k = 0; k < c; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
        m.belief[idx] = evidence[idx] / s;
        m.prob[idx] = m.alpha[idx] / s;
      }
    }
  return m;
}

Var dirichlet_alpha(const Var& evidence) {
  Tensor a = evidence.value();
  for (auto& v : a.values()) v += 1.0;
  return make_op(std::move(a), {evidence}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var expected_probability(const Var& alpha) {
  const Tensor& av = alpha.value();
  check_nchw(av, "expected_probability");
  const int n = av.dim(0), c = av.dim(1);
  const std::size_t hw = static_cast<std::size_t>(av.dim(2)) * av.dim(3);
  Tensor p(av.shape());
  std::vector<double> strength(static_cast<std::size_t>(n) * hw);
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double s = 0.0;
      for (int k = 0; k < c; ++k) s += av[(static_cast<std::size_t>(b) * c + k) * hw + i];
      strength[b * hw + i] = s;
      for (int k = 0; k < c; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
        p[idx] = av[idx] / s;
      }
    }
  return make_op(std::move(p), {alpha}, [=, strength = std::move(strength)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    // dp_k/dalpha_j = ([k=j] - p_k) / S
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
          dot += self.grad[idx] * self.value[idx];
        }
        const double s = strength[b * hw + i];
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
          g[idx] += (self.grad[idx] - dot) / s;
        }
      }
  });
}

double dirichlet_pdf(const std::vector<double>& p, const std::vector<double>& alpha) {
  if (p.size() != alpha.size() || alpha.empty()) throw ContractError("dirichlet_pdf: size mismatch");
  double sum_alpha = 0.0, log_beta = 0.0;
  for (double a : alpha) {
    if (!(a > 0.0)) throw DomainError("dirichlet_pdf: alpha must be positive");
    sum_alpha += a;
    log_beta += std::lgamma(a);
  }
  log_beta -= std::lgamma(sum_alpha);
  double total = 0.0;
  for (double v : p) {
    if (v < 0.0 || v > 1.0) return 0.0;
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) return 0.0;
  double log_density = -log_beta;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (alpha[k] == 1.0) continue;
    if (p[k] == 0.0) return alpha[k] > 1.0 ? 0.0 : INFINITY;
    log_density += (alpha[k] - 1.0) * std::log(p[k]);
  }
  return std::exp(log_density);
}

Tensor uncertainty_map(const Tensor& logits, double tau) {
  return dirichlet_stats(evidence_from_logits(logits, tau)).uncertainty;
}

std::vector<std::uint8_t> uncertainty_to_gray(const Tensor& uncertainty, int index) {
  if (uncertainty.ndim() != 3 || index < 0 || index >= uncertainty.dim(0))
    throw ContractError("uncertainty_to_gray: expected (N, H, W) and a valid index");
  const std::size_t hw = static_cast<std::size_t>(uncertainty.dim(1)) * uncertainty.dim(2);
  std::vector<std::uint8_t> out(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const double u = std::clamp(uncertainty[index * hw + i], 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(u * 255.0));
  }
  return out;
}

}  // namespace eviscrib::evidence
