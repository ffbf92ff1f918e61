#include "eviscrib/losses.hpp"

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <limits>

#include "eviscrib/errors.hpp"
#include "eviscrib/ops.hpp"

namespace eviscrib {

LabelBatch LabelBatch::stack(std::span<const LabelMap> maps) {
  LabelBatch out;
  if (maps.empty()) return out;
  out.count = static_cast<int>(maps.size());
  out.height = maps[0].height;
  out.width = maps[0].width;
  out.values.reserve(maps.size() * maps[0].size());
  for (const auto& m : maps) {
    if (m.height != out.height || m.width != out.width) throw ContractError("LabelBatch::stack: size mismatch");
    out.values.insert(out.values.end(), m.values.begin(), m.values.end());
  }
  return out;
}

namespace losses {

namespace {

struct Dims {
  int n, c;
  std::size_t hw;
};

Dims check_pair(const Tensor& nchw, const LabelBatch& labels, const char* what) {
  if (nchw.ndim() != 4 || labels.count != nchw.dim(0) || labels.height != nchw.dim(2) ||
      labels.width != nchw.dim(3))
    throw ContractError(std::string(what) + ": labels do not match " + shape_str(nchw.shape()));
  return {nchw.dim(0), nchw.dim(1), static_cast<std::size_t>(nchw.dim(2)) * nchw.dim(3)};
}

Var zero_loss() { return Var(Tensor::scalar(0.0)); }

}  // namespace

Var masked_cross_entropy(const Var& logits, const LabelBatch& targets, const Tensor& mask) {
  const Tensor& x = logits.value();
  const Dims d = check_pair(x, targets, "masked_cross_entropy");
  if (mask.size() != targets.size()) throw ContractError("masked_cross_entropy: mask size mismatch");
  double count = 0.0;
  for (double m : mask.values()) count += m != 0.0 ? 1.0 : 0.0;
  if (count == 0.0) return zero_loss();

  Tensor softmax(x.shape());
  double total = 0.0;
  for (int b = 0; b < d.n; ++b)
    for (std::size_t i = 0; i < d.hw; ++i) {
      const std::size_t pix = b * d.hw + i;
      if (mask[pix] == 0.0) continue;
      const int y = targets.values[pix];
      if (y < 0 || y >= d.c) throw ContractError("masked_cross_entropy: target out of range");
      const std::size_t base = static_cast<std::size_t>(b) * d.c * d.hw + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < d.c; ++k) mx = std::max(mx, x[base + k * d.hw]);
      double z = 0.0;
      for (int k = 0; k < d.c; ++k) z += std::exp(x[base + k * d.hw] - mx);
      for (int k = 0; k < d.c; ++k) softmax[base + k * d.hw] = std::exp(x[base + k * d.hw] - mx) / z;
      total += -(x[base + y * d.hw] - mx - std::log(z));
    }
  return make_op(Tensor::scalar(total / count), {logits},
                 [=, softmax = std::move(softmax), labels = targets.values, mask = mask](Node& self) {
                   Tensor& g = self.parents[0]->grad_buffer();
                   const double scale = self.grad[0] / count;
                   for (int b = 0; b < d.n; ++b)
                     for (std::size_t i = 0; i < d.hw; ++i) {
                       const std::size_t pix = b * d.hw + i;
                       if (mask[pix] == 0.0) continue;
                       const std::size_t base = static_cast<std::size_t>(b) * d.c * d.hw + i;
                       for (int k = 0; k < d.c; ++k)
                         g[base + k * d.hw] += scale * (softmax[base + k * d.hw] - (k == labels[pix] ? 1.0 : 0.0));
                     }
                 });
}

Var partial_ce(const Var& logits, const LabelBatch& scribble) {
  const Dims d = check_pair(logits.value(), scribble, "partial_ce");
  Tensor mask({d.n, scribble.height, scribble.width});
  for (std::size_t i = 0; i < scribble.size(); ++i) {
    const int y = scribble.values[i];
    if (y < 0 || y > d.c) throw ContractError("partial_ce: scribble label out of range");
    mask[i] = y < d.c ? 1.0 : 0.0;
  }
  return masked_cross_entropy(logits, scribble, mask);
}

Var gated_crf(const Var& probs, const Tensor& image, const CrfKernel& kernel) {
  const Tensor& p = probs.value();
  if (p.ndim() != 4 || image.ndim() != 4 || image.dim(1) != 1 || image.dim(0) != p.dim(0) ||
      image.dim(2) != p.dim(2) || image.dim(3) != p.dim(3))
    throw ContractError("gated_crf: image " + shape_str(image.shape()) + " does not match " + shape_str(p.shape()));
  if (!(kernel.sigma_xy > 0.0) || !(kernel.sigma_intensity > 0.0) || kernel.radius < 1)
    throw ConfigError("gated_crf: bandwidths must be positive and radius >= 1");
  const int n = p.dim(0), c = p.dim(1), h = p.dim(2), w = p.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const int r = kernel.radius;
  const double inv_xy = 1.0 / (2.0 * kernel.sigma_xy * kernel.sigma_xy);
  const double inv_i = 1.0 / (2.0 * kernel.sigma_intensity * kernel.sigma_intensity);

  // Half of the offsets; each unordered pair counts twice.
  struct Offset {
    int dy, dx;
    double spatial;
  };
  std::vector<Offset> offsets;
  for (int dy = 0; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (dy > 0 || dx > 0) offsets.push_back({dy, dx, std::exp(-(dy * dy + dx * dx) * inv_xy)});

  double pairs = 0.0, total = 0.0;
  for (int b = 0; b < n; ++b) {
    const double* img = image.data() + b * hw;
    const double* pb = p.data() + static_cast<std::size_t>(b) * c * hw;
    for (const Offset& o : offsets)
      for (int y = 0; y < h; ++y) {
        const int yy = y + o.dy;
        if (yy >= h) break;
        for (int x = std::max(0, -o.dx); x < std::min(w, w - o.dx); ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          const std::size_t j = static_cast<std::size_t>(yy) * w + x + o.dx;
          const double di = img[i] - img[j];
          const double k = o.spatial * std::exp(-di * di * inv_i);
          double dist = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double diff = pb[ch * hw + i] - pb[ch * hw + j];
            dist += diff * diff;
          }
          total += 2.0 * k * dist;
          pairs += 2.0;
        }
      }
  }
  if (pairs == 0.0) return zero_loss();
  return make_op(Tensor::scalar(total / pairs), {probs}, [=, img_all = image](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Tensor& pv = self.parents[0]->value;
    const double scale = self.grad[0] / pairs;
    for (int b = 0; b < n; ++b) {
      const double* img = img_all.data() + b * hw;
      const double* pb = pv.data() + static_cast<std::size_t>(b) * c * hw;
      double* gb = g.data() + static_cast<std::size_t>(b) * c * hw;
      for (const Offset& o : offsets)
        for (int y = 0; y < h; ++y) {
          const int yy = y + o.dy;
          if (yy >= h) break;
          for (int x = std::max(0, -o.dx); x < std::min(w, w - o.dx); ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            const std::size_t j = static_cast<std::size_t>(yy) * w + x + o.dx;
            const double di = img[i] - img[j];
            // d/dp_i of 2 k ||p_i - p_j||^2 = 4 k (p_i - p_j)
            const double k = 4.0 * scale * o.spatial * std::exp(-di * di * inv_i);
            for (int ch = 0; ch < c; ++ch) {
              const double diff = pb[ch * hw + i] - pb[ch * hw + j];
              gb[ch * hw + i] += k * diff;
              gb[ch * hw + j] -= k * diff;
            }
          }
        }
    }
  });
}

double digamma(double x) { return boost::math::digamma(x); }
double trigamma(double x) { return boost::math::trigamma(x); }

double ece_loss(const std::vector<double>& alpha, const std::vector<double>& y) {
  if (alpha.size() != y.size() || alpha.empty()) throw ContractError("ece_loss: size mismatch");
  int ones = 0;
  std::size_t truth = 0;
  double s = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k] == 1.0) {
      ++ones;
      truth = k;
    } else if (y[k] != 0.0) {
      throw ContractError("ece_loss: target is not one-hot");
    }
    if (alpha[k] <= 0.0) throw DomainError("ece_loss: alpha must be positive");
    s += alpha[k];
  }
  if (ones != 1) throw ContractError("ece_loss: target is not one-hot");
  return digamma(s) - digamma(alpha[truth]);
}

double kl_to_uniform(const std::vector<double>& alpha_tilde) {
  if (alpha_tilde.empty()) throw ContractError("kl_to_uniform: empty input");
  const double k = static_cast<double>(alpha_tilde.size());
  double s = 0.0;
  for (double a : alpha_tilde) {
    if (a <= 0.0) throw DomainError("kl_to_uniform: alpha must be positive");  // NaN propagates
    s += a;
  }
  double kl = std::lgamma(s) - std::lgamma(k);
  const double psi_s = digamma(s);
  for (double a : alpha_tilde) {
    kl -= std::lgamma(a);
    kl += (a - 1.0) * (digamma(a) - psi_s);
  }
  return kl;
}

double annealing_coefficient(int iter, int iter_max) {
  if (iter_max <= 0) throw ConfigError("annealing_coefficient: iter_max must be positive");
  return std::min(1.0, 2.0 * iter / static_cast<double>(iter_max));
}

Var pedl_loss(const Var& alpha, const LabelBatch& scribble, int iter, int iter_max) {
  const Tensor& a = alpha.value();
  const Dims d = check_pair(a, scribble, "pedl_loss");
  const double phi = annealing_coefficient(iter, iter_max);
  double count = 0.0, total = 0.0;
  Tensor grad(a.shape());  // d(sum of per-pixel losses)/d alpha
  std::vector<double> at(static_cast<std::size_t>(d.c));
  for (int b = 0; b < d.n; ++b)
    for (std::size_t i = 0; i < d.hw; ++i) {
      const int y = scribble.values[b * d.hw + i];
      if (y < 0 || y > d.c) throw ContractError("pedl_loss: scribble label out of range");
      if (y == d.c) continue;
      count += 1.0;
      const std::size_t base = static_cast<std::size_t>(b) * d.c * d.hw + i;
      double s = 0.0, s_tilde = 0.0;
      for (int k = 0; k < d.c; ++k) {
        const double ak = a[base + k * d.hw];
        s += ak;
        at[k] = k == y ? 1.0 : ak;
        s_tilde += at[k];
      }
      // Expected cross-entropy.
      total += digamma(s) - digamma(a[base + y * d.hw]);
      const double tri_s = trigamma(s);
      for (int k = 0; k < d.c; ++k) grad[base + k * d.hw] += tri_s;
      grad[base + y * d.hw] -= trigamma(a[base + y * d.hw]);
      if (phi == 0.0) continue;
      // KL to the uniform Dirichlet on the target-free parameters.
      total += phi * kl_to_uniform(at);
      const double tri_st = trigamma(s_tilde);
      const double excess = s_tilde - d.c;
      for (int k = 0; k < d.c; ++k) {
        if (k == y) continue;
        grad[base + k * d.hw] += phi * ((at[k] - 1.0) * trigamma(at[k]) - excess * tri_st);
      }
    }
  if (count == 0.0) return zero_loss();
  return make_op(Tensor::scalar(total / count), {alpha}, [count, grad = std::move(grad)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double scale = self.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * grad[i];
  });
}

Var masked_mse(const Var& pred, const Tensor& target, const Tensor& mask) {
  const Tensor& p = pred.value();
  expect_same_shape(p, target, "masked_mse");
  if (p.ndim() != 4 || mask.size() != static_cast<std::size_t>(p.dim(0)) * p.dim(2) * p.dim(3))
    throw ContractError("masked_mse: mask does not match " + shape_str(p.shape()));
  const int n = p.dim(0), c = p.dim(1);
  const std::size_t hw = static_cast<std::size_t>(p.dim(2)) * p.dim(3);
  double entries = 0.0, total = 0.0;
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      if (mask[b * hw + i] == 0.0) continue;
      entries += c;
      for (int k = 0; k < c; ++k) {
        const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
        total += (p[idx] - target[idx]) * (p[idx] - target[idx]);
      }
    }
  if (entries == 0.0) return zero_loss();
  return make_op(Tensor::scalar(total / entries), {pred}, [=, target = target, mask = mask](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const Tensor& pv = self.parents[0]->value;
    const double scale = 2.0 * self.grad[0] / entries;
    for (int b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        if (mask[b * hw + i] == 0.0) continue;
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = (static_cast<std::size_t>(b) * c + k) * hw + i;
          g[idx] += scale * (pv[idx] - target[idx]);
        }
      }
  });
}

Var total_loss(const LossComponents& parts, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("total_loss: gamma must be >= 0");
  std::vector<Var> terms;
  auto push = [&](const Var& v, double weight, const char* name) {
    if (!v) return;
    if (!std::isfinite(v.value()[0])) throw NonFiniteLoss(std::string("non-finite loss component: ") + name);
    terms.push_back(weight == 1.0 ? v : ops::scale(v, weight));
  };
  push(parts.pce_cnn, 1.0, "pce_cnn");
  push(parts.pce_mamba, 1.0, "pce_mamba");
  if (gamma != 0.0) {
    push(parts.crf_cnn, gamma, "crf_cnn");
    push(parts.crf_mamba, gamma, "crf_mamba");
  }
  push(parts.evi, 1.0, "evi");
  push(parts.ic, 1.0, "ic");
  push(parts.c, 1.0, "c");
  if (terms.empty()) return zero_loss();
  Var total = ops::sum_scalars(terms);
  if (!std::isfinite(total.value()[0])) throw NonFiniteLoss("non-finite total loss");
  return total;
}

}  // namespace losses
}  // namespace eviscrib
