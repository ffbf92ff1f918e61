#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "eviscrib/errors.hpp"
#include "eviscrib/losses.hpp"
#include "eviscrib/ops.hpp"
#include "support.hpp"

using namespace eviscrib;
using namespace eviscrib::losses;
using eviscrib::testing::grad_check;
using eviscrib::testing::random_tensor;

namespace {

LabelBatch labels(int n, int h, int w, std::vector<int> v) { return {n, h, w, std::move(v)}; }

LabelBatch random_scribble(int n, int c, int h, int w, std::mt19937_64& r, double labeled = 0.3) {
  LabelBatch y{n, h, w, std::vector<int>(static_cast<std::size_t>(n) * h * w)};
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> cls(0, c - 1);
  for (int& v : y.values) v = u(r) < labeled ? cls(r) : c;
  return y;
}

// Exact digamma and log-gamma at positive integers.
double digamma_int(int n) {
  double s = -0.57721566490153286061;
  for (int k = 1; k < n; ++k) s += 1.0 / k;
  return s;
}
double lgamma_int(int n) {
  double s = 0;
  for (int k = 2; k < n; ++k) s += std::log(static_cast<double>(k));
  return s;
}

}  // namespace

TEST_CASE("partial cross-entropy examples") {
  const Tensor logits({1, 2, 1, 2}, {0.0, 50.0, 0.0, -50.0});
  CHECK(partial_ce(Var(logits), labels(1, 1, 2, {2, 2})).value()[0] == 0.0);
  CHECK(partial_ce(Var(logits), labels(1, 1, 2, {2, 0})).value()[0] < 1e-20);
  CHECK(partial_ce(Var(logits), labels(1, 1, 2, {0, 2})).value()[0] == doctest::Approx(std::log(2.0)));
  CHECK(std::log(2.0) == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK_THROWS_AS(partial_ce(Var(logits), labels(1, 1, 2, {3, 0})), ContractError);
}

TEST_CASE("partial cross-entropy equals full cross-entropy when everything is labeled") {
  std::mt19937_64 r(1);
  const int n = 2, c = 3, h = 4, w = 5;
  const Tensor x = random_tensor({n, c, h, w}, r, -3, 3);
  const LabelBatch y = random_scribble(n, c, h, w, r, 1.0);
  double total = 0;
  for (int b = 0; b < n; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double z = 0;
        for (int k = 0; k < c; ++k) z += std::exp(x.at(b, k, i, j));
        total += std::log(z) - x.at(b, y.values[(b * h + i) * w + j], i, j);
      }
  CHECK(partial_ce(Var(x), y).value()[0] == doctest::Approx(total / (n * h * w)).epsilon(1e-12));
}

TEST_CASE("masked cross-entropy with an empty mask is zero") {
  const Tensor x({1, 2, 2, 2}, 1.0);
  CHECK(masked_cross_entropy(Var(x), labels(1, 2, 2, {0, 0, 1, 1}), Tensor({1, 2, 2})).value()[0] == 0.0);
}

TEST_CASE("gated crf examples") {
  const Tensor img({1, 1, 1, 2}, 0.4);
  const Tensor p({1, 2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  CrfKernel unit{1e9, 1.0, 1};
  CHECK(gated_crf(Var(p), img, unit).value()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CrfKernel def;
  const double k = std::exp(-1.0 / (2 * 25.0));
  CHECK(gated_crf(Var(p), img, def).value()[0] == doctest::Approx(2.0 * k).epsilon(1e-12));

  std::mt19937_64 r(2);
  const Tensor image = random_tensor({2, 1, 6, 6}, r, 0, 1);
  Tensor flat({2, 3, 6, 6});
  for (int b = 0; b < 2; ++b)
    for (int ch = 0; ch < 3; ++ch)
      for (int i = 0; i < 36; ++i) flat[(b * 3 + ch) * 36 + i] = 0.2 + 0.3 * ch;
  CHECK(gated_crf(Var(flat), image, def).value()[0] == 0.0);
  CHECK_THROWS_AS(gated_crf(Var(p), img, CrfKernel{5.0, 0.1, 0}), ConfigError);
}

TEST_CASE("gated crf matches a brute-force pair sum") {
  std::mt19937_64 r(3);
  const int n = 2, c = 2, h = 7, w = 5;
  const CrfKernel ker{2.0, 0.3, 2};
  const Tensor img = random_tensor({n, 1, h, w}, r, 0, 1), p = random_tensor({n, c, h, w}, r, 0, 1);
  double total = 0, pairs = 0;
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) {
            if ((yy == y && xx == x) || std::abs(yy - y) > ker.radius || std::abs(xx - x) > ker.radius) continue;
            const double di = img.at(b, 0, y, x) - img.at(b, 0, yy, xx);
            const double d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
            const double k = std::exp(-d2 / (2 * ker.sigma_xy * ker.sigma_xy) -
                                      di * di / (2 * ker.sigma_intensity * ker.sigma_intensity));
            double dist = 0;
            for (int ch = 0; ch < c; ++ch) dist += std::pow(p.at(b, ch, y, x) - p.at(b, ch, yy, xx), 2);
            total += k * dist;
            pairs += 1;
          }
  CHECK(gated_crf(Var(p), img, ker).value()[0] == doctest::Approx(total / pairs).epsilon(1e-12));
}

TEST_CASE("expected cross-entropy closed forms") {
  CHECK(ece_loss({1, 1}, {1, 0}) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(ece_loss({2, 1, 1}, {1, 0, 0}) == doctest::Approx(0.5 + 1.0 / 3).epsilon(1e-14));
  CHECK(ece_loss({1e9, 1, 1}, {1, 0, 0}) < 1e-8);
  CHECK_THROWS_AS(ece_loss({1, 1}, {0.5, 0.5}), ContractError);
  CHECK_THROWS_AS(ece_loss({1, 1}, {1, 1}), ContractError);
  CHECK_THROWS_AS(ece_loss({1, 1}, {1, 0, 0}), ContractError);
}

TEST_CASE("expected cross-entropy against Monte-Carlo Dirichlet sampling") {
  std::mt19937_64 r(4);
  std::uniform_real_distribution<double> a_dist(1, 20);
  double worst = 0;
  for (int trial = 0; trial < 12; ++trial) {
    const int c = 2 + trial % 3;
    std::vector<double> alpha(c), y(c, 0.0);
    for (double& a : alpha) a = a_dist(r);
    const int t = std::uniform_int_distribution<int>(0, c - 1)(r);
    y[t] = 1;
    std::vector<std::gamma_distribution<double>> g;
    for (double a : alpha) g.emplace_back(a, 1.0);
    double mc = 0;
    const int samples = 100000;
    for (int s = 0; s < samples; ++s) {
      double sum = 0, mine = 0;
      for (int k = 0; k < c; ++k) {
        const double v = g[k](r);
        sum += v;
        if (k == t) mine = v;
      }
      mc -= std::log(mine / sum);
    }
    worst = std::max(worst, std::abs(mc / samples - ece_loss(alpha, y)));
  }
  CHECK(worst < 1e-2);
}

TEST_CASE("kl to the uniform Dirichlet") {
  CHECK(kl_to_uniform({1, 1}) == 0.0);
  CHECK(kl_to_uniform({1, 1, 1, 1}) == 0.0);
  CHECK(std::abs(kl_to_uniform({2, 1}) - (std::log(2.0) - 0.5)) < 1e-9);
  CHECK(kl_to_uniform({2, 1}) == doctest::Approx(0.19315).epsilon(1e-4));
  std::mt19937_64 r(5);
  std::uniform_real_distribution<double> u(0.2, 5);
  for (int i = 0; i < 50; ++i) CHECK(kl_to_uniform({u(r), u(r), u(r)}) > 0.0);
  CHECK_THROWS_AS(kl_to_uniform({0.0, 1.0}), DomainError);
}

TEST_CASE("kl agrees with integer recurrences") {
  std::mt19937_64 r(6);
  std::uniform_int_distribution<int> u(1, 12);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + trial % 4;
    std::vector<double> a(c);
    int s = 0;
    for (double& v : a) s += static_cast<int>(v = u(r));
    double kl = lgamma_int(s) - lgamma_int(c);
    for (double v : a) {
      const int k = static_cast<int>(v);
      kl += -lgamma_int(k) + (k - 1) * (digamma_int(k) - digamma_int(s));
    }
    CHECK(std::abs(kl_to_uniform(a) - kl) < 1e-9);
  }
}

TEST_CASE("annealing coefficient") {
  CHECK(annealing_coefficient(0, 100) == 0.0);
  CHECK(annealing_coefficient(25, 100) == 0.5);
  CHECK(annealing_coefficient(50, 100) == 1.0);
  CHECK(annealing_coefficient(100, 100) == 1.0);
  double prev = 0;
  for (int i = 0; i <= 100; ++i) {
    const double phi = annealing_coefficient(i, 100);
    CHECK(phi >= prev);
    CHECK(phi <= 1.0);
    prev = phi;
  }
  CHECK_THROWS_AS(annealing_coefficient(0, 0), ConfigError);
}

TEST_CASE("evidential loss examples") {
  const Tensor alpha({1, 2, 1, 2}, {1.0, 3.0, 1.0, 2.0});
  CHECK(pedl_loss(Var(alpha), labels(1, 1, 2, {0, 2}), 100, 100).value()[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(pedl_loss(Var(alpha), labels(1, 1, 2, {2, 2}), 100, 100).value()[0] == 0.0);
  // Wrong-class concentration: the KL term only contributes once phi > 0.
  const LabelBatch y = labels(1, 1, 2, {2, 0});
  const double ece = ece_loss({3, 2}, {1, 0});
  CHECK(pedl_loss(Var(alpha), y, 0, 100).value()[0] == doctest::Approx(ece));
  CHECK(pedl_loss(Var(alpha), y, 100, 100).value()[0] == doctest::Approx(ece + kl_to_uniform({1, 2})));
  CHECK(pedl_loss(Var(alpha), y, 25, 100).value()[0] == doctest::Approx(ece + 0.5 * kl_to_uniform({1, 2})));
}

TEST_CASE("losses are non-negative at random inputs") {
  std::mt19937_64 r(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({2, 3, 5, 5}, r, -4, 4);
    const LabelBatch y = random_scribble(2, 3, 5, 5, r);
    CHECK(partial_ce(Var(x), y).value()[0] >= 0.0);
    CHECK(gated_crf(Var(random_tensor({2, 3, 5, 5}, r, 0, 1)), random_tensor({2, 1, 5, 5}, r, 0, 1), {}).value()[0] >=
          0.0);
    CHECK(pedl_loss(Var(random_tensor({2, 3, 5, 5}, r, 1, 4)), y, trial * 20, 100).value()[0] >= 0.0);
    CHECK(masked_mse(Var(x), random_tensor(x.shape(), r), Tensor({2, 5, 5}, 1.0)).value()[0] >= 0.0);
  }
}

TEST_CASE("loss gradients") {
  std::mt19937_64 r(8);
  const int n = 2, c = 3, h = 5, w = 5;
  const LabelBatch y = random_scribble(n, c, h, w, r, 0.5);
  const Var x(random_tensor({n, c, h, w}, r, -2, 2), true);
  auto expect = [](const eviscrib::testing::GradCheck& res) {
    CHECK(res.checked >= 20);
    CHECK(res.failed == 0);
  };
  SUBCASE("partial cross-entropy") { expect(grad_check([&] { return partial_ce(x, y); }, {x}, 30, 1)); }
  SUBCASE("gated crf") {
    const Tensor img = random_tensor({n, 1, h, w}, r, 0, 1);
    const Var p(random_tensor({n, c, h, w}, r, 0, 1), true);
    expect(grad_check([&] { return gated_crf(p, img, CrfKernel{}); }, {p}, 30, 2));
  }
  SUBCASE("evidential loss, both annealing regimes") {
    const Var a(random_tensor({n, c, h, w}, r, 1, 4), true);
    expect(grad_check([&] { return pedl_loss(a, y, 0, 100); }, {a}, 30, 3));
    expect(grad_check([&] { return pedl_loss(a, y, 30, 100); }, {a}, 30, 4));
    expect(grad_check([&] { return pedl_loss(a, y, 100, 100); }, {a}, 30, 5));
  }
  SUBCASE("masked mse") {
    const Tensor target = random_tensor({n, c, h, w}, r), m = random_tensor({n, h, w}, r, 0, 1);
    expect(grad_check([&] { return masked_mse(x, target, m); }, {x}, 30, 6));
  }
  SUBCASE("total loss") {
    const Tensor img = random_tensor({n, 1, h, w}, r, 0, 1);
    const Var x2(random_tensor({n, c, h, w}, r, -2, 2), true);
    auto total = [&] {
      LossComponents parts;
      parts.pce_cnn = partial_ce(x, y);
      parts.pce_mamba = partial_ce(x2, y);
      parts.crf_cnn = gated_crf(ops::softmax_channels(x), img, {});
      parts.crf_mamba = gated_crf(ops::softmax_channels(x2), img, {});
      parts.evi = pedl_loss(ops::add_scalar(ops::exp(x), 1.0), y, 60, 100);
      return total_loss(parts, 0.1);
    };
    expect(grad_check(total, {x, x2}, 30, 7));
  }
}

TEST_CASE("total loss composition") {
  auto s = [](double v) { return Var(Tensor::scalar(v)); };
  CHECK(total_loss({}, 0.1).value()[0] == 0.0);
  CHECK(total_loss({s(0), s(0), s(0), s(0), s(0), s(0), s(0)}, 0.1).value()[0] == 0.0);
  CHECK(total_loss({s(1), s(1), s(10), s(10), s(1), s(1), s(1)}, 0.1).value()[0] == doctest::Approx(7.0));
  CHECK(total_loss({s(1), s(1), s(0), s(0), s(1), s(1), s(1)}, 0.1).value()[0] == 5.0);
  CHECK(total_loss({s(1), s(2), s(3), s(4), s(5), s(6), s(7)}, 0.0).value()[0] == 21.0);
  LossComponents bad;
  bad.pce_cnn = s(1);
  bad.pce_mamba = s(NAN);
  CHECK_THROWS_AS(total_loss(bad, 0.1), NonFiniteLoss);
  bad.pce_mamba = s(1);
  bad.crf_cnn = s(INFINITY);
  CHECK_THROWS_AS(total_loss(bad, 0.1), NonFiniteLoss);
  CHECK_THROWS_AS(total_loss({}, -1.0), ConfigError);
}
