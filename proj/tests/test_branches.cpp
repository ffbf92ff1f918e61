#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "eviscrib/cnn.hpp"
#include "eviscrib/errors.hpp"
#include "eviscrib/mamba.hpp"
#include "eviscrib/ops.hpp"
#include "support.hpp"

using namespace eviscrib;
using eviscrib::testing::grad_check;
using eviscrib::testing::random_tensor;
using eviscrib::testing::trainable;

namespace {

Var probe(const Var& y) {
  std::mt19937_64 r(5);
  return ops::sum(ops::mul(y, Var(random_tensor(y.shape(), r))));
}

bool same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

void perturb(ParameterSet& p, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  for (const auto& e : p.entries())
    if (e.trainable)
      for (double& v : Var(e.var).mutable_value().values()) v += g(rng);
}

}  // namespace

// ---- CNN ----

TEST_CASE("unet output shape and determinism") {
  Rng rng(1);
  cnn::CnnConfig cfg;
  const auto p = cnn::init_unet(cfg, rng);
  std::mt19937_64 r(2);
  const Var x(random_tensor({1, 1, 64, 64}, r, 0, 1));
  const Tensor a = cnn::unet_forward(x, cfg, p, false).value();
  const Tensor b = cnn::unet_forward(x, cfg, p, false).value();
  CHECK(a.shape() == Shape{1, 2, 64, 64});
  CHECK(same(a, b));
  CHECK(a.all_finite());
}

TEST_CASE("unet rejects sizes that do not divide") {
  Rng rng(1);
  cnn::CnnConfig cfg;
  const auto p = cnn::init_unet(cfg, rng);
  CHECK_THROWS_AS(cnn::unet_forward(Var(Tensor({1, 1, 60, 64})), cfg, p, false), ConfigError);
  cfg.depth = 1;
  CHECK_THROWS_AS(cnn::validate(cfg, 64, 64), ConfigError);
}

TEST_CASE("unet skip ablation changes the output") {
  Rng rng(4);
  cnn::CnnConfig cfg;
  cfg.base_channels = 4;
  const auto p = cnn::init_unet(cfg, rng);
  std::mt19937_64 r(3);
  const Var x(random_tensor({1, 1, 16, 16}, r, 0, 1));
  const Tensor full = cnn::unet_forward(x, cfg, p, false).value();
  for (int level = 0; level < cfg.depth - 1; ++level)
    CHECK_FALSE(same(full, cnn::unet_forward(x, cfg, p, false, {level}).value()));
}

TEST_CASE("unet gradient of sum(logits) in evaluation mode") {
  Rng rng(7);
  cnn::CnnConfig cfg;
  cfg.base_channels = 4;
  auto p = cnn::init_unet(cfg, rng);
  std::mt19937_64 r(8);
  perturb(p, r, 0.05);
  const Var x(random_tensor({1, 1, 16, 16}, r, 0, 1));
  const auto res = grad_check([&] { return ops::sum(cnn::unet_forward(x, cfg, p, false)); }, trainable(p), 40, 1);
  CHECK(res.checked >= 20);
  CHECK(res.failed == 0);
}

TEST_CASE("unet gradient in training mode on a 32x32 batch") {
  Rng rng(9);
  cnn::CnnConfig cfg;
  cfg.base_channels = 4;
  auto p = cnn::init_unet(cfg, rng);
  std::mt19937_64 r(10);
  const Var x(random_tensor({2, 1, 32, 32}, r, 0, 1));
  const auto res = grad_check([&] { return probe(cnn::unet_forward(x, cfg, p, true)); }, trainable(p), 40, 2);
  CHECK(res.checked >= 20);
  CHECK(res.failed == 0);
}

// ---- state-space branch ----

TEST_CASE("selective ssm: zero input gives zero output, shape preserved") {
  Rng rng(1);
  ParameterSet p;
  mamba::add_selective_ssm_params(p, "s", 6, 4, rng);
  p.at("s.delta_proj.bias").mutable_value().fill(0.0);
  const Tensor y = mamba::selective_ssm(Var(Tensor({2, 9, 6})), p, "s").value();
  CHECK(y.shape() == Shape{2, 9, 6});
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("selective ssm gradient") {
  Rng rng(2);
  ParameterSet p;
  mamba::add_selective_ssm_params(p, "s", 4, 3, rng);
  std::mt19937_64 r(3);
  const Var x(random_tensor({2, 7, 4}, r), true);
  auto inputs = trainable(p);
  inputs.push_back(x);
  const auto res = grad_check([&] { return probe(mamba::selective_ssm(x, p, "s")); }, inputs, 60, 3);
  CHECK(res.failed == 0);
  CHECK(res.worst < 1e-3);
}

TEST_CASE("scan orders cover the grid") {
  const auto orders = mamba::scan_orders(2, 3);
  REQUIRE(orders.size() == 4);
  CHECK(orders[0] == std::vector<int>{0, 1, 2, 3, 4, 5});
  CHECK(orders[1] == std::vector<int>{5, 4, 3, 2, 1, 0});
  CHECK(orders[2] == std::vector<int>{0, 3, 1, 4, 2, 5});
  CHECK(orders[3] == std::vector<int>{5, 2, 4, 1, 3, 0});
}

TEST_CASE("ss2d on a single pixel is four times one scan") {
  Rng rng(4);
  ParameterSet p;
  mamba::add_selective_ssm_params(p, "s", 5, 3, rng);
  std::mt19937_64 r(5);
  const Tensor x = random_tensor({1, 1, 1, 5}, r);
  const Tensor one = mamba::selective_ssm(Var(x.reshaped({1, 1, 5})), p, "s").value();
  const Tensor four = mamba::ss2d(Var(x), p, "s").value();
  CHECK(four.shape() == x.shape());
  for (int c = 0; c < 5; ++c) CHECK(four[c] == doctest::Approx(4 * one[c]).epsilon(1e-12));
}

TEST_CASE("ss2d commutes with transposition") {
  Rng rng(6);
  ParameterSet p;
  mamba::add_selective_ssm_params(p, "s", 3, 4, rng);
  std::mt19937_64 r(7);
  const int h = 8, w = 8, c = 3;
  const Tensor x = random_tensor({1, h, w, c}, r);
  Tensor xt({1, w, h, c});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k) xt[(j * h + i) * c + k] = x[(i * w + j) * c + k];
  const Tensor y = mamba::ss2d(Var(x), p, "s").value();
  const Tensor yt = mamba::ss2d(Var(xt), p, "s").value();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k)
        CHECK(yt[(j * h + i) * c + k] == doctest::Approx(y[(i * w + j) * c + k]).epsilon(1e-10));
}

TEST_CASE("vss block: zero linear maps give the identity") {
  Rng rng(8);
  mamba::VssConfig cfg;
  ParameterSet p;
  mamba::add_vss_block_params(p, "b", 32, cfg, rng);
  for (const auto& name : {"b.in_proj.weight", "b.gate_proj.weight", "b.out_proj.weight"})
    p.at(name).mutable_value().fill(0.0);
  std::mt19937_64 r(9);
  const Tensor x = random_tensor({1, 8, 8, 32}, r);
  const Tensor y = mamba::vss_block(Var(x), p, "b").value();
  CHECK(same(x, y));
}

TEST_CASE("vss block shape and gradient") {
  Rng rng(10);
  mamba::VssConfig cfg;
  cfg.state_dim = 3;
  ParameterSet p;
  mamba::add_vss_block_params(p, "b", 4, cfg, rng);
  std::mt19937_64 r(11);
  perturb(p, r, 0.05);
  const Var x(random_tensor({1, 4, 4, 4}, r), true);
  CHECK(mamba::vss_block(x, p, "b").shape() == Shape{1, 4, 4, 4});
  auto inputs = trainable(p);
  inputs.push_back(x);
  const auto res = grad_check([&] { return probe(mamba::vss_block(x, p, "b")); }, inputs, 60, 4);
  CHECK(res.failed == 0);
}

TEST_CASE("mamba unet stage shapes and output") {
  Rng rng(12);
  mamba::VssConfig cfg;
  const auto p = mamba::init_mamba_unet(cfg, rng);
  std::mt19937_64 r(13);
  const Var x(random_tensor({1, 1, 64, 64}, r, 0, 1));
  std::vector<Shape> stages;
  const Tensor y = mamba::mamba_unet_forward(x, cfg, p, &stages).value();
  CHECK(y.shape() == Shape{1, 2, 64, 64});
  CHECK(y.all_finite());
  REQUIRE(stages.size() == 4);
  CHECK(stages[0] == Shape{16, 16, 32});
  CHECK(stages[1] == Shape{8, 8, 64});
  CHECK(stages[2] == Shape{4, 4, 128});
  CHECK(stages[3] == Shape{2, 2, 256});
  CHECK(same(y, mamba::mamba_unet_forward(x, cfg, p).value()));
}

TEST_CASE("mamba unet rejects sizes not divisible by 32") {
  Rng rng(14);
  mamba::VssConfig cfg;
  const auto p = mamba::init_mamba_unet(cfg, rng);
  CHECK_THROWS_AS(mamba::mamba_unet_forward(Var(Tensor({1, 1, 48, 64})), cfg, p), ConfigError);
}

TEST_CASE("mamba unet gradient on 32x32") {
  Rng rng(15);
  mamba::VssConfig cfg;
  cfg.embed_dim = 4;
  cfg.state_dim = 3;
  auto p = mamba::init_mamba_unet(cfg, rng);
  std::mt19937_64 r(16);
  perturb(p, r, 0.02);
  const Var x(random_tensor({1, 1, 32, 32}, r, 0, 1));
  const auto res = grad_check([&] { return probe(mamba::mamba_unet_forward(x, cfg, p)); }, trainable(p), 60, 5);
  CHECK(res.failed == 0);
}

TEST_CASE("checkpoint round trip for both branches") {
  Rng rng(17);
  cnn::CnnConfig cc;
  mamba::VssConfig vc;
  const auto pc = cnn::init_unet(cc, rng);
  const auto pm = mamba::init_mamba_unet(vc, rng);
  const auto dir = std::filesystem::temp_directory_path() / "eviscrib_ckpt_test";
  std::filesystem::create_directories(dir);
  for (const auto* p : {&pc, &pm}) {
    save_checkpoint(*p, dir / "x.ckpt");
    const auto q = load_checkpoint(dir / "x.ckpt");
    REQUIRE(q.size() == p->size());
    for (std::size_t i = 0; i < q.size(); ++i) {
      CHECK(q.entries()[i].name == p->entries()[i].name);
      CHECK(q.entries()[i].trainable == p->entries()[i].trainable);
      const Tensor& a = p->entries()[i].var.value();
      const Tensor& b = q.entries()[i].var.value();
      REQUIRE(a.shape() == b.shape());
      std::size_t mismatched = 0;
      for (std::size_t k = 0; k < a.size(); ++k) mismatched += b[k] != static_cast<double>(static_cast<float>(a[k]));
      CHECK(mismatched == 0);
    }
  }
  ParameterSet wrong = cnn::init_unet(cc, rng);
  CHECK_THROWS_AS(load_checkpoint_into(wrong, dir / "x.ckpt"), ConfigError);
  std::filesystem::remove_all(dir);
}
