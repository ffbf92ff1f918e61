#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eviscrib/errors.hpp"
#include "eviscrib/harness.hpp"
#include "eviscrib/raster.hpp"

using namespace eviscrib;
using namespace eviscrib::harness;
namespace fs = std::filesystem;

namespace {

// Small widths keep the two-branch loop fast.
TrainConfig tiny(Mode mode, const fs::path& out) {
  TrainConfig c;
  c.iter_max = 10;
  c.batch_size = 2;
  c.base_channels = 4;
  c.embed_dim = 4;
  c.state_dim = 2;
  c.mode = mode;
  c.seed = 21;
  c.out_dir = out.string();
  return c;
}

std::vector<data::Sample> samples(int n, std::uint64_t seed = 1) {
  data::GenerationSpec spec;
  return data::generate_dataset(n, spec, seed);
}

fs::path scratch(const char* name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

data::Sample one_hot(int y, int x) {
  data::Sample s;
  s.image = Tensor({64, 64});
  s.dense_mask = LabelMap(64, 64, 0);
  s.scribble = LabelMap(64, 64, 2);
  s.image[y * 64 + x] = 1.0;
  s.dense_mask(y, x) = 1;
  s.scribble(y, x) = 1;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("poly learning rate") {
  CHECK(poly_lr(0, 2000, 0.01) == 0.01);
  CHECK(poly_lr(2000, 2000, 0.01) == 0.0);
  CHECK(poly_lr(1000, 2000, 0.01) == doctest::Approx(std::pow(0.5, 0.9) * 0.01).epsilon(1e-15));
  CHECK(poly_lr(1000, 2000, 0.01) == doctest::Approx(0.005359).epsilon(1e-4));
  double prev = 1;
  for (int i = 0; i <= 100; ++i) {
    CHECK(poly_lr(i, 100, 0.01) <= prev);
    prev = poly_lr(i, 100, 0.01);
  }
}

TEST_CASE("config parsing") {
  std::istringstream ok("# run\ntau = 0.3\nmode = pce  # baseline\n\nseed=9\naugment = false\ndataset = /x/y\n");
  const TrainConfig c = parse_config(ok);
  CHECK(c.tau == 0.3);
  CHECK(c.mode == Mode::pce);
  CHECK(c.seed == 9);
  CHECK_FALSE(c.augment);
  CHECK(c.dataset == "/x/y");
  CHECK(c.epsilon == 0.5);
  CHECK(c.gamma == 0.1);

  std::istringstream unknown("tau = 0.3\nlearning_rate = 1\n");
  CHECK_THROWS_AS(parse_config(unknown), ConfigError);
  std::istringstream garbage("iter_max = ten\n");
  CHECK_THROWS_AS(parse_config(garbage), ConfigError);
  std::istringstream no_eq("iter_max 10\n");
  CHECK_THROWS_AS(parse_config(no_eq), ConfigError);
  std::istringstream bad_mode("mode = both\n");
  CHECK_THROWS_AS(parse_config(bad_mode), ConfigError);
  std::istringstream negative("batch_size = 0\n");
  CHECK_THROWS_AS(parse_config(negative), ConfigError);
}

TEST_CASE("config text round trip") {
  TrainConfig c;
  c.tau = 0.125;
  c.mode = Mode::mse;
  c.dataset = "data/train";
  c.augment = false;
  std::istringstream in(to_config_text(c));
  const TrainConfig d = parse_config(in);
  CHECK(d.tau == c.tau);
  CHECK(d.mode == c.mode);
  CHECK(d.dataset == c.dataset);
  CHECK(d.augment == c.augment);
  CHECK(to_config_text(d) == to_config_text(c));
}

TEST_CASE("identity augmentation leaves the sample unchanged") {
  const auto s = samples(1)[0];
  const auto t = augment(s, AugmentParams{});
  CHECK(t.dense_mask == s.dense_mask);
  CHECK(t.scribble == s.scribble);
  for (std::size_t i = 0; i < s.image.size(); ++i) CHECK(t.image[i] == s.image[i]);
}

TEST_CASE("flipping twice restores the sample") {
  const auto s = samples(1)[0];
  AugmentParams p;
  p.flip_h = true;
  const auto once = augment(s, p);
  CHECK_FALSE(once.dense_mask == s.dense_mask);
  const auto twice = augment(once, p);
  CHECK(twice.dense_mask == s.dense_mask);
  CHECK(twice.scribble == s.scribble);
  for (std::size_t i = 0; i < s.image.size(); ++i) CHECK(twice.image[i] == s.image[i]);
}

TEST_CASE("quarter turn moves a pixel to the rotated coordinate") {
  AugmentParams p;
  p.rot90 = 1;
  const auto t = augment(one_hot(2, 3), p);
  // counter-clockwise: (y, x) -> (W - 1 - x, y)
  CHECK(t.image[60 * 64 + 2] == 1.0);
  CHECK(t.image.sum() == 1.0);
  CHECK(t.dense_mask(60, 2) == 1);
  CHECK(t.scribble(60, 2) == 1);
  p.rot90 = 4 - 1;
  const auto back = augment(t, p);
  CHECK(back.image[2 * 64 + 3] == 1.0);
}

TEST_CASE("random augmentation keeps labels valid") {
  Rng rng(3);
  for (const auto& s : samples(4)) {
    for (int k = 0; k < 10; ++k) {
      const auto t = augment(s, rng);
      for (double v : t.image.values()) CHECK((v >= 0.0 && v <= 1.0));
      for (std::size_t i = 0; i < t.scribble.size(); ++i) {
        CHECK((t.dense_mask.values[i] >= 0 && t.dense_mask.values[i] < 2));
        if (t.scribble.values[i] < 2) CHECK(t.scribble.values[i] == t.dense_mask.values[i]);
      }
    }
  }
}

TEST_CASE("metrics log layout") {
  CHECK(log_header() == "iter,loss_total,loss_pce_cnn,loss_pce_mamba,loss_crf_cnn,loss_crf_mamba,loss_evi,loss_ic,"
                        "loss_c,lambda,lr");
  IterationLog row;
  row.iter = 3;
  row.loss_total = 0.1;
  row.lr = 0.01;
  CHECK(format_log(row) == "3,0.10000000000000001,0,0,0,0,0,0,0,0,0.01");
}

TEST_CASE("ten-iteration smoke run") {
  const auto dir = scratch("eviscrib_smoke");
  const auto art = train(tiny(Mode::full, dir), samples(8));
  REQUIRE(art.log.size() == 10);
  CHECK(art.skipped_steps == 0);
  CHECK(art.log[0].lambda == 0.5);
  for (const auto& row : art.log) {
    CHECK(row.lambda >= 0.0);
    CHECK(row.lambda <= 1.0);
    CHECK(std::isfinite(row.loss_total));
    CHECK(row.lr == poly_lr(row.iter, 10, 0.01));
  }
  CHECK(fs::exists(art.cnn_checkpoint));
  CHECK(fs::exists(art.mamba_checkpoint));
  CHECK(fs::exists(dir / "config.txt"));
  std::istringstream log(slurp(art.metrics_log));
  std::string line;
  int lines = 0;
  std::getline(log, line);
  CHECK(line == log_header());
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 10);
  fs::remove_all(dir);
}

TEST_CASE("baseline and mse modes run") {
  for (Mode m : {Mode::pce, Mode::mse}) {
    const auto dir = scratch("eviscrib_modes");
    const auto art = train(tiny(m, dir), samples(4));
    CHECK(art.log.size() == 10);
    for (const auto& row : art.log) {
      CHECK(std::isfinite(row.loss_total));
      CHECK(row.loss_c == 0.0);
      if (m == Mode::pce) {
        CHECK(row.loss_pce_mamba == 0.0);
        CHECK(row.loss_evi == 0.0);
        CHECK(row.loss_ic == 0.0);
      }
    }
    CHECK(art.mamba_checkpoint.empty() == (m == Mode::pce));
    fs::remove_all(dir);
  }
}

TEST_CASE("fixed seed reproduces the log bit for bit") {
  const auto a = scratch("eviscrib_repro_a"), b = scratch("eviscrib_repro_b");
  auto ca = tiny(Mode::full, a), cb = tiny(Mode::full, b);
  ca.iter_max = cb.iter_max = 6;
  train(ca, samples(6));
  train(cb, samples(6));
  const std::string la = slurp(a / "metrics.csv");
  CHECK(la.size() > 100);
  CHECK(la == slurp(b / "metrics.csv"));
  auto cc = ca;
  cc.seed = 22;
  cc.out_dir = (a / "other").string();
  train(cc, samples(6));
  CHECK(la != slurp(a / "other" / "metrics.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("non-finite losses skip steps and eventually abort") {
  auto cfg = tiny(Mode::full, scratch("eviscrib_nan"));
  cfg.iter_max = 20;
  Trainer t(cfg, samples(4));
  t.step();
  Var w = t.cnn_params().entries()[0].var;
  w.mutable_value()[0] = std::nan("");
  const Tensor before = t.cnn_params().entries()[1].var.value();
  for (int k = 0; k < 9; ++k) {
    const auto row = t.step();
    CHECK(row.skipped);
  }
  CHECK(t.consecutive_failures() == 9);
  const Tensor& after = t.cnn_params().entries()[1].var.value();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);
  CHECK_THROWS_AS(t.step(), TrainingAborted);
}

TEST_CASE("inference uses the cnn branch only") {
  const auto dir = scratch("eviscrib_infer");
  auto cfg = tiny(Mode::full, dir);
  cfg.iter_max = 2;
  Trainer t(cfg, samples(4));
  t.step();
  t.step();
  fs::create_directories(dir);
  save_checkpoint(t.cnn_params(), dir / "cnn.ckpt");
  const CnnModel model = load_cnn(dir / "cnn.ckpt");
  CHECK(model.config.base_channels == 4);
  CHECK(model.config.depth == cfg.depth);

  t.mamba_params().reset_access_count();
  t.cnn_params().reset_access_count();
  const auto s = samples(2, 9);
  const LabelMap a = infer(model, s[0].image);
  const LabelMap b = infer(model, s[0].image);
  CHECK(a == b);
  for (int v : a.values) CHECK((v == 0 || v == 1));
  CHECK(t.mamba_params().access_count() == 0);
  CHECK(model.params.access_count() > 0);

  CHECK_THROWS_AS(infer(model, Tensor({60, 60})), ConfigError);
  save_checkpoint(t.mamba_params(), dir / "mamba.ckpt");
  CHECK_THROWS_AS(load_cnn(dir / "mamba.ckpt"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("gaussian noise") {
  Rng rng(5);
  Tensor img({256, 256}, 0.5);
  const Tensor same = add_gaussian_noise(img, 0.0, rng);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(same[i] == img[i]);
  for (double sigma : {0.05, 0.1}) {
    const Tensor noisy = add_gaussian_noise(img, sigma, rng);
    double mad = 0;
    for (std::size_t i = 0; i < img.size(); ++i) {
      mad += std::abs(noisy[i] - img[i]);
      CHECK((noisy[i] >= 0 && noisy[i] <= 1));
    }
    mad /= img.size();
    CHECK(mad == doctest::Approx(sigma * std::sqrt(2 / std::numbers::pi)).epsilon(0.05));
  }
}

TEST_CASE("robustness sweep at zero noise matches clean evaluation") {
  const auto dir = scratch("eviscrib_robust");
  auto cfg = tiny(Mode::full, dir);
  cfg.iter_max = 2;
  const auto art = train(cfg, samples(4));
  const CnnModel model = load_cnn(art.cnn_checkpoint);
  const auto test = samples(3, 4);
  const auto clean = evaluate_dataset(model, test, 0.25);
  const auto rows = robustness_sweep(model, test, {0.0, 0.1}, 0.25, 7, dir / "export");
  REQUIRE(rows.size() == 2);
  CHECK(metrics::to_csv(rows[0].evaluation.mean) == metrics::to_csv(clean.mean));
  CHECK(rows[0].evaluation.mean_uncertainty == clean.mean_uncertainty);
  for (const auto& s : test) {
    CHECK(fs::exists(dir / "export" / "sigma_0.00" / (s.id + ".pgm")));
    CHECK(fs::exists(dir / "export" / "sigma_0.10" / (s.id + ".pgm")));
  }
  export_uncertainty(model, test, 0.25, dir / "u");
  const auto g = raster::read_pgm(dir / "u" / (test[0].id + ".pgm"));
  CHECK(g.width == 64);
  CHECK(g.height == 64);
  fs::remove_all(dir);
}
