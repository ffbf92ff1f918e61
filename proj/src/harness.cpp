#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "eviscrib/egc.hpp"
#include "eviscrib/errors.hpp"
#include "eviscrib/evidence.hpp"
#include "eviscrib/harness.hpp"
#include "eviscrib/losses.hpp"
#include "eviscrib/ops.hpp"
#include "eviscrib/raster.hpp"

namespace eviscrib::harness {

namespace fs = std::filesystem;
using data::Sample;

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::full: return "full";
    case Mode::mse: return "mse";
    case Mode::pce: return "pce";
  }
  return "full";
}

Mode parse_mode(const std::string& text) {
  if (text == "full") return Mode::full;
  if (text == "mse") return Mode::mse;
  if (text == "pce") return Mode::pce;
  throw ConfigError("unknown mode '" + text + "' (expected full, mse or pce)");
}

void validate(const TrainConfig& c) {
  auto positive = [](double v, const char* key) {
    if (!(v > 0)) throw ConfigError(std::string("config: ") + key + " must be positive");
  };
  positive(c.tau, "tau");
  positive(c.epsilon, "epsilon");
  positive(c.lr0, "lr0");
  positive(c.batch_size, "batch_size");
  positive(c.iter_max, "iter_max");
  positive(c.base_channels, "base_channels");
  positive(c.embed_dim, "embed_dim");
  positive(c.state_dim, "state_dim");
  positive(c.vss_depth, "vss_depth");
  if (c.gamma < 0) throw ConfigError("config: gamma must be non-negative");
  if (c.momentum < 0 || c.momentum >= 1) throw ConfigError("config: momentum must lie in [0, 1)");
  if (c.weight_decay < 0) throw ConfigError("config: weight_decay must be non-negative");
  if (c.checkpoint_interval < 0) throw ConfigError("config: checkpoint_interval must be non-negative");
  if (c.depth < 2) throw ConfigError("config: depth must be at least 2");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError(where + ": cannot parse '" + text + "'");
  return value;
}

bool parse_bool(const std::string& text, const std::string& where) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(where + ": expected true or false, got '" + text + "'");
}

}  // namespace

TrainConfig parse_config(std::istream& in) {
  TrainConfig c;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const std::string at = where + " (" + key + ")";
    if (key == "tau") c.tau = parse_number<double>(value, at);
    else if (key == "epsilon") c.epsilon = parse_number<double>(value, at);
    else if (key == "gamma") c.gamma = parse_number<double>(value, at);
    else if (key == "batch_size") c.batch_size = parse_number<int>(value, at);
    else if (key == "iter_max") c.iter_max = parse_number<int>(value, at);
    else if (key == "lr0") c.lr0 = parse_number<double>(value, at);
    else if (key == "momentum") c.momentum = parse_number<double>(value, at);
    else if (key == "weight_decay") c.weight_decay = parse_number<double>(value, at);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(value, at);
    else if (key == "dataset") c.dataset = value;
    else if (key == "checkpoint_interval") c.checkpoint_interval = parse_number<int>(value, at);
    else if (key == "mode") c.mode = parse_mode(value);
    else if (key == "out_dir") c.out_dir = value;
    else if (key == "augment") c.augment = parse_bool(value, at);
    else if (key == "base_channels") c.base_channels = parse_number<int>(value, at);
    else if (key == "depth") c.depth = parse_number<int>(value, at);
    else if (key == "embed_dim") c.embed_dim = parse_number<int>(value, at);
    else if (key == "state_dim") c.state_dim = parse_number<int>(value, at);
    else if (key == "vss_depth") c.vss_depth = parse_number<int>(value, at);
    else throw ConfigError(where + ": unknown key '" + key + "'");
  }
  validate(c);
  return c;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in);
}

std::string to_config_text(const TrainConfig& c) {
  std::ostringstream s;
  s << std::setprecision(17);
  s << "tau = " << c.tau << "\nepsilon = " << c.epsilon << "\ngamma = " << c.gamma
    << "\nbatch_size = " << c.batch_size << "\niter_max = " << c.iter_max << "\nlr0 = " << c.lr0
    << "\nmomentum = " << c.momentum << "\nweight_decay = " << c.weight_decay << "\nseed = " << c.seed
    << "\ndataset = " << c.dataset << "\ncheckpoint_interval = " << c.checkpoint_interval
    << "\nmode = " << to_string(c.mode) << "\nout_dir = " << c.out_dir
    << "\naugment = " << (c.augment ? "true" : "false") << "\nbase_channels = " << c.base_channels
    << "\ndepth = " << c.depth << "\nembed_dim = " << c.embed_dim << "\nstate_dim = " << c.state_dim
    << "\nvss_depth = " << c.vss_depth << "\n";
  return s.str();
}

cnn::CnnConfig cnn_config(const TrainConfig& config, int num_classes) {
  cnn::CnnConfig c;
  c.base_channels = config.base_channels;
  c.depth = config.depth;
  c.num_classes = num_classes;
  return c;
}

mamba::VssConfig vss_config(const TrainConfig& config, int num_classes) {
  mamba::VssConfig v;
  v.embed_dim = config.embed_dim;
  v.state_dim = config.state_dim;
  v.depth = config.vss_depth;
  v.num_classes = num_classes;
  return v;
}

double poly_lr(int iter, int iter_max, double lr0) {
  if (iter_max <= 0) throw ConfigError("poly_lr: iter_max must be positive");
  if (iter < 0 || iter > iter_max) throw ContractError("poly_lr: iter outside [0, iter_max]");
  return std::pow(1.0 - static_cast<double>(iter) / iter_max, 0.9) * lr0;
}

// ---- augmentation ----

AugmentParams draw_augment(Rng& rng, int height, int width) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentParams p;
  p.flip_h = u01(rng) < 0.5;
  p.flip_v = u01(rng) < 0.5;
  const double r = u01(rng);
  if (height == width && r < 0.25) p.rot90 = 1 + static_cast<int>(u01(rng) * 3) % 3;
  if (u01(rng) < 0.3) p.angle_deg = -15.0 + 30.0 * u01(rng);
  if (u01(rng) < 0.5) p.brightness = -0.1 + 0.2 * u01(rng);
  if (u01(rng) < 0.5) p.contrast = 0.8 + 0.4 * u01(rng);
  p.equalize = u01(rng) < 0.1;
  return p;
}

namespace {

// Generic nearest-neighbour resampler: out(y, x) = in(src(y, x)) or `fill`.
template <typename T, typename Map>
std::vector<T> remap(const std::vector<T>& in, int h, int w, int oh, int ow, Map&& src, T fill) {
  std::vector<T> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const auto [sy, sx] = src(y, x);
      out[static_cast<std::size_t>(y) * ow + x] =
          (sy >= 0 && sy < h && sx >= 0 && sx < w) ? in[static_cast<std::size_t>(sy) * w + sx] : fill;
    }
  return out;
}

struct Grids {
  int h, w;
  std::vector<double> image;
  std::vector<int> mask, scribble;

  template <typename Map>
  void apply(int oh, int ow, Map&& src, int unlabeled) {
    image = remap(image, h, w, oh, ow, src, 0.0);
    mask = remap(mask, h, w, oh, ow, src, 0);
    scribble = remap(scribble, h, w, oh, ow, src, unlabeled);
    h = oh;
    w = ow;
  }
};

void equalize(std::vector<double>& image) {
  std::array<std::size_t, 256> hist{};
  for (double v : image) ++hist[static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))];
  std::array<std::size_t, 256> cdf{};
  std::partial_sum(hist.begin(), hist.end(), cdf.begin());
  const std::size_t first = *std::find_if(cdf.begin(), cdf.end(), [](std::size_t c) { return c > 0; });
  const std::size_t n = image.size();
  if (n == first) return;  // constant image
  for (double& v : image) {
    const std::size_t c = cdf[static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))];
    v = std::round(255.0 * static_cast<double>(c - first) / static_cast<double>(n - first)) / 255.0;
  }
}

}  // namespace

Sample augment(const Sample& sample, const AugmentParams& p) {
  const int c = sample.num_classes;
  Grids g{sample.height(), sample.width(), {sample.image.values().begin(), sample.image.values().end()},
          sample.dense_mask.values, sample.scribble.values};
  if (p.flip_h) g.apply(g.h, g.w, [w = g.w](int y, int x) { return std::pair{y, w - 1 - x}; }, c);
  if (p.flip_v) g.apply(g.h, g.w, [h = g.h](int y, int x) { return std::pair{h - 1 - y, x}; }, c);
  for (int k = 0; k < ((p.rot90 % 4) + 4) % 4; ++k) {
    // Counter-clockwise: out(y, x) = in(x, W - 1 - y).
    if (g.h != g.w) throw ContractError("augment: quarter turns need a square image");
    g.apply(g.w, g.h, [w = g.w](int y, int x) { return std::pair{x, w - 1 - y}; }, c);
  }
  if (p.angle_deg != 0.0) {
    const double t = p.angle_deg * std::numbers::pi / 180.0, ct = std::cos(t), st = std::sin(t);
    const double cy = (g.h - 1) / 2.0, cx = (g.w - 1) / 2.0;
    g.apply(g.h, g.w,
            [&](int y, int x) {
              const double dy = y - cy, dx = x - cx;
              return std::pair{static_cast<int>(std::lround(cy + ct * dy - st * dx)),
                               static_cast<int>(std::lround(cx + st * dy + ct * dx))};
            },
            c);
  }
  if (p.brightness != 0.0 || p.contrast != 1.0)
    for (double& v : g.image) v = std::clamp((v - 0.5) * p.contrast + 0.5 + p.brightness, 0.0, 1.0);
  if (p.equalize) equalize(g.image);

  Sample out;
  out.id = sample.id;
  out.num_classes = c;
  out.image = Tensor({g.h, g.w}, std::move(g.image));
  out.dense_mask = LabelMap(g.h, g.w);
  out.dense_mask.values = std::move(g.mask);
  out.scribble = LabelMap(g.h, g.w);
  out.scribble.values = std::move(g.scribble);
  return out;
}

Sample augment(const Sample& sample, Rng& rng) {
  return augment(sample, draw_augment(rng, sample.height(), sample.width()));
}

// ---- metrics log ----

std::string log_header() {
  return "iter,loss_total,loss_pce_cnn,loss_pce_mamba,loss_crf_cnn,loss_crf_mamba,loss_evi,loss_ic,loss_c,lambda,lr";
}

std::string format_log(const IterationLog& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.iter,
                r.loss_total, r.loss_pce_cnn, r.loss_pce_mamba, r.loss_crf_cnn, r.loss_crf_mamba, r.loss_evi,
                r.loss_ic, r.loss_c, r.lambda, r.lr);
  return buf;
}

// ---- training ----

namespace {

Tensor image_batch(const std::vector<Sample>& batch) {
  const int h = batch[0].height(), w = batch[0].width();
  Tensor t({static_cast<int>(batch.size()), 1, h, w});
  std::size_t off = 0;
  for (const auto& s : batch) {
    std::copy(s.image.values().begin(), s.image.values().end(), t.data() + off);
    off += s.image.size();
  }
  return t;
}

// u = C / S per pixel from Dirichlet parameters (N, C, H, W).
Tensor uncertainty_of(const Tensor& alpha) {
  const int n = alpha.dim(0), c = alpha.dim(1);
  const std::size_t hw = static_cast<std::size_t>(alpha.dim(2)) * alpha.dim(3);
  Tensor u({n, alpha.dim(2), alpha.dim(3)});
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      double s = 0;
      for (int k = 0; k < c; ++k) s += alpha[(static_cast<std::size_t>(b) * c + k) * hw + i];
      u[b * hw + i] = c / s;
    }
  return u;
}

double value_of(const Var& v) { return v ? v.value()[0] : 0.0; }

std::vector<Tensor> momentum_buffers(const ParameterSet& p) {
  std::vector<Tensor> out;
  for (const auto& e : p.entries()) out.push_back(e.trainable ? Tensor::zeros_like(e.var.value()) : Tensor());
  return out;
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, std::vector<Sample> train_set)
    : config_(config), train_(std::move(train_set)), rng_(config.seed) {
  validate(config_);
  if (train_.empty()) throw ConfigError("train: empty training set");
  num_classes_ = train_[0].num_classes;
  for (const auto& s : train_)
    if (s.num_classes != num_classes_ || s.height() != train_[0].height() || s.width() != train_[0].width())
      throw ConfigError("train: samples differ in size or class count");
  cnn_config_ = cnn_config(config_, num_classes_);
  vss_config_ = vss_config(config_, num_classes_);
  const int h = train_[0].height(), w = train_[0].width();
  cnn::validate(cnn_config_, h, w);
  Rng init_rng(data::stream_seed(config_.seed, 1));
  cnn_params_ = cnn::init_unet(cnn_config_, init_rng);
  cnn_momentum_ = momentum_buffers(cnn_params_);
  if (config_.mode != Mode::pce) {
    mamba::validate(vss_config_, h, w);
    Rng mamba_rng(data::stream_seed(config_.seed, 2));
    mamba_params_ = mamba::init_mamba_unet(vss_config_, mamba_rng);
    mamba_momentum_ = momentum_buffers(mamba_params_);
  }
  iter_max_ = config_.iter_max;
  threshold_lambda_ = 1.0 / num_classes_;
  order_.resize(train_.size());
}

std::vector<std::size_t> Trainer::next_batch() {
  std::vector<std::size_t> out;
  while (static_cast<int>(out.size()) < config_.batch_size) {
    if (cursor_ == 0) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng_);
    }
    out.push_back(order_[cursor_]);
    cursor_ = (cursor_ + 1) % order_.size();
  }
  return out;
}

void Trainer::sgd_step(ParameterSet& params, std::vector<Tensor>& momentum, double lr) {
  const auto& entries = params.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!entries[k].trainable) continue;
    Var v = entries[k].var;
    if (!v.has_grad()) continue;
    Tensor& p = v.mutable_value();
    const Tensor& g = v.grad();
    Tensor& buf = momentum[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = g[i] + config_.weight_decay * p[i];
      buf[i] = config_.momentum * buf[i] + d;
      p[i] -= lr * buf[i];
    }
  }
}

IterationLog Trainer::step() {
  if (done()) throw ContractError("Trainer::step: training already finished");
  IterationLog row;
  row.iter = iter_;
  row.lr = poly_lr(iter_, iter_max_, config_.lr0);

  std::vector<Sample> batch;
  for (std::size_t idx : next_batch())
    batch.push_back(config_.augment ? augment(train_[idx], rng_) : train_[idx]);
  std::vector<LabelMap> scribbles;
  for (const auto& s : batch) scribbles.push_back(s.scribble);
  const LabelBatch scribble = LabelBatch::stack(scribbles);
  const Tensor images = image_batch(batch);
  const Var input(images);

  cnn_params_.zero_grad();
  mamba_params_.zero_grad();

  losses::LossComponents parts;
  const Var logits_cnn = cnn::unet_forward(input, cnn_config_, cnn_params_, true);
  parts.pce_cnn = losses::partial_ce(logits_cnn, scribble);

  const Var alpha_cnn = evidence::dirichlet_alpha(evidence::evidence_from_logits(logits_cnn, config_.tau));
  const Tensor u_cnn = uncertainty_of(alpha_cnn.value());

  egc::ThresholdState threshold{threshold_lambda_, iter_, iter_max_, num_classes_};
  if (config_.mode == Mode::pce) {
    row.lambda = egc::update_threshold(u_cnn, u_cnn, threshold);
  } else {
    const losses::CrfKernel kernel;
    parts.crf_cnn = losses::gated_crf(ops::softmax_channels(logits_cnn), images, kernel);

    const Var logits_mamba = mamba::mamba_unet_forward(input, vss_config_, mamba_params_);
    parts.pce_mamba = losses::partial_ce(logits_mamba, scribble);
    parts.crf_mamba = losses::gated_crf(ops::softmax_channels(logits_mamba), images, kernel);

    const Var alpha_mamba = evidence::dirichlet_alpha(evidence::evidence_from_logits(logits_mamba, config_.tau));
    const Tensor u_mamba = uncertainty_of(alpha_mamba.value());
    parts.evi = ops::add(losses::pedl_loss(alpha_cnn, scribble, iter_, iter_max_),
                         losses::pedl_loss(alpha_mamba, scribble, iter_, iter_max_));

    row.lambda = egc::update_threshold(u_cnn, u_mamba, threshold);
    const Var prob_cnn = evidence::expected_probability(alpha_cnn);
    const Var prob_mamba = evidence::expected_probability(alpha_mamba);

    if (config_.mode == Mode::full) {
      const auto masks = egc::partition(u_cnn, u_mamba, row.lambda);
      const auto regions = egc::split_regions(logits_cnn, logits_mamba, prob_cnn, prob_mamba, masks);
      const auto guidance = egc::evidence_guidance(regions.prob_cnn_ic, regions.prob_mamba_ic, config_.epsilon);
      parts.ic = ops::add(guidance.loss_a, guidance.loss_b);
      parts.c = egc::cross_pseudo_loss(regions.logits_cnn_c, regions.logits_mamba_c, masks.consistent);
    } else {
      const Tensor all(u_cnn.shape(), 1.0);
      parts.ic = ops::add(losses::masked_mse(prob_cnn, prob_mamba.value(), all),
                          losses::masked_mse(prob_mamba, prob_cnn.value(), all));
    }
  }
  threshold_lambda_ = threshold.lambda;

  row.loss_pce_cnn = value_of(parts.pce_cnn);
  row.loss_pce_mamba = value_of(parts.pce_mamba);
  row.loss_crf_cnn = value_of(parts.crf_cnn);
  row.loss_crf_mamba = value_of(parts.crf_mamba);
  row.loss_evi = value_of(parts.evi);
  row.loss_ic = value_of(parts.ic);
  row.loss_c = value_of(parts.c);

  try {
    const Var total = losses::total_loss(parts, config_.gamma);
    row.loss_total = total.value()[0];
    total.backward();
    sgd_step(cnn_params_, cnn_momentum_, row.lr);
    if (config_.mode != Mode::pce) sgd_step(mamba_params_, mamba_momentum_, row.lr);
    failures_ = 0;
  } catch (const losses::NonFiniteLoss&) {
    row.loss_total = std::nan("");
    row.skipped = true;
    if (++failures_ >= 10)
      throw TrainingAborted("training aborted: non-finite loss for 10 consecutive iterations (last at iteration " +
                            std::to_string(iter_) + ")");
  }
  ++iter_;
  return row;
}

RunArtifacts train(const TrainConfig& config, std::vector<Sample> train_set, std::ostream* progress,
                   int report_every) {
  Trainer trainer(config, std::move(train_set));
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  {
    std::ofstream cfg(out / "config.txt");
    cfg << to_config_text(config);
  }
  RunArtifacts art;
  art.metrics_log = out / "metrics.csv";
  std::ofstream log(art.metrics_log);
  if (!log) throw IoError("cannot write " + art.metrics_log.string());
  log << log_header() << '\n';

  auto save = [&](const std::string& suffix) {
    art.cnn_checkpoint = out / ("cnn" + suffix + ".ckpt");
    save_checkpoint(trainer.cnn_params(), art.cnn_checkpoint);
    if (config.mode != Mode::pce) {
      art.mamba_checkpoint = out / ("mamba" + suffix + ".ckpt");
      save_checkpoint(trainer.mamba_params(), art.mamba_checkpoint);
    }
  };

  while (!trainer.done()) {
    const IterationLog row = trainer.step();
    log << format_log(row) << '\n' << std::flush;
    if (row.skipped) {
      ++art.skipped_steps;
      if (progress) *progress << "iter " << row.iter << ": non-finite loss, step skipped\n";
    }
    art.log.push_back(row);
    if (progress && report_every > 0 && (row.iter % report_every == 0 || trainer.done()))
      *progress << "iter " << row.iter << " loss " << row.loss_total << " lambda " << row.lambda << " lr " << row.lr
                << '\n';
    if (config.checkpoint_interval > 0 && trainer.iteration() % config.checkpoint_interval == 0 && !trainer.done())
      save("_" + std::to_string(trainer.iteration()));
  }
  save("");
  return art;
}

RunArtifacts train(const TrainConfig& config, std::ostream* progress, int report_every) {
  if (config.dataset.empty()) throw ConfigError("train: config has no dataset path");
  return train(config, data::load_all(data::load_dataset(config.dataset)), progress, report_every);
}

// ---- inference and evaluation ----

CnnModel load_cnn(const fs::path& checkpoint) {
  CnnModel m;
  m.params = load_checkpoint(checkpoint);
  const auto shape_of = [&](const std::string& name) -> Shape {
    if (!m.params.contains(name)) throw ConfigError(checkpoint.string() + ": not a U-Net checkpoint (no " + name + ")");
    return m.params.at(name).shape();
  };
  const Shape first = shape_of("enc0.conv1.weight");
  const Shape head = shape_of("head.weight");
  int depth = 1;
  while (m.params.contains("enc" + std::to_string(depth) + ".conv1.weight")) ++depth;
  m.config.base_channels = first[0];
  m.config.in_channels = first[1];
  m.config.num_classes = head[0];
  m.config.depth = depth;

  // The architecture must reproduce the stored tensor list exactly.
  Rng rng(0);
  const ParameterSet reference = cnn::init_unet(m.config, rng);
  if (reference.size() != m.params.size())
    throw ConfigError(checkpoint.string() + ": tensor count does not match a U-Net of the inferred shape");
  for (const auto& e : reference.entries()) {
    if (!m.params.contains(e.name) || m.params.at(e.name).shape() != e.var.shape())
      throw ConfigError(checkpoint.string() + ": tensor " + e.name + " missing or mis-shaped");
  }
  m.params.reset_access_count();
  return m;
}

Tensor cnn_logits(const CnnModel& model, const std::vector<const Tensor*>& images) {
  if (images.empty()) throw ContractError("cnn_logits: no images");
  const int h = images[0]->dim(0), w = images[0]->dim(1);
  cnn::validate(model.config, h, w);
  Tensor batch({static_cast<int>(images.size()), 1, h, w});
  std::size_t off = 0;
  for (const Tensor* img : images) {
    if (img->ndim() != 2 || img->dim(0) != h || img->dim(1) != w)
      throw ContractError("cnn_logits: images must share one (H, W) shape");
    std::copy(img->values().begin(), img->values().end(), batch.data() + off);
    off += img->size();
  }
  NoGradGuard no_grad;
  return cnn::unet_forward(Var(batch), model.config, model.params, false).value();
}

LabelMap infer(const CnnModel& model, const Tensor& image) {
  const LabelBatch labels = egc::argmax_labels(cnn_logits(model, {&image}));
  LabelMap out(labels.height, labels.width);
  out.values = labels.values;
  return out;
}

Evaluation evaluate_dataset(const CnnModel& model, const std::vector<Sample>& samples, double tau) {
  if (samples.empty()) throw ContractError("evaluate_dataset: no samples");
  Evaluation ev;
  for (const auto& s : samples) {
    if (s.num_classes != model.config.num_classes)
      throw ConfigError("evaluate_dataset: sample " + s.id + " has a different class count than the model");
    const Tensor logits = cnn_logits(model, {&s.image});
    const LabelBatch labels = egc::argmax_labels(logits);
    LabelMap pred(labels.height, labels.width);
    pred.values = labels.values;
    ev.per_sample.push_back(metrics::evaluate(pred, s.dense_mask, s.num_classes));
    const Tensor u = evidence::uncertainty_map(logits, tau);
    ev.mean_uncertainty.push_back(u.sum() / static_cast<double>(u.size()));
  }
  ev.mean = metrics::average(ev.per_sample);
  return ev;
}

Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng) {
  if (sigma < 0) throw DomainError("add_gaussian_noise: sigma must be non-negative");
  if (sigma == 0) return image;
  std::normal_distribution<double> noise(0.0, sigma);
  Tensor out = image;
  for (double& v : out.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  return out;
}

namespace {

void write_uncertainty(const Tensor& u, const fs::path& path) {
  raster::Gray8 g{u.dim(2), u.dim(1), evidence::uncertainty_to_gray(u, 0)};
  raster::write_pgm(path, g);
}

std::string sigma_dir(double sigma) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sigma_%.2f", sigma);
  return buf;
}

}  // namespace

std::vector<RobustnessRow> robustness_sweep(const CnnModel& model, const std::vector<Sample>& samples,
                                            const std::vector<double>& sigmas, double tau, std::uint64_t seed,
                                            const std::optional<fs::path>& export_dir) {
  std::vector<RobustnessRow> rows;
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    Rng rng(data::stream_seed(seed, k));
    std::vector<Sample> noisy = samples;
    for (auto& s : noisy) s.image = add_gaussian_noise(s.image, sigmas[k], rng);
    RobustnessRow row{sigmas[k], evaluate_dataset(model, noisy, tau)};
    if (export_dir) {
      const fs::path dir = *export_dir / sigma_dir(sigmas[k]);
      fs::create_directories(dir);
      for (const auto& s : noisy)
        write_uncertainty(evidence::uncertainty_map(cnn_logits(model, {&s.image}), tau), dir / (s.id + ".pgm"));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void export_uncertainty(const CnnModel& model, const std::vector<Sample>& samples, double tau, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& s : samples)
    write_uncertainty(evidence::uncertainty_map(cnn_logits(model, {&s.image}), tau), dir / (s.id + ".pgm"));
}

}  // namespace eviscrib::harness
