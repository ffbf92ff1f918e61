#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "eviscrib/cnn.hpp"
#include "eviscrib/data.hpp"
#include "eviscrib/mamba.hpp"
#include "eviscrib/metrics.hpp"

namespace eviscrib::harness {

/// full: both branches with evidence-guided consistency.
/// mse: both branches, EGC and pseudo supervision replaced by a plain MSE
///      agreement term between the branches' expected probabilities.
/// pce: CNN trained on scribble cross-entropy alone.
enum class Mode { full, mse, pce };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& text);

struct TrainConfig {
  double tau = 0.25;
  double epsilon = 0.5;
  double gamma = 0.1;
  int batch_size = 4;
  int iter_max = 2000;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::string dataset;  // directory with manifest.txt
  int checkpoint_interval = 0;  // 0: final checkpoint only
  Mode mode = Mode::full;
  std::string out_dir = "run";
  bool augment = true;
  // model widths
  int base_channels = 16;
  int depth = 4;
  int embed_dim = 16;
  int state_dim = 8;
  int vss_depth = 1;
};

/// Throws ConfigError on non-positive sizes or rates out of range.
void validate(const TrainConfig& config);

/// Flat `key = value` lines; `#` starts a comment. Unknown keys and
/// unparsable values throw ConfigError naming the line.
TrainConfig parse_config(std::istream& in);
TrainConfig load_config(const std::filesystem::path& path);
std::string to_config_text(const TrainConfig& config);

cnn::CnnConfig cnn_config(const TrainConfig& config, int num_classes);
mamba::VssConfig vss_config(const TrainConfig& config, int num_classes);

/// (1 - iter / iter_max)^0.9 * lr0.
double poly_lr(int iter, int iter_max, double lr0);

/// One random augmentation draw. Geometric parts act on image, mask and
/// scribble alike; photometric parts on the image only.
struct AugmentParams {
  bool flip_h = false;
  bool flip_v = false;
  int rot90 = 0;           // counter-clockwise quarter turns, square images only
  double angle_deg = 0.0;  // small rotation, nearest neighbour
  double brightness = 0.0; // additive
  double contrast = 1.0;   // multiplicative around 0.5
  bool equalize = false;
};

AugmentParams draw_augment(Rng& rng, int height, int width);
data::Sample augment(const data::Sample& sample, const AugmentParams& params);
data::Sample augment(const data::Sample& sample, Rng& rng);

struct IterationLog {
  int iter = 0;
  double loss_total = 0, loss_pce_cnn = 0, loss_pce_mamba = 0, loss_crf_cnn = 0, loss_crf_mamba = 0;
  double loss_evi = 0, loss_ic = 0, loss_c = 0;
  double lambda = 0;
  double lr = 0;
  bool skipped = false;
};

std::string log_header();
/// One CSV row, every number printed with 17 significant digits.
std::string format_log(const IterationLog& row);

/// Thrown after 10 consecutive iterations with a non-finite loss.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Both branches and their optimizer state. Owns the threshold state.
class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<data::Sample> train_set);

  /// Runs one iteration and returns its log row.
  IterationLog step();
  int iteration() const { return iter_; }
  bool done() const { return iter_ >= config_.iter_max; }

  const TrainConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }
  const cnn::CnnConfig& cnn() const { return cnn_config_; }
  const mamba::VssConfig& vss() const { return vss_config_; }
  ParameterSet& cnn_params() { return cnn_params_; }
  ParameterSet& mamba_params() { return mamba_params_; }
  double lambda() const { return threshold_lambda_; }
  int consecutive_failures() const { return failures_; }

 private:
  std::vector<std::size_t> next_batch();
  void sgd_step(ParameterSet& params, std::vector<Tensor>& momentum, double lr);

  TrainConfig config_;
  std::vector<data::Sample> train_;
  int num_classes_ = 2;
  cnn::CnnConfig cnn_config_;
  mamba::VssConfig vss_config_;
  ParameterSet cnn_params_;
  ParameterSet mamba_params_;
  std::vector<Tensor> cnn_momentum_;
  std::vector<Tensor> mamba_momentum_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int iter_ = 0;
  int iter_max_ = 1;
  double threshold_lambda_ = 0.5;
  int failures_ = 0;
};

struct RunArtifacts {
  std::filesystem::path cnn_checkpoint;
  std::filesystem::path mamba_checkpoint;  // empty in pce mode
  std::filesystem::path metrics_log;
  std::vector<IterationLog> log;
  int skipped_steps = 0;
};

/// Full training run. Writes config.txt, metrics.csv (appended and flushed
/// per iteration), periodic and final checkpoints under config.out_dir.
/// `progress` receives a short line every `report_every` iterations.
RunArtifacts train(const TrainConfig& config, std::vector<data::Sample> train_set, std::ostream* progress = nullptr,
                   int report_every = 100);
/// Loads the training set from config.dataset.
RunArtifacts train(const TrainConfig& config, std::ostream* progress = nullptr, int report_every = 100);

/// Inference model: the CNN branch only.
struct CnnModel {
  cnn::CnnConfig config;
  ParameterSet params;
};

/// Reconstructs the architecture from the checkpoint's tensor names and
/// shapes. Throws ConfigError when the file is not a U-Net checkpoint.
CnnModel load_cnn(const std::filesystem::path& checkpoint);

/// CNN logits for a batch of (H, W) images, evaluation mode, no graph.
Tensor cnn_logits(const CnnModel& model, const std::vector<const Tensor*>& images);

/// Channel argmax of the CNN output. Throws ConfigError if the image size
/// does not fit the network.
LabelMap infer(const CnnModel& model, const Tensor& image);

struct Evaluation {
  metrics::MetricReport mean;
  std::vector<metrics::MetricReport> per_sample;
  std::vector<double> mean_uncertainty;  // per sample, CNN evidence
};

Evaluation evaluate_dataset(const CnnModel& model, const std::vector<data::Sample>& samples, double tau);

/// Additive N(0, sigma) noise, clamped to [0, 1]. sigma = 0 returns the input unchanged.
Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng);

struct RobustnessRow {
  double sigma = 0;
  Evaluation evaluation;
};

/// Evaluates every sigma on noisy copies of the samples. When `export_dir`
/// is set, uncertainty maps go to export_dir/sigma_<sigma>/<id>.pgm.
std::vector<RobustnessRow> robustness_sweep(const CnnModel& model, const std::vector<data::Sample>& samples,
                                            const std::vector<double>& sigmas, double tau, std::uint64_t seed,
                                            const std::optional<std::filesystem::path>& export_dir = std::nullopt);

/// Writes one uncertainty raster per sample: dir/<id>.pgm.
void export_uncertainty(const CnnModel& model, const std::vector<data::Sample>& samples, double tau,
                        const std::filesystem::path& dir);

}  // namespace eviscrib::harness
