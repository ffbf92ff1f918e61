#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "eviscrib/errors.hpp"
#include "eviscrib/harness.hpp"

namespace fs = std::filesystem;
using namespace eviscrib;

namespace {

std::pair<int, int> parse_size(const std::string& text) {
  int h = 0, w = 0;
  char x = 0;
  std::istringstream s(text);
  if (!(s >> h >> x >> w) || (x != 'x' && x != 'X') || !s.eof())
    throw ConfigError("size must look like HxW, got '" + text + "'");
  return {h, w};
}

std::vector<double> parse_sigmas(const std::string& text) {
  std::vector<double> out;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad sigma '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("no sigmas given");
  return out;
}

void print_report(const metrics::MetricReport& report, const std::string& out_path) {
  const std::string csv = metrics::to_csv(report);
  std::cout << csv;
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw IoError("cannot write " + out_path);
    f << csv;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scribble-supervised segmentation with evidence-guided dual branches"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, gen_size = "64x64";
  int gen_count = 100, gen_classes = 2;
  std::uint64_t gen_seed = 0;
  data::GenerationSpec gen_spec;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of samples");
  gen->add_option("--classes", gen_classes, "Classes including background");
  gen->add_option("--size", gen_size, "Image size HxW");
  gen->add_option("--seed", gen_seed, "Base seed");
  gen->add_option("--noise", gen_spec.noise, "Speckle standard deviation");
  gen->add_option("--contrast", gen_spec.contrast, "Target/background intensity separation scale");
  gen->add_option("--edge-width", gen_spec.edge_width, "Soft border width in pixels");
  gen->add_option("--blur", gen_spec.blur_sigma, "Blur sigma in pixels");

  // make-scribbles
  auto* scrib = app.add_subcommand("make-scribbles", "Regenerate scribbles of a dataset from its masks");
  std::string scrib_data;
  std::uint64_t scrib_seed = 0;
  scrib->add_option("--data", scrib_data, "Dataset directory")->required();
  scrib->add_option("--seed", scrib_seed, "Base seed");

  // train
  auto* tr = app.add_subcommand("train", "Train both branches");
  std::string config_path;
  int report_every = 100;
  tr->add_option("--config", config_path, "Config file (key = value)")->required();
  tr->add_option("--report-every", report_every, "Progress line interval");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a CNN checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "CNN checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Also write the report CSV here");

  // robustness
  auto* rb = app.add_subcommand("robustness", "Evaluate under additive Gaussian noise");
  std::string rb_ckpt, rb_data, rb_sigmas = "0.05,0.10,0.15", rb_export;
  double rb_tau = harness::TrainConfig{}.tau;
  std::uint64_t rb_seed = 0;
  rb->add_option("--checkpoint", rb_ckpt, "CNN checkpoint")->required();
  rb->add_option("--data", rb_data, "Dataset directory")->required();
  rb->add_option("--sigmas", rb_sigmas, "Comma-separated noise levels");
  rb->add_option("--tau", rb_tau, "Evidence temperature");
  rb->add_option("--seed", rb_seed, "Noise seed");
  rb->add_option("--export", rb_export, "Directory for uncertainty maps");

  // export-uncertainty
  auto* ex = app.add_subcommand("export-uncertainty", "Write CNN uncertainty maps as PGM");
  std::string ex_ckpt, ex_data, ex_out;
  double ex_tau = harness::TrainConfig{}.tau;
  ex->add_option("--checkpoint", ex_ckpt, "CNN checkpoint")->required();
  ex->add_option("--data", ex_data, "Dataset directory")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();
  ex->add_option("--tau", ex_tau, "Evidence temperature");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      data::GenerationSpec spec = gen_spec;
      std::tie(spec.height, spec.width) = parse_size(gen_size);
      spec.num_classes = gen_classes;
      const auto samples = data::generate_dataset(gen_count, spec, gen_seed);
      data::save_dataset(samples, gen_out);
      std::cout << "wrote " << samples.size() << " samples to " << gen_out << '\n';
    } else if (*scrib) {
      const auto m = data::load_dataset(scrib_data);
      for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto mask = data::read_labels(m.root / m.entries[i].mask_path);
        data::write_labels(m.root / m.entries[i].scribble_path,
                           data::make_scribble(mask, m.num_classes, data::stream_seed(scrib_seed, i)));
      }
      std::cout << "rewrote " << m.entries.size() << " scribbles in " << scrib_data << '\n';
    } else if (*tr) {
      const auto config = harness::load_config(config_path);
      const auto art = harness::train(config, &std::cout, report_every);
      std::cout << "cnn checkpoint: " << art.cnn_checkpoint.string() << '\n';
      if (!art.mamba_checkpoint.empty()) std::cout << "mamba checkpoint: " << art.mamba_checkpoint.string() << '\n';
      std::cout << "metrics log: " << art.metrics_log.string() << " (" << art.skipped_steps << " skipped steps)\n";
    } else if (*ev) {
      const auto model = harness::load_cnn(ev_ckpt);
      const auto samples = data::load_all(data::load_dataset(ev_data));
      print_report(harness::evaluate_dataset(model, samples, harness::TrainConfig{}.tau).mean, ev_out);
    } else if (*rb) {
      const auto model = harness::load_cnn(rb_ckpt);
      const auto samples = data::load_all(data::load_dataset(rb_data));
      std::optional<fs::path> dir;
      if (!rb_export.empty()) dir = rb_export;
      const auto rows = harness::robustness_sweep(model, samples, parse_sigmas(rb_sigmas), rb_tau, rb_seed, dir);
      std::cout << "sigma,dice,jaccard,hd95,asd,uncertainty\n";
      for (const auto& r : rows) {
        double u = 0;
        for (double v : r.evaluation.mean_uncertainty) u += v;
        u /= static_cast<double>(r.evaluation.mean_uncertainty.size());
        const auto& m = r.evaluation.mean.mean;
        std::printf("%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.sigma, m.dice, m.jaccard, m.hd95, m.asd, u);
      }
    } else if (*ex) {
      const auto model = harness::load_cnn(ex_ckpt);
      const auto samples = data::load_all(data::load_dataset(ex_data));
      harness::export_uncertainty(model, samples, ex_tau, ex_out);
      std::cout << "wrote " << samples.size() << " uncertainty maps to " << ex_out << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
