#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "eviscrib/data.hpp"
#include "eviscrib/errors.hpp"
#include "eviscrib/raster.hpp"

namespace eviscrib::data {

namespace fs = std::filesystem;

void validate(const GenerationSpec& spec) {
  if (spec.height < 32 || spec.width < 32)
    throw ConfigError("generation spec: H and W must be at least 32");
  if (spec.num_classes < 2) throw ConfigError("generation spec: need at least two classes");
  if (spec.num_classes > 255) throw ConfigError("generation spec: at most 255 classes fit an 8-bit raster");
  if (spec.min_targets < 0 || spec.max_targets < spec.min_targets)
    throw ConfigError("generation spec: invalid target count range");
  if (spec.noise < 0 || spec.blur_sigma < 0 || spec.edge_width <= 0 || spec.contrast < 0)
    throw ConfigError("generation spec: noise, blur and contrast must be non-negative, edge width positive");
}

namespace {

// Mean intensity per target class: odd classes hypoechoic, even ones bright.
double class_intensity(int cls) {
  if (cls % 2 == 1) return 0.10 + 0.05 * ((cls - 1) / 2);
  return 0.82 - 0.05 * ((cls - 2) / 2);
}

void gaussian_blur(std::vector<double>& img, int h, int w, double sigma) {
  if (sigma <= 0) return;
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double norm = 0;
  for (int i = -r; i <= r; ++i) norm += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= norm;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
    return std::clamp(i, 0, n - 1);
  };
  std::vector<double> tmp(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * w + reflect(x + i, w)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[reflect(y + i, h) * w + x];
      img[y * w + x] = s;
    }
}

}  // namespace

Sample generate_sample(std::uint64_t seed, const GenerationSpec& spec) {
  validate(spec);
  const int h = spec.height, w = spec.width, c = spec.num_classes;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  constexpr double pi = std::numbers::pi;

  // Background: slowly varying tissue level that fades with depth.
  const double base = uni(0.40, 0.55);
  struct Wave {
    double amp, fy, fx, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) waves.push_back({uni(0.02, 0.06), uni(0.5, 2.5), uni(0.5, 2.5), uni(0, 2 * pi)});
  std::vector<double> clean(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = base;
      for (const auto& wv : waves)
        v += wv.amp * std::sin(2 * pi * (wv.fy * y / h + wv.fx * x / w) + wv.phase);
      clean[y * w + x] = v * (1.0 - 0.35 * y / h);
    }

  LabelMap mask(h, w, 0);
  const int targets = std::uniform_int_distribution<int>(spec.min_targets, spec.max_targets)(rng);
  const double extent = std::min(h, w);
  for (int t = 0; t < targets; ++t) {
    const int cls = 1 + t % (c - 1);
    const double level = base + spec.contrast * (class_intensity(cls) - base);
    const double cy = uni(0.25, 0.75) * h, cx = uni(0.25, 0.75) * w;
    const double ry = uni(0.10, 0.22) * extent, rx = uni(0.10, 0.22) * extent;
    const double theta = uni(0, pi);
    const double a2 = uni(-0.12, 0.12), a3 = uni(-0.12, 0.12);
    const double p2 = uni(0, 2 * pi), p3 = uni(0, 2 * pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double u = (ct * dx + st * dy) / rx, v = (-st * dx + ct * dy) / ry;
        const double r = std::hypot(u, v);
        const double phi = std::atan2(v, u);
        const double rb = 1.0 + a2 * std::sin(2 * phi + p2) + a3 * std::sin(3 * phi + p3);
        const double sd = (rb - r) * std::min(rx, ry);  // approx. signed distance, pixels
        const double s = std::clamp(0.5 + sd / spec.edge_width, 0.0, 1.0);
        const double weight = s * s * (3 - 2 * s);
        if (sd > 0) mask(y, x) = cls;
        double& px = clean[y * w + x];
        px = px * (1 - weight) + level * weight;
      }
  }

  std::normal_distribution<double> speckle(0.0, spec.noise);
  for (double& v : clean) v *= 1.0 + (spec.noise > 0 ? speckle(rng) : 0.0);
  gaussian_blur(clean, h, w, spec.blur_sigma);

  Sample out;
  out.id = "s" + std::to_string(seed);
  out.num_classes = c;
  out.image = Tensor({h, w});
  for (std::size_t i = 0; i < clean.size(); ++i)
    out.image[i] = std::round(std::clamp(clean[i], 0.0, 1.0) * 255.0) / 255.0;
  out.dense_mask = std::move(mask);
  out.scribble = make_scribble(out.dense_mask, c, seed ^ 0x5c1bb1e5ULL);
  return out;
}

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Sample> generate_dataset(int count, const GenerationSpec& spec, std::uint64_t seed) {
  if (count < 0) throw ConfigError("generate_dataset: negative count");
  std::vector<Sample> out;
  out.reserve(count);
  char id[32];
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_sample(stream_seed(seed, i), spec));
    std::snprintf(id, sizeof id, "%05d", i);
    out.back().id = id;
  }
  return out;
}

void write_labels(const fs::path& path, const LabelMap& labels) {
  raster::Gray8 g{labels.width, labels.height, std::vector<std::uint8_t>(labels.size())};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.values[i] < 0 || labels.values[i] > 255)
      throw ContractError("write_labels: label outside 0..255 for " + path.string());
    g.pixels[i] = static_cast<std::uint8_t>(labels.values[i]);
  }
  raster::write_pgm(path, g);
}

LabelMap read_labels(const fs::path& path) {
  const auto g = raster::read_pgm(path);
  LabelMap out(g.height, g.width);
  std::copy(g.pixels.begin(), g.pixels.end(), out.values.begin());
  return out;
}

namespace {

void write_image(const fs::path& path, const Tensor& image) {
  raster::Gray8 g{image.dim(1), image.dim(0), std::vector<std::uint8_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i)
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  raster::write_pgm(path, g);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void check_size(const fs::path& path, const DatasetManifest& m) {
  if (!fs::exists(path)) throw IoError("dataset: missing file " + path.string());
  const auto [w, h] = raster::read_pgm_size(path);
  if (w != m.width || h != m.height)
    throw IoError("dataset: " + path.string() + " is " + std::to_string(h) + "x" + std::to_string(w) +
                  ", manifest declares " + std::to_string(m.height) + "x" + std::to_string(m.width));
}

}  // namespace

DatasetManifest save_dataset(std::span<const Sample> samples, const fs::path& directory) {
  if (samples.empty()) throw ContractError("save_dataset: no samples");
  DatasetManifest m;
  m.root = directory;
  m.num_classes = samples[0].num_classes;
  m.height = samples[0].height();
  m.width = samples[0].width();
  for (const char* sub : {"images", "masks", "scribbles"}) fs::create_directories(directory / sub);

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.num_classes != m.num_classes || s.height() != m.height || s.width() != m.width)
      throw ContractError("save_dataset: sample " + s.id + " differs in size or class count");
    if (s.id.find(',') != std::string::npos || s.id.find('\n') != std::string::npos)
      throw ContractError("save_dataset: id may not contain ',' or newline: " + s.id);
    char stem[32];
    std::snprintf(stem, sizeof stem, "%06zu.pgm", i);
    ManifestEntry e{std::string("images/") + stem, std::string("masks/") + stem,
                    std::string("scribbles/") + stem, s.id};
    write_image(directory / e.image_path, s.image);
    write_labels(directory / e.mask_path, s.dense_mask);
    write_labels(directory / e.scribble_path, s.scribble);
    m.entries.push_back(std::move(e));
  }

  const fs::path manifest = directory / "manifest.txt";
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << m.num_classes << ',' << m.height << ',' << m.width << '\n';
  for (const auto& e : m.entries)
    out << e.image_path << ',' << e.mask_path << ',' << e.scribble_path << ',' << e.id << '\n';
  if (!out) throw IoError("write failed: " + manifest.string());
  return m;
}

DatasetManifest load_dataset(const fs::path& directory) {
  const fs::path manifest = directory / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  DatasetManifest m;
  m.root = directory;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty manifest " + manifest.string());
  const auto head = split_csv(line);
  try {
    if (head.size() != 3) throw std::invalid_argument("header");
    m.num_classes = std::stoi(head[0]);
    m.height = std::stoi(head[1]);
    m.width = std::stoi(head[2]);
  } catch (const std::exception&) {
    throw IoError("malformed header in " + manifest.string() + ": '" + line + "'");
  }
  if (m.num_classes < 2 || m.height <= 0 || m.width <= 0)
    throw IoError("invalid header values in " + manifest.string());

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 4)
      throw IoError(manifest.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    m.entries.push_back({f[0], f[1], f[2], f[3]});
  }
  for (const auto& e : m.entries) {
    check_size(directory / e.image_path, m);
    check_size(directory / e.mask_path, m);
    check_size(directory / e.scribble_path, m);
  }
  return m;
}

Sample load_sample(const DatasetManifest& m, std::size_t index) {
  if (index >= m.entries.size()) throw ContractError("load_sample: index out of range");
  const auto& e = m.entries[index];
  Sample s;
  s.id = e.id;
  s.num_classes = m.num_classes;
  const fs::path image_path = m.root / e.image_path;
  const auto g = raster::read_pgm(image_path);
  if (g.width != m.width || g.height != m.height) throw IoError("size mismatch in " + image_path.string());
  s.image = Tensor({m.height, m.width});
  for (std::size_t i = 0; i < g.pixels.size(); ++i) s.image[i] = g.pixels[i] / 255.0;

  auto labels = [&](const std::string& rel, int max_value) {
    const fs::path p = m.root / rel;
    LabelMap l = read_labels(p);
    if (l.width != m.width || l.height != m.height) throw IoError("size mismatch in " + p.string());
    for (int v : l.values)
      if (v > max_value) throw IoError("label value " + std::to_string(v) + " out of range in " + p.string());
    return l;
  };
  s.dense_mask = labels(e.mask_path, m.num_classes - 1);
  s.scribble = labels(e.scribble_path, m.num_classes);
  return s;
}

std::vector<Sample> load_all(const DatasetManifest& m) {
  std::vector<Sample> out;
  out.reserve(m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) out.push_back(load_sample(m, i));
  return out;
}

}  // namespace eviscrib::data
