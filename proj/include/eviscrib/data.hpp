#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eviscrib/labels.hpp"
#include "eviscrib/tensor.hpp"

namespace eviscrib::data {

/// One training/evaluation unit. Background is class 0, targets 1..C-1 and
/// scribble value C marks unannotated pixels.
struct Sample {
  std::string id;
  Tensor image;  // (H, W), values in [0, 1] on the 8-bit grid k / 255
  LabelMap dense_mask;
  LabelMap scribble;
  int num_classes = 2;

  int height() const { return dense_mask.height; }
  int width() const { return dense_mask.width; }
};

struct GenerationSpec {
  int height = 64;
  int width = 64;
  int num_classes = 2;
  int min_targets = 1;
  int max_targets = 2;
  double noise = 0.1;        // std of the multiplicative speckle term
  double blur_sigma = 0.8;   // pixels, applied after speckle
  double edge_width = 2.0;   // pixels of soft intensity transition at region borders
  double contrast = 1.0;     // scales target/background intensity separation
};

/// Throws ConfigError for H, W < 32, C < 2 or an invalid target range.
void validate(const GenerationSpec& spec);

/// Synthetic ultrasound-like sample: smooth blob targets with class-specific
/// mean intensity on a depth-attenuated background, multiplicative speckle,
/// blur and softened borders. Pure function of (seed, spec). The scribble
/// field is filled by make_scribble.
Sample generate_sample(std::uint64_t seed, const GenerationSpec& spec);

/// Independent per-sample seed derived from a base seed (SplitMix64 mix).
std::uint64_t stream_seed(std::uint64_t base, std::uint64_t index);

/// `count` samples with seeds stream_seed(seed, i); ids are zero-padded indices.
std::vector<Sample> generate_dataset(int count, const GenerationSpec& spec, std::uint64_t seed);

/// Scribble synthesis from a dense mask: per class, the two largest
/// 8-connected components are thinned to a one-pixel skeleton, spurs shorter
/// than 10% of the skeleton's longest geodesic path are pruned, and the
/// result is capped at 20% of the class area. Other pixels get value C.
LabelMap make_scribble(const LabelMap& dense_mask, int num_classes, std::uint64_t seed);

/// Connected components (8-connectivity) of pixels equal to `value`, largest first.
std::vector<std::vector<int>> connected_components(const LabelMap& labels, int value);

/// Zhang-Suen thinning of a binary image (nonzero = foreground).
std::vector<std::uint8_t> thin(std::vector<std::uint8_t> binary, int height, int width);

struct ManifestEntry {
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  std::string scribble_path;
  std::string id;
};

struct DatasetManifest {
  std::filesystem::path root;
  int num_classes = 2;
  int height = 0;
  int width = 0;
  std::vector<ManifestEntry> entries;
};

/// Writes images/, masks/, scribbles/ and manifest.txt under `directory`.
DatasetManifest save_dataset(std::span<const Sample> samples, const std::filesystem::path& directory);

/// Parses manifest.txt and checks that every referenced raster exists and
/// has the declared size. Pixel data is read lazily by load_sample.
DatasetManifest load_dataset(const std::filesystem::path& directory);

Sample load_sample(const DatasetManifest& manifest, std::size_t index);
std::vector<Sample> load_all(const DatasetManifest& manifest);

/// Writes a sample-shaped label map as 8-bit raster.
void write_labels(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_labels(const std::filesystem::path& path);

}  // namespace eviscrib::data
