#pragma once

#include <span>
#include <vector>

namespace eviscrib {

/// Integer label image, row-major (H, W).
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> values;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  int& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  int operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
  bool operator==(const LabelMap&) const = default;
};

/// Stacked label images, row-major (N, H, W).
struct LabelBatch {
  int count = 0;
  int height = 0;
  int width = 0;
  std::vector<int> values;

  static LabelBatch stack(std::span<const LabelMap> maps);
  std::size_t size() const { return values.size(); }
};

}  // namespace eviscrib
