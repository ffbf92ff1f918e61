#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "eviscrib/labels.hpp"

namespace eviscrib::metrics {

struct ClassScores {
  double dice = 0;
  double jaccard = 0;
  double hd95 = 0;  // pixels
  double asd = 0;   // pixels
};

/// Scores for target classes 1..C-1 (index 0 of per_class is class 1).
struct MetricReport {
  std::vector<ClassScores> per_class;
  ClassScores mean;
};

/// Region pixels that are 4-adjacent to a non-region pixel; outside the
/// image counts as non-region.
std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& region, int height, int width);

/// Exact Euclidean distance from every pixel to the nearest nonzero pixel of
/// `sites`; infinity when there is none.
std::vector<double> distance_transform(const std::vector<std::uint8_t>& sites, int height, int width);

/// Surface distances of two binary regions, both boundaries pooled:
/// distances from A's boundary to B's and from B's to A's.
std::vector<double> surface_distances(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                      int height, int width);

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

ClassScores score_binary(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                         int height, int width);

/// Throws ContractError on a size mismatch or labels outside [0, C).
MetricReport evaluate(const LabelMap& pred, const LabelMap& truth, int num_classes);

/// Per-class averages of several reports; all must cover the same classes.
MetricReport average(const std::vector<MetricReport>& reports);

/// `class,dice,jaccard,hd95,asd` header, one row per target class, then `mean`.
void write_csv(std::ostream& out, const MetricReport& report);
std::string to_csv(const MetricReport& report);

}  // namespace eviscrib::metrics
