#pragma once

#include <vector>

#include "eviscrib/params.hpp"

namespace eviscrib::cnn {

struct CnnConfig {
  int base_channels = 16;
  int depth = 4;  // resolution levels; depth-1 poolings
  int num_classes = 2;
  int in_channels = 1;
  double leaky_slope = 0.01;
};

/// Throws ConfigError for depth < 2, non-positive widths, or an input size
/// not divisible by 2^(depth-1).
void validate(const CnnConfig& config, int height, int width);

ParameterSet init_unet(const CnnConfig& config, Rng& rng);

/// U-Net: (N, in_channels, H, W) -> (N, num_classes, H, W) logits.
/// `training` selects batch statistics in normalization layers (and updates
/// the running statistics). Levels listed in `ablated_skips` get their skip
/// tensor zeroed before concatenation.
Var unet_forward(const Var& image, const CnnConfig& config, const ParameterSet& params, bool training,
                 const std::vector<int>& ablated_skips = {});

}  // namespace eviscrib::cnn
