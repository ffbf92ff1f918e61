#pragma once

#include <string>
#include <vector>

#include "eviscrib/params.hpp"

namespace eviscrib::mamba {

struct VssConfig {
  int embed_dim = 32;   // channels after patch embedding
  int state_dim = 8;    // SSM state size per channel
  int depth = 1;        // VSS blocks per stage
  int patch_size = 4;
  int expand = 2;       // inner width of a VSS block = expand * dim
  int num_classes = 2;
  int stages = 4;       // encoder stages; H, W divisible by patch_size * 2^(stages-1)
};

void validate(const VssConfig& config, int height, int width);

/// Parameters of one selective SSM acting on `channels` features:
/// prefix.{delta_proj.weight, delta_proj.bias, b_proj.weight, c_proj.weight, a_log, d}.
void add_selective_ssm_params(ParameterSet& params, const std::string& prefix, int channels,
                              int state_dim, Rng& rng);

/// (N, L, E) -> (N, L, E). Input-dependent step (softplus of a projection),
/// input matrix B and output matrix C; diagonal A = -exp(a_log).
Var selective_ssm(const Var& x, const ParameterSet& params, const std::string& prefix);

/// The four traversal orders of an h x w grid, in row-major token indices:
/// rows forward, rows backward, columns forward, columns backward.
std::vector<std::vector<int>> scan_orders(int height, int width);

/// (N, h, w, E) -> (N, h, w, E): selective_ssm along each traversal order
/// (shared parameters), scattered back to grid positions and summed.
Var ss2d(const Var& x, const ParameterSet& params, const std::string& prefix);

void add_vss_block_params(ParameterSet& params, const std::string& prefix, int dim, const VssConfig& config,
                          Rng& rng);

/// Residual block, shape preserving on (N, h, w, dim):
/// x + out_proj( LN(ss2d(silu(dwconv(in_proj(LN x))))) * silu(gate_proj(LN x)) ).
Var vss_block(const Var& x, const ParameterSet& params, const std::string& prefix);

ParameterSet init_mamba_unet(const VssConfig& config, Rng& rng);

/// (N, 1, H, W) -> (N, num_classes, H, W). When `stage_shapes` is given it
/// receives the (h, w, channels) output shape of every encoder stage.
Var mamba_unet_forward(const Var& image, const VssConfig& config, const ParameterSet& params,
                       std::vector<Shape>* stage_shapes = nullptr);

}  // namespace eviscrib::mamba
