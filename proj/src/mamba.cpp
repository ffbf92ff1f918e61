#include "eviscrib/mamba.hpp"

#include <cmath>

#include "eviscrib/errors.hpp"
#include "eviscrib/ops.hpp"

namespace eviscrib::mamba {

namespace {

void add_linear(ParameterSet& p, const std::string& name, int cin, int cout, bool bias, Rng& rng) {
  p.add(name + ".weight", kaiming_uniform({cout, cin}, cin, rng, std::sqrt(1.0 / 3.0)));
  if (bias) p.add(name + ".bias", Tensor({cout}));
}

void add_norm(ParameterSet& p, const std::string& name, int c) {
  p.add(name + ".weight", Tensor({c}, 1.0));
  p.add(name + ".bias", Tensor({c}));
}

Var linear(const Var& x, const ParameterSet& p, const std::string& name, bool bias) {
  return ops::linear(x, p.at(name + ".weight"), bias ? p.at(name + ".bias") : Var());
}

Var norm(const Var& x, const ParameterSet& p, const std::string& name) {
  return ops::layer_norm(x, p.at(name + ".weight"), p.at(name + ".bias"));
}

int stage_dim(const VssConfig& c, int stage) { return c.embed_dim << stage; }

}  // namespace

void validate(const VssConfig& config, int height, int width) {
  if (config.embed_dim < 1 || config.state_dim < 1 || config.depth < 1 || config.expand < 1 ||
      config.patch_size < 1 || config.stages < 1 || config.num_classes < 2)
    throw ConfigError("mamba: invalid configuration");
  const int stride = config.patch_size << (config.stages - 1);
  if (height <= 0 || width <= 0 || height % stride != 0 || width % stride != 0)
    throw ConfigError("mamba: input " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by " + std::to_string(stride));
}

void add_selective_ssm_params(ParameterSet& p, const std::string& prefix, int channels, int state_dim,
                              Rng& rng) {
  const int e = channels, s = state_dim;
  p.add(prefix + ".delta_proj.weight", kaiming_uniform({e, e}, e, rng, 0.1));
  // Inverse softplus of a log-uniform step in [1e-3, 1e-1].
  Tensor bias({e});
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& b : bias.values()) {
    const double dt = std::exp(u(rng));
    b = dt + std::log(-std::expm1(-dt));
  }
  p.add(prefix + ".delta_proj.bias", std::move(bias));
  p.add(prefix + ".b_proj.weight", kaiming_uniform({s, e}, e, rng, std::sqrt(1.0 / 3.0)));
  p.add(prefix + ".c_proj.weight", kaiming_uniform({s, e}, e, rng, std::sqrt(1.0 / 3.0)));
  Tensor a_log({e, s});
  for (int i = 0; i < e; ++i)
    for (int j = 0; j < s; ++j) a_log[static_cast<std::size_t>(i) * s + j] = std::log(static_cast<double>(j + 1));
  p.add(prefix + ".a_log", std::move(a_log));
  p.add(prefix + ".d", Tensor({e}, 1.0));
}

Var selective_ssm(const Var& x, const ParameterSet& p, const std::string& prefix) {
  if (x.value().ndim() != 3) throw ContractError("selective_ssm: expected (N, L, E)");
  Var delta = ops::softplus(linear(x, p, prefix + ".delta_proj", true));
  Var b = linear(x, p, prefix + ".b_proj", false);
  Var c = linear(x, p, prefix + ".c_proj", false);
  Var a = ops::scale(ops::exp(p.at(prefix + ".a_log")), -1.0);
  return ops::selective_scan(x, delta, a, b, c, p.at(prefix + ".d"));
}

std::vector<std::vector<int>> scan_orders(int height, int width) {
  const int l = height * width;
  std::vector<std::vector<int>> orders(4, std::vector<int>(static_cast<std::size_t>(l)));
  for (int t = 0; t < l; ++t) {
    orders[0][t] = t;
    orders[1][t] = l - 1 - t;
    orders[2][t] = (t % height) * width + t / height;
  }
  for (int t = 0; t < l; ++t) orders[3][t] = orders[2][l - 1 - t];
  return orders;
}

Var ss2d(const Var& x, const ParameterSet& p, const std::string& prefix) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 4) throw ContractError("ss2d: expected (N, h, w, E)");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), e = xv.dim(3);
  Var seq = ops::reshape(x, {n, h * w, e});
  std::vector<Var> outputs;
  for (const auto& order : scan_orders(h, w)) {
    std::vector<int> inverse(order.size());
    for (std::size_t t = 0; t < order.size(); ++t) inverse[static_cast<std::size_t>(order[t])] = static_cast<int>(t);
    Var y = selective_ssm(ops::permute_tokens(seq, order), p, prefix);
    outputs.push_back(ops::permute_tokens(y, inverse));
  }
  Var total = ops::add(ops::add(outputs[0], outputs[1]), ops::add(outputs[2], outputs[3]));
  return ops::reshape(total, {n, h, w, e});
}

void add_vss_block_params(ParameterSet& p, const std::string& prefix, int dim, const VssConfig& config,
                          Rng& rng) {
  const int inner = config.expand * dim;
  add_norm(p, prefix + ".norm", dim);
  add_linear(p, prefix + ".in_proj", dim, inner, false, rng);
  add_linear(p, prefix + ".gate_proj", dim, inner, false, rng);
  p.add(prefix + ".dwconv.weight", kaiming_uniform({inner, 3, 3}, 9, rng, std::sqrt(1.0 / 3.0)));
  p.add(prefix + ".dwconv.bias", Tensor({inner}));
  add_selective_ssm_params(p, prefix + ".ssm", inner, config.state_dim, rng);
  add_norm(p, prefix + ".out_norm", inner);
  add_linear(p, prefix + ".out_proj", inner, dim, false, rng);
}

Var vss_block(const Var& x, const ParameterSet& p, const std::string& prefix) {
  Var z = norm(x, p, prefix + ".norm");
  Var a = linear(z, p, prefix + ".in_proj", false);
  a = ops::silu(ops::depthwise_conv3x3(a, p.at(prefix + ".dwconv.weight"), p.at(prefix + ".dwconv.bias")));
  a = norm(ss2d(a, p, prefix + ".ssm"), p, prefix + ".out_norm");
  Var gate = ops::silu(linear(z, p, prefix + ".gate_proj", false));
  return ops::add(x, linear(ops::mul(a, gate), p, prefix + ".out_proj", false));
}

ParameterSet init_mamba_unet(const VssConfig& config, Rng& rng) {
  ParameterSet p;
  const int c0 = config.embed_dim;
  const int patch_in = config.patch_size * config.patch_size;
  add_linear(p, "patch_embed", patch_in, c0, true, rng);
  add_norm(p, "patch_embed.norm", c0);
  for (int s = 0; s < config.stages; ++s) {
    const int dim = stage_dim(config, s);
    for (int k = 0; k < config.depth; ++k)
      add_vss_block_params(p, "enc" + std::to_string(s) + ".block" + std::to_string(k), dim, config, rng);
    if (s + 1 < config.stages) {
      add_norm(p, "merge" + std::to_string(s) + ".norm", 4 * dim);
      add_linear(p, "merge" + std::to_string(s), 4 * dim, 2 * dim, false, rng);
    }
  }
  for (int s = config.stages - 2; s >= 0; --s) {
    const int dim = stage_dim(config, s);
    const std::string e = "expand" + std::to_string(s);
    add_linear(p, e, 2 * dim, 4 * dim, false, rng);
    add_norm(p, e + ".norm", dim);
    add_linear(p, "concat" + std::to_string(s), 2 * dim, dim, true, rng);
    for (int k = 0; k < config.depth; ++k)
      add_vss_block_params(p, "dec" + std::to_string(s) + ".block" + std::to_string(k), dim, config, rng);
  }
  add_linear(p, "final_expand", c0, patch_in * c0, false, rng);
  add_norm(p, "final_expand.norm", c0);
  add_linear(p, "head", c0, config.num_classes, true, rng);
  return p;
}

Var mamba_unet_forward(const Var& image, const VssConfig& config, const ParameterSet& p,
                       std::vector<Shape>* stage_shapes) {
  const Tensor& iv = image.value();
  if (iv.ndim() != 4 || iv.dim(1) != 1)
    throw ContractError("mamba_unet_forward: expected (N, 1, H, W), got " + shape_str(iv.shape()));
  validate(config, iv.dim(2), iv.dim(3));
  if (stage_shapes) stage_shapes->clear();

  Var x = ops::space_to_channel(ops::nchw_to_nhwc(image), config.patch_size);
  x = norm(linear(x, p, "patch_embed", true), p, "patch_embed.norm");

  std::vector<Var> skips;
  for (int s = 0; s < config.stages; ++s) {
    for (int k = 0; k < config.depth; ++k)
      x = vss_block(x, p, "enc" + std::to_string(s) + ".block" + std::to_string(k));
    if (stage_shapes) stage_shapes->push_back({x.value().dim(1), x.value().dim(2), x.value().dim(3)});
    if (s + 1 < config.stages) {
      skips.push_back(x);
      const std::string m = "merge" + std::to_string(s);
      x = linear(norm(ops::space_to_channel(x, 2), p, m + ".norm"), p, m, false);
    }
  }
  for (int s = config.stages - 2; s >= 0; --s) {
    const std::string e = "expand" + std::to_string(s);
    x = norm(ops::channel_to_space(linear(x, p, e, false), 2), p, e + ".norm");
    x = linear(ops::concat_last(skips[static_cast<std::size_t>(s)], x), p, "concat" + std::to_string(s), true);
    for (int k = 0; k < config.depth; ++k)
      x = vss_block(x, p, "dec" + std::to_string(s) + ".block" + std::to_string(k));
  }
  x = ops::channel_to_space(linear(x, p, "final_expand", false), config.patch_size);
  x = linear(norm(x, p, "final_expand.norm"), p, "head", true);
  return ops::nhwc_to_nchw(x);
}

}  // namespace eviscrib::mamba
