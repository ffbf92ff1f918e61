#include "eviscrib/cnn.hpp"

#include <algorithm>
#include <string>

#include "eviscrib/errors.hpp"
#include "eviscrib/ops.hpp"

namespace eviscrib::cnn {

namespace {

int width_at(const CnnConfig& config, int level) { return config.base_channels << level; }

void add_conv(ParameterSet& p, const std::string& name, int cin, int cout, int k, Rng& rng) {
  p.add(name + ".weight", kaiming_uniform({cout, cin, k, k}, cin * k * k, rng));
  p.add(name + ".bias", Tensor({cout}));
}

void add_bn(ParameterSet& p, const std::string& name, int c) {
  p.add(name + ".weight", Tensor({c}, 1.0));
  p.add(name + ".bias", Tensor({c}));
  p.add(name + ".running_mean", Tensor({c}), false);
  p.add(name + ".running_var", Tensor({c}, 1.0), false);
}

void add_block(ParameterSet& p, const std::string& name, int cin, int cout, Rng& rng) {
  add_conv(p, name + ".conv1", cin, cout, 3, rng);
  add_bn(p, name + ".bn1", cout);
  add_conv(p, name + ".conv2", cout, cout, 3, rng);
  add_bn(p, name + ".bn2", cout);
}

Var bn(const Var& x, const ParameterSet& p, const std::string& name, bool training) {
  Var rm = p.at(name + ".running_mean");
  Var rv = p.at(name + ".running_var");
  return ops::batch_norm2d(x, p.at(name + ".weight"), p.at(name + ".bias"), rm.mutable_value(),
                           rv.mutable_value(), training);
}

Var conv(const Var& x, const ParameterSet& p, const std::string& name, int pad) {
  return ops::conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), 1, pad);
}

// conv3x3 -> BN -> LeakyReLU, twice.
Var block(Var x, const ParameterSet& p, const std::string& name, bool training, double slope) {
  x = ops::leaky_relu(bn(conv(x, p, name + ".conv1", 1), p, name + ".bn1", training), slope);
  return ops::leaky_relu(bn(conv(x, p, name + ".conv2", 1), p, name + ".bn2", training), slope);
}

}  // namespace

void validate(const CnnConfig& config, int height, int width) {
  if (config.depth < 2) throw ConfigError("cnn: depth must be >= 2");
  if (config.base_channels < 1 || config.num_classes < 2 || config.in_channels < 1)
    throw ConfigError("cnn: channel counts must be positive and num_classes >= 2");
  const int stride = 1 << (config.depth - 1);
  if (height <= 0 || width <= 0 || height % stride != 0 || width % stride != 0)
    throw ConfigError("cnn: input " + std::to_string(height) + "x" + std::to_string(width) +
                      " not divisible by " + std::to_string(stride));
}

ParameterSet init_unet(const CnnConfig& config, Rng& rng) {
  if (config.depth < 2) throw ConfigError("cnn: depth must be >= 2");
  ParameterSet p;
  add_block(p, "enc0", config.in_channels, width_at(config, 0), rng);
  for (int l = 1; l < config.depth; ++l) add_block(p, "enc" + std::to_string(l), width_at(config, l - 1), width_at(config, l), rng);
  for (int l = config.depth - 2; l >= 0; --l) {
    const std::string up = "up" + std::to_string(l);
    const int cin = width_at(config, l + 1), cout = width_at(config, l);
    p.add(up + ".weight", kaiming_uniform({cin, cout, 2, 2}, cin * 4, rng));
    p.add(up + ".bias", Tensor({cout}));
    add_block(p, "dec" + std::to_string(l), 2 * cout, cout, rng);
  }
  add_conv(p, "head", width_at(config, 0), config.num_classes, 3, rng);
  return p;
}

Var unet_forward(const Var& image, const CnnConfig& config, const ParameterSet& params, bool training,
                 const std::vector<int>& ablated_skips) {
  if (image.value().ndim() != 4 || image.value().dim(1) != config.in_channels)
    throw ContractError("unet_forward: expected (N, " + std::to_string(config.in_channels) + ", H, W), got " +
                        shape_str(image.shape()));
  validate(config, image.value().dim(2), image.value().dim(3));
  const double slope = config.leaky_slope;

  std::vector<Var> skips;
  Var x = block(image, params, "enc0", training, slope);
  for (int l = 1; l < config.depth; ++l) {
    skips.push_back(x);
    x = block(ops::max_pool2x2(x), params, "enc" + std::to_string(l), training, slope);
  }
  for (int l = config.depth - 2; l >= 0; --l) {
    const std::string up = "up" + std::to_string(l);
    Var upsampled = ops::conv_transpose2x2(x, params.at(up + ".weight"), params.at(up + ".bias"));
    Var skip = skips[static_cast<std::size_t>(l)];
    if (std::find(ablated_skips.begin(), ablated_skips.end(), l) != ablated_skips.end()) skip = ops::scale(skip, 0.0);
    x = block(ops::concat_channels(skip, upsampled), params, "dec" + std::to_string(l), training, slope);
  }
  return conv(x, params, "head", 1);
}

}  // namespace eviscrib::cnn
