#pragma once

#include <vector>

#include "eviscrib/autograd.hpp"

namespace eviscrib::ops {

// Elementwise. Binary ops require identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum of a list of single-element values.
Var sum_scalars(const std::vector<Var>& terms);

Var leaky_relu(const Var& x, double slope);
Var silu(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
/// Same data under a new shape with equal element count.
Var reshape(const Var& x, Shape shape);

// ---- NCHW image ops ----

/// Square-kernel convolution. weight (Co, Ci, k, k), bias (Co) or empty Var.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
/// Non-overlapping 2x2 stride-2 transposed convolution. weight (Ci, Co, 2, 2).
Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias);
Var max_pool2x2(const Var& x);
/// Per-channel batch normalization. In training mode the running statistics
/// (plain tensors, updated in place) are blended with the batch statistics.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
Var concat_channels(const Var& a, const Var& b);
/// Softmax over dim 1 of an (N, C, H, W) tensor.
Var softmax_channels(const Var& logits);
/// Multiplies every channel of (N, C, H, W) by a constant (N, H, W) mask.
Var mask_pixels(const Var& x, const Tensor& mask);

// ---- NHWC token ops (last dim is channels) ----

/// y = x W^T + b over the last dimension. weight (Cout, Cin), bias (Cout) or empty Var.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Depthwise 3x3 convolution, zero padding. x (N, H, W, C), weight (C, 3, 3), bias (C).
Var depthwise_conv3x3(const Var& x, const Var& weight, const Var& bias);
/// (N, H, W, C) -> (N, H/f, W/f, f*f*C); channel index = (dy*f + dx)*C + c.
Var space_to_channel(const Var& x, int factor);
/// Inverse of space_to_channel.
Var channel_to_space(const Var& x, int factor);
Var concat_last(const Var& a, const Var& b);
Var nchw_to_nhwc(const Var& x);
Var nhwc_to_nchw(const Var& x);
/// Reorders the token axis of (N, L, C): y[n, t] = x[n, order[t]].
Var permute_tokens(const Var& x, const std::vector<int>& order);

/// Diagonal selective scan with zero-order-hold discretization.
/// u, delta: (N, L, E); a: (E, S) with negative entries; b, c: (N, L, S); d: (E).
/// h_t = exp(delta_t a) h_{t-1} + (exp(delta_t a) - 1) / a * b_t u_t,
/// y_t = c_t . h_t + d u_t, independently per batch item and channel.
Var selective_scan(const Var& u, const Var& delta, const Var& a, const Var& b, const Var& c,
                   const Var& d);

}  // namespace eviscrib::ops
