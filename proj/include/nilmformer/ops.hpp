// SPDX-License-Identifier: Apache-2.0
#pragma once

// Differentiable primitives. Layouts are row-major; sequence tensors are
// channels-first [batch x channels x time] for convolutions and
// tokens-last [batch x tokens x features] inside the transformer.

#include <cstddef>
#include <random>
#include <span>

#include "nilmformer/autograd.hpp"

namespace nilm::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);

// Replicates a size-1 axis `count` times.
Var expand(Var a, std::size_t axis, std::size_t count);
Var reshape(Var a, Shape shape);

// [B x A x C] -> [B x C x A]
Var transpose12(Var a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);

// x[..., in] * weight[out, in]^T + bias[out]
Var linear(Var x, Var weight, Var bias);

// Batched product over rank-3 operands, optionally transposing the last two
// axes of either side.
Var bmm(Var a, Var b, bool transpose_a = false, bool transpose_b = false);

// Same-length 1D convolution: x[B x Cin x n], kernel[Cout x Cin x k] with k
// odd, stride 1, symmetric zero padding of (k-1)*dilation/2.
Var conv1d(Var x, Var kernel, Var bias, std::size_t dilation = 1);

// x * Phi(x) with the exact erf form of the normal CDF.
Var gelu(Var x);

// Normalizes over the last axis, then applies per-feature gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

struct BatchNormStats {
  Tensor& running_mean;
  Tensor& running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

// x[B x C x n]; train mode normalizes per channel over (B, n) with biased
// variance and updates running statistics (unbiased variance), eval mode uses
// the running statistics.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats stats, bool train);

// Softmax along the last axis. -inf entries receive exactly zero weight; a
// row with no finite entry is a contract violation.
Var softmax(Var x);

// Sets the diagonal of every trailing square matrix to -inf.
Var diag_mask(Var scores);

// [B x L x H*dh] -> [B*H x L x dh] and back.
Var split_heads(Var x, std::size_t heads);
Var merge_heads(Var x, std::size_t heads);

// Multi-head scaled dot-product attention over q, k, v [B x L x H*dh],
// heads taking consecutive feature slices. Equivalent to
// merge_heads(bmm(softmax(diag_mask(scale(bmm(q, k^T)))), v)) when
// mask_diagonal is set, without materializing the intermediates. `weights`,
// when given, receives the attention matrices [B*H x L x L].
Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, double scale, bool mask_diagonal = true,
                         Tensor* weights = nullptr);

// Inverted dropout: identity when !train or p == 0.
Var dropout(Var x, double p, bool train, std::mt19937_64& rng);

// x[B x ...] * stats[B, 1] + stats[B, 0], per batch row.
Var denormalize(Var x, Var stats);

// mean((pred - target)^2)
Var mse_loss(Var pred, Var target);

}  // namespace nilm::ops
