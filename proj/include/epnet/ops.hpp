#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "epnet/tensor.hpp"

// The operator set of the engine. Every op validates shapes, computes its
// forward result through the kernels, and records a backward rule on the
// current tape when one is active and an input requires gradients.

namespace epnet {

// Cross-correlation with zero padding; output H' = floor((H+2p-kh)/stride)+1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
              int64_t stride, int64_t padding);

// 1-D convolution across the channel axis at every spatial position,
// zero padded by k/2. Weight shape [1,1,1,k] with k odd.
Tensor channel_conv1d(const Tensor& x, const Tensor& weight);

// Binary ops accept equal shapes or a right operand whose axes are either
// equal to the left's or 1 (broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double s);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh form; see kernels.cpp for the exact formula
Tensor sigmoid(const Tensor& x);

Tensor channel_concat(const std::vector<Tensor>& parts);
std::pair<Tensor, Tensor> channel_split(const Tensor& x, int64_t boundary);

Tensor global_avg_pool(const Tensor& x);                              // -> [N,C,1,1]
Tensor max_pool2d(const Tensor& x, int64_t kernel, int64_t stride);   // floor arithmetic, pad 0

Tensor pixel_shuffle(const Tensor& x, int64_t r);  // [N,C*r^2,H,W] -> [N,C,H*r,W*r]

// Batched over the leading two axes; set transpose_b for a @ b^T.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis);
// Normalizes over channels per (n,h,w); gamma/beta shaped [1,C,1,1].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor window_partition(const Tensor& x, int64_t win);  // -> [N*(H/w)*(W/w), C, w, w]
Tensor window_reverse(const Tensor& windows, int64_t win, int64_t h, int64_t w);
Tensor cyclic_shift(const Tensor& x, int64_t dy, int64_t dx);
Tensor heads_split(const Tensor& x, int64_t heads);              // [B,C,h,w] -> [B,heads,h*w,C/heads]
Tensor heads_merge(const Tensor& x, int64_t h, int64_t w);       // inverse of heads_split

Tensor pad_reflect(const Tensor& x, int64_t pt, int64_t pb, int64_t pl, int64_t pr);
Tensor crop(const Tensor& x, int64_t y0, int64_t x0, int64_t h, int64_t w);
Tensor upsample_nearest(const Tensor& x, int64_t out_h, int64_t out_w);

Tensor sum(const Tensor& x);  // -> [1,1,1,1]

// Mean absolute difference; subgradient 0 at exact ties.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// In-place clamp of values; never recorded (evaluation-time use only).
void clamp_values(Tensor& x, double lo, double hi);

}  // namespace epnet
