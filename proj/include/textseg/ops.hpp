#pragma once

#include <array>
#include <vector>

#include "textseg/tensor.hpp"

namespace textseg::ops {

using Triple = std::array<int64_t, 3>;

// Elementwise arithmetic with right-aligned broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, Real c);
Tensor mul_scalar(const Tensor& x, Real c);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Real slope);
Tensor clamp(const Tensor& x, Real lo, Real hi);

// Softmax over the last axis.
Tensor softmax_last(const Tensor& x);

// L2 normalization over the channel axis (axis 1), dividing by
// max(norm, eps) so zero vectors stay defined.
Tensor l2_normalize_channels(const Tensor& x, Real eps = Real(1e-12));

// matmul supports [.., M, K] x [K, N] (shared rhs) and [.., M, K] x [.., K, N]
// with identical batch prefixes.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> axes);
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdims);
Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdims);

// Cross-correlation over [B,Cin,D,H,W] with kernel [Cout,Cin,kd,kh,kw].
Tensor conv3d(const Tensor& input, const Tensor& kernel, Triple stride = {1, 1, 1},
              Triple padding = {0, 0, 0});

// Max pooling over [B,C,D,H,W]; ties resolve to the first voxel in scan order.
Tensor max_pool3d(const Tensor& input, Triple kernel, Triple stride);

// Trilinear resampling of the spatial axes of [B,C,D,H,W] with half-pixel
// centers (constant-preserving, identity when target equals source).
Tensor resize_trilinear(const Tensor& input, Triple target);

// Indicator x > threshold as a constant tensor (no gradient path).
Tensor greater_than(const Tensor& x, Real threshold);

}  // namespace textseg::ops
