#pragma once

#include "lamformer/tensor.hpp"

namespace lam {

enum class Padding { valid, same };
enum class Act { silu, gelu, sigmoid, relu, elu_plus_one };

// All ops compute forward in float32 with 64-bit accumulation for reductions
// and record their backward closure on the active tape when any input is
// tracked. Summation order is fixed, so forward passes are bit-deterministic.

Tensor matmul(const Tensor& a, const Tensor& b);          // [MxK]·[KxP] -> [MxP]
Tensor transpose2d(const Tensor& x);

// x: [C_in x H x W], w: [C_out x C_in x k x k]. Same-padding follows the
// ceil(H/stride) output convention (extra pad goes to the bottom/right).
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, Padding pad = Padding::valid);
// x: [C x H x W], w: [C x k x k], k odd, stride 1, same padding.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w);

// Per-row normalization over the last axis of [N x C], then affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

Tensor activation(const Tensor& x, Act kind);
Tensor softmax(const Tensor& x);  // last axis, max-subtracted

Tensor global_max_pool(const Tensor& x);  // [CxHxW] -> [Cx1x1], ties to first
Tensor global_avg_pool(const Tensor& x);  // [CxHxW] -> [Cx1x1]

Tensor reshape(const Tensor& x, Shape s);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes, int axis);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float c);
Tensor log_eps(const Tensor& x, float eps);

Tensor add_rowvec(const Tensor& x, const Tensor& b);  // [NxC] + [C] per row
Tensor mul_channel(const Tensor& x, const Tensor& s); // [CxHxW] * s[c]
Tensor add_channel(const Tensor& x, const Tensor& b); // [CxHxW] + b[c]
// z[i,j] = x[i,j] / (d[i] + eps), d: [Nx1]
Tensor div_by_col(const Tensor& x, const Tensor& d, float eps);

Tensor sum_all(const Tensor& x);   // -> [1]
Tensor mean_all(const Tensor& x);  // -> [1]

// Token-grid rearrangements. Tokens are row-major over a H x W grid.
// space_to_depth groups each b x b neighborhood into one token with b²·C
// channels (neighborhood scanned row-major); depth_to_space is its inverse.
Tensor space_to_depth(const Tensor& x, int h, int w, int block);
Tensor depth_to_space(const Tensor& x, int h, int w, int block);

Tensor tokens_to_grid(const Tensor& x, int h, int w);  // [NxC] -> [CxHxW]
Tensor grid_to_tokens(const Tensor& x);                // [CxHxW] -> [NxC]

// Non-differentiable helpers.
IntTensor argmax_channel(const Tensor& logits);  // [IxHxW] -> [HxW]
Tensor one_hot(const IntTensor& labels, int num_classes);  // [N] -> [NxI]

}  // namespace lam
