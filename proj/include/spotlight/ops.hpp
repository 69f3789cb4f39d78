#pragma once

// Differentiable tensor operations.
//
// Every op takes a nullable GradTape*. When the tape is non-null and any
// input requires a gradient, the op records its backward closure and the
// output is marked requires_grad. With a null tape the op is a plain
// forward computation.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spotlight/tensor.hpp"

namespace spotlight::ops {

// Matrix product. Accepts [m,k]x[k,n] -> [m,n], [k]x[k,n] -> [n] and
// [m,k]x[k] -> [m].
Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b);

// Elementwise a + b. b may also match a trailing block of a's shape, in
// which case it is broadcast over the leading axes (bias addition).
Tensor add(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b);
Tensor scale(GradTape* tape, const Tensor& x, double factor);

Tensor relu(GradTape* tape, const Tensor& x);
Tensor sigmoid(GradTape* tape, const Tensor& x);
Tensor tanh_act(GradTape* tape, const Tensor& x);
Tensor abs(GradTape* tape, const Tensor& x);

// Softmax over a 1D tensor, computed with max subtraction.
Tensor softmax(GradTape* tape, const Tensor& x);

inline constexpr double kLogClamp = 1e-12;

// -log(max(probs[label], 1e-12)). Throws IndexError for an out-of-range label.
Tensor cross_entropy(GradTape* tape, const Tensor& probs, std::size_t label);

Tensor sum(GradTape* tape, const Tensor& x);
Tensor mean(GradTape* tape, const Tensor& x);
// Sum of same-shape tensors (used to accumulate per-step losses).
Tensor add_n(GradTape* tape, std::span<const Tensor> xs);

Tensor reshape(GradTape* tape, const Tensor& x, Shape shape);
Tensor transpose(GradTape* tape, const Tensor& x);
// x[index] along axis 0, dropping that axis.
Tensor select(GradTape* tape, const Tensor& x, std::size_t index);
// Concatenation of 1D tensors.
Tensor concat(GradTape* tape, std::span<const Tensor> parts);
// Contiguous range [begin, begin+length) of a 1D tensor.
Tensor slice(GradTape* tape, const Tensor& x, std::size_t begin, std::size_t length);

// rows[j] * weights[j] for x of shape [H,F] and weights of shape [H].
Tensor scale_rows(GradTape* tape, const Tensor& x, const Tensor& weights);
// Column sums of an [H,F] matrix -> [F].
Tensor sum_rows(GradTape* tape, const Tensor& x);

// Rows of table selected by integer indices. Output has shape
// [B, C, H, W] for indices laid out as B images of H x W and a [N, C] table.
Tensor embedding_lookup(GradTape* tape, const Tensor& table,
                        std::span<const std::uint32_t> indices, std::size_t batch,
                        std::size_t height, std::size_t width);

struct Conv2dOptions {
  std::size_t dilation = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

// Output extent along one axis: floor((in + 2 pad - effective) / stride) + 1,
// where effective = (kernel - 1) * dilation + 1. Throws DimensionError when
// the effective kernel exceeds the padded input.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t dilation,
                               std::size_t stride, std::size_t pad);

// Dilated cross-correlation (no kernel flip). x is [C_in,H,W] or
// [B,C_in,H,W]; kernels are [C_out,C_in,kh,kw].
Tensor conv2d_dilated(GradTape* tape, const Tensor& x, const Tensor& kernels,
                      const Conv2dOptions& options);

enum class BatchNormMode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  BatchNormMode mode = BatchNormMode::train;
};

// Per-channel normalization of x [B,C,H,W]. In train mode batch statistics
// (population variance) are used and running_mean/running_var are updated
// in place; eval mode reads the running statistics. Throws ParameterError
// when eps <= 0.
Tensor batch_norm(GradTape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options);

}  // namespace spotlight::ops
