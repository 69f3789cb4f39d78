#include "spotlight/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spotlight/errors.hpp"

namespace spotlight::ops {
namespace {

bool tracking(GradTape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

// True when b's shape equals a trailing block of a's shape.
bool is_trailing_block(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

template <typename Forward, typename Derivative>
Tensor unary(GradTape* tape, const Tensor& x, Forward f, Derivative df) {
  const auto in = x.values();
  std::vector<double> out_values(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_values[i] = f(in[i]);
  const bool track = tracking(tape, {&x});
  Tensor out(x.shape(), std::move(out_values), track);
  if (track) {
    tape->record([x, out, df]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto xv = x.values();
      const auto yv = out.values();
      auto dx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2 ||
      (a.rank() == 1 && b.rank() == 1)) {
    throw DimensionError("matmul: unsupported ranks " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const std::size_t kb = b.dim(0);
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) out_shape = {m, n};
  else if (a.rank() == 1) out_shape = {n};
  else out_shape = {m};

  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const bool track = tracking(tape, {&a, &b});
  Tensor out(std::move(out_shape), std::move(c), track);
  if (track) {
    tape->record([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            da[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

namespace {

Tensor add_or_sub(GradTape* tape, const Tensor& a, const Tensor& b, double sign,
                  const char* name) {
  if (!is_trailing_block(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": cannot broadcast " + shape_string(b.shape()) +
                         " onto " + shape_string(a.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out_values(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out_values[i] = av[i] + sign * bv[i % nb];
  const bool track = tracking(tape, {&a, &b});
  Tensor out(a.shape(), std::move(out_values), track);
  if (track) {
    tape->record([a, b, out, sign, nb]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += sign * g[i];
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b) {
  return add_or_sub(tape, a, b, 1.0, "add");
}

Tensor sub(GradTape* tape, const Tensor& a, const Tensor& b) {
  return add_or_sub(tape, a, b, -1.0, "sub");
}

Tensor mul(GradTape* tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out_values(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out_values[i] = av[i] * bv[i];
  const bool track = tracking(tape, {&a, &b});
  Tensor out(a.shape(), std::move(out_values), track);
  if (track) {
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(GradTape* tape, const Tensor& x, double factor) {
  return unary(
      tape, x, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

Tensor relu(GradTape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(GradTape* tape, const Tensor& x) {
  return unary(
      tape, x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_act(GradTape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor abs(GradTape* tape, const Tensor& x) {
  return unary(
      tape, x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor softmax(GradTape* tape, const Tensor& x) {
  if (x.rank() != 1 || x.numel() == 0) {
    throw DimensionError("softmax expects a non-empty 1D tensor, got " + shape_string(x.shape()));
  }
  const auto xv = x.values();
  const double peak = *std::max_element(xv.begin(), xv.end());
  std::vector<double> p(xv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    p[i] = std::exp(xv[i] - peak);
    total += p[i];
  }
  for (double& v : p) v /= total;
  const bool track = tracking(tape, {&x});
  Tensor out(x.shape(), std::move(p), track);
  if (track) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto y = out.values();
      double dot = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
      auto dx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += y[i] * (g[i] - dot);
    });
  }
  return out;
}

Tensor cross_entropy(GradTape* tape, const Tensor& probs, std::size_t label) {
  if (label >= probs.numel()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(probs.numel()) + ")");
  }
  const double p = probs.values()[label];
  const double clamped = std::max(p, kLogClamp);
  const bool track = tracking(tape, {&probs});
  Tensor out = Tensor::scalar(-std::log(clamped), track);
  if (track) {
    tape->record([probs, out, label]() mutable {
      if (!out.has_grad()) return;
      const double p = probs.values()[label];
      if (p <= kLogClamp) return;
      probs.grad()[label] += -out.grad()[0] / p;
    });
  }
  return out;
}

Tensor sum(GradTape* tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  const bool track = tracking(tape, {&x});
  Tensor out = Tensor::scalar(total, track);
  if (track) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad()[0];
      for (double& d : x.grad()) d += g;
    });
  }
  return out;
}

Tensor mean(GradTape* tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor add_n(GradTape* tape, std::span<const Tensor> xs) {
  if (xs.empty()) throw ContractError("add_n of zero tensors");
  Tensor acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(tape, acc, xs[i]);
  return acc;
}

Tensor reshape(GradTape* tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const auto xv = x.values();
  const bool track = tracking(tape, {&x});
  Tensor out(std::move(shape), std::vector<double>(xv.begin(), xv.end()), track);
  if (track) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return out;
}

Tensor transpose(GradTape* tape, const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix");
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> t(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = xv[r * cols + c];
  }
  const bool track = tracking(tape, {&x});
  Tensor out(Shape{cols, rows}, std::move(t), track);
  if (track) {
    tape->record([x, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[c * rows + r];
      }
    });
  }
  return out;
}

Tensor select(GradTape* tape, const Tensor& x, std::size_t index) {
  if (x.rank() < 1) throw DimensionError("select on a scalar");
  if (index >= x.dim(0)) {
    throw IndexError("select index " + std::to_string(index) + " out of range");
  }
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const std::size_t block = shape_numel(inner);
  const auto xv = x.values();
  const std::size_t offset = index * block;
  std::vector<double> v(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                        xv.begin() + static_cast<std::ptrdiff_t>(offset + block));
  const bool track = tracking(tape, {&x});
  Tensor out(std::move(inner), std::move(v), track);
  if (track) {
    tape->record([x, out, offset]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[offset + i] += g[i];
    });
  }
  return out;
}

Tensor concat(GradTape* tape, std::span<const Tensor> parts) {
  std::vector<double> v;
  bool track = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 1) throw DimensionError("concat expects 1D tensors");
    const auto pv = p.values();
    v.insert(v.end(), pv.begin(), pv.end());
    track = track || tracking(tape, {&p});
  }
  Tensor out = Tensor::vector(std::move(v), track);
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record([inputs, out]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      std::size_t offset = 0;
      for (Tensor& p : inputs) {
        const std::size_t n = p.numel();
        if (p.requires_grad()) {
          auto dp = p.grad();
          for (std::size_t i = 0; i < n; ++i) dp[i] += g[offset + i];
        }
        offset += n;
      }
    });
  }
  return out;
}

Tensor slice(GradTape* tape, const Tensor& x, std::size_t begin, std::size_t length) {
  if (x.rank() != 1) throw DimensionError("slice expects a 1D tensor");
  if (begin + length > x.numel()) throw IndexError("slice range exceeds tensor");
  const auto xv = x.values();
  std::vector<double> v(xv.begin() + static_cast<std::ptrdiff_t>(begin),
                        xv.begin() + static_cast<std::ptrdiff_t>(begin + length));
  const bool track = tracking(tape, {&x});
  Tensor out = Tensor::vector(std::move(v), track);
  if (track) {
    tape->record([x, out, begin]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[begin + i] += g[i];
    });
  }
  return out;
}

Tensor scale_rows(GradTape* tape, const Tensor& x, const Tensor& weights) {
  if (x.rank() != 2 || weights.rank() != 1 || weights.dim(0) != x.dim(0)) {
    throw DimensionError("scale_rows: " + shape_string(x.shape()) + " with weights " +
                         shape_string(weights.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  const auto xv = x.values();
  const auto wv = weights.values();
  std::vector<double> v(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = xv[r * cols + c] * wv[r];
  }
  const bool track = tracking(tape, {&x, &weights});
  Tensor out(x.shape(), std::move(v), track);
  if (track) {
    tape->record([x, weights, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto xv = x.values();
      const auto wv = weights.values();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[r * cols + c] * wv[r];
        }
      }
      if (weights.requires_grad()) {
        auto dw = weights.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < cols; ++c) acc += g[r * cols + c] * xv[r * cols + c];
          dw[r] += acc;
        }
      }
    });
  }
  return out;
}

Tensor sum_rows(GradTape* tape, const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("sum_rows expects a matrix");
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> v(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) v[c] += xv[r * cols + c];
  }
  const bool track = tracking(tape, {&x});
  Tensor out = Tensor::vector(std::move(v), track);
  if (track) {
    tape->record([x, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += g[c];
      }
    });
  }
  return out;
}

Tensor embedding_lookup(GradTape* tape, const Tensor& table,
                        std::span<const std::uint32_t> indices, std::size_t batch,
                        std::size_t height, std::size_t width) {
  if (table.rank() != 2) throw DimensionError("embedding table must be [N, C]");
  const std::size_t rows = table.dim(0);
  const std::size_t channels = table.dim(1);
  const std::size_t plane = height * width;
  if (indices.size() != batch * plane) {
    throw DimensionError("embedding_lookup: index count does not match batch x height x width");
  }
  for (std::uint32_t idx : indices) {
    if (idx >= rows) {
      throw IndexError("embedding index " + std::to_string(idx) + " outside table of " +
                       std::to_string(rows) + " rows");
    }
  }
  const auto tv = table.values();
  std::vector<double> v(batch * channels * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double* dst = v.data() + (b * channels + c) * plane;
      const std::uint32_t* src = indices.data() + b * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = tv[src[i] * channels + c];
    }
  }
  const bool track = tracking(tape, {&table});
  Tensor out(Shape{batch, channels, height, width}, std::move(v), track);
  if (track) {
    std::vector<std::uint32_t> idx(indices.begin(), indices.end());
    tape->record([table, out, idx = std::move(idx), batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      auto dt = table.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
          const double* src = g.data() + (b * channels + c) * plane;
          const std::uint32_t* row = idx.data() + b * plane;
          for (std::size_t i = 0; i < plane; ++i) dt[row[i] * channels + c] += src[i];
        }
      }
    });
  }
  return out;
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t dilation,
                               std::size_t stride, std::size_t pad) {
  if (kernel == 0 || dilation == 0 || stride == 0) {
    throw DimensionError("kernel, dilation and stride must be positive");
  }
  const std::size_t effective = (kernel - 1) * dilation + 1;
  const std::size_t padded = input + 2 * pad;
  if (effective > padded) {
    throw DimensionError("effective kernel extent " + std::to_string(effective) +
                         " exceeds padded input extent " + std::to_string(padded));
  }
  return (padded - effective) / stride + 1;
}

namespace {

// Output positions o in [lo, hi) for which o*stride + offset lands in [0, extent).
struct ValidRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

ValidRange valid_outputs(std::ptrdiff_t offset, std::size_t stride, std::size_t extent,
                         std::size_t out_extent) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (offset < 0) lo = (-offset + s - 1) / s;
  const std::ptrdiff_t last_in = static_cast<std::ptrdiff_t>(extent) - 1 - offset;
  if (last_in < 0) return {};
  std::ptrdiff_t hi = last_in / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent));
  if (hi <= lo) return {};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct ConvGeometry {
  std::size_t batch, c_in, height, width, c_out, kh, kw, out_h, out_w;
};

// Visits every (b, co, ci, i, j, oh) combination with a valid input row and
// hands the callback the matching row pointers' offsets.
template <typename RowFn>
void for_each_conv_row(const ConvGeometry& g, const Conv2dOptions& o, RowFn&& fn) {
  for (std::size_t i = 0; i < g.kh; ++i) {
    const auto row_off =
        static_cast<std::ptrdiff_t>(i * o.dilation) - static_cast<std::ptrdiff_t>(o.pad_h);
    const ValidRange rows = valid_outputs(row_off, o.stride_h, g.height, g.out_h);
    for (std::size_t j = 0; j < g.kw; ++j) {
      const auto col_off =
          static_cast<std::ptrdiff_t>(j * o.dilation) - static_cast<std::ptrdiff_t>(o.pad_w);
      const ValidRange cols = valid_outputs(col_off, o.stride_w, g.width, g.out_w);
      if (cols.lo >= cols.hi) continue;
      for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
        const std::size_t ih =
            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oh * o.stride_h) + row_off);
        fn(i, j, oh, ih, cols, col_off);
      }
    }
  }
}

}  // namespace

Tensor conv2d_dilated(GradTape* tape, const Tensor& x, const Tensor& kernels,
                      const Conv2dOptions& options) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) {
    throw DimensionError("conv2d_dilated expects [C,H,W] or [B,C,H,W], got " +
                         shape_string(x.shape()));
  }
  if (kernels.rank() != 4) throw DimensionError("kernels must be [C_out,C_in,kh,kw]");
  ConvGeometry g{};
  g.batch = batched ? x.dim(0) : 1;
  g.c_in = x.dim(batched ? 1 : 0);
  g.height = x.dim(batched ? 2 : 1);
  g.width = x.dim(batched ? 3 : 2);
  g.c_out = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  if (kernels.dim(1) != g.c_in) {
    throw DimensionError("kernel input channels " + std::to_string(kernels.dim(1)) +
                         " != input channels " + std::to_string(g.c_in));
  }
  g.out_h = conv_output_extent(g.height, g.kh, options.dilation, options.stride_h, options.pad_h);
  g.out_w = conv_output_extent(g.width, g.kw, options.dilation, options.stride_w, options.pad_w);

  const std::size_t in_plane = g.height * g.width;
  const std::size_t out_plane = g.out_h * g.out_w;
  const std::size_t k_plane = g.kh * g.kw;
  const auto xv = x.values();
  const auto kv = kernels.values();
  std::vector<double> y(g.batch * g.c_out * out_plane, 0.0);
  const std::size_t sw = options.stride_w;

  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      double* out = y.data() + (b * g.c_out + co) * out_plane;
      for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        const double* in = xv.data() + (b * g.c_in + ci) * in_plane;
        const double* w = kv.data() + (co * g.c_in + ci) * k_plane;
        for_each_conv_row(g, options,
                          [&](std::size_t i, std::size_t j, std::size_t oh, std::size_t ih,
                              ValidRange cols, std::ptrdiff_t col_off) {
                            const double wij = w[i * g.kw + j];
                            if (wij == 0.0) return;
                            const double* src = in + ih * g.width;
                            double* dst = out + oh * g.out_w;
                            for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                              dst[ow] += wij * src[static_cast<std::ptrdiff_t>(ow * sw) + col_off];
                            }
                          });
      }
    }
  }

  Shape out_shape = batched ? Shape{g.batch, g.c_out, g.out_h, g.out_w}
                            : Shape{g.c_out, g.out_h, g.out_w};
  const bool track = tracking(tape, {&x, &kernels});
  Tensor out(std::move(out_shape), std::move(y), track);
  if (track) {
    tape->record([x, kernels, out, g, options]() mutable {
      if (!out.has_grad()) return;
      const auto gy = out.grad();
      const auto xv = x.values();
      const auto kv = kernels.values();
      const bool want_x = x.requires_grad();
      const bool want_k = kernels.requires_grad();
      std::span<double> dx = want_x ? x.grad() : std::span<double>{};
      std::span<double> dk = want_k ? kernels.grad() : std::span<double>{};
      const std::size_t in_plane = g.height * g.width;
      const std::size_t out_plane = g.out_h * g.out_w;
      const std::size_t k_plane = g.kh * g.kw;
      const std::size_t sw = options.stride_w;
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.c_out; ++co) {
          const double* dout = gy.data() + (b * g.c_out + co) * out_plane;
          for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            const std::size_t in_base = (b * g.c_in + ci) * in_plane;
            const std::size_t k_base = (co * g.c_in + ci) * k_plane;
            for_each_conv_row(
                g, options,
                [&](std::size_t i, std::size_t j, std::size_t oh, std::size_t ih,
                    ValidRange cols, std::ptrdiff_t col_off) {
                  const double* grow = dout + oh * g.out_w;
                  const std::size_t row_base = in_base + ih * g.width;
                  if (want_x) {
                    const double wij = kv[k_base + i * g.kw + j];
                    if (wij != 0.0) {
                      double* dst = dx.data() + row_base;
                      for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                        dst[static_cast<std::ptrdiff_t>(ow * sw) + col_off] += wij * grow[ow];
                      }
                    }
                  }
                  if (want_k) {
                    const double* src = xv.data() + row_base;
                    double acc = 0.0;
                    for (std::size_t ow = cols.lo; ow < cols.hi; ++ow) {
                      acc += grow[ow] * src[static_cast<std::ptrdiff_t>(ow * sw) + col_off];
                    }
                    dk[k_base + i * g.kw + j] += acc;
                  }
                });
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(GradTape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options) {
  if (!(options.eps > 0.0)) throw ParameterError("batch_norm eps must be positive");
  if (x.rank() != 4) throw DimensionError("batch_norm expects [B,C,H,W]");
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  if (batch == 0) throw DimensionError("batch_norm needs at least one sample");
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw DimensionError("batch_norm per-channel tensor has shape " + shape_string(t->shape()));
    }
  }
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  const double count = static_cast<double>(batch * plane);

  std::vector<double> inv_std(channels);
  std::vector<double> centers(channels);
  if (options.mode == BatchNormMode::train) {
    auto rm = running_mean.values();
    auto rv = running_var.values();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = xv.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / count;
      centers[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + options.eps);
      rm[c] = (1.0 - options.momentum) * rm[c] + options.momentum * mu;
      rv[c] = (1.0 - options.momentum) * rv[c] + options.momentum * var;
    }
  } else {
    const auto rm = running_mean.values();
    const auto rv = running_var.values();
    for (std::size_t c = 0; c < channels; ++c) {
      centers[c] = rm[c];
      inv_std[c] = 1.0 / std::sqrt(rv[c] + options.eps);
    }
  }

  std::vector<double> xhat(xv.size());
  std::vector<double> y(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[base + i] = (xv[base + i] - centers[c]) * inv_std[c];
        y[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  }

  const bool track = tracking(tape, {&x, &gamma, &beta});
  Tensor out(x.shape(), std::move(y), track);
  if (track) {
    const bool train = options.mode == BatchNormMode::train;
    tape->record([x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std),
                  batch, channels, plane, count, train]() mutable {
      if (!out.has_grad()) return;
      const auto g = out.grad();
      const auto gv = gamma.values();
      for (std::size_t c = 0; c < channels; ++c) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += g[base + i];
            sum_gx += g[base + i] * xhat[base + i];
          }
        }
        if (gamma.requires_grad()) gamma.grad()[c] += sum_gx;
        if (beta.requires_grad()) beta.grad()[c] += sum_g;
        if (!x.requires_grad()) continue;
        auto dx = x.grad();
        const double k = gv[c] * inv_std[c];
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (train) {
              dx[base + i] +=
                  k * (g[base + i] - sum_g / count - xhat[base + i] * sum_gx / count);
            } else {
              dx[base + i] += k * g[base + i];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace spotlight::ops
