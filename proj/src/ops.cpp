#include "dsta/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>

#include "dsta/errors.hpp"
#include "kernels.hpp"

namespace dsta::testing {
namespace {
std::atomic<bool> g_corrupt_backward{false};
}
void set_corrupt_backward(bool on) { g_corrupt_backward.store(on); }
bool corrupt_backward() { return g_corrupt_backward.load(); }
}  // namespace dsta::testing

namespace dsta::ops {
namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
}

void require_rank2(const char* op, const Tensor& x) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(x.shape()));
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto out = Tensor::zeros(a.shape());
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      auto dy = out.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto out = Tensor::zeros(a.shape());
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] * x1[i];
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad();
        auto other = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        auto other = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  auto out = Tensor::zeros(x.shape());
  auto y = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * factor;
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, factor]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * factor;
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto out = Tensor::scalar(s);
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out]() mutable {
      const double dy = out.grad()[0];
      for (double& g : x.grad()) g += dy;
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  auto out = x.reshaped(std::move(shape));
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    });
  }
  return out;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()));
  }
  auto out = Tensor::zeros({m, n});
  kernels::gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* dy = out.grad().data();
      if (a.requires_grad()) kernels::gemm_bt_acc(dy, b.data().data(), a.grad().data(), m, n, k);
      if (b.requires_grad()) kernels::gemm_at_acc(a.data().data(), dy, b.grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
  require_rank2("transpose", x);
  const auto r = x.dim(0), c = x.dim(1);
  auto out = Tensor::from({c, r}, kernels::transposed(x.data().data(), r, c));
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, r, c]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += dy[j * r + i];
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2("linear", x);
  require_rank2("linear", weight);
  const auto n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                         shape_to_string(weight.shape()));
  }
  auto out = Tensor::zeros({n, out_dim});
  auto y = out.data();
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), y.begin() + i * out_dim);
  }
  kernels::gemm_bt_acc(x.data().data(), weight.data().data(), y.data(), n, in, out_dim);
  if (tape.wants({&x, &weight, &bias})) {
    tape.record({x, weight, bias}, out, [x, weight, bias, out, n, in, out_dim]() mutable {
      const double* dy = out.grad().data();
      if (x.requires_grad()) kernels::gemm_acc(dy, weight.data().data(), x.grad().data(), n, out_dim, in);
      if (weight.requires_grad()) kernels::gemm_at_acc(dy, x.data().data(), weight.grad().data(), n, out_dim, in);
      if (bias.defined() && bias.requires_grad()) {
        auto g = bias.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) g[j] += dy[i * out_dim + j];
      }
    });
  }
  return out;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const auto len = shape[axis];

  auto out = Tensor::zeros(shape);
  auto y = out.data();
  auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, outer, inner, len]() mutable {
      auto dy = out.grad();
      auto yv = out.data();
      auto g = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += yv[base + j * inner] * dy[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const auto at = base + j * inner;
            g[at] += yv[at] * (dy[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layernorm: empty shape");
  const auto d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: input " + shape_to_string(x.shape()) + " with gamma " +
                         shape_to_string(gamma.shape()) + " and beta " + shape_to_string(beta.shape()));
  }
  const auto rows = x.numel() / d;
  auto out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  auto in = x.data();
  auto y = out.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      y[r * d + j] = h * gv[j] + bv[j];
    }
  }
  if (tape.wants({&x, &gamma, &beta})) {
    tape.record({x, gamma, beta}, out,
                [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
                  auto dy = out.grad();
                  auto gv = gamma.data();
                  if (gamma.requires_grad()) {
                    auto gg = gamma.grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * xhat[r * d + j];
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.grad();
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += dy[r * d + j];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  auto out = Tensor::zeros(x.shape());
  auto y = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * 0.5 * (1.0 + std::erf(in[i] * std::numbers::sqrt2 / 2.0));
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out]() mutable {
      const double fudge = testing::corrupt_backward() ? 1.1 : 1.0;
      auto dy = out.grad();
      auto in = x.data();
      auto g = x.grad();
      const double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = in[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        g[i] += fudge * dy[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor concat_rows(Tape& tape, const Tensor& top, const Tensor& bottom) {
  require_rank2("concat_rows", top);
  require_rank2("concat_rows", bottom);
  if (top.dim(1) != bottom.dim(1)) {
    throw DimensionError("concat_rows: widths differ for " + shape_to_string(top.shape()) + " and " +
                         shape_to_string(bottom.shape()));
  }
  std::vector<double> values(top.data().begin(), top.data().end());
  values.insert(values.end(), bottom.data().begin(), bottom.data().end());
  auto out = Tensor::from({top.dim(0) + bottom.dim(0), top.dim(1)}, std::move(values));
  if (tape.wants({&top, &bottom})) {
    tape.record({top, bottom}, out, [top, bottom, out]() mutable {
      auto dy = out.grad();
      const auto split = top.numel();
      if (top.requires_grad()) {
        auto g = top.grad();
        for (std::size_t i = 0; i < split; ++i) g[i] += dy[i];
      }
      if (bottom.requires_grad()) {
        auto g = bottom.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[split + i];
      }
    });
  }
  return out;
}

Tensor index_rows(Tape& tape, const Tensor& x, std::vector<std::size_t> rows) {
  require_rank2("index_rows", x);
  if (rows.empty()) throw DimensionError("index_rows: no rows selected");
  const auto width = x.dim(1);
  std::vector<double> values(rows.size() * width);
  auto in = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) {
      throw DimensionError("index_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(in.begin() + rows[i] * width, width, values.begin() + i * width);
  }
  auto out = Tensor::from({rows.size(), width}, std::move(values));
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, rows = std::move(rows), width]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) g[rows[i] * width + j] += dy[i * width + j];
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2("slice_cols", x);
  const auto rows = x.dim(0), width = x.dim(1);
  if (count == 0 || begin + count > width) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_to_string(x.shape()));
  }
  std::vector<double> values(rows * count);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.begin() + r * width + begin, count, values.begin() + r * count);
  auto out = Tensor::from({rows, count}, std::move(values));
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, rows, width, begin, count]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < count; ++j) g[r * width + begin + j] += dy[r * count + j];
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const auto rows = parts.front().dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p);
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row counts differ for " + shape_to_string(parts.front().shape()) + " and " +
                           shape_to_string(p.shape()));
    }
    width += p.dim(1);
  }
  std::vector<double> values(rows * width);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    auto in = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(in.begin() + r * w, w, values.begin() + r * width + offset);
    offset += w;
  }
  auto out = Tensor::from({rows, width}, std::move(values));
  const bool any = tape.recording() &&
                   std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (any) {
    tape.record(parts, out, [parts, out, rows, width]() mutable {
      auto dy = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const auto w = p.dim(1);
        if (p.requires_grad()) {
          auto g = p.grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) g[r * w + j] += dy[r * width + offset + j];
        }
        offset += w;
      }
    });
  }
  return out;
}

Tensor mean_rows(Tape& tape, const Tensor& x) {
  require_rank2("mean_rows", x);
  const auto rows = x.dim(0), width = x.dim(1);
  auto out = Tensor::zeros({1, width});
  auto y = out.data();
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) y[j] += in[r * width + j];
  const double inv = 1.0 / static_cast<double>(rows);
  for (auto& v : y) v *= inv;
  if (tape.wants({&x})) {
    tape.record({x}, out, [x, out, rows, width, inv]() mutable {
      auto dy = out.grad();
      auto g = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) g[r * width + j] += dy[j] * inv;
    });
  }
  return out;
}

}  // namespace dsta::ops
