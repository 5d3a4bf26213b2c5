#include "sona/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "sona/core/error.hpp"

namespace sona::nn {

namespace {

using MatR = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

void require_ndim(const char* op, const Tensor& t, std::size_t n) {
  if (t.ndim() != n) {
    throw ArgumentError(std::string(op) + ": expected " + std::to_string(n) + "-d tensor, got " +
                        shape_str(t.shape()));
  }
}

template <class F>
Var unary(const char* op, const Var& x, F&& f, std::function<void(Node&)> bw) {
  Tensor out = Tensor::zeros_like(x->value);
  const auto in = x->value.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return detail::make_node(op, std::move(out), {x}, std::move(bw));
}


}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a->value, b->value);
  Tensor out = a->value;
  auto o = out.data();
  const auto bv = b->value.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return detail::make_node("add", std::move(out), {a, b}, [](Node& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_buffer().data();
      const auto d = n.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a->value, b->value);
  Tensor out = a->value;
  auto o = out.data();
  const auto bv = b->value.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return detail::make_node("sub", std::move(out), {a, b}, [](Node& n) {
    const auto d = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto g = n.parents[0]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (n.parents[1]->requires_grad) {
      auto g = n.parents[1]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= d[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a->value, b->value);
  Tensor out = a->value;
  auto o = out.data();
  const auto bv = b->value.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return detail::make_node("mul", std::move(out), {a, b}, [](Node& n) {
    const auto d = n.grad.data();
    const auto av = n.parents[0]->value.data();
    const auto bv = n.parents[1]->value.data();
    if (n.parents[0]->requires_grad) {
      auto g = n.parents[0]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto g = n.parents[1]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * av[i];
    }
  });
}

Var scale(const Var& a, real k) {
  return unary("scale", a, [k](real v) { return v * k; }, [k](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const auto d = n.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * d[i];
  });
}

Var relu(const Var& x) {
  return unary("relu", x, [](real v) { return v > 0 ? v : real(0); }, [](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const auto d = n.grad.data();
    const auto in = n.parents[0]->value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += in[i] > 0 ? d[i] : real(0);
  });
}

Var silu(const Var& x) {
  using Arr = Eigen::Array<real, Eigen::Dynamic, 1>;
  Tensor out = Tensor::zeros_like(x->value);
  Eigen::Map<const Arr> in(x->value.ptr(), static_cast<Eigen::Index>(x->value.numel()));
  Eigen::Map<Arr>(out.ptr(), in.size()) = in / (real(1) + (-in).exp());
  return detail::make_node("silu", std::move(out), {x}, [](Node& n) {
    const auto size = static_cast<Eigen::Index>(n.value.numel());
    Eigen::Map<const Arr> in(n.parents[0]->value.ptr(), size);
    Eigen::Map<const Arr> d(n.grad.ptr(), size);
    Eigen::Map<Arr> g(n.parents[0]->grad_buffer().ptr(), size);
    const Arr s = real(1) / (real(1) + (-in).exp());
    g += d * s * (real(1) + in * (real(1) - s));
  });
}

Var tanh(const Var& x) {
  return unary("tanh", x, [](real v) { return std::tanh(v); }, [](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const auto d = n.grad.data();
    const auto out = n.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i] * (real(1) - out[i] * out[i]);
  });
}

Var reshape(const Var& x, Shape shape) {
  return detail::make_node("reshape", x->value.reshaped(std::move(shape)), {x}, [](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const auto d = n.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  Tensor out = x->value.slice_rows(begin, end);
  const std::size_t offset = begin * (x->value.numel() / x->value.dim(0));
  return detail::make_node("slice_rows", std::move(out), {x}, [offset](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const auto d = n.grad.data();
    for (std::size_t i = 0; i < d.size(); ++i) g[offset + i] += d[i];
  });
}

Var concat_rows(const Var& a, const Var& b) {
  const Tensor parts[] = {a->value, b->value};
  Tensor out = stack_rows(parts);
  const std::size_t split = a->value.numel();
  return detail::make_node("concat_rows", std::move(out), {a, b}, [split](Node& n) {
    const auto d = n.grad.data();
    if (n.parents[0]->requires_grad) {
      auto g = n.parents[0]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (n.parents[1]->requires_grad) {
      auto g = n.parents[1]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[split + i];
    }
  });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (real v : x->value.data()) acc += v;
  return detail::make_node("sum", Tensor::scalar(static_cast<real>(acc)), {x}, [](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const real d = n.grad[0];
    for (auto& v : g) v += d;
  });
}

Var mean(const Var& x) {
  double acc = 0.0;
  for (real v : x->value.data()) acc += v;
  const double count = static_cast<double>(x->value.numel());
  return detail::make_node("mean", Tensor::scalar(static_cast<real>(acc / count)), {x}, [count](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    const real d = static_cast<real>(n.grad[0] / count);
    for (auto& v : g) v += d;
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_ndim("linear", x->value, 2);
  require_ndim("linear", weight->value, 2);
  const std::size_t batch = x->value.dim(0), in = x->value.dim(1), out_f = weight->value.dim(0);
  if (weight->value.dim(1) != in || bias->value.numel() != out_f) {
    throw ArgumentError("linear: input " + shape_str(x->value.shape()) + " weight " +
                        shape_str(weight->value.shape()) + " bias " + shape_str(bias->value.shape()));
  }
  Tensor out(Shape{batch, out_f});
  MapR y(out.ptr(), batch, out_f);
  CMapR xm(x->value.ptr(), batch, in);
  CMapR w(weight->value.ptr(), out_f, in);
  y.noalias() = xm * w.transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>>(bias->value.ptr(), out_f);
  return detail::make_node("linear", std::move(out), {x, weight, bias}, [batch, in, out_f](Node& n) {
    CMapR dy(n.grad.ptr(), batch, out_f);
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      MapR dx(n.parents[0]->grad_buffer().ptr(), batch, in);
      dx.noalias() += dy * CMapR(wv.ptr(), out_f, in);
    }
    if (n.parents[1]->requires_grad) {
      MapR dw(n.parents[1]->grad_buffer().ptr(), out_f, in);
      dw.noalias() += dy.transpose() * CMapR(xv.ptr(), batch, in);
    }
    if (n.parents[2]->requires_grad) {
      Eigen::Map<Eigen::Matrix<real, 1, Eigen::Dynamic>> db(n.parents[2]->grad_buffer().ptr(), out_f);
      db += dy.colwise().sum();
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels, k, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * k * k; }
  std::size_t col_cols() const { return batch * out_h * out_w; }
};

// Output columns x in [lo, hi) read input column x*stride + offset inside [0, width).
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t out_len, std::size_t in_len, std::size_t stride, std::ptrdiff_t offset) {
  std::size_t lo = 0;
  while (lo < out_len && static_cast<std::ptrdiff_t>(lo * stride) + offset < 0) ++lo;
  std::size_t hi = out_len;
  while (hi > lo && static_cast<std::ptrdiff_t>((hi - 1) * stride) + offset >= static_cast<std::ptrdiff_t>(in_len)) --hi;
  return {lo, hi};
}

// col[(c*k+ki)*k+kj, b*oh*ow + y*ow + x] = input[b, c, y*s-p+ki, x*s-p+kj]
void im2col(const ConvGeometry& g, const real* in, real* col) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.col_cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ki = 0; ki < g.k; ++ki) {
    const auto yr = valid_range(g.out_h, g.height, g.stride, static_cast<std::ptrdiff_t>(ki) - pad);
    for (std::size_t kj = 0; kj < g.k; ++kj) {
      const auto off_x = static_cast<std::ptrdiff_t>(kj) - pad;
      const auto xr = valid_range(g.out_w, g.width, g.stride, off_x);
      for (std::size_t c = 0; c < g.channels; ++c) {
        real* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const real* src = in + (b * g.channels + c) * g.height * g.width;
          real* dst = row + b * plane;
          std::fill(dst, dst + yr.lo * g.out_w, real(0));
          std::fill(dst + yr.hi * g.out_w, dst + plane, real(0));
          for (std::size_t y = yr.lo; y < yr.hi; ++y) {
            const real* srow = src + (y * g.stride + ki - g.pad) * g.width;
            real* drow = dst + y * g.out_w;
            std::fill(drow, drow + xr.lo, real(0));
            std::fill(drow + xr.hi, drow + g.out_w, real(0));
            if (g.stride == 1) {
              std::copy(srow + static_cast<std::ptrdiff_t>(xr.lo) + off_x, srow + static_cast<std::ptrdiff_t>(xr.hi) + off_x,
                        drow + xr.lo);
            } else {
              for (std::size_t x = xr.lo; x < xr.hi; ++x) drow[x] = srow[static_cast<std::ptrdiff_t>(x * g.stride) + off_x];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const real* col, real* in_grad) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t cols = g.col_cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ki = 0; ki < g.k; ++ki) {
    const auto yr = valid_range(g.out_h, g.height, g.stride, static_cast<std::ptrdiff_t>(ki) - pad);
    for (std::size_t kj = 0; kj < g.k; ++kj) {
      const auto off_x = static_cast<std::ptrdiff_t>(kj) - pad;
      const auto xr = valid_range(g.out_w, g.width, g.stride, off_x);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const real* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          real* dst = in_grad + (b * g.channels + c) * g.height * g.width;
          const real* src = row + b * plane;
          for (std::size_t y = yr.lo; y < yr.hi; ++y) {
            real* drow = dst + (y * g.stride + ki - g.pad) * g.width;
            const real* srow = src + y * g.out_w;
            for (std::size_t x = xr.lo; x < xr.hi; ++x) drow[static_cast<std::ptrdiff_t>(x * g.stride) + off_x] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
  require_ndim("conv2d", x->value, 4);
  require_ndim("conv2d", weight->value, 4);
  const auto& xs = x->value.shape();
  const auto& ws = weight->value.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3] || bias->value.numel() != ws[0] || stride == 0) {
    throw ArgumentError("conv2d: input " + shape_str(xs) + " weight " + shape_str(ws));
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, padding, 0, 0};
  if (xs[2] + 2 * padding < g.k || xs[3] + 2 * padding < g.k) throw ArgumentError("conv2d: kernel larger than input");
  g.out_h = (xs[2] + 2 * padding - g.k) / stride + 1;
  g.out_w = (xs[3] + 2 * padding - g.k) / stride + 1;

  // Inference reuses one scratch buffer; training keeps the columns for the backward pass.
  thread_local RealVector scratch;
  std::shared_ptr<RealVector> col;
  real* col_data;
  if (grad_enabled()) {
    col = std::make_shared<RealVector>(g.col_rows() * g.col_cols());
    col_data = col->data();
  } else {
    scratch.resize(std::max(scratch.size(), g.col_rows() * g.col_cols()));
    col_data = scratch.data();
  }
  im2col(g, x->value.ptr(), col_data);

  const std::size_t plane = g.out_h * g.out_w;
  MatR prod(g.out_channels, g.col_cols());
  prod.noalias() = CMapR(weight->value.ptr(), g.out_channels, g.col_rows()) *
                   CMapR(col_data, g.col_rows(), g.col_cols());
  Tensor out(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const real* src = prod.data() + o * g.col_cols() + b * plane;
      real* dst = out.ptr() + (b * g.out_channels + o) * plane;
      const real bo = bias->value[o];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + bo;
    }
  }
  return detail::make_node("conv2d", std::move(out), {x, weight, bias}, [g, col, plane](Node& n) {
    MatR dy(g.out_channels, g.col_cols());
    for (std::size_t b = 0; b < g.batch; ++b) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const real* src = n.grad.ptr() + (b * g.out_channels + o) * plane;
        std::copy(src, src + plane, dy.data() + o * g.col_cols() + b * plane);
      }
    }
    const auto& wv = n.parents[1]->value;
    if (n.parents[1]->requires_grad) {
      MapR dw(n.parents[1]->grad_buffer().ptr(), g.out_channels, g.col_rows());
      dw.noalias() += dy * CMapR(col->data(), g.col_rows(), g.col_cols()).transpose();
    }
    if (n.parents[2]->requires_grad) {
      auto db = n.parents[2]->grad_buffer().data();
      for (std::size_t o = 0; o < g.out_channels; ++o) db[o] += dy.row(static_cast<Eigen::Index>(o)).sum();
    }
    if (n.parents[0]->requires_grad) {
      MatR dcol(g.col_rows(), g.col_cols());
      dcol.noalias() = CMapR(wv.ptr(), g.out_channels, g.col_rows()).transpose() * dy;
      col2im(g, dcol.data(), n.parents[0]->grad_buffer().ptr());
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, real eps) {
  require_ndim("group_norm", x->value, 4);
  const auto& s = x->value.shape();
  const std::size_t batch = s[0], channels = s[1], plane = s[2] * s[3];
  if (groups == 0 || channels % groups != 0 || gamma->value.numel() != channels || beta->value.numel() != channels) {
    throw ArgumentError("group_norm: " + std::to_string(channels) + " channels, " + std::to_string(groups) + " groups");
  }
  const std::size_t per_group = channels / groups;
  const std::size_t count = per_group * plane;

  Tensor normalized = Tensor::zeros_like(x->value);
  std::vector<real> inv_std(batch * groups);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * channels + gi * per_group) * plane;
      const real* src = x->value.ptr() + base;
      double m = 0.0;
      for (std::size_t i = 0; i < count; ++i) m += src[i];
      m /= static_cast<double>(count);
      double v = 0.0;
      for (std::size_t i = 0; i < count; ++i) v += (src[i] - m) * (src[i] - m);
      v /= static_cast<double>(count);
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[b * groups + gi] = static_cast<real>(is);
      real* dst = normalized.ptr() + base;
      for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<real>((src[i] - m) * is);
    }
  }
  Tensor out = Tensor::zeros_like(x->value);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const real* src = normalized.ptr() + (b * channels + c) * plane;
      real* dst = out.ptr() + (b * channels + c) * plane;
      const real ga = gamma->value[c], be = beta->value[c];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * ga + be;
    }
  }
  auto xhat = std::make_shared<Tensor>(std::move(normalized));
  return detail::make_node(
      "group_norm", std::move(out), {x, gamma, beta},
      [xhat, inv_std = std::move(inv_std), batch, channels, plane, groups, per_group, count](Node& n) {
        const real* dy = n.grad.ptr();
        const real* xh = xhat->ptr();
        const auto& gv = n.parents[1]->value;
        if (n.parents[1]->requires_grad || n.parents[2]->requires_grad) {
          auto dg = n.parents[1]->grad_buffer().data();
          auto dbeta = n.parents[2]->grad_buffer().data();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (b * channels + c) * plane;
              double sg = 0.0, sb = 0.0;
              for (std::size_t i = 0; i < plane; ++i) {
                sg += dy[base + i] * xh[base + i];
                sb += dy[base + i];
              }
              dg[c] += static_cast<real>(sg);
              dbeta[c] += static_cast<real>(sb);
            }
          }
        }
        if (!n.parents[0]->requires_grad) return;
        real* dx = n.parents[0]->grad_buffer().ptr();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t cc = 0; cc < per_group; ++cc) {
              const std::size_t c = gi * per_group + cc;
              const std::size_t base = (b * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const double d = dy[base + i] * gv[c];
                mean_d += d;
                mean_dx += d * xh[base + i];
              }
            }
            mean_d /= static_cast<double>(count);
            mean_dx /= static_cast<double>(count);
            const double is = inv_std[b * groups + gi];
            for (std::size_t cc = 0; cc < per_group; ++cc) {
              const std::size_t c = gi * per_group + cc;
              const std::size_t base = (b * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) {
                const double d = dy[base + i] * gv[c];
                dx[base + i] += static_cast<real>(is * (d - mean_d - xh[base + i] * mean_dx));
              }
            }
          }
        }
      });
}

Var embedding(const Var& table, std::span<const std::int32_t> ids) {
  require_ndim("embedding", table->value, 2);
  const std::size_t vocab = table->value.dim(0), width = table->value.dim(1);
  if (ids.empty()) throw ArgumentError("embedding: no ids");
  Tensor out(Shape{ids.size(), width});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (ids[b] < 0 || static_cast<std::size_t>(ids[b]) >= vocab) {
      throw ArgumentError("embedding: id " + std::to_string(ids[b]) + " outside vocabulary of " + std::to_string(vocab));
    }
    const real* src = table->value.ptr() + static_cast<std::size_t>(ids[b]) * width;
    std::copy(src, src + width, out.ptr() + b * width);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return detail::make_node("embedding", std::move(out), {table}, [idv = std::move(idv), width](Node& n) {
    real* g = n.parents[0]->grad_buffer().ptr();
    for (std::size_t b = 0; b < idv.size(); ++b) {
      real* dst = g + static_cast<std::size_t>(idv[b]) * width;
      const real* src = n.grad.ptr() + b * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  require_ndim("add_channel_bias", x->value, 4);
  const auto& s = x->value.shape();
  const std::size_t batch = s[0], channels = s[1], plane = s[2] * s[3];
  const bool per_sample = bias->value.ndim() == 2;
  if ((per_sample && (bias->value.dim(0) != batch || bias->value.dim(1) != channels)) ||
      (!per_sample && bias->value.numel() != channels)) {
    throw ArgumentError("add_channel_bias: " + shape_str(s) + " with bias " + shape_str(bias->value.shape()));
  }
  Tensor out = x->value;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const real v = bias->value[per_sample ? b * channels + c : c];
      real* dst = out.ptr() + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += v;
    }
  }
  return detail::make_node("add_channel_bias", std::move(out), {x, bias}, [batch, channels, plane, per_sample](Node& n) {
    if (n.parents[0]->requires_grad) {
      auto g = n.parents[0]->grad_buffer().data();
      const auto d = n.grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    }
    if (n.parents[1]->requires_grad) {
      auto g = n.parents[1]->grad_buffer().data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
          const real* src = n.grad.ptr() + (b * channels + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += src[i];
          g[per_sample ? b * channels + c : c] += static_cast<real>(acc);
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_ndim("upsample_nearest2x", x->value, 4);
  const auto& s = x->value.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor out(Shape{s[0], s[1], 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    const real* src = x->value.ptr() + p * h * w;
    real* dst = out.ptr() + p * 4 * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      real* row = dst + 2 * y * 2 * w;
      for (std::size_t xx = 0; xx < w; ++xx) row[2 * xx] = row[2 * xx + 1] = src[y * w + xx];
      std::copy(row, row + 2 * w, row + 2 * w);
    }
  }
  return detail::make_node("upsample_nearest2x", std::move(out), {x}, [planes, h, w](Node& n) {
    real* g = n.parents[0]->grad_buffer().ptr();
    for (std::size_t p = 0; p < planes; ++p) {
      const real* src = n.grad.ptr() + p * 4 * h * w;
      real* dst = g + p * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const real* r0 = src + 2 * y * 2 * w;
        const real* r1 = r0 + 2 * w;
        for (std::size_t xx = 0; xx < w; ++xx) {
          dst[y * w + xx] += r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_ndim("global_avg_pool", x->value, 4);
  const auto& s = x->value.shape();
  const std::size_t rows = s[0] * s[1], plane = s[2] * s[3];
  Tensor out(Shape{s[0], s[1]});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x->value[r * plane + i];
    out[r] = static_cast<real>(acc / static_cast<double>(plane));
  }
  return detail::make_node("global_avg_pool", std::move(out), {x}, [rows, plane](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const real d = n.grad[r] / static_cast<real>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[r * plane + i] += d;
    }
  });
}

namespace {

// Row-wise log-softmax in 64-bit.
std::vector<double> log_softmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* z = logits.ptr() + r * cols;
    double m = z[0];
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, static_cast<double>(z[c]));
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(z[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = z[c] - lse;
  }
  return out;
}

}  // namespace

Var log_softmax(const Var& logits) {
  require_ndim("log_softmax", logits->value, 2);
  const std::size_t rows = logits->value.dim(0), cols = logits->value.dim(1);
  const auto ls = log_softmax_rows(logits->value);
  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<real>(ls[i]);
  return detail::make_node("log_softmax", std::move(out), {logits}, [rows, cols](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dsum += n.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const double p = std::exp(static_cast<double>(n.value[r * cols + c]));
        g[r * cols + c] += static_cast<real>(n.grad[r * cols + c] - p * dsum);
      }
    }
  });
}

Var l2_normalize_rows(const Var& x, real eps) {
  require_ndim("l2_normalize_rows", x->value, 2);
  const std::size_t rows = x->value.dim(0), cols = x->value.dim(1);
  Tensor out(Shape{rows, cols});
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = eps;
    for (std::size_t c = 0; c < cols; ++c) ss += static_cast<double>(x->value[r * cols + c]) * x->value[r * cols + c];
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<real>(x->value[r * cols + c] / norms[r]);
  }
  return detail::make_node("l2_normalize_rows", std::move(out), {x},
                           [rows, cols, norms = std::move(norms)](Node& n) {
    auto g = n.parents[0]->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(n.value[r * cols + c]) * n.grad[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        g[i] += static_cast<real>((n.grad[i] - n.value[i] * dot) / norms[r]);
      }
    }
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape("mse", a->value, b->value);
  double acc = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) {
    const double d = static_cast<double>(a->value[i]) - b->value[i];
    acc += d * d;
  }
  const double count = static_cast<double>(a->value.numel());
  return detail::make_node("mse", Tensor::scalar(static_cast<real>(acc / count)), {a, b}, [count](Node& n) {
    const auto av = n.parents[0]->value.data();
    const auto bv = n.parents[1]->value.data();
    const double k = 2.0 * n.grad[0] / count;
    if (n.parents[0]->requires_grad) {
      auto g = n.parents[0]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<real>(k * (av[i] - bv[i]));
    }
    if (n.parents[1]->requires_grad) {
      auto g = n.parents[1]->grad_buffer().data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= static_cast<real>(k * (av[i] - bv[i]));
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> labels) {
  require_ndim("cross_entropy", logits->value, 2);
  const std::size_t rows = logits->value.dim(0), cols = logits->value.dim(1);
  if (labels.size() != rows) throw ArgumentError("cross_entropy: label count does not match batch");
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw ArgumentError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  auto ls = std::make_shared<std::vector<double>>(log_softmax_rows(logits->value));
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) acc -= (*ls)[r * cols + static_cast<std::size_t>(labels[r])];
  std::vector<std::int32_t> ys(labels.begin(), labels.end());
  return detail::make_node("cross_entropy", Tensor::scalar(static_cast<real>(acc / static_cast<double>(rows))), {logits},
                           [ls, ys = std::move(ys), rows, cols](Node& n) {
                             auto g = n.parents[0]->grad_buffer().data();
                             const double k = n.grad[0] / static_cast<double>(rows);
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) {
                                 const double p = std::exp((*ls)[r * cols + c]);
                                 const double t = static_cast<std::size_t>(ys[r]) == c ? 1.0 : 0.0;
                                 g[r * cols + c] += static_cast<real>(k * (p - t));
                               }
                             }
                           });
}

Var uniform_cross_entropy(const Var& logits) {
  require_ndim("uniform_cross_entropy", logits->value, 2);
  const std::size_t rows = logits->value.dim(0), cols = logits->value.dim(1);
  auto ls = std::make_shared<std::vector<double>>(log_softmax_rows(logits->value));
  double acc = 0.0;
  for (double v : *ls) acc -= v;
  acc /= static_cast<double>(cols * rows);
  return detail::make_node("uniform_cross_entropy", Tensor::scalar(static_cast<real>(acc)), {logits},
                           [ls, rows, cols](Node& n) {
                             auto g = n.parents[0]->grad_buffer().data();
                             const double k = n.grad[0] / static_cast<double>(rows);
                             const double u = 1.0 / static_cast<double>(cols);
                             for (std::size_t i = 0; i < ls->size(); ++i) {
                               g[i] += static_cast<real>(k * (std::exp((*ls)[i]) - u));
                             }
                           });
}

Var negative_mean_softmax(const Var& logits) {
  require_ndim("negative_mean_softmax", logits->value, 2);
  const std::size_t rows = logits->value.dim(0), cols = logits->value.dim(1);
  const auto ls = log_softmax_rows(logits->value);
  double acc = 0.0;
  for (double v : ls) acc -= std::exp(v);
  acc /= static_cast<double>(cols * rows);
  // d/dz_k sum_c softmax_c = 0, so the backward pass contributes nothing.
  return detail::make_node("negative_mean_softmax", Tensor::scalar(static_cast<real>(acc)), {logits}, [](Node&) {});
}

Var club_upper_bound(const Var& mu, const Var& logvar, const Var& y) {
  require_ndim("club_upper_bound", mu->value, 2);
  require_same_shape("club_upper_bound", mu->value, logvar->value);
  require_same_shape("club_upper_bound", mu->value, y->value);
  const std::size_t rows = mu->value.dim(0), dims = mu->value.dim(1);
  const double nn = static_cast<double>(rows);

  // Column sums of y and y^2 collapse the N^2 cross term to O(N d).
  std::vector<double> s1(dims, 0.0), s2(dims, 0.0);
  for (std::size_t j = 0; j < rows; ++j) {
    for (std::size_t k = 0; k < dims; ++k) {
      const double v = y->value[j * dims + k];
      s1[k] += v;
      s2[k] += v * v;
    }
  }
  double positive = 0.0, negative = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < dims; ++k) {
      const std::size_t at = i * dims + k;
      const double m = mu->value[at];
      const double inv_var = std::exp(-static_cast<double>(logvar->value[at]));
      const double d = y->value[at] - m;
      positive -= 0.5 * d * d * inv_var;
      negative -= 0.5 * (s2[k] - 2.0 * m * s1[k] + nn * m * m) * inv_var;
    }
  }
  const double estimate = positive / nn - negative / (nn * nn);

  return detail::make_node(
      "club_upper_bound", Tensor::scalar(static_cast<real>(estimate)), {mu, logvar, y},
      [s1 = std::move(s1), s2 = std::move(s2), rows, dims, nn](Node& n) {
        const double gout = n.grad[0];
        const auto& mv = n.parents[0]->value;
        const auto& lv = n.parents[1]->value;
        const auto& yv = n.parents[2]->value;
        std::vector<double> inv_var_sum(dims, 0.0), mu_over_var_sum(dims, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t k = 0; k < dims; ++k) {
            const double iv = std::exp(-static_cast<double>(lv[i * dims + k]));
            inv_var_sum[k] += iv;
            mu_over_var_sum[k] += mv[i * dims + k] * iv;
          }
        }
        real* dmu = n.parents[0]->requires_grad ? n.parents[0]->grad_buffer().ptr() : nullptr;
        real* dlv = n.parents[1]->requires_grad ? n.parents[1]->grad_buffer().ptr() : nullptr;
        real* dy = n.parents[2]->requires_grad ? n.parents[2]->grad_buffer().ptr() : nullptr;
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t k = 0; k < dims; ++k) {
            const std::size_t at = i * dims + k;
            const double m = mv[at];
            const double iv = std::exp(-static_cast<double>(lv[at]));
            const double d = yv[at] - m;
            const double ybar = s1[k] / nn;
            if (dmu) dmu[at] += static_cast<real>(gout * (yv[at] - ybar) * iv / nn);
            if (dlv) {
              const double q = s2[k] - 2.0 * m * s1[k] + nn * m * m;
              dlv[at] += static_cast<real>(gout * (0.5 * d * d * iv / nn - 0.5 * q * iv / (nn * nn)));
            }
            if (dy) {
              const double cross = (yv[at] * inv_var_sum[k] - mu_over_var_sum[k]) / (nn * nn);
              dy[at] += static_cast<real>(gout * (-d * iv / nn + cross));
            }
          }
        }
      });
}

Var gaussian_nll(const Var& mu, const Var& logvar, const Var& y) {
  require_ndim("gaussian_nll", mu->value, 2);
  require_same_shape("gaussian_nll", mu->value, logvar->value);
  require_same_shape("gaussian_nll", mu->value, y->value);
  const std::size_t rows = mu->value.dim(0);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t i = 0; i < mu->value.numel(); ++i) {
    const double d = static_cast<double>(y->value[i]) - mu->value[i];
    acc += 0.5 * d * d * std::exp(-static_cast<double>(logvar->value[i])) + 0.5 * logvar->value[i] + half_log_2pi;
  }
  return detail::make_node("gaussian_nll", Tensor::scalar(static_cast<real>(acc / static_cast<double>(rows))),
                           {mu, logvar, y}, [rows](Node& n) {
                             const double k = n.grad[0] / static_cast<double>(rows);
                             const auto& mv = n.parents[0]->value;
                             const auto& lv = n.parents[1]->value;
                             const auto& yv = n.parents[2]->value;
                             real* dmu = n.parents[0]->requires_grad ? n.parents[0]->grad_buffer().ptr() : nullptr;
                             real* dlv = n.parents[1]->requires_grad ? n.parents[1]->grad_buffer().ptr() : nullptr;
                             real* dy = n.parents[2]->requires_grad ? n.parents[2]->grad_buffer().ptr() : nullptr;
                             for (std::size_t i = 0; i < mv.numel(); ++i) {
                               const double d = static_cast<double>(yv[i]) - mv[i];
                               const double iv = std::exp(-static_cast<double>(lv[i]));
                               if (dmu) dmu[i] -= static_cast<real>(k * d * iv);
                               if (dlv) dlv[i] += static_cast<real>(k * (0.5 - 0.5 * d * d * iv));
                               if (dy) dy[i] += static_cast<real>(k * d * iv);
                             }
                           });
}

}  // namespace sona::nn
