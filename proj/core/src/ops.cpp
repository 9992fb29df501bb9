#include "lightclip/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "eigen_views.hpp"
#include "lightclip/errors.hpp"

namespace lightclip::ops {

namespace {

using detail::block_view;
using detail::vec;
using detail::view;
using Storage = std::shared_ptr<TensorStorage>;

// Forward products whose rows belong to different samples. The blocked GEMM
// kernel gives trailing rows a different accumulation order, so duplicated
// samples would drift apart in the last bits; the coefficient-based product
// sums every row the same way.
template <typename Dst, typename A, typename B>
void rowwise_stable_product(Dst&& dst, const A& a, const B& b) {
  dst.noalias() = a.lazyProduct(b);
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor output(Shape shape, Buffer values, bool track) {
  return make_tensor(std::move(shape), std::move(values), track);
}

void record(const Tensor& out, Tape::BackwardFn fn) { active_tape()->record(out, std::move(fn)); }

// Gradient buffer of an input if it participates in differentiation.
double* grad_of(const Storage& s) {
  if (!s || !s->requires_grad) return nullptr;
  return s->grad_buffer().data();
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Treats a tensor as [outer, len, inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Fn>
void for_each_slice(const AxisSplit& s, Fn&& fn) {
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) fn(o * s.len * s.inner + i, s.inner);
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd) {
  const auto& xd = x.data();
  Buffer y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xd[i]);
  bool track = tracking({&x});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ys = out.storage(), bwd](std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bwd(xs->data[i], ys->data[i]);
    });
  }
  return out;
}

}  // namespace

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  bool track = tracking({&x});
  Tensor out = output(std::move(shape), Buffer(x.data().begin(), x.data().end()), track);
  if (track) {
    record(out, [xs = x.storage()](std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer y(m * n);
  rowwise_stable_product(view(y.data(), m, n), view(a.data().data(), m, k), view(b.data().data(), k, n));
  bool track = tracking({&a, &b});
  Tensor out = output({m, n}, std::move(y), track);
  if (track) {
    record(out, [as = a.storage(), bs = b.storage(), m, k, n](std::span<const double> g) {
      auto G = view(g.data(), m, n);
      if (double* ga = grad_of(as)) {
        view(ga, m, k).noalias() += G * view(bs->data.data(), k, n).transpose();
      }
      if (double* gb = grad_of(bs)) {
        view(gb, k, n).noalias() += view(as->data.data(), m, k).transpose() * G;
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank-2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Buffer y(m * n);
  view(y.data(), n, m) = view(x.data().data(), m, n).transpose();
  bool track = tracking({&x});
  Tensor out = output({n, m}, std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), m, n](std::span<const double> g) {
      view(grad_of(xs), m, n) += view(g.data(), n, m).transpose();
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), out_dim = w.dim(1), rows = x.numel() / in;
  if (b.defined() && b.shape() != Shape{out_dim}) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  Buffer y(rows * out_dim);
  auto Y = view(y.data(), rows, out_dim);
  rowwise_stable_product(Y, view(x.data().data(), rows, in), view(w.data().data(), in, out_dim));
  if (b.defined()) Y.rowwise() += vec(b.data().data(), out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  bool track = tracking({&x, &w, &b});
  Tensor out = output(std::move(shape), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ws = w.storage(), bs = b.storage(), rows, in,
                 out_dim](std::span<const double> g) {
      auto G = view(g.data(), rows, out_dim);
      if (double* gx = grad_of(xs)) {
        view(gx, rows, in).noalias() += G * view(ws->data.data(), in, out_dim).transpose();
      }
      if (double* gw = grad_of(ws)) {
        view(gw, in, out_dim).noalias() += view(xs->data.data(), rows, in).transpose() * G;
      }
      if (double* gb = grad_of(bs)) vec(gb, out_dim) += G.colwise().sum();
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Buffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  bool track = tracking({&a, &b});
  Tensor out = output(a.shape(), std::move(y), track);
  if (track) {
    record(out, [as = a.storage(), bs = b.storage()](std::span<const double> g) {
      if (double* ga = grad_of(as)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = grad_of(bs)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Buffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  bool track = tracking({&a, &b});
  Tensor out = output(a.shape(), std::move(y), track);
  if (track) {
    record(out, [as = a.storage(), bs = b.storage()](std::span<const double> g) {
      if (double* ga = grad_of(as)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (double* gb = grad_of(bs)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Buffer y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  bool track = tracking({&a, &b});
  Tensor out = output(a.shape(), std::move(y), track);
  if (track) {
    record(out, [as = a.storage(), bs = b.storage()](std::span<const double> g) {
      if (double* ga = grad_of(as)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs->data[i];
      }
      if (double* gb = grad_of(bs)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: factor must have one element, got " +
                                           shape_str(s.shape()));
  const double f = s.data()[0];
  Buffer y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * f;
  bool track = tracking({&x, &s});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ss = s.storage()](std::span<const double> g) {
      const double f = ss->data[0];
      if (double* gx = grad_of(xs)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * f;
      if (double* gs = grad_of(ss)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs->data[i];
        gs[0] += acc;
      }
    });
  }
  return out;
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis) {
  auto s = split_axis(x.shape(), axis, "l2_normalize");
  const auto& xd = x.data();
  Buffer y(xd.size());
  Buffer norms(s.outer * s.inner);
  std::size_t slice = 0;
  for_each_slice(s, [&](std::size_t base, std::size_t stride) {
    double sq = 0.0;
    for (std::size_t k = 0; k < s.len; ++k) sq += xd[base + k * stride] * xd[base + k * stride];
    double norm = std::sqrt(sq);
    if (norm == 0.0) throw DomainError("l2_normalize: zero-norm slice in " + shape_str(x.shape()));
    for (std::size_t k = 0; k < s.len; ++k) y[base + k * stride] = xd[base + k * stride] / norm;
    norms[slice++] = norm;
  });
  bool track = tracking({&x});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ys = out.storage(), s, norms = std::move(norms)](
                    std::span<const double> g) {
      double* gx = grad_of(xs);
      const auto& yd = ys->data;
      std::size_t slice = 0;
      for_each_slice(s, [&](std::size_t base, std::size_t stride) {
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * stride] * yd[base + k * stride];
        const double inv = 1.0 / norms[slice++];
        for (std::size_t k = 0; k < s.len; ++k) {
          auto i = base + k * stride;
          gx[i] += (g[i] - yd[i] * dot) * inv;
        }
      });
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  auto s = split_axis(x.shape(), axis, "softmax");
  const auto& xd = x.data();
  Buffer y(xd.size());
  for_each_slice(s, [&](std::size_t base, std::size_t stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, xd[base + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < s.len; ++k) {
      auto i = base + k * stride;
      y[i] = std::exp(xd[i] - mx);
      total += y[i];
    }
    for (std::size_t k = 0; k < s.len; ++k) y[base + k * stride] /= total;
  });
  bool track = tracking({&x});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ys = out.storage(), s](std::span<const double> g) {
      double* gx = grad_of(xs);
      const auto& yd = ys->data;
      for_each_slice(s, [&](std::size_t base, std::size_t stride) {
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * stride] * yd[base + k * stride];
        for (std::size_t k = 0; k < s.len; ++k) {
          auto i = base + k * stride;
          gx[i] += yd[i] * (g[i] - dot);
        }
      });
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  auto s = split_axis(x.shape(), axis, "log_softmax");
  const auto& xd = x.data();
  Buffer y(xd.size());
  for_each_slice(s, [&](std::size_t base, std::size_t stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, xd[base + k * stride]);
    double total = 0.0;
    for (std::size_t k = 0; k < s.len; ++k) total += std::exp(xd[base + k * stride] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t k = 0; k < s.len; ++k) y[base + k * stride] = xd[base + k * stride] - lse;
  });
  bool track = tracking({&x});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), ys = out.storage(), s](std::span<const double> g) {
      double* gx = grad_of(xs);
      const auto& yd = ys->data;
      for_each_slice(s, [&](std::size_t base, std::size_t stride) {
        double total = 0.0;
        for (std::size_t k = 0; k < s.len; ++k) total += g[base + k * stride];
        for (std::size_t k = 0; k < s.len; ++k) {
          auto i = base + k * stride;
          gx[i] += g[i] - std::exp(yd[i]) * total;
        }
      });
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  bool track = tracking({&x});
  Tensor out = output({1}, {total}, track);
  if (track) {
    record(out, [xs = x.storage()](std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t i = 0; i < xs->data.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, std::size_t axis) {
  auto s = split_axis(x.shape(), axis, "sum");
  const auto& xd = x.data();
  Buffer y(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.len; ++k) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        y[o * s.inner + i] += xd[(o * s.len + k) * s.inner + i];
      }
    }
  }
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  bool track = tracking({&x});
  Tensor out = output(std::move(shape), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), s](std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.len; ++k) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            gx[(o * s.len + k) * s.inner + i] += g[o * s.inner + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor mean(const Tensor& x, std::size_t axis) {
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  auto s0 = split_axis(ref, axis, "concat");
  std::vector<std::size_t> lens;
  std::size_t total_len = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t i = 0; ok && i < ref.size(); ++i) ok = (i == axis) || p.shape()[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " +
                           shape_str(p.shape()) + " along axis " + std::to_string(axis));
    }
    lens.push_back(p.dim(axis));
    total_len += p.dim(axis);
  }
  const std::size_t outer = s0.outer, inner = s0.inner;
  Buffer y(outer * total_len * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pd = parts[p].data();
    const std::size_t chunk = lens[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  y.begin() + static_cast<std::ptrdiff_t>(o * total_len * inner + offset * inner));
    }
    offset += lens[p];
  }
  Shape shape = ref;
  shape[axis] = total_len;
  bool track = false;
  for (const auto& p : parts) track = track || tracking({&p});
  Tensor out = output(std::move(shape), std::move(y), track);
  if (track) {
    std::vector<Storage> stores;
    for (const auto& p : parts) stores.push_back(p.storage());
    record(out, [stores = std::move(stores), lens, outer, inner, total_len](
                    std::span<const double> g) {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < stores.size(); ++p) {
        const std::size_t chunk = lens[p] * inner;
        if (double* gp = grad_of(stores[p])) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * total_len * inner + offset * inner;
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
          }
        }
        offset += lens[p];
      }
    });
  }
  return out;
}

Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw DimensionError("take: empty index list");
  Buffer y(flat_indices.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (flat_indices[i] >= x.numel()) {
      throw DimensionError("take: index " + std::to_string(flat_indices[i]) +
                           " out of range for " + shape_str(x.shape()));
    }
    y[i] = x.data()[flat_indices[i]];
  }
  bool track = tracking({&x});
  const std::size_t count = y.size();
  Tensor out = output({count}, std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), idx = std::vector<std::size_t>(flat_indices.begin(),
                                                                  flat_indices.end())](
                    std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
    });
  }
  return out;
}

Tensor index_select(const Tensor& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw DimensionError("index_select: empty index list");
  const std::size_t n = x.dim(0), width = x.numel() / n;
  Buffer y(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw DimensionError("index_select: row " + std::to_string(rows[r]) +
                           " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                y.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  bool track = tracking({&x});
  Tensor out = output(std::move(shape), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), idx = std::vector<std::size_t>(rows.begin(), rows.end()),
                 width](std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) gx[idx[r] * width + c] += g[r * width + c];
      }
    });
  }
  return out;
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask length " + std::to_string(mask.size()) +
                         " does not match " + shape_str(x.shape()));
  }
  Buffer y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (mask[i]) y[i] = value;
  }
  bool track = tracking({&x});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), m = std::vector<std::uint8_t>(mask.begin(), mask.end())](
                    std::span<const double> g) {
      double* gx = grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!m[i]) gx[i] += g[i];
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t width = x.shape().back();
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / width;
  const auto& xd = x.data();
  Buffer y(xd.size()), xhat(xd.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += xr[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(width);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      xhat[r * width + c] = (xr[c] - mu) * rstd[r];
      y[r * width + c] = xhat[r * width + c] * gain.data()[c] + bias.data()[c];
    }
  }
  bool track = tracking({&x, &gain, &bias});
  Tensor out = output(x.shape(), std::move(y), track);
  if (track) {
    record(out, [xs = x.storage(), gs = gain.storage(), bs = bias.storage(),
                 xhat = std::move(xhat), rstd = std::move(rstd), rows,
                 width](std::span<const double> g) {
      double* gx = grad_of(xs);
      double* ggain = grad_of(gs);
      double* gbias = grad_of(bs);
      Buffer dxhat(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * width;
        const double* hr = xhat.data() + r * width;
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
          if (ggain) ggain[c] += gr[c] * hr[c];
          if (gbias) gbias[c] += gr[c];
          dxhat[c] = gr[c] * gs->data[c];
          mean_d += dxhat[c];
          mean_dh += dxhat[c] * hr[c];
        }
        if (!gx) continue;
        mean_d /= static_cast<double>(width);
        mean_dh /= static_cast<double>(width);
        for (std::size_t c = 0; c < width; ++c) {
          gx[r * width + c] += rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
        }
      }
    });
  }
  return out;
}

Tensor attention(const Tensor& query_src, const Tensor& kv_src, const AttentionWeights& w,
                 std::span<const std::uint8_t> key_valid, std::size_t heads) {
  if (query_src.rank() != 3 || kv_src.rank() != 3 || query_src.dim(0) != kv_src.dim(0)) {
    throw DimensionError("attention: query " + shape_str(query_src.shape()) + " vs key/value " +
                         shape_str(kv_src.shape()));
  }
  const std::size_t n = query_src.dim(0), lq = query_src.dim(1), dq = query_src.dim(2);
  const std::size_t lk = kv_src.dim(1), dk = kv_src.dim(2);
  const std::size_t dm = w.wq.defined() ? w.wq.dim(1) : 0;
  auto expect = [](const Tensor& t, Shape s, const char* name) {
    if (!t.defined() || t.shape() != s) {
      throw DimensionError(std::string("attention: ") + name + " has shape " +
                           (t.defined() ? shape_str(t.shape()) : "<undefined>") + ", expected " +
                           shape_str(s));
    }
  };
  expect(w.wq, {dq, dm}, "wq");
  expect(w.bq, {dm}, "bq");
  expect(w.wk, {dk, dm}, "wk");
  expect(w.bk, {dm}, "bk");
  expect(w.wv, {dk, dm}, "wv");
  expect(w.bv, {dm}, "bv");
  expect(w.wo, {dm, dq}, "wo");
  expect(w.bo, {dq}, "bo");
  if (heads == 0 || dm % heads != 0) {
    throw DimensionError("attention: model width " + std::to_string(dm) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (!key_valid.empty() && key_valid.size() != n * lk) {
    throw DimensionError("attention: key mask length " + std::to_string(key_valid.size()) +
                         " does not match " + shape_str(kv_src.shape()));
  }
  const std::size_t dh = dm / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  // Forward intermediates are kept for the backward rule.
  struct Saved {
    Buffer q, k, v, p, o;
    std::vector<std::uint8_t> valid;
  };
  auto saved = std::make_shared<Saved>();
  saved->q.resize(n * lq * dm);
  saved->k.resize(n * lk * dm);
  saved->v.resize(n * lk * dm);
  saved->p.resize(n * heads * lq * lk);
  saved->o.resize(n * lq * dm);
  saved->valid.assign(key_valid.begin(), key_valid.end());

  auto project = [](const Tensor& x, std::size_t rows, std::size_t in, const Tensor& wt,
                    const Tensor& bt, Buffer& dst, std::size_t out) {
    auto D = view(dst.data(), rows, out);
    rowwise_stable_product(D, view(x.data().data(), rows, in), view(wt.data().data(), in, out));
    D.rowwise() += vec(bt.data().data(), out);
  };
  project(query_src, n * lq, dq, w.wq, w.bq, saved->q, dm);
  project(kv_src, n * lk, dk, w.wk, w.bk, saved->k, dm);
  project(kv_src, n * lk, dk, w.wv, w.bv, saved->v, dm);

  detail::RowMat scores(static_cast<Eigen::Index>(lq), static_cast<Eigen::Index>(lk));
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      auto Q = block_view(saved->q.data() + b * lq * dm + h * dh, lq, dh, dm);
      auto K = block_view(saved->k.data() + b * lk * dm + h * dh, lk, dh, dm);
      auto V = block_view(saved->v.data() + b * lk * dm + h * dh, lk, dh, dm);
      scores.noalias() = Q * K.transpose();
      scores *= scale_factor;
      double* p = saved->p.data() + (b * heads + h) * lq * lk;
      for (std::size_t i = 0; i < lq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any_valid = false;
        for (std::size_t j = 0; j < lk; ++j) {
          if (!key_valid.empty() && !key_valid[b * lk + j]) continue;
          any_valid = true;
          // std::max would drop NaN; keep it so a diverged model reports NaN.
          mx = std::isnan(scores(i, j)) || scores(i, j) > mx ? scores(i, j) : mx;
        }
        if (!any_valid) throw DomainError("attention: query row has no valid key");
        double total = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          double e = (key_valid.empty() || key_valid[b * lk + j]) ? std::exp(scores(i, j) - mx) : 0.0;
          p[i * lk + j] = e;
          total += e;
        }
        for (std::size_t j = 0; j < lk; ++j) p[i * lk + j] /= total;
      }
      block_view(saved->o.data() + b * lq * dm + h * dh, lq, dh, dm).noalias() =
          view(static_cast<const double*>(p), lq, lk) * V;
    }
  }
  Buffer y(n * lq * dq);
  auto Y = view(y.data(), n * lq, dq);
  rowwise_stable_product(Y, view(static_cast<const double*>(saved->o.data()), n * lq, dm),
                         view(w.wo.data().data(), dm, dq));
  Y.rowwise() += vec(w.bo.data().data(), dq);

  bool track = tracking({&query_src, &kv_src, &w.wq, &w.bq, &w.wk, &w.bk, &w.wv, &w.bv, &w.wo,
                         &w.bo});
  Tensor out = output(query_src.shape(), std::move(y), track);
  if (!track) return out;

  record(out, [saved, xq = query_src.storage(), xkv = kv_src.storage(), wq = w.wq.storage(),
               bq = w.bq.storage(), wk = w.wk.storage(), bk = w.bk.storage(), wv = w.wv.storage(),
               bv = w.bv.storage(), wo = w.wo.storage(), bo = w.bo.storage(), n, lq, lk, dq, dk,
               dm, dh, heads, scale_factor](std::span<const double> g) {
    auto G = view(g.data(), n * lq, dq);
    const auto O = view(static_cast<const double*>(saved->o.data()), n * lq, dm);
    if (double* gwo = grad_of(wo)) view(gwo, dm, dq).noalias() += O.transpose() * G;
    if (double* gbo = grad_of(bo)) vec(gbo, dq) += G.colwise().sum();

    Buffer d_o(n * lq * dm), dq_buf(n * lq * dm, 0.0), dk_buf(n * lk * dm, 0.0),
        dv_buf(n * lk * dm, 0.0);
    view(d_o.data(), n * lq, dm).noalias() = G * view(wo->data.data(), dm, dq).transpose();

    detail::RowMat dp(static_cast<Eigen::Index>(lq), static_cast<Eigen::Index>(lk));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t qoff = b * lq * dm + h * dh, koff = b * lk * dm + h * dh;
        auto Qh = block_view(static_cast<const double*>(saved->q.data()) + qoff, lq, dh, dm);
        auto Kh = block_view(static_cast<const double*>(saved->k.data()) + koff, lk, dh, dm);
        auto Vh = block_view(static_cast<const double*>(saved->v.data()) + koff, lk, dh, dm);
        auto dOh = block_view(static_cast<const double*>(d_o.data()) + qoff, lq, dh, dm);
        const double* p = saved->p.data() + (b * heads + h) * lq * lk;
        auto P = view(p, lq, lk);
        block_view(dv_buf.data() + koff, lk, dh, dm).noalias() += P.transpose() * dOh;
        dp.noalias() = dOh * Vh.transpose();
        for (std::size_t i = 0; i < lq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < lk; ++j) dot += dp(i, j) * p[i * lk + j];
          for (std::size_t j = 0; j < lk; ++j) dp(i, j) = p[i * lk + j] * (dp(i, j) - dot) * scale_factor;
        }
        block_view(dq_buf.data() + qoff, lq, dh, dm).noalias() += dp * Kh;
        block_view(dk_buf.data() + koff, lk, dh, dm).noalias() += dp.transpose() * Qh;
      }
    }

    auto back_project = [](const Storage& x, std::size_t rows, std::size_t in, const Storage& wt,
                           const Storage& bt, const Buffer& dproj, std::size_t out) {
      auto D = view(dproj.data(), rows, out);
      if (double* gw = grad_of(wt)) {
        view(gw, in, out).noalias() += view(x->data.data(), rows, in).transpose() * D;
      }
      if (double* gb = grad_of(bt)) vec(gb, out) += D.colwise().sum();
      if (double* gx = grad_of(x)) {
        view(gx, rows, in).noalias() += D * view(wt->data.data(), in, out).transpose();
      }
    };
    back_project(xq, n * lq, dq, wq, bq, dq_buf, dm);
    back_project(xkv, n * lk, dk, wk, bk, dk_buf, dm);
    back_project(xkv, n * lk, dk, wv, bv, dv_buf, dm);
  });
  return out;
}

}  // namespace lightclip::ops
