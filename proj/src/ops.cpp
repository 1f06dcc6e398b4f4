#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpcser/tensor.hpp"
#include "node.hpp"

namespace cpcser {

using detail::grad_buffer;
using detail::make_result;
using detail::Node;
using detail::node_of;

namespace {

using NodePtr = std::shared_ptr<Node>;

// Single-threaded BLAS keeps reductions in a fixed order, so repeated runs are bit-identical.
[[maybe_unused]] const bool g_blas_single_thread = [] {
  openblas_set_num_threads(1);
  return true;
}();

[[noreturn]] void shape_error(std::string_view op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) strides[i - 1] = strides[i] * s[i];
  return strides;
}

// Strides of `in` expressed in the index space of `out`, zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto base = contiguous_strides(in);
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t shift = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) strides[i + shift] = in[i] == 1 ? 0 : base[i];
  return strides;
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;

  // fn(out_index, a_index, b_index)
  template <class Fn>
  void each(Fn&& fn) const {
    const std::size_t rank = out.size();
    const std::size_t inner = out.back();
    const std::size_t outer = numel(out) / inner;
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0, io = 0;
    const std::size_t la = sa.back(), lb = sb.back();
    for (std::size_t o = 0; o < outer; ++o) {
      std::size_t pa = oa, pb = ob;
      for (std::size_t j = 0; j < inner; ++j, ++io, pa += la, pb += lb) fn(io, pa, pb);
      for (std::size_t ax = rank - 1; ax-- > 0;) {
        ++idx[ax];
        oa += sa[ax];
        ob += sb[ax];
        if (idx[ax] < out[ax]) break;
        oa -= sa[ax] * out[ax];
        ob -= sb[ax] * out[ax];
        idx[ax] = 0;
      }
    }
  }
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b, op);
  plan.sa = broadcast_strides(a, plan.out);
  plan.sb = broadcast_strides(b, plan.out);
  return plan;
}

// Binary elementwise op. f(x, y) -> z; da(x, y, z) and db(x, y, z) are the
// partial derivatives of z.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  BroadcastPlan plan = plan_broadcast(na.shape, nb.shape, op);
  std::vector<double> out(numel(plan.out));
  const double* xa = na.value.data();
  const double* xb = nb.value.data();
  plan.each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(xa[ia], xb[ib]); });
  Shape shape = plan.out;
  return make_result(op, std::move(shape), std::move(out), {a.node(), b.node()},
                     [plan = std::move(plan), da, db](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       const double* xa = pa.value.data();
                       const double* xb = pb.value.data();
                       const double* z = self.value.data();
                       const double* g = self.grad.data();
                       if (pa.requires_grad) {
                         double* ga = grad_buffer(pa).data();
                         plan.each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                           ga[ia] += g[i] * da(xa[ia], xb[ib], z[i]);
                         });
                       }
                       if (pb.requires_grad) {
                         double* gb = grad_buffer(pb).data();
                         plan.each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                           gb[ib] += g[i] * db(xa[ia], xb[ib], z[i]);
                         });
                       }
                     });
}

// Unary elementwise op; d(x, y) is dy/dx.
template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D d) {
  const auto& na = node_of(a);
  std::vector<double> out(na.value.size());
  std::transform(na.value.begin(), na.value.end(), out.begin(), f);
  return make_result(op, na.shape, std::move(out), {a.node()}, [d](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = grad_buffer(p);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * d(p.value[i], self.value[i]);
  });
}

struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) shape_error(op, "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

void require_rank2(const Shape& s, std::string_view op, std::string_view which) {
  if (s.size() != 2) shape_error(op, std::string(which) + " must be 2-D, got " + to_string(s));
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// ---- matmul / conv --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& na = node_of(a);
  const auto& nb = node_of(b);
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    shape_error("matmul", na.shape, nb.shape);
  }
  const int m = static_cast<int>(na.shape[0]);
  const int k = static_cast<int>(na.shape[1]);
  const int n = static_cast<int>(nb.shape[1]);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, na.value.data(), k, nb.value.data(), n,
              0.0, out.data(), n);
  return make_result("matmul", {na.shape[0], nb.shape[1]}, std::move(out), {a.node(), b.node()},
                     [m, k, n](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       if (pa.requires_grad) {
                         // dA = G . B^T
                         cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, self.grad.data(), n,
                                     pb.value.data(), n, 1.0, grad_buffer(pa).data(), k);
                       }
                       if (pb.requires_grad) {
                         // dB = A^T . G
                         cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, pa.value.data(), k,
                                     self.grad.data(), n, 1.0, grad_buffer(pb).data(), n);
                       }
                     });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, std::size_t filter, std::size_t stride) {
  const auto& nx = node_of(x);
  const auto& nw = node_of(weight);
  require_rank2(nx.shape, "conv1d", "input");
  require_rank2(nw.shape, "conv1d", "weight");
  if (filter == 0 || stride == 0) shape_error("conv1d", "filter and stride must be positive");
  const std::size_t len_in = nx.shape[0];
  const std::size_t c_in = nx.shape[1];
  const std::size_t c_out = nw.shape[1];
  if (nw.shape[0] != filter * c_in) {
    shape_error("conv1d", "weight " + to_string(nw.shape) + " does not match filter " + std::to_string(filter) +
                              " x input channels " + std::to_string(c_in) + " (input " + to_string(nx.shape) + ")");
  }
  if (len_in < filter) {
    shape_error("conv1d", "input " + to_string(nx.shape) + " shorter than filter " + std::to_string(filter));
  }
  const std::size_t len_out = (len_in - filter) / stride + 1;

  // The im2col matrix of a time-major signal is the input itself read with a
  // row stride of stride*c_in. BLAS needs lda >= K, so the filter taps are
  // split into groups of at most `stride` taps; each group is a plain GEMM.
  const int ld = static_cast<int>(stride * c_in);
  std::vector<double> out(len_out * c_out, 0.0);
  for (std::size_t tap0 = 0; tap0 < filter; tap0 += stride) {
    const std::size_t taps = std::min(stride, filter - tap0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(len_out), static_cast<int>(c_out),
                static_cast<int>(taps * c_in), 1.0, nx.value.data() + tap0 * c_in, ld,
                nw.value.data() + tap0 * c_in * c_out, static_cast<int>(c_out), 1.0, out.data(),
                static_cast<int>(c_out));
  }
  return make_result(
      "conv1d", {len_out, c_out}, std::move(out), {x.node(), weight.node()},
      [filter, stride, c_in, c_out, len_out, ld](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        for (std::size_t tap0 = 0; tap0 < filter; tap0 += stride) {
          const int k = static_cast<int>(std::min(stride, filter - tap0) * c_in);
          if (pw.requires_grad) {
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, static_cast<int>(c_out),
                        static_cast<int>(len_out), 1.0, px.value.data() + tap0 * c_in, ld, self.grad.data(),
                        static_cast<int>(c_out), 1.0, grad_buffer(pw).data() + tap0 * c_in * c_out,
                        static_cast<int>(c_out));
          }
          if (px.requires_grad) {
            // Rows of one tap group never overlap, so the scatter-add is a GEMM with ldc = ld.
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(len_out), k,
                        static_cast<int>(c_out), 1.0, self.grad.data(), static_cast<int>(c_out),
                        pw.value.data() + tap0 * c_in * c_out, static_cast<int>(c_out), 1.0,
                        grad_buffer(px).data() + tap0 * c_in, ld);
          }
        }
      });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      "add_scalar", a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---- softmax ---------------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto& na = node_of(a);
  const AxisView v = axis_view(na.shape, axis, "softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, na.value[base + j * v.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(na.value[base + j * v.inner] - mx);
        out[base + j * v.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) out[base + j * v.inner] /= total;
    }
  }
  return make_result("softmax", na.shape, std::move(out), {a.node()}, [v](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) dot += self.grad[base + j * v.inner] * self.value[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t k = base + j * v.inner;
          gp[k] += self.value[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto& na = node_of(a);
  const AxisView v = axis_view(na.shape, axis, "log_softmax");
  std::vector<double> out(na.value.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, na.value[base + j * v.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) total += std::exp(na.value[base + j * v.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < v.n; ++j) out[base + j * v.inner] = na.value[base + j * v.inner] - lse;
    }
  }
  return make_result("log_softmax", na.shape, std::move(out), {a.node()}, [v](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double total = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) total += self.grad[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t k = base + j * v.inner;
          gp[k] += self.grad[k] - std::exp(self.value[k]) * total;
        }
      }
    }
  });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto& na = node_of(a);
  double total = 0.0;
  for (double x : na.value) total += x;
  return make_result("sum", {1}, {total}, {a.node()}, [](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (double& g : gp) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto& na = node_of(a);
  const AxisView v = axis_view(na.shape, axis, "sum");
  Shape shape = na.shape;
  shape[axis] = 1;
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += na.value[(o * v.n + j) * v.inner + i];
  return make_result("sum_axis", std::move(shape), std::move(out), {a.node()}, [v](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < v.n; ++j)
        for (std::size_t i = 0; i < v.inner; ++i) gp[(o * v.n + j) * v.inner + i] += self.grad[o * v.inner + i];
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.size(axis)));
}

Tensor variance(const Tensor& a, std::size_t axis) {
  const auto& na = node_of(a);
  const AxisView v = axis_view(na.shape, axis, "variance");
  Shape shape = na.shape;
  shape[axis] = 1;
  const double inv_n = 1.0 / static_cast<double>(v.n);
  std::vector<double> mu(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) mu[o * v.inner + i] += na.value[(o * v.n + j) * v.inner + i];
  for (double& m : mu) m *= inv_n;
  std::vector<double> out(mu.size(), 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const double d = na.value[(o * v.n + j) * v.inner + i] - mu[o * v.inner + i];
        out[o * v.inner + i] += d * d;
      }
  for (double& x : out) x *= inv_n;
  return make_result("variance", std::move(shape), std::move(out), {a.node()},
                     [v, inv_n, mu = std::move(mu)](Node& self) {
                       Node& p = *self.parents[0];
                       auto& gp = grad_buffer(p);
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t j = 0; j < v.n; ++j)
                           for (std::size_t i = 0; i < v.inner; ++i) {
                             const std::size_t k = (o * v.n + j) * v.inner + i;
                             gp[k] += self.grad[o * v.inner + i] * 2.0 * inv_n * (p.value[k] - mu[o * v.inner + i]);
                           }
                     });
}

// ---- structural -------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", "axis " + std::to_string(axis) + " out of range for " + to_string(first));
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> widths;
  widths.reserve(parts.size());
  std::vector<NodePtr> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) shape_error("concat", first, s);
    shape[axis] += s[axis];
    widths.push_back(s[axis]);
    parents.push_back(p.node());
  }
  const AxisView v = axis_view(shape, axis, "concat");
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parents[k]->value;
    const std::size_t chunk = widths[k] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(src.begin() + o * chunk, chunk, out.begin() + o * v.n * v.inner + offset);
    offset += chunk;
  }
  return make_result("concat", std::move(shape), std::move(out), std::move(parents),
                     [v, widths = std::move(widths)](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         Node& p = *self.parents[k];
                         const std::size_t chunk = widths[k] * v.inner;
                         if (p.requires_grad) {
                           auto& gp = grad_buffer(p);
                           for (std::size_t o = 0; o < v.outer; ++o) {
                             const double* g = self.grad.data() + o * v.n * v.inner + offset;
                             double* dst = gp.data() + o * chunk;
                             for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
                           }
                         }
                         offset += chunk;
                       }
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& na = node_of(a);
  const AxisView v = axis_view(na.shape, axis, "slice");
  if (begin >= end || end > v.n) {
    shape_error("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                             std::to_string(axis) + " of " + to_string(na.shape));
  }
  Shape shape = na.shape;
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * v.inner;
  std::vector<double> out(v.outer * chunk);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(na.value.begin() + (o * v.n + begin) * v.inner, chunk, out.begin() + o * chunk);
  return make_result("slice", std::move(shape), std::move(out), {a.node()}, [v, begin, chunk](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = gp.data() + (o * v.n + begin) * v.inner;
      const double* g = self.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  const auto& na = node_of(a);
  require_rank2(na.shape, "transpose", "input");
  const std::size_t rows = na.shape[0], cols = na.shape[1];
  std::vector<double> out(na.value.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = na.value[r * cols + c];
  return make_result("transpose", {cols, rows}, std::move(out), {a.node()}, [rows, cols](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gp[r * cols + c] += self.grad[c * rows + r];
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const auto& na = node_of(a);
  const Shape out_shape = broadcast_shape(na.shape, shape, "broadcast_to");
  if (out_shape != shape) shape_error("broadcast_to", na.shape, shape);
  BroadcastPlan plan{shape, broadcast_strides(na.shape, shape), std::vector<std::size_t>(shape.size(), 0)};
  std::vector<double> out(numel(shape));
  plan.each([&](std::size_t i, std::size_t ia, std::size_t) { out[i] = na.value[ia]; });
  return make_result("broadcast_to", shape, std::move(out), {a.node()}, [plan = std::move(plan)](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    plan.each([&](std::size_t i, std::size_t ia, std::size_t) { gp[ia] += self.grad[i]; });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  const auto& na = node_of(a);
  if (numel(shape) != na.value.size()) shape_error("reshape", na.shape, shape);
  return make_result("reshape", std::move(shape), na.value, {a.node()}, [](Node& self) {
    auto& gp = grad_buffer(*self.parents[0]);
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor gather_dot(const Tensor& queries, const Tensor& keys, std::span<const std::size_t> index,
                  std::size_t width) {
  const auto& nq = node_of(queries);
  const auto& nk = node_of(keys);
  require_rank2(nq.shape, "gather_dot", "queries");
  require_rank2(nk.shape, "gather_dot", "keys");
  if (nq.shape[1] != nk.shape[1]) shape_error("gather_dot", nq.shape, nk.shape);
  const std::size_t rows = nq.shape[0], dim = nq.shape[1], count = nk.shape[0];
  if (width == 0 || index.size() != rows * width) {
    shape_error("gather_dot", "index holds " + std::to_string(index.size()) + " entries, expected " +
                                  std::to_string(rows) + " x " + std::to_string(width));
  }
  for (auto i : index)
    if (i >= count) shape_error("gather_dot", "index " + std::to_string(i) + " out of range for keys " + to_string(nk.shape));
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(rows * width);
  for (std::size_t a = 0; a < rows; ++a) {
    const double* q = nq.value.data() + a * dim;
    for (std::size_t j = 0; j < width; ++j) {
      const double* k = nk.value.data() + idx[a * width + j] * dim;
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += q[d] * k[d];
      out[a * width + j] = dot;
    }
  }
  return make_result("gather_dot", {rows, width}, std::move(out), {queries.node(), keys.node()},
                     [rows, dim, width, idx = std::move(idx)](Node& self) {
                       Node& pq = *self.parents[0];
                       Node& pk = *self.parents[1];
                       double* gq = pq.requires_grad ? grad_buffer(pq).data() : nullptr;
                       double* gk = pk.requires_grad ? grad_buffer(pk).data() : nullptr;
                       for (std::size_t a = 0; a < rows; ++a) {
                         for (std::size_t j = 0; j < width; ++j) {
                           const double g = self.grad[a * width + j];
                           const std::size_t key = idx[a * width + j];
                           if (gq) {
                             const double* k = pk.value.data() + key * dim;
                             for (std::size_t d = 0; d < dim; ++d) gq[a * dim + d] += g * k[d];
                           }
                           if (gk) {
                             const double* q = pq.value.data() + a * dim;
                             for (std::size_t d = 0; d < dim; ++d) gk[key * dim + d] += g * q[d];
                           }
                         }
                       }
                     });
}

}  // namespace cpcser
