#include "textseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace textseg::ops {

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    st[static_cast<size_t>(d)] = acc;
    acc *= s[static_cast<size_t>(d)];
  }
  return st;
}

int64_t padded_dim(const Shape& s, int nd, int i) {
  const int off = nd - static_cast<int>(s.size());
  return i < off ? 1 : s[static_cast<size_t>(i - off)];
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    const int64_t da = padded_dim(a, nd, i);
    const int64_t db = padded_dim(b, nd, i);
    if (da != db && da != 1 && db != 1)
      throw TensorError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " are not broadcastable");
    out[static_cast<size_t>(i)] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed through `out`, zero on broadcast axes.
std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  const int nd = static_cast<int>(out.size());
  const auto own = row_major_strides(s);
  const int off = nd - static_cast<int>(s.size());
  std::vector<int64_t> st(static_cast<size_t>(nd), 0);
  for (int i = 0; i < nd; ++i) {
    if (i < off) continue;
    const int64_t d = s[static_cast<size_t>(i - off)];
    st[static_cast<size_t>(i)] = (d == 1 && out[static_cast<size_t>(i)] > 1)
                                     ? 0
                                     : own[static_cast<size_t>(i - off)];
  }
  return st;
}

// Visits every element of `out` with the flat offsets of two broadcast
// operands. fn(i, ia, ib).
template <class Fn>
void for_each_pair(const Shape& out, const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb, Fn&& fn) {
  const int nd = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      ia += sa[static_cast<size_t>(d)];
      ib += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
      ia -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      ib -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

// Single-operand variant: fn(i_out, i_src).
template <class Fn>
void for_each_mapped(const Shape& out, const std::vector<int64_t>& src_strides, Fn&& fn) {
  const int nd = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
  int64_t is = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, is);
    for (int d = nd - 1; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      is += src_strides[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
      is -= src_strides[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

using BinFn = Real (*)(Real, Real);

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, BinFn f, BinFn dfa,
                 BinFn dfb) {
  const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  const int64_t n = shape_numel(out_shape);
  std::vector<Real> vals(static_cast<size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i)
      vals[static_cast<size_t>(i)] = f(av[static_cast<size_t>(i)], bv[static_cast<size_t>(i)]);
  } else {
    const auto sa = bcast_strides(a.shape(), out_shape);
    const auto sb = bcast_strides(b.shape(), out_shape);
    for_each_pair(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      vals[static_cast<size_t>(i)] = f(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)]);
    });
  }
  return make_op_node(name, out_shape, std::move(vals), {a, b}, [dfa, dfb](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const bool ga = pa.requires_grad;
    const bool gb = pb.requires_grad;
    if (ga) pa.ensure_grad();
    if (gb) pb.ensure_grad();
    if (pa.shape == pb.shape) {
      const int64_t n = self.numel();
      for (int64_t i = 0; i < n; ++i) {
        const Real g = self.grad[static_cast<size_t>(i)];
        const Real x = pa.values[static_cast<size_t>(i)];
        const Real y = pb.values[static_cast<size_t>(i)];
        if (ga) pa.grad[static_cast<size_t>(i)] += dfa(x, y) * g;
        if (gb) pb.grad[static_cast<size_t>(i)] += dfb(x, y) * g;
      }
      return;
    }
    const auto sa = bcast_strides(pa.shape, self.shape);
    const auto sb = bcast_strides(pb.shape, self.shape);
    for_each_pair(self.shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      const Real g = self.grad[static_cast<size_t>(i)];
      const Real x = pa.values[static_cast<size_t>(ia)];
      const Real y = pb.values[static_cast<size_t>(ib)];
      if (ga) pa.grad[static_cast<size_t>(ia)] += dfa(x, y) * g;
      if (gb) pb.grad[static_cast<size_t>(ib)] += dfb(x, y) * g;
    });
  });
}

using UnFn = Real (*)(Real);
using UnDFn = Real (*)(Real, Real);  // (x, y) -> dy/dx

Tensor unary_op(const char* name, const Tensor& x, UnFn f, UnDFn df) {
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = f(xv[i]);
  return make_op_node(name, x.shape(), std::move(vals), {x}, [df](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.values.size(); ++i)
      p.grad[i] += df(p.values[i], self.values[i]) * self.grad[i];
  });
}

Real stable_sigmoid(Real x) {
  if (x >= 0) {
    const Real e = std::exp(-x);
    return Real(1) / (Real(1) + e);
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

void gemm(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
  // c[m,n] += a[m,k] * b[k,n]
  for (int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      const Real* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(const Real* a, const Real* b, Real* c, int64_t m, int64_t n, int64_t k) {
  // c[m,k] += a[m,n] * b[k,n]^T
  for (int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * n;
    Real* crow = c + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const Real* brow = b + kk * n;
      Real acc = 0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

void gemm_tn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
  // c[k,n] += a[m,k]^T * b[m,n]
  for (int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* brow = b + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      Real* crow = c + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Output positions o with 0 <= o*s - p + k < extent, clamped to [0, out-1].
// Returns false when empty.
bool conv_out_range(int64_t extent, int64_t out, int64_t s, int64_t p, int64_t k, int64_t& lo,
                    int64_t& hi) {
  const int64_t num = p - k;
  lo = num <= 0 ? 0 : (num + s - 1) / s;
  const int64_t top = extent - 1 + p - k;
  if (top < 0) return false;
  hi = std::min(top / s, out - 1);
  return lo <= hi;
}

struct ResizeAxis {
  std::vector<int64_t> i0, i1;
  std::vector<Real> frac;
};

ResizeAxis resize_axis_table(int64_t in_n, int64_t out_n) {
  ResizeAxis t;
  t.i0.resize(static_cast<size_t>(out_n));
  t.i1.resize(static_cast<size_t>(out_n));
  t.frac.resize(static_cast<size_t>(out_n));
  const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
  for (int64_t o = 0; o < out_n; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    const double top = static_cast<double>(in_n - 1);
    if (src > top) src = top;
    const int64_t i0 = static_cast<int64_t>(src);
    t.i0[static_cast<size_t>(o)] = i0;
    t.i1[static_cast<size_t>(o)] = std::min(i0 + 1, in_n - 1);
    t.frac[static_cast<size_t>(o)] = static_cast<Real>(src - static_cast<double>(i0));
  }
  return t;
}

void require_ndim(const char* op, const Tensor& t, int nd) {
  if (t.ndim() != nd)
    throw TensorError(std::string(op) + ": expected a " + std::to_string(nd) +
                      "-d tensor, got shape " + shape_str(t.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real, Real y) { return Real(1) / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](Real v) { return -v; }, [](Real, Real) { return Real(-1); });
}

Tensor add_scalar(const Tensor& x, Real c) {
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = xv[i] + c;
  return make_op_node("add_scalar", x.shape(), std::move(vals), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& x, Real c) {
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = xv[i] * c;
  return make_op_node("mul_scalar", x.shape(), std::move(vals), {x}, [c](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](Real v) { return std::log(v); },
      [](Real xv, Real) { return Real(1) / xv; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return Real(0.5) / y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, [](Real v) { return stable_sigmoid(v); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](Real v) { return std::tanh(v); },
      [](Real, Real y) { return Real(1) - y * y; });
}

Tensor leaky_relu(const Tensor& x, Real slope) {
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = xv[i] > 0 ? xv[i] : slope * xv[i];
  return make_op_node("leaky_relu", x.shape(), std::move(vals), {x}, [slope](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += (p.values[i] > 0 ? Real(1) : slope) * self.grad[i];
  });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  if (!(lo <= hi)) throw TensorError("clamp: lo must not exceed hi");
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = std::min(std::max(xv[i], lo), hi);
  return make_op_node("clamp", x.shape(), std::move(vals), {x}, [lo, hi](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const Real v = p.values[i];
      if (v >= lo && v <= hi) p.grad[i] += self.grad[i];
    }
  });
}

Tensor softmax_last(const Tensor& x) {
  const int64_t last = x.shape().back();
  const int64_t rows = x.numel() / last;
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * last;
    Real* out = vals.data() + r * last;
    Real m = in[0];
    for (int64_t j = 1; j < last; ++j) m = std::max(m, in[j]);
    Real s = 0;
    for (int64_t j = 0; j < last; ++j) {
      out[j] = std::exp(in[j] - m);
      s += out[j];
    }
    const Real inv = Real(1) / s;
    for (int64_t j = 0; j < last; ++j) out[j] *= inv;
  }
  return make_op_node("softmax_last", x.shape(), std::move(vals), {x}, [last](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const int64_t rows = self.numel() / last;
    for (int64_t r = 0; r < rows; ++r) {
      const Real* y = self.values.data() + r * last;
      const Real* g = self.grad.data() + r * last;
      Real* gx = p.grad.data() + r * last;
      Real dot = 0;
      for (int64_t j = 0; j < last; ++j) dot += g[j] * y[j];
      for (int64_t j = 0; j < last; ++j) gx[j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor l2_normalize_channels(const Tensor& x, Real eps) {
  if (x.ndim() < 2)
    throw TensorError("l2_normalize_channels: need at least 2 axes, got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0);
  const int64_t ch = x.dim(1);
  const int64_t spatial = x.numel() / (batch * ch);
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  std::vector<Real> denoms(static_cast<size_t>(batch * spatial));
  std::vector<char> clamped(static_cast<size_t>(batch * spatial));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t s = 0; s < spatial; ++s) {
      Real n2 = 0;
      for (int64_t c = 0; c < ch; ++c) {
        const Real v = xv[static_cast<size_t>((b * ch + c) * spatial + s)];
        n2 += v * v;
      }
      const Real norm = std::sqrt(n2);
      const bool clip = norm < eps;
      const Real denom = clip ? eps : norm;
      denoms[static_cast<size_t>(b * spatial + s)] = denom;
      clamped[static_cast<size_t>(b * spatial + s)] = clip ? 1 : 0;
      for (int64_t c = 0; c < ch; ++c) {
        const size_t idx = static_cast<size_t>((b * ch + c) * spatial + s);
        vals[idx] = xv[idx] / denom;
      }
    }
  }
  return make_op_node(
      "l2_normalize_channels", x.shape(), std::move(vals), {x},
      [batch, ch, spatial, denoms = std::move(denoms),
       clamped = std::move(clamped)](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t s = 0; s < spatial; ++s) {
            const Real denom = denoms[static_cast<size_t>(b * spatial + s)];
            if (clamped[static_cast<size_t>(b * spatial + s)]) {
              for (int64_t c = 0; c < ch; ++c) {
                const size_t idx = static_cast<size_t>((b * ch + c) * spatial + s);
                p.grad[idx] += self.grad[idx] / denom;
              }
              continue;
            }
            Real dot = 0;
            for (int64_t c = 0; c < ch; ++c) {
              const size_t idx = static_cast<size_t>((b * ch + c) * spatial + s);
              dot += self.grad[idx] * self.values[idx];
            }
            for (int64_t c = 0; c < ch; ++c) {
              const size_t idx = static_cast<size_t>((b * ch + c) * spatial + s);
              p.grad[idx] += (self.grad[idx] - self.values[idx] * dot) / denom;
            }
          }
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2) throw TensorError("matmul: lhs must have >= 2 axes, got " + shape_str(a.shape()));
  const int64_t k = a.shape()[a.shape().size() - 1];
  const int64_t m = a.shape()[a.shape().size() - 2];
  const bool shared_rhs = b.ndim() == 2;
  if (!shared_rhs) {
    if (b.ndim() != a.ndim())
      throw TensorError("matmul: rhs must be 2-d or match lhs rank; got " + shape_str(a.shape()) +
                        " x " + shape_str(b.shape()));
    for (int i = 0; i + 2 < a.ndim(); ++i)
      if (a.shape()[static_cast<size_t>(i)] != b.shape()[static_cast<size_t>(i)])
        throw TensorError("matmul: batch prefixes differ: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  }
  const int64_t bk = b.shape()[b.shape().size() - 2];
  const int64_t n = b.shape()[b.shape().size() - 1];
  if (bk != k)
    throw TensorError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const int64_t batch = a.numel() / (m * k);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<Real> vals(static_cast<size_t>(batch * m * n), Real(0));
  const Real* av = a.values().data();
  const Real* bv = b.values().data();
  for (int64_t t = 0; t < batch; ++t)
    gemm(av + t * m * k, shared_rhs ? bv : bv + t * k * n, vals.data() + t * m * n, m, k, n);

  return make_op_node("matmul", out_shape, std::move(vals), {a, b},
                      [m, k, n, batch, shared_rhs](TensorNode& self) {
                        TensorNode& pa = *self.parents[0];
                        TensorNode& pb = *self.parents[1];
                        const Real* g = self.grad.data();
                        if (pa.requires_grad) {
                          pa.ensure_grad();
                          for (int64_t t = 0; t < batch; ++t)
                            gemm_nt(g + t * m * n,
                                    pb.values.data() + (shared_rhs ? 0 : t * k * n),
                                    pa.grad.data() + t * m * k, m, n, k);
                        }
                        if (pb.requires_grad) {
                          pb.ensure_grad();
                          for (int64_t t = 0; t < batch; ++t)
                            gemm_tn(pa.values.data() + t * m * k, g + t * m * n,
                                    pb.grad.data() + (shared_rhs ? 0 : t * k * n), m, k, n);
                        }
                      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw TensorError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<Real> vals = x.values();
  return make_op_node("reshape", std::move(shape), std::move(vals), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, std::vector<int> axes) {
  const int nd = x.ndim();
  if (static_cast<int>(axes.size()) != nd)
    throw TensorError("permute: axis list length does not match rank");
  std::vector<char> used(static_cast<size_t>(nd), 0);
  Shape out_shape(static_cast<size_t>(nd));
  for (int j = 0; j < nd; ++j) {
    const int a = axes[static_cast<size_t>(j)];
    if (a < 0 || a >= nd || used[static_cast<size_t>(a)])
      throw TensorError("permute: invalid axis permutation");
    used[static_cast<size_t>(a)] = 1;
    out_shape[static_cast<size_t>(j)] = x.shape()[static_cast<size_t>(a)];
  }
  const auto ostr = row_major_strides(out_shape);
  // Coefficient of input axis d in the output flat offset.
  std::vector<int64_t> coef(static_cast<size_t>(nd));
  for (int j = 0; j < nd; ++j) coef[static_cast<size_t>(axes[static_cast<size_t>(j)])] = ostr[static_cast<size_t>(j)];

  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for_each_mapped(x.shape(), coef, [&](int64_t i_in, int64_t i_out) {
    vals[static_cast<size_t>(i_out)] = xv[static_cast<size_t>(i_in)];
  });
  return make_op_node("permute", out_shape, std::move(vals), {x},
                      [coef = std::move(coef)](TensorNode& self) {
                        TensorNode& p = *self.parents[0];
                        p.ensure_grad();
                        for_each_mapped(p.shape, coef, [&](int64_t i_in, int64_t i_out) {
                          p.grad[static_cast<size_t>(i_in)] += self.grad[static_cast<size_t>(i_out)];
                        });
                      });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  const Shape check = broadcast_shape("broadcast_to", x.shape(), shape);
  if (check != shape)
    throw TensorError("broadcast_to: cannot expand " + shape_str(x.shape()) + " to " +
                      shape_str(shape));
  const auto st = bcast_strides(x.shape(), shape);
  const auto& xv = x.values();
  std::vector<Real> vals(static_cast<size_t>(shape_numel(shape)));
  for_each_mapped(shape, st, [&](int64_t i, int64_t is) {
    vals[static_cast<size_t>(i)] = xv[static_cast<size_t>(is)];
  });
  return make_op_node("broadcast_to", shape, std::move(vals), {x},
                      [st = std::move(st)](TensorNode& self) {
                        TensorNode& p = *self.parents[0];
                        p.ensure_grad();
                        for_each_mapped(self.shape, st, [&](int64_t i, int64_t is) {
                          p.grad[static_cast<size_t>(is)] += self.grad[static_cast<size_t>(i)];
                        });
                      });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw TensorError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw TensorError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && p.shape()[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
        throw TensorError("concat: extent mismatch off the concat axis: " +
                          shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    axis_total += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<int64_t> blocks;
  blocks.reserve(parts.size());
  for (const auto& p : parts) blocks.push_back(p.shape()[static_cast<size_t>(axis)] * inner);
  const int64_t out_block = axis_total * inner;

  std::vector<Real> vals(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].values();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(vals.data() + o * out_block + offset, pv.data() + o * blocks[pi],
                  static_cast<size_t>(blocks[pi]) * sizeof(Real));
    offset += blocks[pi];
  }
  return make_op_node("concat", out_shape, std::move(vals), parts,
                      [outer, out_block, blocks = std::move(blocks)](TensorNode& self) {
                        int64_t offset = 0;
                        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                          TensorNode& p = *self.parents[pi];
                          if (p.requires_grad) {
                            p.ensure_grad();
                            for (int64_t o = 0; o < outer; ++o) {
                              const Real* g = self.grad.data() + o * out_block + offset;
                              Real* pg = p.grad.data() + o * blocks[pi];
                              for (int64_t i = 0; i < blocks[pi]; ++i) pg[i] += g[i];
                            }
                          }
                          offset += blocks[pi];
                        }
                      });
}

Tensor sum_all(const Tensor& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  return make_op_node("sum_all", {1}, {acc}, {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const Real g = self.grad[0];
    for (auto& pg : p.grad) pg += g;
  });
}

Tensor mean_all(const Tensor& x) {
  const Real inv = Real(1) / static_cast<Real>(x.numel());
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  return make_op_node("mean_all", {1}, {acc * inv}, {x}, [inv](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const Real g = self.grad[0] * inv;
    for (auto& pg : p.grad) pg += g;
  });
}

Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdims) {
  const int nd = x.ndim();
  std::vector<char> reduce(static_cast<size_t>(nd), 0);
  for (int a : axes) {
    if (a < 0) a += nd;
    if (a < 0 || a >= nd) throw TensorError("sum_axes: axis out of range");
    reduce[static_cast<size_t>(a)] = 1;
  }
  Shape out_shape;
  for (int d = 0; d < nd; ++d) {
    if (reduce[static_cast<size_t>(d)]) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.shape()[static_cast<size_t>(d)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Per input axis: its stride in the output offset (0 when reduced).
  Shape kept_shape;
  for (int d = 0; d < nd; ++d)
    kept_shape.push_back(reduce[static_cast<size_t>(d)] ? 1 : x.shape()[static_cast<size_t>(d)]);
  const auto kept_strides = row_major_strides(kept_shape);
  std::vector<int64_t> coef(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d)
    coef[static_cast<size_t>(d)] = reduce[static_cast<size_t>(d)] ? 0 : kept_strides[static_cast<size_t>(d)];

  const auto& xv = x.values();
  std::vector<Real> vals(static_cast<size_t>(shape_numel(out_shape)), Real(0));
  for_each_mapped(x.shape(), coef, [&](int64_t i_in, int64_t i_out) {
    vals[static_cast<size_t>(i_out)] += xv[static_cast<size_t>(i_in)];
  });
  return make_op_node("sum_axes", out_shape, std::move(vals), {x},
                      [coef = std::move(coef)](TensorNode& self) {
                        TensorNode& p = *self.parents[0];
                        p.ensure_grad();
                        for_each_mapped(p.shape, coef, [&](int64_t i_in, int64_t i_out) {
                          p.grad[static_cast<size_t>(i_in)] += self.grad[static_cast<size_t>(i_out)];
                        });
                      });
}

Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdims) {
  Tensor s = sum_axes(x, axes, keepdims);
  const Real inv = static_cast<Real>(s.numel()) / static_cast<Real>(x.numel());
  return mul_scalar(s, inv);
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, Triple stride, Triple padding) {
  require_ndim("conv3d", input, 5);
  require_ndim("conv3d", kernel, 5);
  for (int i = 0; i < 3; ++i) {
    if (stride[static_cast<size_t>(i)] < 1) throw TensorError("conv3d: stride must be >= 1");
    if (padding[static_cast<size_t>(i)] < 0) throw TensorError("conv3d: padding must be >= 0");
  }
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  const int64_t B = is[0], Ci = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Co = ks[0], kd = ks[2], kh = ks[3], kw = ks[4];
  if (ks[1] != Ci)
    throw TensorError("conv3d: kernel input channels " + std::to_string(ks[1]) +
                      " do not match input channels " + std::to_string(Ci));
  const int64_t pd = padding[0], ph = padding[1], pw = padding[2];
  const int64_t sd = stride[0], sh = stride[1], sw = stride[2];
  const char* ax_name[3] = {"D", "H", "W"};
  const int64_t in_ext[3] = {D, H, W};
  const int64_t k_ext[3] = {kd, kh, kw};
  const int64_t p_ext[3] = {pd, ph, pw};
  for (int i = 0; i < 3; ++i) {
    if (k_ext[i] > in_ext[i] + 2 * p_ext[i])
      throw TensorError(std::string("conv3d: kernel extent ") + std::to_string(k_ext[i]) +
                        " exceeds padded input extent " +
                        std::to_string(in_ext[i] + 2 * p_ext[i]) + " on axis " + ax_name[i]);
  }
  const int64_t Do = (D + 2 * pd - kd) / sd + 1;
  const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  const int64_t Wo = (W + 2 * pw - kw) / sw + 1;

  const Real* in = input.values().data();
  const Real* kv = kernel.values().data();
  std::vector<Real> vals(static_cast<size_t>(B * Co * Do * Ho * Wo), Real(0));

  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Co; ++co) {
      Real* out_plane = vals.data() + (b * Co + co) * Do * Ho * Wo;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const Real* in_plane = in + (b * Ci + ci) * D * H * W;
        for (int64_t kz = 0; kz < kd; ++kz) {
          int64_t oz_lo, oz_hi;
          if (!conv_out_range(D, Do, sd, pd, kz, oz_lo, oz_hi)) continue;
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t oy_lo, oy_hi;
            if (!conv_out_range(H, Ho, sh, ph, ky, oy_lo, oy_hi)) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ox_lo, ox_hi;
              if (!conv_out_range(W, Wo, sw, pw, kx, ox_lo, ox_hi)) continue;
              const Real wv = kv[((co * Ci + ci) * kd + kz) * kh * kw + ky * kw + kx];
              if (wv == Real(0)) continue;
              for (int64_t oz = oz_lo; oz <= oz_hi; ++oz) {
                const int64_t iz = oz * sd - pd + kz;
                for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                  const int64_t iy = oy * sh - ph + ky;
                  const Real* in_row = in_plane + (iz * H + iy) * W - pw + kx;
                  Real* out_row = out_plane + (oz * Ho + oy) * Wo;
                  if (sw == 1) {
                    for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                      out_row[ox] += wv * in_row[ox];
                  } else {
                    for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                      out_row[ox] += wv * in_row[ox * sw];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  return make_op_node(
      "conv3d", {B, Co, Do, Ho, Wo}, std::move(vals), {input, kernel},
      [B, Ci, Co, D, H, W, kd, kh, kw, sd, sh, sw, pd, ph, pw, Do, Ho, Wo](TensorNode& self) {
        TensorNode& pin = *self.parents[0];
        TensorNode& pk = *self.parents[1];
        const bool need_in = pin.requires_grad;
        const bool need_k = pk.requires_grad;
        if (need_in) pin.ensure_grad();
        if (need_k) pk.ensure_grad();
        const Real* g = self.grad.data();
        const Real* in = pin.values.data();
        const Real* kv = pk.values.data();
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t co = 0; co < Co; ++co) {
            const Real* g_plane = g + (b * Co + co) * Do * Ho * Wo;
            for (int64_t ci = 0; ci < Ci; ++ci) {
              const Real* in_plane = in + (b * Ci + ci) * D * H * W;
              Real* gin_plane = need_in ? pin.grad.data() + (b * Ci + ci) * D * H * W : nullptr;
              for (int64_t kz = 0; kz < kd; ++kz) {
                int64_t oz_lo, oz_hi;
                if (!conv_out_range(D, Do, sd, pd, kz, oz_lo, oz_hi)) continue;
                for (int64_t ky = 0; ky < kh; ++ky) {
                  int64_t oy_lo, oy_hi;
                  if (!conv_out_range(H, Ho, sh, ph, ky, oy_lo, oy_hi)) continue;
                  for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ox_lo, ox_hi;
                    if (!conv_out_range(W, Wo, sw, pw, kx, ox_lo, ox_hi)) continue;
                    const int64_t kidx = ((co * Ci + ci) * kd + kz) * kh * kw + ky * kw + kx;
                    const Real wv = kv[kidx];
                    Real acc = 0;
                    for (int64_t oz = oz_lo; oz <= oz_hi; ++oz) {
                      const int64_t iz = oz * sd - pd + kz;
                      for (int64_t oy = oy_lo; oy <= oy_hi; ++oy) {
                        const int64_t iy = oy * sh - ph + ky;
                        const int64_t row_base = (iz * H + iy) * W - pw + kx;
                        const Real* g_row = g_plane + (oz * Ho + oy) * Wo;
                        const Real* in_row = in_plane + row_base;
                        if (need_in && need_k) {
                          Real* gin_row = gin_plane + row_base;
                          for (int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                            const Real gv = g_row[ox];
                            gin_row[ox * sw] += wv * gv;
                            acc += in_row[ox * sw] * gv;
                          }
                        } else if (need_in) {
                          Real* gin_row = gin_plane + row_base;
                          for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                            gin_row[ox * sw] += wv * g_row[ox];
                        } else if (need_k) {
                          for (int64_t ox = ox_lo; ox <= ox_hi; ++ox)
                            acc += in_row[ox * sw] * g_row[ox];
                        }
                      }
                    }
                    if (need_k) pk.grad[static_cast<size_t>(kidx)] += acc;
                  }
                }
              }
            }
          }
        }
      });
}

Tensor max_pool3d(const Tensor& input, Triple kernel, Triple stride) {
  require_ndim("max_pool3d", input, 5);
  const auto& is = input.shape();
  const int64_t B = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t kd = kernel[0], kh = kernel[1], kw = kernel[2];
  const int64_t sd = stride[0], sh = stride[1], sw = stride[2];
  if (kd < 1 || kh < 1 || kw < 1 || sd < 1 || sh < 1 || sw < 1)
    throw TensorError("max_pool3d: kernel and stride must be >= 1");
  if (kd > D || kh > H || kw > W)
    throw TensorError("max_pool3d: kernel " + std::to_string(kd) + "x" + std::to_string(kh) + "x" +
                      std::to_string(kw) + " exceeds input extents " + shape_str(is));
  const int64_t Do = (D - kd) / sd + 1;
  const int64_t Ho = (H - kh) / sh + 1;
  const int64_t Wo = (W - kw) / sw + 1;

  const Real* in = input.values().data();
  std::vector<Real> vals(static_cast<size_t>(B * C * Do * Ho * Wo));
  std::vector<int64_t> argmax(vals.size());
  int64_t o = 0;
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const Real* plane = in + bc * D * H * W;
    for (int64_t oz = 0; oz < Do; ++oz) {
      for (int64_t oy = 0; oy < Ho; ++oy) {
        for (int64_t ox = 0; ox < Wo; ++ox, ++o) {
          Real best = -std::numeric_limits<Real>::infinity();
          int64_t best_idx = -1;
          for (int64_t kz = 0; kz < kd; ++kz) {
            const int64_t iz = oz * sd + kz;
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy * sh + ky;
              const int64_t base = (iz * H + iy) * W + ox * sw;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const Real v = plane[base + kx];
                if (v > best) {
                  best = v;
                  best_idx = bc * D * H * W + base + kx;
                }
              }
            }
          }
          vals[static_cast<size_t>(o)] = best;
          argmax[static_cast<size_t>(o)] = best_idx;
        }
      }
    }
  }
  return make_op_node("max_pool3d", {B, C, Do, Ho, Wo}, std::move(vals), {input},
                      [argmax = std::move(argmax)](TensorNode& self) {
                        TensorNode& p = *self.parents[0];
                        p.ensure_grad();
                        for (size_t i = 0; i < self.grad.size(); ++i)
                          p.grad[static_cast<size_t>(argmax[i])] += self.grad[i];
                      });
}

Tensor resize_trilinear(const Tensor& input, Triple target) {
  require_ndim("resize_trilinear", input, 5);
  for (int i = 0; i < 3; ++i)
    if (target[static_cast<size_t>(i)] < 1)
      throw TensorError("resize_trilinear: target extents must be >= 1");
  const auto& is = input.shape();
  const int64_t B = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  const int64_t Do = target[0], Ho = target[1], Wo = target[2];
  const ResizeAxis tz = resize_axis_table(D, Do);
  const ResizeAxis ty = resize_axis_table(H, Ho);
  const ResizeAxis tx = resize_axis_table(W, Wo);

  const Real* in = input.values().data();
  std::vector<Real> vals(static_cast<size_t>(B * C * Do * Ho * Wo));
  int64_t o = 0;
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const Real* plane = in + bc * D * H * W;
    for (int64_t oz = 0; oz < Do; ++oz) {
      const int64_t z0 = tz.i0[static_cast<size_t>(oz)], z1 = tz.i1[static_cast<size_t>(oz)];
      const Real fz = tz.frac[static_cast<size_t>(oz)];
      for (int64_t oy = 0; oy < Ho; ++oy) {
        const int64_t y0 = ty.i0[static_cast<size_t>(oy)], y1 = ty.i1[static_cast<size_t>(oy)];
        const Real fy = ty.frac[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < Wo; ++ox, ++o) {
          const int64_t x0 = tx.i0[static_cast<size_t>(ox)], x1 = tx.i1[static_cast<size_t>(ox)];
          const Real fx = tx.frac[static_cast<size_t>(ox)];
          const Real v00 = (Real(1) - fx) * plane[(z0 * H + y0) * W + x0] + fx * plane[(z0 * H + y0) * W + x1];
          const Real v01 = (Real(1) - fx) * plane[(z0 * H + y1) * W + x0] + fx * plane[(z0 * H + y1) * W + x1];
          const Real v10 = (Real(1) - fx) * plane[(z1 * H + y0) * W + x0] + fx * plane[(z1 * H + y0) * W + x1];
          const Real v11 = (Real(1) - fx) * plane[(z1 * H + y1) * W + x0] + fx * plane[(z1 * H + y1) * W + x1];
          const Real v0 = (Real(1) - fy) * v00 + fy * v01;
          const Real v1 = (Real(1) - fy) * v10 + fy * v11;
          vals[static_cast<size_t>(o)] = (Real(1) - fz) * v0 + fz * v1;
        }
      }
    }
  }
  return make_op_node(
      "resize_trilinear", {B, C, Do, Ho, Wo}, std::move(vals), {input},
      [B, C, D, H, W, Do, Ho, Wo, tz, ty, tx](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        const Real* g = self.grad.data();
        int64_t o = 0;
        for (int64_t bc = 0; bc < B * C; ++bc) {
          Real* gplane = p.grad.data() + bc * D * H * W;
          for (int64_t oz = 0; oz < Do; ++oz) {
            const int64_t z0 = tz.i0[static_cast<size_t>(oz)], z1 = tz.i1[static_cast<size_t>(oz)];
            const Real fz = tz.frac[static_cast<size_t>(oz)];
            for (int64_t oy = 0; oy < Ho; ++oy) {
              const int64_t y0 = ty.i0[static_cast<size_t>(oy)], y1 = ty.i1[static_cast<size_t>(oy)];
              const Real fy = ty.frac[static_cast<size_t>(oy)];
              for (int64_t ox = 0; ox < Wo; ++ox, ++o) {
                const int64_t x0 = tx.i0[static_cast<size_t>(ox)], x1 = tx.i1[static_cast<size_t>(ox)];
                const Real fx = tx.frac[static_cast<size_t>(ox)];
                const Real gv = g[o];
                gplane[(z0 * H + y0) * W + x0] += gv * (Real(1) - fz) * (Real(1) - fy) * (Real(1) - fx);
                gplane[(z0 * H + y0) * W + x1] += gv * (Real(1) - fz) * (Real(1) - fy) * fx;
                gplane[(z0 * H + y1) * W + x0] += gv * (Real(1) - fz) * fy * (Real(1) - fx);
                gplane[(z0 * H + y1) * W + x1] += gv * (Real(1) - fz) * fy * fx;
                gplane[(z1 * H + y0) * W + x0] += gv * fz * (Real(1) - fy) * (Real(1) - fx);
                gplane[(z1 * H + y0) * W + x1] += gv * fz * (Real(1) - fy) * fx;
                gplane[(z1 * H + y1) * W + x0] += gv * fz * fy * (Real(1) - fx);
                gplane[(z1 * H + y1) * W + x1] += gv * fz * fy * fx;
              }
            }
          }
        }
      });
}

Tensor greater_than(const Tensor& x, Real threshold) {
  const auto& xv = x.values();
  std::vector<Real> vals(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) vals[i] = xv[i] > threshold ? Real(1) : Real(0);
  return Tensor::from_values(x.shape(), std::move(vals), false);
}

}  // namespace textseg::ops
