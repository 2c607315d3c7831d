#include "moestack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace moestack {
namespace ops {

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

void check_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(who) + ": expected 2-d tensor, got " +
                     shape_str(t.shape()));
  }
}

bool want_grad(const Tensor& a) { return Tape::recording() && a.requires_grad(); }
bool want_grad(const Tensor& a, const Tensor& b) {
  return Tape::recording() && (a.requires_grad() || b.requires_grad());
}
bool want_grad(const Tensor& a, const Tensor& b, const Tensor& c) {
  return Tape::recording() &&
         (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

// ---- raw kernels, double accumulation ----

// c[m,n] = a[m,k] * b[k,n]
void mm_kernel(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n) {
  thread_local std::vector<double> acc;
  acc.assign(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] = static_cast<float>(acc[j]);
  }
}

// c[m,k] += a[m,n] * b[k,n]^T   (rows dot rows)
void mm_abt_acc(const float* a, const float* b, float* c, int64_t m, int64_t n,
                int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const float* brow = b + l * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += double(arow[j]) * double(brow[j]);
      c[i * k + l] += static_cast<float>(s);
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_atb_acc(const float* a, const float* b, float* c, int64_t m, int64_t k,
                int64_t n) {
  thread_local std::vector<double> acc;
  acc.assign(static_cast<size_t>(k * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      double* dst = acc.data() + l * n;
      for (int64_t j = 0; j < n; ++j) dst[j] += av * brow[j];
    }
  }
  for (int64_t idx = 0; idx < k * n; ++idx) c[idx] += static_cast<float>(acc[idx]);
}

}  // namespace

// =====================================================================
//  matmul
// =====================================================================

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul lhs");
  check_2d(b, "matmul rhs");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  mm_kernel(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  if (want_grad(a, b)) {
    out.set_requires_grad(true);
    Tape::current().push("matmul", out, [a = a, b = b, out, m, k, n]() mutable {
      const float* g = out.grad().data();
      if (a.requires_grad()) mm_abt_acc(g, b.ptr(), a.grad().data(), m, n, k);
      if (b.requires_grad()) mm_atb_acc(a.ptr(), g, b.grad().data(), m, k, n);
    });
  }
  return out;
}

// =====================================================================
//  batched_contract (vectorized expert computation)
// =====================================================================

Tensor batched_contract(const Tensor& x, const Tensor& a, const Tensor& b,
                        float scale) {
  check_2d(x, "batched_contract x");
  if (a.ndim() != 3 || b.ndim() != 3) {
    throw ShapeError("batched_contract: A and B must be 3-d, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t t = x.dim(0), f = x.dim(1);
  const int64_t e = a.dim(0), r = a.dim(1), fa = a.dim(2);
  const int64_t eb = b.dim(0), o = b.dim(1), rb = b.dim(2);
  if (e != eb) {
    throw ShapeError("batched_contract: expert count mismatch, A has " +
                     std::to_string(e) + ", B has " + std::to_string(eb));
  }
  if (f != fa || r != rb) {
    throw ShapeError("batched_contract: inconsistent dims, x" +
                     shape_str(x.shape()) + " A" + shape_str(a.shape()) + " B" +
                     shape_str(b.shape()));
  }

  Tensor mid = Tensor::zeros({t, e, r});
  Tensor out = Tensor::zeros({t, e, o});
  const float* xp = x.ptr();
  const float* ap = a.ptr();
  const float* bp = b.ptr();
  float* mp = mid.ptr();
  float* op = out.ptr();
  for (int64_t ti = 0; ti < t; ++ti) {
    const float* xr = xp + ti * f;
    for (int64_t ei = 0; ei < e; ++ei) {
      float* mrow = mp + (ti * e + ei) * r;
      for (int64_t ri = 0; ri < r; ++ri) {
        const float* arow = ap + (ei * r + ri) * f;
        double s = 0.0;
        for (int64_t fi = 0; fi < f; ++fi) s += double(xr[fi]) * double(arow[fi]);
        mrow[ri] = static_cast<float>(s);
      }
      float* orow = op + (ti * e + ei) * o;
      for (int64_t oi = 0; oi < o; ++oi) {
        const float* brow = bp + (ei * o + oi) * r;
        double s = 0.0;
        for (int64_t ri = 0; ri < r; ++ri) s += double(mrow[ri]) * double(brow[ri]);
        orow[oi] = static_cast<float>(s * scale);
      }
    }
  }

  if (want_grad(x, a, b)) {
    out.set_requires_grad(true);
    Tape::current().push(
        "batched_contract", out, [x = x, a = a, b = b, mid, out, scale, t, f, e, r, o]() mutable {
          const float* g = out.grad().data();
          const float* xp = x.ptr();
          const float* ap = a.ptr();
          const float* bp = b.ptr();
          const float* mp = mid.ptr();
          // dmid[t,e,r] = scale * sum_o g[t,e,o] * B[e,o,r]
          std::vector<float> dmid(static_cast<size_t>(t * e * r), 0.0f);
          for (int64_t ti = 0; ti < t; ++ti) {
            for (int64_t ei = 0; ei < e; ++ei) {
              const float* grow = g + (ti * e + ei) * o;
              float* drow = dmid.data() + (ti * e + ei) * r;
              for (int64_t ri = 0; ri < r; ++ri) {
                double s = 0.0;
                for (int64_t oi = 0; oi < o; ++oi)
                  s += double(grow[oi]) * double(bp[(ei * o + oi) * r + ri]);
                drow[ri] = static_cast<float>(s * scale);
              }
            }
          }
          if (b.requires_grad()) {
            float* db = b.grad().data();
            for (int64_t ei = 0; ei < e; ++ei) {
              for (int64_t oi = 0; oi < o; ++oi) {
                float* dbrow = db + (ei * o + oi) * r;
                for (int64_t ri = 0; ri < r; ++ri) {
                  double s = 0.0;
                  for (int64_t ti = 0; ti < t; ++ti)
                    s += double(g[(ti * e + ei) * o + oi]) *
                         double(mp[(ti * e + ei) * r + ri]);
                  dbrow[ri] += static_cast<float>(s * scale);
                }
              }
            }
          }
          if (a.requires_grad()) {
            float* da = a.grad().data();
            for (int64_t ei = 0; ei < e; ++ei) {
              for (int64_t ri = 0; ri < r; ++ri) {
                float* darow = da + (ei * r + ri) * f;
                thread_local std::vector<double> acc;
                acc.assign(static_cast<size_t>(f), 0.0);
                for (int64_t ti = 0; ti < t; ++ti) {
                  const double dm = dmid[(ti * e + ei) * r + ri];
                  if (dm == 0.0) continue;
                  const float* xr = xp + ti * f;
                  for (int64_t fi = 0; fi < f; ++fi) acc[fi] += dm * xr[fi];
                }
                for (int64_t fi = 0; fi < f; ++fi)
                  darow[fi] += static_cast<float>(acc[fi]);
              }
            }
          }
          if (x.requires_grad()) {
            float* dx = x.grad().data();
            for (int64_t ti = 0; ti < t; ++ti) {
              thread_local std::vector<double> acc;
              acc.assign(static_cast<size_t>(f), 0.0);
              for (int64_t ei = 0; ei < e; ++ei) {
                const float* drow = dmid.data() + (ti * e + ei) * r;
                for (int64_t ri = 0; ri < r; ++ri) {
                  const double dm = drow[ri];
                  if (dm == 0.0) continue;
                  const float* arow = ap + (ei * r + ri) * f;
                  for (int64_t fi = 0; fi < f; ++fi) acc[fi] += dm * arow[fi];
                }
              }
              float* dxrow = dx + ti * f;
              for (int64_t fi = 0; fi < f; ++fi)
                dxrow[fi] += static_cast<float>(acc[fi]);
            }
          }
        });
  }
  return out;
}

// =====================================================================
//  gate_combine
// =====================================================================

Tensor gate_combine(const Tensor& gates, const Tensor& expert_out) {
  check_2d(gates, "gate_combine gates");
  if (expert_out.ndim() != 3) {
    throw ShapeError("gate_combine: expert_out must be [t,e,o], got " +
                     shape_str(expert_out.shape()));
  }
  const int64_t t = gates.dim(0), e = gates.dim(1);
  if (expert_out.dim(0) != t || expert_out.dim(1) != e) {
    throw ShapeError("gate_combine: gates " + shape_str(gates.shape()) +
                     " vs expert_out " + shape_str(expert_out.shape()));
  }
  const int64_t o = expert_out.dim(2);
  Tensor out = Tensor::zeros({t, o});
  const float* gp = gates.ptr();
  const float* xp = expert_out.ptr();
  float* op = out.ptr();
  for (int64_t ti = 0; ti < t; ++ti) {
    thread_local std::vector<double> acc;
    acc.assign(static_cast<size_t>(o), 0.0);
    for (int64_t ei = 0; ei < e; ++ei) {
      const double gv = gp[ti * e + ei];
      if (gv == 0.0) continue;
      const float* xrow = xp + (ti * e + ei) * o;
      for (int64_t oi = 0; oi < o; ++oi) acc[oi] += gv * xrow[oi];
    }
    float* orow = op + ti * o;
    for (int64_t oi = 0; oi < o; ++oi) orow[oi] = static_cast<float>(acc[oi]);
  }
  if (want_grad(gates, expert_out)) {
    out.set_requires_grad(true);
    Tape::current().push("gate_combine", out,
                         [gates = gates, expert_out = expert_out, out, t, e, o]() mutable {
                           const float* g = out.grad().data();
                           const float* gp = gates.ptr();
                           const float* xp = expert_out.ptr();
                           if (gates.requires_grad()) {
                             float* dg = gates.grad().data();
                             for (int64_t ti = 0; ti < t; ++ti)
                               for (int64_t ei = 0; ei < e; ++ei) {
                                 const float* xrow = xp + (ti * e + ei) * o;
                                 const float* grow = g + ti * o;
                                 double s = 0.0;
                                 for (int64_t oi = 0; oi < o; ++oi)
                                   s += double(grow[oi]) * double(xrow[oi]);
                                 dg[ti * e + ei] += static_cast<float>(s);
                               }
                           }
                           if (expert_out.requires_grad()) {
                             float* dx = expert_out.grad().data();
                             for (int64_t ti = 0; ti < t; ++ti)
                               for (int64_t ei = 0; ei < e; ++ei) {
                                 const float gv = gp[ti * e + ei];
                                 if (gv == 0.0f) continue;
                                 float* dxrow = dx + (ti * e + ei) * o;
                                 const float* grow = g + ti * o;
                                 for (int64_t oi = 0; oi < o; ++oi)
                                   dxrow[oi] += gv * grow[oi];
                               }
                           }
                         });
  }
  return out;
}

// =====================================================================
//  elementwise
// =====================================================================

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const char* name, const Tensor& x, FwdFn fwd, BwdFn dfdx) {
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto os = out.data();
  for (size_t i = 0; i < xs.size(); ++i) os[i] = fwd(xs[i]);
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push(name, out, [x = x, out, dfdx]() mutable {
      auto g = out.grad();
      auto xs = x.data();
      auto dx = x.grad();
      for (size_t i = 0; i < xs.size(); ++i) dx[i] += dfdx(xs[i]) * g[i];
    });
  }
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(who) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] + bs[i];
  if (want_grad(a, b)) {
    out.set_requires_grad(true);
    Tape::current().push("add", out, [a = a, b = b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  check_2d(x, "add_rowwise x");
  if (b.ndim() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_rowwise: bias " + shape_str(b.shape()) + " for " +
                     shape_str(x.shape()));
  }
  const int64_t t = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < n; ++j)
      out.ptr()[i * n + j] = x.ptr()[i * n + j] + b.ptr()[j];
  if (want_grad(x, b)) {
    out.set_requires_grad(true);
    Tape::current().push("add_rowwise", out, [x = x, b = b, out, t, n]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) x.accumulate_grad(g);
      if (b.requires_grad()) {
        auto db = b.grad();
        for (int64_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (int64_t i = 0; i < t; ++i) s += g[i * n + j];
          db[j] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] - bs[i];
  if (want_grad(a, b)) {
    out.set_requires_grad(true);
    Tape::current().push("sub", out, [a = a, b = b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        auto db = b.grad();
        for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (size_t i = 0; i < as.size(); ++i) os[i] = as[i] * bs[i];
  if (want_grad(a, b)) {
    out.set_requires_grad(true);
    Tape::current().push("mul", out, [a = a, b = b, out]() mutable {
      auto g = out.grad();
      auto as = a.data(), bs = b.data();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (size_t i = 0; i < g.size(); ++i) da[i] += bs[i] * g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (size_t i = 0; i < g.size(); ++i) db[i] += as[i] * g[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, float c) {
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto os = out.data();
  for (size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] * c;
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("scale", out, [x = x, out, c]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      for (size_t i = 0; i < g.size(); ++i) dx[i] += c * g[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  Tensor out = Tensor::from_data(shape, {x.data().begin(), x.data().end()});
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("reshape", out, [x = x, out]() mutable {
      x.accumulate_grad(out.grad());
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.shape().size() != 2) {
    throw ShapeError("transpose: need 2-d, got " + shape_str(x.shape()));
  }
  const int64_t r = x.shape()[0];
  const int64_t c = x.shape()[1];
  std::vector<float> flipped(static_cast<size_t>(r * c));
  const float* src = x.ptr();
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      flipped[static_cast<size_t>(j * r + i)] = src[i * c + j];
    }
  }
  Tensor out = Tensor::from_data({c, r}, std::move(flipped));
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("transpose", out, [x = x, out, r, c]() mutable {
      std::vector<float> gx(static_cast<size_t>(r * c));
      const auto gp = out.grad();
      for (int64_t j = 0; j < c; ++j) {
        for (int64_t i = 0; i < r; ++i) {
          gx[static_cast<size_t>(i * c + j)] = gp[static_cast<size_t>(j * r + i)];
        }
      }
      x.accumulate_grad(gx);
    });
  }
  return out;
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](float v) {
        return std::max(v, 0.0f) + std::log1p(std::exp(-std::fabs(v)));
      },
      [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](float v) {
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float v) {
        float s;
        if (v >= 0.0f)
          s = 1.0f / (1.0f + std::exp(-v));
        else {
          const float e = std::exp(v);
          s = e / (1.0f + e);
        }
        return s * (1.0f - s);
      });
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x,
      [](float v) {
        const float u = kGeluC * (v + kGeluA * v * v * v);
        return 0.5f * v * (1.0f + std::tanh(u));
      },
      [](float v) {
        const float u = kGeluC * (v + kGeluA * v * v * v);
        const float th = std::tanh(u);
        const float sech2 = 1.0f - th * th;
        return 0.5f * (1.0f + th) +
               0.5f * v * sech2 * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float v) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](float v) { return std::fabs(v); },
      [](float v) { return v >= 0.0f ? 1.0f : -1.0f; });
}

Tensor exp(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto xs = x.data();
  auto os = out.data();
  for (size_t i = 0; i < xs.size(); ++i) os[i] = std::exp(xs[i]);
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("exp", out, [x = x, out]() mutable {
      auto g = out.grad();
      auto ys = out.data();
      auto dx = x.grad();
      for (size_t i = 0; i < g.size(); ++i) dx[i] += ys[i] * g[i];
    });
  }
  return out;
}

// =====================================================================
//  layer_norm
// =====================================================================

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  check_2d(x, "layer_norm x");
  const int64_t t = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: gamma/beta size " +
                     std::to_string(gamma.numel()) + "/" +
                     std::to_string(beta.numel()) + " for width " +
                     std::to_string(n));
  }
  Tensor out = Tensor::zeros(x.shape());
  Tensor xhat = Tensor::zeros(x.shape());
  std::vector<float> rstd(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) {
    const float* xr = x.ptr() + i * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += xr[j];
    mu /= double(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= double(n);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[static_cast<size_t>(i)] = rs;
    float* hr = xhat.ptr() + i * n;
    float* orow = out.ptr() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      hr[j] = static_cast<float>((xr[j] - mu) * rs);
      orow[j] = gamma.ptr()[j] * hr[j] + beta.ptr()[j];
    }
  }
  if (want_grad(x, gamma, beta)) {
    out.set_requires_grad(true);
    Tape::current().push(
        "layer_norm", out, [x = x, gamma = gamma, beta = beta, out, xhat, rstd, t, n]() mutable {
          const float* g = out.grad().data();
          const float* hr = xhat.ptr();
          if (gamma.requires_grad()) {
            auto dg = gamma.grad();
            for (int64_t j = 0; j < n; ++j) {
              double s = 0.0;
              for (int64_t i = 0; i < t; ++i)
                s += double(g[i * n + j]) * double(hr[i * n + j]);
              dg[j] += static_cast<float>(s);
            }
          }
          if (beta.requires_grad()) {
            auto db = beta.grad();
            for (int64_t j = 0; j < n; ++j) {
              double s = 0.0;
              for (int64_t i = 0; i < t; ++i) s += g[i * n + j];
              db[j] += static_cast<float>(s);
            }
          }
          if (x.requires_grad()) {
            auto dx = x.grad();
            for (int64_t i = 0; i < t; ++i) {
              double m1 = 0.0, m2 = 0.0;
              for (int64_t j = 0; j < n; ++j) {
                const double dh = double(g[i * n + j]) * double(gamma.ptr()[j]);
                m1 += dh;
                m2 += dh * double(hr[i * n + j]);
              }
              m1 /= double(n);
              m2 /= double(n);
              const float rs = rstd[static_cast<size_t>(i)];
              for (int64_t j = 0; j < n; ++j) {
                const double dh = double(g[i * n + j]) * double(gamma.ptr()[j]);
                dx[i * n + j] += static_cast<float>(
                    rs * (dh - m1 - double(hr[i * n + j]) * m2));
              }
            }
          }
        });
  }
  return out;
}

// =====================================================================
//  dropout
// =====================================================================

Tensor dropout(const Tensor& x, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) {
    throw ArgumentError("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  if (p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  Tensor mask = Tensor::zeros(x.shape());
  for (float& v : mask.data()) v = (rng.uniform() >= p) ? keep_scale : 0.0f;
  return mul(x, mask);
}

// =====================================================================
//  softmax / topk_mask
// =====================================================================

Tensor softmax(const Tensor& x, int axis) {
  const int nd = static_cast<int>(x.ndim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw ArgumentError("softmax: axis " + std::to_string(axis) +
                        " out of range for " + shape_str(x.shape()));
  }
  const int64_t lane = x.dim(static_cast<size_t>(axis));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(static_cast<size_t>(i));
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(static_cast<size_t>(i));

  Tensor out = Tensor::zeros(x.shape());
  const float* xp = x.ptr();
  float* op = out.ptr();
  for (int64_t a = 0; a < outer; ++a) {
    for (int64_t c = 0; c < inner; ++c) {
      const int64_t base = a * lane * inner + c;
      float m = kNegInf;
      for (int64_t l = 0; l < lane; ++l) m = std::max(m, xp[base + l * inner]);
      if (m == kNegInf) {
        throw RoutingError("softmax: all entries -inf along axis " +
                           std::to_string(axis) + " (no expert selectable)");
      }
      double z = 0.0;
      for (int64_t l = 0; l < lane; ++l) {
        const float e = std::exp(xp[base + l * inner] - m);
        op[base + l * inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int64_t l = 0; l < lane; ++l)
        op[base + l * inner] = static_cast<float>(op[base + l * inner] * inv);
    }
  }
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("softmax", out, [x = x, out, outer, lane, inner]() mutable {
      const float* g = out.grad().data();
      const float* y = out.ptr();
      auto dx = x.grad();
      for (int64_t a = 0; a < outer; ++a) {
        for (int64_t c = 0; c < inner; ++c) {
          const int64_t base = a * lane * inner + c;
          double dotv = 0.0;
          for (int64_t l = 0; l < lane; ++l)
            dotv += double(g[base + l * inner]) * double(y[base + l * inner]);
          for (int64_t l = 0; l < lane; ++l)
            dx[base + l * inner] += static_cast<float>(
                double(y[base + l * inner]) *
                (double(g[base + l * inner]) - dotv));
        }
      }
    });
  }
  return out;
}

Tensor topk_mask(const Tensor& x, int64_t k) {
  const int64_t n = x.dim(x.ndim() - 1);
  if (k < 1 || k > n) {
    throw ArgumentError("topk_mask: k=" + std::to_string(k) + " for lane size " +
                        std::to_string(n));
  }
  const int64_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<uint8_t> kept(static_cast<size_t>(x.numel()), 0);
  std::vector<int64_t> idx(static_cast<size_t>(n));
  const float* xp = x.ptr();
  float* op = out.ptr();
  for (int64_t ri = 0; ri < rows; ++ri) {
    const float* row = xp + ri * n;
    std::iota(idx.begin(), idx.end(), 0);
    // largest value first; equal values keep the lowest index
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                      [row](int64_t a, int64_t b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return a < b;
                      });
    float* orow = op + ri * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = kNegInf;
    for (int64_t j = 0; j < k; ++j) {
      orow[idx[static_cast<size_t>(j)]] = row[idx[static_cast<size_t>(j)]];
      kept[static_cast<size_t>(ri * n + idx[static_cast<size_t>(j)])] = 1;
    }
  }
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("topk_mask", out, [x = x, out, kept]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (kept[i]) dx[i] += g[i];
    });
  }
  return out;
}

// =====================================================================
//  reductions / losses
// =====================================================================

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("sum", out, [x = x, out]() mutable {
      const float g = out.grad()[0];
      auto dx = x.grad();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& x) {
  check_2d(x, "mean_rows");
  const int64_t t = x.dim(0), n = x.dim(1);
  if (t == 0) throw ArgumentError("mean_rows: empty batch");
  Tensor out = Tensor::zeros({n});
  for (int64_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (int64_t i = 0; i < t; ++i) s += x.ptr()[i * n + j];
    out.ptr()[j] = static_cast<float>(s / double(t));
  }
  if (want_grad(x)) {
    out.set_requires_grad(true);
    Tape::current().push("mean_rows", out, [x = x, out, t, n]() mutable {
      auto g = out.grad();
      auto dx = x.grad();
      const float inv = 1.0f / static_cast<float>(t);
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < n; ++j) dx[i * n + j] += g[j] * inv;
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("dot: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double s = 0.0;
  auto as = a.data(), bs = b.data();
  for (size_t i = 0; i < as.size(); ++i) s += double(as[i]) * double(bs[i]);
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (want_grad(a, b)) {
    out.set_requires_grad(true);
    Tape::current().push("dot", out, [a = a, b = b, out]() mutable {
      const float g = out.grad()[0];
      auto as = a.data(), bs = b.data();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (size_t i = 0; i < da.size(); ++i) da[i] += bs[i] * g;
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (size_t i = 0; i < db.size(); ++i) db[i] += as[i] * g;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index) {
  check_2d(logits, "cross_entropy logits");
  const int64_t t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(t) + " rows");
  }
  int64_t count = 0;
  for (int id : targets) {
    if (id == ignore_index) continue;
    if (id < 0 || id >= v) {
      throw ArgumentError("cross_entropy: target id " + std::to_string(id) +
                          " out of range for vocab " + std::to_string(v));
    }
    ++count;
  }
  if (count == 0) throw ArgumentError("cross_entropy: no scored positions");

  std::vector<float> lse(static_cast<size_t>(t), 0.0f);
  double total = 0.0;
  const float* lp = logits.ptr();
  for (int64_t i = 0; i < t; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore_index) continue;
    const float* row = lp + i * v;
    float m = row[0];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(double(row[j]) - m);
    const float l = static_cast<float>(m + std::log(z));
    lse[static_cast<size_t>(i)] = l;
    total += double(l) - double(row[targets[static_cast<size_t>(i)]]);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / double(count)));
  if (want_grad(logits)) {
    out.set_requires_grad(true);
    Tape::current().push(
        "cross_entropy", out, [logits = logits, out, targets = targets, lse, t, v, count,
                               ignore_index]() mutable {
          const float g = out.grad()[0] / static_cast<float>(count);
          const float* lp = logits.ptr();
          auto dl = logits.grad();
          for (int64_t i = 0; i < t; ++i) {
            const int target = targets[static_cast<size_t>(i)];
            if (target == ignore_index) continue;
            const float* row = lp + i * v;
            const float l = lse[static_cast<size_t>(i)];
            for (int64_t j = 0; j < v; ++j) {
              float p = std::exp(row[j] - l);
              if (j == target) p -= 1.0f;
              dl[i * v + j] += g * p;
            }
          }
        });
  }
  return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  check_same_shape(logits, targets, "bce_with_logits");
  Tensor out = Tensor::zeros(logits.shape());
  auto zs = logits.data();
  auto ys = targets.data();
  auto os = out.data();
  for (size_t i = 0; i < zs.size(); ++i) {
    const float z = zs[i];
    os[i] = std::max(z, 0.0f) - z * ys[i] + std::log1p(std::exp(-std::fabs(z)));
  }
  if (want_grad(logits)) {
    out.set_requires_grad(true);
    Tape::current().push("bce_with_logits", out, [logits = logits, targets = targets, out]() mutable {
      auto g = out.grad();
      auto zs = logits.data();
      auto ys = targets.data();
      auto dz = logits.grad();
      for (size_t i = 0; i < zs.size(); ++i) {
        const float z = zs[i];
        float s;
        if (z >= 0.0f)
          s = 1.0f / (1.0f + std::exp(-z));
        else {
          const float e = std::exp(z);
          s = e / (1.0f + e);
        }
        dz[i] += (s - ys[i]) * g[i];
      }
    });
  }
  return out;
}

// =====================================================================
//  embedding
// =====================================================================

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding table");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t t = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({t, d});
  for (int64_t i = 0; i < t; ++i) {
    const int id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= v) {
      throw ArgumentError("embedding: id " + std::to_string(id) +
                          " out of range for vocab " + std::to_string(v));
    }
    std::copy_n(table.ptr() + id * d, d, out.ptr() + i * d);
  }
  if (want_grad(table)) {
    out.set_requires_grad(true);
    Tape::current().push("embedding", out, [table = table, out, ids = ids, d]() mutable {
      auto g = out.grad();
      auto dt = table.grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        float* dst = dt.data() + int64_t(ids[i]) * d;
        const float* src = g.data() + int64_t(i) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// =====================================================================
//  multihead causal attention
// =====================================================================

Tensor multihead_causal_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, int n_heads) {
  check_2d(q, "attention q");
  check_same_shape(q, k, "attention q/k");
  check_same_shape(q, v, "attention q/v");
  const int64_t t = q.dim(0), d = q.dim(1);
  if (n_heads <= 0 || d % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) +
                     " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const int64_t hd = d / n_heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Tensor out = Tensor::zeros({t, d});
  // probs cached per head for backward: [h, t, t]
  Tensor probs = Tensor::zeros({n_heads, t, t});
  const float* qp = q.ptr();
  const float* kp = k.ptr();
  const float* vp = v.ptr();
  float* op = out.ptr();
  float* pp = probs.ptr();
  for (int h = 0; h < n_heads; ++h) {
    const int64_t off = int64_t(h) * hd;
    float* ph = pp + int64_t(h) * t * t;
    for (int64_t i = 0; i < t; ++i) {
      // scores for j <= i
      float m = kNegInf;
      std::vector<float> s(static_cast<size_t>(i + 1));
      for (int64_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        const float* qr = qp + i * d + off;
        const float* kr = kp + j * d + off;
        for (int64_t x = 0; x < hd; ++x) acc += double(qr[x]) * double(kr[x]);
        s[static_cast<size_t>(j)] = static_cast<float>(acc) * att_scale;
        m = std::max(m, s[static_cast<size_t>(j)]);
      }
      double z = 0.0;
      for (int64_t j = 0; j <= i; ++j) {
        const float e = std::exp(s[static_cast<size_t>(j)] - m);
        ph[i * t + j] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int64_t j = 0; j <= i; ++j)
        ph[i * t + j] = static_cast<float>(ph[i * t + j] * inv);
      // weighted value sum
      float* orow = op + i * d + off;
      for (int64_t x = 0; x < hd; ++x) {
        double acc = 0.0;
        for (int64_t j = 0; j <= i; ++j)
          acc += double(ph[i * t + j]) * double(vp[j * d + off + x]);
        orow[x] = static_cast<float>(acc);
      }
    }
  }

  if (want_grad(q, k, v)) {
    out.set_requires_grad(true);
    Tape::current().push(
        "mh_causal_attention", out,
        [q = q, k = k, v = v, out, probs, n_heads, t, d, hd, att_scale]() mutable {
          const float* g = out.grad().data();
          const float* qp = q.ptr();
          const float* kp = k.ptr();
          const float* vp = v.ptr();
          const float* pp = probs.ptr();
          float* dq = q.requires_grad() ? q.grad().data() : nullptr;
          float* dk = k.requires_grad() ? k.grad().data() : nullptr;
          float* dv = v.requires_grad() ? v.grad().data() : nullptr;
          std::vector<float> ds(static_cast<size_t>(t * t));
          for (int h = 0; h < n_heads; ++h) {
            const int64_t off = int64_t(h) * hd;
            const float* ph = pp + int64_t(h) * t * t;
            std::fill(ds.begin(), ds.end(), 0.0f);
            for (int64_t i = 0; i < t; ++i) {
              // dP then dS for row i
              double rowdot = 0.0;
              for (int64_t j = 0; j <= i; ++j) {
                double acc = 0.0;
                const float* grow = g + i * d + off;
                const float* vr = vp + j * d + off;
                for (int64_t x = 0; x < hd; ++x)
                  acc += double(grow[x]) * double(vr[x]);
                ds[static_cast<size_t>(i * t + j)] = static_cast<float>(acc);
                rowdot += acc * double(ph[i * t + j]);
              }
              for (int64_t j = 0; j <= i; ++j) {
                const size_t idx = static_cast<size_t>(i * t + j);
                ds[idx] = static_cast<float>(
                    double(ph[i * t + j]) * (double(ds[idx]) - rowdot));
              }
            }
            if (dv) {
              for (int64_t j = 0; j < t; ++j) {
                float* dvrow = dv + j * d + off;
                for (int64_t x = 0; x < hd; ++x) {
                  double acc = 0.0;
                  for (int64_t i = j; i < t; ++i)
                    acc += double(ph[i * t + j]) * double(g[i * d + off + x]);
                  dvrow[x] += static_cast<float>(acc);
                }
              }
            }
            if (dq) {
              for (int64_t i = 0; i < t; ++i) {
                float* dqrow = dq + i * d + off;
                for (int64_t x = 0; x < hd; ++x) {
                  double acc = 0.0;
                  for (int64_t j = 0; j <= i; ++j)
                    acc += double(ds[static_cast<size_t>(i * t + j)]) *
                           double(kp[j * d + off + x]);
                  dqrow[x] += static_cast<float>(acc) * att_scale;
                }
              }
            }
            if (dk) {
              for (int64_t j = 0; j < t; ++j) {
                float* dkrow = dk + j * d + off;
                for (int64_t x = 0; x < hd; ++x) {
                  double acc = 0.0;
                  for (int64_t i = j; i < t; ++i)
                    acc += double(ds[static_cast<size_t>(i * t + j)]) *
                           double(qp[i * d + off + x]);
                  dkrow[x] += static_cast<float>(acc) * att_scale;
                }
              }
            }
          }
        });
  }
  return out;
}

}  // namespace ops
}  // namespace moestack
