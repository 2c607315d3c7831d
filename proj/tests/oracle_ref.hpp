#pragma once

// Double-precision reference implementations used as test oracles.
//
// Everything here is written straight from the defining formulas and shares
// no code with the library kernels. Gradient checks run central differences
// against these references, so the library forward and backward passes are
// validated by an independent computation path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "moestack/tensor.hpp"

namespace refmath {

using dvec = std::vector<double>;

inline dvec to_dvec(const moestack::Tensor& t) {
  auto s = t.data();
  return dvec(s.begin(), s.end());
}

inline void fill_tensor(moestack::Tensor& t, const dvec& v) {
  auto s = t.data();
  for (size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(v[i]);
}

// ---- forward references ----

inline dvec matmul(const dvec& a, int64_t m, int64_t k, const dvec& b,
                   int64_t n) {
  dvec c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// mid[t,e,r] = sum_f x[t,f] A[e,r,f];  out[t,e,o] = s * sum_r mid B[e,o,r]
inline dvec batched_contract(const dvec& x, int64_t t, int64_t f, const dvec& a,
                             int64_t e, int64_t r, const dvec& b, int64_t o,
                             double scale) {
  dvec out(static_cast<size_t>(t * e * o), 0.0);
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t ei = 0; ei < e; ++ei)
      for (int64_t oi = 0; oi < o; ++oi) {
        double s = 0.0;
        for (int64_t ri = 0; ri < r; ++ri) {
          double mid = 0.0;
          for (int64_t fi = 0; fi < f; ++fi)
            mid += x[ti * f + fi] * a[(ei * r + ri) * f + fi];
          s += mid * b[(ei * o + oi) * r + ri];
        }
        out[(ti * e + ei) * o + oi] = s * scale;
      }
  return out;
}

inline dvec gate_combine(const dvec& g, int64_t t, int64_t e, const dvec& x,
                         int64_t o) {
  dvec out(static_cast<size_t>(t * o), 0.0);
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t oi = 0; oi < o; ++oi) {
      double s = 0.0;
      for (int64_t ei = 0; ei < e; ++ei)
        s += g[ti * e + ei] * x[(ti * e + ei) * o + oi];
      out[ti * o + oi] = s;
    }
  return out;
}

inline dvec softmax_rows(const dvec& x, int64_t rows, int64_t lane) {
  dvec out(x.size(), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t l = 0; l < lane; ++l) m = std::max(m, x[r * lane + l]);
    double z = 0.0;
    for (int64_t l = 0; l < lane; ++l) z += std::exp(x[r * lane + l] - m);
    for (int64_t l = 0; l < lane; ++l)
      out[r * lane + l] = std::exp(x[r * lane + l] - m) / z;
  }
  return out;
}

// indices of the k largest entries; ties resolved toward the lower index
inline std::vector<int64_t> topk_indices(const dvec& row, int64_t k) {
  std::vector<int64_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

inline dvec layer_norm(const dvec& x, int64_t t, int64_t n, const dvec& gamma,
                       const dvec& beta, double eps) {
  dvec out(x.size(), 0.0);
  for (int64_t i = 0; i < t; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += x[i * n + j];
    mu /= double(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = x[i * n + j] - mu;
      var += d * d;
    }
    var /= double(n);
    for (int64_t j = 0; j < n; ++j)
      out[i * n + j] =
          gamma[static_cast<size_t>(j)] * (x[i * n + j] - mu) / std::sqrt(var + eps) +
          beta[static_cast<size_t>(j)];
  }
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) *
                                    (v + 0.044715 * v * v * v)));
}

inline double softplus(double v) { return std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0); }

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline double cross_entropy(const dvec& logits, int64_t t, int64_t v,
                            const std::vector<int>& targets, int ignore) {
  double total = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < t; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore) continue;
    double m = logits[i * v];
    for (int64_t j = 1; j < v; ++j) m = std::max(m, logits[i * v + j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(logits[i * v + j] - m);
    total += m + std::log(z) - logits[i * v + targets[static_cast<size_t>(i)]];
    ++count;
  }
  return total / double(count);
}

inline double bce_with_logits(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::fabs(z)));
}

inline dvec causal_attention(const dvec& q, const dvec& k, const dvec& v,
                             int64_t t, int64_t d, int n_heads) {
  const int64_t hd = d / n_heads;
  const double sc = 1.0 / std::sqrt(double(hd));
  dvec out(static_cast<size_t>(t * d), 0.0);
  for (int h = 0; h < n_heads; ++h) {
    const int64_t off = int64_t(h) * hd;
    for (int64_t i = 0; i < t; ++i) {
      dvec s(static_cast<size_t>(i + 1), 0.0);
      for (int64_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (int64_t x = 0; x < hd; ++x)
          acc += q[i * d + off + x] * k[j * d + off + x];
        s[static_cast<size_t>(j)] = acc * sc;
      }
      const double m = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double sv : s) z += std::exp(sv - m);
      for (int64_t j = 0; j <= i; ++j) {
        const double p = std::exp(s[static_cast<size_t>(j)] - m) / z;
        for (int64_t x = 0; x < hd; ++x)
          out[i * d + off + x] += p * v[j * d + off + x];
      }
    }
  }
  return out;
}

// ---- finite differences ----

// Central-difference gradient of a scalar function over a flat vector.
inline dvec fd_grad(const std::function<double(const dvec&)>& f, dvec x,
                    double h = 1e-5) {
  dvec g(x.size(), 0.0);
  for (size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const dvec& got, const dvec& want,
                          double floor = 1e-4) {
  double worst = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    const double denom =
        std::max({floor, std::fabs(got[i]), std::fabs(want[i])});
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

inline dvec grad_of(const moestack::Tensor& t) {
  auto g = t.grad();
  return dvec(g.begin(), g.end());
}

}  // namespace refmath
