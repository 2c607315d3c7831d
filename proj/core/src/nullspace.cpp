#include "moestack/nullspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "moestack/io.hpp"
#include "moestack/ops.hpp"

namespace moestack {

namespace {

using dvec = std::vector<double>;

// ==== small dense f64 linear algebra ====

dvec to_f64(const Tensor& t) {
  dvec out(static_cast<size_t>(t.numel()));
  auto s = t.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = double(s[i]);
  return out;
}

// c[m,n] = a[m,k] b[k,n]
dvec mm(const dvec& a, int64_t m, int64_t k, const dvec& b, int64_t n) {
  dvec c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) {
      const double av = a[size_t(i * k + p)];
      if (av == 0.0) continue;
      for (int64_t j = 0; j < n; ++j)
        c[size_t(i * n + j)] += av * b[size_t(p * n + j)];
    }
  return c;
}

// c[k,n] = aᵀ[k,m] b[m,n] for a stored [m,k]
dvec mtm(const dvec& a, int64_t m, int64_t k, const dvec& b, int64_t n) {
  dvec c(static_cast<size_t>(k * n), 0.0);
  for (int64_t p = 0; p < m; ++p)
    for (int64_t i = 0; i < k; ++i) {
      const double av = a[size_t(p * k + i)];
      if (av == 0.0) continue;
      for (int64_t j = 0; j < n; ++j)
        c[size_t(i * n + j)] += av * b[size_t(p * n + j)];
    }
  return c;
}

// Cyclic Jacobi eigensolve of a symmetric matrix. On return the diagonal
// of a holds eigenvalues and the columns of v the matching eigenvectors.
void jacobi_eig(dvec& a, dvec& v, int64_t h) {
  v.assign(static_cast<size_t>(h * h), 0.0);
  for (int64_t i = 0; i < h; ++i) v[size_t(i * h + i)] = 1.0;
  auto off_norm = [&] {
    double s = 0.0;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = i + 1; j < h; ++j) {
        const double x = a[size_t(i * h + j)];
        s += 2.0 * x * x;
      }
    return std::sqrt(s);
  };
  double total = 0.0;
  for (double x : a) total += x * x;
  const double stop = 1e-14 * std::max(std::sqrt(total), 1e-300);

  for (int sweep = 0; sweep < 64 && off_norm() > stop; ++sweep) {
    for (int64_t p = 0; p < h; ++p) {
      for (int64_t q = p + 1; q < h; ++q) {
        const double apq = a[size_t(p * h + q)];
        if (std::abs(apq) <= stop / double(h)) continue;
        const double app = a[size_t(p * h + p)];
        const double aqq = a[size_t(q * h + q)];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int64_t i = 0; i < h; ++i) {
          const double aip = a[size_t(i * h + p)];
          const double aiq = a[size_t(i * h + q)];
          a[size_t(i * h + p)] = c * aip - s * aiq;
          a[size_t(i * h + q)] = s * aip + c * aiq;
        }
        for (int64_t j = 0; j < h; ++j) {
          const double apj = a[size_t(p * h + j)];
          const double aqj = a[size_t(q * h + j)];
          a[size_t(p * h + j)] = c * apj - s * aqj;
          a[size_t(q * h + j)] = s * apj + c * aqj;
        }
        for (int64_t i = 0; i < h; ++i) {
          const double vip = v[size_t(i * h + p)];
          const double viq = v[size_t(i * h + q)];
          v[size_t(i * h + p)] = c * vip - s * viq;
          v[size_t(i * h + q)] = s * vip + c * viq;
        }
      }
    }
  }
}

// Modified Gram-Schmidt over the columns of a [rows, cols] matrix, run
// twice for stability. Near-dependent columns are dropped; returns the
// surviving column count with the matrix compacted in place.
int64_t orthonormalize_columns(dvec& m, int64_t rows, int64_t cols) {
  double max_norm = 0.0;
  for (int64_t j = 0; j < cols; ++j) {
    double n = 0.0;
    for (int64_t i = 0; i < rows; ++i) {
      const double x = m[size_t(i * cols + j)];
      n += x * x;
    }
    max_norm = std::max(max_norm, std::sqrt(n));
  }
  const double drop = std::max(1e-12 * max_norm, 1e-300);

  std::vector<int64_t> kept;
  for (int pass = 0; pass < 2; ++pass) {
    kept.clear();
    for (int64_t j = 0; j < cols; ++j) {
      for (int64_t prev : kept) {
        double dot = 0.0;
        for (int64_t i = 0; i < rows; ++i)
          dot += m[size_t(i * cols + prev)] * m[size_t(i * cols + j)];
        for (int64_t i = 0; i < rows; ++i)
          m[size_t(i * cols + j)] -= dot * m[size_t(i * cols + prev)];
      }
      double n = 0.0;
      for (int64_t i = 0; i < rows; ++i) {
        const double x = m[size_t(i * cols + j)];
        n += x * x;
      }
      n = std::sqrt(n);
      if (n < drop) continue;
      for (int64_t i = 0; i < rows; ++i) m[size_t(i * cols + j)] /= n;
      kept.push_back(j);
    }
  }
  // compact surviving columns to the front
  dvec out(static_cast<size_t>(rows * int64_t(kept.size())));
  for (int64_t i = 0; i < rows; ++i)
    for (size_t j = 0; j < kept.size(); ++j)
      out[size_t(i) * kept.size() + j] = m[size_t(i * cols + kept[j])];
  m = std::move(out);
  return int64_t(kept.size());
}

SvdResult top_k_from_gram(dvec gram, int64_t h, int k) {
  dvec evec;
  jacobi_eig(gram, evec, h);
  std::vector<int64_t> order(static_cast<size_t>(h));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return gram[size_t(a * h + a)] > gram[size_t(b * h + b)];
  });
  SvdResult r;
  r.v = Tensor::zeros({h, k});
  float* vp = r.v.ptr();
  for (int j = 0; j < k; ++j) {
    const int64_t col = order[size_t(j)];
    r.singular_values.push_back(
        float(std::sqrt(std::max(0.0, gram[size_t(col * h + col)]))));
    for (int64_t i = 0; i < h; ++i)
      vp[i * k + j] = float(evec[size_t(i * h + col)]);
  }
  return r;
}

}  // namespace

SvdResult exact_svd_truncated(const Tensor& d, int k) {
  if (d.ndim() != 2) throw ShapeError("svd expects a 2-d matrix");
  const int64_t n = d.dim(0), h = d.dim(1);
  if (k < 1 || k > std::min(n, h)) {
    throw ArgumentError("svd k=" + std::to_string(k) +
                        " out of range for a " + std::to_string(n) + "x" +
                        std::to_string(h) + " matrix");
  }
  const dvec dd = to_f64(d);
  return top_k_from_gram(mtm(dd, n, h, dd, h), h, k);
}

SvdResult randomized_svd(const Tensor& d, int k, int oversample,
                         int power_iters, uint64_t seed) {
  if (d.ndim() != 2) throw ShapeError("svd expects a 2-d matrix");
  const int64_t n = d.dim(0), h = d.dim(1);
  if (k < 1 || k > std::min(n, h)) {
    throw ArgumentError("svd k=" + std::to_string(k) +
                        " out of range for a " + std::to_string(n) + "x" +
                        std::to_string(h) + " matrix");
  }
  if (n <= 2 * int64_t(k)) return exact_svd_truncated(d, k);

  const dvec dd = to_f64(d);
  int64_t l = std::min<int64_t>(k + oversample, std::min(n, h));

  Rng rng(seed);
  dvec omega(static_cast<size_t>(h * l));
  for (auto& x : omega) x = rng.normal();

  dvec q = mm(dd, n, h, omega, l);  // [n, l]
  l = orthonormalize_columns(q, n, l);
  for (int it = 0; it < power_iters; ++it) {
    dvec z = mtm(dd, n, h, q, l);  // [h, l]
    l = orthonormalize_columns(z, h, l);
    q = mm(dd, n, h, z, l);  // [n, l]
    l = orthonormalize_columns(q, n, l);
  }
  if (l < int64_t(k)) {
    // the sketch collapsed (rank-deficient input); the exact path handles it
    return exact_svd_truncated(d, k);
  }

  const dvec b = mtm(q, n, l, dd, h);  // [l, h] = Qᵀ D
  // eigensolve the small B Bᵀ, then map back: v_i = Bᵀ u_i / σ_i
  dvec bbt(static_cast<size_t>(l * l), 0.0);
  for (int64_t i = 0; i < l; ++i)
    for (int64_t j = 0; j < l; ++j) {
      double s = 0.0;
      for (int64_t c = 0; c < h; ++c)
        s += b[size_t(i * h + c)] * b[size_t(j * h + c)];
      bbt[size_t(i * l + j)] = s;
    }
  dvec u;
  jacobi_eig(bbt, u, l);
  std::vector<int64_t> order(static_cast<size_t>(l));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t c) {
    return bbt[size_t(a * l + a)] > bbt[size_t(c * l + c)];
  });

  SvdResult r;
  r.v = Tensor::zeros({h, k});
  float* vp = r.v.ptr();
  for (int j = 0; j < k; ++j) {
    const int64_t col = order[size_t(j)];
    const double sigma =
        std::sqrt(std::max(0.0, bbt[size_t(col * l + col)]));
    r.singular_values.push_back(float(sigma));
    if (sigma <= 0.0) continue;
    for (int64_t row = 0; row < h; ++row) {
      double s = 0.0;
      for (int64_t i = 0; i < l; ++i)
        s += b[size_t(i * h + row)] * u[size_t(i * l + col)];
      vp[row * k + j] = float(s / sigma);
    }
  }
  return r;
}

Projector build_projector(const Tensor& v, const std::string& site,
                          int n_samples, std::vector<float> singular_values) {
  if (v.ndim() != 2) throw ShapeError("projector basis must be 2-d");
  const int64_t h = v.dim(0), k = v.dim(1);
  const dvec vv = to_f64(v);
  // Gram deviation from identity
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (int64_t r = 0; r < h; ++r)
        dot += vv[size_t(r * k + i)] * vv[size_t(r * k + j)];
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(dot - want) > 1e-4) {
        throw NumericError("projector basis for site '" + site +
                           "' is not orthonormal (gram deviation " +
                           std::to_string(std::abs(dot - want)) + ")");
      }
    }

  Projector p;
  p.site = site;
  p.v = v;
  p.n_samples = n_samples;
  p.k_dirs = int(k);
  p.singular_values = std::move(singular_values);
  p.p = Tensor::zeros({h, h});
  float* pp = p.p.ptr();
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < h; ++j) {
      double s = 0.0;
      for (int64_t c = 0; c < k; ++c)
        s += vv[size_t(i * k + c)] * vv[size_t(j * k + c)];
      pp[i * h + j] = float(s);
    }
  return p;
}

Tensor project(const Tensor& delta, const Tensor& p) {
  if (p.ndim() != 2 || p.dim(0) != p.dim(1)) {
    throw ShapeError("projector must be square");
  }
  return ops::sub(delta, ops::matmul(delta, p));
}

std::map<std::string, DeltaMatrix> collect_deltas(
    BaseModel& model, const std::vector<EncodedSample>& prev_val,
    int n_samples, uint64_t seed) {
  const auto domains = model.frozen_domains();
  if (domains.empty()) {
    throw StateError("collect_deltas: model has no frozen stacks");
  }
  if (n_samples < 1) throw ArgumentError("collect_deltas: n_samples < 1");

  std::map<std::string, float> all_on;
  for (const auto& d : domains) all_on[d] = 1.0f;
  model.set_domain_weights(all_on);

  const int64_t window = model.config().max_seq_len;
  std::vector<std::pair<int, int>> positions;  // (example, token)
  for (size_t i = 0; i < prev_val.size(); ++i) {
    const int64_t t =
        std::min<int64_t>(int64_t(prev_val[i].input_ids.size()), window);
    for (int64_t pos = 0; pos < t; ++pos)
      positions.emplace_back(int(i), int(pos));
  }
  if (int64_t(positions.size()) < n_samples) {
    throw DataError("collect_deltas: " + std::to_string(positions.size()) +
                    " token positions available, need " +
                    std::to_string(n_samples));
  }
  Rng rng(seed);
  for (int j = 0; j < n_samples; ++j) {
    const size_t pick =
        size_t(j) + size_t(rng.below(positions.size() - size_t(j)));
    std::swap(positions[size_t(j)], positions[pick]);
  }
  positions.resize(size_t(n_samples));

  // row index in D = selection order, grouped per example for the forwards
  std::map<int, std::vector<std::pair<int, int>>> by_example;  // (token, row)
  for (int r = 0; r < n_samples; ++r)
    by_example[positions[size_t(r)].first].emplace_back(
        positions[size_t(r)].second, r);

  const auto sites = model.injection_sites();
  std::map<std::string, std::vector<float>> rows;
  for (const auto& s : sites)
    rows[s.full_name].assign(size_t(n_samples) * size_t(s.d_out), 0.0f);

  NoGradGuard ng;
  for (const auto& [ei, picks] : by_example) {
    ForwardRecords rec;
    (void)model.forward(prev_val[size_t(ei)].input_ids, /*train=*/false,
                        nullptr, /*capture_hidden=*/false, &rec);
    for (size_t si = 0; si < sites.size(); ++si) {
      const Tensor& sum = rec.sites[si].frozen_delta_sum;
      if (!sum.defined()) continue;  // no frozen contribution at this site
      auto src = sum.data();
      const int64_t width = sites[si].d_out;
      auto& dst = rows[sites[si].full_name];
      for (const auto& [tok, row] : picks) {
        std::copy_n(src.data() + int64_t(tok) * width, width,
                    dst.data() + int64_t(row) * width);
      }
    }
  }

  std::map<std::string, DeltaMatrix> out;
  for (const auto& s : sites) {
    DeltaMatrix dm;
    dm.site = s.full_name;
    dm.d = Tensor::from_data({n_samples, s.d_out}, rows[s.full_name]);
    dm.source_domains.assign(domains.begin(), domains.end());
    out.emplace(s.full_name, std::move(dm));
  }
  return out;
}

ProjectorSet build_all_projectors(BaseModel& model,
                                  const std::vector<EncodedSample>& prev_val,
                                  int k_dirs, int n_samples, uint64_t seed) {
  if (k_dirs < 1) throw ArgumentError("k_dirs < 1");
  auto deltas = collect_deltas(model, prev_val, n_samples, seed);

  ProjectorSet set;
  set.k_dirs = k_dirs;
  set.n_samples = n_samples;
  set.seed = seed;
  for (auto& [site, dm] : deltas) {
    double norm = 0.0;
    for (float x : dm.d.data()) norm += double(x) * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) {
      std::fprintf(stderr,
                   "warning: site %s frozen delta is numerically zero "
                   "(|D|=%.3e); skipping its projector\n",
                   site.c_str(), norm);
      set.skipped_sites.push_back(site);
      continue;
    }
    const int k =
        int(std::min<int64_t>(k_dirs, std::min(dm.d.dim(0), dm.d.dim(1))));
    SvdResult svd = randomized_svd(dm.d, k, 8, 2,
                                   seed ^ fnv1a(site.data(), site.size()));
    set.by_site.emplace(
        site, build_projector(svd.v, site, n_samples,
                              std::move(svd.singular_values)));
  }
  return set;
}

void install_projectors(BaseModel& model, const ProjectorSet& set) {
  for (const auto& s : model.injection_sites()) {
    auto it = set.by_site.find(s.full_name);
    if (it == set.by_site.end()) continue;
    model.site(s.layer, s.site).set_projector(it->second.p);
  }
}

void clear_projectors(BaseModel& model) {
  for (size_t i = 0; i < model.n_sites(); ++i)
    model.site(i).clear_projector();
}

void save_projectors(const std::string& path, const ProjectorSet& set) {
  nlohmann::json sites = nlohmann::json::array();
  std::vector<float> payload;
  for (const auto& [name, p] : set.by_site) {
    sites.push_back({{"site", name},
                     {"h", p.v.dim(0)},
                     {"k", p.v.dim(1)},
                     {"singular_values", p.singular_values}});
    payload.insert(payload.end(), p.v.data().begin(), p.v.data().end());
  }
  nlohmann::json header = {
      {"kind", "projectors"},
      {"format_version", 1},
      {"k_dirs", set.k_dirs},
      {"n_samples", set.n_samples},
      {"seed", set.seed},
      {"skipped_sites", set.skipped_sites},
      {"sites", sites},
      {"content_hash",
       hash_hex(io::payload_hash(
           std::span<const float>(payload.data(), payload.size())))},
  };
  io::write_headered_atomic(path, header, payload);
}

ProjectorSet load_projectors(const std::string& path) {
  auto f = io::read_headered(path);
  if (f.header.value("kind", "") != "projectors") {
    throw FormatError("not a projector file: " + path);
  }
  ProjectorSet set;
  set.k_dirs = f.header.value("k_dirs", 0);
  set.n_samples = f.header.value("n_samples", 0);
  set.seed = f.header.value("seed", uint64_t(0));
  set.skipped_sites =
      f.header.value("skipped_sites", std::vector<std::string>{});

  size_t expect = 0;
  for (const auto& js : f.header.at("sites")) {
    expect += size_t(js.at("h").get<int64_t>() * js.at("k").get<int64_t>());
  }
  if (f.payload.size() != expect) {
    throw FormatError("projector payload length mismatch in " + path);
  }
  const std::string want = f.header.value("content_hash", "");
  if (!want.empty() &&
      want != hash_hex(io::payload_hash(std::span<const float>(
                  f.payload.data(), f.payload.size())))) {
    throw CorruptionError("projector payload hash mismatch in " + path);
  }

  size_t off = 0;
  for (const auto& js : f.header.at("sites")) {
    const int64_t h = js.at("h").get<int64_t>();
    const int64_t k = js.at("k").get<int64_t>();
    std::vector<float> v(f.payload.begin() + int64_t(off),
                         f.payload.begin() + int64_t(off + size_t(h * k)));
    off += size_t(h * k);
    const std::string site = js.at("site").get<std::string>();
    Projector p = build_projector(
        Tensor::from_data({h, k}, v), site, set.n_samples,
        js.value("singular_values", std::vector<float>{}));
    set.by_site.emplace(site, std::move(p));
  }
  return set;
}

double capacity_fraction(int k_dirs, int64_t h) {
  if (h <= 0) throw ArgumentError("capacity_fraction: h <= 0");
  return double(k_dirs) / double(h);
}

OrthogonalityReport orthogonality_report(
    const std::map<std::string, ProjectorSet>& by_domain) {
  OrthogonalityReport rep;
  for (const auto& [domain, set] : by_domain) {
    double cap = 0.0;
    int64_t n = 0;
    for (const auto& [site, p] : set.by_site) {
      rep.spectra[domain][site] = p.singular_values;
      cap += capacity_fraction(p.k_dirs, p.v.dim(0));
      ++n;
    }
    rep.capacity[domain] = n > 0 ? cap / double(n) : 0.0;
  }

  for (auto a = by_domain.begin(); a != by_domain.end(); ++a) {
    for (auto b = std::next(a); b != by_domain.end(); ++b) {
      for (const auto& [site, pa] : a->second.by_site) {
        auto it = b->second.by_site.find(site);
        if (it == b->second.by_site.end()) continue;
        const Projector& pb = it->second;
        if (pa.v.dim(0) != pb.v.dim(0)) continue;
        const int64_t h = pa.v.dim(0);
        const int64_t ka = std::min<int64_t>(3, pa.v.dim(1));
        const int64_t kb = std::min<int64_t>(3, pb.v.dim(1));
        OrthogonalityReport::CrossEntry e;
        e.site = site;
        e.domain_a = a->first;
        e.domain_b = b->first;
        auto va = pa.v.data();
        auto vb = pb.v.data();
        for (int64_t i = 0; i < ka; ++i)
          for (int64_t j = 0; j < kb; ++j) {
            double dot = 0.0;
            for (int64_t r = 0; r < h; ++r)
              dot += double(va[r * pa.v.dim(1) + i]) *
                     double(vb[r * pb.v.dim(1) + j]);
            const float c = float(std::clamp(dot, -1.0, 1.0));
            e.cosines.push_back(c);
            e.max_abs_cos = std::max(e.max_abs_cos, std::abs(c));
          }
        rep.cross.push_back(std::move(e));
      }
    }
  }
  return rep;
}

}  // namespace moestack
