#pragma once

#include <map>
#include <string>
#include <vector>

#include "moestack/data.hpp"
#include "moestack/model.hpp"

namespace moestack {

// Rows are token-position samples of the frozen stacks' summed output
// delta at one site, captured in eval mode with every domain weight at 1.
struct DeltaMatrix {
  std::string site;
  Tensor d;  // [n_samples, h]
  std::vector<std::string> source_domains;
};

// Protected subspace for one site: V holds the top principal directions of
// the frozen-stack deltas, P = V Vᵀ projects onto their span.
struct Projector {
  std::string site;
  Tensor v;  // [h, k]
  Tensor p;  // [h, h]
  std::vector<float> singular_values;
  int n_samples = 0;
  int k_dirs = 0;
};

struct SvdResult {
  Tensor v;  // [h, k] right singular vectors, orthonormal columns
  std::vector<float> singular_values;  // non-increasing, length k
};

// Right singular vectors via an f64 Jacobi eigensolve of DᵀD. The ground
// truth the randomized path is tested against.
SvdResult exact_svd_truncated(const Tensor& d, int k);

// Sketch-and-solve when n > 2k (Gaussian test matrix, power iterations,
// small exact solve); falls back to the exact path otherwise.
SvdResult randomized_svd(const Tensor& d, int k, int oversample = 8,
                         int power_iters = 2, uint64_t seed = 0);

// P = V Vᵀ. Rejects V whose Gram matrix strays from identity by > 1e-4.
Projector build_projector(const Tensor& v, const std::string& site = "",
                          int n_samples = 0,
                          std::vector<float> singular_values = {});

// delta - delta P for [t, h] inputs (the same composition StackedLayer
// applies inside the graph; exposed for analysis and tests)
Tensor project(const Tensor& delta, const Tensor& p);

// Samples n_samples token positions uniformly (seeded, without
// replacement) across the given examples and records each site's frozen
// delta row at those positions. All domain weights are forced to 1 for
// the collection and left there.
std::map<std::string, DeltaMatrix> collect_deltas(
    BaseModel& model, const std::vector<EncodedSample>& prev_val,
    int n_samples, uint64_t seed);

struct ProjectorSet {
  std::map<std::string, Projector> by_site;
  std::vector<std::string> skipped_sites;  // near-zero delta, no projector
  int k_dirs = 0;
  int n_samples = 0;
  uint64_t seed = 0;
};

// collect_deltas + randomized_svd + build_projector for every site.
// Sites whose delta norm is below 1e-8 are skipped (projecting against
// noise would hurt) and listed in skipped_sites.
ProjectorSet build_all_projectors(BaseModel& model,
                                  const std::vector<EncodedSample>& prev_val,
                                  int k_dirs, int n_samples, uint64_t seed);

void install_projectors(BaseModel& model, const ProjectorSet& set);
void clear_projectors(BaseModel& model);

// header JSON (site list, dims, spectra, sampling seed) + concatenated V
// payload; P is rebuilt from V on load
void save_projectors(const std::string& path, const ProjectorSet& set);
ProjectorSet load_projectors(const std::string& path);

struct OrthogonalityReport {
  struct CrossEntry {
    std::string site;
    std::string domain_a, domain_b;
    std::vector<float> cosines;  // 3x3 row-major, top-3 dirs of each side
    float max_abs_cos = 0.0f;
  };
  std::vector<CrossEntry> cross;
  // domain -> site -> singular spectrum
  std::map<std::string, std::map<std::string, std::vector<float>>> spectra;
  std::map<std::string, double> capacity;  // domain -> k_dirs / h
};

double capacity_fraction(int k_dirs, int64_t h);

OrthogonalityReport orthogonality_report(
    const std::map<std::string, ProjectorSet>& by_domain);

}  // namespace moestack
