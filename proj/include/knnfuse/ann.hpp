#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <queue>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "knnfuse/errors.hpp"
#include "knnfuse/io.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/rng.hpp"
#include "knnfuse/threading.hpp"

namespace knnfuse {

// One retrieval answer. Ordering is (distance, record_id) ascending, which
// fixes every tie-break in the module.
struct Neighbor {
  double distance = 0.0;
  uint64_t record_id = 0;

  friend bool operator<(const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.record_id < b.record_id;
  }
  friend bool operator==(const Neighbor& a, const Neighbor& b) {
    return a.distance == b.distance && a.record_id == b.record_id;
  }
};

// Squared L2 with double accumulation. Never square-rooted.
inline double squared_l2(const float* a, const float* b, size_t d) {
  double acc = 0.0;
  for (size_t i = 0; i < d; ++i) {
    double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

inline double squared_l2(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("squared_l2: dimension mismatch");
  return squared_l2(a.data(), b.data(), a.size());
}

// ---------------------------------------------------------------------------
// Exact oracle.
// ---------------------------------------------------------------------------

class ExactIndex {
 public:
  explicit ExactIndex(const ExternalMemory& mem) : mem_(&mem) {}

  const ExternalMemory& memory() const { return *mem_; }

  std::vector<Neighbor> knn(const std::vector<float>& query, size_t m) const {
    if (m < 1) throw InvalidArgumentError("knn_exact: m must be >= 1");
    if (query.size() != mem_->d_key()) {
      throw ShapeError("knn_exact: query dim " + std::to_string(query.size()) +
                       " != d_key " + std::to_string(mem_->d_key()));
    }
    const auto& recs = mem_->records();
    const size_t n = recs.size();
    if (n == 0) return {};

    const size_t n_chunks = (n + kChunk - 1) / kChunk;
    std::vector<std::vector<Neighbor>> partial(n_chunks);
    parallel_for(n_chunks, [&](size_t c) {
      size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
      std::vector<Neighbor>& heap = partial[c];  // max-heap of the m best
      heap.reserve(std::min(m, hi - lo) + 1);
      for (size_t i = lo; i < hi; ++i) {
        Neighbor cand{squared_l2(query.data(), recs[i].key.data(), query.size()), recs[i].id};
        if (heap.size() < m) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end());
        } else if (cand < heap.front()) {
          std::pop_heap(heap.begin(), heap.end());
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end());
        }
      }
    });

    std::vector<Neighbor> all;
    for (auto& p : partial) all.insert(all.end(), p.begin(), p.end());
    std::sort(all.begin(), all.end());
    if (all.size() > m) all.resize(m);
    return all;
  }

 private:
  static constexpr size_t kChunk = 8192;
  const ExternalMemory* mem_;
};

inline std::vector<Neighbor> knn_exact(const ExactIndex& index, const std::vector<float>& query,
                                       size_t m) {
  return index.knn(query, m);
}

// ---------------------------------------------------------------------------
// k-means (shared by PQ codebooks and the coarse quantizer).
// ---------------------------------------------------------------------------

namespace detail {

// Nearest-centroid assignment by chunked GEMM; ties go to the lowest
// centroid index. Chunk size is fixed so results do not depend on the
// thread count.
inline void assign_nearest(const Eigen::MatrixXd& data, const Eigen::MatrixXd& centroids,
                           std::vector<int>& assignment, std::vector<double>* dists = nullptr) {
  const Eigen::Index n = data.rows();
  const Eigen::Index k = centroids.rows();
  assignment.assign(static_cast<size_t>(n), 0);
  if (dists) dists->assign(static_cast<size_t>(n), 0.0);
  Eigen::VectorXd cnorm = centroids.rowwise().squaredNorm();
  constexpr Eigen::Index kChunk = 4096;
  const size_t n_chunks = static_cast<size_t>((n + kChunk - 1) / kChunk);
  parallel_for(n_chunks, [&](size_t c) {
    Eigen::Index lo = static_cast<Eigen::Index>(c) * kChunk;
    Eigen::Index hi = std::min(n, lo + kChunk);
    Eigen::MatrixXd g = data.middleRows(lo, hi - lo) * centroids.transpose();
    for (Eigen::Index r = 0; r < hi - lo; ++r) {
      double xnorm = data.row(lo + r).squaredNorm();
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k; ++j) {
        double d = xnorm + cnorm(j) - 2.0 * g(r, j);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(j);
        }
      }
      assignment[static_cast<size_t>(lo + r)] = best;
      if (dists) (*dists)[static_cast<size_t>(lo + r)] = std::max(0.0, best_d);
    }
  }, 1);
}

struct KMeansResult {
  Eigen::MatrixXd centroids;
  std::vector<int> assignment;
  double inertia = 0.0;
};

// Lloyd iterations with k-means++ seeding (or a warm start), double
// accumulation, deterministic empty-cluster reseeding.
inline KMeansResult kmeans(const Eigen::MatrixXd& data, int k, int iters, Rng& rng,
                           const Eigen::MatrixXd* warm_start = nullptr) {
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  if (n < 1 || k < 1) throw InvalidArgumentError("kmeans: need data and k >= 1");
  if (static_cast<Eigen::Index>(k) > n) throw InvalidArgumentError("kmeans: k > sample count");

  KMeansResult res;
  if (warm_start) {
    res.centroids = *warm_start;
  } else {
    // k-means++ seeding.
    res.centroids.resize(k, d);
    std::vector<double> min_d(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    Eigen::Index first = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(n)));
    res.centroids.row(0) = data.row(first);
    for (int c = 1; c < k; ++c) {
      const auto prev = res.centroids.row(c - 1);
      double total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double dd = (data.row(i) - prev).squaredNorm();
        if (dd < min_d[static_cast<size_t>(i)]) min_d[static_cast<size_t>(i)] = dd;
        total += min_d[static_cast<size_t>(i)];
      }
      Eigen::Index pick = 0;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        double run = 0.0;
        pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
          run += min_d[static_cast<size_t>(i)];
          if (run >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<Eigen::Index>(rng.next_below(static_cast<uint64_t>(n)));
      }
      res.centroids.row(c) = data.row(pick);
    }
  }

  std::vector<double> dists;
  std::vector<int> prev_assignment;
  for (int it = 0; it < std::max(iters, 1); ++it) {
    assign_nearest(data, res.centroids, res.assignment, &dists);
    if (res.assignment == prev_assignment) break;
    prev_assignment = res.assignment;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
    std::vector<int64_t> counts(static_cast<size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.assignment[static_cast<size_t>(i)]) += data.row(i);
      counts[static_cast<size_t>(res.assignment[static_cast<size_t>(i)])]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        res.centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
      }
    }
    // Reseed empty clusters at the farthest point from its own centroid.
    std::vector<char> stolen(static_cast<size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) continue;
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (stolen[static_cast<size_t>(i)]) continue;
        if (dists[static_cast<size_t>(i)] > far_d) {
          far_d = dists[static_cast<size_t>(i)];
          far = i;
        }
      }
      if (far < 0) continue;
      stolen[static_cast<size_t>(far)] = 1;
      res.centroids.row(c) = data.row(far);
      res.assignment[static_cast<size_t>(far)] = c;
    }
  }
  assign_nearest(data, res.centroids, res.assignment, &dists);
  res.inertia = 0.0;
  for (double dd : dists) res.inertia += dd;
  return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// OPQ transform and product quantization.
// ---------------------------------------------------------------------------

inline constexpr int kPqCentroids = 256;  // 8-bit codes

struct OpqConfig {
  size_t d_target = 64;
  int n_subspaces = 16;
  int iters = 10;
  int kmeans_iters = 25;
  uint64_t seed = 0;
};

struct OpqTransform {
  size_t d_key = 0;
  size_t d_target = 0;
  int n_subspaces = 0;
  std::vector<double> rotation;   // d_key x d_target, row-major, columns orthonormal
  std::vector<float> codebooks;   // n_subspaces * 256 * d_sub
  bool degenerate = false;        // training fell back to the padded PCA basis

  // Training trace, transient (not persisted): total quantization error on
  // the training sample after each alternation.
  std::vector<double> objective_history;

  size_t d_sub() const { return d_target / static_cast<size_t>(n_subspaces); }

  const float* centroid(int subspace, int index) const {
    return codebooks.data() +
           (static_cast<size_t>(subspace) * kPqCentroids + static_cast<size_t>(index)) * d_sub();
  }

  // out[j] = sum_i x[i] * R[i][j]
  void apply(const float* x, double* out) const {
    for (size_t j = 0; j < d_target; ++j) out[j] = 0.0;
    for (size_t i = 0; i < d_key; ++i) {
      double xi = static_cast<double>(x[i]);
      const double* row = rotation.data() + i * d_target;
      for (size_t j = 0; j < d_target; ++j) out[j] += xi * row[j];
    }
  }

  std::vector<double> apply(const std::vector<float>& x) const {
    if (x.size() != d_key) throw ShapeError("OpqTransform::apply: dim mismatch");
    std::vector<double> out(d_target);
    apply(x.data(), out.data());
    return out;
  }

  // max |R^T R - I|, the orthonormality residual.
  double orthonormality_residual() const {
    double worst = 0.0;
    for (size_t a = 0; a < d_target; ++a) {
      for (size_t b = 0; b < d_target; ++b) {
        double dot = 0.0;
        for (size_t i = 0; i < d_key; ++i) {
          dot += rotation[i * d_target + a] * rotation[i * d_target + b];
        }
        double target = a == b ? 1.0 : 0.0;
        worst = std::max(worst, std::abs(dot - target));
      }
    }
    return worst;
  }
};

namespace detail {

// Top d_target eigenvectors of the centered covariance, descending
// eigenvalue, deterministic sign convention. Reports rank deficiency.
inline Eigen::MatrixXd pca_basis(const Eigen::MatrixXd& x, size_t d_target, bool* degenerate) {
  const Eigen::Index d = x.cols();
  Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mean;
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw TrainingError("PCA eigendecomposition failed");
  Eigen::VectorXd evals = es.eigenvalues();  // ascending
  Eigen::MatrixXd evecs = es.eigenvectors();
  Eigen::MatrixXd basis(d, static_cast<Eigen::Index>(d_target));
  double max_eval = std::max(evals(d - 1), 0.0);
  double tol = max_eval * 1e-10 + 1e-12;
  *degenerate = false;
  for (size_t j = 0; j < d_target; ++j) {
    Eigen::Index src = d - 1 - static_cast<Eigen::Index>(j);
    if (evals(src) <= tol) *degenerate = true;
    Eigen::VectorXd col = evecs.col(src);
    Eigen::Index pivot = 0;
    col.cwiseAbs().maxCoeff(&pivot);
    if (col(pivot) < 0.0) col = -col;
    basis.col(static_cast<Eigen::Index>(j)) = col;
  }
  return basis;
}

// Per-subspace k-means over the transformed sample; returns codebooks and the
// total quantization error.
inline double fit_codebooks(const Eigen::MatrixXd& t, const OpqConfig& cfg, uint64_t salt,
                            std::vector<float>& codebooks, bool warm) {
  const size_t d_sub = cfg.d_target / static_cast<size_t>(cfg.n_subspaces);
  double total = 0.0;
  for (int s = 0; s < cfg.n_subspaces; ++s) {
    Eigen::MatrixXd sub = t.middleCols(static_cast<Eigen::Index>(s * d_sub),
                                       static_cast<Eigen::Index>(d_sub));
    Rng rng(mix64(cfg.seed, fnv1a("pq-kmeans"), mix64(salt, static_cast<uint64_t>(s))));
    Eigen::MatrixXd warm_c;
    const Eigen::MatrixXd* warm_ptr = nullptr;
    if (warm) {
      warm_c.resize(kPqCentroids, static_cast<Eigen::Index>(d_sub));
      for (int c = 0; c < kPqCentroids; ++c) {
        const float* src = codebooks.data() +
                           (static_cast<size_t>(s) * kPqCentroids + static_cast<size_t>(c)) * d_sub;
        for (size_t j = 0; j < d_sub; ++j) warm_c(c, static_cast<Eigen::Index>(j)) = src[j];
      }
      warm_ptr = &warm_c;
    }
    detail::KMeansResult km = detail::kmeans(sub, kPqCentroids, cfg.kmeans_iters, rng, warm_ptr);
    total += km.inertia;
    for (int c = 0; c < kPqCentroids; ++c) {
      float* dst = codebooks.data() +
                   (static_cast<size_t>(s) * kPqCentroids + static_cast<size_t>(c)) * d_sub;
      for (size_t j = 0; j < d_sub; ++j) {
        dst[j] = static_cast<float>(km.centroids(c, static_cast<Eigen::Index>(j)));
      }
    }
  }
  return total;
}

// Reconstruction of each transformed row from its nearest codebook centroids.
inline Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& t, const OpqConfig& cfg,
                                   const std::vector<float>& codebooks) {
  const size_t d_sub = cfg.d_target / static_cast<size_t>(cfg.n_subspaces);
  Eigen::MatrixXd y(t.rows(), t.cols());
  for (int s = 0; s < cfg.n_subspaces; ++s) {
    Eigen::MatrixXd sub = t.middleCols(static_cast<Eigen::Index>(s * d_sub),
                                       static_cast<Eigen::Index>(d_sub));
    Eigen::MatrixXd cents(kPqCentroids, static_cast<Eigen::Index>(d_sub));
    for (int c = 0; c < kPqCentroids; ++c) {
      const float* src = codebooks.data() +
                         (static_cast<size_t>(s) * kPqCentroids + static_cast<size_t>(c)) * d_sub;
      for (size_t j = 0; j < d_sub; ++j) cents(c, static_cast<Eigen::Index>(j)) = src[j];
    }
    std::vector<int> assignment;
    detail::assign_nearest(sub, cents, assignment);
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      y.block(i, static_cast<Eigen::Index>(s * d_sub), 1, static_cast<Eigen::Index>(d_sub)) =
          cents.row(assignment[static_cast<size_t>(i)]);
    }
  }
  return y;
}

}  // namespace detail

// Trains the OPQ transform: PCA initialization, then `iters` alternations of
// per-subspace k-means and a Procrustes rotation update. The quantization
// error on the sample is non-increasing across alternations. A rank-deficient
// sample falls back to the padded PCA basis (no alternation) and sets
// `degenerate`.
inline OpqTransform train_opq(const std::vector<float>& keys_flat, size_t n, size_t d_key,
                              const OpqConfig& cfg) {
  if (n < static_cast<size_t>(kPqCentroids)) {
    throw InvalidArgumentError("train_opq: sample count must be >= 256");
  }
  if (keys_flat.size() != n * d_key) throw ShapeError("train_opq: flat sample size mismatch");
  if (cfg.d_target < 1 || cfg.d_target > d_key) {
    throw InvalidArgumentError("train_opq: d_target must be in [1, d_key]");
  }
  if (cfg.n_subspaces < 1 || cfg.d_target % static_cast<size_t>(cfg.n_subspaces) != 0) {
    throw InvalidArgumentError("train_opq: n_subspaces must divide d_target");
  }
  if (cfg.iters < 0) throw InvalidArgumentError("train_opq: iters must be >= 0");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d_key));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d_key; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          static_cast<double>(keys_flat[i * d_key + j]);
    }
  }

  OpqTransform t;
  t.d_key = d_key;
  t.d_target = cfg.d_target;
  t.n_subspaces = cfg.n_subspaces;
  t.codebooks.assign(static_cast<size_t>(cfg.n_subspaces) * kPqCentroids * t.d_sub(), 0.0f);

  bool degenerate = false;
  Eigen::MatrixXd r = detail::pca_basis(x, cfg.d_target, &degenerate);
  t.degenerate = degenerate;

  auto store_rotation = [&](const Eigen::MatrixXd& m) {
    t.rotation.resize(d_key * cfg.d_target);
    for (size_t i = 0; i < d_key; ++i) {
      for (size_t j = 0; j < cfg.d_target; ++j) {
        t.rotation[i * cfg.d_target + j] =
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
    }
  };

  int alternations = degenerate ? 0 : cfg.iters;
  Eigen::MatrixXd transformed = x * r;
  double err = detail::fit_codebooks(transformed, cfg, 0, t.codebooks, false);
  t.objective_history.push_back(err);
  for (int it = 1; it <= alternations; ++it) {
    Eigen::MatrixXd y = detail::reconstruct(transformed, cfg, t.codebooks);
    Eigen::MatrixXd b = x.transpose() * y;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
    r = svd.matrixU() * svd.matrixV().transpose();
    transformed = x * r;
    err = detail::fit_codebooks(transformed, cfg, static_cast<uint64_t>(it), t.codebooks, true);
    t.objective_history.push_back(err);
  }
  store_rotation(r);
  return t;
}

inline void encode_pq_into(const OpqTransform& t, const float* key, uint8_t* code) {
  std::vector<double> rotated(t.d_target);
  t.apply(key, rotated.data());
  const size_t d_sub = t.d_sub();
  for (int s = 0; s < t.n_subspaces; ++s) {
    const double* sub = rotated.data() + static_cast<size_t>(s) * d_sub;
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < kPqCentroids; ++c) {
      const float* cent = t.centroid(s, c);
      double d = 0.0;
      for (size_t j = 0; j < d_sub; ++j) {
        double diff = sub[j] - static_cast<double>(cent[j]);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    code[s] = static_cast<uint8_t>(best);
  }
}

inline std::vector<uint8_t> encode_pq(const OpqTransform& t, const std::vector<float>& key) {
  if (key.size() != t.d_key) throw ShapeError("encode_pq: key dim mismatch");
  std::vector<uint8_t> code(static_cast<size_t>(t.n_subspaces));
  encode_pq_into(t, key.data(), code.data());
  return code;
}

// Per-query lookup table: entry (s, c) is the squared distance between the
// rotated query's subvector s and centroid c. Every ADC evaluation in the
// module sums these entries the same way, so oracle and graph search agree
// to the last bit.
struct AdcTable {
  int n_subspaces = 0;
  std::vector<double> entries;  // n_subspaces * 256

  double eval(const uint8_t* code) const {
    double acc = 0.0;
    for (int s = 0; s < n_subspaces; ++s) {
      acc += entries[static_cast<size_t>(s) * kPqCentroids + code[s]];
    }
    return acc;
  }
};

inline AdcTable make_adc_table(const OpqTransform& t, const float* query) {
  AdcTable tab;
  tab.n_subspaces = t.n_subspaces;
  tab.entries.resize(static_cast<size_t>(t.n_subspaces) * kPqCentroids);
  std::vector<double> rotated(t.d_target);
  t.apply(query, rotated.data());
  const size_t d_sub = t.d_sub();
  for (int s = 0; s < t.n_subspaces; ++s) {
    const double* sub = rotated.data() + static_cast<size_t>(s) * d_sub;
    for (int c = 0; c < kPqCentroids; ++c) {
      const float* cent = t.centroid(s, c);
      double d = 0.0;
      for (size_t j = 0; j < d_sub; ++j) {
        double diff = sub[j] - static_cast<double>(cent[j]);
        d += diff * diff;
      }
      tab.entries[static_cast<size_t>(s) * kPqCentroids + c] = d;
    }
  }
  return tab;
}

inline double adc_distance(const OpqTransform& t, const std::vector<float>& query,
                           const std::vector<uint8_t>& code) {
  if (query.size() != t.d_key) throw ShapeError("adc_distance: query dim mismatch");
  if (code.size() != static_cast<size_t>(t.n_subspaces)) {
    throw ShapeError("adc_distance: code length mismatch");
  }
  return make_adc_table(t, query.data()).eval(code.data());
}

// ---------------------------------------------------------------------------
// HNSW graph.
// ---------------------------------------------------------------------------

struct HnswParams {
  int M = 16;
  int ef_construction = 200;
  uint64_t seed = 0;
};

class HnswGraph {
 public:
  using DistPair = std::pair<double, uint32_t>;  // (distance, slot)

  size_t size() const { return levels_.size(); }
  int max_level() const { return max_level_; }
  size_t entry() const { return entry_; }
  int level(size_t slot) const { return levels_[slot]; }
  int m() const { return params_.M; }
  const HnswParams& params() const { return params_; }
  const std::vector<uint32_t>& neighbors(size_t slot, int layer) const {
    return adj_[slot][static_cast<size_t>(layer)];
  }

  // Builds the graph over n points whose pairwise distances come from
  // `dist(i, j)`. Insertion order is slot order; levels are seeded per slot,
  // so the result is deterministic.
  template <class Dist>
  void build(size_t n, Dist&& dist, const HnswParams& params) {
    if (params.M < 2) throw InvalidArgumentError("hnsw: M must be >= 2");
    if (params.ef_construction < 1) throw InvalidArgumentError("hnsw: ef_construction must be >= 1");
    params_ = params;
    levels_.assign(n, 0);
    adj_.assign(n, {});
    entry_ = 0;
    max_level_ = -1;
    visited_.assign(n, 0);
    visit_epoch_ = 0;
    const double mult = 1.0 / std::log(static_cast<double>(params.M));
    for (size_t i = 0; i < n; ++i) {
      uint64_t raw = mix64(params.seed, fnv1a("hnsw-level"), static_cast<uint64_t>(i));
      double u = (static_cast<double>(raw >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
      int lvl = static_cast<int>(-std::log(u) * mult);
      levels_[i] = std::min(lvl, 32);
      adj_[i].resize(static_cast<size_t>(levels_[i]) + 1);
    }
    for (size_t i = 0; i < n; ++i) insert(i, dist);
    repair_connectivity(dist);
    visited_.clear();
  }

  // Best-first search. `eval(slot)` is the query-to-slot distance; extra
  // seeds join the layer-0 sweep. Returns the m best (distance, slot) pairs
  // sorted ascending. Per-query scratch only: safe to call concurrently.
  template <class Eval>
  std::vector<DistPair> search(Eval&& eval, size_t m, size_t ef,
                               const std::vector<uint32_t>& extra_seeds,
                               size_t* n_evals = nullptr) const {
    size_t evals = 0;
    std::vector<DistPair> out;
    if (size() == 0) {
      if (n_evals) *n_evals = evals;
      return out;
    }
    ef = std::max(ef, m);
    uint32_t cur = static_cast<uint32_t>(entry_);
    double cur_d = eval(cur);
    ++evals;
    for (int layer = max_level_; layer >= 1; --layer) {
      bool improved = true;
      while (improved) {
        improved = false;
        for (uint32_t nb : adj_[cur][static_cast<size_t>(layer)]) {
          double d = eval(nb);
          ++evals;
          if (DistPair{d, nb} < DistPair{cur_d, cur}) {
            cur_d = d;
            cur = nb;
            improved = true;
          }
        }
      }
    }

    std::vector<char> visited(size(), 0);
    std::priority_queue<DistPair, std::vector<DistPair>, std::greater<>> candidates;
    std::priority_queue<DistPair> best;  // max-heap, worst on top
    auto seed = [&](uint32_t s, double d) {
      visited[s] = 1;
      candidates.emplace(d, s);
      best.emplace(d, s);
      if (best.size() > ef) best.pop();
    };
    seed(cur, cur_d);
    for (uint32_t s : extra_seeds) {
      if (s >= size() || visited[s]) continue;
      double d = eval(s);
      ++evals;
      seed(s, d);
    }
    while (!candidates.empty()) {
      DistPair c = candidates.top();
      candidates.pop();
      if (best.size() >= ef && best.top() < c) break;
      for (uint32_t nb : adj_[c.second][0]) {
        if (visited[nb]) continue;
        visited[nb] = 1;
        double d = eval(nb);
        ++evals;
        if (best.size() < ef || DistPair{d, nb} < best.top()) {
          candidates.emplace(d, nb);
          best.emplace(d, nb);
          if (best.size() > ef) best.pop();
        }
      }
    }
    out.reserve(best.size());
    while (!best.empty()) {
      out.push_back(best.top());
      best.pop();
    }
    std::sort(out.begin(), out.end());
    if (out.size() > m) out.resize(m);
    if (n_evals) *n_evals = evals;
    return out;
  }

  // Layer-0 reachability from the entry point.
  std::vector<char> reachable_layer0() const {
    std::vector<char> seen(size(), 0);
    if (size() == 0) return seen;
    std::vector<uint32_t> stack{static_cast<uint32_t>(entry_)};
    seen[entry_] = 1;
    while (!stack.empty()) {
      uint32_t u = stack.back();
      stack.pop_back();
      for (uint32_t v : adj_[u][0]) {
        if (!seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
    return seen;
  }

  bool fully_connected() const {
    auto seen = reachable_layer0();
    for (char s : seen) {
      if (!s) return false;
    }
    return true;
  }

  // Load-time reconstruction.
  void restore(size_t entry, int max_level, std::vector<int> levels,
               std::vector<std::vector<std::vector<uint32_t>>> adj, HnswParams params) {
    entry_ = entry;
    max_level_ = max_level;
    levels_ = std::move(levels);
    adj_ = std::move(adj);
    params_ = params;
  }

 private:
  size_t max_degree(int layer) const {
    return layer == 0 ? static_cast<size_t>(2 * params_.M) : static_cast<size_t>(params_.M);
  }

  // Malkov's heuristic: keep a candidate only if it is closer to the query
  // point than to every neighbor already kept. Candidates arrive sorted by
  // (distance, slot).
  template <class Dist>
  std::vector<uint32_t> select_neighbors(const std::vector<DistPair>& cand, size_t max_count,
                                         Dist&& dist) const {
    std::vector<uint32_t> selected;
    for (const DistPair& c : cand) {
      if (selected.size() >= max_count) break;
      bool good = true;
      for (uint32_t s : selected) {
        if (dist(c.second, s) < c.first) {
          good = false;
          break;
        }
      }
      if (good) selected.push_back(c.second);
    }
    return selected;
  }

  template <class Dist>
  void shrink_if_needed(uint32_t node, int layer, Dist&& dist) {
    auto& list = adj_[node][static_cast<size_t>(layer)];
    size_t cap = max_degree(layer);
    if (list.size() <= cap) return;
    std::vector<DistPair> cand;
    cand.reserve(list.size());
    for (uint32_t nb : list) cand.emplace_back(dist(node, nb), nb);
    std::sort(cand.begin(), cand.end());
    list = select_neighbors(cand, cap, dist);
  }

  // Build-time layer sweep with epoch-stamped scratch (single-threaded).
  template <class Dist>
  std::vector<DistPair> search_layer_build(uint32_t q, const std::vector<DistPair>& seeds,
                                           int layer, size_t ef, Dist&& dist) {
    if (++visit_epoch_ == 0) {
      std::fill(visited_.begin(), visited_.end(), 0);
      visit_epoch_ = 1;
    }
    std::priority_queue<DistPair, std::vector<DistPair>, std::greater<>> candidates;
    std::priority_queue<DistPair> best;
    for (const DistPair& s : seeds) {
      if (visited_[s.second] == visit_epoch_) continue;
      visited_[s.second] = visit_epoch_;
      candidates.push(s);
      best.push(s);
      if (best.size() > ef) best.pop();
    }
    while (!candidates.empty()) {
      DistPair c = candidates.top();
      candidates.pop();
      if (best.size() >= ef && best.top() < c) break;
      for (uint32_t nb : adj_[c.second][static_cast<size_t>(layer)]) {
        if (visited_[nb] == visit_epoch_) continue;
        visited_[nb] = visit_epoch_;
        double d = dist(q, nb);
        if (best.size() < ef || DistPair{d, nb} < best.top()) {
          candidates.emplace(d, nb);
          best.emplace(d, nb);
          if (best.size() > ef) best.pop();
        }
      }
    }
    std::vector<DistPair> out;
    out.reserve(best.size());
    while (!best.empty()) {
      out.push_back(best.top());
      best.pop();
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  template <class Dist>
  void insert(size_t slot, Dist&& dist) {
    uint32_t q = static_cast<uint32_t>(slot);
    int lvl = levels_[slot];
    if (max_level_ < 0) {
      entry_ = slot;
      max_level_ = lvl;
      return;
    }
    uint32_t cur = static_cast<uint32_t>(entry_);
    double cur_d = dist(q, cur);
    for (int layer = max_level_; layer > lvl; --layer) {
      bool improved = true;
      while (improved) {
        improved = false;
        for (uint32_t nb : adj_[cur][static_cast<size_t>(layer)]) {
          double d = dist(q, nb);
          if (DistPair{d, nb} < DistPair{cur_d, cur}) {
            cur_d = d;
            cur = nb;
            improved = true;
          }
        }
      }
    }
    std::vector<DistPair> entry_points{{cur_d, cur}};
    auto pair_dist = [&](uint32_t a, uint32_t b) { return dist(a, b); };
    for (int layer = std::min(lvl, max_level_); layer >= 0; --layer) {
      std::vector<DistPair> found = search_layer_build(
          q, entry_points, layer, static_cast<size_t>(params_.ef_construction), dist);
      std::vector<uint32_t> neighbors =
          select_neighbors(found, static_cast<size_t>(params_.M), pair_dist);
      for (uint32_t nb : neighbors) {
        adj_[q][static_cast<size_t>(layer)].push_back(nb);
        adj_[nb][static_cast<size_t>(layer)].push_back(q);
        shrink_if_needed(nb, layer, pair_dist);
      }
      if (!found.empty()) entry_points = {found.front()};
    }
    if (lvl > max_level_) {
      max_level_ = lvl;
      entry_ = slot;
    }
  }

  // Links any layer-0 node unreachable from the entry point to its nearest
  // reached node, preserving degree caps. Rare in practice; bounded rounds.
  template <class Dist>
  void repair_connectivity(Dist&& dist) {
    const size_t n = size();
    if (n == 0) return;
    auto pair_dist = [&](uint32_t a, uint32_t b) { return dist(a, b); };
    for (size_t round = 0; round < 2 * n + 8; ++round) {
      std::vector<char> seen = reachable_layer0();
      uint32_t orphan = UINT32_MAX;
      for (size_t i = 0; i < n; ++i) {
        if (!seen[i]) {
          orphan = static_cast<uint32_t>(i);
          break;
        }
      }
      if (orphan == UINT32_MAX) return;
      uint32_t nearest = UINT32_MAX;
      double nearest_d = std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < n; ++i) {
        if (!seen[i]) continue;
        double d = dist(orphan, static_cast<uint32_t>(i));
        if (DistPair{d, static_cast<uint32_t>(i)} < DistPair{nearest_d, nearest}) {
          nearest_d = d;
          nearest = static_cast<uint32_t>(i);
        }
      }
      add_capped_edge(nearest, orphan, pair_dist);
      add_capped_edge(orphan, nearest, pair_dist);
    }
    throw ConsistencyError("hnsw: connectivity repair did not converge");
  }

  // Adds `to` to `from`'s layer-0 list; on overflow evicts the farthest
  // neighbor other than the new edge.
  template <class Dist>
  void add_capped_edge(uint32_t from, uint32_t to, Dist&& dist) {
    auto& list = adj_[from][0];
    if (std::find(list.begin(), list.end(), to) != list.end()) return;
    list.push_back(to);
    size_t cap = max_degree(0);
    if (list.size() <= cap) return;
    size_t worst = 0;
    DistPair worst_pair{-1.0, 0};
    for (size_t i = 0; i < list.size(); ++i) {
      if (list[i] == to) continue;
      DistPair p{dist(from, list[i]), list[i]};
      if (worst_pair < p) {
        worst_pair = p;
        worst = i;
      }
    }
    list.erase(list.begin() + static_cast<std::ptrdiff_t>(worst));
  }

  HnswParams params_;
  std::vector<int> levels_;
  std::vector<std::vector<std::vector<uint32_t>>> adj_;
  size_t entry_ = 0;
  int max_level_ = -1;

  // Build-time scratch.
  std::vector<uint32_t> visited_;
  uint32_t visit_epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Assembled ANN index.
// ---------------------------------------------------------------------------

struct AnnParams {
  size_t d_target = 64;
  int n_subspaces = 16;
  int M = 16;
  int ef_construction = 200;
  int n_centroids = 2048;  // coarse quantizer size; desk-scale tests use 64-256
  uint64_t seed = 0;
  int opq_iters = 10;
  int kmeans_iters = 25;
  size_t train_sample = 65536;
};

struct SearchStats {
  size_t distance_computations = 0;
};

class AnnIndex {
 public:
  AnnIndex() = default;

  size_t size() const { return record_ids_.size(); }
  size_t d_key() const { return opq_.d_key; }
  const AnnParams& params() const { return params_; }
  const OpqTransform& opq() const { return opq_; }
  const HnswGraph& graph() const { return graph_; }
  const std::vector<uint8_t>& codes() const { return codes_; }
  const std::vector<uint64_t>& record_ids() const { return record_ids_; }
  size_t coarse_centroid_count() const { return coarse_anchors_.size(); }
  bool degenerate_warning() const { return opq_.degenerate; }

  const uint8_t* code(size_t slot) const {
    return codes_.data() + slot * static_cast<size_t>(opq_.n_subspaces);
  }

  std::vector<Neighbor> search(const std::vector<float>& query, size_t m, size_t ef_search,
                               SearchStats* stats = nullptr) const {
    if (m < 1) throw InvalidArgumentError("knn_approx: m must be >= 1");
    if (ef_search < m) throw InvalidArgumentError("knn_approx: ef_search must be >= m");
    if (size() == 0) {
      if (stats) stats->distance_computations = 0;
      return {};
    }
    if (query.size() != opq_.d_key) throw ShapeError("knn_approx: query dim mismatch");

    AdcTable tab = make_adc_table(opq_, query.data());
    size_t evals = 0;

    // Coarse quantizer: nearest centroids contribute extra layer-0 entry
    // points (their anchor records).
    std::vector<uint32_t> seeds;
    if (!coarse_centroids_.empty()) {
      std::vector<double> rotated(opq_.d_target);
      opq_.apply(query.data(), rotated.data());
      const size_t k = coarse_anchors_.size();
      std::vector<std::pair<double, size_t>> order(k);
      for (size_t c = 0; c < k; ++c) {
        const float* cent = coarse_centroids_.data() + c * opq_.d_target;
        double d = 0.0;
        for (size_t j = 0; j < opq_.d_target; ++j) {
          double diff = rotated[j] - static_cast<double>(cent[j]);
          d += diff * diff;
        }
        order[c] = {d, c};
        ++evals;
      }
      size_t probes = std::min<size_t>(kCoarseProbes, k);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(probes),
                        order.end());
      for (size_t p = 0; p < probes; ++p) {
        seeds.push_back(static_cast<uint32_t>(coarse_anchors_[order[p].second]));
      }
    }

    size_t graph_evals = 0;
    auto eval = [&](uint32_t slot) { return tab.eval(code(slot)); };
    std::vector<HnswGraph::DistPair> found =
        graph_.search(eval, m, ef_search, seeds, &graph_evals);
    evals += graph_evals;

    std::vector<Neighbor> out;
    out.reserve(found.size());
    for (const auto& [d, slot] : found) out.push_back(Neighbor{d, record_ids_[slot]});
    std::sort(out.begin(), out.end());
    if (stats) stats->distance_computations = evals;
    return out;
  }

  // Exhaustive scan under the ADC metric; the oracle knn_approx must match
  // at ef_search = |E|. Shares the lookup-table evaluation path.
  std::vector<Neighbor> exhaustive_adc(const std::vector<float>& query, size_t m) const {
    if (m < 1) throw InvalidArgumentError("exhaustive_adc: m must be >= 1");
    if (size() == 0) return {};
    if (query.size() != opq_.d_key) throw ShapeError("exhaustive_adc: query dim mismatch");
    AdcTable tab = make_adc_table(opq_, query.data());
    std::vector<Neighbor> all(size());
    for (size_t i = 0; i < size(); ++i) all[i] = Neighbor{tab.eval(code(i)), record_ids_[i]};
    std::sort(all.begin(), all.end());
    if (all.size() > m) all.resize(m);
    return all;
  }

  // Internal wiring for build and load.
  void adopt(OpqTransform opq, AnnParams params, std::vector<uint64_t> record_ids,
             std::vector<uint8_t> codes, std::vector<float> coarse_centroids,
             std::vector<uint64_t> coarse_anchors, HnswGraph graph) {
    opq_ = std::move(opq);
    params_ = params;
    record_ids_ = std::move(record_ids);
    codes_ = std::move(codes);
    coarse_centroids_ = std::move(coarse_centroids);
    coarse_anchors_ = std::move(coarse_anchors);
    graph_ = std::move(graph);
  }

  const std::vector<float>& coarse_centroids() const { return coarse_centroids_; }
  const std::vector<uint64_t>& coarse_anchors() const { return coarse_anchors_; }

 private:
  static constexpr size_t kCoarseProbes = 4;

  OpqTransform opq_;
  AnnParams params_;
  std::vector<uint64_t> record_ids_;
  std::vector<uint8_t> codes_;
  std::vector<float> coarse_centroids_;  // k_eff * d_target
  std::vector<uint64_t> coarse_anchors_;  // k_eff anchor slots
  HnswGraph graph_;
};

namespace detail {

// Bulk PQ encoding: rotate all keys by GEMM, then per-subspace nearest
// centroid by the shared assignment kernel.
inline std::vector<uint8_t> bulk_encode(const Eigen::MatrixXd& transformed,
                                        const OpqTransform& t) {
  const size_t n = static_cast<size_t>(transformed.rows());
  const size_t d_sub = t.d_sub();
  std::vector<uint8_t> codes(n * static_cast<size_t>(t.n_subspaces));
  for (int s = 0; s < t.n_subspaces; ++s) {
    Eigen::MatrixXd sub = transformed.middleCols(static_cast<Eigen::Index>(s * d_sub),
                                                 static_cast<Eigen::Index>(d_sub));
    Eigen::MatrixXd cents(kPqCentroids, static_cast<Eigen::Index>(d_sub));
    for (int c = 0; c < kPqCentroids; ++c) {
      const float* src = t.centroid(s, c);
      for (size_t j = 0; j < d_sub; ++j) cents(c, static_cast<Eigen::Index>(j)) = src[j];
    }
    std::vector<int> assignment;
    assign_nearest(sub, cents, assignment);
    for (size_t i = 0; i < n; ++i) {
      codes[i * static_cast<size_t>(t.n_subspaces) + static_cast<size_t>(s)] =
          static_cast<uint8_t>(assignment[i]);
    }
  }
  return codes;
}

}  // namespace detail

// Builds the full retrieval stack over a memory: OPQ transform, PQ codes,
// coarse quantizer, HNSW graph. Deterministic given params.seed.
inline AnnIndex build_ann(const ExternalMemory& mem, const AnnParams& params) {
  if (mem.empty()) throw InvalidArgumentError("build_ann: memory is empty");
  const size_t n = mem.size();
  const size_t d_key = mem.d_key();
  if (params.d_target < 1 || params.d_target > d_key) {
    throw InvalidArgumentError("build_ann: d_target must be in [1, d_key]");
  }
  if (params.n_subspaces < 1 ||
      params.d_target % static_cast<size_t>(params.n_subspaces) != 0) {
    throw InvalidArgumentError("build_ann: n_subspaces must divide d_target");
  }
  if (params.n_centroids < 1) throw InvalidArgumentError("build_ann: n_centroids must be >= 1");

  const auto& recs = mem.records();
  OpqTransform opq;
  if (n >= static_cast<size_t>(kPqCentroids)) {
    size_t sample_n = params.train_sample == 0 ? n : std::min(params.train_sample, n);
    std::vector<float> sample(sample_n * d_key);
    if (sample_n == n) {
      for (size_t i = 0; i < n; ++i) {
        std::memcpy(sample.data() + i * d_key, recs[i].key.data(), d_key * sizeof(float));
      }
    } else {
      Rng rng(mix64(params.seed, fnv1a("opq-sample")));
      std::vector<size_t> perm = rng.permutation(n);
      for (size_t i = 0; i < sample_n; ++i) {
        std::memcpy(sample.data() + i * d_key, recs[perm[i]].key.data(), d_key * sizeof(float));
      }
    }
    OpqConfig ocfg;
    ocfg.d_target = params.d_target;
    ocfg.n_subspaces = params.n_subspaces;
    ocfg.iters = params.opq_iters;
    ocfg.kmeans_iters = params.kmeans_iters;
    ocfg.seed = params.seed;
    opq = train_opq(sample, sample_n, d_key, ocfg);
  } else {
    // Too few records to train: identity rotation, codebooks straight from
    // the data (quantization error zero).
    opq.d_key = d_key;
    opq.d_target = params.d_target;
    opq.n_subspaces = params.n_subspaces;
    opq.rotation.assign(d_key * params.d_target, 0.0);
    for (size_t j = 0; j < params.d_target; ++j) opq.rotation[j * params.d_target + j] = 1.0;
    const size_t d_sub = opq.d_sub();
    opq.codebooks.resize(static_cast<size_t>(params.n_subspaces) * kPqCentroids * d_sub);
    std::vector<double> rotated(params.d_target);
    for (int c = 0; c < kPqCentroids; ++c) {
      size_t src = static_cast<size_t>(c) % n;
      opq.apply(recs[src].key.data(), rotated.data());
      for (int s = 0; s < params.n_subspaces; ++s) {
        float* dst = opq.codebooks.data() +
                     (static_cast<size_t>(s) * kPqCentroids + static_cast<size_t>(c)) * d_sub;
        for (size_t j = 0; j < d_sub; ++j) {
          dst[j] = static_cast<float>(rotated[static_cast<size_t>(s) * d_sub + j]);
        }
      }
    }
  }

  // Transform every key once (GEMM), reused for codes, coarse quantizer, and
  // graph construction.
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d_key));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d_key; ++j) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          static_cast<double>(recs[i].key[j]);
    }
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rmap(
      opq.rotation.data(), static_cast<Eigen::Index>(d_key),
      static_cast<Eigen::Index>(opq.d_target));
  Eigen::MatrixXd transformed = x * rmap;

  std::vector<uint8_t> codes = detail::bulk_encode(transformed, opq);

  // Coarse quantizer: k-means over (a sample of) the transformed keys, one
  // anchor record per centroid.
  size_t k_eff = std::min<size_t>(static_cast<size_t>(params.n_centroids), n);
  std::vector<float> coarse_centroids(k_eff * opq.d_target);
  std::vector<uint64_t> coarse_anchors(k_eff, 0);
  {
    Rng rng(mix64(params.seed, fnv1a("coarse-kmeans")));
    size_t fit_n = params.train_sample == 0 ? n : std::min(std::max(params.train_sample, k_eff), n);
    Eigen::MatrixXd fit_data;
    if (fit_n == n) {
      fit_data = transformed;
    } else {
      Rng srng(mix64(params.seed, fnv1a("coarse-sample")));
      std::vector<size_t> perm = srng.permutation(n);
      fit_data.resize(static_cast<Eigen::Index>(fit_n), transformed.cols());
      for (size_t i = 0; i < fit_n; ++i) {
        fit_data.row(static_cast<Eigen::Index>(i)) =
            transformed.row(static_cast<Eigen::Index>(perm[i]));
      }
    }
    detail::KMeansResult km = detail::kmeans(fit_data, static_cast<int>(k_eff), 10, rng);
    for (size_t c = 0; c < k_eff; ++c) {
      for (size_t j = 0; j < opq.d_target; ++j) {
        coarse_centroids[c * opq.d_target + j] =
            static_cast<float>(km.centroids(static_cast<Eigen::Index>(c),
                                            static_cast<Eigen::Index>(j)));
      }
    }
    Eigen::MatrixXd cents_d(static_cast<Eigen::Index>(k_eff),
                            static_cast<Eigen::Index>(opq.d_target));
    for (size_t c = 0; c < k_eff; ++c) {
      for (size_t j = 0; j < opq.d_target; ++j) {
        cents_d(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) =
            static_cast<double>(coarse_centroids[c * opq.d_target + j]);
      }
    }
    std::vector<int> assignment;
    std::vector<double> dists;
    detail::assign_nearest(transformed, cents_d, assignment, &dists);
    std::vector<std::pair<double, uint64_t>> best(k_eff, {std::numeric_limits<double>::infinity(),
                                                          UINT64_MAX});
    for (size_t i = 0; i < n; ++i) {
      auto cand = std::make_pair(dists[i], static_cast<uint64_t>(i));
      auto& cur = best[static_cast<size_t>(assignment[i])];
      if (cand < cur) cur = cand;
    }
    for (size_t c = 0; c < k_eff; ++c) {
      coarse_anchors[c] = best[c].second == UINT64_MAX ? 0 : best[c].second;
    }
  }

  // Graph over the transformed keys (exact distances during construction).
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> tf =
      transformed.cast<float>();
  auto dist = [&](uint32_t a, uint32_t b) {
    return squared_l2(tf.data() + static_cast<size_t>(a) * opq.d_target,
                      tf.data() + static_cast<size_t>(b) * opq.d_target, opq.d_target);
  };
  HnswParams hp;
  hp.M = params.M;
  hp.ef_construction = params.ef_construction;
  hp.seed = params.seed;
  HnswGraph graph;
  graph.build(n, dist, hp);

  std::vector<uint64_t> record_ids(n);
  for (size_t i = 0; i < n; ++i) record_ids[i] = recs[i].id;

  AnnIndex index;
  index.adopt(std::move(opq), params, std::move(record_ids), std::move(codes),
              std::move(coarse_centroids), std::move(coarse_anchors), std::move(graph));
  return index;
}

inline std::vector<Neighbor> knn_approx(const AnnIndex& index, const std::vector<float>& query,
                                        size_t m, size_t ef_search, SearchStats* stats = nullptr) {
  return index.search(query, m, ef_search, stats);
}

// Fraction of the exact ids recovered by the approximate search, averaged
// over queries.
inline double recall_at_k(const AnnIndex& index, const ExternalMemory& mem,
                          const std::vector<std::vector<float>>& queries, size_t m,
                          size_t ef_search) {
  if (queries.empty()) throw InvalidArgumentError("recall_at_k: need at least one query");
  ExactIndex exact(mem);
  std::vector<double> hits(queries.size(), 0.0);
  parallel_for(queries.size(), [&](size_t qi) {
    std::vector<Neighbor> truth = exact.knn(queries[qi], m);
    std::vector<Neighbor> approx = index.search(queries[qi], m, ef_search);
    std::vector<uint64_t> truth_ids, approx_ids;
    for (const auto& nb : truth) truth_ids.push_back(nb.record_id);
    for (const auto& nb : approx) approx_ids.push_back(nb.record_id);
    std::sort(truth_ids.begin(), truth_ids.end());
    std::sort(approx_ids.begin(), approx_ids.end());
    std::vector<uint64_t> common;
    std::set_intersection(truth_ids.begin(), truth_ids.end(), approx_ids.begin(),
                          approx_ids.end(), std::back_inserter(common));
    hits[qi] = static_cast<double>(common.size()) / static_cast<double>(m);
  }, 1);
  double total = 0.0;
  for (double h : hits) total += h;
  return total / static_cast<double>(queries.size());
}

struct BenchResult {
  double p50_latency_us = 0.0;
  double p95_latency_us = 0.0;
  double distance_computations_per_query = 0.0;
  size_t n_queries = 0;
};

namespace detail {

inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t rank = static_cast<size_t>(std::ceil(p * static_cast<double>(v.size())));
  if (rank == 0) rank = 1;
  return v[std::min(rank - 1, v.size() - 1)];
}

}  // namespace detail

// Wall-clock benchmark with a warmup pass. Latencies are reported, never
// asserted; distance computations are the deterministic cost measure.
inline BenchResult bench_query(const AnnIndex& index, const std::vector<std::vector<float>>& queries,
                               size_t m, size_t ef_search) {
  if (queries.empty()) throw InvalidArgumentError("bench_query: need at least one query");
  for (const auto& q : queries) index.search(q, m, ef_search);  // warmup
  std::vector<double> lat;
  lat.reserve(queries.size());
  double comps = 0.0;
  for (const auto& q : queries) {
    SearchStats stats;
    auto start = std::chrono::steady_clock::now();
    index.search(q, m, ef_search, &stats);
    auto end = std::chrono::steady_clock::now();
    lat.push_back(std::chrono::duration<double, std::micro>(end - start).count());
    comps += static_cast<double>(stats.distance_computations);
  }
  BenchResult r;
  r.p50_latency_us = detail::percentile(lat, 0.50);
  r.p95_latency_us = detail::percentile(lat, 0.95);
  r.distance_computations_per_query = comps / static_cast<double>(queries.size());
  r.n_queries = queries.size();
  return r;
}

// Exact-scan baseline with the same reporting shape.
inline BenchResult bench_exact(const ExternalMemory& mem, const std::vector<std::vector<float>>& queries,
                               size_t m) {
  if (queries.empty()) throw InvalidArgumentError("bench_exact: need at least one query");
  ExactIndex exact(mem);
  for (const auto& q : queries) exact.knn(q, m);  // warmup
  std::vector<double> lat;
  lat.reserve(queries.size());
  for (const auto& q : queries) {
    auto start = std::chrono::steady_clock::now();
    exact.knn(q, m);
    auto end = std::chrono::steady_clock::now();
    lat.push_back(std::chrono::duration<double, std::micro>(end - start).count());
  }
  BenchResult r;
  r.p50_latency_us = detail::percentile(lat, 0.50);
  r.p95_latency_us = detail::percentile(lat, 0.95);
  r.distance_computations_per_query = static_cast<double>(mem.size());
  r.n_queries = queries.size();
  return r;
}

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

inline constexpr char kIndexMagic[9] = "KNFIDX1";
inline constexpr uint32_t kIndexVersion = 1;

inline std::vector<uint8_t> serialize_index(const AnnIndex& index) {
  ByteWriter w;
  w.write_raw(kIndexMagic, 8);
  w.write<uint32_t>(kIndexVersion);
  const OpqTransform& opq = index.opq();
  const AnnParams& p = index.params();
  w.write<uint32_t>(static_cast<uint32_t>(opq.d_key));
  w.write<uint32_t>(static_cast<uint32_t>(opq.d_target));
  w.write<uint32_t>(static_cast<uint32_t>(opq.n_subspaces));
  w.write<uint32_t>(static_cast<uint32_t>(p.M));
  w.write<uint32_t>(static_cast<uint32_t>(p.ef_construction));
  w.write<uint32_t>(static_cast<uint32_t>(p.n_centroids));
  w.write<uint32_t>(static_cast<uint32_t>(p.opq_iters));
  w.write<uint32_t>(static_cast<uint32_t>(p.kmeans_iters));
  w.write<uint64_t>(p.train_sample);
  w.write<uint64_t>(p.seed);
  w.write<uint8_t>(opq.degenerate ? 1 : 0);
  const uint64_t n = index.size();
  w.write<uint64_t>(n);
  w.write_raw(opq.rotation.data(), opq.rotation.size() * sizeof(double));
  w.write_raw(opq.codebooks.data(), opq.codebooks.size() * sizeof(float));
  w.write_raw(index.codes().data(), index.codes().size());
  w.write_raw(index.record_ids().data(), index.record_ids().size() * sizeof(uint64_t));
  w.write<uint32_t>(static_cast<uint32_t>(index.coarse_anchors().size()));
  w.write_raw(index.coarse_centroids().data(), index.coarse_centroids().size() * sizeof(float));
  w.write_raw(index.coarse_anchors().data(), index.coarse_anchors().size() * sizeof(uint64_t));
  const HnswGraph& g = index.graph();
  w.write<uint64_t>(n == 0 ? 0 : static_cast<uint64_t>(g.entry()));
  w.write<int32_t>(g.max_level());
  for (size_t i = 0; i < n; ++i) {
    w.write<int32_t>(g.level(i));
    for (int layer = 0; layer <= g.level(i); ++layer) {
      const auto& nbs = g.neighbors(i, layer);
      w.write<uint32_t>(static_cast<uint32_t>(nbs.size()));
      w.write_raw(nbs.data(), nbs.size() * sizeof(uint32_t));
    }
  }
  return seal_bytes(w);
}

inline AnnIndex deserialize_index(const std::vector<uint8_t>& bytes) {
  ByteReader r = sealed_reader(bytes.data(), bytes.size(), kIndexMagic, "index");
  uint32_t version = r.read<uint32_t>("index version");
  if (version != kIndexVersion) {
    throw FormatError("unsupported index version " + std::to_string(version));
  }
  OpqTransform opq;
  AnnParams p;
  opq.d_key = r.read<uint32_t>("d_key");
  opq.d_target = r.read<uint32_t>("d_target");
  opq.n_subspaces = static_cast<int>(r.read<uint32_t>("n_subspaces"));
  p.d_target = opq.d_target;
  p.n_subspaces = opq.n_subspaces;
  p.M = static_cast<int>(r.read<uint32_t>("M"));
  p.ef_construction = static_cast<int>(r.read<uint32_t>("ef_construction"));
  p.n_centroids = static_cast<int>(r.read<uint32_t>("n_centroids"));
  p.opq_iters = static_cast<int>(r.read<uint32_t>("opq_iters"));
  p.kmeans_iters = static_cast<int>(r.read<uint32_t>("kmeans_iters"));
  p.train_sample = r.read<uint64_t>("train_sample");
  p.seed = r.read<uint64_t>("seed");
  opq.degenerate = r.read<uint8_t>("degenerate flag") != 0;
  if (opq.d_key < 1 || opq.d_target < 1 || opq.d_target > opq.d_key || opq.n_subspaces < 1 ||
      opq.d_target % static_cast<size_t>(opq.n_subspaces) != 0 || p.M < 2) {
    throw CorruptionError("index header parameters are inconsistent");
  }
  uint64_t n = r.read<uint64_t>("record count");
  size_t rot_n = opq.d_key * opq.d_target;
  size_t cb_n = static_cast<size_t>(opq.n_subspaces) * kPqCentroids * opq.d_sub();
  if (r.remaining() < rot_n * sizeof(double) + cb_n * sizeof(float) +
                          n * static_cast<size_t>(opq.n_subspaces) + n * sizeof(uint64_t)) {
    throw CorruptionError("index file truncated");
  }
  opq.rotation.resize(rot_n);
  r.read_raw(opq.rotation.data(), rot_n * sizeof(double), "rotation");
  opq.codebooks.resize(cb_n);
  r.read_raw(opq.codebooks.data(), cb_n * sizeof(float), "codebooks");
  std::vector<uint8_t> codes(n * static_cast<size_t>(opq.n_subspaces));
  r.read_raw(codes.data(), codes.size(), "codes");
  std::vector<uint64_t> record_ids(n);
  r.read_raw(record_ids.data(), n * sizeof(uint64_t), "record ids");
  uint32_t k_eff = r.read<uint32_t>("coarse centroid count");
  if (k_eff > n) throw CorruptionError("coarse centroid count exceeds record count");
  std::vector<float> coarse_centroids(static_cast<size_t>(k_eff) * opq.d_target);
  r.read_raw(coarse_centroids.data(), coarse_centroids.size() * sizeof(float),
             "coarse centroids");
  std::vector<uint64_t> coarse_anchors(k_eff);
  r.read_raw(coarse_anchors.data(), k_eff * sizeof(uint64_t), "coarse anchors");
  for (uint64_t a : coarse_anchors) {
    if (a >= n) throw CorruptionError("coarse anchor slot out of range");
  }
  uint64_t entry = r.read<uint64_t>("graph entry");
  int32_t max_level = r.read<int32_t>("graph max level");
  if (n > 0 && entry >= n) throw CorruptionError("graph entry out of range");
  std::vector<int> levels(n);
  std::vector<std::vector<std::vector<uint32_t>>> adj(n);
  for (uint64_t i = 0; i < n; ++i) {
    int32_t lvl = r.read<int32_t>("node level");
    if (lvl < 0 || lvl > max_level) throw CorruptionError("node level out of range");
    levels[i] = lvl;
    adj[i].resize(static_cast<size_t>(lvl) + 1);
    for (int32_t layer = 0; layer <= lvl; ++layer) {
      uint32_t deg = r.read<uint32_t>("node degree");
      size_t cap = layer == 0 ? static_cast<size_t>(2 * p.M) : static_cast<size_t>(p.M);
      if (deg > cap || deg > n) throw CorruptionError("node degree exceeds cap");
      auto& list = adj[i][static_cast<size_t>(layer)];
      list.resize(deg);
      r.read_raw(list.data(), deg * sizeof(uint32_t), "adjacency");
      for (uint32_t nb : list) {
        if (nb >= n) throw CorruptionError("adjacency slot out of range");
      }
    }
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after index payload");

  std::unordered_set<uint64_t> seen;
  for (uint64_t id : record_ids) {
    if (!seen.insert(id).second) throw CorruptionError("duplicate record id in index");
  }

  HnswParams hp;
  hp.M = p.M;
  hp.ef_construction = p.ef_construction;
  hp.seed = p.seed;
  HnswGraph graph;
  graph.restore(static_cast<size_t>(entry), max_level, std::move(levels), std::move(adj), hp);

  AnnIndex index;
  index.adopt(std::move(opq), p, std::move(record_ids), std::move(codes),
              std::move(coarse_centroids), std::move(coarse_anchors), std::move(graph));
  return index;
}

inline void save_index(const AnnIndex& index, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_index(index));
}

inline AnnIndex load_index(const std::filesystem::path& path) {
  return deserialize_index(read_file_bytes(path));
}

}  // namespace knnfuse
