#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "knnfuse/ann.hpp"
#include "knnfuse/errors.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/rng.hpp"

namespace knnfuse {

using FrameBatch = Eigen::MatrixXd;  // |A| x d_model

// Parameters of one fusion layer:
//   F(A) = A + LN(ReLU(softmax((A W_q) K_c^T / sqrt(d_key)) (V_c W_v)))
struct FusionParams {
  Eigen::MatrixXd w_q;      // d_model x d_key
  Eigen::MatrixXd w_v;      // d_value x d_model
  Eigen::VectorXd ln_gamma; // d_model
  Eigen::VectorXd ln_beta;  // d_model
  double ln_eps = 1e-5;
  int m = 8;                // neighbors per frame

  size_t d_model() const { return static_cast<size_t>(w_q.rows()); }
  size_t d_key() const { return static_cast<size_t>(w_q.cols()); }
  size_t d_value() const { return static_cast<size_t>(w_v.rows()); }

  void validate() const {
    if (m < 1) throw InvalidArgumentError("fusion: m must be >= 1");
    if (ln_eps <= 0.0) throw InvalidArgumentError("fusion: ln_eps must be positive");
    if (w_v.cols() != w_q.rows() || ln_gamma.size() != w_q.rows() ||
        ln_beta.size() != w_q.rows()) {
      throw ShapeError("fusion: parameter shapes are inconsistent");
    }
    if (!w_q.allFinite() || !w_v.allFinite() || !ln_gamma.allFinite() || !ln_beta.allFinite()) {
      throw DataError("fusion: non-finite parameter");
    }
  }
};

inline FusionParams init_fusion_params(size_t d_model, size_t d_key, size_t d_value,
                                       uint64_t seed, int m = 8) {
  FusionParams p;
  p.m = m;
  Rng rng(mix64(seed, fnv1a("fusion-init")));
  p.w_q.resize(static_cast<Eigen::Index>(d_model), static_cast<Eigen::Index>(d_key));
  double qs = 1.0 / std::sqrt(static_cast<double>(d_model));
  for (Eigen::Index i = 0; i < p.w_q.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.w_q.cols(); ++j) p.w_q(i, j) = qs * rng.normal();
  }
  p.w_v.resize(static_cast<Eigen::Index>(d_value), static_cast<Eigen::Index>(d_model));
  double vs = 1.0 / std::sqrt(static_cast<double>(d_value));
  for (Eigen::Index i = 0; i < p.w_v.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.w_v.cols(); ++j) p.w_v(i, j) = vs * rng.normal();
  }
  p.ln_gamma = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d_model));
  p.ln_beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d_model));
  return p;
}

// Retrieved context: aligned key/value rows plus their source record ids.
struct FusionContext {
  Eigen::MatrixXd k_c;  // n_ctx x d_key
  Eigen::MatrixXd v_c;  // n_ctx x d_value
  std::vector<uint64_t> record_ids;

  size_t n_ctx() const { return record_ids.size(); }
  bool empty() const { return record_ids.empty(); }
};

namespace detail {

inline void append_context_rows(FusionContext& ctx, const ExternalMemory& mem,
                                const std::vector<std::vector<Neighbor>>& per_frame) {
  std::vector<uint64_t> order;
  std::unordered_set<uint64_t> seen;
  for (const auto& frame_neighbors : per_frame) {
    for (const Neighbor& nb : frame_neighbors) {
      if (seen.insert(nb.record_id).second) order.push_back(nb.record_id);
    }
  }
  ctx.record_ids = order;
  ctx.k_c.resize(static_cast<Eigen::Index>(order.size()),
                 static_cast<Eigen::Index>(mem.d_key()));
  ctx.v_c.resize(static_cast<Eigen::Index>(order.size()),
                 static_cast<Eigen::Index>(mem.d_value()));
  for (size_t r = 0; r < order.size(); ++r) {
    size_t idx = mem.index_of(order[r]);
    if (idx == ExternalMemory::npos) {
      throw ConsistencyError("retrieved record id " + std::to_string(order[r]) +
                             " is not present in the memory");
    }
    const MemoryRecord& rec = mem.record(idx);
    for (size_t j = 0; j < mem.d_key(); ++j) {
      ctx.k_c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          static_cast<double>(rec.key[j]);
    }
    for (size_t j = 0; j < mem.d_value(); ++j) {
      ctx.v_c(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
          static_cast<double>(rec.value[j]);
    }
  }
}

inline std::vector<float> frame_row_as_floats(const FrameBatch& frames, Eigen::Index i) {
  std::vector<float> q(static_cast<size_t>(frames.cols()));
  for (Eigen::Index j = 0; j < frames.cols(); ++j) {
    q[static_cast<size_t>(j)] = static_cast<float>(frames(i, j));
  }
  return q;
}

}  // namespace detail

// Per-frame top-m retrieval, then the deduplicated union in first-seen frame
// order (ties inside a frame already ordered by distance then id). Retrieval
// uses the raw frame embeddings, so d_model must equal the memory's d_key.
inline FusionContext gather_context(const FrameBatch& frames, const ExactIndex& index, int m) {
  if (frames.rows() < 1) throw InvalidArgumentError("gather_context: empty frame batch");
  if (m < 1) throw InvalidArgumentError("gather_context: m must be >= 1");
  const ExternalMemory& mem = index.memory();
  FusionContext ctx;
  if (mem.empty()) {
    ctx.k_c.resize(0, static_cast<Eigen::Index>(mem.d_key()));
    ctx.v_c.resize(0, static_cast<Eigen::Index>(mem.d_value()));
    return ctx;
  }
  if (static_cast<size_t>(frames.cols()) != mem.d_key()) {
    throw ShapeError("gather_context: frame dim " + std::to_string(frames.cols()) +
                     " != memory d_key " + std::to_string(mem.d_key()));
  }
  std::vector<std::vector<Neighbor>> per_frame(static_cast<size_t>(frames.rows()));
  for (Eigen::Index i = 0; i < frames.rows(); ++i) {
    per_frame[static_cast<size_t>(i)] =
        index.knn(detail::frame_row_as_floats(frames, i), static_cast<size_t>(m));
  }
  detail::append_context_rows(ctx, mem, per_frame);
  return ctx;
}

inline FusionContext gather_context(const FrameBatch& frames, const AnnIndex& index,
                                    const ExternalMemory& mem, int m, size_t ef_search) {
  if (frames.rows() < 1) throw InvalidArgumentError("gather_context: empty frame batch");
  if (m < 1) throw InvalidArgumentError("gather_context: m must be >= 1");
  FusionContext ctx;
  if (mem.empty() || index.size() == 0) {
    ctx.k_c.resize(0, static_cast<Eigen::Index>(mem.d_key()));
    ctx.v_c.resize(0, static_cast<Eigen::Index>(mem.d_value()));
    return ctx;
  }
  if (static_cast<size_t>(frames.cols()) != mem.d_key() ||
      static_cast<size_t>(frames.cols()) != index.d_key()) {
    throw ShapeError("gather_context: frame dim does not match the index/memory d_key");
  }
  std::vector<std::vector<Neighbor>> per_frame(static_cast<size_t>(frames.rows()));
  for (Eigen::Index i = 0; i < frames.rows(); ++i) {
    per_frame[static_cast<size_t>(i)] = index.search(detail::frame_row_as_floats(frames, i),
                                                     static_cast<size_t>(m), ef_search);
  }
  detail::append_context_rows(ctx, mem, per_frame);
  return ctx;
}

// Row-wise LayerNorm with population variance:
// (x - mean)/sqrt(var + eps) * gamma + beta.
inline Eigen::VectorXd layer_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& gamma,
                                  const Eigen::VectorXd& beta, double eps) {
  if (x.size() < 1) throw InvalidArgumentError("layer_norm: empty input");
  if (eps <= 0.0) throw InvalidArgumentError("layer_norm: eps must be positive");
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw ShapeError("layer_norm: gamma/beta size mismatch");
  }
  double mean = x.mean();
  double var = (x.array() - mean).square().mean();
  double inv_std = 1.0 / std::sqrt(var + eps);
  return (((x.array() - mean) * inv_std) * gamma.array() + beta.array()).matrix();
}

// Cached intermediates for the backward pass.
struct FusionTape {
  Eigen::MatrixXd a;        // |A| x d_model
  Eigen::MatrixXd k_c;      // n_ctx x d_key
  Eigen::MatrixXd v_c;      // n_ctx x d_value
  Eigen::MatrixXd probs;    // |A| x n_ctx softmax rows
  Eigen::MatrixXd u;        // n_ctx x d_model (V_c W_v)
  Eigen::MatrixXd h;        // |A| x d_model pre-ReLU
  Eigen::MatrixXd xhat;     // |A| x d_model normalized pre-LN
  Eigen::VectorXd inv_std;  // |A|
  FusionParams params;      // snapshot
  bool empty_context = true;
};

// Eq. 2 forward. An empty context makes the attention term the zero matrix,
// so the output is A + LN(0) = A + ln_beta per row.
inline std::pair<Eigen::MatrixXd, FusionTape> fusion_forward(const FrameBatch& a,
                                                             const FusionContext& ctx,
                                                             const FusionParams& p) {
  p.validate();
  if (a.rows() < 1) throw InvalidArgumentError("fusion_forward: empty frame batch");
  if (static_cast<size_t>(a.cols()) != p.d_model()) {
    throw ShapeError("fusion_forward: frame dim " + std::to_string(a.cols()) + " != d_model " +
                     std::to_string(p.d_model()));
  }
  if (!a.allFinite()) throw DataError("fusion_forward: non-finite frame input");

  const Eigen::Index n = a.rows();
  const Eigen::Index d_model = a.cols();
  FusionTape tape;
  tape.a = a;
  tape.params = p;
  tape.inv_std.resize(n);
  tape.xhat.resize(n, d_model);

  Eigen::MatrixXd z;  // post-ReLU, pre-LN
  if (ctx.empty()) {
    tape.empty_context = true;
    tape.h = Eigen::MatrixXd::Zero(n, d_model);
    z = tape.h;
  } else {
    if (static_cast<size_t>(ctx.k_c.cols()) != p.d_key()) {
      throw ShapeError("fusion_forward: context key dim != W_q columns");
    }
    if (static_cast<size_t>(ctx.v_c.cols()) != p.d_value()) {
      throw ShapeError("fusion_forward: context value dim != W_v rows");
    }
    if (ctx.k_c.rows() != ctx.v_c.rows()) {
      throw ShapeError("fusion_forward: K_c and V_c row counts differ");
    }
    if (!ctx.k_c.allFinite() || !ctx.v_c.allFinite()) {
      throw DataError("fusion_forward: non-finite context");
    }
    tape.empty_context = false;
    tape.k_c = ctx.k_c;
    tape.v_c = ctx.v_c;
    double scale = 1.0 / std::sqrt(static_cast<double>(p.d_key()));
    Eigen::MatrixXd scores = (a * p.w_q) * ctx.k_c.transpose() * scale;  // n x n_ctx
    tape.probs.resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      double row_max = scores.row(i).maxCoeff();
      Eigen::ArrayXd e = (scores.row(i).array() - row_max).exp();
      tape.probs.row(i) = (e / e.sum()).matrix();
    }
    tape.u = ctx.v_c * p.w_v;        // n_ctx x d_model
    tape.h = tape.probs * tape.u;    // n x d_model
    z = tape.h.cwiseMax(0.0);
  }

  Eigen::MatrixXd out(n, d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mean = z.row(i).mean();
    double var = (z.row(i).array() - mean).square().mean();
    double inv_std = 1.0 / std::sqrt(var + p.ln_eps);
    tape.inv_std(i) = inv_std;
    tape.xhat.row(i) = ((z.row(i).array() - mean) * inv_std).matrix();
    out.row(i) = (a.row(i).array() + tape.xhat.row(i).array() * p.ln_gamma.transpose().array() +
                  p.ln_beta.transpose().array())
                     .matrix();
  }
  if (!out.allFinite()) throw DataError("fusion_forward: non-finite output");
  return {std::move(out), std::move(tape)};
}

struct FusionGrads {
  Eigen::MatrixXd d_a;
  Eigen::MatrixXd d_w_q;
  Eigen::MatrixXd d_w_v;
  Eigen::VectorXd d_ln_gamma;
  Eigen::VectorXd d_ln_beta;
};

// Analytic gradients of the Eq. 2 composite. Gradients do not flow into the
// context keys; `d_v_c` (the value-row gradient) is produced only on request,
// for the trainable one-hot value table.
inline FusionGrads fusion_backward(const FusionTape& tape, const Eigen::MatrixXd& d_out,
                                   Eigen::MatrixXd* d_v_c = nullptr) {
  const FusionParams& p = tape.params;
  const Eigen::Index n = tape.a.rows();
  const Eigen::Index d_model = tape.a.cols();
  if (d_out.rows() != n || d_out.cols() != d_model) {
    throw ShapeError("fusion_backward: d_out shape does not match the tape");
  }

  FusionGrads g;
  g.d_a = d_out;  // residual path
  g.d_w_q = Eigen::MatrixXd::Zero(p.w_q.rows(), p.w_q.cols());
  g.d_w_v = Eigen::MatrixXd::Zero(p.w_v.rows(), p.w_v.cols());
  g.d_ln_gamma = Eigen::VectorXd::Zero(d_model);
  g.d_ln_beta = Eigen::VectorXd::Zero(d_model);
  if (d_v_c) {
    *d_v_c = Eigen::MatrixXd::Zero(tape.v_c.rows(), tape.v_c.cols());
  }

  // LayerNorm backward, rowwise.
  Eigen::MatrixXd dz(n, d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::ArrayXd dy = d_out.row(i).transpose().array();
    Eigen::ArrayXd xh = tape.xhat.row(i).transpose().array();
    g.d_ln_gamma.array() += dy * xh;
    g.d_ln_beta.array() += dy;
    Eigen::ArrayXd gdy = dy * p.ln_gamma.array();
    double mean_gdy = gdy.mean();
    double mean_gdy_xh = (gdy * xh).mean();
    dz.row(i) = ((gdy - mean_gdy - xh * mean_gdy_xh) * tape.inv_std(i)).matrix().transpose();
  }

  if (tape.empty_context) return g;

  // ReLU mask on the pre-activation.
  Eigen::MatrixXd dh = (tape.h.array() > 0.0).select(dz, 0.0);

  Eigen::MatrixXd dp = dh * tape.u.transpose();          // n x n_ctx
  Eigen::MatrixXd du = tape.probs.transpose() * dh;      // n_ctx x d_model
  g.d_w_v = tape.v_c.transpose() * du;
  if (d_v_c) *d_v_c = du * p.w_v.transpose();

  // Softmax Jacobian, rowwise: ds = p .* (dp - <dp, p>)
  Eigen::MatrixXd ds(dp.rows(), dp.cols());
  for (Eigen::Index i = 0; i < dp.rows(); ++i) {
    double dot = dp.row(i).cwiseProduct(tape.probs.row(i)).sum();
    Eigen::RowVectorXd shifted = (dp.row(i).array() - dot).matrix();
    ds.row(i) = tape.probs.row(i).cwiseProduct(shifted);
  }
  double scale = 1.0 / std::sqrt(static_cast<double>(p.d_key()));
  Eigen::MatrixXd dq = ds * tape.k_c * scale;  // n x d_key
  g.d_w_q = tape.a.transpose() * dq;
  g.d_a += dq * p.w_q.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

enum class GradCorrupt { kNone, kWq, kLnGamma };

struct GradCheckReport {
  int n_seeds = 0;
  double max_rel_err = 0.0;
  std::string worst_entry;
  double tolerance = 1e-4;
  bool pass = false;
  // max relative error per gradient group, in fixed order:
  // d_a, d_w_q, d_w_v, d_ln_gamma, d_ln_beta
  std::vector<std::pair<std::string, double>> group_max;
};

namespace detail {

inline double gc_rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-4});
}

inline double gc_loss(const FrameBatch& a, const FusionContext& ctx, const FusionParams& p,
                      const Eigen::MatrixXd& c) {
  auto [out, tape] = fusion_forward(a, ctx, p);
  return (out.array() * c.array()).sum();
}

}  // namespace detail

// Compares the analytic gradients against central finite differences on
// random small instances. `corrupt` deliberately breaks one gradient so the
// harness itself can be validated.
inline GradCheckReport run_gradcheck(int n_seeds, uint64_t base_seed, double step = 1e-5,
                                     double tolerance = 1e-4,
                                     GradCorrupt corrupt = GradCorrupt::kNone,
                                     int d_model_max = 8) {
  if (n_seeds < 1) throw InvalidArgumentError("run_gradcheck: n_seeds must be >= 1");
  if (d_model_max < 2) throw InvalidArgumentError("run_gradcheck: d_model_max must be >= 2");
  if (d_model_max > 16) {
    throw ConfigError("run_gradcheck: d_model_max " + std::to_string(d_model_max) +
                      " exceeds the finite-difference guard (16)");
  }
  GradCheckReport report;
  report.n_seeds = n_seeds;
  report.tolerance = tolerance;
  report.group_max = {
      {"d_a", 0.0}, {"d_w_q", 0.0}, {"d_w_v", 0.0}, {"d_ln_gamma", 0.0}, {"d_ln_beta", 0.0}};

  for (int s = 0; s < n_seeds; ++s) {
    Rng rng(mix64(base_seed, fnv1a("gradcheck"), static_cast<uint64_t>(s)));
    const Eigen::Index n = static_cast<Eigen::Index>(1 + rng.next_below(4));  // |A| <= 4
    const Eigen::Index d_model = static_cast<Eigen::Index>(
        2 + rng.next_below(static_cast<uint64_t>(d_model_max) - 1));          // <= d_model_max
    const Eigen::Index d_value = static_cast<Eigen::Index>(1 + rng.next_below(8));
    const Eigen::Index n_ctx =
        (s % 5 == 4) ? 0 : static_cast<Eigen::Index>(1 + rng.next_below(6));        // <= 6

    FusionParams p = init_fusion_params(static_cast<size_t>(d_model),
                                        static_cast<size_t>(d_model),
                                        static_cast<size_t>(d_value), rng.next());
    p.ln_eps = 1e-5;
    for (Eigen::Index i = 0; i < p.ln_gamma.size(); ++i) {
      p.ln_gamma(i) = 0.5 + rng.uniform();
      p.ln_beta(i) = rng.uniform(-0.5, 0.5);
    }

    FrameBatch a(n, d_model);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d_model; ++j) a(i, j) = rng.normal();
    }
    FusionContext ctx;
    ctx.k_c.resize(n_ctx, d_model);
    ctx.v_c.resize(n_ctx, d_value);
    for (Eigen::Index i = 0; i < n_ctx; ++i) {
      ctx.record_ids.push_back(static_cast<uint64_t>(i));
      for (Eigen::Index j = 0; j < d_model; ++j) ctx.k_c(i, j) = rng.normal();
      for (Eigen::Index j = 0; j < d_value; ++j) ctx.v_c(i, j) = rng.normal();
    }
    Eigen::MatrixXd c(n, d_model);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < d_model; ++j) c(i, j) = rng.normal();
    }

    auto [out, tape] = fusion_forward(a, ctx, p);
    FusionGrads g = fusion_backward(tape, c);
    if (corrupt == GradCorrupt::kWq && g.d_w_q.size() > 0) g.d_w_q(0, 0) += 0.5;
    if (corrupt == GradCorrupt::kLnGamma) g.d_ln_gamma(0) += 0.5;

    auto check = [&](size_t group, double analytic, double fd, const std::string& label) {
      double err = detail::gc_rel_err(analytic, fd);
      report.group_max[group].second = std::max(report.group_max[group].second, err);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_entry = "seed " + std::to_string(s) + " " + label;
      }
    };
    auto fd_matrix = [&](size_t group, Eigen::MatrixXd& target, const Eigen::MatrixXd& analytic,
                         const std::string& label) {
      for (Eigen::Index i = 0; i < target.rows(); ++i) {
        for (Eigen::Index j = 0; j < target.cols(); ++j) {
          double orig = target(i, j);
          target(i, j) = orig + step;
          double up = detail::gc_loss(a, ctx, p, c);
          target(i, j) = orig - step;
          double dn = detail::gc_loss(a, ctx, p, c);
          target(i, j) = orig;
          check(group, analytic(i, j), (up - dn) / (2.0 * step),
                label + "(" + std::to_string(i) + "," + std::to_string(j) + ")");
        }
      }
    };
    auto fd_vector = [&](size_t group, Eigen::VectorXd& target, const Eigen::VectorXd& analytic,
                         const std::string& label) {
      for (Eigen::Index i = 0; i < target.size(); ++i) {
        double orig = target(i);
        target(i) = orig + step;
        double up = detail::gc_loss(a, ctx, p, c);
        target(i) = orig - step;
        double dn = detail::gc_loss(a, ctx, p, c);
        target(i) = orig;
        check(group, analytic(i), (up - dn) / (2.0 * step), label + "(" + std::to_string(i) + ")");
      }
    };

    fd_matrix(1, p.w_q, g.d_w_q, "W_q");
    fd_matrix(2, p.w_v, g.d_w_v, "W_v");
    fd_vector(3, p.ln_gamma, g.d_ln_gamma, "ln_gamma");
    fd_vector(4, p.ln_beta, g.d_ln_beta, "ln_beta");
    fd_matrix(0, a, g.d_a, "A");
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace knnfuse
