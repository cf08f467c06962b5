#pragma once

// Toy speech encoder: a stack of pre-LN single-head transformer blocks with
// optional memory-fusion sites in front of chosen blocks. The model exists to
// exercise the fusion layer end to end: per-frame character classification
// where rare-word spellings are only reachable through retrieved values.
//
// All weights live in one flat parameter vector; slot descriptors map named
// sub-tensors onto it so the optimizer and the finite-difference checks can
// treat the model as a single function R^n -> loss.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "knnfuse/ann.hpp"
#include "knnfuse/embedders.hpp"
#include "knnfuse/errors.hpp"
#include "knnfuse/fusion.hpp"
#include "knnfuse/io.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/rng.hpp"
#include "knnfuse/task.hpp"

namespace knnfuse {

// ---------------------------------------------------------------------------
// Configuration

struct EncoderConfig {
  int n_layers = 6;
  int d_model = 64;
  int ffn_dim = 128;
  int vocab = kCharVocab;
  int d_value = static_cast<int>(spelling_d_value());
  int fusion_m = 8;
  std::vector<int> fusion_at;  // 1-based block indices; fusion runs before the block
  double dropout = 0.0;
  uint64_t seed = 1;

  void validate() const {
    if (n_layers < 1) throw ConfigError("encoder: n_layers must be >= 1");
    if (d_model < 1) throw ConfigError("encoder: d_model must be >= 1");
    if (ffn_dim < 1) throw ConfigError("encoder: ffn_dim must be >= 1");
    if (vocab < 2) throw ConfigError("encoder: vocab must be >= 2");
    if (vocab > 512) throw ConfigError("encoder: vocab must be <= 512");
    if (d_value < 1) throw ConfigError("encoder: d_value must be >= 1");
    if (fusion_m < 1) throw ConfigError("encoder: fusion_m must be >= 1");
    if (!(dropout >= 0.0) || dropout >= 1.0) {
      throw ConfigError("encoder: dropout must be in [0, 1)");
    }
    int prev = 0;
    for (int site : fusion_at) {
      if (site < 1 || site > n_layers) {
        throw ConfigError("encoder: fusion site " + std::to_string(site) + " outside [1, " +
                          std::to_string(n_layers) + "]");
      }
      if (site <= prev) throw ConfigError("encoder: fusion_at must be strictly increasing");
      prev = site;
    }
  }
};

// ---------------------------------------------------------------------------
// Parameter layout: named slots over one flat vector

namespace detail {

struct ParamSlot {
  size_t off = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

struct BlockSlots {
  ParamSlot ln1_gamma, ln1_beta;
  ParamSlot w_q, w_k, w_v, w_o;
  ParamSlot ln2_gamma, ln2_beta;
  ParamSlot w_1, b_1, w_2, b_2;
};

struct SiteSlots {
  ParamSlot w_q, w_v, ln_gamma, ln_beta;
};

struct EncoderLayout {
  std::vector<BlockSlots> blocks;
  std::vector<SiteSlots> sites;
  ParamSlot lnf_gamma, lnf_beta, w_out, b_out;
  size_t total = 0;
};

inline ParamSlot take_slot(size_t& cursor, Eigen::Index rows, Eigen::Index cols) {
  ParamSlot s{cursor, rows, cols};
  cursor += s.size();
  return s;
}

inline EncoderLayout make_layout(const EncoderConfig& cfg) {
  EncoderLayout lay;
  size_t cur = 0;
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index f = cfg.ffn_dim;
  for (int b = 0; b < cfg.n_layers; ++b) {
    BlockSlots bs;
    bs.ln1_gamma = take_slot(cur, d, 1);
    bs.ln1_beta = take_slot(cur, d, 1);
    bs.w_q = take_slot(cur, d, d);
    bs.w_k = take_slot(cur, d, d);
    bs.w_v = take_slot(cur, d, d);
    bs.w_o = take_slot(cur, d, d);
    bs.ln2_gamma = take_slot(cur, d, 1);
    bs.ln2_beta = take_slot(cur, d, 1);
    bs.w_1 = take_slot(cur, d, f);
    bs.b_1 = take_slot(cur, f, 1);
    bs.w_2 = take_slot(cur, f, d);
    bs.b_2 = take_slot(cur, d, 1);
    lay.blocks.push_back(bs);
  }
  for (size_t s = 0; s < cfg.fusion_at.size(); ++s) {
    SiteSlots ss;
    ss.w_q = take_slot(cur, d, d);
    ss.w_v = take_slot(cur, cfg.d_value, d);
    ss.ln_gamma = take_slot(cur, d, 1);
    ss.ln_beta = take_slot(cur, d, 1);
    lay.sites.push_back(ss);
  }
  lay.lnf_gamma = take_slot(cur, d, 1);
  lay.lnf_beta = take_slot(cur, d, 1);
  lay.w_out = take_slot(cur, d, cfg.vocab);
  lay.b_out = take_slot(cur, cfg.vocab, 1);
  lay.total = cur;
  return lay;
}

inline Eigen::Map<Eigen::MatrixXd> slot_mat(Eigen::VectorXd& p, const ParamSlot& s) {
  return {p.data() + s.off, s.rows, s.cols};
}
inline Eigen::Map<const Eigen::MatrixXd> slot_mat(const Eigen::VectorXd& p, const ParamSlot& s) {
  return {p.data() + s.off, s.rows, s.cols};
}
inline Eigen::Map<Eigen::VectorXd> slot_vec(Eigen::VectorXd& p, const ParamSlot& s) {
  return {p.data() + s.off, static_cast<Eigen::Index>(s.size())};
}
inline Eigen::Map<const Eigen::VectorXd> slot_vec(const Eigen::VectorXd& p, const ParamSlot& s) {
  return {p.data() + s.off, static_cast<Eigen::Index>(s.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

struct EncoderModel {
  EncoderConfig cfg;
  detail::EncoderLayout layout;
  Eigen::VectorXd params;

  size_t n_params() const { return layout.total; }
};

// Fresh model with seeded initialization. Fusion-site query projections start
// at identity so retrieval-aligned attention is live from step one; memory
// keys share the frame geometry, so identity scores are already meaningful.
inline EncoderModel init_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderModel model;
  model.cfg = cfg;
  model.layout = detail::make_layout(cfg);
  model.params = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.layout.total));
  Rng rng(mix64(cfg.seed, fnv1a("encoder-init")));
  auto fill = [&](const detail::ParamSlot& s, double scale) {
    auto v = detail::slot_vec(model.params, s);
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = scale * rng.normal();
  };
  auto ones = [&](const detail::ParamSlot& s) { detail::slot_vec(model.params, s).setOnes(); };
  const double ds = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double fs = 1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim));
  for (const auto& b : model.layout.blocks) {
    ones(b.ln1_gamma);
    fill(b.w_q, ds);
    fill(b.w_k, ds);
    fill(b.w_v, ds);
    fill(b.w_o, ds);
    ones(b.ln2_gamma);
    fill(b.w_1, ds);
    fill(b.w_2, fs);
  }
  const double vs = 1.0 / std::sqrt(static_cast<double>(cfg.d_value));
  for (const auto& s : model.layout.sites) {
    detail::slot_mat(model.params, s.w_q).setIdentity();
    fill(s.w_v, vs);
    ones(s.ln_gamma);
  }
  ones(model.layout.lnf_gamma);
  fill(model.layout.w_out, ds);
  return model;
}

// Config plus weights digested to a stable 16-hex-digit tag; any parameter or
// shape change moves it.
inline std::string weight_fingerprint(const EncoderModel& model) {
  uint64_t h = fnv1a("knf-encoder");
  auto fold_i32 = [&](int32_t v) { h = fnv1a_bytes(&v, sizeof(v), h); };
  fold_i32(model.cfg.n_layers);
  fold_i32(model.cfg.d_model);
  fold_i32(model.cfg.ffn_dim);
  fold_i32(model.cfg.vocab);
  fold_i32(model.cfg.d_value);
  fold_i32(model.cfg.fusion_m);
  fold_i32(static_cast<int32_t>(model.cfg.fusion_at.size()));
  for (int site : model.cfg.fusion_at) fold_i32(site);
  h = fnv1a_bytes(model.params.data(), static_cast<size_t>(model.params.size()) * sizeof(double),
                  h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Retrieval source

// Memory plus one index over its keys. With an exact index the memory pointer
// is optional (the index carries its own reference); the ANN path needs both.
struct RetrievalHandle {
  const ExternalMemory* memory = nullptr;
  const ExactIndex* exact = nullptr;
  const AnnIndex* ann = nullptr;
  size_t ef_search = 64;

  bool active() const { return exact != nullptr || (ann != nullptr && memory != nullptr); }
};

namespace detail {

inline FusionContext gather_site_context(const FrameBatch& x, const RetrievalHandle& r, int m) {
  if (r.exact != nullptr) return gather_context(x, *r.exact, m);
  return gather_context(x, *r.ann, *r.memory, m, r.ef_search);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward

enum class FusionMode {
  kActive,  // run fusion sites; empty context when no retrieval source is given
  kBypass,  // skip fusion sites entirely (the plain stack)
};

namespace detail {

constexpr double kEncLnEps = 1e-5;

struct BlockTape {
  Eigen::MatrixXd x_in;
  Eigen::MatrixXd xhat1;
  Eigen::VectorXd inv1;
  Eigen::MatrixXd a_in;
  Eigen::MatrixXd q, k, v;
  Eigen::MatrixXd probs;
  Eigen::MatrixXd ctx;
  Eigen::MatrixXd attn_mask;  // dropout masks; empty when dropout is off
  Eigen::MatrixXd x_mid;
  Eigen::MatrixXd xhat2;
  Eigen::VectorXd inv2;
  Eigen::MatrixXd f_in;
  Eigen::MatrixXd h_pre;
  Eigen::MatrixXd ffn_mask;
};

inline Eigen::MatrixXd row_ln_forward(const Eigen::MatrixXd& x,
                                      const Eigen::Ref<const Eigen::VectorXd>& gamma,
                                      const Eigen::Ref<const Eigen::VectorXd>& beta,
                                      Eigen::MatrixXd& xhat, Eigen::VectorXd& inv_std) {
  const Eigen::Index t = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(t, d);
  inv_std.resize(t);
  Eigen::MatrixXd out(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kEncLnEps);
    inv_std(i) = inv;
    xhat.row(i) = ((x.row(i).array() - mean) * inv).matrix();
    out.row(i) = xhat.row(i).cwiseProduct(gamma.transpose()) + beta.transpose();
  }
  return out;
}

inline Eigen::MatrixXd row_ln_backward(const Eigen::MatrixXd& d_out, const Eigen::MatrixXd& xhat,
                                       const Eigen::VectorXd& inv_std,
                                       const Eigen::Ref<const Eigen::VectorXd>& gamma,
                                       Eigen::Map<Eigen::VectorXd> d_gamma,
                                       Eigen::Map<Eigen::VectorXd> d_beta) {
  const Eigen::Index t = d_out.rows();
  const Eigen::Index d = d_out.cols();
  Eigen::MatrixXd dx(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    d_gamma += d_out.row(i).cwiseProduct(xhat.row(i)).transpose();
    d_beta += d_out.row(i).transpose();
    Eigen::RowVectorXd gdy = d_out.row(i).cwiseProduct(gamma.transpose());
    const double m1 = gdy.mean();
    const double m2 = gdy.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = ((gdy.array() - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
  }
  return dx;
}

inline void softmax_rows_inplace(Eigen::MatrixXd& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

inline Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  const double keep_scale = 1.0 / (1.0 - p);
  Eigen::MatrixXd mask(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      mask(i, j) = rng.uniform() >= p ? keep_scale : 0.0;
    }
  }
  return mask;
}

}  // namespace detail

struct EncoderTape {
  std::vector<detail::BlockTape> blocks;
  std::vector<FusionContext> site_ctx;  // per fusion site, in fusion_at order
  std::vector<FusionTape> site_tapes;
  bool bypassed = false;
  Eigen::MatrixXd x_final;
  Eigen::MatrixXd xhatf;
  Eigen::VectorXd invf;
  Eigen::MatrixXd h_final;
  Eigen::MatrixXd logits;
};

// Runs the stack on one utterance (frames: T x d_model) and returns per-frame
// logits (T x vocab). Pass a tape to record intermediates for the backward
// pass. Dropout fires only when `training` is set and cfg.dropout > 0; the
// mask stream is fully determined by `dropout_seed`.
inline Eigen::MatrixXd encoder_forward(const EncoderModel& model, const FrameBatch& frames,
                                       const RetrievalHandle* retrieval,
                                       EncoderTape* tape = nullptr,
                                       FusionMode mode = FusionMode::kActive,
                                       bool training = false, uint64_t dropout_seed = 0) {
  const EncoderConfig& cfg = model.cfg;
  if (frames.rows() < 1) throw InvalidArgumentError("encoder_forward: empty frame batch");
  if (frames.cols() != cfg.d_model) {
    throw ShapeError("encoder_forward: frames have " + std::to_string(frames.cols()) +
                     " columns, model expects " + std::to_string(cfg.d_model));
  }
  if (!frames.allFinite()) throw DataError("encoder_forward: non-finite frame input");

  const bool rec = tape != nullptr;
  if (rec) {
    tape->blocks.clear();
    tape->site_ctx.clear();
    tape->site_tapes.clear();
    tape->bypassed = mode == FusionMode::kBypass;
  }
  const bool use_dropout = training && cfg.dropout > 0.0;
  Rng drop_rng(mix64(dropout_seed, fnv1a("encoder-dropout")));

  const Eigen::VectorXd& p = model.params;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  Eigen::MatrixXd x = frames;
  size_t site = 0;

  for (int b = 0; b < cfg.n_layers; ++b) {
    if (mode == FusionMode::kActive && site < cfg.fusion_at.size() &&
        cfg.fusion_at[site] == b + 1) {
      FusionContext ctx;
      if (retrieval != nullptr && retrieval->active()) {
        ctx = detail::gather_site_context(x, *retrieval, cfg.fusion_m);
      } else {
        ctx.k_c.resize(0, cfg.d_model);
        ctx.v_c.resize(0, cfg.d_value);
      }
      const auto& ss = model.layout.sites[site];
      FusionParams fp;
      fp.w_q = detail::slot_mat(p, ss.w_q);
      fp.w_v = detail::slot_mat(p, ss.w_v);
      fp.ln_gamma = detail::slot_vec(p, ss.ln_gamma);
      fp.ln_beta = detail::slot_vec(p, ss.ln_beta);
      auto [fused, ftape] = fusion_forward(x, ctx, fp);
      x = std::move(fused);
      if (rec) {
        tape->site_ctx.push_back(std::move(ctx));
        tape->site_tapes.push_back(std::move(ftape));
      }
      ++site;
    }

    const auto& bs = model.layout.blocks[b];
    Eigen::MatrixXd xhat1;
    Eigen::VectorXd inv1;
    Eigen::MatrixXd a_in = detail::row_ln_forward(x, detail::slot_vec(p, bs.ln1_gamma),
                                                  detail::slot_vec(p, bs.ln1_beta), xhat1, inv1);
    Eigen::MatrixXd q = a_in * detail::slot_mat(p, bs.w_q);
    Eigen::MatrixXd k = a_in * detail::slot_mat(p, bs.w_k);
    Eigen::MatrixXd v = a_in * detail::slot_mat(p, bs.w_v);
    Eigen::MatrixXd probs = (q * k.transpose()) * scale;
    detail::softmax_rows_inplace(probs);
    Eigen::MatrixXd ctx = probs * v;
    Eigen::MatrixXd attn = ctx * detail::slot_mat(p, bs.w_o);
    Eigen::MatrixXd attn_mask;
    if (use_dropout) {
      attn_mask = detail::dropout_mask(attn.rows(), attn.cols(), cfg.dropout, drop_rng);
      attn = attn.cwiseProduct(attn_mask);
    }
    Eigen::MatrixXd x_mid = x + attn;

    Eigen::MatrixXd xhat2;
    Eigen::VectorXd inv2;
    Eigen::MatrixXd f_in = detail::row_ln_forward(x_mid, detail::slot_vec(p, bs.ln2_gamma),
                                                  detail::slot_vec(p, bs.ln2_beta), xhat2, inv2);
    Eigen::MatrixXd h_pre =
        (f_in * detail::slot_mat(p, bs.w_1)).rowwise() +
        detail::slot_vec(p, bs.b_1).transpose();
    Eigen::MatrixXd ffn = (h_pre.cwiseMax(0.0) * detail::slot_mat(p, bs.w_2)).rowwise() +
                          detail::slot_vec(p, bs.b_2).transpose();
    Eigen::MatrixXd ffn_mask;
    if (use_dropout) {
      ffn_mask = detail::dropout_mask(ffn.rows(), ffn.cols(), cfg.dropout, drop_rng);
      ffn = ffn.cwiseProduct(ffn_mask);
    }
    Eigen::MatrixXd x_out = x_mid + ffn;

    if (rec) {
      detail::BlockTape bt;
      bt.x_in = std::move(x);
      bt.xhat1 = std::move(xhat1);
      bt.inv1 = std::move(inv1);
      bt.a_in = std::move(a_in);
      bt.q = std::move(q);
      bt.k = std::move(k);
      bt.v = std::move(v);
      bt.probs = std::move(probs);
      bt.ctx = std::move(ctx);
      bt.attn_mask = std::move(attn_mask);
      bt.x_mid = x_mid;
      bt.xhat2 = std::move(xhat2);
      bt.inv2 = std::move(inv2);
      bt.f_in = std::move(f_in);
      bt.h_pre = std::move(h_pre);
      bt.ffn_mask = std::move(ffn_mask);
      tape->blocks.push_back(std::move(bt));
    }
    x = std::move(x_out);
  }

  Eigen::MatrixXd xhatf;
  Eigen::VectorXd invf;
  Eigen::MatrixXd h_final =
      detail::row_ln_forward(x, detail::slot_vec(p, model.layout.lnf_gamma),
                             detail::slot_vec(p, model.layout.lnf_beta), xhatf, invf);
  Eigen::MatrixXd logits = (h_final * detail::slot_mat(p, model.layout.w_out)).rowwise() +
                           detail::slot_vec(p, model.layout.b_out).transpose();
  if (rec) {
    tape->x_final = std::move(x);
    tape->xhatf = std::move(xhatf);
    tape->invf = std::move(invf);
    tape->h_final = std::move(h_final);
    tape->logits = logits;
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Loss

struct LossGrad {
  double loss = 0.0;
  Eigen::MatrixXd d_logits;
  size_t n_correct = 0;
};

// Mean per-frame cross-entropy with softmax over the label vocabulary.
inline LossGrad softmax_xent(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  if (static_cast<size_t>(logits.rows()) != labels.size()) {
    throw ShapeError("softmax_xent: " + std::to_string(logits.rows()) + " logit rows vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (logits.rows() < 1) throw InvalidArgumentError("softmax_xent: empty batch");
  LossGrad out;
  out.d_logits.resize(logits.rows(), logits.cols());
  const double inv_t = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int label = labels[static_cast<size_t>(i)];
    if (label < 0 || label >= logits.cols()) {
      throw InvalidArgumentError("softmax_xent: label " + std::to_string(label) +
                                 " outside vocab of " + std::to_string(logits.cols()));
    }
    Eigen::Index arg = 0;
    const double mx = logits.row(i).maxCoeff(&arg);
    Eigen::RowVectorXd ex = (logits.row(i).array() - mx).exp().matrix();
    const double z = ex.sum();
    out.loss += -(logits(i, label) - mx - std::log(z));
    if (arg == label) ++out.n_correct;
    out.d_logits.row(i) = ex / z;
    out.d_logits(i, label) -= 1.0;
    out.d_logits.row(i) *= inv_t;
  }
  out.loss *= inv_t;
  return out;
}

// ---------------------------------------------------------------------------
// Backward

// Gradient of the loss with respect to one retrieved value row, keyed by the
// record that supplied the row. Consumed by the value-table optimizer hook.
struct ValueRowGrad {
  uint64_t record_id = 0;
  Eigen::VectorXd grad;
};

// Full analytic backward over the flat parameter vector. The tape must come
// from an encoder_forward call on this model. Value-row gradients are
// collected only when a sink is supplied.
inline Eigen::VectorXd encoder_backward(const EncoderModel& model, const EncoderTape& tape,
                                        const Eigen::MatrixXd& d_logits,
                                        std::vector<ValueRowGrad>* value_grads = nullptr) {
  const EncoderConfig& cfg = model.cfg;
  if (tape.blocks.size() != static_cast<size_t>(cfg.n_layers)) {
    throw InvalidArgumentError("encoder_backward: tape does not match the model");
  }
  if (d_logits.rows() != tape.logits.rows() || d_logits.cols() != tape.logits.cols()) {
    throw ShapeError("encoder_backward: d_logits shape does not match the recorded logits");
  }
  const Eigen::VectorXd& p = model.params;
  Eigen::VectorXd grads = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.layout.total));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  detail::slot_mat(grads, model.layout.w_out) += tape.h_final.transpose() * d_logits;
  detail::slot_vec(grads, model.layout.b_out) += d_logits.colwise().sum().transpose();
  Eigen::MatrixXd d_h = d_logits * detail::slot_mat(p, model.layout.w_out).transpose();
  Eigen::MatrixXd dx = detail::row_ln_backward(
      d_h, tape.xhatf, tape.invf, detail::slot_vec(p, model.layout.lnf_gamma),
      detail::slot_vec(grads, model.layout.lnf_gamma),
      detail::slot_vec(grads, model.layout.lnf_beta));

  size_t site = tape.bypassed ? 0 : cfg.fusion_at.size();
  for (int b = cfg.n_layers - 1; b >= 0; --b) {
    const auto& bs = model.layout.blocks[b];
    const auto& bt = tape.blocks[static_cast<size_t>(b)];

    Eigen::MatrixXd d_ffn = dx;
    if (bt.ffn_mask.size() != 0) d_ffn = d_ffn.cwiseProduct(bt.ffn_mask);
    Eigen::MatrixXd h = bt.h_pre.cwiseMax(0.0);
    detail::slot_mat(grads, bs.w_2) += h.transpose() * d_ffn;
    detail::slot_vec(grads, bs.b_2) += d_ffn.colwise().sum().transpose();
    Eigen::MatrixXd dh =
        (d_ffn * detail::slot_mat(p, bs.w_2).transpose())
            .cwiseProduct((bt.h_pre.array() > 0.0).cast<double>().matrix());
    detail::slot_mat(grads, bs.w_1) += bt.f_in.transpose() * dh;
    detail::slot_vec(grads, bs.b_1) += dh.colwise().sum().transpose();
    Eigen::MatrixXd d_f_in = dh * detail::slot_mat(p, bs.w_1).transpose();
    Eigen::MatrixXd d_mid = detail::row_ln_backward(
        d_f_in, bt.xhat2, bt.inv2, detail::slot_vec(p, bs.ln2_gamma),
        detail::slot_vec(grads, bs.ln2_gamma), detail::slot_vec(grads, bs.ln2_beta));
    d_mid += dx;

    Eigen::MatrixXd d_attn = d_mid;
    if (bt.attn_mask.size() != 0) d_attn = d_attn.cwiseProduct(bt.attn_mask);
    detail::slot_mat(grads, bs.w_o) += bt.ctx.transpose() * d_attn;
    Eigen::MatrixXd d_ctx = d_attn * detail::slot_mat(p, bs.w_o).transpose();
    Eigen::MatrixXd d_probs = d_ctx * bt.v.transpose();
    Eigen::MatrixXd d_v = bt.probs.transpose() * d_ctx;
    Eigen::MatrixXd d_scores(bt.probs.rows(), bt.probs.cols());
    for (Eigen::Index i = 0; i < bt.probs.rows(); ++i) {
      const double dot = d_probs.row(i).cwiseProduct(bt.probs.row(i)).sum();
      d_scores.row(i) = (bt.probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
    }
    d_scores *= scale;
    Eigen::MatrixXd d_q = d_scores * bt.k;
    Eigen::MatrixXd d_k = d_scores.transpose() * bt.q;
    detail::slot_mat(grads, bs.w_q) += bt.a_in.transpose() * d_q;
    detail::slot_mat(grads, bs.w_k) += bt.a_in.transpose() * d_k;
    detail::slot_mat(grads, bs.w_v) += bt.a_in.transpose() * d_v;
    Eigen::MatrixXd d_a_in = d_q * detail::slot_mat(p, bs.w_q).transpose() +
                             d_k * detail::slot_mat(p, bs.w_k).transpose() +
                             d_v * detail::slot_mat(p, bs.w_v).transpose();
    Eigen::MatrixXd d_ln1 = detail::row_ln_backward(
        d_a_in, bt.xhat1, bt.inv1, detail::slot_vec(p, bs.ln1_gamma),
        detail::slot_vec(grads, bs.ln1_gamma), detail::slot_vec(grads, bs.ln1_beta));
    dx = d_mid + d_ln1;

    if (site > 0 && cfg.fusion_at[site - 1] == b + 1) {
      --site;
      const auto& ss = model.layout.sites[site];
      Eigen::MatrixXd d_v_c;
      FusionGrads fg =
          fusion_backward(tape.site_tapes[site], dx, value_grads != nullptr ? &d_v_c : nullptr);
      detail::slot_mat(grads, ss.w_q) += fg.d_w_q;
      detail::slot_mat(grads, ss.w_v) += fg.d_w_v;
      detail::slot_vec(grads, ss.ln_gamma) += fg.d_ln_gamma;
      detail::slot_vec(grads, ss.ln_beta) += fg.d_ln_beta;
      if (value_grads != nullptr) {
        const FusionContext& ctx = tape.site_ctx[site];
        for (size_t r = 0; r < ctx.record_ids.size(); ++r) {
          value_grads->push_back(
              {ctx.record_ids[r], d_v_c.row(static_cast<Eigen::Index>(r)).transpose()});
        }
      }
      dx = std::move(fg.d_a);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 3e-4;
  int epochs = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  uint64_t seed = 1;
  bool train_values = false;  // push fusion gradients into a one-hot value table

  void validate() const {
    if (!std::isfinite(lr) || lr < 0.0) throw ConfigError("train: lr must be finite and >= 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(beta1 >= 0.0) || beta1 >= 1.0) throw ConfigError("train: beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0) || beta2 >= 1.0) throw ConfigError("train: beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
    if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
  }
};

// Optional trainable-value path: gradients collected at fusion sites update
// the one-hot table rows, and the touched memory rows are refreshed so later
// retrievals see the new values.
struct ValueTrainHook {
  ValueEmbedder* values = nullptr;
  ExternalMemory* memory = nullptr;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean per-utterance loss, one entry per epoch
  size_t steps = 0;
};

inline TrainResult train_encoder(EncoderModel& model, const std::vector<RenderedUtt>& data,
                                 const TrainConfig& tc,
                                 const RetrievalHandle* retrieval = nullptr,
                                 ValueTrainHook* hook = nullptr) {
  tc.validate();
  if (data.empty()) throw InvalidArgumentError("train_encoder: empty training set");
  const size_t d_value = static_cast<size_t>(model.cfg.d_value);
  std::unordered_map<uint64_t, std::vector<size_t>> entry_rows;
  if (tc.train_values) {
    if (hook == nullptr || hook->values == nullptr || hook->memory == nullptr) {
      throw ConfigError("train_encoder: train_values requires a value hook");
    }
    if (hook->values->mode() != ValueEmbedder::Mode::kOneHot) {
      throw ConfigError("train_encoder: the value hook needs a OneHot embedder");
    }
    if (hook->values->d_value() != d_value || hook->memory->d_value() != d_value) {
      throw ShapeError("train_encoder: value hook d_value does not match the model");
    }
    for (size_t i = 0; i < hook->memory->size(); ++i) {
      entry_rows[hook->memory->record(i).entry_id].push_back(i);
    }
  }

  const Eigen::Index n = model.params.size();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(n);
  std::vector<double> vm1, vm2;
  if (tc.train_values) {
    vm1.assign(hook->values->table().size(), 0.0);
    vm2.assign(hook->values->table().size(), 0.0);
  }

  TrainResult result;
  size_t step = 0;
  for (int e = 0; e < tc.epochs; ++e) {
    Rng order_rng(mix64(tc.seed, fnv1a("epoch-shuffle"), static_cast<uint64_t>(e)));
    std::vector<size_t> order = order_rng.permutation(data.size());
    double loss_sum = 0.0;
    for (size_t idx : order) {
      const RenderedUtt& utt = data[idx];
      EncoderTape tape;
      LossGrad lg;
      try {
        Eigen::MatrixXd logits =
            encoder_forward(model, utt.frames, retrieval, &tape, FusionMode::kActive, true,
                            mix64(tc.seed, fnv1a("dropout"), static_cast<uint64_t>(step)));
        lg = softmax_xent(logits, utt.labels);
      } catch (const DataError& e) {
        throw TrainingError("non-finite forward at step " + std::to_string(step) + ": " +
                            e.what());
      }
      if (!std::isfinite(lg.loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step));
      }
      std::vector<ValueRowGrad> vgrads;
      Eigen::VectorXd grads =
          encoder_backward(model, tape, lg.d_logits, tc.train_values ? &vgrads : nullptr);
      if (!grads.allFinite()) {
        throw TrainingError("non-finite gradient at step " + std::to_string(step));
      }
      if (tc.grad_clip > 0.0) {
        const double norm = grads.norm();
        if (norm > tc.grad_clip) grads *= tc.grad_clip / norm;
      }
      ++step;
      const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      m1 = tc.beta1 * m1 + (1.0 - tc.beta1) * grads;
      m2.array() = tc.beta2 * m2.array() + (1.0 - tc.beta2) * grads.array().square();
      model.params.array() -=
          tc.lr * (m1.array() / bc1) / ((m2.array() / bc2).sqrt() + tc.adam_eps);

      if (tc.train_values && !vgrads.empty()) {
        std::map<uint64_t, Eigen::VectorXd> by_entry;
        for (const ValueRowGrad& g : vgrads) {
          const size_t row = hook->memory->index_of(g.record_id);
          if (row == ExternalMemory::npos) {
            throw LookupError("value hook: retrieved record " + std::to_string(g.record_id) +
                              " is not in the hook memory");
          }
          const uint64_t entry = hook->memory->record(row).entry_id;
          auto [it, fresh] = by_entry.try_emplace(entry, g.grad);
          if (!fresh) it->second += g.grad;
        }
        std::vector<float>& table = hook->values->table();
        for (const auto& [entry, grad] : by_entry) {
          const size_t base = entry * d_value;
          if (base + d_value > table.size()) {
            throw LookupError("value hook: entry " + std::to_string(entry) +
                              " outside the value table");
          }
          for (size_t j = 0; j < d_value; ++j) {
            const double g = grad(static_cast<Eigen::Index>(j));
            vm1[base + j] = tc.beta1 * vm1[base + j] + (1.0 - tc.beta1) * g;
            vm2[base + j] = tc.beta2 * vm2[base + j] + (1.0 - tc.beta2) * g * g;
            table[base + j] -= static_cast<float>(
                tc.lr * (vm1[base + j] / bc1) / (std::sqrt(vm2[base + j] / bc2) + tc.adam_eps));
          }
          std::vector<float> row(table.begin() + static_cast<std::ptrdiff_t>(base),
                                 table.begin() + static_cast<std::ptrdiff_t>(base + d_value));
          auto rows_it = entry_rows.find(entry);
          if (rows_it != entry_rows.end()) {
            for (size_t ridx : rows_it->second) hook->memory->set_value(ridx, row);
          }
        }
      }
      loss_sum += lg.loss;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(data.size()));
  }
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double loss = 0.0;
  double token_error_rate = 0.0;
  double rare_token_accuracy = 0.0;  // frame accuracy restricted to rare-word frames
  double latency_fused_us = 0.0;     // mean per-utterance forward, retrieval included
  double latency_plain_us = 0.0;     // mean per-utterance forward, fusion sites bypassed
  size_t n_utterances = 0;
  size_t n_frames = 0;
  size_t n_rare_frames = 0;
  std::string fingerprint;
};

// Scores a split with and without the fusion path. Rare-frame accuracy needs
// the task to resolve word kinds; without it only the aggregate rates fill in.
inline EvalReport evaluate_encoder(const EncoderModel& model,
                                   const std::vector<RenderedUtt>& split,
                                   const RetrievalHandle* retrieval,
                                   const SyntheticTask* task = nullptr) {
  if (split.empty()) throw InvalidArgumentError("evaluate_encoder: empty evaluation set");
  using clock = std::chrono::steady_clock;
  EvalReport rep;
  rep.fingerprint = weight_fingerprint(model);
  rep.n_utterances = split.size();
  double loss_sum = 0.0;
  size_t errors = 0;
  size_t rare_hits = 0;
  double fused_us = 0.0;
  double plain_us = 0.0;
  for (const RenderedUtt& utt : split) {
    const auto t0 = clock::now();
    Eigen::MatrixXd logits = encoder_forward(model, utt.frames, retrieval);
    const auto t1 = clock::now();
    encoder_forward(model, utt.frames, nullptr, nullptr, FusionMode::kBypass);
    const auto t2 = clock::now();
    fused_us += std::chrono::duration<double, std::micro>(t1 - t0).count();
    plain_us += std::chrono::duration<double, std::micro>(t2 - t1).count();
    LossGrad lg = softmax_xent(logits, utt.labels);
    loss_sum += lg.loss;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      const bool hit = arg == utt.labels[static_cast<size_t>(i)];
      if (!hit) ++errors;
      if (task != nullptr) {
        const WordKind kind = task->kind(utt.frame_word[static_cast<size_t>(i)]);
        if (kind == WordKind::kRareTrain || kind == WordKind::kRareTest) {
          ++rep.n_rare_frames;
          if (hit) ++rare_hits;
        }
      }
    }
    rep.n_frames += static_cast<size_t>(logits.rows());
  }
  rep.loss = loss_sum / static_cast<double>(split.size());
  rep.token_error_rate = static_cast<double>(errors) / static_cast<double>(rep.n_frames);
  rep.rare_token_accuracy =
      rep.n_rare_frames == 0
          ? 0.0
          : static_cast<double>(rare_hits) / static_cast<double>(rep.n_rare_frames);
  rep.latency_fused_us = fused_us / static_cast<double>(split.size());
  rep.latency_plain_us = plain_us / static_cast<double>(split.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference check of the whole stack

struct EncoderGradCheck {
  double max_rel_err = 0.0;
  size_t n_params = 0;
};

// Central-difference check of every parameter against the analytic backward,
// run on a seeded micro-model with a live retrieval source. Guarded to small
// widths; the check is O(n_params) forwards.
inline EncoderGradCheck encoder_gradcheck(const EncoderConfig& cfg, uint64_t seed,
                                          int n_frames = 3) {
  if (cfg.d_model > 16) {
    throw ConfigError("encoder_gradcheck: d_model must be <= 16 for the exhaustive check");
  }
  cfg.validate();
  if (n_frames < 1) throw InvalidArgumentError("encoder_gradcheck: n_frames must be >= 1");
  Rng rng(mix64(seed, fnv1a("encoder-gradcheck")));

  ExternalMemory mem(static_cast<size_t>(cfg.d_model), static_cast<size_t>(cfg.d_value));
  for (uint64_t id = 0; id < 6; ++id) {
    MemoryRecord rec;
    rec.id = id;
    rec.entry_id = id;
    rec.key.resize(static_cast<size_t>(cfg.d_model));
    rec.value.resize(static_cast<size_t>(cfg.d_value));
    for (float& x : rec.key) x = static_cast<float>(rng.normal());
    for (float& x : rec.value) x = static_cast<float>(rng.normal());
    mem.append(std::move(rec));
  }
  ExactIndex exact(mem);
  RetrievalHandle handle;
  handle.memory = &mem;
  handle.exact = &exact;

  Eigen::MatrixXd frames(n_frames, cfg.d_model);
  for (Eigen::Index i = 0; i < frames.rows(); ++i) {
    for (Eigen::Index j = 0; j < frames.cols(); ++j) frames(i, j) = rng.normal();
  }
  std::vector<int> labels(static_cast<size_t>(n_frames));
  for (int& l : labels) l = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab)));

  EncoderModel model = init_encoder(cfg);
  EncoderTape tape;
  Eigen::MatrixXd logits = encoder_forward(model, frames, &handle, &tape);
  LossGrad lg = softmax_xent(logits, labels);
  Eigen::VectorXd analytic = encoder_backward(model, tape, lg.d_logits);

  const double h = 1e-5;
  EncoderGradCheck out;
  out.n_params = model.n_params();
  auto loss_at = [&](Eigen::Index i, double delta) {
    const double saved = model.params(i);
    model.params(i) = saved + delta;
    const double loss = softmax_xent(encoder_forward(model, frames, &handle), labels).loss;
    model.params(i) = saved;
    return loss;
  };
  for (Eigen::Index i = 0; i < model.params.size(); ++i) {
    const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
    const double an = analytic(i);
    const double rel =
        std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
    out.max_rel_err = std::max(out.max_rel_err, rel);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kModelMagic[9] = "KNFMDL1";
inline constexpr uint32_t kModelVersion = 1;

inline std::vector<uint8_t> serialize_model(const EncoderModel& model) {
  ByteWriter w;
  w.write_raw(kModelMagic, 8);
  w.write<uint32_t>(kModelVersion);
  w.write<int32_t>(model.cfg.n_layers);
  w.write<int32_t>(model.cfg.d_model);
  w.write<int32_t>(model.cfg.ffn_dim);
  w.write<int32_t>(model.cfg.vocab);
  w.write<int32_t>(model.cfg.d_value);
  w.write<int32_t>(model.cfg.fusion_m);
  w.write<double>(model.cfg.dropout);
  w.write<uint64_t>(model.cfg.seed);
  w.write<uint32_t>(static_cast<uint32_t>(model.cfg.fusion_at.size()));
  for (int site : model.cfg.fusion_at) w.write<int32_t>(site);
  w.write<uint64_t>(static_cast<uint64_t>(model.params.size()));
  for (Eigen::Index i = 0; i < model.params.size(); ++i) w.write<double>(model.params(i));
  return seal_bytes(w);
}

inline EncoderModel deserialize_model(const std::vector<uint8_t>& bytes) {
  ByteReader r = sealed_reader(bytes.data(), bytes.size(), kModelMagic, "model");
  const auto version = r.read<uint32_t>("model version");
  if (version != kModelVersion) {
    throw FormatError("unsupported model version " + std::to_string(version));
  }
  EncoderConfig cfg;
  cfg.n_layers = r.read<int32_t>("n_layers");
  cfg.d_model = r.read<int32_t>("d_model");
  cfg.ffn_dim = r.read<int32_t>("ffn_dim");
  cfg.vocab = r.read<int32_t>("vocab");
  cfg.d_value = r.read<int32_t>("d_value");
  cfg.fusion_m = r.read<int32_t>("fusion_m");
  cfg.dropout = r.read<double>("dropout");
  cfg.seed = r.read<uint64_t>("seed");
  const auto n_sites = r.read<uint32_t>("fusion site count");
  if (n_sites > static_cast<uint32_t>(std::max(cfg.n_layers, 0))) {
    throw CorruptionError("model declares " + std::to_string(n_sites) + " fusion sites");
  }
  cfg.fusion_at.resize(n_sites);
  for (uint32_t i = 0; i < n_sites; ++i) cfg.fusion_at[i] = r.read<int32_t>("fusion site");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("model config failed validation: ") + e.what());
  }
  EncoderModel model;
  model.cfg = cfg;
  model.layout = detail::make_layout(cfg);
  const auto n_params = r.read<uint64_t>("parameter count");
  if (n_params != model.layout.total) {
    throw CorruptionError("model holds " + std::to_string(n_params) + " parameters, layout needs " +
                          std::to_string(model.layout.total));
  }
  model.params.resize(static_cast<Eigen::Index>(n_params));
  for (Eigen::Index i = 0; i < model.params.size(); ++i) {
    const double v = r.read<double>("parameter");
    if (!std::isfinite(v)) {
      throw CorruptionError("non-finite parameter at position " + std::to_string(i));
    }
    model.params(i) = v;
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after model payload");
  return model;
}

inline void save_model(const EncoderModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_model(model));
}

inline EncoderModel load_model(const std::filesystem::path& path) {
  return deserialize_model(read_file_bytes(path));
}

}  // namespace knnfuse
