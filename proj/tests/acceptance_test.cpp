// Release gate: one verdict line per shipped guarantee. Standalone binary
// rather than a Catch2 suite because several checks are long pinned-seed
// runs whose pass/fail must be readable at a glance in CI logs.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "knnfuse/experiments.hpp"
#include "knnfuse/fusion.hpp"
#include "test_support.hpp"

using namespace knnfuse;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int g_failures = 0;

void verdict(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("criterion %d %-18s %s  %s\n", id, name, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// Pinned configuration for the trend criteria (6-8). The margins below are
// frozen from the recorded reference run of exactly this configuration; the
// runs are deterministic, so the margins only absorb platform-level float
// variation.

TaskConfig pinned_task_config() {
  TaskConfig cfg;
  cfg.n_base = 64;
  cfg.n_rare_train = 800;  // long tail: most rare words are spoken at most once
  cfg.n_rare_test = 96;
  cfg.n_distractors = 96;
  cfg.n_train_fillers = 96;  // train retrieval sees junk neighbors too
  cfg.n_train_utt = 600;
  cfg.n_test_utt = 240;
  cfg.words_per_utt = 2;
  cfg.rare_per_utt = 1;
  cfg.frame_noise = 0.1;
  cfg.seed = 1;
  return cfg;
}

EncoderConfig pinned_encoder_config() {
  EncoderConfig cfg;
  cfg.n_layers = 6;
  cfg.d_model = 64;
  cfg.ffn_dim = 128;
  cfg.seed = 5;
  return cfg;
}

TrainConfig pinned_train_config() {
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 3e-4;
  cfg.seed = 17;
  return cfg;
}

AnnParams pinned_eval_ann() {
  AnnParams p;
  p.n_centroids = 64;
  p.opq_iters = 3;
  p.kmeans_iters = 10;
  p.seed = 7;
  return p;
}

constexpr size_t kPinnedEf = 128;
constexpr double kSweepMargin = 0.025;    // TER(overlap 0.0) - TER(overlap 0.9)
constexpr double kSwapMargin = 0.05;      // covering - stale rare-token accuracy
constexpr double kAblationTerMargin = 0.01;
constexpr double kAblationRareMargin = 0.02;

// ---------------------------------------------------------------------------

void crit1_gradients() {
  auto t0 = Clock::now();
  GradCheckReport rep = run_gradcheck(20, 1);
  double dt = seconds_since(t0);
  std::string groups;
  for (const auto& [name, err] : rep.group_max) groups += fmt(" %s %.2e", name.c_str(), err);
  verdict(1, "gradient-check", rep.pass && dt < 60.0,
          fmt("max_rel_err %.2e over 20 seeds in %.1fs,%s", rep.max_rel_err, dt,
              groups.c_str()));
}

void crit2_fusion_identity() {
  Rng rng(42);
  const size_t n = 5, d_model = 8, d_key = 6, d_value = 10, n_ctx = 7;
  FrameBatch a(n, d_model);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
  }
  FusionContext ctx;
  ctx.k_c.resize(n_ctx, d_key);
  ctx.v_c.resize(n_ctx, d_value);
  for (size_t i = 0; i < n_ctx; ++i) {
    ctx.record_ids.push_back(i);
    for (size_t j = 0; j < d_key; ++j) ctx.k_c(i, j) = rng.normal();
    for (size_t j = 0; j < d_value; ++j) ctx.v_c(i, j) = rng.normal();
  }
  FusionParams p = init_fusion_params(d_model, d_key, d_value, 3);

  // silenced value path reproduces the input exactly
  FusionParams silent = p;
  silent.w_v.setZero();
  silent.ln_beta.setZero();
  auto [out_silent, tape_silent] = fusion_forward(a, ctx, silent);
  bool identity = (out_silent.array() == a.array()).all();

  auto [out, tape] = fusion_forward(a, ctx, p);
  double row_sum_err = (tape.probs.rowwise().sum().array() - 1.0).abs().maxCoeff();

  std::vector<size_t> perm = Rng(9).permutation(n_ctx);
  FusionContext shuffled;
  shuffled.k_c.resize(n_ctx, d_key);
  shuffled.v_c.resize(n_ctx, d_value);
  for (size_t i = 0; i < n_ctx; ++i) {
    shuffled.record_ids.push_back(ctx.record_ids[perm[i]]);
    shuffled.k_c.row(i) = ctx.k_c.row(perm[i]);
    shuffled.v_c.row(i) = ctx.v_c.row(perm[i]);
  }
  auto [out_perm, tape_perm] = fusion_forward(a, shuffled, p);
  double perm_err = (out_perm - out).array().abs().maxCoeff();

  verdict(2, "fusion-identity", identity && row_sum_err < 1e-6 && perm_err < 1e-6,
          fmt("identity %s, softmax row-sum err %.1e, permutation err %.1e",
              identity ? "exact" : "BROKEN", row_sum_err, perm_err));
}

void crit3_exact_oracle() {
  auto t0 = Clock::now();
  Rng rng(2026);
  size_t stores = 0, exact_checks = 0, ann_stores = 0, ann_checks = 0;
  bool ok = true;
  std::string first_fail;

  for (int s = 0; s < 200 && ok; ++s) {
    const size_t n = 260 + rng.next_below(1741);           // [260, 2000]
    const size_t d = size_t{8} << rng.next_below(4);       // 8, 16, 32, 64
    const bool ties = rng.next_below(2) == 0;              // duplicate keys force ties
    std::vector<std::vector<float>> alphabet;
    if (ties) {
      for (int i = 0; i < 16; ++i) alphabet.push_back(testsup::random_vec(rng, d));
    }
    ExternalMemory mem(d, 1);
    for (size_t i = 0; i < n; ++i) {
      std::vector<float> key =
          ties ? alphabet[rng.next_below(alphabet.size())] : testsup::random_vec(rng, d);
      mem.append(testsup::make_record(i, std::move(key), {0.0f}, i));
    }
    ExactIndex index(mem);
    ++stores;

    std::vector<std::vector<float>> queries;
    for (int q = 0; q < 5; ++q) {
      queries.push_back(ties && q % 2 == 0 ? alphabet[rng.next_below(alphabet.size())]
                                           : testsup::random_vec(rng, d));
    }

    for (const auto& q : queries) {
      const size_t m = 1 + rng.next_below(16);
      std::vector<Neighbor> got = knn_exact(index, q, m);
      std::vector<Neighbor> want(n);
      for (size_t i = 0; i < n; ++i) {
        want[i] = Neighbor{squared_l2(q.data(), mem.record(i).key.data(), d),
                           mem.record(i).id};
      }
      std::sort(want.begin(), want.end());
      want.resize(std::min(m, n));
      ++exact_checks;
      if (got != want) {
        ok = false;
        first_fail = fmt("store %d (n=%zu d=%zu ties=%d): exact != naive oracle", s, n, d,
                         int(ties));
        break;
      }
    }

    if (ok && n <= 1000) {
      AnnParams p;
      p.d_target = d;
      p.n_subspaces = static_cast<int>(d / 4);
      p.M = 8;
      p.ef_construction = 64;
      p.n_centroids = 32;
      p.opq_iters = 2;
      p.kmeans_iters = 4;
      p.seed = mix64(99, s);
      AnnIndex ann = build_ann(mem, p);
      ++ann_stores;
      for (int q = 0; q < 3; ++q) {
        const size_t m = 1 + rng.next_below(12);
        std::vector<Neighbor> got = ann.search(queries[q], m, n);
        std::vector<Neighbor> want = ann.exhaustive_adc(queries[q], m);
        ++ann_checks;
        if (got != want) {
          ok = false;
          first_fail = fmt("store %d (n=%zu d=%zu): full-ef search != exhaustive ADC", s, n, d);
          break;
        }
      }
    }
  }

  double dt = seconds_since(t0);
  verdict(3, "exact-oracle", ok && dt < 300.0,
          ok ? fmt("%zu stores, %zu exact + %zu full-ef checks (%zu ANN builds) in %.1fs",
                   stores, exact_checks, ann_checks, ann_stores, dt)
             : first_fail);
}

void crit4_ann_quality() {
  auto t0 = Clock::now();
  const size_t n_clusters = 12500, members = 8, d = 64;
  Rng crng(3);
  std::vector<float> centers(n_clusters * d);
  for (auto& x : centers) x = static_cast<float>(crng.normal());
  ExternalMemory mem(d, 1);
  uint64_t rid = 0;
  for (size_t c = 0; c < n_clusters; ++c) {
    for (size_t i = 0; i < members; ++i) {
      MemoryRecord r;
      r.id = rid++;
      r.entry_id = c;
      r.key.resize(d);
      for (size_t j = 0; j < d; ++j) {
        r.key[j] = centers[c * d + j] + static_cast<float>(0.05 * crng.normal());
      }
      r.value = {0.0f};
      mem.append(std::move(r));
    }
  }
  AnnParams p;
  p.d_target = 64;
  p.n_subspaces = 16;
  p.M = 16;
  p.ef_construction = 200;
  p.n_centroids = 2048;
  p.seed = 0;
  AnnIndex index = build_ann(mem, p);
  double build_s = seconds_since(t0);

  Rng qrng(11);
  std::vector<std::vector<float>> queries;
  for (int i = 0; i < 200; ++i) {
    size_t c = qrng.next_below(n_clusters);
    std::vector<float> q(d);
    for (size_t j = 0; j < d; ++j) q[j] = centers[c * d + j] + static_cast<float>(0.05 * qrng.normal());
    queries.push_back(std::move(q));
  }
  double recall = recall_at_k(index, mem, queries, 8, 128);
  size_t comps = 0;
  for (const auto& q : queries) {
    SearchStats st{};
    index.search(q, 8, 128, &st);
    comps += st.distance_computations;
  }
  double comp_frac = static_cast<double>(comps) / queries.size() / static_cast<double>(mem.size());
  double dt = seconds_since(t0);
  verdict(4, "ann-quality", recall >= 0.90 && comp_frac < 0.05 && dt < 600.0,
          fmt("100k store: recall@8 %.4f at ef 128, %.2f%% of store scored per query, "
              "build %.0fs, total %.0fs",
              recall, 100.0 * comp_frac, build_s, dt));
}

void crit5_opq_sanity() {
  Rng rng(31);
  const size_t n = 4096, d = 64;
  auto run = [&](const char* label, const std::vector<float>& keys) {
    OpqConfig cfg;
    cfg.d_target = 64;
    cfg.n_subspaces = 16;
    cfg.iters = 10;
    cfg.kmeans_iters = 10;
    cfg.seed = 5;
    OpqTransform t = train_opq(keys, n, d, cfg);
    double resid = t.orthonormality_residual();
    bool monotone = true;
    for (size_t i = 1; i < t.objective_history.size(); ++i) {
      if (t.objective_history[i] > t.objective_history[i - 1] * (1.0 + 1e-12)) monotone = false;
    }
    bool ok = resid < 1e-6 && monotone && t.objective_history.size() == 11;
    return std::pair<bool, std::string>(
        ok, fmt("%s resid %.1e obj %.1f->%.1f%s", label, resid, t.objective_history.front(),
                t.objective_history.back(), monotone ? "" : " NON-MONOTONE"));
  };

  std::vector<float> iso(n * d);
  for (auto& x : iso) x = static_cast<float>(rng.normal());

  std::vector<float> clustered(n * d);
  std::vector<float> cl_centers(64 * d);
  for (auto& x : cl_centers) x = static_cast<float>(rng.normal());
  for (size_t i = 0; i < n; ++i) {
    size_t c = rng.next_below(64);
    for (size_t j = 0; j < d; ++j) {
      clustered[i * d + j] = cl_centers[c * d + j] + static_cast<float>(0.1 * rng.normal());
    }
  }

  std::vector<float> aniso(n * d);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) {
      aniso[i * d + j] = static_cast<float>(rng.normal() * std::pow(1.5, -double(j) / 8.0));
    }
  }

  auto [ok1, d1] = run("isotropic", iso);
  auto [ok2, d2] = run("clustered", clustered);
  auto [ok3, d3] = run("anisotropic", aniso);
  verdict(5, "opq-sanity", ok1 && ok2 && ok3, d1 + "; " + d2 + "; " + d3);
}

// Shared pinned model for criteria 6 and 7.
struct PinnedRun {
  SyntheticTask task;
  EncoderModel model;
  double train_s = 0.0;
};

PinnedRun train_pinned_model() {
  auto t0 = Clock::now();
  PinnedRun run{gen_synthetic_dataset(pinned_task_config()), {}, 0.0};
  EncoderConfig cfg = pinned_encoder_config();
  cfg.fusion_at = {3};
  run.model = init_encoder(cfg);
  ExternalMemory train_mem = task_memory(run.task, make_train_catalog(run.task));
  ExactIndex train_index(train_mem);
  RetrievalHandle h;
  h.memory = &train_mem;
  h.exact = &train_index;
  train_encoder(run.model, run.task.train, pinned_train_config(), &h);
  run.train_s = seconds_since(t0);
  return run;
}

void crit6_overlap_sweep(const PinnedRun& run) {
  auto t0 = Clock::now();
  SweepReport rep = overlap_sweep(run.model, run.task, pinned_eval_ann(), kPinnedEf);
  double rho = spearman(rep.overlaps(), rep.ters());
  double ter0 = rep.points.front().token_error_rate;
  double ter9 = rep.points[9].token_error_rate;
  double dt = run.train_s + seconds_since(t0);
  verdict(6, "overlap-sweep",
          rho <= -0.8 && ter0 - ter9 >= kSweepMargin && dt < 1800.0,
          fmt("spearman %.4f, TER %.4f at overlap 0.0 vs %.4f at 0.9 (margin %.4f >= %.3f), "
              "%.0fs incl. training",
              rho, ter0, ter9, ter0 - ter9, kSweepMargin, dt));
}

void crit7_catalog_swap(const PinnedRun& run) {
  std::vector<uint8_t> before = serialize_model(run.model);
  SwapReport rep = swap_catalog_eval(run.model, run.task, pinned_eval_ann(), kPinnedEf);
  std::vector<uint8_t> after = serialize_model(run.model);
  uint64_t sum_before = fnv1a_bytes(before.data(), before.size());
  uint64_t sum_after = fnv1a_bytes(after.data(), after.size());
  double gain = rep.covering.rare_token_accuracy - rep.stale.rare_token_accuracy;
  bool ok = gain >= kSwapMargin && rep.covering.rare_token_accuracy > rep.stale.rare_token_accuracy &&
            sum_before == sum_after && rep.stale.fingerprint == rep.covering.fingerprint;
  verdict(7, "catalog-swap", ok,
          fmt("rare-token acc %.4f stale -> %.4f covering (gain %.4f >= %.3f), checkpoint "
              "checksum %016llx unchanged %s",
              rep.stale.rare_token_accuracy, rep.covering.rare_token_accuracy, gain, kSwapMargin,
              static_cast<unsigned long long>(sum_before),
              sum_before == sum_after ? "yes" : "NO"));
}

void crit8_layer_ablation() {
  auto t0 = Clock::now();
  SyntheticTask task = gen_synthetic_dataset(pinned_task_config());
  AblationReport rep =
      layer_ablation(task, pinned_encoder_config(), pinned_train_config(), pinned_eval_ann(),
                     kPinnedEf, {{}, {3}, {1, 2, 3, 4, 5, 6}});
  const AblationArm* none = rep.find({});
  const AblationArm* mid = rep.find({3});
  const AblationArm* all = rep.find({1, 2, 3, 4, 5, 6});
  bool found = none && mid && all;
  bool beats = false;
  std::string detail = "missing arms";
  if (found) {
    auto wins = [&](const AblationArm& arm) {
      return arm.token_error_rate <= none->token_error_rate - kAblationTerMargin &&
             arm.rare_token_accuracy >= none->rare_token_accuracy + kAblationRareMargin;
    };
    beats = wins(*mid) && wins(*all);
    bool latency_sane = mid->latency_ratio > 1.0 && all->latency_ratio >= mid->latency_ratio * 0.9;
    detail = fmt("TER none %.4f, mid %.4f, all %.4f; rare acc %.4f / %.4f / %.4f; single-layer "
                 "latency ratio %.2f (reference figure: roughly a 15%% forward-pass increase at "
                 "production scale), all-layer %.2f; %.0fs",
                 none->token_error_rate, mid->token_error_rate, all->token_error_rate,
                 none->rare_token_accuracy, mid->rare_token_accuracy, all->rare_token_accuracy,
                 mid->latency_ratio, all->latency_ratio, seconds_since(t0));
    beats = beats && latency_sane;
  }
  verdict(8, "layer-ablation", found && beats, detail);
}

void crit9_persistence() {
  testsup::TempDir dir;
  Rng rng(2027);
  bool round_trips = true;
  std::string detail;

  ExternalMemory mem = testsup::random_memory(120, 16, 8, 21);
  AnnParams ip;
  ip.d_target = 16;
  ip.n_subspaces = 4;
  ip.M = 8;
  ip.ef_construction = 64;
  ip.n_centroids = 16;
  ip.opq_iters = 2;
  ip.kmeans_iters = 4;
  ip.seed = 9;
  AnnIndex index = build_ann(mem, ip);
  TaskConfig tc;
  tc.n_base = 8;
  tc.n_rare_train = 6;
  tc.n_rare_test = 5;
  tc.n_distractors = 5;
  tc.n_train_utt = 6;
  tc.n_test_utt = 4;
  tc.words_per_utt = 2;
  tc.rare_per_utt = 1;
  tc.seed = 5;
  SyntheticTask task = gen_synthetic_dataset(tc);
  EncoderConfig ec;
  ec.n_layers = 2;
  ec.d_model = 16;
  ec.ffn_dim = 24;
  ec.fusion_at = {1};
  ec.seed = 8;
  EncoderModel model = init_encoder(ec);

  const std::vector<uint8_t> mem_bytes = serialize_memory(mem);
  const std::vector<uint8_t> idx_bytes = serialize_index(index);
  const std::vector<uint8_t> ds_bytes = serialize_dataset(task);
  const std::vector<uint8_t> mdl_bytes = serialize_model(model);

  save_memory(mem, dir.file("m.knf"));
  save_index(index, dir.file("i.knf"));
  save_dataset(task, dir.file("d.knf"));
  save_model(model, dir.file("w.knf"));
  round_trips =
      serialize_memory(load_memory(dir.file("m.knf"))) == mem_bytes &&
      serialize_index(load_index(dir.file("i.knf"))) == idx_bytes &&
      serialize_dataset(load_dataset(dir.file("d.knf"))) == ds_bytes &&
      serialize_model(load_model(dir.file("w.knf"))) == mdl_bytes;

  const std::vector<const std::vector<uint8_t>*> originals = {&mem_bytes, &idx_bytes, &ds_bytes,
                                                              &mdl_bytes};
  size_t typed = 0, silent = 0, untyped = 0;
  for (int it = 0; it < 1000; ++it) {
    std::vector<uint8_t> bytes = *originals[rng.next_below(originals.size())];
    switch (rng.next_below(4)) {
      case 0:
        bytes.resize(rng.next_below(bytes.size()));
        break;
      case 1:
        bytes[rng.next_below(bytes.size())] ^= static_cast<uint8_t>(1 + rng.next_below(255));
        break;
      case 2:
        bytes.resize(1 + rng.next_below(bytes.size() - 1));
        bytes[rng.next_below(bytes.size())] ^= static_cast<uint8_t>(1 + rng.next_below(255));
        break;
      default:
        for (int extra = 0; extra < 3; ++extra) {
          bytes.push_back(static_cast<uint8_t>(rng.next_below(256)));
        }
        break;
    }
    try {
      // all four parsers see every corrupted buffer; each must reject it
      bool loaded = false;
      try { deserialize_memory(bytes.data(), bytes.size()); loaded = true; } catch (const Error&) {}
      try { deserialize_index(bytes); loaded = true; } catch (const Error&) {}
      try { deserialize_dataset(bytes.data(), bytes.size()); loaded = true; } catch (const Error&) {}
      try { deserialize_model(bytes); loaded = true; } catch (const Error&) {}
      if (loaded) ++silent; else ++typed;
    } catch (...) {
      ++untyped;
    }
  }
  bool fuzz_ok = typed == 1000 && silent == 0 && untyped == 0;
  verdict(9, "persistence", round_trips && fuzz_ok,
          fmt("round-trips %s; fuzz: %zu/1000 typed rejections, %zu silent loads, %zu untyped",
              round_trips ? "byte-identical" : "DIVERGED", typed, silent, untyped));
}

}  // namespace

int main() {
  std::printf("acceptance run\n");
  std::fflush(stdout);
  crit1_gradients();
  crit2_fusion_identity();
  crit3_exact_oracle();
  crit4_ann_quality();
  crit5_opq_sanity();
  PinnedRun run = train_pinned_model();
  crit6_overlap_sweep(run);
  crit7_catalog_swap(run);
  crit8_layer_ablation();
  crit9_persistence();
  std::printf("%s (%d of 9 failed)\n", g_failures == 0 ? "ALL PASS" : "FAILURES", g_failures);
  return g_failures;
}
