#pragma once

// Reusable experiment drivers over the task + encoder stack: the
// catalog-overlap sweep, the fusion-site ablation, and the catalog-swap
// comparison, each with a deterministic CSV emitter. The CLI subcommands and
// the acceptance checks are thin wrappers over these.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "knnfuse/ann.hpp"
#include "knnfuse/encoder.hpp"
#include "knnfuse/errors.hpp"
#include "knnfuse/task.hpp"

namespace knnfuse {

// ---------------------------------------------------------------------------
// Statistics

// Spearman rank correlation with average ranks on ties.
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: input lengths differ");
  if (xs.size() < 2) throw InvalidArgumentError("spearman: need at least two points");
  auto ranks = [](const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n, 0.0);
    size_t i = 0;
    while (i < n) {
      size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(xs);
  const std::vector<double> ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw DataError("spearman: an input is constant, correlation undefined");
  }
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Shared retrieval plumbing

// Owns the memory + ANN index for one evaluation catalog.
struct EvalSource {
  ExternalMemory memory;
  AnnIndex index;
  size_t ef_search = 128;

  RetrievalHandle handle() const {
    RetrievalHandle h;
    h.memory = &memory;
    h.ann = &index;
    h.ef_search = ef_search;
    return h;
  }
};

inline EvalSource make_eval_source(const SyntheticTask& task,
                                   const std::vector<CatalogEntry>& catalog,
                                   const AnnParams& params, size_t ef_search) {
  EvalSource src{task_memory(task, catalog), AnnIndex{}, ef_search};
  src.index = build_ann(src.memory, params);
  return src;
}

// ---------------------------------------------------------------------------
// Overlap sweep

struct SweepPoint {
  double overlap = 0.0;
  double token_error_rate = 0.0;
  double rare_token_accuracy = 0.0;
  size_t n_rare_frames = 0;
  double latency_fused_us = 0.0;
  double latency_plain_us = 0.0;
  std::string fingerprint;
};

struct SweepReport {
  std::vector<SweepPoint> points;

  std::vector<double> overlaps() const {
    std::vector<double> v;
    for (const auto& p : points) v.push_back(p.overlap);
    return v;
  }
  std::vector<double> ters() const {
    std::vector<double> v;
    for (const auto& p : points) v.push_back(p.token_error_rate);
    return v;
  }
};

inline std::vector<double> default_overlap_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(static_cast<double>(i) / 10.0);
  return grid;
}

// Evaluates one trained model against a fresh catalog + index per overlap
// point. The model is read-only: every row carries the same fingerprint.
inline SweepReport overlap_sweep(const EncoderModel& model, const SyntheticTask& task,
                                 const AnnParams& ann, size_t ef_search,
                                 const std::vector<double>& grid = default_overlap_grid()) {
  if (grid.empty()) throw InvalidArgumentError("overlap_sweep: empty overlap grid");
  SweepReport report;
  for (double overlap : grid) {
    EvalSource src = make_eval_source(task, make_test_catalog(task, overlap), ann, ef_search);
    RetrievalHandle h = src.handle();
    EvalReport rep = evaluate_encoder(model, task.test, &h, &task);
    SweepPoint pt;
    pt.overlap = overlap;
    pt.token_error_rate = rep.token_error_rate;
    pt.rare_token_accuracy = rep.rare_token_accuracy;
    pt.n_rare_frames = rep.n_rare_frames;
    pt.latency_fused_us = rep.latency_fused_us;
    pt.latency_plain_us = rep.latency_plain_us;
    pt.fingerprint = rep.fingerprint;
    report.points.push_back(std::move(pt));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Catalog swap

struct SwapArm {
  std::string catalog;
  double token_error_rate = 0.0;
  double rare_token_accuracy = 0.0;
  std::string fingerprint;
};

struct SwapReport {
  SwapArm stale;     // train-time catalog: the test split's rare words are absent
  SwapArm covering;  // test catalog at full overlap
};

// Same frozen model, two catalogs. The whole point of external memory: the
// swap changes retrieval quality while the weight fingerprint stays put.
inline SwapReport swap_catalog_eval(const EncoderModel& model, const SyntheticTask& task,
                                    const AnnParams& ann, size_t ef_search) {
  SwapReport report;
  {
    EvalSource src = make_eval_source(task, make_train_catalog(task), ann, ef_search);
    RetrievalHandle h = src.handle();
    EvalReport rep = evaluate_encoder(model, task.test, &h, &task);
    report.stale = {"stale", rep.token_error_rate, rep.rare_token_accuracy, rep.fingerprint};
  }
  {
    EvalSource src = make_eval_source(task, make_test_catalog(task, 1.0), ann, ef_search);
    RetrievalHandle h = src.handle();
    EvalReport rep = evaluate_encoder(model, task.test, &h, &task);
    report.covering = {"covering", rep.token_error_rate, rep.rare_token_accuracy,
                       rep.fingerprint};
  }
  return report;
}

// ---------------------------------------------------------------------------
// Fusion-site ablation

// Canonical site sets for an n-layer stack: none, first, middle, last, the
// middle pair, and every block.
inline std::vector<std::vector<int>> ablation_site_sets(int n_layers) {
  if (n_layers < 1) throw InvalidArgumentError("ablation_site_sets: n_layers must be >= 1");
  const int mid = (n_layers + 1) / 2;
  std::vector<std::vector<int>> sets;
  sets.push_back({});
  sets.push_back({1});
  if (mid != 1) sets.push_back({mid});
  if (n_layers != mid && n_layers != 1) sets.push_back({n_layers});
  if (mid + 1 <= n_layers && mid + 1 != n_layers) sets.push_back({mid, mid + 1});
  std::vector<int> all(static_cast<size_t>(n_layers));
  std::iota(all.begin(), all.end(), 1);
  if (n_layers > 1) sets.push_back(all);
  return sets;
}

inline std::string site_label(const std::vector<int>& sites) {
  if (sites.empty()) return "none";
  std::string out;
  for (size_t i = 0; i < sites.size(); ++i) {
    if (i > 0) out += ';';
    out += std::to_string(sites[i]);
  }
  return out;
}

struct AblationArm {
  std::vector<int> sites;
  double token_error_rate = 0.0;
  double rare_token_accuracy = 0.0;
  double latency_fused_us = 0.0;
  double latency_plain_us = 0.0;
  double latency_ratio = 0.0;  // fused over plain
  double final_train_loss = 0.0;
  std::string fingerprint;
};

struct AblationReport {
  std::vector<AblationArm> arms;

  const AblationArm* find(const std::vector<int>& sites) const {
    for (const auto& a : arms) {
      if (a.sites == sites) return &a;
    }
    return nullptr;
  }
};

// Trains one model per site set from a shared seed and scores each against
// the fully covering test catalog.
inline AblationReport layer_ablation(const SyntheticTask& task, const EncoderConfig& base_cfg,
                                     const TrainConfig& train_cfg, const AnnParams& ann,
                                     size_t ef_search,
                                     const std::vector<std::vector<int>>& site_sets) {
  if (site_sets.empty()) throw InvalidArgumentError("layer_ablation: no site sets");
  const std::vector<CatalogEntry> train_cat = make_train_catalog(task);
  ExternalMemory train_mem = task_memory(task, train_cat);
  ExactIndex train_index(train_mem);
  RetrievalHandle train_h;
  train_h.memory = &train_mem;
  train_h.exact = &train_index;

  EvalSource eval_src = make_eval_source(task, make_test_catalog(task, 1.0), ann, ef_search);
  RetrievalHandle eval_h = eval_src.handle();

  AblationReport report;
  for (const auto& sites : site_sets) {
    EncoderConfig cfg = base_cfg;
    cfg.fusion_at = sites;
    EncoderModel model = init_encoder(cfg);
    TrainResult tr =
        train_encoder(model, task.train, train_cfg, sites.empty() ? nullptr : &train_h);
    EvalReport rep = evaluate_encoder(model, task.test, &eval_h, &task);
    AblationArm arm;
    arm.sites = sites;
    arm.token_error_rate = rep.token_error_rate;
    arm.rare_token_accuracy = rep.rare_token_accuracy;
    arm.latency_fused_us = rep.latency_fused_us;
    arm.latency_plain_us = rep.latency_plain_us;
    arm.latency_ratio =
        rep.latency_plain_us > 0.0 ? rep.latency_fused_us / rep.latency_plain_us : 0.0;
    arm.final_train_loss = tr.epoch_loss.back();
    arm.fingerprint = rep.fingerprint;
    report.arms.push_back(std::move(arm));
  }
  return report;
}

// ---------------------------------------------------------------------------
// CSV emitters
//
// Latency columns are wall-clock measurements and sit at the end of each row;
// determinism comparisons drop them with strip_csv_columns.

namespace detail {

inline std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string sweep_csv(const SweepReport& report) {
  std::string out =
      "overlap,token_error_rate,rare_token_accuracy,n_rare_frames,fingerprint,"
      "latency_fused_us,latency_plain_us\n";
  for (const auto& p : report.points) {
    out += detail::csv_double(p.overlap) + ',' + detail::csv_double(p.token_error_rate) + ',' +
           detail::csv_double(p.rare_token_accuracy) + ',' + std::to_string(p.n_rare_frames) +
           ',' + p.fingerprint + ',' + detail::csv_double(p.latency_fused_us) + ',' +
           detail::csv_double(p.latency_plain_us) + '\n';
  }
  return out;
}

inline std::string swap_csv(const SwapReport& report) {
  std::string out = "catalog,token_error_rate,rare_token_accuracy,fingerprint\n";
  for (const SwapArm* arm : {&report.stale, &report.covering}) {
    out += arm->catalog + ',' + detail::csv_double(arm->token_error_rate) + ',' +
           detail::csv_double(arm->rare_token_accuracy) + ',' + arm->fingerprint + '\n';
  }
  return out;
}

inline std::string ablation_csv(const AblationReport& report) {
  std::string out =
      "sites,token_error_rate,rare_token_accuracy,final_train_loss,fingerprint,"
      "latency_fused_us,latency_plain_us,latency_ratio\n";
  for (const auto& a : report.arms) {
    out += site_label(a.sites) + ',' + detail::csv_double(a.token_error_rate) + ',' +
           detail::csv_double(a.rare_token_accuracy) + ',' +
           detail::csv_double(a.final_train_loss) + ',' + a.fingerprint + ',' +
           detail::csv_double(a.latency_fused_us) + ',' + detail::csv_double(a.latency_plain_us) +
           ',' + detail::csv_double(a.latency_ratio) + '\n';
  }
  return out;
}

// Drops the named header columns from a CSV string; used to compare reports
// while ignoring wall-clock fields.
inline std::string strip_csv_columns(const std::string& csv,
                                     const std::vector<std::string>& drop) {
  std::istringstream in(csv);
  std::string line;
  std::vector<size_t> keep;
  std::string out;
  bool header = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header) {
      for (size_t i = 0; i < cells.size(); ++i) {
        if (std::find(drop.begin(), drop.end(), cells[i]) == drop.end()) keep.push_back(i);
      }
      header = false;
    }
    bool first = true;
    for (size_t i : keep) {
      if (i >= cells.size()) continue;
      if (!first) out += ',';
      out += cells[i];
      first = false;
    }
    out += '\n';
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---------------------------------------------------------------------------
// key = value configuration text

// Minimal config format: one `key = value` per line, `#` starts a comment,
// blank lines ignored. Later keys override earlier ones.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(
    const std::string& text) {
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return std::string{};
    return s.substr(a, b - a + 1);
  };
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(lineno) + " has no '='");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) {
      throw FormatError("config line " + std::to_string(lineno) + " has an empty key");
    }
    entries.emplace_back(key, value);
  }
  return entries;
}

}  // namespace knnfuse
