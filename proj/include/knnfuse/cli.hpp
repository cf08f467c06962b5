#pragma once

// Command-line front end. Every subcommand resolves its parameters from
// defaults, then an optional `key = value` config file, then command-line
// flags (flags win), writes a resolved-config snapshot next to its primary
// output, and stamps report CSVs with a fingerprint of that snapshot.
//
// Exit codes: 0 success, 1 failed check (gradcheck), 2 input error,
// 3 file format/version error, 4 shape/compatibility error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "knnfuse/ann.hpp"
#include "knnfuse/embedders.hpp"
#include "knnfuse/encoder.hpp"
#include "knnfuse/errors.hpp"
#include "knnfuse/experiments.hpp"
#include "knnfuse/fusion.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/task.hpp"

namespace knnfuse {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitFormat = 3;
inline constexpr int kExitIncompat = 4;

namespace detail {

template <class T>
T config_value(const std::string& key, const std::string& text);

template <>
inline std::string config_value<std::string>(const std::string&, const std::string& text) {
  return text;
}

template <>
inline bool config_value<bool>(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
}

template <class T>
T config_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (in.fail() || !in.eof()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

template <>
inline int config_value<int>(const std::string& key, const std::string& text) {
  return config_number<int>(key, text);
}
template <>
inline uint64_t config_value<uint64_t>(const std::string& key, const std::string& text) {
  return config_number<uint64_t>(key, text);
}
template <>
inline double config_value<double>(const std::string& key, const std::string& text) {
  return config_number<double>(key, text);
}

inline std::string render_value(const std::string& v) { return v; }
inline std::string render_value(bool v) { return v ? "1" : "0"; }
inline std::string render_value(int v) { return std::to_string(v); }
inline std::string render_value(uint64_t v) { return std::to_string(v); }
inline std::string render_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Binds one subcommand's variables to both CLI11 flags and config-file keys.
// Config values apply only where the command line left the option untouched,
// so flags always override the file.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {
    cmd->add_option("--config", config_path_, "optional key = value config file");
  }

  template <class T>
  CLI::Option* bind(const std::string& key, T& var, const std::string& help) {
    CLI::Option* opt = cmd_->add_option("--" + key, var, help);
    entries_.push_back({key, opt,
                        [&var, key](const std::string& text) {
                          var = detail::config_value<T>(key, text);
                        },
                        [&var] { return detail::render_value(var); }});
    return opt;
  }

  CLI::Option* bind_flag(const std::string& key, bool& var, const std::string& help) {
    CLI::Option* opt = cmd_->add_flag("--" + key, var, help);
    entries_.push_back({key, opt,
                        [&var, key](const std::string& text) {
                          var = detail::config_value<bool>(key, text);
                        },
                        [&var] { return detail::render_value(var); }});
    return opt;
  }

  // Reads the config file (if one was given) and fills in unset options.
  void resolve() const {
    if (config_path_.empty()) return;
    const auto entries = parse_config_text(read_text_file(config_path_));
    for (const auto& [key, value] : entries) {
      auto it = std::find_if(entries_.begin(), entries_.end(),
                             [&](const Entry& e) { return e.key == key; });
      if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
      if (it->opt->count() == 0) it->set(value);
    }
  }

  // Full resolved state, one sorted `key = value` line per option.
  std::string snapshot() const {
    std::vector<std::string> lines;
    for (const auto& e : entries_) lines.push_back(e.key + " = " + e.render());
    std::sort(lines.begin(), lines.end());
    std::string out;
    for (const auto& l : lines) {
      out += l;
      out += '\n';
    }
    return out;
  }

  std::string fingerprint() const {
    const std::string snap = snapshot();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a_bytes(snap.data(), snap.size())));
    return buf;
  }

  void write_snapshot(const std::filesystem::path& primary_output) const {
    write_text_file(primary_output.string() + ".resolved.config", snapshot());
  }

 private:
  struct Entry {
    std::string key;
    CLI::Option* opt;
    std::function<void(const std::string&)> set;
    std::function<std::string()> render;
  };

  CLI::App* cmd_;
  std::string config_path_;
  std::vector<Entry> entries_;
};

namespace detail {

// Inserts a constant column before the first wall-clock (latency/ratio)
// column, keeping the convention that clock columns close each row.
inline std::string insert_csv_column(const std::string& csv, const std::string& name,
                                     const std::string& value) {
  std::istringstream in(csv);
  std::string line;
  std::string out;
  size_t pos = std::string::npos;
  bool header = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header) {
      pos = cells.size();
      for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].rfind("latency", 0) == 0) {
          pos = i;
          break;
        }
      }
      cells.insert(cells.begin() + static_cast<std::ptrdiff_t>(pos), name);
      header = false;
    } else {
      const size_t at = std::min(pos, cells.size());
      cells.insert(cells.begin() + static_cast<std::ptrdiff_t>(at), value);
    }
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out += ',';
      out += cells[i];
    }
    out += '\n';
  }
  return out;
}

// Fusion-site list: "none" or semicolon-separated 1-based block indices.
inline std::vector<int> parse_sites(const std::string& text) {
  if (text.empty() || text == "none") return {};
  std::vector<int> sites;
  std::istringstream in(text);
  std::string tok;
  while (std::getline(in, tok, ';')) {
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      throw InvalidArgumentError("bad fusion site '" + tok + "' in '" + text + "'");
    }
    if (used != tok.size() || v < 1) {
      throw InvalidArgumentError("bad fusion site '" + tok + "' in '" + text + "'");
    }
    sites.push_back(v);
  }
  return sites;
}

// Pipe-separated list of site sets, e.g. "none|3|3;4".
inline std::vector<std::vector<int>> parse_site_sets(const std::string& text) {
  std::vector<std::vector<int>> sets;
  std::istringstream in(text);
  std::string tok;
  while (std::getline(in, tok, '|')) sets.push_back(parse_sites(tok));
  return sets;
}

// Query file: one whitespace-separated float vector per line, `#` comments.
inline std::vector<std::vector<float>> read_query_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open query file " + path.string());
  std::vector<std::vector<float>> queries;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<float> q;
    std::string tok;
    while (ls >> tok) {
      q.push_back(static_cast<float>(parse_number(tok, line_no, "query component")));
    }
    if (q.empty()) continue;
    if (!queries.empty() && q.size() != queries.front().size()) {
      throw FormatError("query file line " + std::to_string(line_no) + " has " +
                        std::to_string(q.size()) + " components, expected " +
                        std::to_string(queries.front().size()));
    }
    queries.push_back(std::move(q));
  }
  if (queries.empty()) throw InvalidArgumentError("query file " + path.string() + " is empty");
  return queries;
}

inline std::string format_tsv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// Shared flag blocks -------------------------------------------------------

struct AnnFlags {
  size_t d_target = 0;  // 0 = match the memory's key dim
  int subspaces = 16;
  int graph_degree = 16;
  int ef_construction = 200;
  int centroids = 2048;
  int opq_iters = 10;
  int kmeans_iters = 25;
  size_t train_sample = 65536;
  uint64_t seed = 0;

  void bind(ConfigBinder& b) {
    b.bind("d-target", d_target, "OPQ target dim (0 = memory key dim)");
    b.bind("subspaces", subspaces, "PQ subspace count");
    b.bind("graph-degree", graph_degree, "HNSW connections per node");
    b.bind("ef-construction", ef_construction, "HNSW build beam width");
    b.bind("centroids", centroids, "coarse quantizer size");
    b.bind("opq-iters", opq_iters, "OPQ alternations");
    b.bind("kmeans-iters", kmeans_iters, "k-means iterations per codebook");
    b.bind("train-sample", train_sample, "max training vectors for OPQ/PQ");
    b.bind("ann-seed", seed, "index build seed");
  }

  AnnParams params(size_t memory_d_key) const {
    AnnParams p;
    p.d_target = d_target == 0 ? memory_d_key : d_target;
    p.n_subspaces = subspaces;
    p.M = graph_degree;
    p.ef_construction = ef_construction;
    p.n_centroids = centroids;
    p.opq_iters = opq_iters;
    p.kmeans_iters = kmeans_iters;
    p.train_sample = train_sample;
    p.seed = seed;
    return p;
  }
};

// Smaller eval-time defaults: catalogs at desk scale hold a few thousand
// records, where a 2048-centroid coarse layer would be degenerate.
struct EvalAnnFlags : AnnFlags {
  EvalAnnFlags() {
    centroids = 64;
    opq_iters = 3;
    kmeans_iters = 10;
    seed = 7;
  }
};

struct TaskFlags {
  TaskConfig cfg;

  void bind(ConfigBinder& b) {
    b.bind("n-base", cfg.n_base, "base vocabulary size");
    b.bind("n-rare-train", cfg.n_rare_train, "rare words available at training time");
    b.bind("n-rare-test", cfg.n_rare_test, "rare words reserved for the test split");
    b.bind("n-distractors", cfg.n_distractors, "filler entries for test catalogs");
    b.bind("n-train-fillers", cfg.n_train_fillers, "filler entries for the train catalog");
    b.bind("train-utts", cfg.n_train_utt, "training utterances");
    b.bind("test-utts", cfg.n_test_utt, "test utterances");
    b.bind("words-per-utt", cfg.words_per_utt, "words per utterance");
    b.bind("rare-per-utt", cfg.rare_per_utt, "rare words per utterance");
    b.bind("frame-noise", cfg.frame_noise, "additive frame noise scale");
    b.bind("task-seed", cfg.seed, "dataset seed");
    b.bind("d-key", cfg.key_cfg.d_key, "frame/key dimension");
    b.bind("voices", cfg.key_cfg.n_voices, "voices per catalog entry");
    b.bind("frames-per-char", cfg.key_cfg.frames_per_char, "frames rendered per character");
    b.bind("key-seed", cfg.key_cfg.seed, "key embedder seed");
  }
};

struct EncoderFlags {
  int layers = 6;
  size_t d_model = 64;
  size_t ffn = 128;
  std::string sites = "1";
  double dropout = 0.0;
  uint64_t seed = 1;

  void bind(ConfigBinder& b, bool with_sites = true) {
    b.bind("layers", layers, "transformer blocks");
    b.bind("d-model", d_model, "model width");
    b.bind("ffn", ffn, "feed-forward hidden width");
    if (with_sites) b.bind("sites", sites, "fusion sites, e.g. '1' or '3;4' or 'none'");
    b.bind("dropout", dropout, "sublayer dropout rate");
    b.bind("enc-seed", seed, "weight init seed");
  }

  EncoderConfig config(const SyntheticTask& task) const {
    EncoderConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d_model;
    cfg.ffn_dim = ffn;
    cfg.fusion_at = parse_sites(sites);
    cfg.dropout = dropout;
    cfg.seed = seed;
    cfg.vocab = kCharVocab;
    cfg.d_value = spelling_d_value();
    if (!cfg.fusion_at.empty() && cfg.d_model != task.cfg.key_cfg.d_key) {
      throw ShapeError("encoder d_model " + std::to_string(cfg.d_model) +
                       " must match the dataset key dim " +
                       std::to_string(task.cfg.key_cfg.d_key) + " for retrieval");
    }
    return cfg;
  }
};

struct TrainFlags {
  int epochs = 8;
  double lr = 3e-4;
  double grad_clip = 0.0;
  uint64_t seed = 17;

  void bind(ConfigBinder& b) {
    b.bind("epochs", epochs, "training epochs");
    b.bind("lr", lr, "Adam learning rate");
    b.bind("grad-clip", grad_clip, "global gradient-norm clip (0 = off)");
    b.bind("train-seed", seed, "shuffle seed");
  }

  TrainConfig config() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.lr = lr;
    tc.grad_clip = grad_clip;
    tc.seed = seed;
    return tc;
  }
};

// Checks model/dataset compatibility before any retrieval-bearing run.
inline void check_model_task(const EncoderModel& model, const SyntheticTask& task) {
  if (model.cfg.fusion_at.empty()) return;
  if (model.cfg.d_model != task.cfg.key_cfg.d_key) {
    throw ShapeError("model d_model " + std::to_string(model.cfg.d_model) +
                     " does not match the dataset key dim " +
                     std::to_string(task.cfg.key_cfg.d_key));
  }
  if (model.cfg.d_value != spelling_d_value()) {
    throw ShapeError("model d_value " + std::to_string(model.cfg.d_value) +
                     " does not match the spelling value dim " +
                     std::to_string(spelling_d_value()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"external-memory contextual biasing pipeline"};
  app.require_subcommand(1);
  int rc = kExitOk;

  // ----- catalog ------------------------------------------------------------
  CLI::App* catalog = app.add_subcommand("catalog", "catalog to key/value memory");
  catalog->require_subcommand(1);

  {
    CLI::App* cmd = catalog->add_subcommand("build", "embed a text catalog into a memory file");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto catalog_path = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    auto values_mode = std::make_shared<std::string>("spelling");
    auto vectors_path = std::make_shared<std::string>();
    auto d_value = std::make_shared<size_t>(64);
    auto key_cfg = std::make_shared<KeyEmbedderConfig>();
    binder->bind("catalog", *catalog_path, "catalog text file, one entry per line")->required();
    binder->bind("out", *out_path, "output memory file")->required();
    binder->bind("values", *values_mode, "value embedder: spelling|onehot|pretrained|imported");
    binder->bind("vectors", *vectors_path, "vector file for pretrained/imported values");
    binder->bind("d-value", *d_value, "value dim for onehot values");
    binder->bind("d-key", key_cfg->d_key, "key dimension");
    binder->bind("voices", key_cfg->n_voices, "voices per entry");
    binder->bind("frames-per-char", key_cfg->frames_per_char, "frames per character");
    binder->bind("seed", key_cfg->seed, "embedder seed");
    cmd->callback([=] {
      binder->resolve();
      const auto entries = read_catalog_file(*catalog_path);
      ValueEmbedder values = [&] {
        if (*values_mode == "spelling") {
          std::map<uint64_t, std::vector<float>> by_id;
          for (const auto& e : entries) by_id[e.id] = spelling_vector(e.text);
          return ValueEmbedder::imported(std::move(by_id));
        }
        if (*values_mode == "onehot") {
          uint64_t max_id = 0;
          for (const auto& e : entries) max_id = std::max(max_id, e.id);
          return ValueEmbedder::one_hot(max_id + 1, *d_value, key_cfg->seed);
        }
        if (*values_mode == "pretrained") return ValueEmbedder::pretrained_file(*vectors_path);
        if (*values_mode == "imported") return ValueEmbedder::imported_file(*vectors_path);
        throw InvalidArgumentError("unknown values mode '" + *values_mode + "'");
      }();
      const ExternalMemory mem =
          build_memory_from_catalog(entries, *key_cfg, values, key_cfg->n_voices);
      save_memory(mem, *out_path);
      binder->write_snapshot(*out_path);
      const MemoryStats stats = memory_stats(mem);
      std::cout << "entries " << entries.size() << " records " << stats.count << " d_key "
                << stats.d_key << " d_value " << stats.d_value << " key_norm_mean "
                << detail::format_tsv_double(stats.key_norm_mean) << "\n";
    });
  }

  {
    CLI::App* cmd =
        catalog->add_subcommand("ingest", "pair precomputed key/value vectors into a memory file");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto catalog_path = std::make_shared<std::string>();
    auto keys_path = std::make_shared<std::string>();
    auto values_path = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    binder->bind("catalog", *catalog_path, "catalog text file")->required();
    binder->bind("keys", *keys_path, "key vector TSV, id then components")->required();
    binder->bind("values", *values_path, "value vector TSV, id then components")->required();
    binder->bind("out", *out_path, "output memory file")->required();
    cmd->callback([=] {
      binder->resolve();
      const auto entries = read_catalog_file(*catalog_path);
      const ExternalMemory mem = ingest_precomputed(*keys_path, *values_path, entries);
      save_memory(mem, *out_path);
      binder->write_snapshot(*out_path);
      const MemoryStats stats = memory_stats(mem);
      std::cout << "records " << stats.count << " d_key " << stats.d_key << " d_value "
                << stats.d_value << "\n";
    });
  }

  // ----- index --------------------------------------------------------------
  CLI::App* index = app.add_subcommand("index", "approximate-KNN index over a memory");
  index->require_subcommand(1);

  {
    CLI::App* cmd = index->add_subcommand("build", "build an OPQ+PQ+HNSW index");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto memory_path = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    auto ann = std::make_shared<detail::AnnFlags>();
    binder->bind("memory", *memory_path, "input memory file")->required();
    binder->bind("out", *out_path, "output index file")->required();
    ann->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const ExternalMemory mem = load_memory(*memory_path);
      const AnnIndex idx = build_ann(mem, ann->params(mem.d_key()));
      save_index(idx, *out_path);
      binder->write_snapshot(*out_path);
      std::cout << "records " << idx.size() << " subspaces " << idx.opq().n_subspaces
                << " coarse_centroids " << idx.coarse_centroid_count() << "\n";
    });
  }

  {
    CLI::App* cmd = index->add_subcommand("query", "run queries against an index");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto index_path = std::make_shared<std::string>();
    auto queries_path = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    auto m = std::make_shared<int>(8);
    auto ef = std::make_shared<size_t>(128);
    binder->bind("index", *index_path, "index file")->required();
    binder->bind("queries", *queries_path, "query vectors, one per line")->required();
    binder->bind("out", *out_path, "output TSV")->required();
    binder->bind("m", *m, "neighbors per query");
    binder->bind("ef", *ef, "search beam width");
    cmd->callback([=] {
      binder->resolve();
      const AnnIndex idx = load_index(*index_path);
      const auto queries = detail::read_query_file(*queries_path);
      std::string out = "query_id\trank\trecord_id\tdistance\n";
      for (size_t qi = 0; qi < queries.size(); ++qi) {
        const auto neighbors = idx.search(queries[qi], static_cast<size_t>(*m), *ef);
        for (size_t r = 0; r < neighbors.size(); ++r) {
          out += std::to_string(qi) + '\t' + std::to_string(r) + '\t' +
                 std::to_string(neighbors[r].record_id) + '\t' +
                 detail::format_tsv_double(neighbors[r].distance) + '\n';
        }
      }
      write_text_file(*out_path, out);
      binder->write_snapshot(*out_path);
      std::cout << "queries " << queries.size() << " m " << *m << " ef " << *ef << "\n";
    });
  }

  {
    CLI::App* cmd = index->add_subcommand("bench", "latency/recall benchmark");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto index_path = std::make_shared<std::string>();
    auto memory_path = std::make_shared<std::string>();
    auto queries_path = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto m = std::make_shared<int>(8);
    auto ef = std::make_shared<size_t>(128);
    auto with_oracle = std::make_shared<bool>(false);
    binder->bind("index", *index_path, "index file")->required();
    binder->bind("queries", *queries_path, "query vectors, one per line")->required();
    binder->bind("report", *report_path, "output CSV")->required();
    binder->bind("memory", *memory_path, "memory file (required with --with-oracle)");
    binder->bind("m", *m, "neighbors per query");
    binder->bind("ef", *ef, "search beam width");
    binder->bind_flag("with-oracle", *with_oracle, "also compute recall against exact search");
    cmd->callback([=] {
      binder->resolve();
      const AnnIndex idx = load_index(*index_path);
      const auto queries = detail::read_query_file(*queries_path);
      const BenchResult bench = bench_query(idx, queries, static_cast<size_t>(*m), *ef);
      std::string header = "n_queries,m,ef_search,dist_comps_per_query";
      std::string row = std::to_string(bench.n_queries) + ',' + std::to_string(*m) + ',' +
                        std::to_string(*ef) + ',' +
                        detail::format_tsv_double(bench.distance_computations_per_query);
      if (*with_oracle) {
        if (memory_path->empty()) {
          throw InvalidArgumentError("--with-oracle needs --memory for the exact baseline");
        }
        const ExternalMemory mem = load_memory(*memory_path);
        const double recall = recall_at_k(idx, mem, queries, static_cast<size_t>(*m), *ef);
        header += ",recall_at_m";
        row += ',' + detail::format_tsv_double(recall);
      }
      header += ",latency_p50_us,latency_p95_us";
      row += ',' + detail::format_tsv_double(bench.p50_latency_us) + ',' +
             detail::format_tsv_double(bench.p95_latency_us);
      const std::string csv = detail::insert_csv_column(header + '\n' + row + '\n',
                                                        "config_fingerprint",
                                                        binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      std::cout << csv;
    });
  }

  // ----- task ---------------------------------------------------------------
  CLI::App* task_cmd = app.add_subcommand("task", "synthetic spelling task");
  task_cmd->require_subcommand(1);

  {
    CLI::App* cmd = task_cmd->add_subcommand("gen", "generate a dataset file");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto out_path = std::make_shared<std::string>();
    auto flags = std::make_shared<detail::TaskFlags>();
    binder->bind("out", *out_path, "output dataset file")->required();
    flags->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = gen_synthetic_dataset(flags->cfg);
      save_dataset(task, *out_path);
      binder->write_snapshot(*out_path);
      std::cout << "train_utts " << task.train.size() << " test_utts " << task.test.size()
                << " words " << task.words.size() << "\n";
    });
  }

  // ----- train ----------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand("train", "train an encoder on a dataset");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto dataset_path = std::make_shared<std::string>();
    auto model_out = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto enc = std::make_shared<detail::EncoderFlags>();
    auto train = std::make_shared<detail::TrainFlags>();
    binder->bind("dataset", *dataset_path, "dataset file")->required();
    binder->bind("model-out", *model_out, "output checkpoint file")->required();
    binder->bind("report", *report_path, "per-epoch loss CSV")->required();
    enc->bind(*binder);
    train->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = load_dataset(*dataset_path);
      EncoderModel model = init_encoder(enc->config(task));

      std::optional<ExternalMemory> train_mem;
      std::optional<ExactIndex> train_index;
      RetrievalHandle handle;
      const bool fused = !model.cfg.fusion_at.empty();
      if (fused) {
        train_mem.emplace(task_memory(task, make_train_catalog(task)));
        train_index.emplace(*train_mem);
        handle.memory = &*train_mem;
        handle.exact = &*train_index;
      }
      const TrainResult result =
          train_encoder(model, task.train, train->config(), fused ? &handle : nullptr);
      save_model(model, *model_out);

      std::string csv = "epoch,loss\n";
      for (size_t e = 0; e < result.epoch_loss.size(); ++e) {
        csv += std::to_string(e) + ',' + detail::format_tsv_double(result.epoch_loss[e]) + '\n';
      }
      csv = detail::insert_csv_column(csv, "config_fingerprint", binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      std::cout << "final_loss " << detail::format_tsv_double(result.epoch_loss.back())
                << " weight_fingerprint " << weight_fingerprint(model) << "\n";
    });
  }

  // ----- eval -----------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto dataset_path = std::make_shared<std::string>();
    auto model_path = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto overlap = std::make_shared<double>(1.0);
    auto no_retrieval = std::make_shared<bool>(false);
    auto ef = std::make_shared<size_t>(128);
    auto ann = std::make_shared<detail::EvalAnnFlags>();
    binder->bind("dataset", *dataset_path, "dataset file")->required();
    binder->bind("model", *model_path, "checkpoint file")->required();
    binder->bind("report", *report_path, "output CSV")->required();
    binder->bind("overlap", *overlap, "test-catalog coverage of rare test words");
    binder->bind_flag("no-retrieval", *no_retrieval, "evaluate without a retrieval source");
    binder->bind("ef", *ef, "search beam width");
    ann->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = load_dataset(*dataset_path);
      const EncoderModel model = load_model(*model_path);
      detail::check_model_task(model, task);

      EvalReport rep;
      if (*no_retrieval) {
        rep = evaluate_encoder(model, task.test, nullptr, &task);
      } else {
        const EvalSource src = make_eval_source(
            task, make_test_catalog(task, *overlap),
            ann->params(task.cfg.key_cfg.d_key), *ef);
        const RetrievalHandle handle = src.handle();
        rep = evaluate_encoder(model, task.test, &handle, &task);
      }
      std::string csv =
          "overlap,token_error_rate,rare_token_accuracy,n_rare_frames,fingerprint,"
          "latency_fused_us,latency_plain_us\n";
      csv += (*no_retrieval ? std::string("none") : detail::format_tsv_double(*overlap)) + ',' +
             detail::format_tsv_double(rep.token_error_rate) + ',' +
             detail::format_tsv_double(rep.rare_token_accuracy) + ',' +
             std::to_string(rep.n_rare_frames) + ',' + rep.fingerprint + ',' +
             detail::format_tsv_double(rep.latency_fused_us) + ',' +
             detail::format_tsv_double(rep.latency_plain_us) + '\n';
      csv = detail::insert_csv_column(csv, "config_fingerprint", binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      std::cout << csv;
    });
  }

  // ----- sweep ----------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand("sweep", "token error rate across the overlap grid");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto dataset_path = std::make_shared<std::string>();
    auto model_path = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto ef = std::make_shared<size_t>(128);
    auto ann = std::make_shared<detail::EvalAnnFlags>();
    binder->bind("dataset", *dataset_path, "dataset file")->required();
    binder->bind("model", *model_path, "checkpoint file")->required();
    binder->bind("report", *report_path, "output CSV")->required();
    binder->bind("ef", *ef, "search beam width");
    ann->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = load_dataset(*dataset_path);
      const EncoderModel model = load_model(*model_path);
      detail::check_model_task(model, task);
      const SweepReport report =
          overlap_sweep(model, task, ann->params(task.cfg.key_cfg.d_key), *ef);
      const std::string csv = detail::insert_csv_column(
          sweep_csv(report), "config_fingerprint", binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      std::cout << "spearman_overlap_ter "
                << detail::format_tsv_double(spearman(report.overlaps(), report.ters())) << "\n";
    });
  }

  // ----- swap -----------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand(
        "swap", "same checkpoint against a stale and a covering catalog");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto dataset_path = std::make_shared<std::string>();
    auto model_path = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto ef = std::make_shared<size_t>(128);
    auto ann = std::make_shared<detail::EvalAnnFlags>();
    binder->bind("dataset", *dataset_path, "dataset file")->required();
    binder->bind("model", *model_path, "checkpoint file")->required();
    binder->bind("report", *report_path, "output CSV")->required();
    binder->bind("ef", *ef, "search beam width");
    ann->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = load_dataset(*dataset_path);
      const EncoderModel model = load_model(*model_path);
      detail::check_model_task(model, task);
      const SwapReport report =
          swap_catalog_eval(model, task, ann->params(task.cfg.key_cfg.d_key), *ef);
      const std::string csv = detail::insert_csv_column(
          swap_csv(report), "config_fingerprint", binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      std::cout << "rare_token_accuracy stale "
                << detail::format_tsv_double(report.stale.rare_token_accuracy) << " covering "
                << detail::format_tsv_double(report.covering.rare_token_accuracy) << "\n";
    });
  }

  // ----- ablate ---------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand("ablate", "train and score one model per fusion-site set");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto dataset_path = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto sets_text = std::make_shared<std::string>();
    auto ef = std::make_shared<size_t>(128);
    auto enc = std::make_shared<detail::EncoderFlags>();
    auto train = std::make_shared<detail::TrainFlags>();
    auto ann = std::make_shared<detail::EvalAnnFlags>();
    binder->bind("dataset", *dataset_path, "dataset file")->required();
    binder->bind("report", *report_path, "output CSV")->required();
    binder->bind("sets", *sets_text, "site sets, e.g. 'none|3|3;4' (default: canonical)");
    binder->bind("ef", *ef, "search beam width");
    enc->bind(*binder, /*with_sites=*/false);
    train->bind(*binder);
    ann->bind(*binder);
    cmd->callback([=] {
      binder->resolve();
      const SyntheticTask task = load_dataset(*dataset_path);
      EncoderConfig base = enc->config(task);
      if (base.d_model != task.cfg.key_cfg.d_key) {
        throw ShapeError("encoder d_model must match the dataset key dim for the ablation");
      }
      const std::vector<std::vector<int>> sets = sets_text->empty()
                                                     ? ablation_site_sets(base.n_layers)
                                                     : detail::parse_site_sets(*sets_text);
      const AblationReport report = layer_ablation(
          task, base, train->config(), ann->params(task.cfg.key_cfg.d_key), *ef, sets);
      const std::string csv = detail::insert_csv_column(
          ablation_csv(report), "config_fingerprint", binder->fingerprint());
      write_text_file(*report_path, csv);
      binder->write_snapshot(*report_path);
      for (const auto& arm : report.arms) {
        std::cout << "sites " << site_label(arm.sites) << " ter "
                  << detail::format_tsv_double(arm.token_error_rate) << " rare_acc "
                  << detail::format_tsv_double(arm.rare_token_accuracy) << " latency_ratio "
                  << detail::format_tsv_double(arm.latency_ratio) << "\n";
      }
    });
  }

  // ----- gradcheck ------------------------------------------------------------
  {
    CLI::App* cmd = app.add_subcommand(
        "gradcheck", "fusion analytic gradients against finite differences");
    auto binder = std::make_shared<ConfigBinder>(cmd);
    auto seeds = std::make_shared<int>(1);
    auto seed = std::make_shared<uint64_t>(1);
    auto step = std::make_shared<double>(1e-5);
    auto tol = std::make_shared<double>(1e-4);
    auto d_model_max = std::make_shared<int>(8);
    auto corrupt = std::make_shared<std::string>("none");
    auto report_path = std::make_shared<std::string>();
    binder->bind("seeds", *seeds, "number of random instances");
    binder->bind("seed", *seed, "base seed");
    binder->bind("step", *step, "finite-difference step");
    binder->bind("tol", *tol, "max allowed relative error");
    binder->bind("d-model-max", *d_model_max, "largest sampled width (guard: 16)");
    binder->bind("corrupt", *corrupt, "negative control: none|w_q|ln_gamma");
    binder->bind("report", *report_path, "optional per-group CSV");
    cmd->callback([=, &rc] {
      binder->resolve();
      GradCorrupt mode = GradCorrupt::kNone;
      if (*corrupt == "w_q") {
        mode = GradCorrupt::kWq;
      } else if (*corrupt == "ln_gamma") {
        mode = GradCorrupt::kLnGamma;
      } else if (*corrupt != "none" && !corrupt->empty()) {
        throw InvalidArgumentError("unknown corrupt target '" + *corrupt + "'");
      }
      const GradCheckReport report =
          run_gradcheck(*seeds, *seed, *step, *tol, mode, *d_model_max);
      for (const auto& [name, err] : report.group_max) {
        std::printf("group %-10s max_rel_err %.3e\n", name.c_str(), err);
      }
      std::printf("seeds %d max_rel_err %.3e tolerance %.1e %s\n", report.n_seeds,
                  report.max_rel_err, report.tolerance, report.pass ? "PASS" : "FAIL");
      if (!report.pass) std::printf("worst %s\n", report.worst_entry.c_str());
      if (!report_path->empty()) {
        std::string csv = "group,max_rel_err\n";
        for (const auto& [name, err] : report.group_max) {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%.17g", err);
          csv += name + ',' + buf + '\n';
        }
        csv = detail::insert_csv_column(csv, "config_fingerprint", binder->fingerprint());
        write_text_file(*report_path, csv);
        binder->write_snapshot(*report_path);
      }
      if (!report.pass) rc = kExitCheckFailed;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const CorruptionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIncompat;
  } catch (const ConsistencyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIncompat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return rc;
}

}  // namespace knnfuse
