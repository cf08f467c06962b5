#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "knnfuse/errors.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/rng.hpp"

namespace knnfuse {

// Configuration of the synthetic audio-proxy key embedder. It stands in for
// the TTS + pretrained-encoder pipeline: `n_voices` simulated voices,
// `frames_per_char` frames per text character, keys of dimension `d_key`.
struct KeyEmbedderConfig {
  size_t d_key = 64;
  int n_voices = 10;
  uint64_t seed = 0;
  int frames_per_char = 2;

  void validate() const {
    if (d_key < 1) throw InvalidArgumentError("d_key must be >= 1");
    if (n_voices < 1) throw InvalidArgumentError("n_voices must be >= 1");
    if (frames_per_char < 1) throw InvalidArgumentError("frames_per_char must be >= 1");
  }
};

namespace detail {

// Feature-term weights of the frame generator. The whole-word term dominates
// so frames of one word cluster tightly; n-gram terms give partial overlap
// between related spellings; position and sub-frame terms keep frames inside
// a word from collapsing onto one point.
inline constexpr double kNgramWeight[4] = {0.0, 0.5, 0.7, 0.9};  // by n
inline constexpr double kWordWeight = 1.6;
inline constexpr double kPosWeight = 0.35;
inline constexpr double kSubFrameWeight = 0.15;
inline constexpr double kVoiceGain = 0.18;
inline constexpr double kVoiceBias = 0.12;

inline void add_hash_vector(std::vector<double>& acc, uint64_t h, double weight) {
  for (size_t i = 0; i < acc.size(); ++i) {
    acc[i] += weight * u64_to_signed_unit(mix64(h, i));
  }
}

}  // namespace detail

inline size_t synth_frame_count(std::string_view text, const KeyEmbedderConfig& cfg) {
  return text.size() * static_cast<size_t>(cfg.frames_per_char);
}

// Simulated per-frame features for `text` spoken by `voice`, row-major
// (frame count x d_key). Frame (p, j) sums seeded hash vectors of the
// character n-grams covering position p, the whole word, the position, and
// the sub-frame index, then applies the voice's affine perturbation. Pure in
// (text, voice, cfg.seed).
inline std::vector<float> synth_frames(std::string_view text, int voice,
                                       const KeyEmbedderConfig& cfg) {
  cfg.validate();
  if (text.empty()) throw InvalidArgumentError("synth_frames: text must be non-empty");
  if (voice < 0 || voice >= cfg.n_voices) {
    throw InvalidArgumentError("voice " + std::to_string(voice) + " outside [0, " +
                               std::to_string(cfg.n_voices) + ")");
  }
  const size_t L = text.size();
  const size_t d = cfg.d_key;
  const uint64_t text_seed = mix64(cfg.seed, fnv1a("frames"));
  const uint64_t word_hash = mix64(text_seed, fnv1a(text));

  // Per-voice affine perturbation, shared by every frame of this voice.
  const uint64_t voice_seed = mix64(cfg.seed, fnv1a("voice"), static_cast<uint64_t>(voice));
  std::vector<double> gain(d), bias(d);
  for (size_t i = 0; i < d; ++i) {
    gain[i] = 1.0 + detail::kVoiceGain * u64_to_signed_unit(mix64(voice_seed, 2 * i));
    bias[i] = detail::kVoiceBias * u64_to_signed_unit(mix64(voice_seed, 2 * i + 1));
  }

  std::vector<float> frames(synth_frame_count(text, cfg) * d);
  std::vector<double> acc(d);
  for (size_t p = 0; p < L; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (size_t n = 1; n <= 3; ++n) {
      if (n > L) break;
      size_t start_lo = p + 1 >= n ? p + 1 - n : 0;
      size_t start_hi = std::min(p, L - n);
      for (size_t s = start_lo; s <= start_hi; ++s) {
        uint64_t g = mix64(text_seed, fnv1a(text.substr(s, n)), n);
        detail::add_hash_vector(acc, g, detail::kNgramWeight[n]);
      }
    }
    detail::add_hash_vector(acc, word_hash, detail::kWordWeight);
    detail::add_hash_vector(acc, mix64(text_seed, fnv1a("pos"), p), detail::kPosWeight);
    for (int j = 0; j < cfg.frames_per_char; ++j) {
      uint64_t sub = mix64(text_seed, fnv1a("sub"), p * 131 + static_cast<size_t>(j));
      float* row = frames.data() + (p * cfg.frames_per_char + j) * d;
      for (size_t i = 0; i < d; ++i) {
        double x = acc[i] + detail::kSubFrameWeight * u64_to_signed_unit(mix64(sub, i));
        row[i] = static_cast<float>(x * gain[i] + bias[i]);
      }
    }
  }
  return frames;
}

// Mean of the simulated frames: the audio-proxy key vector.
inline std::vector<float> synth_audio_key(std::string_view text, int voice,
                                          const KeyEmbedderConfig& cfg) {
  std::vector<float> frames = synth_frames(text, voice, cfg);
  const size_t d = cfg.d_key;
  const size_t n = frames.size() / d;
  std::vector<double> acc(d, 0.0);
  for (size_t f = 0; f < n; ++f) {
    for (size_t i = 0; i < d; ++i) acc[i] += frames[f * d + i];
  }
  std::vector<float> key(d);
  for (size_t i = 0; i < d; ++i) key[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  return key;
}

// ---------------------------------------------------------------------------
// Vector file formats.
//   pretrained: `token v1 v2 ...` space-separated, one token per line.
//   precomputed TSV: `id<TAB>v1,v2,...` decimal, tolerant of trailing
//   whitespace.
// ---------------------------------------------------------------------------

namespace detail {

inline double parse_number(std::string_view tok, size_t line_no, const char* what) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw FormatError(std::string("bad ") + what + " on line " + std::to_string(line_no) + ": '" +
                      std::string(tok) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_on(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t end = s.find(sep, start);
    if (end == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

}  // namespace detail

// Parses the `token v1 v2 ...` format used by published word-vector releases.
inline std::unordered_map<std::string, std::vector<float>> read_pretrained_vectors(
    std::istream& in) {
  std::unordered_map<std::string, std::vector<float>> table;
  std::string line;
  size_t line_no = 0;
  size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    std::stringstream ss(trimmed);
    std::string token;
    ss >> token;
    std::vector<float> vec;
    std::string field;
    while (ss >> field) {
      vec.push_back(static_cast<float>(detail::parse_number(field, line_no, "vector component")));
    }
    if (vec.empty()) {
      throw FormatError("no vector components on line " + std::to_string(line_no));
    }
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim) {
      throw FormatError("inconsistent vector length on line " + std::to_string(line_no) + ": " +
                        std::to_string(vec.size()) + " vs " + std::to_string(dim));
    }
    if (!table.emplace(std::move(token), std::move(vec)).second) {
      throw FormatError("duplicate token on line " + std::to_string(line_no));
    }
  }
  return table;
}

inline std::unordered_map<std::string, std::vector<float>> read_pretrained_vectors_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pretrained vector file: " + path.string());
  return read_pretrained_vectors(in);
}

// Parses the `id<TAB>v1,v2,...` interchange format for precomputed
// embeddings.
inline std::map<uint64_t, std::vector<float>> read_vector_tsv(std::istream& in) {
  std::map<uint64_t, std::vector<float>> table;
  std::string line;
  size_t line_no = 0;
  size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    size_t tab = trimmed.find('\t');
    if (tab == std::string::npos) {
      throw FormatError("missing tab separator on line " + std::to_string(line_no));
    }
    std::string_view id_field(trimmed.data(), tab);
    uint64_t id = 0;
    auto [ptr, ec] = std::from_chars(id_field.data(), id_field.data() + id_field.size(), id);
    if (ec != std::errc() || ptr != id_field.data() + id_field.size()) {
      throw FormatError("bad id on line " + std::to_string(line_no));
    }
    std::string_view rest(trimmed.data() + tab + 1, trimmed.size() - tab - 1);
    std::vector<float> vec;
    for (std::string_view field : detail::split_on(rest, ',')) {
      std::string cleaned = detail::trim(std::string(field));
      vec.push_back(
          static_cast<float>(detail::parse_number(cleaned, line_no, "vector component")));
    }
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim) {
      throw FormatError("inconsistent vector length on line " + std::to_string(line_no));
    }
    if (!table.emplace(id, std::move(vec)).second) {
      throw FormatError("duplicate id on line " + std::to_string(line_no));
    }
  }
  return table;
}

inline std::map<uint64_t, std::vector<float>> read_vector_tsv_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vector TSV file: " + path.string());
  return read_vector_tsv(in);
}

// %.9g preserves every float32 exactly through a text round trip.
inline void write_vector_tsv_file(const std::filesystem::path& path,
                                  const std::map<uint64_t, std::vector<float>>& table) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open vector TSV file for writing: " + path.string());
  char buf[64];
  for (const auto& [id, vec] : table) {
    out << id << '\t';
    for (size_t i = 0; i < vec.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(vec[i]));
      if (i) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_pretrained_vectors_file(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, std::vector<float>>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open pretrained vector file for writing: " + path.string());
  char buf[64];
  for (const auto& [token, vec] : rows) {
    out << token;
    for (float v : vec) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Value embedder: one of three modes.
//   OneHot          — trainable table row per entry id.
//   PretrainedLookup— fixed token vectors, averaged over whitespace tokens,
//                     OOV tokens map to the zero vector.
//   ImportedFile    — fixed vector per entry id.
// ---------------------------------------------------------------------------

class ValueEmbedder {
 public:
  enum class Mode { kOneHot, kPretrainedLookup, kImportedFile };

  static ValueEmbedder one_hot(size_t table_size, size_t d_value, uint64_t seed) {
    if (table_size < 1 || d_value < 1) {
      throw InvalidArgumentError("one_hot: table_size and d_value must be >= 1");
    }
    ValueEmbedder e;
    e.mode_ = Mode::kOneHot;
    e.d_value_ = d_value;
    e.table_size_ = table_size;
    e.table_.resize(table_size * d_value);
    Rng rng(mix64(seed, fnv1a("one-hot-table")));
    for (float& x : e.table_) x = static_cast<float>(0.05 * rng.normal());
    return e;
  }

  static ValueEmbedder pretrained(std::unordered_map<std::string, std::vector<float>> vectors) {
    if (vectors.empty()) throw InvalidArgumentError("pretrained: empty vector table");
    ValueEmbedder e;
    e.mode_ = Mode::kPretrainedLookup;
    e.d_value_ = vectors.begin()->second.size();
    e.tokens_ = std::move(vectors);
    return e;
  }

  static ValueEmbedder pretrained_file(const std::filesystem::path& path) {
    return pretrained(read_pretrained_vectors_file(path));
  }

  static ValueEmbedder imported(std::map<uint64_t, std::vector<float>> vectors) {
    if (vectors.empty()) throw InvalidArgumentError("imported: empty vector table");
    ValueEmbedder e;
    e.mode_ = Mode::kImportedFile;
    e.d_value_ = vectors.begin()->second.size();
    e.by_id_ = std::move(vectors);
    return e;
  }

  static ValueEmbedder imported_file(const std::filesystem::path& path) {
    return imported(read_vector_tsv_file(path));
  }

  Mode mode() const { return mode_; }
  size_t d_value() const { return d_value_; }
  size_t table_size() const { return table_size_; }

  // Mutable access to the OneHot table for the encoder's optimizer hook.
  std::vector<float>& table() {
    if (mode_ != Mode::kOneHot) throw InvalidArgumentError("table(): not a OneHot embedder");
    return table_;
  }

  std::vector<float> embed(const CatalogEntry& entry) const {
    switch (mode_) {
      case Mode::kOneHot: {
        if (entry.id >= table_size_) {
          throw LookupError("one-hot table has no row for entry id " + std::to_string(entry.id) +
                            " (table size " + std::to_string(table_size_) + ")");
        }
        return std::vector<float>(table_.begin() + entry.id * d_value_,
                                  table_.begin() + (entry.id + 1) * d_value_);
      }
      case Mode::kPretrainedLookup: {
        std::vector<double> acc(d_value_, 0.0);
        size_t n_tokens = 0;
        std::stringstream ss(entry.text);
        std::string tok;
        while (ss >> tok) {
          std::transform(tok.begin(), tok.end(), tok.begin(),
                         [](unsigned char c) { return std::tolower(c); });
          ++n_tokens;
          auto it = tokens_.find(tok);
          if (it == tokens_.end()) continue;  // OOV -> zero vector
          for (size_t i = 0; i < d_value_; ++i) acc[i] += it->second[i];
        }
        std::vector<float> out(d_value_, 0.0f);
        if (n_tokens > 0) {
          for (size_t i = 0; i < d_value_; ++i) {
            out[i] = static_cast<float>(acc[i] / static_cast<double>(n_tokens));
          }
        }
        return out;
      }
      case Mode::kImportedFile: {
        auto it = by_id_.find(entry.id);
        if (it == by_id_.end()) {
          throw LookupError("imported vector file has no row for entry id " +
                            std::to_string(entry.id));
        }
        return it->second;
      }
    }
    throw InvalidArgumentError("value embedder mode not initialized");
  }

 private:
  ValueEmbedder() = default;

  Mode mode_ = Mode::kOneHot;
  size_t d_value_ = 0;
  size_t table_size_ = 0;
  std::vector<float> table_;
  std::unordered_map<std::string, std::vector<float>> tokens_;
  std::map<uint64_t, std::vector<float>> by_id_;
};

// ---------------------------------------------------------------------------
// Memory assembly.
// ---------------------------------------------------------------------------

// Builds the external memory for a catalog: `voices_per_entry` key vectors
// per entry (one per simulated voice), each paired with the entry's value
// vector. Record ids are sequential in (entry, voice) order; `entry_id`
// traces each record to its catalog entry. Deterministic given seeds.
inline ExternalMemory build_memory_from_catalog(const std::vector<CatalogEntry>& catalog,
                                                const KeyEmbedderConfig& kcfg,
                                                const ValueEmbedder& values,
                                                int voices_per_entry) {
  kcfg.validate();
  if (catalog.empty()) throw InvalidArgumentError("catalog must be non-empty");
  if (voices_per_entry < 1 || voices_per_entry > kcfg.n_voices) {
    throw InvalidArgumentError("voices_per_entry must be in [1, n_voices]");
  }
  {
    std::unordered_set<uint64_t> seen;
    for (const auto& e : catalog) {
      if (!seen.insert(e.id).second) {
        throw ConflictError("duplicate catalog entry id " + std::to_string(e.id));
      }
    }
  }
  ExternalMemory mem(kcfg.d_key, values.d_value());
  std::ostringstream prov;
  prov << "key=synth-audio-proxy(d_key=" << kcfg.d_key << ",voices=" << voices_per_entry
       << ",frames_per_char=" << kcfg.frames_per_char << ") value=mode-"
       << static_cast<int>(values.mode()) << "(d_value=" << values.d_value()
       << ") seed=" << kcfg.seed;
  mem.set_provenance(prov.str());
  uint64_t next_record = 0;
  for (const auto& entry : catalog) {
    try {
      std::vector<float> value = values.embed(entry);
      for (int v = 0; v < voices_per_entry; ++v) {
        MemoryRecord rec;
        rec.id = next_record++;
        rec.entry_id = entry.id;
        rec.key = synth_audio_key(entry.text, v, kcfg);
        rec.value = value;
        mem.append(std::move(rec));
      }
    } catch (const LookupError& e) {
      throw LookupError("entry " + std::to_string(entry.id) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("entry " + std::to_string(entry.id) + ": " + e.what());
    } catch (const InvalidArgumentError& e) {
      throw InvalidArgumentError("entry " + std::to_string(entry.id) + ": " + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError("entry " + std::to_string(entry.id) + ": " + e.what());
    }
  }
  return mem;
}

namespace detail {

inline std::string join_ids(const std::vector<uint64_t>& ids, size_t limit = 8) {
  std::ostringstream os;
  for (size_t i = 0; i < ids.size() && i < limit; ++i) {
    if (i) os << ",";
    os << ids[i];
  }
  if (ids.size() > limit) os << ",... (" << ids.size() << " total)";
  return os.str();
}

}  // namespace detail

// Pairs externally produced key and value vectors (both TSVs keyed by entry
// id) into a memory. The sanctioned path for real TTS/BERT embeddings
// computed offline.
inline ExternalMemory ingest_precomputed(const std::filesystem::path& keys_file,
                                         const std::filesystem::path& values_file,
                                         const std::vector<CatalogEntry>& catalog) {
  auto keys = read_vector_tsv_file(keys_file);
  auto values = read_vector_tsv_file(values_file);
  if (keys.empty() || values.empty()) {
    throw ConsistencyError("precomputed files must contain at least one row");
  }
  std::vector<uint64_t> only_keys, only_values;
  for (const auto& [id, _] : keys) {
    if (!values.count(id)) only_keys.push_back(id);
  }
  for (const auto& [id, _] : values) {
    if (!keys.count(id)) only_values.push_back(id);
  }
  if (!only_keys.empty() || !only_values.empty()) {
    throw ConsistencyError("id sets differ between key and value files; only in keys: [" +
                           detail::join_ids(only_keys) + "], only in values: [" +
                           detail::join_ids(only_values) + "]");
  }
  std::unordered_set<uint64_t> catalog_ids;
  for (const auto& e : catalog) catalog_ids.insert(e.id);
  std::vector<uint64_t> unknown;
  for (const auto& [id, _] : keys) {
    if (!catalog_ids.count(id)) unknown.push_back(id);
  }
  if (!unknown.empty()) {
    throw ConsistencyError("ids not present in the catalog: [" + detail::join_ids(unknown) + "]");
  }
  ExternalMemory mem(keys.begin()->second.size(), values.begin()->second.size());
  mem.set_provenance("ingest: keys=" + keys_file.filename().string() +
                     " values=" + values_file.filename().string());
  for (const auto& [id, key] : keys) {  // std::map: ascending id order
    MemoryRecord rec;
    rec.id = id;
    rec.entry_id = id;
    rec.key = key;
    rec.value = values.at(id);
    if (!detail::all_finite(rec.key) || !detail::all_finite(rec.value)) {
      throw DataError("non-finite component in precomputed vectors for id " + std::to_string(id));
    }
    mem.append(std::move(rec));
  }
  return mem;
}

}  // namespace knnfuse
