#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "knnfuse/embedders.hpp"
#include "knnfuse/errors.hpp"
#include "knnfuse/io.hpp"
#include "knnfuse/memory.hpp"
#include "knnfuse/rng.hpp"

namespace knnfuse {

// ---------------------------------------------------------------------------
// Synthetic rare-word task. Utterances are sequences of lowercase words
// rendered to frames by the same generator that produces the memory keys
// (plus noise). Per-frame labels are the characters being "spoken", so the
// label space is shared between seen and unseen words and a model can only
// do well on unseen rare words by copying from retrieved catalog values.
// ---------------------------------------------------------------------------

inline constexpr size_t kWordMinLen = 3;
inline constexpr size_t kWordMaxLen = 10;
inline constexpr int kCharVocab = 26;

inline std::string gen_word(Rng& rng) {
  size_t len = kWordMinLen + rng.next_below(kWordMaxLen - kWordMinLen + 1);
  std::string w(len, 'a');
  for (auto& ch : w) ch = static_cast<char>('a' + rng.next_below(26));
  return w;
}

// First n distinct words of the seeded stream; a prefix of any longer vocab
// drawn from the same seed.
inline std::vector<std::string> gen_vocab(size_t n, uint64_t seed) {
  if (n < 1) throw InvalidArgumentError("gen_vocab: n must be >= 1");
  Rng rng(mix64(seed, fnv1a("vocab")));
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  words.reserve(n);
  while (words.size() < n) {
    std::string w = gen_word(rng);
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

inline size_t spelling_d_value(size_t max_len = kWordMaxLen) { return 26 * max_len; }

// Character-position one-hot spelling: block p holds the one-hot of the p-th
// character. The value a fusion layer can copy character identities from.
inline std::vector<float> spelling_vector(std::string_view word, size_t max_len = kWordMaxLen) {
  if (word.empty()) throw InvalidArgumentError("spelling_vector: empty word");
  if (word.size() > max_len) {
    throw InvalidArgumentError("spelling_vector: word '" + std::string(word) + "' longer than " +
                               std::to_string(max_len));
  }
  std::vector<float> v(spelling_d_value(max_len), 0.0f);
  for (size_t p = 0; p < word.size(); ++p) {
    char c = word[p];
    if (c < 'a' || c > 'z') {
      throw InvalidArgumentError("spelling_vector: non a-z character in '" + std::string(word) +
                                 "'");
    }
    v[p * 26 + static_cast<size_t>(c - 'a')] = 1.0f;
  }
  return v;
}

enum class WordKind { kBase, kRareTrain, kRareTest, kDistractor };

struct TaskConfig {
  size_t n_base = 64;          // frequent words, present in both splits
  size_t n_rare_train = 96;    // rare words spoken only in the train split
  size_t n_rare_test = 96;     // rare words spoken only in the test split
  size_t n_distractors = 96;   // catalog fillers that are never spoken
  size_t n_train_fillers = 0;  // never-spoken words padding the train catalog,
                               // so training sees realistic neighbor junk
  size_t n_train_utt = 800;
  size_t n_test_utt = 240;
  size_t words_per_utt = 4;
  size_t rare_per_utt = 1;  // rare words in each utterance
  double frame_noise = 0.1;
  uint64_t seed = 1;
  KeyEmbedderConfig key_cfg;

  size_t total_words() const {
    return n_base + n_rare_train + n_rare_test + n_distractors + n_train_fillers;
  }

  void validate() const {
    key_cfg.validate();
    if (n_base < 1 || n_rare_train < 1 || n_rare_test < 1) {
      throw ConfigError("task: every word class needs at least one word");
    }
    if (n_distractors < n_rare_test) {
      throw ConfigError("task: need n_distractors >= n_rare_test to fill low-overlap catalogs");
    }
    if (words_per_utt < 1 || rare_per_utt > words_per_utt) {
      throw ConfigError("task: rare_per_utt must be <= words_per_utt >= 1");
    }
    if (n_train_utt < 1 || n_test_utt < 1) throw ConfigError("task: empty split");
    if (frame_noise < 0.0) throw ConfigError("task: frame_noise must be >= 0");
  }
};

struct RenderedUtt {
  Eigen::MatrixXd frames;            // n_frames x d_key
  std::vector<int> labels;           // per-frame character id, 0..25
  std::vector<uint32_t> frame_word;  // per-frame source word index
  std::vector<uint32_t> word_ids;
  int voice = 0;
};

struct SyntheticTask {
  TaskConfig cfg;
  std::vector<std::string> words;  // [base | rare_train | rare_test | distractors | fillers]
  std::vector<RenderedUtt> train;
  std::vector<RenderedUtt> test;

  WordKind kind(uint32_t word_id) const {
    size_t i = word_id;
    if (i < cfg.n_base) return WordKind::kBase;
    i -= cfg.n_base;
    if (i < cfg.n_rare_train) return WordKind::kRareTrain;
    i -= cfg.n_rare_train;
    if (i < cfg.n_rare_test) return WordKind::kRareTest;
    return WordKind::kDistractor;
  }
  int vocab_size() const { return kCharVocab; }
};

namespace detail {

struct UttSkeleton {
  std::vector<uint32_t> word_ids;
  int voice = 0;
};

// Word slots: `rare_per_utt` draws from the split's rare pool at seeded
// positions, the rest from the base pool.
inline std::vector<UttSkeleton> plan_utterances(const TaskConfig& cfg, size_t count,
                                                uint32_t rare_lo, uint32_t rare_n,
                                                uint64_t stream) {
  Rng rng(mix64(cfg.seed, stream));
  std::vector<UttSkeleton> utts(count);
  for (auto& u : utts) {
    u.voice = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.key_cfg.n_voices)));
    u.word_ids.resize(cfg.words_per_utt);
    for (auto& w : u.word_ids) w = static_cast<uint32_t>(rng.next_below(cfg.n_base));
    std::vector<uint64_t> pos = rng.permutation(cfg.words_per_utt);
    for (size_t r = 0; r < cfg.rare_per_utt; ++r) {
      u.word_ids[pos[r]] = rare_lo + static_cast<uint32_t>(rng.next_below(rare_n));
    }
  }
  return utts;
}

inline RenderedUtt render_utterance(const TaskConfig& cfg, const std::vector<std::string>& words,
                                    const UttSkeleton& skel, uint64_t noise_seed) {
  RenderedUtt out;
  out.word_ids = skel.word_ids;
  out.voice = skel.voice;
  const size_t d = cfg.key_cfg.d_key;
  size_t total = 0;
  for (uint32_t w : skel.word_ids) total += synth_frame_count(words[w], cfg.key_cfg);
  out.frames.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
  out.labels.reserve(total);
  out.frame_word.reserve(total);

  Rng noise(noise_seed);
  Eigen::Index row = 0;
  const int fpc = cfg.key_cfg.frames_per_char;
  for (uint32_t w : skel.word_ids) {
    const std::string& text = words[w];
    std::vector<float> f = synth_frames(text, skel.voice, cfg.key_cfg);
    size_t nf = synth_frame_count(text, cfg.key_cfg);
    for (size_t i = 0; i < nf; ++i) {
      for (size_t j = 0; j < d; ++j) {
        out.frames(row, static_cast<Eigen::Index>(j)) =
            static_cast<double>(f[i * d + j]) + cfg.frame_noise * noise.normal();
      }
      out.labels.push_back(text[i / static_cast<size_t>(fpc)] - 'a');
      out.frame_word.push_back(w);
      ++row;
    }
  }
  return out;
}

}  // namespace detail

inline SyntheticTask gen_synthetic_dataset(const TaskConfig& cfg) {
  cfg.validate();
  SyntheticTask task;
  task.cfg = cfg;
  task.words = gen_vocab(cfg.total_words(), cfg.seed);

  auto train_skel = detail::plan_utterances(cfg, cfg.n_train_utt, static_cast<uint32_t>(cfg.n_base),
                                            static_cast<uint32_t>(cfg.n_rare_train),
                                            fnv1a("train-utt"));
  auto test_skel = detail::plan_utterances(
      cfg, cfg.n_test_utt, static_cast<uint32_t>(cfg.n_base + cfg.n_rare_train),
      static_cast<uint32_t>(cfg.n_rare_test), fnv1a("test-utt"));

  task.train.reserve(train_skel.size());
  for (size_t i = 0; i < train_skel.size(); ++i) {
    task.train.push_back(detail::render_utterance(
        cfg, task.words, train_skel[i], mix64(cfg.seed, fnv1a("train-noise"), i)));
  }
  task.test.reserve(test_skel.size());
  for (size_t i = 0; i < test_skel.size(); ++i) {
    task.test.push_back(detail::render_utterance(cfg, task.words, test_skel[i],
                                                 mix64(cfg.seed, fnv1a("test-noise"), i)));
  }
  return task;
}

// ---------------------------------------------------------------------------
// Catalogs. Entry id = word index, so entries stay identifiable across
// catalog variants and provenance traces back to the vocabulary.
// ---------------------------------------------------------------------------

namespace detail {

inline CatalogEntry word_entry(const SyntheticTask& task, uint32_t word_id, const char* tag) {
  CatalogEntry e;
  e.id = word_id;
  e.text = task.words[word_id];
  e.tags = {tag};
  return e;
}

}  // namespace detail

// Train-split catalog: the words a training run may retrieve (base + the
// train split's rare words), optionally padded with never-spoken fillers so
// the model trains against the same kind of neighbor junk that production
// catalogs produce at test time.
inline std::vector<CatalogEntry> make_train_catalog(const SyntheticTask& task) {
  const TaskConfig& cfg = task.cfg;
  std::vector<CatalogEntry> cat;
  cat.reserve(cfg.n_base + cfg.n_rare_train + cfg.n_train_fillers);
  for (uint32_t w = 0; w < cfg.n_base; ++w) cat.push_back(detail::word_entry(task, w, "base"));
  for (uint32_t w = 0; w < cfg.n_rare_train; ++w) {
    cat.push_back(detail::word_entry(task, static_cast<uint32_t>(cfg.n_base) + w, "rare"));
  }
  uint32_t filler_lo =
      static_cast<uint32_t>(cfg.n_base + cfg.n_rare_train + cfg.n_rare_test + cfg.n_distractors);
  for (uint32_t w = 0; w < cfg.n_train_fillers; ++w) {
    cat.push_back(detail::word_entry(task, filler_lo + w, "filler"));
  }
  return cat;
}

// Test-split catalog with a controlled fraction of the test-rare words
// covered. `overlap` of the rare slots hold real test-rare words (a nested
// prefix, so higher overlap strictly adds coverage); the rest are filled
// with never-spoken distractors to keep the catalog size constant.
inline std::vector<CatalogEntry> make_test_catalog(const SyntheticTask& task, double overlap) {
  if (overlap < 0.0 || overlap > 1.0) {
    throw ConfigError("test catalog overlap must be in [0, 1], got " + std::to_string(overlap));
  }
  const TaskConfig& cfg = task.cfg;
  size_t n_cover =
      static_cast<size_t>(std::lround(overlap * static_cast<double>(cfg.n_rare_test)));
  std::vector<CatalogEntry> cat;
  cat.reserve(cfg.n_base + cfg.n_rare_test);
  for (uint32_t w = 0; w < cfg.n_base; ++w) cat.push_back(detail::word_entry(task, w, "base"));
  uint32_t rare_lo = static_cast<uint32_t>(cfg.n_base + cfg.n_rare_train);
  for (size_t i = 0; i < n_cover; ++i) {
    cat.push_back(detail::word_entry(task, rare_lo + static_cast<uint32_t>(i), "rare"));
  }
  uint32_t distractor_lo = static_cast<uint32_t>(rare_lo + cfg.n_rare_test);
  for (size_t i = 0; i < cfg.n_rare_test - n_cover; ++i) {
    cat.push_back(detail::word_entry(task, distractor_lo + static_cast<uint32_t>(i), "filler"));
  }
  return cat;
}

// Renders a catalog into an external memory with spelling-vector values,
// one key per simulated voice.
inline ExternalMemory task_memory(const SyntheticTask& task,
                                  const std::vector<CatalogEntry>& catalog) {
  std::unordered_map<std::string, std::vector<float>> spellings;
  for (const auto& e : catalog) spellings.emplace(e.text, spelling_vector(e.text));
  ValueEmbedder values = ValueEmbedder::pretrained(std::move(spellings));
  return build_memory_from_catalog(catalog, task.cfg.key_cfg, values,
                                   task.cfg.key_cfg.n_voices);
}

// ---------------------------------------------------------------------------
// Dataset persistence: config + vocabulary + utterance skeletons. Rendering
// is deterministic, so frames and labels are rebuilt on load.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[9] = "KNFDAT1";
inline constexpr uint32_t kDatasetVersion = 1;

inline std::vector<uint8_t> serialize_dataset(const SyntheticTask& task) {
  ByteWriter w;
  w.write_raw(kDatasetMagic, 8);
  w.write<uint32_t>(kDatasetVersion);
  const TaskConfig& c = task.cfg;
  w.write<uint64_t>(c.n_base);
  w.write<uint64_t>(c.n_rare_train);
  w.write<uint64_t>(c.n_rare_test);
  w.write<uint64_t>(c.n_distractors);
  w.write<uint64_t>(c.n_train_fillers);
  w.write<uint64_t>(c.n_train_utt);
  w.write<uint64_t>(c.n_test_utt);
  w.write<uint64_t>(c.words_per_utt);
  w.write<uint64_t>(c.rare_per_utt);
  w.write<double>(c.frame_noise);
  w.write<uint64_t>(c.seed);
  w.write<uint64_t>(c.key_cfg.d_key);
  w.write<int32_t>(c.key_cfg.n_voices);
  w.write<uint64_t>(c.key_cfg.seed);
  w.write<int32_t>(c.key_cfg.frames_per_char);
  w.write<uint64_t>(task.words.size());
  for (const auto& word : task.words) {
    w.write<uint32_t>(static_cast<uint32_t>(word.size()));
    w.write_raw(word.data(), word.size());
  }
  for (const auto* split : {&task.train, &task.test}) {
    w.write<uint64_t>(split->size());
    for (const auto& u : *split) {
      w.write<int32_t>(u.voice);
      w.write<uint32_t>(static_cast<uint32_t>(u.word_ids.size()));
      for (uint32_t id : u.word_ids) w.write<uint32_t>(id);
    }
  }
  return seal_bytes(w);
}

inline SyntheticTask deserialize_dataset(const uint8_t* data, size_t size) {
  ByteReader r = sealed_reader(data, size, kDatasetMagic, "dataset");
  uint32_t version = r.read<uint32_t>("dataset version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version));
  }
  SyntheticTask task;
  TaskConfig& c = task.cfg;
  c.n_base = r.read<uint64_t>("n_base");
  c.n_rare_train = r.read<uint64_t>("n_rare_train");
  c.n_rare_test = r.read<uint64_t>("n_rare_test");
  c.n_distractors = r.read<uint64_t>("n_distractors");
  c.n_train_fillers = r.read<uint64_t>("n_train_fillers");
  c.n_train_utt = r.read<uint64_t>("n_train_utt");
  c.n_test_utt = r.read<uint64_t>("n_test_utt");
  c.words_per_utt = r.read<uint64_t>("words_per_utt");
  c.rare_per_utt = r.read<uint64_t>("rare_per_utt");
  c.frame_noise = r.read<double>("frame_noise");
  c.seed = r.read<uint64_t>("seed");
  c.key_cfg.d_key = r.read<uint64_t>("d_key");
  c.key_cfg.n_voices = r.read<int32_t>("n_voices");
  c.key_cfg.seed = r.read<uint64_t>("key seed");
  c.key_cfg.frames_per_char = r.read<int32_t>("frames_per_char");
  c.validate();

  uint64_t n_words = r.read<uint64_t>("word count");
  if (n_words != c.total_words()) throw CorruptionError("dataset word count mismatch");
  task.words.reserve(n_words);
  std::unordered_set<std::string> seen;
  for (uint64_t i = 0; i < n_words; ++i) {
    uint32_t len = r.read<uint32_t>("word length");
    if (len == 0 || len > kWordMaxLen) throw CorruptionError("bad dataset word");
    std::string word = r.read_string(len, "word");
    if (!seen.insert(word).second) throw CorruptionError("duplicate dataset word");
    task.words.push_back(std::move(word));
  }

  for (auto [split, expected, noise_tag] :
       {std::tuple{&task.train, c.n_train_utt, "train-noise"},
        std::tuple{&task.test, c.n_test_utt, "test-noise"}}) {
    uint64_t n = r.read<uint64_t>("utterance count");
    if (n != expected) throw CorruptionError("dataset utterance count mismatch");
    split->reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
      detail::UttSkeleton skel;
      skel.voice = r.read<int32_t>("voice");
      if (skel.voice < 0 || skel.voice >= c.key_cfg.n_voices) {
        throw CorruptionError("dataset voice out of range");
      }
      uint32_t nw = r.read<uint32_t>("word ids");
      if (nw != c.words_per_utt) throw CorruptionError("dataset utterance length mismatch");
      skel.word_ids.resize(nw);
      for (auto& id : skel.word_ids) {
        id = r.read<uint32_t>("word id");
        if (id >= task.words.size()) throw CorruptionError("dataset word id out of range");
      }
      split->push_back(detail::render_utterance(c, task.words, skel,
                                                mix64(c.seed, fnv1a(noise_tag), i)));
    }
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after dataset payload");
  return task;
}

inline void save_dataset(const SyntheticTask& task, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_dataset(task));
}

inline SyntheticTask load_dataset(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  return deserialize_dataset(bytes.data(), bytes.size());
}

}  // namespace knnfuse
