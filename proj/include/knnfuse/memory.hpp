#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knnfuse/errors.hpp"
#include "knnfuse/io.hpp"

namespace knnfuse {

// One line of a text catalog: a word or phrase plus optional domain tags.
struct CatalogEntry {
  uint64_t id = 0;
  std::string text;
  std::vector<std::string> tags;
};

// One key/value pair of the external memory. `entry_id` traces the record
// back to the catalog entry it was embedded from.
struct MemoryRecord {
  uint64_t id = 0;
  std::vector<float> key;
  std::vector<float> value;
  uint64_t entry_id = 0;
};

namespace detail {

inline bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace detail

// Immutable-after-build store of key/value vectors with homogeneous
// dimensions and unique record ids. Safe for concurrent readers.
class ExternalMemory {
 public:
  ExternalMemory(size_t d_key, size_t d_value) : d_key_(d_key), d_value_(d_value) {
    if (d_key == 0 || d_value == 0) {
      throw InvalidArgumentError("memory dimensions must be >= 1, got (" +
                                 std::to_string(d_key) + ", " + std::to_string(d_value) + ")");
    }
  }

  size_t d_key() const { return d_key_; }
  size_t d_value() const { return d_value_; }
  size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  const std::vector<MemoryRecord>& records() const { return records_; }
  const MemoryRecord& record(size_t i) const { return records_[i]; }

  const std::string& provenance() const { return provenance_; }
  void set_provenance(std::string p) { provenance_ = std::move(p); }

  bool has_id(uint64_t id) const { return id_to_index_.count(id) != 0; }

  // Index of the record with the given id, or npos.
  static constexpr size_t npos = static_cast<size_t>(-1);
  size_t index_of(uint64_t id) const {
    auto it = id_to_index_.find(id);
    return it == id_to_index_.end() ? npos : it->second;
  }

  void append(MemoryRecord rec) {
    if (rec.key.size() != d_key_) {
      throw ShapeError("record key length " + std::to_string(rec.key.size()) +
                       " does not match memory d_key " + std::to_string(d_key_));
    }
    if (rec.value.size() != d_value_) {
      throw ShapeError("record value length " + std::to_string(rec.value.size()) +
                       " does not match memory d_value " + std::to_string(d_value_));
    }
    if (id_to_index_.count(rec.id)) {
      throw ConflictError("duplicate record id " + std::to_string(rec.id));
    }
    if (!detail::all_finite(rec.key) || !detail::all_finite(rec.value)) {
      throw DataError("non-finite component in record id " + std::to_string(rec.id));
    }
    id_to_index_.emplace(rec.id, records_.size());
    records_.push_back(std::move(rec));
  }

  // Replaces the value row of the record at `index`. Used by the trainable
  // value-table hook to push updated table rows back into the store.
  void set_value(size_t index, std::vector<float> value) {
    if (index >= records_.size()) {
      throw InvalidArgumentError("set_value: record index " + std::to_string(index) +
                                 " out of range (size " + std::to_string(records_.size()) + ")");
    }
    if (value.size() != d_value_) {
      throw ShapeError("set_value: value length " + std::to_string(value.size()) +
                       " does not match memory d_value " + std::to_string(d_value_));
    }
    if (!detail::all_finite(value)) {
      throw DataError("set_value: non-finite component for record id " +
                      std::to_string(records_[index].id));
    }
    records_[index].value = std::move(value);
  }

 private:
  size_t d_key_;
  size_t d_value_;
  std::vector<MemoryRecord> records_;
  std::unordered_map<uint64_t, size_t> id_to_index_;
  std::string provenance_;
};

inline ExternalMemory create_memory(size_t d_key, size_t d_value) {
  return ExternalMemory(d_key, d_value);
}

struct MergeResult {
  ExternalMemory memory;
  // (old id in b) -> (fresh id in the merged memory), one pair per collision.
  std::vector<std::pair<uint64_t, uint64_t>> remapped;
};

// Concatenates two memories. Records of `a` keep their ids; colliding ids in
// `b` are reassigned to fresh values past the current maximum so no record is
// ever dropped.
inline MergeResult merge_memories(const ExternalMemory& a, const ExternalMemory& b) {
  if (a.d_key() != b.d_key() || a.d_value() != b.d_value()) {
    throw ShapeError("cannot merge memories with dims (" + std::to_string(a.d_key()) + "," +
                     std::to_string(a.d_value()) + ") and (" + std::to_string(b.d_key()) + "," +
                     std::to_string(b.d_value()) + ")");
  }
  MergeResult out{ExternalMemory(a.d_key(), a.d_value()), {}};
  uint64_t max_id = 0;
  bool any = false;
  for (const auto& r : a.records()) {
    max_id = any ? std::max(max_id, r.id) : r.id;
    any = true;
    out.memory.append(r);
  }
  for (const auto& r : b.records()) {
    max_id = any ? std::max(max_id, r.id) : r.id;
    any = true;
  }
  uint64_t next_fresh = any ? max_id + 1 : 0;
  for (const auto& r : b.records()) {
    if (out.memory.has_id(r.id)) {
      MemoryRecord moved = r;
      moved.id = next_fresh++;
      out.remapped.emplace_back(r.id, moved.id);
      out.memory.append(std::move(moved));
    } else {
      out.memory.append(r);
    }
  }
  out.memory.set_provenance(a.provenance());
  return out;
}

struct MemoryStats {
  size_t count = 0;
  size_t d_key = 0;
  size_t d_value = 0;
  double key_norm_mean = 0.0;
  double key_norm_stddev = 0.0;
};

inline MemoryStats memory_stats(const ExternalMemory& mem) {
  MemoryStats s;
  s.count = mem.size();
  s.d_key = mem.d_key();
  s.d_value = mem.d_value();
  if (mem.empty()) return s;
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& r : mem.records()) {
    double n2 = 0.0;
    for (float x : r.key) n2 += static_cast<double>(x) * static_cast<double>(x);
    double n = std::sqrt(n2);
    sum += n;
    sum_sq += n * n;
  }
  double count = static_cast<double>(mem.size());
  s.key_norm_mean = sum / count;
  double var = sum_sq / count - s.key_norm_mean * s.key_norm_mean;
  s.key_norm_stddev = var > 0.0 ? std::sqrt(var) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// Persistence. Layout (little-endian, packed):
//   magic "KNFMEM1\0" | u32 version | u32 d_key | u32 d_value | u64 count |
//   u64 provenance_len | provenance bytes |
//   count x { u64 id | u64 entry_id | d_key f32 | d_value f32 }
// ---------------------------------------------------------------------------

inline constexpr char kMemoryMagic[9] = "KNFMEM1";
inline constexpr uint32_t kMemoryVersion = 1;

inline std::vector<uint8_t> serialize_memory(const ExternalMemory& mem) {
  ByteWriter w;
  w.write_raw(kMemoryMagic, 8);
  w.write<uint32_t>(kMemoryVersion);
  w.write<uint32_t>(static_cast<uint32_t>(mem.d_key()));
  w.write<uint32_t>(static_cast<uint32_t>(mem.d_value()));
  w.write<uint64_t>(mem.size());
  w.write<uint64_t>(mem.provenance().size());
  w.write_raw(mem.provenance().data(), mem.provenance().size());
  for (const auto& r : mem.records()) {
    w.write<uint64_t>(r.id);
    w.write<uint64_t>(r.entry_id);
    w.write_raw(r.key.data(), r.key.size() * sizeof(float));
    w.write_raw(r.value.data(), r.value.size() * sizeof(float));
  }
  return seal_bytes(w);
}

inline void save_memory(const ExternalMemory& mem, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_memory(mem));
}

inline ExternalMemory deserialize_memory(const uint8_t* data, size_t size) {
  ByteReader r = sealed_reader(data, size, kMemoryMagic, "memory");
  uint32_t version = r.read<uint32_t>("version");
  if (version != kMemoryVersion) {
    throw FormatError("unsupported memory format version " + std::to_string(version));
  }
  uint32_t d_key = r.read<uint32_t>("d_key");
  uint32_t d_value = r.read<uint32_t>("d_value");
  if (d_key == 0 || d_value == 0) {
    throw CorruptionError("memory file declares a zero dimension");
  }
  uint64_t count = r.read<uint64_t>("count");
  uint64_t prov_len = r.read<uint64_t>("provenance length");
  if (prov_len > r.remaining()) {
    throw CorruptionError("memory file provenance length exceeds file size");
  }
  std::string provenance = r.read_string(prov_len, "provenance");
  uint64_t record_bytes = 16 + sizeof(float) * (uint64_t(d_key) + uint64_t(d_value));
  if (count > r.remaining() / record_bytes) {
    throw CorruptionError("memory file record count exceeds file size");
  }
  ExternalMemory mem(d_key, d_value);
  mem.set_provenance(std::move(provenance));
  for (uint64_t i = 0; i < count; ++i) {
    MemoryRecord rec;
    rec.id = r.read<uint64_t>("record id");
    rec.entry_id = r.read<uint64_t>("record entry_id");
    rec.key.resize(d_key);
    rec.value.resize(d_value);
    r.read_raw(rec.key.data(), d_key * sizeof(float), "record key");
    r.read_raw(rec.value.data(), d_value * sizeof(float), "record value");
    try {
      mem.append(std::move(rec));
    } catch (const ConflictError&) {
      throw CorruptionError("memory file contains duplicate record ids");
    }
  }
  if (r.remaining() != 0) {
    throw CorruptionError("memory file has trailing bytes after the last record");
  }
  return mem;
}

inline ExternalMemory load_memory(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  return deserialize_memory(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Catalog text input: one entry per line, `text<TAB>tag1,tag2`. Entry ids are
// assigned sequentially from 0 in line order. Lines that are empty after
// trimming are skipped.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<CatalogEntry> read_catalog(std::istream& in) {
  std::vector<CatalogEntry> entries;
  std::string line;
  uint64_t next_id = 0;
  while (std::getline(in, line)) {
    std::string text = line;
    std::vector<std::string> tags;
    size_t tab = line.find('\t');
    if (tab != std::string::npos) {
      text = line.substr(0, tab);
      std::string tag_field = detail::trim(line.substr(tab + 1));
      std::stringstream ss(tag_field);
      std::string tag;
      while (std::getline(ss, tag, ',')) {
        tag = detail::trim(tag);
        if (!tag.empty()) tags.push_back(tag);
      }
    }
    text = detail::trim(text);
    if (text.empty()) continue;
    entries.push_back(CatalogEntry{next_id++, std::move(text), std::move(tags)});
  }
  return entries;
}

inline std::vector<CatalogEntry> read_catalog_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open catalog file: " + path.string());
  return read_catalog(in);
}

}  // namespace knnfuse
