#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "knnfuse/errors.hpp"
#include "knnfuse/rng.hpp"

namespace knnfuse {

static_assert(std::endian::native == std::endian::little,
              "pinned file formats assume a little-endian host");

// Bounds-checked binary reader over a fully loaded file. Every read that
// would run past the end throws CorruptionError, so damaged or truncated
// files surface as typed errors instead of undefined behavior.
class ByteReader {
 public:
  ByteReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  size_t remaining() const { return size_ - pos_; }

  void read_raw(void* out, size_t n, const char* what) {
    if (n > remaining()) {
      throw CorruptionError(std::string("truncated file: ran out of bytes reading ") + what);
    }
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }

  template <typename T>
  T read(const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    read_raw(&v, sizeof(T), what);
    return v;
  }

  std::string read_string(size_t n, const char* what) {
    if (n > remaining()) {
      throw CorruptionError(std::string("truncated file: ran out of bytes reading ") + what);
    }
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

class ByteWriter {
 public:
  void write_raw(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  template <typename T>
  void write(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    write_raw(&v, sizeof(T));
  }

  const std::vector<uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for reading: " + path.string());
  in.seekg(0, std::ios::end);
  std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> buf(static_cast<size_t>(len));
  if (len > 0) in.read(reinterpret_cast<char*>(buf.data()), len);
  if (!in) throw IoError("read failed: " + path.string());
  return buf;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

inline void check_magic(ByteReader& r, const char (&magic)[9], const char* kind) {
  char got[8];
  // Short files fail here as a format error, not a corruption error: without
  // the magic bytes there is no reason to believe the file was ever ours.
  if (r.remaining() < 8) {
    throw FormatError(std::string("not a ") + kind + " file: shorter than the magic header");
  }
  r.read_raw(got, 8, "magic");
  if (std::memcmp(got, magic, 8) != 0) {
    throw FormatError(std::string("not a ") + kind + " file: bad magic bytes");
  }
}

// Every pinned format ends with an fnv1a word over the preceding bytes, so
// any flipped or missing byte surfaces as a typed error instead of parsing
// into plausible-looking data.
inline std::vector<uint8_t> seal_bytes(const ByteWriter& w) {
  std::vector<uint8_t> out = w.bytes();
  uint64_t sum = fnv1a_bytes(out.data(), out.size());
  const uint8_t* p = reinterpret_cast<const uint8_t*>(&sum);
  out.insert(out.end(), p, p + sizeof(sum));
  return out;
}

// Validates magic and integrity word, then hands back a reader positioned
// after the magic and bounded to the payload. Magic goes first: random bytes
// are "not ours" (FormatError), while a matching magic with a bad sum means
// a damaged file (CorruptionError).
inline ByteReader sealed_reader(const uint8_t* data, size_t size, const char (&magic)[9],
                                const char* kind) {
  if (size < 16) {
    throw FormatError(std::string("not a ") + kind + " file: shorter than the magic header");
  }
  if (std::memcmp(data, magic, 8) != 0) {
    throw FormatError(std::string("not a ") + kind + " file: bad magic bytes");
  }
  uint64_t stored;
  std::memcpy(&stored, data + size - sizeof(stored), sizeof(stored));
  if (fnv1a_bytes(data, size - sizeof(stored)) != stored) {
    throw CorruptionError(std::string(kind) + " file failed its integrity check");
  }
  ByteReader r(data, size - sizeof(stored));
  check_magic(r, magic, kind);
  return r;
}

}  // namespace knnfuse
