#pragma once

// Little-endian byte buffers shared by the bundle and checkpoint formats.
// Both formats end with a CRC32 (zlib polynomial) over every preceding byte.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <iterator>
#include <type_traits>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "tdcss/errors.hpp"

namespace tdcss {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  template <class T>
  void put_array(const T* data, std::size_t n) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n * sizeof(T));
  }

  void put_bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    put_bytes(s);
  }

  /// Appends the CRC32 of everything written so far.
  void seal() { put<std::uint32_t>(crc32_of(buf_.data(), buf_.size())); }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  void write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw UsageError("short write to '" + path + "'");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> buf, std::string what) : buf_(std::move(buf)), what_(std::move(what)) {}

  static ByteReader from_file(const std::string& path, std::string what) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw UsageError(what + ": cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(buf), std::move(what));
  }

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return buf_.size(); }

  void expect_magic(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(buf_.data(), magic.data(), magic.size()) != 0)
      throw FormatError(what_ + ": bad magic at offset 0 (expected \"" + std::string(magic) + "\")");
    pos_ += magic.size();
  }

  template <class T>
  T get(std::string_view field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
  void get_array(T* out, std::size_t n, std::string_view field) {
    if (n > (buf_.size() - pos_) / sizeof(T))
      need(n > SIZE_MAX / sizeof(T) ? SIZE_MAX : n * sizeof(T), field);
    std::memcpy(out, buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }

  std::string get_string(std::string_view field) {
    const auto n = get<std::uint64_t>(field);
    need(n, field);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  /// Compares the trailing CRC32 with the bytes before it, without moving.
  void verify_trailing_crc() const {
    if (buf_.size() < sizeof(std::uint32_t)) need(buf_.size() + 1, "crc32");
    const std::size_t body = buf_.size() - sizeof(std::uint32_t);
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + body, sizeof(stored));
    if (stored != crc32_of(buf_.data(), body))
      throw FormatError(what_ + ": checksum mismatch (crc32 at offset " + std::to_string(body) + ")");
  }

  /// After the last field: only the 4-byte CRC may remain.
  void expect_crc_next() const {
    const std::size_t rest = buf_.size() - pos_;
    if (rest != sizeof(std::uint32_t))
      throw FormatError(what_ + ": expected crc32 at offset " + std::to_string(pos_) + ", found " +
                        std::to_string(rest) + " remaining bytes");
  }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(what_ + ": truncated at offset " + std::to_string(pos_) + " reading " + std::string(field) +
                        " (need " + std::to_string(n) + " bytes, have " + std::to_string(buf_.size() - pos_) + ")");
  }

  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace tdcss
