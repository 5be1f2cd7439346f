#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sstage/error.hpp"

namespace sstage {

using Bytes = std::vector<std::byte>;

inline Bytes to_bytes(std::string_view s) {
  Bytes out(s.size());
  if (!s.empty()) std::memcpy(out.data(), s.data(), s.size());
  return out;
}

inline std::string to_string(std::span<const std::byte> b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

/// Appends little-endian fields to a byte vector.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  template <typename T>
    requires std::is_integral_v<T>
  void put(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::byte>(u & 0xFF));
      if constexpr (sizeof(T) > 1) u >>= 8;
    }
  }
  void u8(std::uint8_t v) { put(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void raw(std::span<const std::byte> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  /// u32 length followed by the bytes.
  void blob(std::span<const std::byte> b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(std::as_bytes(std::span(s.data(), s.size())));
  }
  void u64_list(const std::vector<std::uint64_t>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (auto x : v) u64(x);
  }

 private:
  Bytes& out_;
};

/// Bounds-checked little-endian reader; every short read throws DecodeError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> in) : in_(in) {}

  template <typename T>
    requires std::is_integral_v<T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(std::to_integer<unsigned>(in_[pos_ + i]))
           << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() {
    const auto bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::span<const std::byte> raw(std::size_t n) {
    need(n);
    auto out = in_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  Bytes blob() {
    const auto n = u32();
    auto s = raw(n);
    return Bytes(s.begin(), s.end());
  }
  std::string str() {
    const auto n = u32();
    return to_string(raw(n));
  }
  std::vector<std::uint64_t> u64_list() {
    const auto n = u32();
    // Each element needs 8 bytes; reject impossible counts before allocating.
    if (n > remaining() / 8) fail("list length");
    std::vector<std::uint64_t> v(n);
    for (auto& x : v) x = u64();
    return v;
  }
  /// Guards count fields against absurd allocations: every element needs at
  /// least `min_elem_bytes` of remaining input.
  std::uint32_t count(std::size_t min_elem_bytes) {
    const auto n = u32();
    if (min_elem_bytes && n > remaining() / min_elem_bytes) fail("element count");
    return n;
  }

  std::size_t remaining() const { return in_.size() - pos_; }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }
  void expect_done(std::string_view what) const {
    if (!done()) {
      throw Error(ErrorCode::DecodeError,
                  std::string(what) + ": " + std::to_string(remaining()) + " trailing bytes");
    }
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) fail("truncated input");
  }
  [[noreturn]] void fail(std::string_view what) const {
    throw Error(ErrorCode::DecodeError,
                std::string(what) + " at offset " + std::to_string(pos_));
  }

  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

}  // namespace sstage
