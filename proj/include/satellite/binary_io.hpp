#pragma once

// Little-endian framing helpers shared by the feature, graph and embedding
// file formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "satellite/error.hpp"

namespace satellite::io {

namespace detail {

template <typename T>
constexpr T byteswap(T v) noexcept {
  static_assert(std::is_integral_v<T>);
  auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
    std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  return std::bit_cast<T>(bytes);
}

template <typename T>
struct uint_of;
template <>
struct uint_of<float> {
  using type = std::uint32_t;
};
template <>
struct uint_of<double> {
  using type = std::uint64_t;
};

}  // namespace detail

template <typename T>
constexpr T to_le(T v) noexcept {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else if constexpr (std::is_floating_point_v<T>) {
    using U = typename detail::uint_of<T>::type;
    return std::bit_cast<T>(detail::byteswap(std::bit_cast<U>(v)));
  } else {
    return detail::byteswap(v);
  }
}

template <typename T>
constexpr T from_le(T v) noexcept {
  return to_le(v);
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

  template <typename T>
  void scalar(T v) {
    const T le = to_le(v);
    out_.write(reinterpret_cast<const char*>(&le), sizeof(T));
  }

  template <typename T>
  void array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()));
    } else {
      for (const T& v : values) scalar(v);
    }
  }

  /// u16 length prefix followed by the raw bytes.
  void short_string(std::string_view s) {
    if (s.size() > 0xFFFF) fail(ErrorKind::format, "string longer than 65535 bytes: " + std::string(s.substr(0, 32)) + "...");
    scalar<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  bool good() const { return out_.good(); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  void expect_magic(std::string_view tag) {
    std::string buf(tag.size(), '\0');
    in_.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in_ || buf != tag) {
      fail(ErrorKind::format, source_ + ": bad magic, expected \"" + std::string(tag) + "\"");
    }
  }

  template <typename T>
  T scalar(std::string_view what) {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) fail(ErrorKind::format, source_ + ": truncated while reading " + std::string(what));
    return from_le(v);
  }

  template <typename T>
  void array(std::span<T> out, std::string_view what) {
    in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size_bytes()));
    if (!in_) fail(ErrorKind::format, source_ + ": truncated while reading " + std::string(what));
    if constexpr (std::endian::native != std::endian::little) {
      for (T& v : out) v = from_le(v);
    }
  }

  std::string short_string(std::string_view what) {
    const auto len = scalar<std::uint16_t>(what);
    std::string s(len, '\0');
    in_.read(s.data(), len);
    if (!in_) fail(ErrorKind::format, source_ + ": truncated while reading " + std::string(what));
    return s;
  }

  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }

  const std::string& source() const { return source_; }

 private:
  std::istream& in_;
  std::string source_;
};

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string() + " for reading");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes `contents` to a sibling temp file and renames it over `path`, so a
/// reader never observes a half-written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    auto out = open_out(tmp);
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) fail(ErrorKind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

}  // namespace satellite::io
