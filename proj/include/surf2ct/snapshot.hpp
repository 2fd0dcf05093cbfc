#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "tensor.hpp"

namespace surf2ct {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

template <class V>
void put(std::ostream& os, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  os.write(buf, sizeof(V));
}

template <class V>
V get(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<V>);
  char buf[sizeof(V)];
  if (!is.read(buf, sizeof(V))) throw FormatError("unexpected end of stream");
  V v;
  std::memcpy(&v, buf, sizeof(V));
  return v;
}

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
    throw FormatError("unexpected end of stream");
}

}  // namespace io

enum class DType : std::uint32_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else return DType::f64;
}

// Snapshot record: u32 name length, UTF-8 name, u32 dtype tag, u32 rank,
// rank x u32 extents, raw little-endian payload.
template <class T>
void write_snapshot(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  io::put_bytes(os, name.data(), name.size());
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(dtype_of<T>()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  io::put_bytes(os, t.ptr(), t.numel() * sizeof(T));
}

template <class T>
struct Snapshot {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
Snapshot<T> read_snapshot(std::istream& is) {
  Snapshot<T> s;
  const auto len = io::get<std::uint32_t>(is);
  if (len > (1u << 20)) throw FormatError("snapshot name too long");
  s.name.resize(len);
  io::get_bytes(is, s.name.data(), len);
  const auto tag = io::get<std::uint32_t>(is);
  if (tag != static_cast<std::uint32_t>(dtype_of<T>()))
    throw FormatError("snapshot '" + s.name + "': dtype tag " + std::to_string(tag) +
                      " does not match requested type");
  const auto rank = io::get<std::uint32_t>(is);
  if (rank > 16) throw FormatError("snapshot '" + s.name + "': implausible rank");
  Shape shape(rank);
  for (auto& e : shape) e = io::get<std::uint32_t>(is);
  std::vector<T> data(shape_numel(shape));
  io::get_bytes(is, data.data(), data.size() * sizeof(T));
  s.tensor = Tensor<T>(std::move(shape), std::move(data));
  return s;
}

}  // namespace surf2ct
