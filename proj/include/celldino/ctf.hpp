#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>

#include "celldino/error.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// Tensor container file "CTF1": magic bytes `CTF1`, little-endian u32 ndim,
// ndim x u32 dims, u8 dtype code (0 = u16, 1 = f32, 2 = f64), then the raw
// row-major payload. Little-endian hosts only.
namespace ctf {

template <class T>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, std::uint16_t>) return 0;
  if constexpr (std::is_same_v<T, float>) return 1;
  if constexpr (std::is_same_v<T, double>) return 2;
}

inline const char* dtype_name(std::uint8_t code) {
  switch (code) {
    case 0: return "u16";
    case 1: return "f32";
    case 2: return "f64";
    default: return "unknown";
  }
}

template <class T>
inline void write(const std::filesystem::path& path, const Tensor<T>& t) {
  static_assert(dtype_code<T>() <= 2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write("CTF1", 4);
  const std::uint32_t ndim = static_cast<std::uint32_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&ndim), 4);
  for (std::size_t i = 0; i < t.ndim(); ++i) {
    const std::uint32_t d = static_cast<std::uint32_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  const std::uint8_t code = dtype_code<T>();
  f.write(reinterpret_cast<const char*>(&code), 1);
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!f) throw IoError("short write: " + path.string());
}

struct Header {
  Shape shape;
  std::uint8_t dtype = 0;
};

inline Header read_header(std::ifstream& f, const std::string& name) {
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "CTF1", 4) != 0)
    throw IoError("not a CTF1 file: " + name);
  std::uint32_t ndim = 0;
  if (!f.read(reinterpret_cast<char*>(&ndim), 4) || ndim > 8)
    throw IoError("corrupt CTF1 header: " + name);
  Header h;
  h.shape.resize(ndim);
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint32_t d = 0;
    if (!f.read(reinterpret_cast<char*>(&d), 4))
      throw IoError("corrupt CTF1 header: " + name);
    h.shape[i] = d;
  }
  if (!f.read(reinterpret_cast<char*>(&h.dtype), 1) || h.dtype > 2)
    throw IoError("corrupt CTF1 dtype: " + name);
  return h;
}

template <class T>
inline Tensor<T> read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path.string());
  const Header h = read_header(f, path.string());
  if (h.dtype != dtype_code<T>())
    throw IoError("CTF1 dtype mismatch in " + path.string() + ": file holds " +
                  dtype_name(h.dtype) + ", requested " +
                  dtype_name(dtype_code<T>()));
  Tensor<T> t(h.shape);
  f.read(reinterpret_cast<char*>(t.data()),
         static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (f.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(T)))
    throw IoError("truncated CTF1 payload: " + path.string());
  return t;
}

inline Header peek(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path.string());
  return read_header(f, path.string());
}

}  // namespace ctf
}  // namespace celldino
