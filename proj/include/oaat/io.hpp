#pragma once

// Versioned binary container for named tensors plus string metadata. Used
// for checkpoints and for the adversarial-example archives the CLI emits.
// Layout (little-endian, native float):
//   magic "OAATBIN1" | u32 n_meta | (u32 klen, k, u32 vlen, v)*
//   u32 n_tensors    | (u32 nlen, name, u8 dtype, u32 ndim, i64 dims*, payload)*
// dtype: 0 = f32, 1 = f64.

#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "oaat/tensor.hpp"

namespace oaat {

struct Container {
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensorf> tensors;
};

namespace io_detail {
inline void put_u32(std::FILE* f, uint32_t v) { std::fwrite(&v, 4, 1, f); }
inline void put_str(std::FILE* f, const std::string& s) {
  put_u32(f, static_cast<uint32_t>(s.size()));
  std::fwrite(s.data(), 1, s.size(), f);
}
inline uint32_t get_u32(std::FILE* f) {
  uint32_t v = 0;
  if (std::fread(&v, 4, 1, f) != 1) throw std::runtime_error("container: truncated");
  return v;
}
inline std::string get_str(std::FILE* f) {
  uint32_t n = get_u32(f);
  if (n > (1u << 20)) throw std::runtime_error("container: bad string length");
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n) throw std::runtime_error("container: truncated");
  return s;
}
}  // namespace io_detail

inline void save_container(const std::string& path, const Container& c) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path);
  std::fwrite("OAATBIN1", 1, 8, f);
  io_detail::put_u32(f, static_cast<uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    io_detail::put_str(f, k);
    io_detail::put_str(f, v);
  }
  io_detail::put_u32(f, static_cast<uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    io_detail::put_str(f, name);
    const uint8_t dtype = 0;
    std::fwrite(&dtype, 1, 1, f);
    io_detail::put_u32(f, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) std::fwrite(&d, 8, 1, f);
    std::fwrite(t.data.data(), sizeof(float), t.data.size(), f);
  }
  std::fclose(f);
}

inline Container load_container(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot read " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::string(magic, 8) != "OAATBIN1") {
    std::fclose(f);
    throw std::runtime_error(path + ": not a container file");
  }
  Container c;
  try {
    const uint32_t nm = io_detail::get_u32(f);
    for (uint32_t i = 0; i < nm; ++i) {
      std::string k = io_detail::get_str(f);
      c.meta[k] = io_detail::get_str(f);
    }
    const uint32_t nt = io_detail::get_u32(f);
    for (uint32_t i = 0; i < nt; ++i) {
      std::string name = io_detail::get_str(f);
      uint8_t dtype = 0;
      if (std::fread(&dtype, 1, 1, f) != 1 || dtype != 0)
        throw std::runtime_error("container: unsupported dtype");
      const uint32_t nd = io_detail::get_u32(f);
      if (nd > 8) throw std::runtime_error("container: bad rank");
      std::vector<int64_t> shape(nd);
      for (auto& d : shape)
        if (std::fread(&d, 8, 1, f) != 1) throw std::runtime_error("container: truncated");
      Tensorf t(shape);
      if (t.data.size() &&
          std::fread(t.data.data(), sizeof(float), t.data.size(), f) != t.data.size())
        throw std::runtime_error("container: truncated tensor " + name);
      c.tensors.emplace(std::move(name), std::move(t));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return c;
}

}  // namespace oaat
