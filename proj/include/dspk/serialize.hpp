#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dspk/autodiff.hpp"
#include "dspk/errors.hpp"
#include "dspk/tensor.hpp"

namespace dspk {

static_assert(std::endian::native == std::endian::little,
              "snapshot container assumes a little-endian host");

// Flat binary container for parameter snapshots:
//   magic "DSPK1", count u32; per record: name length u32, name bytes,
//   rank u32, shape u64 x rank, values f64 x numel (all little-endian).
inline void save_parameters(const std::string& path,
                            const std::vector<const Parameter*>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open for writing: " + path);
  out.write("DSPK1", 5);
  std::uint32_t count = static_cast<std::uint32_t>(params.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const Parameter* p : params) {
    std::uint32_t nl = static_cast<std::uint32_t>(p->name.size());
    out.write(reinterpret_cast<const char*>(&nl), 4);
    out.write(p->name.data(), nl);
    std::uint32_t rank = static_cast<std::uint32_t>(p->value.rank());
    out.write(reinterpret_cast<const char*>(&rank), 4);
    for (std::size_t d : p->value.shape) {
      std::uint64_t e = d;
      out.write(reinterpret_cast<const char*>(&e), 8);
    }
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.numel() * 8));
  }
  if (!out) throw data_error("write failed: " + path);
}

inline std::map<std::string, Tensor> load_parameters(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, "DSPK1", 5) != 0)
    throw data_error("bad snapshot magic in " + path);
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  std::map<std::string, Tensor> out;
  for (std::uint32_t r = 0; r < count; ++r) {
    std::uint32_t nl = 0;
    in.read(reinterpret_cast<char*>(&nl), 4);
    std::string name(nl, '\0');
    in.read(name.data(), nl);
    std::uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 4);
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t e = 0;
      in.read(reinterpret_cast<char*>(&e), 8);
      shape[d] = static_cast<std::size_t>(e);
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.numel() * 8));
    if (!in) throw data_error("truncated snapshot: " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

// Restores named parameters in place; every parameter must be present with a
// matching shape.
inline void load_into(const std::string& path, const std::vector<Parameter*>& params) {
  auto loaded = load_parameters(path);
  for (Parameter* p : params) {
    auto it = loaded.find(p->name);
    if (it == loaded.end()) throw data_error("snapshot missing parameter: " + p->name);
    if (it->second.shape != p->value.shape)
      throw data_error("snapshot shape mismatch for " + p->name + ": got " +
                       it->second.shape_str() + ", want " + p->value.shape_str());
    p->value = it->second;
  }
}

}  // namespace dspk
