#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/mlp.hpp"

namespace dmc {

// Little-endian scalar I/O. Works on any host byte order.
namespace wire {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of file reading u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  uint32_t v = std::bit_cast<uint32_t>(f);
  put_u32(os, v);
}

inline float get_f32(std::istream& is) {
  return std::bit_cast<float>(get_u32(is));
}

inline void put_f32_array(std::ostream& os, const float* p, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 4));
  } else {
    for (size_t i = 0; i < n; ++i) put_f32(os, p[i]);
  }
}

inline void get_f32_array(std::istream& is, float* p, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * 4));
    if (!is) throw IoError("unexpected end of file reading f32 array");
  } else {
    for (size_t i = 0; i < n; ++i) p[i] = get_f32(is);
  }
}

}  // namespace wire

// Model checkpoint record: magic "DMCW", version u32, layer count, per-layer
// (in, out) dims, then parameters as little-endian f32 in layer order
// (weights row-major, then bias, per layer). Round-trips are bit-exact.
inline constexpr uint32_t kDmcwVersion = 1;

inline void write_mlp(std::ostream& os, const MlpF& m) {
  os.write("DMCW", 4);
  wire::put_u32(os, kDmcwVersion);
  wire::put_u32(os, static_cast<uint32_t>(m.n_layers()));
  for (size_t l = 0; l < m.n_layers(); ++l) {
    wire::put_u32(os, static_cast<uint32_t>(m.weights[l].rows));
    wire::put_u32(os, static_cast<uint32_t>(m.weights[l].cols));
  }
  for (size_t l = 0; l < m.n_layers(); ++l) {
    wire::put_f32_array(os, m.weights[l].data.data(), m.weights[l].size());
    wire::put_f32_array(os, m.biases[l].data.data(), m.biases[l].size());
  }
  if (!os) throw IoError("failed writing model checkpoint");
}

inline MlpF read_mlp(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMCW", 4) != 0)
    throw IoError("not a model checkpoint: bad magic");
  const uint32_t version = wire::get_u32(is);
  if (version != kDmcwVersion)
    throw IoError("unsupported model checkpoint version " +
                  std::to_string(version));
  const uint32_t L = wire::get_u32(is);
  if (L == 0 || L > 64) throw IoError("model checkpoint: bad layer count");
  std::vector<std::pair<uint32_t, uint32_t>> dims(L);
  for (auto& d : dims) {
    d.first = wire::get_u32(is);
    d.second = wire::get_u32(is);
    if (d.first == 0 || d.second == 0)
      throw IoError("model checkpoint: zero layer dimension");
  }
  for (size_t l = 0; l + 1 < L; ++l) {
    if (dims[l].second != dims[l + 1].first)
      throw IoError("model checkpoint: consecutive layer dims disagree");
  }
  MlpF m;
  m.layer_sizes.push_back(dims[0].first);
  for (auto& d : dims) m.layer_sizes.push_back(d.second);
  for (auto& d : dims) {
    MatF w(d.first, d.second), b(1, d.second);
    wire::get_f32_array(is, w.data.data(), w.size());
    wire::get_f32_array(is, b.data.data(), b.size());
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

// A checkpoint file may hold several records back to back (policy bundles,
// denoiser + helpers). Record order is the writer's contract.
inline void write_mlp_file(const std::string& path,
                           const std::vector<const MlpF*>& models) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const MlpF* m : models) write_mlp(os, *m);
}

inline std::vector<MlpF> read_mlp_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::vector<MlpF> models;
  while (is.peek() != std::char_traits<char>::eof()) {
    models.push_back(read_mlp(is));
  }
  if (models.empty()) throw IoError("empty model checkpoint: " + path);
  return models;
}

}  // namespace dmc
