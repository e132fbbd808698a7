#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmc/checkpoint.hpp"
#include "dmc/errors.hpp"
#include "dmc/matrix.hpp"

namespace dmc {

enum class Origin : uint8_t { kTarget = 0, kSourceReal = 1, kSourceGenerated = 2 };

inline const char* origin_name(Origin o) {
  switch (o) {
    case Origin::kTarget: return "target";
    case Origin::kSourceReal: return "source-real";
    case Origin::kSourceGenerated: return "source-generated";
  }
  return "?";
}

// Packed transition records: s, a, r, s', terminal per row. The layout is
// identical for every row; terminal is 0 or 1. Immutable once built.
struct TransitionDataset {
  size_t state_dim = 0;
  size_t action_dim = 0;
  std::vector<float> data;     // n_rows * row_width, packed
  std::vector<Origin> origin;  // per row

  size_t row_width() const { return 2 * state_dim + action_dim + 2; }
  size_t n_rows() const { return row_width() ? data.size() / row_width() : 0; }

  const float* row(size_t i) const { return data.data() + i * row_width(); }
  float* row(size_t i) { return data.data() + i * row_width(); }
  const float* s(size_t i) const { return row(i); }
  const float* a(size_t i) const { return row(i) + state_dim; }
  float r(size_t i) const { return row(i)[state_dim + action_dim]; }
  const float* next_s(size_t i) const {
    return row(i) + state_dim + action_dim + 1;
  }
  float terminal(size_t i) const { return row(i)[row_width() - 1]; }

  void append_row(const float* vals, Origin tag) {
    data.insert(data.end(), vals, vals + row_width());
    origin.push_back(tag);
  }

  void validate(const char* context) const {
    if (n_rows() < 1)
      throw ValidationError(std::string(context) + ": dataset has no rows");
    for (size_t i = 0; i < n_rows(); ++i) {
      const float t = terminal(i);
      if (t != 0.0f && t != 1.0f)
        throw ValidationError(std::string(context) + ": terminal not in {0,1} at row " +
                              std::to_string(i));
    }
  }
};

// Per-dimension normalization for the concatenated vector s+a+s'; rewards
// carry their own scalar stats and never enter distance computations.
struct NormStats {
  std::vector<double> mean;  // size 2*state_dim+action_dim
  std::vector<double> stddev;
  double reward_mean = 0.0;
  double reward_std = 1.0;
  size_t n_rows = 0;
};

// Two-pass population mean/std. Dimensions with raw std < 1e-8 get std 1 so
// z-scoring never divides by ~0.
inline NormStats compute_norm_stats(const TransitionDataset& ds) {
  ds.validate("compute_norm_stats");
  const size_t S = ds.state_dim, A = ds.action_dim;
  const size_t D = 2 * S + A;
  const size_t n = ds.n_rows();
  NormStats st;
  st.n_rows = n;
  st.mean.assign(D, 0.0);
  st.stddev.assign(D, 0.0);
  auto gather = [&](size_t i, size_t d) -> double {
    if (d < S) return ds.s(i)[d];
    if (d < S + A) return ds.a(i)[d - S];
    return ds.next_s(i)[d - S - A];
  };
  for (size_t i = 0; i < n; ++i) {
    for (size_t d = 0; d < D; ++d) st.mean[d] += gather(i, d);
    st.reward_mean += ds.r(i);
  }
  for (size_t d = 0; d < D; ++d) st.mean[d] /= static_cast<double>(n);
  st.reward_mean /= static_cast<double>(n);
  double rvar = 0.0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t d = 0; d < D; ++d) {
      const double dev = gather(i, d) - st.mean[d];
      st.stddev[d] += dev * dev;
    }
    const double rdev = ds.r(i) - st.reward_mean;
    rvar += rdev * rdev;
  }
  for (size_t d = 0; d < D; ++d) {
    st.stddev[d] = std::sqrt(st.stddev[d] / static_cast<double>(n));
    if (st.stddev[d] < 1e-8) st.stddev[d] = 1.0;
  }
  st.reward_std = std::sqrt(rvar / static_cast<double>(n));
  if (st.reward_std < 1e-8) st.reward_std = 1.0;
  return st;
}

// z-normalized s+a+s' rows, the space every neighbor distance lives in.
inline MatF normalized_sas(const TransitionDataset& ds, const NormStats& st) {
  const size_t S = ds.state_dim, A = ds.action_dim;
  const size_t D = 2 * S + A;
  if (st.mean.size() != D)
    throw ValidationError("normalized_sas: stats dimension differs from dataset");
  MatF out(ds.n_rows(), D);
  for (size_t i = 0; i < ds.n_rows(); ++i) {
    float* o = out.row(i);
    size_t d = 0;
    for (size_t j = 0; j < S; ++j, ++d)
      o[d] = static_cast<float>((ds.s(i)[j] - st.mean[d]) / st.stddev[d]);
    for (size_t j = 0; j < A; ++j, ++d)
      o[d] = static_cast<float>((ds.a(i)[j] - st.mean[d]) / st.stddev[d]);
    for (size_t j = 0; j < S; ++j, ++d)
      o[d] = static_cast<float>((ds.next_s(i)[j] - st.mean[d]) / st.stddev[d]);
  }
  return out;
}

inline TransitionDataset concat(const TransitionDataset& a,
                                const TransitionDataset& b) {
  a.validate("concat (first)");
  b.validate("concat (second)");
  if (a.state_dim != b.state_dim || a.action_dim != b.action_dim)
    throw ValidationError("concat: datasets have different dimensions");
  TransitionDataset out = a;
  out.data.insert(out.data.end(), b.data.begin(), b.data.end());
  out.origin.insert(out.origin.end(), b.origin.begin(), b.origin.end());
  return out;
}

// DMCD binary format: "DMC1", then little-endian u32 version=1, n_rows,
// state_dim, action_dim, flags (bit0 has_reward, bit1 has_terminal, both
// set), then packed little-endian f32 rows (s, a, r, s', terminal).
inline constexpr uint32_t kDmcdVersion = 1;

inline void save_dataset(const TransitionDataset& ds, const std::string& path) {
  ds.validate("save_dataset");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("DMC1", 4);
  wire::put_u32(os, kDmcdVersion);
  wire::put_u32(os, static_cast<uint32_t>(ds.n_rows()));
  wire::put_u32(os, static_cast<uint32_t>(ds.state_dim));
  wire::put_u32(os, static_cast<uint32_t>(ds.action_dim));
  wire::put_u32(os, 0x3u);  // has_reward | has_terminal
  wire::put_f32_array(os, ds.data.data(), ds.data.size());
  if (!os) throw IoError("failed writing dataset: " + path);
}

// Origin tags are not part of the file; the caller states what role the file
// plays (target / source-real / source-generated).
inline TransitionDataset load_dataset(const std::string& path, Origin tag) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DMC1", 4) != 0)
    throw IoError("not a transition dataset (bad magic at byte 0): " + path);
  const uint32_t version = wire::get_u32(is);
  if (version != kDmcdVersion)
    throw IoError("unsupported dataset version " + std::to_string(version) +
                  " (byte 4): " + path);
  const uint64_t n_rows = wire::get_u32(is);
  const uint64_t state_dim = wire::get_u32(is);
  const uint64_t action_dim = wire::get_u32(is);
  const uint32_t flags = wire::get_u32(is);
  if (n_rows == 0)
    throw ValidationError("dataset has zero rows (byte 8): " + path);
  if (state_dim == 0 || state_dim > (1u << 20) || action_dim == 0 ||
      action_dim > (1u << 20))
    throw IoError("dataset dimensions out of range (byte 12): " + path);
  if (flags != 0x3u)
    throw IoError("dataset flags must set has_reward and has_terminal (byte 20): " +
                  path);
  const uint64_t width = 2 * state_dim + action_dim + 2;
  const uint64_t total = n_rows * width;
  if (total > (uint64_t(1) << 33))
    throw IoError("dataset payload overflows sane bounds (byte 8): " + path);
  TransitionDataset ds;
  ds.state_dim = static_cast<size_t>(state_dim);
  ds.action_dim = static_cast<size_t>(action_dim);
  ds.data.resize(static_cast<size_t>(total));
  is.read(reinterpret_cast<char*>(ds.data.data()),
          static_cast<std::streamsize>(total * 4));
  if (static_cast<uint64_t>(is.gcount()) != total * 4) {
    throw IoError("dataset truncated at byte " +
                  std::to_string(24 + static_cast<uint64_t>(is.gcount())) +
                  ": " + path);
  }
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& f : ds.data) {
      uint32_t u = std::bit_cast<uint32_t>(f);
      u = __builtin_bswap32(u);
      f = std::bit_cast<float>(u);
    }
  }
  ds.origin.assign(ds.n_rows(), tag);
  ds.validate("load_dataset");
  return ds;
}

// CSV with header s0,...,a0,...,r,ns0,...,terminal. 9 significant digits
// round-trip any f32 exactly.
inline void save_dataset_csv(const TransitionDataset& ds,
                             const std::string& path) {
  ds.validate("save_dataset_csv");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (size_t j = 0; j < ds.state_dim; ++j) os << "s" << j << ",";
  for (size_t j = 0; j < ds.action_dim; ++j) os << "a" << j << ",";
  os << "r,";
  for (size_t j = 0; j < ds.state_dim; ++j) os << "ns" << j << ",";
  os << "terminal\n";
  char buf[64];
  for (size_t i = 0; i < ds.n_rows(); ++i) {
    const float* row = ds.row(i);
    for (size_t j = 0; j < ds.row_width(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(row[j]));
      os << buf << (j + 1 < ds.row_width() ? "," : "\n");
    }
  }
  if (!os) throw IoError("failed writing csv: " + path);
}

inline TransitionDataset load_dataset_csv(const std::string& path, Origin tag) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::string header;
  if (!std::getline(is, header))
    throw IoError("csv has no header: " + path);
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) {
      while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
      cols.push_back(c);
    }
  }
  size_t S = 0, A = 0;
  size_t p = 0;
  while (p < cols.size() && cols[p] == "s" + std::to_string(S)) ++p, ++S;
  while (p < cols.size() && cols[p] == "a" + std::to_string(A)) ++p, ++A;
  const bool shape_ok = S > 0 && A > 0 && p + 2 + S <= cols.size() &&
                        cols[p] == "r" && cols.back() == "terminal" &&
                        cols.size() == 2 * S + A + 2;
  if (shape_ok) {
    for (size_t j = 0; j < S; ++j) {
      if (cols[p + 1 + j] != "ns" + std::to_string(j))
        throw ValidationError("csv header: expected ns" + std::to_string(j) +
                              ": " + path);
    }
  } else {
    throw ValidationError("csv header does not follow s*,a*,r,ns*,terminal: " +
                          path);
  }
  TransitionDataset ds;
  ds.state_dim = S;
  ds.action_dim = A;
  std::string line;
  std::vector<float> vals(ds.row_width());
  size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    size_t j = 0;
    while (std::getline(ss, cell, ',')) {
      if (j >= vals.size())
        throw ValidationError("csv row " + std::to_string(line_no) +
                              " has too many fields: " + path);
      try {
        vals[j] = std::stof(cell);
      } catch (const std::exception&) {
        throw ValidationError("csv row " + std::to_string(line_no) +
                              " field " + std::to_string(j) +
                              " not a number: " + path);
      }
      ++j;
    }
    if (j != vals.size())
      throw ValidationError("csv row " + std::to_string(line_no) +
                            " has too few fields: " + path);
    ds.append_row(vals.data(), tag);
  }
  ds.validate("load_dataset_csv");
  return ds;
}

}  // namespace dmc
