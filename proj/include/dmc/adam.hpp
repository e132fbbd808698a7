#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/mlp.hpp"

namespace dmc {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One contiguous trainable tensor and its gradient.
template <typename T>
struct ParamRef {
  T* param;
  const T* grad;
  size_t n;
};

// Bias-corrected Adam. Moments are stored per tensor in declaration order;
// the step counter advances exactly once per adam_step call.
template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  uint64_t step = 0;

  static AdamState shaped(const std::vector<size_t>& sizes, AdamConfig cfg) {
    AdamState st;
    st.cfg = cfg;
    for (size_t n : sizes) {
      st.m.emplace_back(n, T(0));
      st.v.emplace_back(n, T(0));
    }
    return st;
  }
};

// Rejects non-finite gradients before touching any state, naming the first
// offending flat index, then applies the standard update. Element math runs
// in double; storage stays in T.
template <typename T>
void adam_step(const std::vector<ParamRef<T>>& tensors, AdamState<T>& st) {
  if (tensors.size() != st.m.size())
    throw ValidationError("adam_step: tensor count differs from state");
  size_t flat = 0;
  for (size_t t = 0; t < tensors.size(); ++t) {
    if (tensors[t].n != st.m[t].size())
      throw ValidationError("adam_step: tensor " + std::to_string(t) +
                            " shape differs from state");
    for (size_t i = 0; i < tensors[t].n; ++i) {
      if (!std::isfinite(static_cast<double>(tensors[t].grad[i]))) {
        throw NumericError("adam_step: non-finite gradient at index " +
                           std::to_string(flat + i));
      }
    }
    flat += tensors[t].n;
  }
  st.step += 1;
  const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (size_t t = 0; t < tensors.size(); ++t) {
    T* p = tensors[t].param;
    const T* g = tensors[t].grad;
    T* m = st.m[t].data();
    T* v = st.v[t].data();
    for (size_t i = 0; i < tensors[t].n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update =
          st.cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + st.cfg.eps);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

// Adapter: an Mlp's tensors in checkpoint order (w0, b0, w1, b1, ...).
template <typename T>
std::vector<size_t> mlp_param_sizes(const Mlp<T>& m) {
  std::vector<size_t> sizes;
  for (size_t l = 0; l < m.n_layers(); ++l) {
    sizes.push_back(m.weights[l].size());
    sizes.push_back(m.biases[l].size());
  }
  return sizes;
}

template <typename T>
std::vector<ParamRef<T>> mlp_param_refs(Mlp<T>& m, const MlpGrads<T>& g) {
  std::vector<ParamRef<T>> refs;
  for (size_t l = 0; l < m.n_layers(); ++l) {
    refs.push_back({m.weights[l].data.data(), g.dw[l].data.data(),
                    m.weights[l].size()});
    refs.push_back(
        {m.biases[l].data.data(), g.db[l].data.data(), m.biases[l].size()});
  }
  return refs;
}

}  // namespace dmc
