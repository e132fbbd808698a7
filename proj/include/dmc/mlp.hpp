#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmc/errors.hpp"
#include "dmc/matrix.hpp"
#include "dmc/rng.hpp"

namespace dmc {

template <typename T>
void check_finite(const Mat<T>& m, const char* context) {
  for (size_t i = 0; i < m.data.size(); ++i) {
    if (!std::isfinite(static_cast<double>(m.data[i]))) {
      throw NumericError(std::string(context) + ": non-finite value at index " +
                         std::to_string(i));
    }
  }
}

// Fully connected net: ReLU on hidden layers, linear last layer. Heads that
// need several outputs (mean+logvar, twin critics) slice output columns.
template <typename T>
struct Mlp {
  std::vector<size_t> layer_sizes;  // [in, h1, ..., out]
  std::vector<Mat<T>> weights;      // weights[l]: (sizes[l] x sizes[l+1])
  std::vector<Mat<T>> biases;       // biases[l]: (1 x sizes[l+1])

  size_t n_layers() const { return weights.size(); }
  size_t in_dim() const { return layer_sizes.front(); }
  size_t out_dim() const { return layer_sizes.back(); }

  size_t param_count() const {
    size_t n = 0;
    for (size_t l = 0; l < weights.size(); ++l)
      n += weights[l].size() + biases[l].size();
    return n;
  }
};

using MlpF = Mlp<float>;

// Uniform init in ±1/sqrt(fan_in) for both weights and biases. Draw order is
// fixed (weights row-major, then bias, layer by layer) so a seed pins every
// parameter bit.
template <typename T>
Mlp<T> make_mlp(const std::vector<size_t>& layer_sizes, Rng& rng) {
  if (layer_sizes.size() < 2)
    throw ValidationError("mlp: need at least input and output sizes");
  Mlp<T> m;
  m.layer_sizes = layer_sizes;
  for (size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const size_t in = layer_sizes[l], out = layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Mat<T> w(in, out), b(1, out);
    for (auto& x : w.data) x = static_cast<T>(rng.uniform(-bound, bound));
    for (auto& x : b.data) x = static_cast<T>(rng.uniform(-bound, bound));
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

// Per-layer activations kept for the backward pass.
// act[0] is the input; act[l+1] is layer l's output after its activation.
template <typename T>
struct MlpCache {
  std::vector<Mat<T>> act;
  std::vector<Mat<T>> pre;  // pre-activation of each layer
};

template <typename T>
Mat<T> mlp_forward(const Mlp<T>& model, const Mat<T>& input,
                   MlpCache<T>* cache = nullptr) {
  if (input.cols != model.in_dim()) {
    throw ValidationError(
        "mlp_forward: input has " + std::to_string(input.cols) +
        " columns, model expects " + std::to_string(model.in_dim()));
  }
  if (cache) {
    cache->act.clear();
    cache->pre.clear();
    cache->act.push_back(input);
  }
  Mat<T> cur = input;
  const size_t L = model.n_layers();
  for (size_t l = 0; l < L; ++l) {
    Mat<T> z;
    matmul(cur, model.weights[l], z);
    const T* b = model.biases[l].row(0);
    for (size_t i = 0; i < z.rows; ++i) {
      T* zi = z.row(i);
      for (size_t j = 0; j < z.cols; ++j) zi[j] += b[j];
    }
    check_finite(z, "mlp_forward");
    if (cache) cache->pre.push_back(z);
    if (l + 1 < L) {
      for (auto& x : z.data) x = x > T(0) ? x : T(0);
    }
    if (cache) cache->act.push_back(z);
    cur = std::move(z);
  }
  return cur;
}

template <typename T>
struct MlpGrads {
  std::vector<Mat<T>> dw;
  std::vector<Mat<T>> db;
  Mat<T> dinput;
};

// Exact reverse-mode gradients for the minibatch. upstream is dL/d(output).
template <typename T>
MlpGrads<T> mlp_backward(const Mlp<T>& model, const MlpCache<T>& cache,
                         const Mat<T>& upstream) {
  const size_t L = model.n_layers();
  if (upstream.cols != model.out_dim() || upstream.rows != cache.act[0].rows) {
    throw ValidationError(
        "mlp_backward: upstream is " + std::to_string(upstream.rows) + "x" +
        std::to_string(upstream.cols) + ", expected " +
        std::to_string(cache.act[0].rows) + "x" +
        std::to_string(model.out_dim()));
  }
  MlpGrads<T> g;
  g.dw.resize(L);
  g.db.resize(L);
  Mat<T> delta = upstream;  // dL/d(pre[l]) while walking backwards
  for (size_t l = L; l-- > 0;) {
    matmul_tn(cache.act[l], delta, g.dw[l]);
    g.db[l] = Mat<T>(1, delta.cols);
    T* db = g.db[l].row(0);
    for (size_t i = 0; i < delta.rows; ++i) {
      const T* di = delta.row(i);
      for (size_t j = 0; j < delta.cols; ++j) db[j] += di[j];
    }
    Mat<T> dprev;
    matmul_nt(delta, model.weights[l], dprev);
    if (l > 0) {
      const Mat<T>& pre = cache.pre[l - 1];
      for (size_t i = 0; i < dprev.data.size(); ++i) {
        if (!(pre.data[i] > T(0))) dprev.data[i] = T(0);
      }
    }
    delta = std::move(dprev);
  }
  g.dinput = std::move(delta);
  return g;
}

}  // namespace dmc
