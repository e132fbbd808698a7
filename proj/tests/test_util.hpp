#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dmc/adam.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"

namespace testutil {

struct GradCheckResult {
  size_t n_params = 0;
  size_t n_pass = 0;
  double worst_rel_err = 0.0;
  double pass_fraction() const {
    return n_params ? static_cast<double>(n_pass) / n_params : 1.0;
  }
};

// Central-difference gradient check in double precision. The loss is a fixed
// random linear functional of the network output, so its analytic gradient is
// exactly mlp_backward with that functional as upstream.
inline GradCheckResult grad_check(const std::vector<size_t>& layer_sizes,
                                  size_t batch, uint64_t seed,
                                  double h = 1e-3, double tol = 1e-4) {
  dmc::Rng rng(seed);
  auto model = dmc::make_mlp<double>(layer_sizes, rng);
  dmc::Mat<double> input(batch, layer_sizes.front());
  for (auto& x : input.data) x = rng.normal();
  dmc::Mat<double> upstream(batch, layer_sizes.back());
  for (auto& x : upstream.data) x = rng.normal();

  auto loss = [&]() {
    auto out = dmc::mlp_forward(model, input);
    double acc = 0.0;
    for (size_t i = 0; i < out.data.size(); ++i)
      acc += out.data[i] * upstream.data[i];
    return acc;
  };

  dmc::MlpCache<double> cache;
  dmc::mlp_forward(model, input, &cache);
  auto grads = dmc::mlp_backward(model, cache, upstream);

  GradCheckResult res;
  auto check_tensor = [&](dmc::Mat<double>& param, const dmc::Mat<double>& g) {
    for (size_t i = 0; i < param.data.size(); ++i) {
      const double save = param.data[i];
      param.data[i] = save + h;
      const double lp = loss();
      param.data[i] = save - h;
      const double lm = loss();
      param.data[i] = save;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = g.data[i];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      const double rel = std::fabs(fd - an) / denom;
      res.n_params += 1;
      if (rel <= tol) res.n_pass += 1;
      if (rel > res.worst_rel_err) res.worst_rel_err = rel;
    }
  };
  for (size_t l = 0; l < model.n_layers(); ++l) {
    check_tensor(model.weights[l], grads.dw[l]);
    check_tensor(model.biases[l], grads.db[l]);
  }
  return res;
}

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

// Energy distance E = 2 E||x-y|| - E||x-x'|| - E||y-y'|| over all pairs.
// Zero iff the distributions match; small-sample bias is shared by both
// sides of any comparison made with it.
inline double energy_distance(const dmc::MatF& x, const dmc::MatF& y) {
  const auto mean_cross = [](const dmc::MatF& a, const dmc::MatF& b) {
    double total = 0.0;
    for (size_t i = 0; i < a.rows; ++i)
      for (size_t j = 0; j < b.rows; ++j) {
        double d2 = 0.0;
        for (size_t d = 0; d < a.cols; ++d) {
          const double diff = static_cast<double>(a.at(i, d)) -
                              static_cast<double>(b.at(j, d));
          d2 += diff * diff;
        }
        total += std::sqrt(d2);
      }
    return total / (static_cast<double>(a.rows) * static_cast<double>(b.rows));
  };
  return 2.0 * mean_cross(x, y) - mean_cross(x, x) - mean_cross(y, y);
}

// One-sided Mann-Whitney p-value for H1 "x stochastically smaller than y",
// normal approximation (sample sizes here are in the thousands).
inline double mann_whitney_p_less(const std::vector<double>& x,
                                  const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double m = static_cast<double>(y.size());
  double u = 0.0;
  for (double xv : x)
    for (double yv : y) {
      if (xv < yv)
        u += 1.0;
      else if (xv == yv)
        u += 0.5;
    }
  const double mean = n * m / 2.0;
  const double sd = std::sqrt(n * m * (n + m + 1.0) / 12.0);
  const double z = (u - mean) / sd;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace testutil
