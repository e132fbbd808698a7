#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/dataset.hpp"
#include "dmc/errors.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"

namespace dmc {

// Conditional VAE over (state, action) pairs modeling the data-collecting
// policy's action distribution. The decoder emits an action mean with fixed
// diagonal output variance; log-density queries use an importance-weighted
// bound with the latent prior as proposal.
struct CvaeModel {
  size_t state_dim = 0;
  size_t action_dim = 0;
  size_t latent_dim = 0;
  double sigma_dec = 0.1;
  MlpF encoder;  // (s+a) -> [latent mean, latent logvar]
  MlpF decoder;  // (s+z) -> action mean
  bool trained = false;
  // Held-out single-sample ELBO, paired noise, before and after training.
  double heldout_elbo_initial = 0.0;
  double heldout_elbo_final = 0.0;
};

constexpr double kLogvarLo = -4.0;
constexpr double kLogvarHi = 4.0;

inline size_t cvae_latent_dim(size_t action_dim) {
  return std::min<size_t>(2 * action_dim, 8);
}

inline CvaeModel make_cvae(size_t state_dim, size_t action_dim, Rng& rng) {
  if (state_dim == 0 || action_dim == 0)
    throw ValidationError("cvae: zero state or action dim");
  CvaeModel m;
  m.state_dim = state_dim;
  m.action_dim = action_dim;
  m.latent_dim = cvae_latent_dim(action_dim);
  m.encoder = make_mlp<float>(
      {state_dim + action_dim, 256, 256, 2 * m.latent_dim}, rng);
  m.decoder = make_mlp<float>(
      {state_dim + m.latent_dim, 256, 256, action_dim}, rng);
  return m;
}

namespace detail {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5*log(2*pi)

// log N(a; mean, sigma^2 I) summed over action dims, one batch row.
inline double gaussian_logpdf_row(const float* a, const float* mean, size_t n,
                                  double sigma) {
  const double inv2v = 1.0 / (2.0 * sigma * sigma);
  double quad = 0.0;
  for (size_t j = 0; j < n; ++j) {
    const double d = static_cast<double>(a[j]) - static_cast<double>(mean[j]);
    quad += d * d;
  }
  return -quad * inv2v -
         static_cast<double>(n) * (std::log(sigma) + kHalfLog2Pi);
}

}  // namespace detail

// Single-latent-sample ELBO per row: E_q[log p(a|s,z)] - KL(q || N(0,I)).
// The noise comes from rng, so a fixed seed yields paired estimates across
// model snapshots.
inline std::vector<double> cvae_elbo(const CvaeModel& m, const MatF& states,
                                     const MatF& actions, Rng& rng) {
  if (states.rows != actions.rows || states.cols != m.state_dim ||
      actions.cols != m.action_dim)
    throw ValidationError("cvae_elbo: batch shape mismatch");
  const size_t B = states.rows, Lm = m.latent_dim;
  MatF enc_in(B, m.state_dim + m.action_dim);
  for (size_t i = 0; i < B; ++i) {
    std::copy(states.row(i), states.row(i) + m.state_dim, enc_in.row(i));
    std::copy(actions.row(i), actions.row(i) + m.action_dim,
              enc_in.row(i) + m.state_dim);
  }
  const MatF enc_out = mlp_forward(m.encoder, enc_in);
  MatF dec_in(B, m.state_dim + Lm);
  std::vector<double> kl(B, 0.0);
  for (size_t i = 0; i < B; ++i) {
    std::copy(states.row(i), states.row(i) + m.state_dim, dec_in.row(i));
    const float* mu = enc_out.row(i);
    const float* lv_raw = enc_out.row(i) + Lm;
    float* z = dec_in.row(i) + m.state_dim;
    for (size_t j = 0; j < Lm; ++j) {
      const double lv = std::clamp(static_cast<double>(lv_raw[j]), kLogvarLo,
                                   kLogvarHi);
      const double mu_j = static_cast<double>(mu[j]);
      z[j] = static_cast<float>(mu_j + std::exp(0.5 * lv) * rng.normal());
      kl[i] += 0.5 * (std::exp(lv) + mu_j * mu_j - 1.0 - lv);
    }
  }
  const MatF mean = mlp_forward(m.decoder, dec_in);
  std::vector<double> elbo(B);
  for (size_t i = 0; i < B; ++i) {
    elbo[i] = detail::gaussian_logpdf_row(actions.row(i), mean.row(i),
                                          m.action_dim, m.sigma_dec) -
              kl[i];
  }
  return elbo;
}

inline double cvae_elbo_mean(const CvaeModel& m, const MatF& states,
                             const MatF& actions, uint64_t eps_seed) {
  Rng rng(eps_seed);
  const std::vector<double> e = cvae_elbo(m, states, actions, rng);
  double total = 0.0;
  for (double v : e) total += v;
  return total / static_cast<double>(e.size());
}

// Maximizes the ELBO with Adam. Records held-out ELBO (5% split, paired
// noise) before and after so callers can verify training made progress.
inline CvaeModel train_cvae(const TransitionDataset& tar, size_t steps,
                            uint64_t seed, size_t batch_size = 128,
                            AdamConfig adam_cfg = {}) {
  tar.validate("cvae training data");
  const size_t n = tar.n_rows();
  Rng init_rng(derive_seed(seed, 0));
  CvaeModel m = make_cvae(tar.state_dim, tar.action_dim, init_rng);
  const size_t Lm = m.latent_dim;
  const double var = m.sigma_dec * m.sigma_dec;

  // Deterministic shuffled split: last 5% (at least 1 row when n > 1) held.
  std::vector<uint32_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<uint32_t>(i);
  Rng split_rng(derive_seed(seed, 1));
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[split_rng.index(i)]);
  size_t n_held = n / 20;
  if (n_held == 0 && n > 1) n_held = 1;
  const size_t n_train = n - n_held;

  const auto gather = [&](size_t begin, size_t count, MatF& S, MatF& A) {
    S = MatF(count, tar.state_dim);
    A = MatF(count, tar.action_dim);
    for (size_t i = 0; i < count; ++i) {
      const uint32_t r = order[begin + i];
      std::copy(tar.s(r), tar.s(r) + tar.state_dim, S.row(i));
      std::copy(tar.a(r), tar.a(r) + tar.action_dim, A.row(i));
    }
  };
  MatF held_s, held_a;
  gather(n_train, n_held ? n_held : n, held_s, held_a);
  const uint64_t eps_seed = derive_seed(seed, 2);
  m.heldout_elbo_initial = cvae_elbo_mean(m, held_s, held_a, eps_seed);

  std::vector<size_t> sizes = mlp_param_sizes(m.encoder);
  const std::vector<size_t> dec_sizes = mlp_param_sizes(m.decoder);
  sizes.insert(sizes.end(), dec_sizes.begin(), dec_sizes.end());
  AdamState<float> opt = AdamState<float>::shaped(sizes, adam_cfg);

  Rng rng(derive_seed(seed, 3));
  const size_t B = std::min(batch_size, std::max<size_t>(n_train, 1));
  MatF enc_in(B, m.state_dim + m.action_dim);
  MatF actions(B, m.action_dim);
  MatF eps(B, Lm);
  for (size_t it = 0; it < steps; ++it) {
    for (size_t i = 0; i < B; ++i) {
      const uint32_t r =
          order[n_train ? rng.index(n_train) : rng.index(n)];
      std::copy(tar.s(r), tar.s(r) + tar.state_dim, enc_in.row(i));
      std::copy(tar.a(r), tar.a(r) + tar.action_dim,
                enc_in.row(i) + tar.state_dim);
      std::copy(tar.a(r), tar.a(r) + tar.action_dim, actions.row(i));
    }
    MlpCache<float> enc_cache;
    const MatF enc_out = mlp_forward(m.encoder, enc_in, &enc_cache);
    MatF dec_in(B, m.state_dim + Lm);
    for (size_t i = 0; i < B; ++i) {
      std::copy(enc_in.row(i), enc_in.row(i) + m.state_dim, dec_in.row(i));
      const float* mu = enc_out.row(i);
      const float* lv_raw = enc_out.row(i) + Lm;
      float* z = dec_in.row(i) + m.state_dim;
      for (size_t j = 0; j < Lm; ++j) {
        const double lv = std::clamp(static_cast<double>(lv_raw[j]),
                                     kLogvarLo, kLogvarHi);
        eps.at(i, j) = static_cast<float>(rng.normal());
        z[j] = static_cast<float>(static_cast<double>(mu[j]) +
                                  std::exp(0.5 * lv) * eps.at(i, j));
      }
    }
    MlpCache<float> dec_cache;
    const MatF mean = mlp_forward(m.decoder, dec_in, &dec_cache);

    // d(-ELBO)/d(mean), mean over the batch.
    MatF dmean(B, m.action_dim);
    for (size_t i = 0; i < B; ++i)
      for (size_t j = 0; j < m.action_dim; ++j)
        dmean.at(i, j) = static_cast<float>(
            (static_cast<double>(mean.at(i, j)) -
             static_cast<double>(actions.at(i, j))) /
            (var * static_cast<double>(B)));
    MlpGrads<float> dec_grads = mlp_backward(m.decoder, dec_cache, dmean);

    MatF enc_up(B, 2 * Lm);
    for (size_t i = 0; i < B; ++i) {
      const float* mu = enc_out.row(i);
      const float* lv_raw = enc_out.row(i) + Lm;
      const float* dz = dec_grads.dinput.row(i) + m.state_dim;
      for (size_t j = 0; j < Lm; ++j) {
        const double lv = std::clamp(static_cast<double>(lv_raw[j]),
                                     kLogvarLo, kLogvarHi);
        const double dmu =
            static_cast<double>(dz[j]) +
            static_cast<double>(mu[j]) / static_cast<double>(B);
        double dlv = static_cast<double>(dz[j]) * 0.5 * std::exp(0.5 * lv) *
                         static_cast<double>(eps.at(i, j)) +
                     0.5 * (std::exp(lv) - 1.0) / static_cast<double>(B);
        // Clamp gate: saturated logvar passes no gradient.
        if (static_cast<double>(lv_raw[j]) < kLogvarLo ||
            static_cast<double>(lv_raw[j]) > kLogvarHi)
          dlv = 0.0;
        enc_up.at(i, j) = static_cast<float>(dmu);
        enc_up.at(i, Lm + j) = static_cast<float>(dlv);
      }
    }
    MlpGrads<float> enc_grads = mlp_backward(m.encoder, enc_cache, enc_up);

    std::vector<ParamRef<float>> refs = mlp_param_refs(m.encoder, enc_grads);
    const std::vector<ParamRef<float>> dec_refs =
        mlp_param_refs(m.decoder, dec_grads);
    refs.insert(refs.end(), dec_refs.begin(), dec_refs.end());
    adam_step(refs, opt);
  }
  m.heldout_elbo_final = cvae_elbo_mean(m, held_s, held_a, eps_seed);
  m.trained = true;
  return m;
}

// Importance-weighted log-density bound with the prior as proposal:
// log(1/L sum_l N(a; dec(s, z_l), sigma^2 I)), z_l ~ N(0,I) from the seed.
// grad_a (optional) is the exact gradient of the bound w.r.t. the queried
// actions; the latent draws are constants, so no decoder backward is needed.
struct CvaeLogProb {
  std::vector<double> logp;
  MatF grad_a;  // empty unless requested
};

inline CvaeLogProb cvae_log_prob(const CvaeModel& m, const MatF& states,
                                 const MatF& actions, size_t L, uint64_t seed,
                                 bool want_grad = false) {
  if (!m.trained)
    throw ValidationError("cvae log_prob: model is not trained");
  if (L < 1) throw ValidationError("cvae log_prob: L must be >= 1");
  if (states.rows != actions.rows || states.cols != m.state_dim ||
      actions.cols != m.action_dim)
    throw ValidationError("cvae log_prob: batch shape mismatch");
  const size_t B = states.rows, Lm = m.latent_dim;
  Rng rng(seed);
  // Latent draws in (l, i, j) order pin the estimate for a given seed.
  MatF dec_in(L * B, m.state_dim + Lm);
  for (size_t l = 0; l < L; ++l) {
    for (size_t i = 0; i < B; ++i) {
      float* row = dec_in.row(l * B + i);
      std::copy(states.row(i), states.row(i) + m.state_dim, row);
      for (size_t j = 0; j < Lm; ++j)
        row[m.state_dim + j] = static_cast<float>(rng.normal());
    }
  }
  const MatF mean = mlp_forward(m.decoder, dec_in);
  CvaeLogProb out;
  out.logp.resize(B);
  if (want_grad) out.grad_a = MatF(B, m.action_dim);
  std::vector<double> comp(L);
  const double inv_var = 1.0 / (m.sigma_dec * m.sigma_dec);
  for (size_t i = 0; i < B; ++i) {
    double hi = -std::numeric_limits<double>::infinity();
    for (size_t l = 0; l < L; ++l) {
      comp[l] = detail::gaussian_logpdf_row(
          actions.row(i), mean.row(l * B + i), m.action_dim, m.sigma_dec);
      hi = std::max(hi, comp[l]);
    }
    double sum = 0.0;
    for (size_t l = 0; l < L; ++l) sum += std::exp(comp[l] - hi);
    out.logp[i] = hi + std::log(sum) - std::log(static_cast<double>(L));
    if (want_grad) {
      for (size_t j = 0; j < m.action_dim; ++j) {
        double g = 0.0;
        for (size_t l = 0; l < L; ++l) {
          const double w = std::exp(comp[l] - hi) / sum;
          g += w *
               (static_cast<double>(mean.at(l * B + i, j)) -
                static_cast<double>(actions.at(i, j))) *
               inv_var;
        }
        out.grad_a.at(i, j) = static_cast<float>(g);
      }
    }
  }
  return out;
}

inline double cvae_log_prob_one(const CvaeModel& m, const float* s,
                                const float* a, size_t L, uint64_t seed) {
  MatF S(1, m.state_dim), A(1, m.action_dim);
  std::copy(s, s + m.state_dim, S.row(0));
  std::copy(a, a + m.action_dim, A.row(0));
  return cvae_log_prob(m, S, A, L, seed).logp[0];
}

// --- checkpointing: DMCW records [encoder, decoder] + JSON sidecar ---

inline void save_cvae(const std::string& dmcw_path,
                      const std::string& json_path, const CvaeModel& m) {
  write_mlp_file(dmcw_path, {&m.encoder, &m.decoder});
  nlohmann::json j;
  j["kind"] = "cvae";
  j["state_dim"] = m.state_dim;
  j["action_dim"] = m.action_dim;
  j["latent_dim"] = m.latent_dim;
  j["sigma_dec"] = m.sigma_dec;
  j["logvar_clamp"] = {kLogvarLo, kLogvarHi};
  j["trained"] = m.trained;
  j["heldout_elbo_initial"] = m.heldout_elbo_initial;
  j["heldout_elbo_final"] = m.heldout_elbo_final;
  std::ofstream os(json_path);
  if (!os) throw IoError("cannot write " + json_path);
  os << j.dump(2) << "\n";
}

inline CvaeModel load_cvae(const std::string& dmcw_path,
                           const std::string& json_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("cannot read " + json_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": bad JSON: " + e.what());
  }
  CvaeModel m;
  try {
    if (j.at("kind").get<std::string>() != "cvae")
      throw ValidationError(json_path + ": not a cvae sidecar");
    m.state_dim = j.at("state_dim").get<size_t>();
    m.action_dim = j.at("action_dim").get<size_t>();
    m.latent_dim = j.at("latent_dim").get<size_t>();
    m.sigma_dec = j.at("sigma_dec").get<double>();
    m.trained = j.at("trained").get<bool>();
    m.heldout_elbo_initial = j.value("heldout_elbo_initial", 0.0);
    m.heldout_elbo_final = j.value("heldout_elbo_final", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": missing field: " + e.what());
  }
  std::vector<MlpF> nets = read_mlp_file(dmcw_path);
  if (nets.size() != 2)
    throw ValidationError(dmcw_path + ": expected 2 networks, found " +
                          std::to_string(nets.size()));
  m.encoder = std::move(nets[0]);
  m.decoder = std::move(nets[1]);
  if (m.encoder.in_dim() != m.state_dim + m.action_dim ||
      m.encoder.out_dim() != 2 * m.latent_dim)
    throw ValidationError(dmcw_path + ": encoder dims disagree with sidecar");
  if (m.decoder.in_dim() != m.state_dim + m.latent_dim ||
      m.decoder.out_dim() != m.action_dim)
    throw ValidationError(dmcw_path + ": decoder dims disagree with sidecar");
  return m;
}

}  // namespace dmc
