#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/dataset.hpp"
#include "dmc/errors.hpp"
#include "dmc/knn.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"
#include "dmc/thread_pool.hpp"

namespace dmc {

// Denoising diffusion over whole transition vectors x = s|a|r|s',
// conditioned on the proximity weight of the row. Rewards ride along in x so
// generated transitions are directly trainable; neighbor distances and
// conditioning scores elsewhere use s|a|s' only.

// Fixed noise levels sigma[0..T], sigma[0] = 0 exactly, increasing in t.
// Levels 1..T follow the power interpolation between sigma_min and
// sigma_max with exponent rho_sched (rho_sched = 1 gives linear spacing).
struct NoiseSchedule {
  size_t T = 0;
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  double rho_sched = 0.0;
  std::vector<double> sigma;  // size T+1
};

inline NoiseSchedule make_schedule(size_t T, double sigma_min,
                                   double sigma_max, double rho_sched) {
  if (T < 2) throw ValidationError("make_schedule: T must be >= 2");
  if (!(sigma_min > 0.0) || !(sigma_min < sigma_max))
    throw ValidationError("make_schedule: need 0 < sigma_min < sigma_max");
  if (!(rho_sched > 0.0) || !std::isfinite(rho_sched))
    throw ValidationError("make_schedule: rho_sched must be positive");
  NoiseSchedule s;
  s.T = T;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.rho_sched = rho_sched;
  s.sigma.resize(T + 1);
  s.sigma[0] = 0.0;
  const double lo = std::pow(sigma_min, 1.0 / rho_sched);
  const double hi = std::pow(sigma_max, 1.0 / rho_sched);
  for (size_t t = 1; t <= T; ++t) {
    const double u =
        lo + (static_cast<double>(t - 1) / static_cast<double>(T - 1)) *
                 (hi - lo);
    s.sigma[t] = std::pow(u, rho_sched);
  }
  s.sigma[1] = sigma_min;   // pin endpoints against pow round-trip error
  s.sigma[T] = sigma_max;
  for (size_t t = 1; t <= T; ++t)
    if (!(s.sigma[t] > s.sigma[t - 1]))
      throw NumericError("make_schedule: levels not strictly increasing");
  return s;
}

// Condition-channel value reserved for "no condition". Real conditioning
// values are proximity weights in (0, 1], so -1 cannot collide.
constexpr double kNullToken = -1.0;

// Scalar noise-level feature fed to the net. sigma = 0 gets a reserved
// value strictly below every real level's embedding (log of the smallest
// positive level, minus 1) so the zero level stays distinguishable.
inline double sigma_embed(double sigma, double sigma1) {
  return sigma > 0.0 ? std::log(sigma) / 4.0 : std::log(sigma1) / 4.0 - 1.0;
}

struct DenoiserModel {
  size_t state_dim = 0;
  size_t action_dim = 0;        // x layout: s | a | r | s'
  NoiseSchedule schedule;
  NormStats norm;               // data-space normalization for x
  MlpF net;                     // (x_dim + cond + sigma feature) -> x_dim
  bool trained = false;
  double heldout_loss_initial = 0.0;
  double heldout_loss_final = 0.0;

  size_t x_dim() const { return 2 * state_dim + action_dim + 1; }
};

struct GuidanceConfig {
  double w_guide = 1.5;
  double kappa = 90.0;      // condition-quantile floor, percent
  size_t n_samples = 1000000;
  size_t sampler_steps = 18;

  void validate() const {
    if (!(kappa >= 0.0) || !(kappa < 100.0))
      throw ValidationError("guidance: kappa must be in [0, 100)");
    if (n_samples < 1)
      throw ValidationError("guidance: need at least one sample");
    if (sampler_steps < 2)
      throw ValidationError("guidance: sampler needs at least 2 steps");
    if (!std::isfinite(w_guide))
      throw ValidationError("guidance: w_guide must be finite");
  }
};

// --- normalized-vector packing ---

inline void pack_x(const TransitionDataset& ds, size_t i, const NormStats& st,
                   float* x) {
  const size_t S = ds.state_dim, A = ds.action_dim;
  for (size_t j = 0; j < S; ++j)
    x[j] = static_cast<float>((ds.s(i)[j] - st.mean[j]) / st.stddev[j]);
  for (size_t j = 0; j < A; ++j)
    x[S + j] =
        static_cast<float>((ds.a(i)[j] - st.mean[S + j]) / st.stddev[S + j]);
  x[S + A] = static_cast<float>((ds.r(i) - st.reward_mean) / st.reward_std);
  for (size_t j = 0; j < S; ++j)
    x[S + A + 1 + j] = static_cast<float>(
        (ds.next_s(i)[j] - st.mean[S + A + j]) / st.stddev[S + A + j]);
}

// Inverse of pack_x into a dataset row (terminal forced to 0).
inline void unpack_x(const double* x, const NormStats& st, size_t S, size_t A,
                     float* row) {
  for (size_t j = 0; j < S; ++j)
    row[j] = static_cast<float>(x[j] * st.stddev[j] + st.mean[j]);
  for (size_t j = 0; j < A; ++j)
    row[S + j] =
        static_cast<float>(x[S + j] * st.stddev[S + j] + st.mean[S + j]);
  row[S + A] =
      static_cast<float>(x[S + A] * st.reward_std + st.reward_mean);
  for (size_t j = 0; j < S; ++j)
    row[S + A + 1 + j] = static_cast<float>(
        x[S + A + 1 + j] * st.stddev[S + A + j] + st.mean[S + A + j]);
  row[2 * S + A + 1] = 0.0f;
}

// --- loss ---

// Mean over rows of ||x - G(x + sigma[t]*eps, cond, sigma[t])||^2.
// Callers supply noise, levels, and condition values so evaluations pair
// exactly across model snapshots.
inline double denoiser_loss(const DenoiserModel& m, const MatF& x_clean,
                            const std::vector<double>& conds,
                            const std::vector<size_t>& ts, const MatF& eps) {
  const size_t B = x_clean.rows, D = m.x_dim();
  if (x_clean.cols != D || eps.rows != B || eps.cols != D ||
      conds.size() != B || ts.size() != B)
    throw ValidationError("denoiser_loss: shape mismatch");
  MatF in(B, D + 2);
  for (size_t i = 0; i < B; ++i) {
    if (ts[i] > m.schedule.T)
      throw ValidationError("denoiser_loss: noise level out of range");
    const double sig = m.schedule.sigma[ts[i]];
    float* r = in.row(i);
    for (size_t d = 0; d < D; ++d)
      r[d] = static_cast<float>(static_cast<double>(x_clean.at(i, d)) +
                                sig * static_cast<double>(eps.at(i, d)));
    r[D] = static_cast<float>(conds[i]);
    r[D + 1] = static_cast<float>(sigma_embed(sig, m.schedule.sigma[1]));
  }
  const MatF pred = mlp_forward(m.net, in);
  double total = 0.0;
  for (size_t i = 0; i < B; ++i)
    for (size_t d = 0; d < D; ++d) {
      const double diff = static_cast<double>(x_clean.at(i, d)) -
                          static_cast<double>(pred.at(i, d));
      total += diff * diff;
    }
  return total / static_cast<double>(B);
}

namespace detail {

// Held-out objective with all randomness (level, noise, mask) drawn from
// one seeded stream: identical seed pairs the estimate across snapshots.
inline double heldout_denoiser_loss(const DenoiserModel& m, const MatF& x,
                                    const std::vector<double>& weights,
                                    uint64_t seed) {
  const size_t B = x.rows, D = m.x_dim();
  Rng rng(seed);
  std::vector<double> conds(B);
  std::vector<size_t> ts(B);
  MatF eps(B, D);
  for (size_t i = 0; i < B; ++i) {
    ts[i] = static_cast<size_t>(rng.index(m.schedule.T + 1));
    for (size_t d = 0; d < D; ++d)
      eps.at(i, d) = static_cast<float>(rng.normal());
    conds[i] = rng.uniform() < 0.25 ? kNullToken : weights[i];
  }
  return denoiser_loss(m, x, conds, ts, eps);
}

}  // namespace detail

// --- training ---

inline DenoiserModel train_denoiser(const TransitionDataset& src,
                                    const ScoreTable& scores,
                                    const NoiseSchedule& schedule,
                                    size_t steps, uint64_t seed,
                                    size_t batch_size = 128,
                                    AdamConfig adam_cfg = {}) {
  src.validate("denoiser training data");
  if (scores.size() != src.n_rows() ||
      scores.fingerprint != dataset_fingerprint(src))
    throw ValidationError(
        "train_denoiser: score table does not match the dataset (stale "
        "scores)");
  DenoiserModel m;
  m.state_dim = src.state_dim;
  m.action_dim = src.action_dim;
  m.schedule = schedule;
  m.norm = compute_norm_stats(src);
  const size_t D = m.x_dim();
  Rng init_rng(derive_seed(seed, 0));
  m.net = make_mlp<float>({D + 2, 256, 256, D}, init_rng);

  const size_t n = src.n_rows();
  std::vector<uint32_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<uint32_t>(i);
  Rng split_rng(derive_seed(seed, 1));
  for (size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[split_rng.index(i)]);
  size_t n_held = n / 20;
  if (n_held == 0 && n > 1) n_held = 1;
  const size_t n_train = n - n_held;

  MatF x_all(n, D);
  for (size_t i = 0; i < n; ++i) pack_x(src, i, m.norm, x_all.row(i));

  const size_t h0 = n_held ? n_train : 0;
  const size_t hc = n_held ? n_held : n;
  MatF held_x(hc, D);
  std::vector<double> held_w(hc);
  for (size_t i = 0; i < hc; ++i) {
    const uint32_t r = order[h0 + i];
    std::copy(x_all.row(r), x_all.row(r) + D, held_x.row(i));
    held_w[i] = scores.weight[r];
  }
  const uint64_t eval_seed = derive_seed(seed, 2);
  m.heldout_loss_initial =
      detail::heldout_denoiser_loss(m, held_x, held_w, eval_seed);

  AdamState<float> opt =
      AdamState<float>::shaped(mlp_param_sizes(m.net), adam_cfg);
  Rng rng(derive_seed(seed, 3));
  const size_t B = std::min(batch_size, std::max<size_t>(n_train, 1));
  MatF in(B, D + 2), target(B, D);
  for (size_t it = 0; it < steps; ++it) {
    for (size_t i = 0; i < B; ++i) {
      const uint32_t r = order[n_train ? rng.index(n_train) : rng.index(n)];
      const size_t t = static_cast<size_t>(rng.index(schedule.T + 1));
      const double sig = schedule.sigma[t];
      const float* x = x_all.row(r);
      float* ri = in.row(i);
      for (size_t d = 0; d < D; ++d) {
        ri[d] = static_cast<float>(static_cast<double>(x[d]) +
                                   sig * rng.normal());
        target.at(i, d) = x[d];
      }
      const bool masked = rng.uniform() < 0.25;
      ri[D] = static_cast<float>(masked ? kNullToken : scores.weight[r]);
      ri[D + 1] = static_cast<float>(sigma_embed(sig, schedule.sigma[1]));
    }
    MlpCache<float> cache;
    const MatF pred = mlp_forward(m.net, in, &cache);
    MatF up(B, D);
    for (size_t i = 0; i < B; ++i)
      for (size_t d = 0; d < D; ++d)
        up.at(i, d) = static_cast<float>(
            2.0 *
            (static_cast<double>(pred.at(i, d)) -
             static_cast<double>(target.at(i, d))) /
            static_cast<double>(B));
    MlpGrads<float> grads = mlp_backward(m.net, cache, up);
    std::vector<ParamRef<float>> refs = mlp_param_refs(m.net, grads);
    adam_step(refs, opt);
  }
  m.heldout_loss_final =
      detail::heldout_denoiser_loss(m, held_x, held_w, eval_seed);
  m.trained = true;
  return m;
}

// --- guided sampling ---

// Noise estimate at one level: eps = (x - G(x, cond, sigma)) / sigma.
inline Mat<double> denoise_to_eps(const DenoiserModel& m,
                                  const Mat<double>& x, double cond,
                                  double sigma) {
  if (!(sigma > 0.0))
    throw ValidationError("denoise_to_eps: sigma must be positive");
  const size_t B = x.rows, D = m.x_dim();
  if (x.cols != D) throw ValidationError("denoise_to_eps: width mismatch");
  MatF in(B, D + 2);
  const float emb =
      static_cast<float>(sigma_embed(sigma, m.schedule.sigma[1]));
  for (size_t i = 0; i < B; ++i) {
    float* r = in.row(i);
    for (size_t d = 0; d < D; ++d)
      r[d] = static_cast<float>(x.at(i, d));
    r[D] = static_cast<float>(cond);
    r[D + 1] = emb;
  }
  const MatF pred = mlp_forward(m.net, in);
  Mat<double> eps(B, D);
  for (size_t i = 0; i < B; ++i)
    for (size_t d = 0; d < D; ++d)
      eps.at(i, d) =
          (x.at(i, d) - static_cast<double>(pred.at(i, d))) / sigma;
  return eps;
}

// Classifier-free combination w*eps_cond + (1-w)*eps_uncond. w = 0 and
// w = 1 evaluate a single branch, so they are bit-identical to the pure
// unconditional / conditional estimates by construction.
inline Mat<double> guided_eps(const DenoiserModel& m, const Mat<double>& x,
                              std::optional<double> y, double w,
                              double sigma) {
  if (!y.has_value() || w == 0.0)
    return denoise_to_eps(m, x, kNullToken, sigma);
  if (w == 1.0) return denoise_to_eps(m, x, *y, sigma);
  Mat<double> ec = denoise_to_eps(m, x, *y, sigma);
  const Mat<double> eu = denoise_to_eps(m, x, kNullToken, sigma);
  for (size_t i = 0; i < ec.size(); ++i)
    ec.data[i] = w * ec.data[i] + (1.0 - w) * eu.data[i];
  return ec;
}

namespace detail {

// Deterministic first-order reverse pass for one batch. x enters as
// N(0, sigma_max^2 I) draws and leaves at sigma = 0.
inline void reverse_diffuse(const DenoiserModel& m, const NoiseSchedule& sch,
                            std::optional<double> y, double w,
                            Mat<double>& x) {
  for (size_t t = sch.T; t >= 1; --t) {
    const Mat<double> eps = guided_eps(m, x, y, w, sch.sigma[t]);
    const double dsig = sch.sigma[t - 1] - sch.sigma[t];
    for (size_t i = 0; i < x.size(); ++i)
      x.data[i] += dsig * eps.data[i];
  }
}

constexpr size_t kGenBatch = 256;

// Sampler schedule: the model's own levels when the step count matches,
// otherwise regenerated at the requested resolution.
inline NoiseSchedule sampler_schedule(const DenoiserModel& m,
                                      size_t sampler_steps) {
  if (sampler_steps == m.schedule.T) return m.schedule;
  return make_schedule(sampler_steps, m.schedule.sigma_min,
                       m.schedule.sigma_max, m.schedule.rho_sched);
}

// Generates rows [0, n) into out (already sized), batch b seeded
// independently so the result is identical under any thread count.
// per_batch_y supplies the condition for each batch.
inline void generate_into(const DenoiserModel& m, const NoiseSchedule& sch,
                          const std::vector<std::optional<double>>& per_batch_y,
                          double w, size_t n, uint64_t seed,
                          TransitionDataset& out) {
  const size_t D = m.x_dim();
  const size_t n_batches = (n + kGenBatch - 1) / kGenBatch;
  const size_t row_w = out.row_width();
  parallel_for(n_batches, 1, [&](size_t b0, size_t b1) {
    for (size_t b = b0; b < b1; ++b) {
      const size_t begin = b * kGenBatch;
      const size_t end = std::min(n, begin + kGenBatch);
      Rng rng(derive_seed(seed, 0x6e5a, b));
      Mat<double> x(end - begin, D);
      for (size_t i = 0; i < x.size(); ++i)
        x.data[i] = sch.sigma[sch.T] * rng.normal();
      reverse_diffuse(m, sch, per_batch_y[b], w, x);
      for (size_t i = begin; i < end; ++i)
        unpack_x(x.row(i - begin), m.norm, m.state_dim, m.action_dim,
                 out.data.data() + i * row_w);
    }
  });
}

}  // namespace detail

inline TransitionDataset guided_sample(const DenoiserModel& m,
                                       std::optional<double> y,
                                       const GuidanceConfig& cfg,
                                       uint64_t seed) {
  cfg.validate();
  if (!m.trained)
    throw ValidationError("guided_sample: model is not trained");
  if (y.has_value() && !std::isfinite(*y))
    throw ValidationError("guided_sample: condition must be finite or null");
  const NoiseSchedule sch = detail::sampler_schedule(m, cfg.sampler_steps);
  TransitionDataset out;
  out.state_dim = m.state_dim;
  out.action_dim = m.action_dim;
  out.data.assign(cfg.n_samples * out.row_width(), 0.0f);
  out.origin.assign(cfg.n_samples, Origin::kSourceGenerated);
  const size_t n_batches =
      (cfg.n_samples + detail::kGenBatch - 1) / detail::kGenBatch;
  const std::vector<std::optional<double>> ys(n_batches, y);
  detail::generate_into(m, sch, ys, cfg.w_guide, cfg.n_samples, seed, out);
  out.validate("guided_sample output");
  return out;
}

// chi-th percentile of the weight distribution, chi ~ U[kappa, 100).
// Generation aims at high-proximity rows, so the percentile is over the
// weights (higher = closer to the target domain).
inline double sample_condition(const ScoreTable& scores, double kappa,
                               Rng& rng) {
  if (scores.size() == 0)
    throw ValidationError("sample_condition: empty score table");
  if (!(kappa >= 0.0) || !(kappa < 100.0))
    throw ValidationError("sample_condition: kappa must be in [0, 100)");
  const double chi = rng.uniform(kappa, 100.0);
  return quantile_threshold(scores, chi);
}

// Generates cfg.n_samples rows (fresh condition per batch), appends them to
// the source buffer, and re-scores the whole buffer against the target with
// the same k-NN machinery used for real rows. Scoring the union means a
// generated row's source-side neighbors come from real and generated rows
// alike, keeping the two halves of the table commensurable; rho_hat and
// weight are rebased to the combined minimum by construction.
inline std::pair<TransitionDataset, ScoreTable> augment_source(
    const TransitionDataset& src, const TransitionDataset& tar,
    const ScoreTable& scores, const DenoiserModel& model,
    const GuidanceConfig& cfg, int k, uint64_t seed) {
  cfg.validate();
  if (!model.trained)
    throw ValidationError("augment_source: model is not trained");
  if (scores.size() != src.n_rows() ||
      scores.fingerprint != dataset_fingerprint(src))
    throw ValidationError(
        "augment_source: score table does not match the source dataset "
        "(stale scores)");
  if (src.state_dim != model.state_dim ||
      src.action_dim != model.action_dim)
    throw ValidationError("augment_source: model/dataset layout mismatch");

  const NoiseSchedule sch = detail::sampler_schedule(model, cfg.sampler_steps);
  const size_t n_batches =
      (cfg.n_samples + detail::kGenBatch - 1) / detail::kGenBatch;
  std::vector<std::optional<double>> ys(n_batches);
  Rng cond_rng(derive_seed(seed, 1));
  for (size_t b = 0; b < n_batches; ++b)
    ys[b] = sample_condition(scores, cfg.kappa, cond_rng);

  TransitionDataset gen;
  gen.state_dim = src.state_dim;
  gen.action_dim = src.action_dim;
  gen.data.assign(cfg.n_samples * gen.row_width(), 0.0f);
  gen.origin.assign(cfg.n_samples, Origin::kSourceGenerated);
  detail::generate_into(model, sch, ys, cfg.w_guide, cfg.n_samples,
                        derive_seed(seed, 2), gen);
  gen.validate("augment_source generated rows");

  TransitionDataset combined = concat(src, gen);
  ScoreTable ext = score_source(combined, tar, k);
  return {std::move(combined), std::move(ext)};
}

// --- checkpointing: DMCW (single record) + JSON sidecar ---

inline void save_denoiser(const std::string& dmcw_path,
                          const std::string& json_path,
                          const DenoiserModel& m) {
  write_mlp_file(dmcw_path, {&m.net});
  nlohmann::json j;
  j["kind"] = "denoiser";
  j["state_dim"] = m.state_dim;
  j["action_dim"] = m.action_dim;
  j["schedule"] = {{"T", m.schedule.T},
                   {"sigma_min", m.schedule.sigma_min},
                   {"sigma_max", m.schedule.sigma_max},
                   {"rho_sched", m.schedule.rho_sched},
                   {"sigma", m.schedule.sigma}};
  j["norm"] = {{"mean", m.norm.mean},
               {"stddev", m.norm.stddev},
               {"reward_mean", m.norm.reward_mean},
               {"reward_std", m.norm.reward_std},
               {"n_rows", m.norm.n_rows}};
  j["null_token"] = kNullToken;
  j["trained"] = m.trained;
  j["heldout_loss_initial"] = m.heldout_loss_initial;
  j["heldout_loss_final"] = m.heldout_loss_final;
  std::ofstream os(json_path);
  if (!os) throw IoError("cannot write " + json_path);
  os << j.dump(2) << "\n";
}

inline DenoiserModel load_denoiser(const std::string& dmcw_path,
                                   const std::string& json_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("cannot read " + json_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": bad JSON: " + e.what());
  }
  DenoiserModel m;
  try {
    if (j.at("kind").get<std::string>() != "denoiser")
      throw ValidationError(json_path + ": not a denoiser sidecar");
    m.state_dim = j.at("state_dim").get<size_t>();
    m.action_dim = j.at("action_dim").get<size_t>();
    const auto& js = j.at("schedule");
    m.schedule.T = js.at("T").get<size_t>();
    m.schedule.sigma_min = js.at("sigma_min").get<double>();
    m.schedule.sigma_max = js.at("sigma_max").get<double>();
    m.schedule.rho_sched = js.at("rho_sched").get<double>();
    m.schedule.sigma = js.at("sigma").get<std::vector<double>>();
    const auto& jn = j.at("norm");
    m.norm.mean = jn.at("mean").get<std::vector<double>>();
    m.norm.stddev = jn.at("stddev").get<std::vector<double>>();
    m.norm.reward_mean = jn.at("reward_mean").get<double>();
    m.norm.reward_std = jn.at("reward_std").get<double>();
    m.norm.n_rows = jn.at("n_rows").get<size_t>();
    if (j.at("null_token").get<double>() != kNullToken)
      throw ValidationError(json_path + ": unknown null-token convention");
    m.trained = j.at("trained").get<bool>();
    m.heldout_loss_initial = j.value("heldout_loss_initial", 0.0);
    m.heldout_loss_final = j.value("heldout_loss_final", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": missing field: " + e.what());
  }
  if (m.schedule.sigma.size() != m.schedule.T + 1 ||
      m.schedule.sigma[0] != 0.0)
    throw ValidationError(json_path + ": malformed schedule");
  for (size_t t = 1; t <= m.schedule.T; ++t)
    if (!(m.schedule.sigma[t] > m.schedule.sigma[t - 1]))
      throw ValidationError(json_path + ": schedule not increasing");
  if (m.norm.mean.size() != 2 * m.state_dim + m.action_dim ||
      m.norm.stddev.size() != m.norm.mean.size())
    throw ValidationError(json_path + ": normalization size mismatch");
  std::vector<MlpF> nets = read_mlp_file(dmcw_path);
  if (nets.size() != 1)
    throw ValidationError(dmcw_path + ": expected 1 network, found " +
                          std::to_string(nets.size()));
  m.net = std::move(nets[0]);
  if (m.net.in_dim() != m.x_dim() + 2 || m.net.out_dim() != m.x_dim())
    throw ValidationError(dmcw_path + ": denoiser dims disagree with sidecar");
  return m;
}

}  // namespace dmc
