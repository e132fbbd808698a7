#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/cvae.hpp"
#include "dmc/dataset.hpp"
#include "dmc/envsim.hpp"
#include "dmc/errors.hpp"
#include "dmc/knn.hpp"
#include "dmc/matrix.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"

namespace dmc {

// Score-weighted expectile-regression offline RL. Source rows enter the
// value losses scaled by omega = w_k * 1(w_k >= top-xi% threshold); gated
// rows are excluded from every update entirely. The policy is Gaussian with
// a state-dependent mean and a state-independent log-std, regularized toward
// the support of the target behavior density.

inline constexpr double kLogStdLo = -20.0;
inline constexpr double kLogStdHi = 2.0;
inline constexpr size_t kPolicyHidden = 256;

struct IqlConfig {
  double gamma = 0.99;
  double tau_expectile = 0.7;
  double beta_awbc = 3.0;
  double adv_clip = 100.0;   // cap on exp(beta * advantage)
  double lambda_reg = 0.1;   // support-regularizer coefficient
  double xi = 50.0;          // top-quantile selection percent
  double polyak = 5e-3;
  size_t batch_size = 128;   // per dataset, per step
  size_t reg_samples = 8;    // latent draws for the behavior density bound
  size_t metrics_every = 1000;
  AdamConfig adam;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0))
      throw ValidationError("iql config: gamma must be in (0, 1]");
    if (!(tau_expectile > 0.0 && tau_expectile < 1.0))
      throw ValidationError("iql config: tau_expectile must be in (0, 1)");
    if (!(beta_awbc >= 0.0))
      throw ValidationError("iql config: beta_awbc must be >= 0");
    if (!(adv_clip > 0.0))
      throw ValidationError("iql config: adv_clip must be > 0");
    if (!(lambda_reg >= 0.0))
      throw ValidationError("iql config: lambda_reg must be >= 0");
    if (!(xi >= 0.0 && xi < 100.0))
      throw ValidationError("iql config: xi must be in [0, 100)");
    if (!(polyak > 0.0 && polyak < 1.0))
      throw ValidationError("iql config: polyak must be in (0, 1)");
    if (batch_size < 1)
      throw ValidationError("iql config: batch_size must be >= 1");
    if (reg_samples < 1)
      throw ValidationError("iql config: reg_samples must be >= 1");
    if (metrics_every < 1)
      throw ValidationError("iql config: metrics_every must be >= 1");
  }
};

// L2_tau(u) = |tau - 1(u < 0)| * u^2.
inline double expectile_loss(double u, double tau_expectile) {
  if (!(tau_expectile > 0.0 && tau_expectile < 1.0))
    throw ValidationError("expectile_loss: tau must be in (0, 1)");
  const double w = u < 0.0 ? 1.0 - tau_expectile : tau_expectile;
  return w * u * u;
}

struct PolicyBundle {
  size_t state_dim = 0;
  size_t action_dim = 0;
  IqlConfig cfg;
  MlpF q1, q2;
  MlpF q1_target, q2_target;
  MlpF v;
  MlpF pi_mean;
  std::vector<float> pi_logstd;  // raw; clamped to [kLogStdLo, kLogStdHi]
  std::optional<CvaeModel> behavior;
  AdamState<float> opt_v, opt_q, opt_pi;
  bool trained = false;

  double logstd_eff(size_t j) const {
    return std::clamp(static_cast<double>(pi_logstd[j]), kLogStdLo, kLogStdHi);
  }
};

// Draw order (q1, q2, v, pi_mean) is fixed so a seed pins every parameter.
// Targets start as exact copies of the online heads.
inline PolicyBundle make_bundle(size_t state_dim, size_t action_dim,
                                const IqlConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (state_dim == 0 || action_dim == 0)
    throw ValidationError("make_bundle: zero state or action dim");
  PolicyBundle b;
  b.state_dim = state_dim;
  b.action_dim = action_dim;
  b.cfg = cfg;
  Rng rng(seed);
  const size_t H = kPolicyHidden;
  b.q1 = make_mlp<float>({state_dim + action_dim, H, H, 1}, rng);
  b.q2 = make_mlp<float>({state_dim + action_dim, H, H, 1}, rng);
  b.v = make_mlp<float>({state_dim, H, H, 1}, rng);
  b.pi_mean = make_mlp<float>({state_dim, H, H, action_dim}, rng);
  b.q1_target = b.q1;
  b.q2_target = b.q2;
  b.pi_logstd.assign(action_dim, 0.0f);
  b.opt_v = AdamState<float>::shaped(mlp_param_sizes(b.v), cfg.adam);
  std::vector<size_t> q_sizes = mlp_param_sizes(b.q1);
  const std::vector<size_t> q2_sizes = mlp_param_sizes(b.q2);
  q_sizes.insert(q_sizes.end(), q2_sizes.begin(), q2_sizes.end());
  b.opt_q = AdamState<float>::shaped(q_sizes, cfg.adam);
  std::vector<size_t> pi_sizes = mlp_param_sizes(b.pi_mean);
  pi_sizes.push_back(action_dim);
  b.opt_pi = AdamState<float>::shaped(pi_sizes, cfg.adam);
  return b;
}

// Minibatch gathered out of a dataset; rows may repeat.
struct Batch {
  MatF s, a, s2;
  std::vector<float> r, term;
  size_t n = 0;
};

inline Batch gather_batch(const TransitionDataset& ds,
                          const std::vector<size_t>& idx) {
  Batch b;
  b.n = idx.size();
  const size_t S = ds.state_dim, A = ds.action_dim;
  b.s = MatF(b.n, S);
  b.a = MatF(b.n, A);
  b.s2 = MatF(b.n, S);
  b.r.resize(b.n);
  b.term.resize(b.n);
  for (size_t i = 0; i < b.n; ++i) {
    if (idx[i] >= ds.n_rows())
      throw ValidationError("gather_batch: index out of range");
    std::copy(ds.s(idx[i]), ds.s(idx[i]) + S, b.s.row(i));
    std::copy(ds.a(idx[i]), ds.a(idx[i]) + A, b.a.row(i));
    std::copy(ds.next_s(idx[i]), ds.next_s(idx[i]) + S, b.s2.row(i));
    b.r[i] = ds.r(idx[i]);
    b.term[i] = ds.terminal(idx[i]);
  }
  return b;
}

// omega_i = w_i * 1(w_i >= top-xi% threshold over the whole table).
struct OmegaTable {
  std::vector<double> omega;
  double threshold = 0.0;
};

inline OmegaTable omega_from_scores(const ScoreTable& scores, double xi) {
  OmegaTable t;
  t.threshold = quantile_threshold(scores, xi);
  t.omega.resize(scores.size());
  for (size_t i = 0; i < scores.size(); ++i)
    t.omega[i] = scores.weight[i] >= t.threshold ? scores.weight[i] : 0.0;
  return t;
}

namespace detail {

inline MatF concat_cols(const MatF& a, const MatF& b) {
  if (a.rows != b.rows) throw ValidationError("concat_cols: row mismatch");
  MatF out(a.rows, a.cols + b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    std::copy(a.row(i), a.row(i) + a.cols, out.row(i));
    std::copy(b.row(i), b.row(i) + b.cols, out.row(i) + a.cols);
  }
  return out;
}

inline MatF stack_rows(const MatF& top, const MatF& bot) {
  if (top.cols != bot.cols) throw ValidationError("stack_rows: col mismatch");
  MatF out(top.rows + bot.rows, top.cols);
  std::copy(top.data.begin(), top.data.end(), out.data.begin());
  std::copy(bot.data.begin(), bot.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(top.data.size()));
  return out;
}

inline void polyak_update(MlpF& target, const MlpF& online, double c) {
  for (size_t l = 0; l < online.n_layers(); ++l) {
    for (size_t i = 0; i < online.weights[l].data.size(); ++i) {
      const double t = target.weights[l].data[i];
      target.weights[l].data[i] =
          static_cast<float>(t + c * (online.weights[l].data[i] - t));
    }
    for (size_t i = 0; i < online.biases[l].data.size(); ++i) {
      const double t = target.biases[l].data[i];
      target.biases[l].data[i] =
          static_cast<float>(t + c * (online.biases[l].data[i] - t));
    }
  }
}

// min over the two target heads, evaluated without caches.
inline std::vector<double> min_target_q(const PolicyBundle& b,
                                        const MatF& sa) {
  const MatF o1 = mlp_forward(b.q1_target, sa);
  const MatF o2 = mlp_forward(b.q2_target, sa);
  std::vector<double> q(sa.rows);
  for (size_t i = 0; i < sa.rows; ++i)
    q[i] = std::min(static_cast<double>(o1.at(i, 0)),
                    static_cast<double>(o2.at(i, 0)));
  return q;
}

}  // namespace detail

struct ValueReport {
  double loss_v = 0.0;
  double loss_q = 0.0;
};

// One value-side step: expectile V update against min target Q, then the
// twin-Q regression toward r + gamma*(1-terminal)*V(s') with the freshly
// updated V, then a Polyak pull of the targets. Source rows are weighted by
// omega/|B_src|, target rows by 1/|B_tar|; omega = 0 rows add exactly zero
// gradient. The source batch may be empty.
inline ValueReport update_value(PolicyBundle& b, const Batch& tar,
                                const Batch& src,
                                const std::vector<double>& omega) {
  if (tar.n == 0) throw ValidationError("update_value: empty target batch");
  if (omega.size() != src.n)
    throw ValidationError("update_value: omega size differs from batch");
  if (tar.s.cols != b.state_dim || tar.a.cols != b.action_dim ||
      (src.n != 0 && (src.s.cols != b.state_dim || src.a.cols != b.action_dim)))
    throw ValidationError("update_value: batch dims disagree with bundle");
  const double tau = b.cfg.tau_expectile;
  const size_t nt = tar.n, ns = src.n, n = nt + ns;

  // Per-row outer weights: stratified means, omega on the source side.
  std::vector<double> wrow(n);
  for (size_t i = 0; i < nt; ++i) wrow[i] = 1.0 / static_cast<double>(nt);
  for (size_t i = 0; i < ns; ++i)
    wrow[nt + i] = omega[i] / static_cast<double>(ns);

  const MatF s_all =
      ns ? detail::stack_rows(tar.s, src.s) : tar.s;
  const MatF sa_all = detail::concat_cols(
      s_all, ns ? detail::stack_rows(tar.a, src.a) : tar.a);

  // V expectile step against the frozen targets.
  const std::vector<double> qmin = detail::min_target_q(b, sa_all);
  MlpCache<float> vcache;
  const MatF vout = mlp_forward(b.v, s_all, &vcache);
  ValueReport rep;
  MatF vup(n, 1);
  for (size_t i = 0; i < n; ++i) {
    const double u = qmin[i] - static_cast<double>(vout.at(i, 0));
    const double w = u < 0.0 ? 1.0 - tau : tau;
    rep.loss_v += wrow[i] * w * u * u;
    // d/dV of L2_tau(q - V)
    vup.at(i, 0) = static_cast<float>(wrow[i] * w * 2.0 * u * -1.0);
  }
  const MlpGrads<float> vg = mlp_backward(b.v, vcache, vup);
  adam_step(mlp_param_refs(b.v, vg), b.opt_v);

  // Twin-Q regression toward the one-step target with the updated V.
  const MatF s2_all =
      ns ? detail::stack_rows(tar.s2, src.s2) : tar.s2;
  const MatF v2 = mlp_forward(b.v, s2_all);
  std::vector<double> y(n);
  for (size_t i = 0; i < n; ++i) {
    const double r = i < nt ? tar.r[i] : src.r[i - nt];
    const double t = i < nt ? tar.term[i] : src.term[i - nt];
    y[i] = r + b.cfg.gamma * (1.0 - t) * static_cast<double>(v2.at(i, 0));
  }
  MlpCache<float> c1, c2;
  const MatF o1 = mlp_forward(b.q1, sa_all, &c1);
  const MatF o2 = mlp_forward(b.q2, sa_all, &c2);
  MatF up1(n, 1), up2(n, 1);
  for (size_t i = 0; i < n; ++i) {
    const double d1 = static_cast<double>(o1.at(i, 0)) - y[i];
    const double d2 = static_cast<double>(o2.at(i, 0)) - y[i];
    rep.loss_q += wrow[i] * (d1 * d1 + d2 * d2);
    up1.at(i, 0) = static_cast<float>(wrow[i] * 2.0 * d1);
    up2.at(i, 0) = static_cast<float>(wrow[i] * 2.0 * d2);
  }
  const MlpGrads<float> g1 = mlp_backward(b.q1, c1, up1);
  const MlpGrads<float> g2 = mlp_backward(b.q2, c2, up2);
  std::vector<ParamRef<float>> qrefs = mlp_param_refs(b.q1, g1);
  const std::vector<ParamRef<float>> q2refs = mlp_param_refs(b.q2, g2);
  qrefs.insert(qrefs.end(), q2refs.begin(), q2refs.end());
  adam_step(qrefs, b.opt_q);

  detail::polyak_update(b.q1_target, b.q1, b.cfg.polyak);
  detail::polyak_update(b.q2_target, b.q2, b.cfg.polyak);
  return rep;
}

struct PolicyReport {
  double loss_pi = 0.0;
};

// Advantage-weighted behavior cloning over the target rows plus the selected
// (omega > 0) source rows, minus lambda times the behavior density of the
// policy mean at the same states. Gated source rows never reach the policy.
inline PolicyReport update_policy(PolicyBundle& b, const Batch& tar,
                                  const Batch& src,
                                  const std::vector<double>& omega,
                                  uint64_t reg_seed) {
  if (tar.n == 0) throw ValidationError("update_policy: empty target batch");
  if (omega.size() != src.n)
    throw ValidationError("update_policy: omega size differs from batch");
  if (b.cfg.lambda_reg > 0.0 && (!b.behavior || !b.behavior->trained))
    throw ValidationError(
        "update_policy: support regularizer needs a trained behavior model");

  std::vector<size_t> keep;
  for (size_t i = 0; i < src.n; ++i)
    if (omega[i] > 0.0) keep.push_back(i);
  const size_t m = tar.n + keep.size();
  MatF s(m, b.state_dim), a(m, b.action_dim);
  for (size_t i = 0; i < tar.n; ++i) {
    std::copy(tar.s.row(i), tar.s.row(i) + b.state_dim, s.row(i));
    std::copy(tar.a.row(i), tar.a.row(i) + b.action_dim, a.row(i));
  }
  for (size_t j = 0; j < keep.size(); ++j) {
    std::copy(src.s.row(keep[j]), src.s.row(keep[j]) + b.state_dim,
              s.row(tar.n + j));
    std::copy(src.a.row(keep[j]), src.a.row(keep[j]) + b.action_dim,
              a.row(tar.n + j));
  }

  // Clipped advantage weights from the frozen value side.
  const MatF sa = detail::concat_cols(s, a);
  const std::vector<double> q = detail::min_target_q(b, sa);
  const MatF vout = mlp_forward(b.v, s);
  std::vector<double> f(m);
  for (size_t i = 0; i < m; ++i) {
    const double adv = q[i] - static_cast<double>(vout.at(i, 0));
    f[i] = std::min(std::exp(b.cfg.beta_awbc * adv), b.cfg.adv_clip);
  }

  MlpCache<float> cache;
  const MatF mu = mlp_forward(b.pi_mean, s, &cache);
  std::vector<double> sig(b.action_dim), inv_var(b.action_dim);
  for (size_t j = 0; j < b.action_dim; ++j) {
    sig[j] = std::exp(b.logstd_eff(j));
    inv_var[j] = 1.0 / (sig[j] * sig[j]);
  }

  PolicyReport rep;
  MatF dmu(m, b.action_dim);
  std::vector<double> dlogstd(b.action_dim, 0.0);
  const double inv_m = 1.0 / static_cast<double>(m);
  double bc = 0.0;
  for (size_t i = 0; i < m; ++i) {
    double lp = 0.0;
    for (size_t j = 0; j < b.action_dim; ++j) {
      const double diff =
          static_cast<double>(a.at(i, j)) - static_cast<double>(mu.at(i, j));
      const double z2 = diff * diff * inv_var[j];
      lp += -detail::kHalfLog2Pi - b.logstd_eff(j) - 0.5 * z2;
      // d(-f*lp)/dmu and d(-f*lp)/dlogstd, averaged over rows
      dmu.at(i, j) = static_cast<float>(-inv_m * f[i] * diff * inv_var[j]);
      dlogstd[j] += -inv_m * f[i] * (z2 - 1.0);
    }
    bc += -inv_m * f[i] * lp;
  }
  rep.loss_pi = bc;

  if (b.cfg.lambda_reg > 0.0) {
    const CvaeLogProb reg = cvae_log_prob(*b.behavior, s, mu,
                                          b.cfg.reg_samples, reg_seed,
                                          /*want_grad=*/true);
    double reg_mean = 0.0;
    for (size_t i = 0; i < m; ++i) reg_mean += reg.logp[i];
    reg_mean *= inv_m;
    rep.loss_pi -= b.cfg.lambda_reg * reg_mean;
    const double c = -b.cfg.lambda_reg * inv_m;
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < b.action_dim; ++j)
        dmu.at(i, j) +=
            static_cast<float>(c * static_cast<double>(reg.grad_a.at(i, j)));
  }

  const MlpGrads<float> g = mlp_backward(b.pi_mean, cache, dmu);
  std::vector<float> glogstd(b.action_dim);
  for (size_t j = 0; j < b.action_dim; ++j) {
    const double raw = static_cast<double>(b.pi_logstd[j]);
    // saturated clamp passes no gradient
    glogstd[j] = (raw > kLogStdLo && raw < kLogStdHi)
                     ? static_cast<float>(dlogstd[j])
                     : 0.0f;
  }
  std::vector<ParamRef<float>> refs = mlp_param_refs(b.pi_mean, g);
  refs.push_back({b.pi_logstd.data(), glogstd.data(), b.action_dim});
  adam_step(refs, b.opt_pi);
  return rep;
}

// Deterministic (mean-action) controller view of the bundle.
inline PolicyFn policy_fn(const PolicyBundle& b) {
  return [&b](const float* state, float* action) {
    MatF s(1, b.state_dim);
    std::copy(state, state + b.state_dim, s.row(0));
    const MatF mu = mlp_forward(b.pi_mean, s);
    std::copy(mu.row(0), mu.row(0) + b.action_dim, action);
  };
}

inline void sample_action(const PolicyBundle& b, const float* state,
                          float* action, Rng& rng) {
  MatF s(1, b.state_dim);
  std::copy(state, state + b.state_dim, s.row(0));
  const MatF mu = mlp_forward(b.pi_mean, s);
  for (size_t j = 0; j < b.action_dim; ++j) {
    const double v =
        static_cast<double>(mu.at(0, j)) + std::exp(b.logstd_eff(j)) * rng.normal();
    if (!std::isfinite(v)) throw NumericError("sample_action: non-finite");
    action[j] = static_cast<float>(v);
  }
}

struct MetricsRow {
  size_t step = 0;
  double loss_v = 0.0;
  double loss_q = 0.0;
  double loss_pi = 0.0;
  double mean_omega = 0.0;
  double frac_selected = 0.0;
  std::optional<double> eval_return;
  std::optional<double> eval_ns;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << "step,loss_v,loss_q,loss_pi,mean_omega,frac_selected,"
        "eval_return,eval_ns\n";
  char buf[64];
  const auto num = [&buf](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (const MetricsRow& r : rows) {
    os << r.step << ',' << num(r.loss_v) << ',' << num(r.loss_q) << ','
       << num(r.loss_pi) << ',' << num(r.mean_omega) << ','
       << num(r.frac_selected) << ',';
    if (r.eval_return) os << num(*r.eval_return);
    os << ',';
    if (r.eval_ns) os << num(*r.eval_ns);
    os << '\n';
  }
  if (!os) throw IoError("write failed: " + path);
}

// Optional periodic rollout evaluation attached to the training loop.
struct EvalHook {
  const EnvSpec* spec = nullptr;
  const EvalReference* ref = nullptr;
  int episodes = 10;
};

struct TrainPolicyResult {
  PolicyBundle bundle;
  std::vector<MetricsRow> metrics;
};

// Per step: draw 128 source + 128 target rows, one value-side update, one
// policy update over the selected rows. Metrics rows carry window means.
// Scores must fingerprint-match the source buffer they were computed on.
inline TrainPolicyResult train_policy(const TransitionDataset& src,
                                      const ScoreTable& scores,
                                      const TransitionDataset& tar,
                                      std::optional<CvaeModel> behavior,
                                      const IqlConfig& cfg, size_t steps,
                                      uint64_t seed,
                                      const EvalHook* eval = nullptr) {
  cfg.validate();
  if (src.state_dim != tar.state_dim || src.action_dim != tar.action_dim)
    throw ValidationError("train_policy: source/target dims disagree");
  if (src.n_rows() == 0 || tar.n_rows() == 0)
    throw ValidationError("train_policy: empty dataset");
  if (scores.size() != src.n_rows() ||
      scores.fingerprint != dataset_fingerprint(src))
    throw ValidationError("train_policy: stale scores for this source");
  if (cfg.lambda_reg > 0.0 && (!behavior || !behavior->trained))
    throw ValidationError(
        "train_policy: lambda_reg > 0 needs a trained behavior model");
  if (behavior && (behavior->state_dim != src.state_dim ||
                   behavior->action_dim != src.action_dim))
    throw ValidationError("train_policy: behavior model dims disagree");
  if (eval && (!eval->spec || !eval->ref))
    throw ValidationError("train_policy: eval hook missing spec or ref");

  TrainPolicyResult out;
  out.bundle = make_bundle(src.state_dim, src.action_dim, cfg,
                           derive_seed(seed, 0));
  out.bundle.behavior = std::move(behavior);
  const OmegaTable om = omega_from_scores(scores, cfg.xi);

  Rng sample_rng(derive_seed(seed, 1));
  std::vector<size_t> src_idx(cfg.batch_size), tar_idx(cfg.batch_size);
  std::vector<double> omega(cfg.batch_size);
  double acc_v = 0, acc_q = 0, acc_pi = 0, acc_om = 0, acc_sel = 0;
  size_t acc_n = 0;
  for (size_t step = 1; step <= steps; ++step) {
    for (size_t i = 0; i < cfg.batch_size; ++i)
      src_idx[i] = sample_rng.index(src.n_rows());
    for (size_t i = 0; i < cfg.batch_size; ++i)
      tar_idx[i] = sample_rng.index(tar.n_rows());
    const Batch bs = gather_batch(src, src_idx);
    const Batch bt = gather_batch(tar, tar_idx);
    for (size_t i = 0; i < cfg.batch_size; ++i) omega[i] = om.omega[src_idx[i]];

    const ValueReport vr = update_value(out.bundle, bt, bs, omega);
    const PolicyReport pr =
        update_policy(out.bundle, bt, bs, omega, derive_seed(seed, 2, step));

    acc_v += vr.loss_v;
    acc_q += vr.loss_q;
    acc_pi += pr.loss_pi;
    double so = 0, ss = 0;
    for (size_t i = 0; i < cfg.batch_size; ++i) {
      so += omega[i];
      ss += omega[i] > 0.0 ? 1.0 : 0.0;
    }
    acc_om += so / static_cast<double>(cfg.batch_size);
    acc_sel += ss / static_cast<double>(cfg.batch_size);
    acc_n += 1;

    if (step % cfg.metrics_every == 0) {
      MetricsRow row;
      row.step = step;
      row.loss_v = acc_v / static_cast<double>(acc_n);
      row.loss_q = acc_q / static_cast<double>(acc_n);
      row.loss_pi = acc_pi / static_cast<double>(acc_n);
      row.mean_omega = acc_om / static_cast<double>(acc_n);
      row.frac_selected = acc_sel / static_cast<double>(acc_n);
      if (eval) {
        const EvalResult er =
            evaluate(*eval->spec, policy_fn(out.bundle), *eval->ref,
                     eval->episodes, derive_seed(seed, 3, step));
        row.eval_return = er.j;
        row.eval_ns = er.ns;
      }
      out.metrics.push_back(row);
      acc_v = acc_q = acc_pi = acc_om = acc_sel = 0;
      acc_n = 0;
    }
  }
  out.bundle.trained = steps > 0;
  return out;
}

// --- checkpointing: DMCW records [q1, q2, q1_target, q2_target, v, pi_mean]
// plus a JSON sidecar with the log-std vector and hyperparameters. The
// behavior model and optimizer moments are not part of the artifact.

inline void save_policy(const std::string& dmcw_path,
                        const std::string& json_path, const PolicyBundle& b) {
  write_mlp_file(dmcw_path, {&b.q1, &b.q2, &b.q1_target, &b.q2_target, &b.v,
                             &b.pi_mean});
  nlohmann::json j;
  j["kind"] = "policy";
  j["state_dim"] = b.state_dim;
  j["action_dim"] = b.action_dim;
  j["pi_logstd"] = nlohmann::json::array();
  for (float x : b.pi_logstd) j["pi_logstd"].push_back(static_cast<double>(x));
  j["logstd_clamp"] = {kLogStdLo, kLogStdHi};
  j["gamma"] = b.cfg.gamma;
  j["tau_expectile"] = b.cfg.tau_expectile;
  j["beta_awbc"] = b.cfg.beta_awbc;
  j["adv_clip"] = b.cfg.adv_clip;
  j["lambda_reg"] = b.cfg.lambda_reg;
  j["xi"] = b.cfg.xi;
  j["polyak"] = b.cfg.polyak;
  j["trained"] = b.trained;
  std::ofstream os(json_path);
  if (!os) throw IoError("cannot write " + json_path);
  os << j.dump(2) << "\n";
}

inline PolicyBundle load_policy(const std::string& dmcw_path,
                                const std::string& json_path) {
  std::ifstream is(json_path);
  if (!is) throw IoError("cannot read " + json_path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": bad JSON: " + e.what());
  }
  PolicyBundle b;
  try {
    if (j.at("kind").get<std::string>() != "policy")
      throw ValidationError(json_path + ": not a policy sidecar");
    b.state_dim = j.at("state_dim").get<size_t>();
    b.action_dim = j.at("action_dim").get<size_t>();
    for (const auto& x : j.at("pi_logstd"))
      b.pi_logstd.push_back(static_cast<float>(x.get<double>()));
    b.cfg.gamma = j.at("gamma").get<double>();
    b.cfg.tau_expectile = j.at("tau_expectile").get<double>();
    b.cfg.beta_awbc = j.at("beta_awbc").get<double>();
    b.cfg.adv_clip = j.at("adv_clip").get<double>();
    b.cfg.lambda_reg = j.at("lambda_reg").get<double>();
    b.cfg.xi = j.at("xi").get<double>();
    b.cfg.polyak = j.at("polyak").get<double>();
    b.trained = j.at("trained").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(json_path + ": missing field: " + e.what());
  }
  if (b.pi_logstd.size() != b.action_dim)
    throw ValidationError(json_path + ": log-std size disagrees");
  std::vector<MlpF> nets = read_mlp_file(dmcw_path);
  if (nets.size() != 6)
    throw ValidationError(dmcw_path + ": expected 6 networks, found " +
                          std::to_string(nets.size()));
  const size_t S = b.state_dim, A = b.action_dim;
  for (int i = 0; i < 4; ++i)
    if (nets[i].in_dim() != S + A || nets[i].out_dim() != 1)
      throw ValidationError(dmcw_path + ": critic dims disagree with sidecar");
  if (nets[4].in_dim() != S || nets[4].out_dim() != 1)
    throw ValidationError(dmcw_path + ": value dims disagree with sidecar");
  if (nets[5].in_dim() != S || nets[5].out_dim() != A)
    throw ValidationError(dmcw_path + ": policy dims disagree with sidecar");
  b.q1 = std::move(nets[0]);
  b.q2 = std::move(nets[1]);
  b.q1_target = std::move(nets[2]);
  b.q2_target = std::move(nets[3]);
  b.v = std::move(nets[4]);
  b.pi_mean = std::move(nets[5]);
  b.opt_v = AdamState<float>::shaped(mlp_param_sizes(b.v), b.cfg.adam);
  std::vector<size_t> q_sizes = mlp_param_sizes(b.q1);
  const std::vector<size_t> q2_sizes = mlp_param_sizes(b.q2);
  q_sizes.insert(q_sizes.end(), q2_sizes.begin(), q2_sizes.end());
  b.opt_q = AdamState<float>::shaped(q_sizes, b.cfg.adam);
  std::vector<size_t> pi_sizes = mlp_param_sizes(b.pi_mean);
  pi_sizes.push_back(b.action_dim);
  b.opt_pi = AdamState<float>::shaped(pi_sizes, b.cfg.adam);
  return b;
}

}  // namespace dmc
