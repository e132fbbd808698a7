#include "dmc/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dmc/knn.hpp"
#include "test_util.hpp"

namespace {

using namespace dmc;

// Two Gaussian blobs as fake transitions (1-D state and action, so the
// diffusion vector s|a|r|s' is 4-D). Even rows sit at +c, odd rows at -c.
TransitionDataset two_blob(size_t n, double c, double noise, uint64_t seed) {
  TransitionDataset d;
  d.state_dim = 1;
  d.action_dim = 1;
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    const double ctr = (i % 2 == 0) ? c : -c;
    float row[5];  // s, a, r, s', terminal
    for (size_t j = 0; j < 4; ++j)
      row[j] = static_cast<float>(ctr + noise * rng.normal());
    row[4] = 0.0f;
    d.append_row(row, Origin::kSourceReal);
  }
  return d;
}

// Score table assigning weight wa to even rows, wb to odd rows, with the
// rho/rho_hat bookkeeping kept consistent (min rho_hat = 0).
ScoreTable blob_scores(const TransitionDataset& d, double wa, double wb) {
  ScoreTable t;
  t.k = 5;
  const double ra = 1.0 / wa - 1.0, rb = 1.0 / wb - 1.0;
  t.rho_min = 0.0;
  for (size_t i = 0; i < d.n_rows(); ++i) {
    const double r = (i % 2 == 0) ? ra : rb;
    t.rho.push_back(r);
    t.rho_hat.push_back(r);
    t.weight.push_back(1.0 / (1.0 + r));
  }
  t.fingerprint = dataset_fingerprint(d);
  return t;
}

// Exact identity on the data channels, built from paired ReLU units
// (x = relu(x) - relu(-x)); condition and sigma channels are ignored.
DenoiserModel identity_denoiser(size_t state_dim, size_t action_dim) {
  DenoiserModel m;
  m.state_dim = state_dim;
  m.action_dim = action_dim;
  m.schedule = make_schedule(18, 0.002, 80.0, 7.0);
  const size_t D = m.x_dim();
  m.net.layer_sizes = {D + 2, 2 * D, D};
  m.net.weights = {MatF(D + 2, 2 * D), MatF(2 * D, D)};
  m.net.biases = {MatF(1, 2 * D), MatF(1, D)};
  for (size_t i = 0; i < D; ++i) {
    m.net.weights[0].at(i, 2 * i) = 1.0f;
    m.net.weights[0].at(i, 2 * i + 1) = -1.0f;
    m.net.weights[1].at(2 * i, i) = 1.0f;
    m.net.weights[1].at(2 * i + 1, i) = -1.0f;
  }
  m.norm.mean.assign(2 * state_dim + action_dim, 0.0);
  m.norm.stddev.assign(2 * state_dim + action_dim, 1.0);
  m.trained = true;
  return m;
}

TEST(Schedule, TwoStepEndpointsExact) {
  const NoiseSchedule s = make_schedule(2, 0.002, 80.0, 7.0);
  ASSERT_EQ(s.sigma.size(), 3u);
  EXPECT_EQ(s.sigma[0], 0.0);
  EXPECT_EQ(s.sigma[1], 0.002);
  EXPECT_EQ(s.sigma[2], 80.0);
}

TEST(Schedule, UnitExponentIsLinear) {
  const NoiseSchedule s = make_schedule(5, 1.0, 9.0, 1.0);
  const double expect[6] = {0.0, 1.0, 3.0, 5.0, 7.0, 9.0};
  for (size_t t = 0; t < 6; ++t) EXPECT_DOUBLE_EQ(s.sigma[t], expect[t]);
}

TEST(Schedule, DefaultStrictlyIncreasing) {
  const NoiseSchedule s = make_schedule(18, 0.002, 80.0, 7.0);
  ASSERT_EQ(s.sigma.size(), 19u);
  EXPECT_EQ(s.sigma[0], 0.0);
  for (size_t t = 1; t <= 18; ++t) EXPECT_GT(s.sigma[t], s.sigma[t - 1]);
  EXPECT_EQ(s.sigma[18], 80.0);
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(make_schedule(1, 0.002, 80.0, 7.0), ValidationError);
  EXPECT_THROW(make_schedule(18, 0.0, 80.0, 7.0), ValidationError);
  EXPECT_THROW(make_schedule(18, 80.0, 0.002, 7.0), ValidationError);
  EXPECT_THROW(make_schedule(18, 0.002, 80.0, 0.0), ValidationError);
}

TEST(DenoiserLoss, ZeroNoiseIdentityDenoiserIsExactlyZero) {
  const DenoiserModel m = identity_denoiser(2, 1);
  const size_t D = m.x_dim();
  MatF x(8, D), eps(8, D);
  Rng rng(3);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  for (auto& v : eps.data) v = static_cast<float>(rng.normal());
  const std::vector<double> conds(8, 0.5);
  const std::vector<size_t> ts(8, 0);  // sigma[0] = 0: input is x itself
  EXPECT_EQ(denoiser_loss(m, x, conds, ts, eps), 0.0);
}

TEST(CfgAlgebra, BranchCollapseAndLinearity) {
  Rng rng(17);
  DenoiserModel m;
  m.state_dim = 1;
  m.action_dim = 1;
  m.schedule = make_schedule(18, 0.002, 80.0, 7.0);
  m.net = make_mlp<float>({m.x_dim() + 2, 16, m.x_dim()}, rng);
  m.trained = true;

  Mat<double> x(5, m.x_dim());
  for (auto& v : x.data) v = rng.normal();
  const double sig = 1.7;

  const Mat<double> eu = denoise_to_eps(m, x, kNullToken, sig);
  const Mat<double> ec = denoise_to_eps(m, x, 0.8, sig);

  // w = 0 and null-condition sampling are the unconditional branch, bit for
  // bit; w = 1 is the conditional branch.
  EXPECT_EQ(guided_eps(m, x, 0.8, 0.0, sig).data, eu.data);
  EXPECT_EQ(guided_eps(m, x, std::nullopt, 1.5, sig).data, eu.data);
  EXPECT_EQ(guided_eps(m, x, 0.8, 1.0, sig).data, ec.data);

  // Interior and extrapolated w: exactly w*ec + (1-w)*eu.
  for (const double w : {0.5, 1.5}) {
    const Mat<double> ew = guided_eps(m, x, 0.8, w, sig);
    for (size_t i = 0; i < ew.size(); ++i)
      EXPECT_EQ(ew.data[i], w * ec.data[i] + (1.0 - w) * eu.data[i]);
  }
}

TEST(TrainDenoiser, HeldoutLossDecreasesAndStaleScoresRejected) {
  const TransitionDataset d = two_blob(2000, 2.0, 0.3, 5);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  const NoiseSchedule sch = make_schedule(18, 0.002, 80.0, 7.0);
  const DenoiserModel m = train_denoiser(d, scores, sch, 400, 9);
  EXPECT_TRUE(m.trained);
  EXPECT_LT(m.heldout_loss_final, m.heldout_loss_initial);

  TransitionDataset mutated = d;
  mutated.data[0] += 1.0f;
  EXPECT_THROW(train_denoiser(mutated, scores, sch, 10, 9), ValidationError);
}

TEST(TrainDenoiser, DeterministicAcrossRuns) {
  const TransitionDataset d = two_blob(600, 2.0, 0.3, 7);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  const NoiseSchedule sch = make_schedule(18, 0.002, 80.0, 7.0);
  const DenoiserModel a = train_denoiser(d, scores, sch, 150, 21);
  const DenoiserModel b = train_denoiser(d, scores, sch, 150, 21);
  for (size_t l = 0; l < a.net.weights.size(); ++l)
    EXPECT_EQ(a.net.weights[l].data, b.net.weights[l].data);
  EXPECT_EQ(a.heldout_loss_final, b.heldout_loss_final);
}

TEST(GuidedSample, DeterministicTaggedAndTerminalFree) {
  const TransitionDataset d = two_blob(800, 2.0, 0.3, 11);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  const DenoiserModel m =
      train_denoiser(d, scores, make_schedule(18, 0.002, 80.0, 7.0), 200, 13);
  GuidanceConfig cfg;
  cfg.n_samples = 500;
  const TransitionDataset s1 = guided_sample(m, 1.0, cfg, 99);
  const TransitionDataset s2 = guided_sample(m, 1.0, cfg, 99);
  EXPECT_EQ(s1.data, s2.data);
  ASSERT_EQ(s1.n_rows(), 500u);
  for (size_t i = 0; i < s1.n_rows(); ++i) {
    EXPECT_EQ(s1.origin[i], Origin::kSourceGenerated);
    EXPECT_EQ(s1.terminal(i), 0.0f);
  }

  DenoiserModel untrained = m;
  untrained.trained = false;
  EXPECT_THROW(guided_sample(untrained, 1.0, cfg, 1), ValidationError);
}

// Both directions of the normalization map: a data row survives
// pack/unpack, and a generated (normalized) vector survives
// denormalize/renormalize to within 1e-6.
TEST(Normalization, PackUnpackRoundTrip) {
  const TransitionDataset d = two_blob(300, 2.0, 0.3, 31);
  const NormStats st = compute_norm_stats(d);
  const size_t D = 2 * d.state_dim + d.action_dim + 1;
  std::vector<float> x(D);
  std::vector<float> row(d.row_width());
  for (size_t i = 0; i < d.n_rows(); i += 17) {
    pack_x(d, i, st, x.data());
    std::vector<double> xd(x.begin(), x.end());
    unpack_x(xd.data(), st, d.state_dim, d.action_dim, row.data());
    for (size_t j = 0; j + 1 < d.row_width(); ++j)
      EXPECT_NEAR(row[j], d.row(i)[j], 1e-5);
    EXPECT_EQ(row[d.row_width() - 1], 0.0f);
  }

  Rng rng(33);
  TransitionDataset synth;
  synth.state_dim = d.state_dim;
  synth.action_dim = d.action_dim;
  synth.data.resize(d.row_width());
  synth.origin.assign(1, Origin::kSourceGenerated);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xd(D);
    for (auto& v : xd) v = rng.normal();
    unpack_x(xd.data(), st, d.state_dim, d.action_dim, synth.data.data());
    pack_x(synth, 0, st, x.data());
    for (size_t j = 0; j < D; ++j)
      EXPECT_NEAR(static_cast<double>(x[j]), xd[j], 1e-6);
  }
}

// Unconditional samples must recover the two-blob shape: energy distance to
// held-back training data at least 5x better than a uniform baseline over
// the data bounding box.
TEST(GuidedSample, EnergyDistanceBeatsUniformBaseline) {
  const TransitionDataset d = two_blob(3000, 2.0, 0.3, 41);
  const ScoreTable scores = blob_scores(d, 1.0, 1.0);
  const DenoiserModel m =
      train_denoiser(d, scores, make_schedule(18, 0.002, 80.0, 7.0), 2500, 43);
  GuidanceConfig cfg;
  cfg.w_guide = 0.0;  // unconditional
  cfg.n_samples = 2000;
  const TransitionDataset samples = guided_sample(m, std::nullopt, cfg, 47);

  const auto as_x = [](const TransitionDataset& ds) {
    MatF out(ds.n_rows(), 4);
    for (size_t i = 0; i < ds.n_rows(); ++i) {
      out.at(i, 0) = ds.s(i)[0];
      out.at(i, 1) = ds.a(i)[0];
      out.at(i, 2) = ds.r(i);
      out.at(i, 3) = ds.next_s(i)[0];
    }
    return out;
  };
  const MatF train_x = as_x(d);
  const MatF gen_x = as_x(samples);

  float lo = 1e30f, hi = -1e30f;
  for (float v : train_x.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  MatF base(2000, 4);
  Rng rng(53);
  for (auto& v : base.data)
    v = static_cast<float>(rng.uniform(lo, hi));

  const double ed_gen = testutil::energy_distance(gen_x, train_x);
  const double ed_base = testutil::energy_distance(base, train_x);
  EXPECT_LT(ed_gen * 5.0, ed_base)
      << "ed_gen=" << ed_gen << " ed_base=" << ed_base;
}

// The condition identifies the blob; guided samples must land in it.
TEST(GuidedSample, ConditionSteersToTheRightBlob) {
  const TransitionDataset d = two_blob(3000, 2.0, 0.3, 61);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  const DenoiserModel m =
      train_denoiser(d, scores, make_schedule(18, 0.002, 80.0, 7.0), 2500, 67);
  GuidanceConfig cfg;
  cfg.w_guide = 1.5;
  cfg.n_samples = 1000;
  const TransitionDataset samples = guided_sample(m, 1.0, cfg, 71);
  size_t in_a = 0;
  for (size_t i = 0; i < samples.n_rows(); ++i) {
    const double coords[4] = {samples.s(i)[0], samples.a(i)[0],
                              samples.r(i), samples.next_s(i)[0]};
    double da = 0.0, db = 0.0;
    for (double v : coords) {
      da += (v - 2.0) * (v - 2.0);
      db += (v + 2.0) * (v + 2.0);
    }
    if (da < db) ++in_a;
  }
  EXPECT_GE(in_a, 900u) << "assigned to conditioned blob: " << in_a;
}

TEST(SampleCondition, QuantileSemantics) {
  const TransitionDataset d = two_blob(400, 2.0, 0.3, 81);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  Rng rng(5);
  // kappa = 90 on a half/half weight split: the top decile is all 1.0.
  for (int i = 0; i < 20; ++i)
    EXPECT_EQ(sample_condition(scores, 90.0, rng), 1.0);
  // kappa = 0 spans the empirical distribution.
  bool saw_low = false, saw_high = false;
  for (int i = 0; i < 200; ++i) {
    const double y = sample_condition(scores, 0.0, rng);
    if (y == 1.0) saw_high = true;
    if (y == 0.1) saw_low = true;
  }
  EXPECT_TRUE(saw_low);
  EXPECT_TRUE(saw_high);

  ScoreTable flat = scores;
  for (auto& w : flat.weight) w = 0.42;
  for (int i = 0; i < 10; ++i)
    EXPECT_EQ(sample_condition(flat, 37.0, rng), 0.42);

  ScoreTable empty;
  EXPECT_THROW(sample_condition(empty, 0.0, rng), ValidationError);
  EXPECT_THROW(sample_condition(scores, 100.0, rng), ValidationError);
}

// Cross-domain shape: source half-matches the target, half sits far away.
// Guided generation must concentrate where the target is: re-scored gaps of
// guided samples sit below unguided ones, and the guided mean weight beats
// the real source's.
TEST(AugmentSource, GuidanceLowersRescoredGap) {
  TransitionDataset src;
  src.state_dim = 1;
  src.action_dim = 1;
  Rng rng(91);
  for (size_t i = 0; i < 2000; ++i) {
    const double ctr = (i % 2 == 0) ? 0.0 : 4.0;
    float row[5];
    for (int j = 0; j < 4; ++j)
      row[j] = static_cast<float>(ctr + 0.3 * rng.normal());
    row[4] = 0.0f;
    src.append_row(row, Origin::kSourceReal);
  }
  TransitionDataset tar;
  tar.state_dim = 1;
  tar.action_dim = 1;
  for (size_t i = 0; i < 800; ++i) {
    float row[5];
    for (int j = 0; j < 4; ++j)
      row[j] = static_cast<float>(0.3 * rng.normal());
    row[4] = 0.0f;
    tar.append_row(row, Origin::kTarget);
  }

  const ScoreTable scores = score_source(src, tar, 5);
  // 10k steps: the sampler's last step returns the raw denoiser output at
  // sigma_min, so the net must have learned a near-identity there or the
  // generated cloud collapses and self-density corrupts the re-scoring.
  const DenoiserModel m =
      train_denoiser(src, scores, make_schedule(18, 0.002, 80.0, 7.0),
                     10000, 93);

  GuidanceConfig cfg;
  cfg.n_samples = 1000;
  cfg.kappa = 90.0;
  const auto [combined, ext] = augment_source(src, tar, scores, m, cfg, 5, 97);

  ASSERT_EQ(combined.n_rows(), 3000u);
  ASSERT_EQ(ext.size(), 3000u);
  EXPECT_EQ(ext.fingerprint, dataset_fingerprint(combined));
  for (size_t i = 0; i < src.n_rows(); ++i)
    EXPECT_EQ(combined.origin[i], Origin::kSourceReal);
  for (size_t i = src.n_rows(); i < combined.n_rows(); ++i)
    EXPECT_EQ(combined.origin[i], Origin::kSourceGenerated);
  double min_hat = 1e300;
  for (size_t i = 0; i < ext.size(); ++i) {
    EXPECT_GE(ext.rho_hat[i], 0.0);
    EXPECT_GT(ext.weight[i], 0.0);
    EXPECT_LE(ext.weight[i], 1.0);
    min_hat = std::min(min_hat, ext.rho_hat[i]);
  }
  EXPECT_EQ(min_hat, 0.0);

  // Unguided baseline, re-scored inside the same kind of combined buffer.
  GuidanceConfig uncfg = cfg;
  uncfg.w_guide = 0.0;
  const TransitionDataset unguided =
      guided_sample(m, std::nullopt, uncfg, 97);
  const ScoreTable un_scores =
      score_source(concat(src, unguided), tar, 5);

  const std::vector<double> guided_rho(ext.rho.begin() + 2000,
                                       ext.rho.end());
  const std::vector<double> unguided_rho(un_scores.rho.begin() + 2000,
                                         un_scores.rho.end());
  const double p =
      testutil::mann_whitney_p_less(guided_rho, unguided_rho);
  EXPECT_LT(p, 0.01);

  double mean_w_gen = 0.0, mean_w_src = 0.0;
  for (size_t i = 0; i < 2000; ++i) mean_w_src += ext.weight[i];
  for (size_t i = 2000; i < 3000; ++i) mean_w_gen += ext.weight[i];
  EXPECT_GT(mean_w_gen / 1000.0, mean_w_src / 2000.0);
}

TEST(AugmentSource, RejectsStaleScoresAndZeroSamples) {
  const TransitionDataset d = two_blob(200, 2.0, 0.3, 7);
  TransitionDataset tar = two_blob(100, 2.0, 0.3, 8);
  const ScoreTable scores = score_source(d, tar, 5);
  const DenoiserModel m =
      train_denoiser(d, scores, make_schedule(18, 0.002, 80.0, 7.0), 50, 3);

  GuidanceConfig cfg;
  cfg.n_samples = 0;
  EXPECT_THROW(augment_source(d, tar, scores, m, cfg, 5, 1),
               ValidationError);

  cfg.n_samples = 10;
  TransitionDataset mutated = d;
  mutated.data[3] += 0.5f;
  EXPECT_THROW(augment_source(mutated, tar, scores, m, cfg, 5, 1),
               ValidationError);
}

TEST(DenoiserCheckpoint, RoundTripPreservesSampling) {
  const TransitionDataset d = two_blob(500, 2.0, 0.3, 15);
  const ScoreTable scores = blob_scores(d, 1.0, 0.1);
  const DenoiserModel m =
      train_denoiser(d, scores, make_schedule(18, 0.002, 80.0, 7.0), 120, 19);
  const std::string dir = ::testing::TempDir();
  const std::string wpath = dir + "/denoiser.dmcw";
  const std::string jpath = dir + "/denoiser.json";
  save_denoiser(wpath, jpath, m);
  const DenoiserModel r = load_denoiser(wpath, jpath);
  EXPECT_EQ(r.schedule.sigma, m.schedule.sigma);
  EXPECT_EQ(r.norm.mean, m.norm.mean);
  EXPECT_EQ(r.norm.stddev, m.norm.stddev);
  GuidanceConfig cfg;
  cfg.n_samples = 64;
  EXPECT_EQ(guided_sample(m, 0.9, cfg, 5).data,
            guided_sample(r, 0.9, cfg, 5).data);
  std::filesystem::remove(wpath);
  std::filesystem::remove(jpath);
}

}  // namespace
