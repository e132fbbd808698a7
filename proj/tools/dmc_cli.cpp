// Pipeline driver. Stage-separated subcommands share one flat key=value
// config (file overridden by flags); every stage writes fixed-name artifacts
// under --out plus a manifest entry with config, seeds, and artifact hashes.
// Later stages refuse artifacts whose bytes drifted from the recorded hash.
// Exit codes: 1 generic, 2 I/O, 3 validation, 4 numeric failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dmc/cvae.hpp"
#include "dmc/dataset.hpp"
#include "dmc/diffusion.hpp"
#include "dmc/envsim.hpp"
#include "dmc/iql.hpp"
#include "dmc/knn.hpp"
#include "dmc/manifest.hpp"

namespace {

using namespace dmc;

struct StageTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double secs() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

void require_key(const std::string& v, const char* key) {
  if (v.empty())
    throw ValidationError(std::string("required config key '") + key +
                          "' is not set");
}

void ensure_out(const RunConfig& cfg) {
  require_key(cfg.out, "out");
  std::error_code ec;
  std::filesystem::create_directories(cfg.out, ec);
  if (ec)
    throw IoError("cannot create out directory " + cfg.out + ": " +
                  ec.message());
}

std::string out_file(const RunConfig& cfg, const char* name) {
  return cfg.out + "/" + name;
}

// Loads a score table and proves it belongs to this dataset and this k.
ScoreTable load_scores_checked(const std::string& path,
                               const TransitionDataset& ds,
                               const std::string& ds_desc, int k) {
  ScoreTable t = load_scores_csv(path);
  if (t.fingerprint != dataset_fingerprint(ds))
    throw ValidationError(path + " was not computed from " + ds_desc +
                          " (fingerprint mismatch); re-run score");
  if (t.k != k)
    throw ValidationError(path + " was computed with k=" +
                          std::to_string(t.k) + " but the config requests k=" +
                          std::to_string(k) + "; re-run score");
  return t;
}

// ---- score ----

void run_score(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  require_key(cfg.src, "src");
  require_key(cfg.tar, "tar");
  const ArtifactRef src_ref = hashed_artifact(cfg.src);
  const ArtifactRef tar_ref = hashed_artifact(cfg.tar);
  const auto src = load_dataset(cfg.src, Origin::kSourceReal);
  const auto tar = load_dataset(cfg.tar, Origin::kTarget);

  const ScoreTable table = score_source(src, tar, cfg.k);
  const double kl = kl_estimate(src, tar, cfg.k);
  save_scores_csv(table, out_file(cfg, "scores.csv"));

  std::vector<double> w = table.weight;
  std::sort(w.begin(), w.end());
  const auto q = [&w](double p) {
    return w[static_cast<size_t>(p * static_cast<double>(w.size() - 1) + 0.5)];
  };
  const double mean_w =
      std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());

  std::printf("scored %zu source rows against %zu target rows (k=%d)\n",
              src.n_rows(), tar.n_rows(), cfg.k);
  std::printf("kl_estimate = %.17g\n", kl);
  std::printf(
      "weight quantiles: min=%.6g p25=%.6g median=%.6g p75=%.6g max=%.6g "
      "mean=%.6g\n",
      q(0.0), q(0.25), q(0.5), q(0.75), q(1.0), mean_w);
  std::printf("wrote %s\n", out_file(cfg, "scores.csv").c_str());

  nlohmann::json summary;
  summary["kl_estimate"] = kl;
  summary["mean_weight"] = mean_w;
  summary["floored_rows"] = table.floored;
  record_stage(cfg.out, "score", cfg, cfg.seed,
               {{"src", src_ref}, {"tar", tar_ref}}, {"scores.csv"},
               timer.secs(), summary);
}

// ---- train-diffusion ----

void run_train_diffusion(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  require_key(cfg.src, "src");
  if (cfg.diffusion_steps < 1 || cfg.diffusion_batch < 1)
    throw ValidationError("diffusion_steps and diffusion_batch must be >= 1");
  const nlohmann::json man = load_manifest(cfg.out);
  require_fresh(man, "score", "scores.csv", cfg.out);
  const ArtifactRef src_ref = hashed_artifact(cfg.src);
  require_same_input(man, "score", "src", src_ref);

  const auto src = load_dataset(cfg.src, Origin::kSourceReal);
  const ScoreTable table =
      load_scores_checked(out_file(cfg, "scores.csv"), src, cfg.src, cfg.k);

  const NoiseSchedule sch =
      make_schedule(static_cast<size_t>(cfg.schedule_t), cfg.sigma_min,
                    cfg.sigma_max, cfg.rho_sched);
  AdamConfig adam;
  adam.lr = cfg.lr;
  const uint64_t seed = derive_seed(cfg.seed, kSeedDiffusionTrain);
  const DenoiserModel model = train_denoiser(
      src, table, sch, static_cast<size_t>(cfg.diffusion_steps), seed,
      static_cast<size_t>(cfg.diffusion_batch), adam);
  save_denoiser(out_file(cfg, "model.dmcw"), out_file(cfg, "model.dmcw.json"),
                model);

  std::printf("trained denoiser for %lld steps (T=%lld)\n",
              cfg.diffusion_steps, cfg.schedule_t);
  std::printf("heldout_loss: %.6g -> %.6g\n", model.heldout_loss_initial,
              model.heldout_loss_final);
  std::printf("wrote %s\n", out_file(cfg, "model.dmcw").c_str());

  nlohmann::json summary;
  summary["heldout_loss_initial"] = model.heldout_loss_initial;
  summary["heldout_loss_final"] = model.heldout_loss_final;
  record_stage(cfg.out, "train-diffusion", cfg, seed,
               {{"src", src_ref},
                {"scores", hashed_artifact(out_file(cfg, "scores.csv"))}},
               {"model.dmcw", "model.dmcw.json"}, timer.secs(), summary);
}

// ---- generate ----

void run_generate(const RunConfig& cfg) {
  StageTimer timer;
  if (cfg.count < 1)
    throw ValidationError("generate: count must be >= 1");
  ensure_out(cfg);
  require_key(cfg.src, "src");
  require_key(cfg.tar, "tar");
  const nlohmann::json man = load_manifest(cfg.out);
  require_fresh(man, "score", "scores.csv", cfg.out);
  require_fresh(man, "train-diffusion", "model.dmcw", cfg.out);
  require_fresh(man, "train-diffusion", "model.dmcw.json", cfg.out);
  const ArtifactRef src_ref = hashed_artifact(cfg.src);
  const ArtifactRef tar_ref = hashed_artifact(cfg.tar);
  require_same_input(man, "score", "src", src_ref);
  require_same_input(man, "score", "tar", tar_ref);
  require_same_input(man, "train-diffusion", "src", src_ref);

  const auto src = load_dataset(cfg.src, Origin::kSourceReal);
  const auto tar = load_dataset(cfg.tar, Origin::kTarget);
  const ScoreTable table =
      load_scores_checked(out_file(cfg, "scores.csv"), src, cfg.src, cfg.k);
  const DenoiserModel model = load_denoiser(out_file(cfg, "model.dmcw"),
                                            out_file(cfg, "model.dmcw.json"));

  GuidanceConfig g;
  g.w_guide = cfg.w_guide;
  g.kappa = cfg.kappa;
  g.n_samples = static_cast<size_t>(cfg.count);
  g.sampler_steps = static_cast<size_t>(cfg.sampler_steps);
  const uint64_t seed = derive_seed(cfg.seed, kSeedGenerate);
  const auto [combined, ext] =
      augment_source(src, tar, table, model, g, cfg.k, seed);

  TransitionDataset gen;
  gen.state_dim = combined.state_dim;
  gen.action_dim = combined.action_dim;
  for (size_t i = src.n_rows(); i < combined.n_rows(); ++i)
    gen.append_row(combined.row(i), Origin::kSourceGenerated);
  save_dataset(gen, out_file(cfg, "generated.dmcd"));
  save_scores_csv(ext, out_file(cfg, "generated_scores.csv"));

  const size_t ns = src.n_rows();
  const double mean_real =
      std::accumulate(ext.weight.begin(),
                      ext.weight.begin() + static_cast<std::ptrdiff_t>(ns),
                      0.0) /
      static_cast<double>(ns);
  const double mean_gen =
      std::accumulate(ext.weight.begin() + static_cast<std::ptrdiff_t>(ns),
                      ext.weight.end(), 0.0) /
      static_cast<double>(gen.n_rows());
  std::printf("generated %zu transitions (w_guide=%g kappa=%g)\n",
              gen.n_rows(), cfg.w_guide, cfg.kappa);
  std::printf("mean_weight: real=%.6g generated=%.6g\n", mean_real, mean_gen);
  std::printf("wrote %s\n", out_file(cfg, "generated.dmcd").c_str());

  nlohmann::json summary;
  summary["n_generated"] = gen.n_rows();
  summary["mean_weight_real"] = mean_real;
  summary["mean_weight_generated"] = mean_gen;
  record_stage(
      cfg.out, "generate", cfg, seed,
      {{"src", src_ref},
       {"tar", tar_ref},
       {"scores", hashed_artifact(out_file(cfg, "scores.csv"))},
       {"model", hashed_artifact(out_file(cfg, "model.dmcw"))}},
      {"generated.dmcd", "generated_scores.csv"}, timer.secs(), summary);
}

// ---- train-policy ----

void run_train_policy(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  require_key(cfg.src, "src");
  require_key(cfg.tar, "tar");
  const nlohmann::json man = load_manifest(cfg.out);
  const ArtifactRef src_ref = hashed_artifact(cfg.src);
  const ArtifactRef tar_ref = hashed_artifact(cfg.tar);
  require_same_input(man, "score", "src", src_ref);
  require_same_input(man, "score", "tar", tar_ref);
  require_same_input(man, "generate", "src", src_ref);
  require_same_input(man, "generate", "tar", tar_ref);

  const auto src = load_dataset(cfg.src, Origin::kSourceReal);
  const auto tar = load_dataset(cfg.tar, Origin::kTarget);

  // Trains on source + generated rows when the generate stage has run in
  // this directory, else directly on the scored source.
  const bool use_gen = man.at("stages").contains("generate");
  std::vector<std::pair<std::string, ArtifactRef>> inputs = {
      {"src", src_ref}, {"tar", tar_ref}};
  TransitionDataset train_src;
  ScoreTable table;
  if (use_gen) {
    require_fresh(man, "generate", "generated.dmcd", cfg.out);
    require_fresh(man, "generate", "generated_scores.csv", cfg.out);
    const auto gen =
        load_dataset(out_file(cfg, "generated.dmcd"), Origin::kSourceGenerated);
    train_src = concat(src, gen);
    table = load_scores_checked(out_file(cfg, "generated_scores.csv"),
                                train_src, cfg.src + " + generated.dmcd",
                                cfg.k);
    inputs.push_back(
        {"generated", hashed_artifact(out_file(cfg, "generated.dmcd"))});
    inputs.push_back(
        {"scores", hashed_artifact(out_file(cfg, "generated_scores.csv"))});
    std::printf("training on source + generated: %zu rows\n",
                train_src.n_rows());
  } else {
    require_fresh(man, "score", "scores.csv", cfg.out);
    train_src = src;
    table = load_scores_checked(out_file(cfg, "scores.csv"), train_src,
                                cfg.src, cfg.k);
    inputs.push_back(
        {"scores", hashed_artifact(out_file(cfg, "scores.csv"))});
    std::printf("training on source only: %zu rows\n", train_src.n_rows());
  }

  std::optional<CvaeModel> behavior;
  if (cfg.lambda > 0.0) {
    if (cfg.cvae_steps < 1)
      throw ValidationError("cvae_steps must be >= 1 when lambda > 0");
    behavior = train_cvae(tar, static_cast<size_t>(cfg.cvae_steps),
                          derive_seed(cfg.seed, kSeedCvae));
    std::printf("behavior model heldout elbo: %.6g -> %.6g\n",
                behavior->heldout_elbo_initial, behavior->heldout_elbo_final);
  }

  IqlConfig ic;
  ic.gamma = cfg.gamma;
  ic.tau_expectile = cfg.tau_expectile;
  ic.beta_awbc = cfg.beta;
  ic.adv_clip = cfg.adv_clip;
  ic.lambda_reg = cfg.lambda;
  ic.xi = cfg.xi;
  ic.polyak = cfg.polyak;
  if (cfg.batch < 1) throw ValidationError("batch must be >= 1");
  ic.batch_size = static_cast<size_t>(cfg.batch);
  if (cfg.reg_samples < 1) throw ValidationError("reg_samples must be >= 1");
  ic.reg_samples = static_cast<size_t>(cfg.reg_samples);
  if (cfg.metrics_every < 1)
    throw ValidationError("metrics_every must be >= 1");
  ic.metrics_every = static_cast<size_t>(cfg.metrics_every);
  ic.adam.lr = cfg.lr;
  if (cfg.rl_steps < 1) throw ValidationError("rl_steps must be >= 1");

  const uint64_t seed = derive_seed(cfg.seed, kSeedPolicyTrain);
  const TrainPolicyResult res =
      train_policy(train_src, table, tar, behavior, ic,
                   static_cast<size_t>(cfg.rl_steps), seed);
  save_policy(out_file(cfg, "policy.dmcw"), out_file(cfg, "policy.dmcw.json"),
              res.bundle);
  write_metrics_csv(out_file(cfg, "metrics.csv"), res.metrics);

  nlohmann::json summary;
  if (!res.metrics.empty()) {
    const MetricsRow& last = res.metrics.back();
    std::printf(
        "step %zu: loss_v=%.6g loss_q=%.6g loss_pi=%.6g mean_omega=%.6g "
        "frac_selected=%.6g\n",
        last.step, last.loss_v, last.loss_q, last.loss_pi, last.mean_omega,
        last.frac_selected);
    summary["loss_v"] = last.loss_v;
    summary["loss_q"] = last.loss_q;
    summary["loss_pi"] = last.loss_pi;
    summary["mean_omega"] = last.mean_omega;
    summary["frac_selected"] = last.frac_selected;
  }
  std::printf("wrote %s\n", out_file(cfg, "policy.dmcw").c_str());
  record_stage(cfg.out, "train-policy", cfg, seed, inputs,
               {"policy.dmcw", "policy.dmcw.json", "metrics.csv"},
               timer.secs(), summary);
}

// ---- evaluate ----

void run_evaluate(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  cfg.env.validate();
  std::vector<std::pair<std::string, ArtifactRef>> inputs;
  PolicyBundle bundle;
  PolicyFn fn;
  if (cfg.policy_kind == "trained") {
    const nlohmann::json man = load_manifest(cfg.out);
    require_fresh(man, "train-policy", "policy.dmcw", cfg.out);
    require_fresh(man, "train-policy", "policy.dmcw.json", cfg.out);
    bundle = load_policy(out_file(cfg, "policy.dmcw"),
                         out_file(cfg, "policy.dmcw.json"));
    fn = policy_fn(bundle);
    inputs.push_back(
        {"policy", hashed_artifact(out_file(cfg, "policy.dmcw"))});
  } else if (cfg.policy_kind == "expert") {
    fn = expert_policy(cfg.env);
  } else {
    throw ValidationError("policy_kind must be 'trained' or 'expert', got '" +
                          cfg.policy_kind + "'");
  }

  if (cfg.ref_episodes < 100)
    throw ValidationError("ref_episodes must be >= 100");
  const EvalReference ref =
      make_eval_reference(cfg.env, static_cast<int>(cfg.ref_episodes),
                          derive_seed(cfg.seed, kSeedEvalRef));
  const uint64_t seed = derive_seed(cfg.seed, kSeedEval);
  const EvalResult res =
      evaluate(cfg.env, fn, ref, static_cast<int>(cfg.eval_episodes), seed);

  std::printf("reference: j_random=%.17g j_expert=%.17g (%lld episodes)\n",
              ref.j_random, ref.j_expert, cfg.ref_episodes);
  std::printf("eval_return = %.17g\n", res.j);
  std::printf("normalized_score = %.17g\n", res.ns);

  nlohmann::json summary;
  summary["policy_kind"] = cfg.policy_kind;
  summary["j_random"] = ref.j_random;
  summary["j_expert"] = ref.j_expert;
  summary["eval_return"] = res.j;
  summary["normalized_score"] = res.ns;
  summary["episodes"] = cfg.eval_episodes;
  record_stage(cfg.out, "evaluate", cfg, seed, inputs, {}, timer.secs(),
               summary);
}

// ---- diagnose ----

void write_prob_histogram(const std::string& path,
                          const std::vector<double>& p_sa,
                          const std::vector<double>& p_sas) {
  // Fixed 20 bins over [0,1]: fine enough to see one-band pileups.
  constexpr size_t kBins = 20;
  std::vector<uint64_t> c_sa(kBins, 0), c_sas(kBins, 0);
  const auto bucket = [](double p) {
    const double clamped = std::min(std::max(p, 0.0), 1.0);
    return std::min(static_cast<size_t>(clamped * kBins), kBins - 1);
  };
  for (double p : p_sa) c_sa[bucket(p)] += 1;
  for (double p : p_sas) c_sas[bucket(p)] += 1;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# predicted target-probability of source rows; count_sa uses the "
        "(s,a) classifier, count_sas the (s,a,s') classifier\n";
  os << "bin_left,bin_right,count_sa,count_sas\n";
  char buf[128];
  for (size_t b = 0; b < kBins; ++b) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%llu,%llu\n",
                  static_cast<double>(b) / kBins,
                  static_cast<double>(b + 1) / kBins,
                  static_cast<unsigned long long>(c_sa[b]),
                  static_cast<unsigned long long>(c_sas[b]));
    os << buf;
  }
  if (!os) throw IoError("failed writing histogram: " + path);
}

void write_gap_histogram(const std::string& path,
                         const std::vector<double>& rho_real,
                         const std::vector<double>& rho_gen, size_t bins) {
  double lo = rho_real[0], hi = rho_real[0];
  for (double v : rho_real) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : rho_gen) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<uint64_t> c_real(bins, 0), c_gen(bins, 0);
  const auto bucket = [&](double v) {
    return std::min(static_cast<size_t>((v - lo) / width), bins - 1);
  };
  for (double v : rho_real) c_real[bucket(v)] += 1;
  for (double v : rho_gen) c_gen[bucket(v)] += 1;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# rho gap estimates scored against the target; count_generated is "
        "all zero when no generated rows were present\n";
  os << "bin_left,bin_right,count_real,count_generated\n";
  char buf[128];
  for (size_t b = 0; b < bins; ++b) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%llu,%llu\n",
                  lo + width * static_cast<double>(b),
                  b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1),
                  static_cast<unsigned long long>(c_real[b]),
                  static_cast<unsigned long long>(c_gen[b]));
    os << buf;
  }
  if (!os) throw IoError("failed writing histogram: " + path);
}

void run_diagnose(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  require_key(cfg.src, "src");
  require_key(cfg.tar, "tar");
  if (cfg.hist_bins < 1) throw ValidationError("hist_bins must be >= 1");
  if (cfg.classifier_epochs < 1)
    throw ValidationError("classifier_epochs must be >= 1");
  const nlohmann::json man = load_manifest(cfg.out);
  const ArtifactRef src_ref = hashed_artifact(cfg.src);
  const ArtifactRef tar_ref = hashed_artifact(cfg.tar);
  const auto src = load_dataset(cfg.src, Origin::kSourceReal);
  const auto tar = load_dataset(cfg.tar, Origin::kTarget);
  std::vector<std::pair<std::string, ArtifactRef>> inputs = {
      {"src", src_ref}, {"tar", tar_ref}};

  const DistanceHistogram nn =
      nn_distance_histogram(src, tar, static_cast<size_t>(cfg.hist_bins));
  save_histogram_csv(
      nn, out_file(cfg, "nn_distances.csv"),
      "log 1-NN distances; count_src: source->target (duplicates included, "
      "so identical datasets pile at the distance floor); count_tar: "
      "target->target with the query row excluded");

  const uint64_t seed = derive_seed(cfg.seed, kSeedDiagnose);
  const ClassifierScores cls = classifier_score(
      src, tar, static_cast<int>(cfg.classifier_epochs), seed);
  write_prob_histogram(out_file(cfg, "classifier_probs.csv"), cls.p_sa,
                       cls.p_sas);

  // Gap histograms; generated rows are re-scored jointly with the real ones
  // so the two distributions share one scale.
  std::vector<double> rho_real, rho_gen;
  const std::string gen_path = out_file(cfg, "generated.dmcd");
  if (std::filesystem::exists(gen_path)) {
    require_fresh(man, "generate", "generated.dmcd", cfg.out);
    require_same_input(man, "generate", "src", src_ref);
    require_same_input(man, "generate", "tar", tar_ref);
    const auto gen = load_dataset(gen_path, Origin::kSourceGenerated);
    const auto combined = concat(src, gen);
    const ScoreTable ext = score_source(combined, tar, cfg.k);
    rho_real.assign(ext.rho.begin(),
                    ext.rho.begin() + static_cast<std::ptrdiff_t>(src.n_rows()));
    rho_gen.assign(ext.rho.begin() + static_cast<std::ptrdiff_t>(src.n_rows()),
                   ext.rho.end());
    inputs.push_back({"generated", hashed_artifact(gen_path)});
  } else {
    const ScoreTable only = score_source(src, tar, cfg.k);
    rho_real = only.rho;
  }
  write_gap_histogram(out_file(cfg, "gap_hist.csv"), rho_real, rho_gen,
                      static_cast<size_t>(cfg.hist_bins));

  // Fig.-style contrast: how concentrated the classifier is vs how spread
  // the k-NN weights are, both measured with 0.1-wide bands.
  double band = 0.0;
  for (double left = 0.0; left <= 0.9 + 1e-12; left += 0.05) {
    size_t in_band = 0;
    for (double p : cls.p_sas)
      if (p >= left && p < left + 0.1) ++in_band;
    band = std::max(band,
                    static_cast<double>(in_band) /
                        static_cast<double>(cls.p_sas.size()));
  }
  const ScoreTable wsrc = score_source(src, tar, cfg.k);
  std::vector<bool> occupied(10, false);
  for (double w : wsrc.weight)
    occupied[std::min(static_cast<size_t>(w * 10.0), size_t{9})] = true;
  const int deciles =
      static_cast<int>(std::count(occupied.begin(), occupied.end(), true));

  std::printf("classifier_band_concentration = %.4g\n", band);
  std::printf("knn_weight_deciles_occupied = %d\n", deciles);
  std::printf("wrote %s, %s, %s\n", out_file(cfg, "nn_distances.csv").c_str(),
              out_file(cfg, "classifier_probs.csv").c_str(),
              out_file(cfg, "gap_hist.csv").c_str());

  nlohmann::json summary;
  summary["classifier_band_concentration"] = band;
  summary["knn_weight_deciles_occupied"] = deciles;
  record_stage(cfg.out, "diagnose", cfg, seed, inputs,
               {"nn_distances.csv", "classifier_probs.csv", "gap_hist.csv"},
               timer.secs(), summary);
}

// ---- collect ----

void run_collect(const RunConfig& cfg) {
  StageTimer timer;
  ensure_out(cfg);
  cfg.env.validate();
  if (cfg.n_collect < 1) throw ValidationError("n_collect must be >= 1");
  const Quality q = quality_from_name(cfg.quality);
  EvalReference ref;
  const EvalReference* refp = nullptr;
  if (q == Quality::kMedium) {
    ref = make_eval_reference(cfg.env, static_cast<int>(cfg.ref_episodes),
                              derive_seed(cfg.seed, kSeedEvalRef));
    refp = &ref;
  }
  const uint64_t seed = derive_seed(cfg.seed, kSeedCollect);
  const TransitionDataset ds = collect_dataset(
      cfg.env, q, static_cast<size_t>(cfg.n_collect), seed, refp);
  save_dataset(ds, out_file(cfg, "dataset.dmcd"));
  std::printf("collected %zu %s transitions\n", ds.n_rows(),
              cfg.quality.c_str());
  std::printf("wrote %s\n", out_file(cfg, "dataset.dmcd").c_str());
  nlohmann::json summary;
  summary["quality"] = cfg.quality;
  summary["rows"] = ds.n_rows();
  record_stage(cfg.out, "collect", cfg, seed, {}, {"dataset.dmcd"},
               timer.secs(), summary);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "cross-domain offline RL pipeline: k-NN gap scoring, score-guided "
      "diffusion augmentation, weighted offline policy learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
  RunConfig probe;  // flag registration only; values land in `overrides`

  const auto add_keys = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "key=value config file; flags override its values");
    for (const auto& kr : dmc::detail::config_keys(probe)) {
      const std::string key = kr.name;
      sub->add_option_function<std::string>(
          "--" + key,
          [&overrides, key](const std::string& v) {
            overrides.emplace_back(key, v);
          },
          kr.help);
    }
  };

  CLI::App* c_score = app.add_subcommand(
      "score", "compute per-source-row domain-gap scores and a KL estimate");
  CLI::App* c_diff = app.add_subcommand(
      "train-diffusion", "train the score-conditioned denoiser on the source");
  CLI::App* c_gen = app.add_subcommand(
      "generate", "sample target-like transitions and re-score the union");
  CLI::App* c_pol = app.add_subcommand(
      "train-policy", "train the weighted offline policy with support "
                      "regularization");
  CLI::App* c_eval = app.add_subcommand(
      "evaluate", "roll out a policy and print its normalized score");
  CLI::App* c_diag = app.add_subcommand(
      "diagnose", "emit gap, distance, and classifier-probability histograms");
  CLI::App* c_coll = app.add_subcommand(
      "collect", "roll out a scripted behavior and save a transition dataset");
  for (CLI::App* sub :
       {c_score, c_diff, c_gen, c_pol, c_eval, c_diag, c_coll})
    add_keys(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 3;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) dmc::load_config_file(cfg, config_path);
    for (const auto& [k, v] : overrides) dmc::apply_kv(cfg, k, v);
    if (c_score->parsed()) run_score(cfg);
    else if (c_diff->parsed()) run_train_diffusion(cfg);
    else if (c_gen->parsed()) run_generate(cfg);
    else if (c_pol->parsed()) run_train_policy(cfg);
    else if (c_eval->parsed()) run_evaluate(cfg);
    else if (c_diag->parsed()) run_diagnose(cfg);
    else if (c_coll->parsed()) run_collect(cfg);
    return 0;
  } catch (const dmc::IoError& e) {
    std::fprintf(stderr, "error (I/O): %s\n", e.what());
    return 2;
  } catch (const dmc::ValidationError& e) {
    std::fprintf(stderr, "error (validation): %s\n", e.what());
    return 3;
  } catch (const dmc::NumericError& e) {
    std::fprintf(stderr, "error (numeric): %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
