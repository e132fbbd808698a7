// End-to-end tests of the pipeline executable: exit-code taxonomy, config
// resolution order, manifest bookkeeping, stale-artifact refusal, and
// CLI-vs-library numeric equivalence. Each test drives the real binary.

#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dmc/dataset.hpp"
#include "dmc/envsim.hpp"
#include "dmc/knn.hpp"
#include "dmc/manifest.hpp"
#include "dmc/rng.hpp"

#include "json.hpp"

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr combined
};

CliResult run_cli(const std::string& args, const std::string& log_name) {
  const std::string log = ::testing::TempDir() + "/" + log_name + ".log";
  const std::string cmd =
      std::string(DMC_CLI_PATH) + " " + args + " > " + log + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WEXITSTATUS(rc);
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  r.output = ss.str();
  return r;
}

std::string fresh_dir(const std::string& name) {
  const std::string d = ::testing::TempDir() + "/" + name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

// Unit-variance Gaussian transitions; enough structure for knn scoring.
dmc::TransitionDataset gaussian_ds(size_t n, double shift, uint64_t seed) {
  dmc::TransitionDataset ds;
  ds.state_dim = 2;
  ds.action_dim = 1;
  dmc::Rng rng(seed);
  std::vector<float> row(ds.row_width());
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j + 1 < row.size(); ++j)
      row[j] = static_cast<float>(rng.normal() + shift);
    row.back() = 0.0f;  // never terminal
    ds.append_row(row.data(), dmc::Origin::kSourceReal);
  }
  return ds;
}

// Pulls the value printed as "<name> = <%.17g>"; %.17g round-trips exactly,
// so equality against the library double is bitwise.
double parse_metric(const std::string& text, const std::string& name) {
  const std::string tag = name + " = ";
  const size_t at = text.find(tag);
  if (at == std::string::npos) {
    ADD_FAILURE() << "output lacks '" << tag << "':\n" << text;
    return NAN;
  }
  return std::strtod(text.c_str() + at + tag.size(), nullptr);
}

nlohmann::json read_manifest(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  nlohmann::json j;
  is >> j;
  return j;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(CliErrors, MissingInputFileExitsTwoAndNamesPath) {
  const std::string d = fresh_dir("cli_missing");
  const auto src = gaussian_ds(50, 0.0, 1);
  dmc::save_dataset(src, d + "/src.dmcd");
  const auto r = run_cli("score --src " + d + "/src.dmcd --tar " + d +
                             "/absent.dmcd --out " + d + "/run",
                         "missing");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.output.find(d + "/absent.dmcd"), std::string::npos) << r.output;
}

TEST(CliErrors, UnknownConfigKeyExitsThree) {
  const std::string d = fresh_dir("cli_badkey");
  std::ofstream(d + "/bad.conf") << "not_a_key=1\n";
  const auto r = run_cli("score --config " + d + "/bad.conf", "badkey");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("not_a_key"), std::string::npos) << r.output;
}

TEST(CliErrors, GenerateCountZeroRejected) {
  const std::string d = fresh_dir("cli_count0");
  const auto r =
      run_cli("generate --count 0 --src x --tar y --out " + d, "count0");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("count"), std::string::npos) << r.output;
}

TEST(CliErrors, MissingSubcommandOrFlagValueExitsThree) {
  EXPECT_EQ(run_cli("", "nosub").exit_code, 3);
  EXPECT_EQ(run_cli("score --k", "noval").exit_code, 3);
  EXPECT_EQ(run_cli("score --k five --src x --tar y --out z",
                    "badint")
                .exit_code,
            3);
}

TEST(CliScore, KDefaultsToFiveAndKlMatchesLibraryBitExact) {
  const std::string d = fresh_dir("cli_score");
  const auto src = gaussian_ds(400, 0.0, 11);
  const auto tar = gaussian_ds(300, 0.5, 12);
  dmc::save_dataset(src, d + "/src.dmcd");
  dmc::save_dataset(tar, d + "/tar.dmcd");
  const auto r = run_cli("score --src " + d + "/src.dmcd --tar " + d +
                             "/tar.dmcd --out " + d + "/run",
                         "score");
  ASSERT_EQ(r.exit_code, 0) << r.output;

  const double cli_kl = parse_metric(r.output, "kl_estimate");
  EXPECT_EQ(cli_kl, dmc::kl_estimate(src, tar, 5));

  const auto man = read_manifest(d + "/run");
  const auto& st = man["stages"]["score"];
  EXPECT_EQ(st["config"]["k"], "5");
  EXPECT_EQ(st["config"].size(), dmc::config_to_map(dmc::RunConfig{}).size());
  EXPECT_GE(st["wall_clock_sec"].get<double>(), 0.0);
  // Recorded hashes match the files on disk.
  EXPECT_EQ(st["outputs"]["scores.csv"]["fnv1a64"],
            dmc::hex64(dmc::file_hash(d + "/run/scores.csv")));
  EXPECT_EQ(st["inputs"]["src"]["fnv1a64"],
            dmc::hex64(dmc::file_hash(d + "/src.dmcd")));

  // The saved table reloads with intact provenance.
  const auto table = dmc::load_scores_csv(d + "/run/scores.csv");
  EXPECT_EQ(table.k, 5);
  EXPECT_EQ(table.fingerprint, dmc::dataset_fingerprint(src));
}

TEST(CliConfig, FileValuesAppliedAndFlagsOverride) {
  const std::string d = fresh_dir("cli_conf");
  const auto src = gaussian_ds(80, 0.0, 21);
  const auto tar = gaussian_ds(60, 0.3, 22);
  dmc::save_dataset(src, d + "/src.dmcd");
  dmc::save_dataset(tar, d + "/tar.dmcd");
  std::ofstream(d + "/run.conf") << "k=3\nxi=25\nseed=99\n# comment\n\n";
  const auto r = run_cli("score --config " + d + "/run.conf --src " + d +
                             "/src.dmcd --tar " + d + "/tar.dmcd --out " + d +
                             "/run --k 7",
                         "conf");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const auto man = read_manifest(d + "/run");
  const auto& c = man["stages"]["score"]["config"];
  EXPECT_EQ(c["k"], "7");    // flag beats file
  EXPECT_EQ(c["xi"], "25");  // file beats default
  EXPECT_EQ(c["seed"], "99");
}

TEST(CliStale, TamperedArtifactRefusedWithExitThree) {
  const std::string d = fresh_dir("cli_stale");
  const auto src = gaussian_ds(200, 0.0, 31);
  const auto tar = gaussian_ds(150, 0.3, 32);
  dmc::save_dataset(src, d + "/src.dmcd");
  dmc::save_dataset(tar, d + "/tar.dmcd");
  ASSERT_EQ(run_cli("score --src " + d + "/src.dmcd --tar " + d +
                        "/tar.dmcd --out " + d + "/run",
                    "stale_score")
                .exit_code,
            0);
  std::ofstream(d + "/run/scores.csv", std::ios::app) << "tamper\n";
  const auto r = run_cli("train-diffusion --src " + d + "/src.dmcd --out " +
                             d + "/run --diffusion_steps 10",
                         "stale_diff");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("stale"), std::string::npos) << r.output;
}

TEST(CliStale, SwappedInputDatasetRefused) {
  const std::string d = fresh_dir("cli_swap");
  const auto src = gaussian_ds(200, 0.0, 41);
  const auto other = gaussian_ds(200, 0.1, 42);
  const auto tar = gaussian_ds(150, 0.3, 43);
  dmc::save_dataset(src, d + "/src.dmcd");
  dmc::save_dataset(other, d + "/other.dmcd");
  dmc::save_dataset(tar, d + "/tar.dmcd");
  ASSERT_EQ(run_cli("score --src " + d + "/src.dmcd --tar " + d +
                        "/tar.dmcd --out " + d + "/run",
                    "swap_score")
                .exit_code,
            0);
  const auto r = run_cli("train-diffusion --src " + d + "/other.dmcd --out " +
                             d + "/run --diffusion_steps 10",
                         "swap_diff");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("stale"), std::string::npos) << r.output;
}

TEST(CliStale, StageOutOfOrderNamesMissingStage) {
  const std::string d = fresh_dir("cli_order");
  const auto src = gaussian_ds(60, 0.0, 51);
  dmc::save_dataset(src, d + "/src.dmcd");
  const auto r = run_cli("train-diffusion --src " + d + "/src.dmcd --out " +
                             d + "/run",
                         "order");
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.output.find("score"), std::string::npos) << r.output;
}

TEST(CliEvaluate, ExpertScoresNearHundredAndMatchesLibraryBitExact) {
  const std::string d = fresh_dir("cli_expert");
  const auto r = run_cli(
      "evaluate --out " + d + " --policy_kind expert --env_g 0.1 --seed 5",
      "expert");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  const double ns = parse_metric(r.output, "normalized_score");
  EXPECT_GT(ns, 90.0);
  EXPECT_LT(ns, 110.0);

  dmc::EnvSpec spec;
  spec.g = 0.1;
  const auto ref = dmc::make_eval_reference(
      spec, 100, dmc::derive_seed(5, dmc::kSeedEvalRef));
  const auto res = dmc::evaluate(spec, dmc::expert_policy(spec), ref, 10,
                                 dmc::derive_seed(5, dmc::kSeedEval));
  EXPECT_EQ(ns, res.ns);
  EXPECT_EQ(parse_metric(r.output, "eval_return"), res.j);
}

TEST(CliDiagnose, IdenticalDatasetsPileSourceDistancesAtFloor) {
  const std::string d = fresh_dir("cli_diag");
  const auto ds = gaussian_ds(300, 0.0, 61);
  dmc::save_dataset(ds, d + "/both.dmcd");
  const auto r = run_cli("diagnose --src " + d + "/both.dmcd --tar " + d +
                             "/both.dmcd --out " + d + "/run --hist_bins 8 "
                             "--classifier_epochs 5",
                         "diag");
  ASSERT_EQ(r.exit_code, 0) << r.output;

  const std::string hist = slurp(d + "/run/nn_distances.csv");
  ASSERT_EQ(hist.rfind("# ", 0), 0u) << "metadata note missing";
  std::istringstream is(hist);
  std::string line;
  std::getline(is, line);  // note
  std::getline(is, line);  // header
  size_t row = 0, src_first = 0, src_total = 0, tar_first = 0, tar_total = 0;
  while (std::getline(is, line)) {
    double bl, br;
    unsigned long long cs, ct;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf,%llu,%llu", &bl, &br, &cs,
                          &ct),
              4);
    if (row == 0) {
      src_first = cs;
      tar_first = ct;
    }
    src_total += cs;
    tar_total += ct;
    ++row;
  }
  EXPECT_EQ(row, 8u);
  // Every source row has an exact duplicate in the target set, so all its
  // 1-NN distances sit at the floor; the self-excluded target side spreads.
  EXPECT_EQ(src_first, src_total);
  EXPECT_LT(tar_first, tar_total);

  // Gap histogram exists with an all-zero generated column.
  const std::string gaps = slurp(d + "/run/gap_hist.csv");
  EXPECT_NE(gaps.find("count_real,count_generated"), std::string::npos);
  std::istringstream gs(gaps);
  std::getline(gs, line);
  std::getline(gs, line);
  unsigned long long gen_total = 0;
  while (std::getline(gs, line)) {
    double bl, br;
    unsigned long long cr, cg;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf,%llu,%llu", &bl, &br, &cr,
                          &cg),
              4);
    gen_total += cg;
  }
  EXPECT_EQ(gen_total, 0u);

  const auto man = read_manifest(d + "/run");
  EXPECT_TRUE(man["stages"]["diagnose"]["outputs"].contains(
      "classifier_probs.csv"));
}

TEST(CliPipeline, FullRunEmitsNormalizedScoreAndRecordsEveryStage) {
  const std::string base = fresh_dir("cli_pipe");
  const std::string tiny =
      " --diffusion_steps 250 --count 600 --rl_steps 200 --cvae_steps 150"
      " --metrics_every 100 --sampler_steps 8 --seed 3";
  ASSERT_EQ(run_cli("collect --out " + base + "/s --quality medium"
                        " --n_collect 1500 --seed 3",
                    "p_collect_s")
                .exit_code,
            0);
  ASSERT_EQ(run_cli("collect --out " + base + "/t --quality medium"
                        " --n_collect 500 --seed 4 --env_g 0.1",
                    "p_collect_t")
                .exit_code,
            0);
  const std::string io = " --src " + base + "/s/dataset.dmcd --tar " + base +
                         "/t/dataset.dmcd --out " + base + "/run";
  ASSERT_EQ(run_cli("score" + io + tiny, "p_score").exit_code, 0);
  ASSERT_EQ(run_cli("train-diffusion" + io + tiny, "p_diff").exit_code, 0);
  ASSERT_EQ(run_cli("generate" + io + tiny, "p_gen").exit_code, 0);
  ASSERT_EQ(run_cli("train-policy" + io + tiny, "p_pol").exit_code, 0);
  const auto ev = run_cli("evaluate --out " + base + "/run --env_g 0.1" + tiny,
                          "p_eval");
  ASSERT_EQ(ev.exit_code, 0) << ev.output;
  EXPECT_NE(ev.output.find("normalized_score = "), std::string::npos);

  const auto man = read_manifest(base + "/run");
  for (const char* stage : {"score", "train-diffusion", "generate",
                            "train-policy", "evaluate"})
    EXPECT_TRUE(man["stages"].contains(stage)) << stage;
  // The policy trained on source + generated rows.
  const auto& pol = man["stages"]["train-policy"];
  EXPECT_TRUE(pol["inputs"].contains("generated"));
  for (const char* name : {"policy.dmcw", "policy.dmcw.json", "metrics.csv"})
    EXPECT_TRUE(pol["outputs"].contains(name)) << name;

  // metrics.csv has the expected cadence: 200 steps, a row every 100.
  std::istringstream ms(slurp(base + "/run/metrics.csv"));
  std::string line;
  std::getline(ms, line);
  EXPECT_EQ(line.rfind("step,loss_v,loss_q", 0), 0u);
  size_t rows = 0;
  while (std::getline(ms, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 2u);
}

TEST(CliPipeline, RerunWithSameConfigReproducesArtifactsBitExact) {
  const std::string base = fresh_dir("cli_rerun");
  const auto src = gaussian_ds(500, 0.0, 71);
  const auto tar = gaussian_ds(300, 0.4, 72);
  dmc::save_dataset(src, base + "/src.dmcd");
  dmc::save_dataset(tar, base + "/tar.dmcd");
  const std::string tiny =
      " --diffusion_steps 120 --count 300 --rl_steps 100 --cvae_steps 80"
      " --metrics_every 50 --sampler_steps 6 --seed 17";
  for (const char* run : {"a", "b"}) {
    const std::string io = " --src " + base + "/src.dmcd --tar " + base +
                           "/tar.dmcd --out " + base + "/" + run;
    ASSERT_EQ(run_cli("score" + io + tiny, std::string("r_score_") + run)
                  .exit_code,
              0);
    ASSERT_EQ(
        run_cli("train-diffusion" + io + tiny, std::string("r_diff_") + run)
            .exit_code,
        0);
    ASSERT_EQ(run_cli("generate" + io + tiny, std::string("r_gen_") + run)
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("train-policy" + io + tiny, std::string("r_pol_") + run)
                  .exit_code,
              0);
  }
  for (const char* name :
       {"scores.csv", "model.dmcw", "generated.dmcd", "generated_scores.csv",
        "policy.dmcw", "metrics.csv"}) {
    EXPECT_EQ(slurp(base + "/a/" + name), slurp(base + "/b/" + name))
        << name << " differs between identical runs";
  }
}

}  // namespace
