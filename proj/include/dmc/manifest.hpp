#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dmc/envsim.hpp"
#include "dmc/errors.hpp"
#include "dmc/hash.hpp"

namespace dmc {

// Seed streams. Every stage derives its RNG seed from the master seed and a
// fixed stream id, so each stage is reproducible on its own and changing one
// stage's work never perturbs another's randomness.
inline constexpr uint64_t kSeedCollect = 1;
inline constexpr uint64_t kSeedDiffusionTrain = 2;
inline constexpr uint64_t kSeedGenerate = 3;
inline constexpr uint64_t kSeedCvae = 4;
inline constexpr uint64_t kSeedPolicyTrain = 5;
inline constexpr uint64_t kSeedEval = 6;
inline constexpr uint64_t kSeedEvalRef = 7;
inline constexpr uint64_t kSeedDiagnose = 8;

// Flat key=value run configuration shared by every pipeline command. Keys
// with a published default keep it (k=5, xi=50, lambda=0.1, kappa=90,
// lr=3e-4, batch=128, polyak=5e-3, gamma=0.99); training-length keys are
// desk-scale defaults sized for a single core.
struct RunConfig {
  std::string src;  // source dataset path (.dmcd)
  std::string tar;  // target dataset path (.dmcd)
  std::string out;  // run directory; all artifacts and the manifest land here

  // Gap scoring and selection.
  int k = 5;            // k-th nearest neighbor
  double xi = 50.0;     // selection ratio: percent of source rows gated out
  double lambda = 0.1;  // policy support-regularizer coefficient
  double kappa = 90.0;  // condition floor percentile for guided sampling
  double w_guide = 1.5; // classifier-free guidance weight

  // Diffusion model.
  long long diffusion_steps = 10000;
  long long diffusion_batch = 128;
  long long schedule_t = 18;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho_sched = 7.0;
  long long sampler_steps = 18;
  long long count = 1000000;  // generated rows; defaults to one million

  // Offline RL.
  long long rl_steps = 5000;
  long long batch = 128;
  double lr = 3e-4;
  double gamma = 0.99;
  double polyak = 5e-3;
  double tau_expectile = 0.7;
  double beta = 3.0;
  double adv_clip = 100.0;
  long long reg_samples = 8;
  long long metrics_every = 1000;
  long long cvae_steps = 3000;

  // Evaluation.
  long long eval_episodes = 10;
  long long ref_episodes = 100;
  std::string policy_kind = "trained";  // trained | expert

  // Diagnostics.
  long long classifier_epochs = 200;
  long long hist_bins = 40;

  // Dataset collection.
  std::string quality = "medium";  // random | medium | expert
  long long n_collect = 10000;

  unsigned long long seed = 0;

  EnvSpec env;  // environment block for collect / evaluate
};

namespace detail {

struct KeyRef {
  const char* name;
  enum Kind { kStr, kInt, kI64, kU64, kF64 } kind;
  void* ptr;
  const char* help;
};

// Single source of truth for the key schema: parsing, flag registration,
// and manifest recording all walk this table.
inline std::vector<KeyRef> config_keys(RunConfig& c) {
  using K = KeyRef;
  return {
      {"src", K::kStr, &c.src, "source dataset path (.dmcd)"},
      {"tar", K::kStr, &c.tar, "target dataset path (.dmcd)"},
      {"out", K::kStr, &c.out, "run directory for artifacts and manifest"},
      {"k", K::kInt, &c.k, "k-th nearest neighbor for gap scoring"},
      {"xi", K::kF64, &c.xi, "selection ratio: percent of source rows gated out"},
      {"lambda", K::kF64, &c.lambda, "policy support-regularizer coefficient"},
      {"kappa", K::kF64, &c.kappa, "condition floor percentile for guided sampling"},
      {"w_guide", K::kF64, &c.w_guide, "classifier-free guidance weight"},
      {"diffusion_steps", K::kI64, &c.diffusion_steps, "denoiser training steps"},
      {"diffusion_batch", K::kI64, &c.diffusion_batch, "denoiser training batch size"},
      {"schedule_t", K::kI64, &c.schedule_t, "noise schedule length T"},
      {"sigma_min", K::kF64, &c.sigma_min, "smallest positive noise level"},
      {"sigma_max", K::kF64, &c.sigma_max, "largest noise level"},
      {"rho_sched", K::kF64, &c.rho_sched, "noise schedule warp exponent"},
      {"sampler_steps", K::kI64, &c.sampler_steps, "reverse-diffusion steps when sampling"},
      {"count", K::kI64, &c.count, "number of transitions to generate"},
      {"rl_steps", K::kI64, &c.rl_steps, "policy training steps"},
      {"batch", K::kI64, &c.batch, "per-domain batch size for policy training"},
      {"lr", K::kF64, &c.lr, "Adam learning rate (all trainers)"},
      {"gamma", K::kF64, &c.gamma, "discount factor"},
      {"polyak", K::kF64, &c.polyak, "target network update coefficient"},
      {"tau_expectile", K::kF64, &c.tau_expectile, "expectile for value regression"},
      {"beta", K::kF64, &c.beta, "advantage weighting inverse temperature"},
      {"adv_clip", K::kF64, &c.adv_clip, "ceiling on exp(beta * advantage)"},
      {"reg_samples", K::kI64, &c.reg_samples, "latent draws per regularizer evaluation"},
      {"metrics_every", K::kI64, &c.metrics_every, "steps between metrics rows"},
      {"cvae_steps", K::kI64, &c.cvae_steps, "behavior model training steps"},
      {"eval_episodes", K::kI64, &c.eval_episodes, "episodes per evaluation"},
      {"ref_episodes", K::kI64, &c.ref_episodes, "episodes for the random/expert reference"},
      {"policy_kind", K::kStr, &c.policy_kind, "evaluate: trained | expert"},
      {"classifier_epochs", K::kI64, &c.classifier_epochs, "diagnostic classifier training epochs"},
      {"hist_bins", K::kI64, &c.hist_bins, "bins for diagnostic histograms"},
      {"quality", K::kStr, &c.quality, "collect: random | medium | expert"},
      {"n_collect", K::kI64, &c.n_collect, "transitions to collect"},
      {"seed", K::kU64, &c.seed, "master seed; stages derive their own streams"},
      {"env_name", K::kStr, &c.env.name, "environment name"},
      {"env_g", K::kF64, &c.env.g, "gravity pull per step"},
      {"env_gain", K::kF64, &c.env.gain, "control gain"},
      {"env_damping", K::kF64, &c.env.damping, "velocity retention per step"},
      {"env_joint_clip_x", K::kF64, &c.env.joint_clip[0], "action clamp, x"},
      {"env_joint_clip_y", K::kF64, &c.env.joint_clip[1], "action clamp, y"},
      {"env_horizon", K::kInt, &c.env.horizon, "episode length"},
      {"env_goal_x", K::kF64, &c.env.goal[0], "goal position, x"},
      {"env_goal_y", K::kF64, &c.env.goal[1], "goal position, y"},
      {"env_goal_radius", K::kF64, &c.env.goal_radius, "goal radius"},
      {"env_noise_std", K::kF64, &c.env.noise_std, "transition noise std"},
      {"env_reward_id", K::kStr, &c.env.reward_id, "reward function id"},
  };
}

inline double parse_f64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double r = 0.0;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw ValidationError("config key '" + key + "': cannot parse number from '" + v + "'");
  return r;
}

inline long long parse_i64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long r = 0;
  try {
    r = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw ValidationError("config key '" + key + "': cannot parse integer from '" + v + "'");
  return r;
}

inline unsigned long long parse_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    throw ValidationError("config key '" + key + "': cannot parse unsigned integer from '" + v + "'");
  return r;
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace detail

// Applies one key=value setting. Unknown keys are errors, not warnings.
inline void apply_kv(RunConfig& c, const std::string& key,
                     const std::string& value) {
  for (const auto& kr : detail::config_keys(c)) {
    if (key != kr.name) continue;
    switch (kr.kind) {
      case detail::KeyRef::kStr:
        *static_cast<std::string*>(kr.ptr) = value;
        return;
      case detail::KeyRef::kInt: {
        const long long v = detail::parse_i64(key, value);
        if (v < INT32_MIN || v > INT32_MAX)
          throw ValidationError("config key '" + key + "': value out of range");
        *static_cast<int*>(kr.ptr) = static_cast<int>(v);
        return;
      }
      case detail::KeyRef::kI64:
        *static_cast<long long*>(kr.ptr) = detail::parse_i64(key, value);
        return;
      case detail::KeyRef::kU64:
        *static_cast<unsigned long long*>(kr.ptr) = detail::parse_u64(key, value);
        return;
      case detail::KeyRef::kF64:
        *static_cast<double*>(kr.ptr) = detail::parse_f64(key, value);
        return;
    }
  }
  throw ValidationError("unknown config key: " + key);
}

// key=value per line; '#' comments and blank lines allowed.
inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::string line;
  size_t ln = 0;
  while (std::getline(is, line)) {
    ++ln;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config file " + path + " line " +
                            std::to_string(ln) + ": expected key=value");
    apply_kv(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

// Canonical string form of every key. %.17g round-trips doubles exactly, so
// a recorded config reproduces the run bit-for-bit.
inline std::map<std::string, std::string> config_to_map(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::map<std::string, std::string> m;
  char buf[64];
  for (const auto& kr : detail::config_keys(copy)) {
    switch (kr.kind) {
      case detail::KeyRef::kStr:
        m[kr.name] = *static_cast<std::string*>(kr.ptr);
        break;
      case detail::KeyRef::kInt:
        std::snprintf(buf, sizeof(buf), "%d", *static_cast<int*>(kr.ptr));
        m[kr.name] = buf;
        break;
      case detail::KeyRef::kI64:
        std::snprintf(buf, sizeof(buf), "%lld", *static_cast<long long*>(kr.ptr));
        m[kr.name] = buf;
        break;
      case detail::KeyRef::kU64:
        std::snprintf(buf, sizeof(buf), "%llu",
                      *static_cast<unsigned long long*>(kr.ptr));
        m[kr.name] = buf;
        break;
      case detail::KeyRef::kF64:
        std::snprintf(buf, sizeof(buf), "%.17g", *static_cast<double*>(kr.ptr));
        m[kr.name] = buf;
        break;
    }
  }
  return m;
}

// ---- Run manifest ----
//
// manifest.json sits in the run directory and records, per stage: the full
// resolved config, the master and derived seeds, input and output artifact
// hashes, and wall-clock seconds. Later stages refuse to read an artifact
// whose bytes no longer match the hash its producing stage recorded.

inline uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a basis
  std::vector<char> buf(1 << 20);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a64(buf.data(), static_cast<size_t>(is.gcount()), h);
  }
  if (is.bad()) throw IoError("read failed: " + path);
  return h;
}

struct ArtifactRef {
  std::string path;
  uint64_t hash = 0;
};

inline ArtifactRef hashed_artifact(const std::string& path) {
  return {path, file_hash(path)};
}

inline std::string manifest_path(const std::string& out_dir) {
  return out_dir + "/manifest.json";
}

inline nlohmann::json load_manifest(const std::string& out_dir) {
  std::ifstream is(manifest_path(out_dir));
  if (!is) {
    nlohmann::json j;
    j["format"] = "dmc-manifest-1";
    j["stages"] = nlohmann::json::object();
    return j;
  }
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw ValidationError("corrupt manifest " + manifest_path(out_dir) + ": " +
                          e.what());
  }
  if (!j.is_object() || j.value("format", "") != "dmc-manifest-1" ||
      !j.contains("stages") || !j["stages"].is_object())
    throw ValidationError("manifest format not recognized: " +
                          manifest_path(out_dir));
  return j;
}

inline void record_stage(
    const std::string& out_dir, const std::string& stage, const RunConfig& cfg,
    uint64_t derived_seed,
    const std::vector<std::pair<std::string, ArtifactRef>>& inputs,
    const std::vector<std::string>& output_names, double wall_clock_sec,
    const nlohmann::json& summary = nlohmann::json::object()) {
  nlohmann::json man = load_manifest(out_dir);
  nlohmann::json st;
  st["config"] = config_to_map(cfg);
  st["seed"] = cfg.seed;
  st["derived_seed"] = derived_seed;
  st["inputs"] = nlohmann::json::object();
  for (const auto& [role, ref] : inputs)
    st["inputs"][role] = {{"path", ref.path}, {"fnv1a64", hex64(ref.hash)}};
  st["outputs"] = nlohmann::json::object();
  for (const auto& name : output_names)
    st["outputs"][name] = {
        {"fnv1a64", hex64(file_hash(out_dir + "/" + name))}};
  st["wall_clock_sec"] = wall_clock_sec;
  st["summary"] = summary;
  man["stages"][stage] = st;
  const std::string path = manifest_path(out_dir);
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << man.dump(2) << "\n";
  if (!os) throw IoError("failed writing manifest: " + path);
}

inline const nlohmann::json& stage_record(const nlohmann::json& man,
                                          const std::string& stage,
                                          const std::string& out_dir) {
  const auto& stages = man.at("stages");
  if (!stages.contains(stage))
    throw ValidationError("stage '" + stage + "' has no record in " +
                          manifest_path(out_dir) + "; run it first");
  return stages.at(stage);
}

// Stale-artifact gate: a stage may read an artifact only while its bytes
// match the hash recorded by the stage that produced it.
inline void require_fresh(const nlohmann::json& man, const std::string& stage,
                          const std::string& name,
                          const std::string& out_dir) {
  const auto& st = stage_record(man, stage, out_dir);
  if (!st.contains("outputs") || !st["outputs"].contains(name))
    throw ValidationError("stage '" + stage + "' did not record output '" +
                          name + "'; re-run it");
  const std::string want = st["outputs"][name]["fnv1a64"].get<std::string>();
  if (want != hex64(file_hash(out_dir + "/" + name)))
    throw ValidationError("stale artifact: " + out_dir + "/" + name +
                          " no longer matches the hash recorded by stage '" +
                          stage + "'; re-run that stage or restore the file");
}

// Cross-stage input consistency: if an earlier stage consumed a file in some
// role, later stages must be fed identical bytes for that role.
inline void require_same_input(const nlohmann::json& man,
                               const std::string& stage,
                               const std::string& role,
                               const ArtifactRef& current) {
  const auto& stages = man.at("stages");
  if (!stages.contains(stage)) return;
  const auto& st = stages.at(stage);
  if (!st.contains("inputs") || !st["inputs"].contains(role)) return;
  const std::string want = st["inputs"][role]["fnv1a64"].get<std::string>();
  if (want != hex64(current.hash))
    throw ValidationError(
        "stale pipeline: '" + role + "' (" + current.path +
        ") differs from the file stage '" + stage +
        "' consumed; re-run the pipeline from that stage");
}

}  // namespace dmc
