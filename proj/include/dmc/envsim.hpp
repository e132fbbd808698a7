#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dmc/dataset.hpp"
#include "dmc/errors.hpp"
#include "dmc/rng.hpp"

namespace dmc {

// 2-D point-mass with gravity, damping, and per-dimension action clamps.
// State is [px, py, vx, vy]; actions are accelerations in [-1,1]^2. A pair
// of specs models a domain shift by differing only in dynamics parameters.
struct EnvSpec {
  std::string name = "pointmass";
  // Dynamics (the only fields allowed to differ between paired domains).
  // Gravity sits near the control ceiling (hover costs 0.8 of the action
  // range) so halving it changes the actions good behavior must take.
  double g = 0.2;         // constant downward pull per step
  double gain = 0.25;     // control gain
  double damping = 0.75;  // velocity retention per step
  std::array<double, 2> joint_clip = {1.0, 1.0};  // per-dim action clamp
  // Task (shared across paired domains).
  int horizon = 60;
  std::array<double, 2> goal = {2.0, 1.0};
  double goal_radius = 0.3;
  double noise_std = 0.01;
  std::string reward_id = "neg_goal_dist";

  static constexpr int kStateDim = 4;
  static constexpr int kActionDim = 2;

  void validate() const {
    if (horizon < 1) throw ValidationError("env spec: horizon must be >= 1");
    if (reward_id != "neg_goal_dist")
      throw ValidationError("env spec: unknown reward id " + reward_id);
    if (!(goal_radius > 0) || !(gain > 0) || !(noise_std >= 0) ||
        joint_clip[0] <= 0 || joint_clip[1] <= 0)
      throw ValidationError("env spec: non-positive parameter");
  }
};

inline EnvSpec source_spec() { return EnvSpec{}; }

// Mirrors the gravity shift recipe: target gravity is half the source's.
inline EnvSpec halve_gravity(const EnvSpec& src) {
  EnvSpec tar = src;
  tar.name = src.name + "_halfg";
  tar.g = src.g / 2.0;
  return tar;
}

// Kinematic-style shift: one action dimension's usable range shrinks.
inline EnvSpec shrink_joint(const EnvSpec& src, double clip = 0.3) {
  EnvSpec tar = src;
  tar.name = src.name + "_clip";
  tar.joint_clip[0] = clip;
  return tar;
}

// Paired domains must share everything except dynamics parameters.
inline void check_domain_pair(const EnvSpec& a, const EnvSpec& b) {
  a.validate();
  b.validate();
  if (a.horizon != b.horizon || a.goal != b.goal ||
      a.goal_radius != b.goal_radius || a.noise_std != b.noise_std ||
      a.reward_id != b.reward_id)
    throw ValidationError(
        "domain pair: task fields differ (only dynamics may)");
}

struct StepResult {
  std::array<float, 4> next;
  double reward;
  bool terminal;  // true goal reach; horizon truncation is the caller's
};

inline StepResult step(const EnvSpec& spec, const float* state,
                       const float* action, Rng& rng) {
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite(state[i]))
      throw ValidationError("env step: non-finite state");
  const double ax =
      std::clamp(static_cast<double>(action[0]), -spec.joint_clip[0],
                 spec.joint_clip[0]);
  const double ay =
      std::clamp(static_cast<double>(action[1]), -spec.joint_clip[1],
                 spec.joint_clip[1]);
  double vx = spec.damping * state[2] + spec.gain * ax;
  double vy = spec.damping * state[3] + spec.gain * ay - spec.g;
  if (spec.noise_std > 0) {
    vx += spec.noise_std * rng.normal();
    vy += spec.noise_std * rng.normal();
  }
  const double px = state[0] + vx;
  const double py = state[1] + vy;
  const double dx = px - spec.goal[0];
  const double dy = py - spec.goal[1];
  const double dist = std::sqrt(dx * dx + dy * dy);
  const bool in_goal = dist <= spec.goal_radius;
  StepResult out;
  out.next = {static_cast<float>(px), static_cast<float>(py),
              static_cast<float>(vx), static_cast<float>(vy)};
  out.reward = -dist + (in_goal ? 1.0 : 0.0);
  out.terminal = in_goal;
  return out;
}

// Writes the mean action for a state into the action buffer.
using PolicyFn = std::function<void(const float* state, float* action)>;

inline PolicyFn expert_policy(const EnvSpec& spec) {
  // PD controller with gravity compensation; the spec family is simple
  // enough that this is optimal up to noise.
  const double kp = 0.6, kd = 0.4;
  const EnvSpec s = spec;
  return [s, kp, kd](const float* state, float* action) {
    const double ax = kp * (s.goal[0] - state[0]) - kd * state[2];
    const double ay = kp * (s.goal[1] - state[1]) - kd * state[3] + s.g;
    action[0] = static_cast<float>(std::clamp(ax / s.gain, -1.0, 1.0));
    action[1] = static_cast<float>(std::clamp(ay / s.gain, -1.0, 1.0));
  };
}

inline void random_action(Rng& rng, float* action) {
  action[0] = static_cast<float>(rng.uniform(-1.0, 1.0));
  action[1] = static_cast<float>(rng.uniform(-1.0, 1.0));
}

inline std::array<float, 4> initial_state(Rng& rng) {
  return {static_cast<float>(0.1 * rng.normal()),
          static_cast<float>(0.1 * rng.normal()), 0.0f, 0.0f};
}

// Behavior used for rollouts: base policy corrupted by Gaussian action noise
// and epsilon-mixing with uniform random actions. sigma=0, mix=0 is the base.
struct BehaviorConfig {
  double sigma = 0.0;
  double mix = 0.0;
};

// One episode; returns the undiscounted return. If sink is non-null, every
// transition is appended; terminal=1 only on goal reach (truncation rows
// keep 0 so downstream bootstrapping still sees a continuing state).
inline double rollout(const EnvSpec& spec, const PolicyFn& policy,
                      const BehaviorConfig& behavior, Rng& rng,
                      TransitionDataset* sink = nullptr,
                      Origin tag = Origin::kSourceReal) {
  spec.validate();
  std::array<float, 4> state = initial_state(rng);
  double ret = 0.0;
  for (int t = 0; t < spec.horizon; ++t) {
    float action[2];
    policy(state.data(), action);
    if (behavior.mix > 0 && rng.uniform() < behavior.mix) {
      random_action(rng, action);
    } else if (behavior.sigma > 0) {
      action[0] = static_cast<float>(
          std::clamp(action[0] + behavior.sigma * rng.normal(), -1.0, 1.0));
      action[1] = static_cast<float>(
          std::clamp(action[1] + behavior.sigma * rng.normal(), -1.0, 1.0));
    }
    const StepResult r = step(spec, state.data(), action, rng);
    ret += r.reward;
    if (sink) {
      float row[12];
      for (int i = 0; i < 4; ++i) row[i] = state[i];
      row[4] = action[0];
      row[5] = action[1];
      row[6] = static_cast<float>(r.reward);
      for (int i = 0; i < 4; ++i) row[7 + i] = r.next[i];
      row[11] = r.terminal ? 1.0f : 0.0f;
      sink->append_row(row, tag);
    }
    if (r.terminal) break;
    state = r.next;
  }
  return ret;
}

inline double mean_return(const EnvSpec& spec, const PolicyFn& policy,
                          const BehaviorConfig& behavior, int episodes,
                          uint64_t seed) {
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(e)));
    total += rollout(spec, policy, behavior, rng);
  }
  return total / episodes;
}

// Normalization anchors for a spec: random-policy and expert returns.
struct EvalReference {
  double j_random = 0.0;
  double j_expert = 0.0;
  int episodes = 0;
  uint64_t seed = 0;

  void validate() const {
    if (!(j_expert > j_random))
      throw ValidationError(
          "eval reference: expert return must exceed random return");
    if (episodes < 100)
      throw ValidationError("eval reference: needs >= 100 episodes");
  }
};

inline EvalReference make_eval_reference(const EnvSpec& spec, int episodes,
                                         uint64_t seed) {
  if (episodes < 100)
    throw ValidationError("eval reference: needs >= 100 episodes");
  EvalReference ref;
  ref.episodes = episodes;
  ref.seed = seed;
  PolicyFn rand_policy = [](const float*, float* a) { a[0] = a[1] = 0.0f; };
  ref.j_random = mean_return(spec, rand_policy, BehaviorConfig{0.0, 1.0},
                             episodes, derive_seed(seed, 1));
  ref.j_expert = mean_return(spec, expert_policy(spec), BehaviorConfig{},
                             episodes, derive_seed(seed, 2));
  ref.validate();
  return ref;
}

inline double normalized_score(double j, const EvalReference& ref) {
  return (j - ref.j_random) / (ref.j_expert - ref.j_random) * 100.0;
}

struct EvalResult {
  double j;
  double ns;
};

inline EvalResult evaluate(const EnvSpec& spec, const PolicyFn& policy,
                           const EvalReference& ref, int episodes,
                           uint64_t seed) {
  if (episodes < 1) throw ValidationError("evaluate: episodes must be >= 1");
  ref.validate();
  const double j = mean_return(spec, policy, BehaviorConfig{}, episodes, seed);
  return {j, normalized_score(j, ref)};
}

// Medium behavior: expert with action noise 0.5 and random mixing, mixing
// tuned until normalized performance lands in [0.3, 0.6] of the expert's.
// The band is on normalized score because raw returns here are negative
// (a raw-return ratio would be ill-posed); the expert's score is 100 by
// construction, so the band is NS in [30, 60].
inline BehaviorConfig tune_medium(const EnvSpec& spec,
                                  const EvalReference& ref, uint64_t seed,
                                  int episodes = 100) {
  const PolicyFn expert = expert_policy(spec);
  double lo = 0.0, hi = 1.0;
  BehaviorConfig cfg{0.5, 0.3};
  for (int it = 0; it < 24; ++it) {
    const double j = mean_return(spec, expert, cfg, episodes,
                                 derive_seed(seed, static_cast<uint64_t>(it)));
    const double ns = normalized_score(j, ref);
    if (ns >= 30.0 && ns <= 60.0) return cfg;
    if (ns > 60.0)
      lo = cfg.mix;  // too good: mix in more random actions
    else
      hi = cfg.mix;
    cfg.mix = 0.5 * (lo + hi);
  }
  throw NumericError("medium tuning did not land in the [30,60] band");
}

enum class Quality { kRandom, kMedium, kExpert };

inline Quality quality_from_name(const std::string& name) {
  if (name == "random") return Quality::kRandom;
  if (name == "medium") return Quality::kMedium;
  if (name == "expert") return Quality::kExpert;
  throw ValidationError("unknown dataset quality: " + name);
}

// Rolls episodes until n_transitions rows are collected (the last episode is
// truncated to fit). Medium quality requires a reference for band tuning.
inline TransitionDataset collect_dataset(const EnvSpec& spec, Quality quality,
                                         size_t n_transitions, uint64_t seed,
                                         const EvalReference* ref = nullptr,
                                         Origin origin = Origin::kSourceReal) {
  spec.validate();
  if (n_transitions == 0)
    throw ValidationError("collect: n_transitions must be >= 1");
  PolicyFn policy;
  BehaviorConfig behavior;
  switch (quality) {
    case Quality::kRandom:
      policy = [](const float*, float* a) { a[0] = a[1] = 0.0f; };
      behavior = {0.0, 1.0};
      break;
    case Quality::kExpert:
      policy = expert_policy(spec);
      break;
    case Quality::kMedium: {
      if (!ref)
        throw ValidationError("collect: medium quality needs a reference");
      policy = expert_policy(spec);
      behavior = tune_medium(spec, *ref, derive_seed(seed, 7));
      break;
    }
  }
  TransitionDataset out;
  out.state_dim = EnvSpec::kStateDim;
  out.action_dim = EnvSpec::kActionDim;
  uint64_t episode = 0;
  while (out.n_rows() < n_transitions) {
    Rng rng(derive_seed(seed, 0x9e3779b9ull, episode++));
    rollout(spec, policy, behavior, rng, &out, origin);
  }
  out.data.resize(n_transitions * out.row_width());
  out.origin.resize(n_transitions);
  out.validate("collected dataset");
  return out;
}

// --- serialization ---

inline std::string envspec_to_text(const EnvSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << "name=" << s.name << "\n"
     << "g=" << s.g << "\n"
     << "gain=" << s.gain << "\n"
     << "damping=" << s.damping << "\n"
     << "joint_clip_x=" << s.joint_clip[0] << "\n"
     << "joint_clip_y=" << s.joint_clip[1] << "\n"
     << "horizon=" << s.horizon << "\n"
     << "goal_x=" << s.goal[0] << "\n"
     << "goal_y=" << s.goal[1] << "\n"
     << "goal_radius=" << s.goal_radius << "\n"
     << "noise_std=" << s.noise_std << "\n"
     << "reward_id=" << s.reward_id << "\n";
  return os.str();
}

inline EnvSpec envspec_from_text(const std::string& text) {
  EnvSpec s;
  std::istringstream is(text);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("env spec text: missing '=' in line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto take = [&kv](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw ValidationError("env spec text: missing key " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  s.name = take("name");
  s.g = std::stod(take("g"));
  s.gain = std::stod(take("gain"));
  s.damping = std::stod(take("damping"));
  s.joint_clip[0] = std::stod(take("joint_clip_x"));
  s.joint_clip[1] = std::stod(take("joint_clip_y"));
  s.horizon = std::stoi(take("horizon"));
  s.goal[0] = std::stod(take("goal_x"));
  s.goal[1] = std::stod(take("goal_y"));
  s.goal_radius = std::stod(take("goal_radius"));
  s.noise_std = std::stod(take("noise_std"));
  s.reward_id = take("reward_id");
  if (!kv.empty())
    throw ValidationError("env spec text: unknown key " + kv.begin()->first);
  s.validate();
  return s;
}

inline void save_eval_reference(const std::string& path,
                                const EvalReference& ref) {
  ref.validate();
  nlohmann::json j;
  j["j_random"] = ref.j_random;
  j["j_expert"] = ref.j_expert;
  j["episodes"] = ref.episodes;
  j["seed"] = ref.seed;
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(2) << "\n";
}

inline EvalReference load_eval_reference(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": bad JSON: " + e.what());
  }
  EvalReference ref;
  try {
    ref.j_random = j.at("j_random").get<double>();
    ref.j_expert = j.at("j_expert").get<double>();
    ref.episodes = j.at("episodes").get<int>();
    ref.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": missing field: " + e.what());
  }
  ref.validate();
  return ref;
}

}  // namespace dmc
