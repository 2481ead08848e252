#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "skilllab/config.hpp"
#include "skilllab/policy.hpp"
#include "skilllab/world.hpp"

namespace skilllab::sampler {

struct GateTrace {
  std::vector<float> yhat;   // per control step
  std::vector<int> alpha;    // binarized, 1 iff yhat >= threshold
};

struct Rollout {
  world::TaskSpec task;
  std::vector<world::WorldState> states;         // length steps+1
  std::vector<std::vector<float>> observations;  // length steps
  std::vector<std::pair<world::ArmAction, world::ArmAction>> actions;
  GateTrace gate;
  int final_score = 0;
  int max_score = 0;
  bool success = false;
  int steps = 0;
};

// Gate override for ablations: force the binarized gate to a fixed value.
enum class GateOverride { None, ForceOff, ForceOn };

struct SampleOut {
  world::ArmAction a_left;
  world::ArmAction a_right;
  float yhat = 0.0f;   // gated variant only
  int alpha = 0;       // applied gate (Twin: 1, Mono/Shared: 0)
  world::SkillId u_left = world::SkillId::Idle;
  world::SkillId u_right = world::SkillId::Idle;
};

// One control step of flow-matching action generation: selector (gated
// variant), estimator, Euler integration of the learned velocity field from
// tau = 0 to 1 in n_steps, components clamped to [-1, 1] after integration.
SampleOut sample_actions(policy::PolicyModel& model, const std::vector<float>& obs,
                         const world::TaskSpec& task, int n_steps, Rng& rng,
                         const RunConfig& cfg,
                         GateOverride ov = GateOverride::None);

// Closed-loop rollout. Stops early on task success or a terminal bar drop.
Rollout rollout(policy::PolicyModel& model, const world::TaskSpec& task,
                int horizon, std::uint64_t seed, const RunConfig& cfg,
                GateOverride ov = GateOverride::None);

// The scripted expert driven through the same harness (sanity baseline).
// Gate trace mirrors the stage plan: yhat = 1 on dual stages.
Rollout rollout_expert(const world::TaskSpec& task, int horizon,
                       std::uint64_t seed, const RunConfig& cfg);

// JSON-lines dump mirroring the demonstration format plus gate columns.
std::string rollout_jsonl(const Rollout& r);

}  // namespace skilllab::sampler
