#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skilllab/config.hpp"
#include "skilllab/world.hpp"

namespace skilllab::data {

struct StepRecord {
  std::vector<float> obs;
  world::ArmAction a_left;
  world::ArmAction a_right;
  world::SkillId u_left = world::SkillId::Idle;
  world::SkillId u_right = world::SkillId::Idle;
  int prior = 0;  // 1 iff the step belongs to a dual-arm stage

  bool operator==(const StepRecord& o) const;
};

struct Demonstration {
  world::TaskSpec task;
  std::vector<StepRecord> steps;

  bool operator==(const Demonstration& o) const;
};

// Cooperation-prior label: 1 for dual-arm skills, else 0.
int label_prior(world::SkillId skill);

// Runs the scripted experts. Deterministic given seed. Throws if the expert
// failure rate over the batch exceeds cfg.data.max_expert_failure.
std::vector<Demonstration> generate(const world::TaskSpec& task, int n_episodes,
                                    std::uint64_t seed, const RunConfig& cfg);

// JSON-lines persistence. One line per step:
//   {"ep":i,"t":t,"obs":[...],"aL":[dx,dy,grip],"aR":[...],
//    "uL":"L1","uR":"IDLE","prior":0}
// All floats carry 9 significant digits (lossless for float32). A manifest is
// written next to the data file as <path>.manifest.json.
void save(const std::vector<Demonstration>& demos, const std::string& path,
          const std::string& dataset_name, std::uint64_t seed,
          const RunConfig& cfg);
std::vector<Demonstration> load(const std::string& path);

// float -> shortest-lossless-ish decimal used by every serializer here
std::string format_float(double v);

}  // namespace skilllab::data
