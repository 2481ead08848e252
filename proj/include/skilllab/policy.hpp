#pragma once

#include <string>
#include <utility>
#include <vector>

#include "skilllab/config.hpp"
#include "skilllab/diffcore.hpp"
#include "skilllab/world.hpp"

namespace skilllab::policy {

namespace dc = skilllab::diffcore;

enum class Variant : std::uint8_t { SkillVla, Mono, Shared, Twin };

std::string variant_name(Variant v);          // "SKILLVLA" | "MONO" | ...
Variant variant_from_name(const std::string& name);  // accepts either case

// ---------------------------------------------------------------------------
// Instruction and head vocabularies

// Instruction tokens: the ten skill ids plus the two long-horizon task names.
constexpr int kInstrVocab = world::kSkillCount + 2;
constexpr int kInstrTubes = world::kSkillCount;
constexpr int kInstrCollect = world::kSkillCount + 1;

int instr_token(world::SkillId s);
std::pair<int, int> instruction_tokens(const world::TaskSpec& task);
std::vector<float> instruction_onehot(const world::TaskSpec& task);  // 2*kInstrVocab

// Selector head classes per arm: own-side skills, dual skills, idle.
constexpr int kHeadClasses = 7;
int head_class(world::SkillId s, world::Arm arm);       // throws if not emittable
world::SkillId head_skill(int cls, world::Arm arm);

// ---------------------------------------------------------------------------
// Model

struct PolicyModel {
  Variant variant = Variant::SkillVla;
  ModelConfig cfg;
  dc::ParameterSet selector;   // SkillVLA only (empty otherwise)
  dc::ParameterSet params;     // streams, experts, estimator, embeddings
  bool selector_trained = false;
  std::vector<std::string> trained_skills;  // dataset inventory, for manifests

  int action_dim() const { return variant == Variant::Mono ? 6 : 3; }
  bool has_gate() const { return variant == Variant::SkillVla; }
  bool has_messages() const {
    return variant == Variant::SkillVla || variant == Variant::Twin;
  }
};

PolicyModel make_model(Variant v, const ModelConfig& cfg, std::uint64_t seed);

void save_model(const PolicyModel& model, const std::string& path_base,
                std::uint64_t config_hash);
PolicyModel load_model(const std::string& path_base);

// ---------------------------------------------------------------------------
// Forward passes. All take a batch observation (B x kObsDim).

struct SelectorOut {
  dc::Tape::Ref z_h;        // (B, d_latent)
  dc::Tape::Ref logits_l;   // (B, kHeadClasses)
  dc::Tape::Ref logits_r;
  dc::Tape::Ref probs_l;    // softmax of the logits
  dc::Tape::Ref probs_r;
};

// obs and instr are tape refs: (B, obs_dim) and (B, 2*kInstrVocab)
SelectorOut selector_forward(dc::Tape& tape, PolicyModel& model,
                             dc::Tape::Ref obs, dc::Tape::Ref instr);

// Per-arm latents. SkillVLA/Twin: separate streams (z_left from u_left only).
// Mono/Shared: one stream reading both tokens; z_left == z_right.
struct EncodeOut {
  dc::Tape::Ref z_left;
  dc::Tape::Ref z_right;
};
EncodeOut encode(dc::Tape& tape, PolicyModel& model, dc::Tape::Ref obs,
                 const std::vector<int>& tok_left,
                 const std::vector<int>& tok_right);

// Gate applied to the inter-arm message.
struct Gate {
  enum class Mode { Zero, One, Column } mode = Mode::Zero;
  dc::Tape::Ref column = -1;  // (B,1), used when mode == Column
  static Gate zero() { return {}; }
  static Gate one() { return {Mode::One, -1}; }
  static Gate column_of(dc::Tape::Ref r) { return {Mode::Column, r}; }
};

// Flow velocity for both arms. a_tau_*: (B, action_dim per arm; Mono passes
// the joint 6-dim tensor as a_tau_left and ignores a_tau_right), tau: (B,1).
// With gate mode Zero the cross-attention block is skipped outright, so the
// output is bit-identical to a model without the block.
struct VelocityOut {
  dc::Tape::Ref v_left;   // Mono: the joint (B,6) velocity
  dc::Tape::Ref v_right;  // -1 for Mono
};
VelocityOut expert_velocity(dc::Tape& tape, PolicyModel& model,
                            dc::Tape::Ref a_tau_left, dc::Tape::Ref a_tau_right,
                            dc::Tape::Ref tau, const EncodeOut& latents,
                            dc::Tape::Ref obs, const Gate& gate);

// Cooperation probability from the selector latent: (B,1) in (0,1).
dc::Tape::Ref estimator_forward(dc::Tape& tape, PolicyModel& model,
                                dc::Tape::Ref z_h);

// ---------------------------------------------------------------------------
// Inference conveniences (single observation)

struct SkillChoice {
  world::SkillId left;
  world::SkillId right;
  std::vector<float> probs_left;   // per head class
  std::vector<float> probs_right;
};

// Argmax skills from the trained selector. Throws if the selector was never
// trained (SkillVLA) or the variant has no selector.
SkillChoice select_skills(PolicyModel& model, const std::vector<float>& obs,
                          const world::TaskSpec& task);

// ŷ for one observation (SkillVLA), plus the latent used.
double estimate_coop(PolicyModel& model, const std::vector<float>& obs,
                     const world::TaskSpec& task);

}  // namespace skilllab::policy
