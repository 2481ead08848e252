#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "skilllab/rng.hpp"

namespace skilllab::world {

// ---------------------------------------------------------------------------
// Geometry

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const;
};

double dist(const Vec2& a, const Vec2& b);

// ---------------------------------------------------------------------------
// Simulator constants. Everything a task or expert depends on lives here so
// runs are fully described by the resolved config.

struct SimConfig {
  double v_max = 0.05;        // workspace units per step at |action| = 1
  double r_grasp = 0.05;      // gripper attach radius
  double delta_tilt = 0.1;    // bar drop threshold on |y_L - y_R|
  double k_p = 4.0;           // waypoint proportional gain
  double sigma_a = 0.01;      // expert action noise, active skills
  double sigma_idle = 0.002;  // expert action noise, IDLE
  double c_couple = 2.0;      // dual-skill vertical correction gain
  double sigma_couple = 0.03; // shared vertical noise inside dual skills
  double p_go = 0.08;         // per-step probability that a waiting dual skill starts moving
  int horizon_single = 200;
  int horizon_long = 600;
  double contact_r = 0.05;    // touch radius for tap/press/drawer handles
  double success_r = 0.05;    // object-at-target radius
  double orbit_radius = 0.12;
  double orbit_band = 0.03;
  int press_hold_steps = 20;
  int shake_flips = 2;        // direction reversals required by the shake skill
  double shake_amp = 0.12;
  int align_sync_window = 10; // max step gap between the two block placements
  double bar_halfwidth = 0.25;
  double drawer_stroke = 0.12;
  int drawer_hold_steps = 10; // both-hands contact steps to toggle the drawer
  double lift_target_y = 0.72;
};

// ---------------------------------------------------------------------------
// Skills and tasks

enum class Arm : std::uint8_t { Left = 0, Right = 1 };

// Skill token inventory. L* are left-arm skills, R* right-arm, D* dual-arm.
// What motion a token denotes depends on the scene; see expert_action.
enum class SkillId : std::uint8_t {
  L1, L2, L3,
  R1, R2, R3,
  D1, D2, D3,
  Idle,
};

constexpr int kSkillCount = 10;

bool is_left_skill(SkillId s);
bool is_right_skill(SkillId s);
bool is_dual_skill(SkillId s);
std::string skill_name(SkillId s);
SkillId skill_from_name(const std::string& name);  // throws on unknown name

enum class SceneKind : std::uint8_t {
  Pair,        // three pickables + tap target (+ bar for dual tasks)
  Tubes,       // two tubes, base rack slots, carry rack (bar)
  Collect,     // drawer, left item, behind-drawer item
  ContinualBar // bar only; single-handle lifts and the dual lift
};

enum class TaskKind : std::uint8_t { PairSkills, DualSkill, LongHorizon };

// A task: either a (left, right) skill pair, a dual skill, or a long-horizon
// composite. `stage_slice` selects a single stage of a long-horizon task for
// demonstration generation ("tubes:left" etc.); empty means the full task.
struct TaskSpec {
  TaskKind kind = TaskKind::PairSkills;
  SceneKind scene = SceneKind::Pair;
  SkillId left = SkillId::Idle;    // PairSkills
  SkillId right = SkillId::Idle;   // PairSkills
  SkillId dual = SkillId::D1;      // DualSkill
  std::string long_name;           // "tubes" | "collect" for LongHorizon
  std::string stage_slice;         // e.g. "left", "rack", "load_a"; empty = full
  long layout_seed = 0;
  int horizon = 0;  // 0 = scene default

  std::string name() const;
};

// Parse "pair:L1,IDLE", "dual:D2", "tubes", "collect", "tubes:left",
// "collect:open", "bar:left", "bar:dual", ... Throws on unknown names.
TaskSpec parse_task(const std::string& text, const SimConfig& cfg);

int task_horizon(const TaskSpec& task, const SimConfig& cfg);
int max_score(const TaskSpec& task);

// ---------------------------------------------------------------------------
// World state

enum class ObjKind : std::uint8_t { Pickable, Target, Bar, RackSlot, Drawer };

// Canonical object ids; observation slots are laid out in this order.
enum class ObjId : std::uint8_t {
  PickA = 0, PickB, PickC, TapTarget, Bar, SlotLeft, SlotRight, Drawer,
};
constexpr int kObjCount = 8;

std::string obj_name(ObjId id);

struct ObjectState {
  ObjId id = ObjId::PickA;
  ObjKind kind = ObjKind::Pickable;
  Vec2 pos;
  std::optional<Arm> held_by;
};

struct ArmAction {
  // float32 components so serialized actions round-trip exactly
  float dx = 0.0f;   // in [-1, 1], scaled by v_max
  float dy = 0.0f;
  float grip = -1.0f;  // close iff > 0
};

// Per-episode accumulators that turn trajectory facts into state so that
// score() stays a pure function of the current WorldState.
struct Trackers {
  int touch_edges = 0;         // rising contact edges, right ee vs tap target
  bool prev_contact = false;
  double orbit_angle = 0.0;    // radians swept while inside the orbit band
  double orbit_prev_theta = 0.0;
  bool orbit_prev_in_band = false;
  double orbit_max_angle = 0.0;
  int press_streak = 0;
  int press_max = 0;
  // dual-skill progress
  bool bar_at_dest = false;    // sticky: bar reached its destination held & level
  int shake_flips = 0;
  int shake_dir = 0;           // -1/0/+1 sign of last bar vertical motion
  double bar_prev_y = 0.0;
  std::array<int, 2> align_arrival = {-1, -1};  // step of first placement per block
  // pair-task pick progress (sticky per pickable)
  std::array<bool, 3> placed = {false, false, false};
  // tubes
  std::array<bool, 2> tube_loaded = {false, false};
  bool rack_placed = false;
  // collect
  bool drawer_open = false;
  bool drawer_opened_once = false;
  bool drawer_closed_after_load = false;
  bool relocated = false;
  std::array<bool, 2> item_loaded = {false, false};
  int drawer_streak = 0;
  bool drawer_rearmed = true;
};

struct WorldState {
  SceneKind scene = SceneKind::Pair;
  Vec2 left_ee, right_ee;
  bool left_grip = false;   // closed = true
  bool right_grip = false;
  std::vector<ObjectState> objects;
  // bar coupling flags: which handle is attached to which gripper
  bool bar_left_held = false;
  bool bar_right_held = false;
  bool bar_dropped = false;
  double bar_home_y = 0.0;  // bar y at reset; phase reference for lifts
  int step_index = 0;
  Trackers trk;

  const ObjectState* find(ObjId id) const;
  ObjectState* find(ObjId id);
  bool has(ObjId id) const { return find(id) != nullptr; }
};

// ---------------------------------------------------------------------------
// Core operations

// Deterministic initial state for (task, seed).
WorldState reset(const TaskSpec& task, std::uint64_t seed, const SimConfig& cfg);

// One dynamics step. Total: never throws; inputs are clamped.
WorldState step(const WorldState& state, const ArmAction& a_left,
                const ArmAction& a_right, const SimConfig& cfg);

// Flat observation. Fixed layout across all tasks:
//   [left_ee(2), right_ee(2), grips(2),
//    object positions in canonical id order (2 each, absent = 0),
//    object held flags (1 each, absent = 0), bar_dropped(1)]
// all values normalized to [-1, 1].
std::vector<float> observe(const WorldState& state, const TaskSpec& task);
constexpr int kObsDim = 6 + 2 * kObjCount + kObjCount + 1;

// Progress achieved so far under the task rubric.
int score(const WorldState& state, const TaskSpec& task);

// Scripted experts. Single-arm skills are queried per arm; dual skills are
// sampled jointly (one rng draw schedule for the pair) via expert_pair.
ArmAction expert_action(const WorldState& state, SkillId skill, Arm arm,
                        Rng& rng, const TaskSpec& task, const SimConfig& cfg);
std::pair<ArmAction, ArmAction> expert_pair(const WorldState& state,
                                            SkillId dual_skill, Rng& rng,
                                            const TaskSpec& task,
                                            const SimConfig& cfg);

// Stage plan for demonstration generation and gate/stage agreement scoring.
struct Stage {
  SkillId left = SkillId::Idle;   // executed tokens (dual stages: both = dual id)
  SkillId right = SkillId::Idle;
  bool dual = false;              // executed by the joint expert
  SkillId dual_skill = SkillId::D1;
};

// The stage the scripted controller would run from this state, under the
// task's stage logic. Long-horizon tasks derive the stage from progress.
Stage current_stage(const WorldState& state, const TaskSpec& task,
                    const SimConfig& cfg);

// Expert controller for a whole control step (both arms), following
// current_stage. This is what data generation and the expert-as-policy
// harness wrapper use.
std::pair<ArmAction, ArmAction> expert_step(const WorldState& state,
                                            const TaskSpec& task, Rng& rng,
                                            const SimConfig& cfg);

// True once the episode's goal is met (score == max_score).
bool task_done(const WorldState& state, const TaskSpec& task);

// True if the episode should stop early (success, or a terminal bar drop).
bool terminal(const WorldState& state, const TaskSpec& task);

}  // namespace skilllab::world
