#include "skilllab/world.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace skilllab::world {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

double clamp_unit(double v) { return clamp(v, -1.0, 1.0); }

// Fixed anchors. These are deliberately constants, not sampled: destinations
// are not observable as objects, so skills carry their goal locations.
constexpr Vec2 kLeftDest{-0.55, 0.8};     // shelf for left-arm picks
constexpr Vec2 kHomeLeft{-0.45, 0.75};
constexpr Vec2 kHomeRight{0.45, 0.75};
constexpr Vec2 kAlignLeft{-0.12, 0.55};
constexpr Vec2 kAlignRight{0.12, 0.55};
constexpr double kHandoffY = 0.55;        // collect: handoff height above the drawer

Vec2 bar_handle(const Vec2& center, Arm arm, const SimConfig& cfg) {
  double off = (arm == Arm::Left) ? -cfg.bar_halfwidth : cfg.bar_halfwidth;
  return {center.x + off, center.y};
}

Vec2 bar_dest(const WorldState& s, const SimConfig& cfg) {
  if (s.scene == SceneKind::Tubes) {
    const ObjectState* sl = s.find(ObjId::SlotLeft);
    const ObjectState* sr = s.find(ObjId::SlotRight);
    return {(sl->pos.x + sr->pos.x) * 0.5, 0.2};
  }
  return {0.0, cfg.lift_target_y};
}

Vec2 tube_slot(const Vec2& bar_center, int tube_index) {
  double off = tube_index == 0 ? -0.12 : 0.12;
  return {bar_center.x + off, bar_center.y + 0.04};
}

Vec2 drawer_handle(const Vec2& drawer_pos, Arm arm) {
  double off = (arm == Arm::Left) ? -0.12 : 0.12;
  return {drawer_pos.x + off, drawer_pos.y};
}

}  // namespace

double Vec2::norm() const { return std::sqrt(x * x + y * y); }
double dist(const Vec2& a, const Vec2& b) { return (a - b).norm(); }

// ---------------------------------------------------------------------------
// Skill and task plumbing

bool is_left_skill(SkillId s) {
  return s == SkillId::L1 || s == SkillId::L2 || s == SkillId::L3;
}
bool is_right_skill(SkillId s) {
  return s == SkillId::R1 || s == SkillId::R2 || s == SkillId::R3;
}
bool is_dual_skill(SkillId s) {
  return s == SkillId::D1 || s == SkillId::D2 || s == SkillId::D3;
}

std::string skill_name(SkillId s) {
  switch (s) {
    case SkillId::L1: return "L1";
    case SkillId::L2: return "L2";
    case SkillId::L3: return "L3";
    case SkillId::R1: return "R1";
    case SkillId::R2: return "R2";
    case SkillId::R3: return "R3";
    case SkillId::D1: return "D1";
    case SkillId::D2: return "D2";
    case SkillId::D3: return "D3";
    case SkillId::Idle: return "IDLE";
  }
  return "?";
}

SkillId skill_from_name(const std::string& name) {
  for (int i = 0; i < kSkillCount; ++i) {
    SkillId s = static_cast<SkillId>(i);
    if (skill_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown skill name: " + name);
}

std::string obj_name(ObjId id) {
  switch (id) {
    case ObjId::PickA: return "pick_a";
    case ObjId::PickB: return "pick_b";
    case ObjId::PickC: return "pick_c";
    case ObjId::TapTarget: return "tap_target";
    case ObjId::Bar: return "bar";
    case ObjId::SlotLeft: return "slot_left";
    case ObjId::SlotRight: return "slot_right";
    case ObjId::Drawer: return "drawer";
  }
  return "?";
}

std::string TaskSpec::name() const {
  switch (kind) {
    case TaskKind::PairSkills:
      if (scene == SceneKind::ContinualBar) {
        if (left != SkillId::Idle && right != SkillId::Idle) return "bar:dual";
        return left != SkillId::Idle ? "bar:left" : "bar:right";
      }
      return "pair:" + skill_name(left) + "," + skill_name(right);
    case TaskKind::DualSkill:
      return "dual:" + skill_name(dual);
    case TaskKind::LongHorizon:
      return stage_slice.empty() ? long_name : long_name + ":" + stage_slice;
  }
  return "?";
}

TaskSpec parse_task(const std::string& text, const SimConfig& cfg) {
  (void)cfg;
  TaskSpec t;
  auto colon = text.find(':');
  std::string head = colon == std::string::npos ? text : text.substr(0, colon);
  std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);

  if (head == "pair") {
    auto comma = rest.find(',');
    if (comma == std::string::npos)
      throw std::invalid_argument("pair task needs two skills: " + text);
    t.kind = TaskKind::PairSkills;
    t.scene = SceneKind::Pair;
    t.left = skill_from_name(rest.substr(0, comma));
    t.right = skill_from_name(rest.substr(comma + 1));
    if (t.left != SkillId::Idle && !is_left_skill(t.left))
      throw std::invalid_argument("not a left-arm skill: " + skill_name(t.left));
    if (t.right != SkillId::Idle && !is_right_skill(t.right))
      throw std::invalid_argument("not a right-arm skill: " + skill_name(t.right));
    return t;
  }
  if (head == "dual") {
    t.kind = TaskKind::DualSkill;
    t.scene = SceneKind::Pair;
    t.dual = skill_from_name(rest);
    if (!is_dual_skill(t.dual))
      throw std::invalid_argument("not a dual skill: " + rest);
    return t;
  }
  if (head == "tubes") {
    t.kind = TaskKind::LongHorizon;
    t.scene = SceneKind::Tubes;
    t.long_name = "tubes";
    t.stage_slice = rest;
    if (!rest.empty() && rest != "left" && rest != "right" && rest != "rack")
      throw std::invalid_argument("unknown tubes slice: " + rest);
    return t;
  }
  if (head == "collect") {
    t.kind = TaskKind::LongHorizon;
    t.scene = SceneKind::Collect;
    t.long_name = "collect";
    t.stage_slice = rest;
    if (!rest.empty() && rest != "open" && rest != "load_a" &&
        rest != "relocate" && rest != "load_b" && rest != "close")
      throw std::invalid_argument("unknown collect slice: " + rest);
    return t;
  }
  if (head == "bar") {
    t.kind = TaskKind::PairSkills;
    t.scene = SceneKind::ContinualBar;
    if (rest == "left") {
      t.left = SkillId::L1;
      t.right = SkillId::Idle;
    } else if (rest == "right") {
      t.left = SkillId::Idle;
      t.right = SkillId::R1;
    } else if (rest == "dual") {
      t.left = SkillId::L1;
      t.right = SkillId::R1;
    } else {
      throw std::invalid_argument("unknown bar task: " + rest);
    }
    return t;
  }
  throw std::invalid_argument("unknown task name: " + text);
}

int task_horizon(const TaskSpec& task, const SimConfig& cfg) {
  if (task.horizon > 0) return task.horizon;
  if (task.kind == TaskKind::LongHorizon && task.stage_slice.empty())
    return cfg.horizon_long;
  return cfg.horizon_single;
}

int max_score(const TaskSpec& task) {
  switch (task.kind) {
    case TaskKind::PairSkills: {
      if (task.scene == SceneKind::ContinualBar) return 1;
      int m = 0;
      if (task.left != SkillId::Idle) ++m;
      if (task.right != SkillId::Idle) ++m;
      return std::max(m, 1);
    }
    case TaskKind::DualSkill:
      return 1;
    case TaskKind::LongHorizon:
      if (!task.stage_slice.empty()) return 1;
      return task.long_name == "tubes" ? 3 : 5;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// State helpers

const ObjectState* WorldState::find(ObjId id) const {
  for (const auto& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}
ObjectState* WorldState::find(ObjId id) {
  for (auto& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}

// ---------------------------------------------------------------------------
// reset

namespace {

Vec2 sample_box(Rng& rng, double x0, double x1, double y0, double y1) {
  return {rng.uniform(x0, x1), rng.uniform(y0, y1)};
}

void add_obj(WorldState& s, ObjId id, ObjKind kind, Vec2 pos) {
  s.objects.push_back(ObjectState{id, kind, pos, std::nullopt});
}

}  // namespace

WorldState reset(const TaskSpec& task, std::uint64_t seed, const SimConfig& cfg) {
  Rng rng(Rng::mix(seed, 0x5eedull));
  WorldState s;
  s.scene = task.scene;
  s.left_ee = sample_box(rng, -0.7, -0.15, 0.5, 0.85);
  s.right_ee = sample_box(rng, 0.15, 0.7, 0.5, 0.85);

  switch (task.scene) {
    case SceneKind::Pair: {
      if (task.kind == TaskKind::PairSkills) {
        // three pickables in the left zone, min separation so grasps are unambiguous
        std::vector<Vec2> placed;
        for (int k = 0; k < 3; ++k) {
          Vec2 p;
          for (int tries = 0; tries < 200; ++tries) {
            p = sample_box(rng, -0.9, -0.2, 0.1, 0.5);
            bool ok = true;
            for (const auto& q : placed)
              if (dist(p, q) < 0.12) ok = false;
            if (ok) break;
          }
          placed.push_back(p);
          add_obj(s, static_cast<ObjId>(k), ObjKind::Pickable, p);
        }
        add_obj(s, ObjId::TapTarget, ObjKind::Target,
                sample_box(rng, 0.2, 0.9, 0.1, 0.5));
      } else {
        // dual-skill layouts
        if (task.dual == SkillId::D3) {
          add_obj(s, ObjId::PickA, ObjKind::Pickable,
                  sample_box(rng, -0.8, -0.3, 0.1, 0.45));
          add_obj(s, ObjId::PickB, ObjKind::Pickable,
                  sample_box(rng, 0.3, 0.8, 0.1, 0.45));
        } else {
          Vec2 c = sample_box(rng, -0.1, 0.1, 0.15, 0.3);
          add_obj(s, ObjId::Bar, ObjKind::Bar, c);
          s.bar_home_y = c.y;
        }
      }
      break;
    }
    case SceneKind::Tubes: {
      Vec2 sl{rng.uniform(-0.34, -0.26), rng.uniform(0.1, 0.14)};
      Vec2 sr{rng.uniform(0.26, 0.34), rng.uniform(0.1, 0.14)};
      add_obj(s, ObjId::SlotLeft, ObjKind::RackSlot, sl);
      add_obj(s, ObjId::SlotRight, ObjKind::RackSlot, sr);
      Vec2 bar{rng.uniform(-0.05, 0.05), rng.uniform(0.38, 0.44)};
      add_obj(s, ObjId::Bar, ObjKind::Bar, bar);
      s.bar_home_y = bar.y;
      add_obj(s, ObjId::PickA, ObjKind::Pickable, sl + Vec2{0.0, 0.03});
      add_obj(s, ObjId::PickB, ObjKind::Pickable, sr + Vec2{0.0, 0.03});
      // stage slices start from stage-consistent states
      bool load1 = task.stage_slice == "right" || task.stage_slice == "rack";
      bool load2 = task.stage_slice == "left" || task.stage_slice == "rack";
      if (load1) {
        s.find(ObjId::PickA)->pos = tube_slot(bar, 0);
        s.trk.tube_loaded[0] = true;
      }
      if (load2) {
        s.find(ObjId::PickB)->pos = tube_slot(bar, 1);
        s.trk.tube_loaded[1] = true;
      }
      // vary the pending tube's start within its reachable half
      if (task.stage_slice == "left" && rng.bernoulli(0.5))
        s.find(ObjId::PickA)->pos = sample_box(rng, -0.75, -0.15, 0.08, 0.35);
      if (task.stage_slice == "right" && rng.bernoulli(0.5))
        s.find(ObjId::PickB)->pos = sample_box(rng, 0.15, 0.75, 0.08, 0.35);
      break;
    }
    case SceneKind::Collect: {
      Vec2 d{rng.uniform(0.46, 0.54), rng.uniform(0.2, 0.24)};
      add_obj(s, ObjId::Drawer, ObjKind::Drawer, d);
      add_obj(s, ObjId::PickA, ObjKind::Pickable,
              sample_box(rng, -0.7, -0.3, 0.1, 0.4));
      add_obj(s, ObjId::PickB, ObjKind::Pickable,
              Vec2{d.x + rng.uniform(0.26, 0.3), d.y + rng.uniform(-0.03, 0.03)});
      const std::string& sl = task.stage_slice;
      bool open = !sl.empty() && sl != "open";
      if (open) {
        s.trk.drawer_open = true;
        s.trk.drawer_opened_once = true;
        s.find(ObjId::Drawer)->pos.x += cfg.drawer_stroke;
      }
      auto load_item = [&](int k, ObjId id) {
        s.find(id)->pos = s.find(ObjId::Drawer)->pos;
        s.trk.item_loaded[k] = true;
      };
      if (sl == "load_a") {
        // nuisance state of item b varies: already loaded or waiting at handoff
        if (rng.bernoulli(0.5)) {
          load_item(1, ObjId::PickB);
          s.trk.relocated = true;
        } else {
          s.find(ObjId::PickB)->pos = Vec2{d.x, kHandoffY};
          s.trk.relocated = true;
        }
      } else if (sl == "relocate") {
        load_item(0, ObjId::PickA);
      } else if (sl == "load_b") {
        load_item(0, ObjId::PickA);
        s.find(ObjId::PickB)->pos = Vec2{d.x, kHandoffY};
        s.trk.relocated = true;
      } else if (sl == "close") {
        load_item(0, ObjId::PickA);
        load_item(1, ObjId::PickB);
        s.trk.relocated = true;
      }
      break;
    }
    case SceneKind::ContinualBar: {
      Vec2 c = sample_box(rng, -0.1, 0.1, 0.15, 0.3);
      add_obj(s, ObjId::Bar, ObjKind::Bar, c);
      s.bar_home_y = c.y;
      break;
    }
  }
  if (const ObjectState* bar = s.find(ObjId::Bar)) s.trk.bar_prev_y = bar->pos.y;
  return s;
}

// ---------------------------------------------------------------------------
// step

namespace {

void release_arm(WorldState& s, Arm arm) {
  for (auto& o : s.objects)
    if (o.held_by == arm) o.held_by.reset();
  if (arm == Arm::Left) s.bar_left_held = false;
  else s.bar_right_held = false;
}

bool arm_busy(const WorldState& s, Arm arm) {
  if (arm == Arm::Left && s.bar_left_held) return true;
  if (arm == Arm::Right && s.bar_right_held) return true;
  for (const auto& o : s.objects)
    if (o.held_by == arm) return true;
  return false;
}

bool pickable_fixed(const WorldState& s, const ObjectState& o) {
  // items racked on the bar or loaded into the drawer stay attached
  if (s.scene == SceneKind::Tubes) {
    if (o.id == ObjId::PickA && s.trk.tube_loaded[0]) return true;
    if (o.id == ObjId::PickB && s.trk.tube_loaded[1]) return true;
  }
  if (s.scene == SceneKind::Collect) {
    if (o.id == ObjId::PickA && s.trk.item_loaded[0]) return true;
    if (o.id == ObjId::PickB && s.trk.item_loaded[1]) return true;
  }
  return false;
}

void try_attach(WorldState& s, Arm arm, const SimConfig& cfg) {
  const Vec2& ee = (arm == Arm::Left) ? s.left_ee : s.right_ee;
  // nearest free pickable within reach
  ObjectState* best = nullptr;
  double best_d = cfg.r_grasp;
  for (auto& o : s.objects) {
    if (o.kind != ObjKind::Pickable || o.held_by || pickable_fixed(s, o)) continue;
    double d = dist(ee, o.pos);
    if (d <= best_d) {
      best_d = d;
      best = &o;
    }
  }
  // own-side bar handle competes with pickables by distance
  const ObjectState* bar = s.find(ObjId::Bar);
  bool handle_free = bar && ((arm == Arm::Left) ? !s.bar_left_held : !s.bar_right_held);
  double handle_d = handle_free ? dist(ee, bar_handle(bar->pos, arm, cfg)) : 1e9;
  if (handle_free && handle_d <= cfg.r_grasp && handle_d < best_d) {
    if (arm == Arm::Left) s.bar_left_held = true;
    else s.bar_right_held = true;
    return;
  }
  if (best) {
    best->held_by = arm;
    best->pos = ee;
  }
}

void update_trackers(WorldState& s, const SimConfig& cfg) {
  Trackers& t = s.trk;

  // right-arm contact patterns vs the tap target
  if (const ObjectState* tgt = s.find(ObjId::TapTarget)) {
    bool contact = dist(s.right_ee, tgt->pos) <= cfg.contact_r;
    if (contact && !t.prev_contact) ++t.touch_edges;
    if (contact) {
      ++t.press_streak;
      t.press_max = std::max(t.press_max, t.press_streak);
    } else {
      t.press_streak = 0;
    }
    t.prev_contact = contact;

    double r = dist(s.right_ee, tgt->pos);
    bool in_band = std::abs(r - cfg.orbit_radius) <= cfg.orbit_band;
    double theta = std::atan2(s.right_ee.y - tgt->pos.y, s.right_ee.x - tgt->pos.x);
    if (in_band && t.orbit_prev_in_band) {
      // only in-band motion counts toward the revolution
      double d = theta - t.orbit_prev_theta;
      while (d > kPi) d -= 2 * kPi;
      while (d < -kPi) d += 2 * kPi;
      t.orbit_angle += d;
      t.orbit_max_angle = std::max(t.orbit_max_angle, std::abs(t.orbit_angle));
    }
    t.orbit_prev_theta = theta;
    t.orbit_prev_in_band = in_band;
  }

  if (s.scene == SceneKind::Pair) {
    for (int k = 0; k < 3; ++k) {
      const ObjectState* o = s.find(static_cast<ObjId>(k));
      if (o && !o->held_by && dist(o->pos, kLeftDest) <= cfg.success_r)
        t.placed[k] = true;
    }
    const ObjectState* a = s.find(ObjId::PickA);
    const ObjectState* b = s.find(ObjId::PickB);
    if (a && !a->held_by && t.align_arrival[0] < 0 &&
        dist(a->pos, kAlignLeft) <= cfg.success_r)
      t.align_arrival[0] = s.step_index;
    if (b && !b->held_by && t.align_arrival[1] < 0 &&
        dist(b->pos, kAlignRight) <= cfg.success_r)
      t.align_arrival[1] = s.step_index;
  }

  if (const ObjectState* bar = s.find(ObjId::Bar)) {
    bool both = s.bar_left_held && s.bar_right_held;
    bool any = s.bar_left_held || s.bar_right_held;
    Vec2 dest = bar_dest(s, cfg);
    if (!s.bar_dropped && dist(bar->pos, dest) <= cfg.success_r) {
      if (any && !t.bar_at_dest) t.bar_at_dest = true;
      if (s.scene == SceneKind::Tubes && !any) t.rack_placed = true;
    }
    double dy = bar->pos.y - t.bar_prev_y;
    int sign = dy > 1e-4 ? 1 : (dy < -1e-4 ? -1 : 0);
    if (both && sign != 0) {
      if (t.shake_dir != 0 && sign != t.shake_dir) ++t.shake_flips;
      t.shake_dir = sign;
    }
    t.bar_prev_y = bar->pos.y;
  }

  if (s.scene == SceneKind::Tubes) {
    const ObjectState* bar = s.find(ObjId::Bar);
    for (int k = 0; k < 2; ++k) {
      ObjId id = k == 0 ? ObjId::PickA : ObjId::PickB;
      const ObjectState* o = s.find(id);
      if (o && !o->held_by && !t.tube_loaded[k] &&
          dist(o->pos, tube_slot(bar->pos, k)) <= 0.06)
        t.tube_loaded[k] = true;
    }
  }

  if (s.scene == SceneKind::Collect) {
    const ObjectState* d = s.find(ObjId::Drawer);
    const ObjectState* b = s.find(ObjId::PickB);
    if (b && dist(b->pos, Vec2{d->pos.x - (t.drawer_open ? cfg.drawer_stroke : 0.0),
                               kHandoffY}) <= 0.07)
      t.relocated = true;
    for (int k = 0; k < 2; ++k) {
      ObjId id = k == 0 ? ObjId::PickA : ObjId::PickB;
      const ObjectState* o = s.find(id);
      if (o && !o->held_by && !t.item_loaded[k] && t.drawer_open &&
          dist(o->pos, d->pos) <= 0.06)
        t.item_loaded[k] = true;
    }
  }
}

}  // namespace

WorldState step(const WorldState& state, const ArmAction& a_left,
                const ArmAction& a_right, const SimConfig& cfg) {
  WorldState s = state;

  // integrate clamped velocities, keep end-effectors inside the workspace
  s.left_ee.x = clamp(s.left_ee.x + cfg.v_max * clamp_unit(a_left.dx), -1.0, 1.0);
  s.left_ee.y = clamp(s.left_ee.y + cfg.v_max * clamp_unit(a_left.dy), 0.0, 1.0);
  s.right_ee.x = clamp(s.right_ee.x + cfg.v_max * clamp_unit(a_right.dx), -1.0, 1.0);
  s.right_ee.y = clamp(s.right_ee.y + cfg.v_max * clamp_unit(a_right.dy), 0.0, 1.0);

  s.left_grip = a_left.grip > 0.0;
  s.right_grip = a_right.grip > 0.0;

  if (!s.left_grip) release_arm(s, Arm::Left);
  if (!s.right_grip) release_arm(s, Arm::Right);

  // held objects track their gripper exactly
  for (auto& o : s.objects) {
    if (o.held_by == Arm::Left) o.pos = s.left_ee;
    if (o.held_by == Arm::Right) o.pos = s.right_ee;
  }

  // attach on a closed gripper near a free object
  if (s.left_grip && !arm_busy(s, Arm::Left)) try_attach(s, Arm::Left, cfg);
  if (s.right_grip && !arm_busy(s, Arm::Right)) try_attach(s, Arm::Right, cfg);

  // bar kinematics and the tilt rule
  if (ObjectState* bar = s.find(ObjId::Bar)) {
    if (s.bar_left_held && s.bar_right_held) {
      double tilt = std::abs(s.left_ee.y - s.right_ee.y);
      bar->pos = {(s.left_ee.x + s.right_ee.x) * 0.5,
                  (s.left_ee.y + s.right_ee.y) * 0.5};
      if (tilt > cfg.delta_tilt) {
        s.bar_left_held = false;
        s.bar_right_held = false;
        s.bar_dropped = true;
      }
    } else if (s.bar_left_held) {
      bar->pos = {s.left_ee.x + cfg.bar_halfwidth, s.left_ee.y};
    } else if (s.bar_right_held) {
      bar->pos = {s.right_ee.x - cfg.bar_halfwidth, s.right_ee.y};
    }
  }

  // drawer toggling: both hands on the handles for a sustained stretch
  if (ObjectState* d = s.find(ObjId::Drawer)) {
    bool contact =
        dist(s.left_ee, drawer_handle(d->pos, Arm::Left)) <= cfg.contact_r &&
        dist(s.right_ee, drawer_handle(d->pos, Arm::Right)) <= cfg.contact_r;
    if (contact && s.trk.drawer_rearmed) {
      if (++s.trk.drawer_streak >= cfg.drawer_hold_steps) {
        bool was_open = s.trk.drawer_open;
        s.trk.drawer_open = !was_open;
        d->pos.x += was_open ? -cfg.drawer_stroke : cfg.drawer_stroke;
        if (!was_open) s.trk.drawer_opened_once = true;
        if (was_open && s.trk.item_loaded[0] && s.trk.item_loaded[1])
          s.trk.drawer_closed_after_load = true;
        s.trk.drawer_streak = 0;
        s.trk.drawer_rearmed = false;
      }
    } else if (!contact) {
      s.trk.drawer_streak = 0;
      s.trk.drawer_rearmed = true;
    }
  }

  // racked tubes follow the bar, loaded items follow the drawer
  if (s.scene == SceneKind::Tubes) {
    const ObjectState* bar = s.find(ObjId::Bar);
    for (int k = 0; k < 2; ++k) {
      ObjId id = k == 0 ? ObjId::PickA : ObjId::PickB;
      ObjectState* o = s.find(id);
      if (s.trk.tube_loaded[k] && !o->held_by) o->pos = tube_slot(bar->pos, k);
    }
  }
  if (s.scene == SceneKind::Collect) {
    const ObjectState* d = s.find(ObjId::Drawer);
    for (int k = 0; k < 2; ++k) {
      ObjId id = k == 0 ? ObjId::PickA : ObjId::PickB;
      ObjectState* o = s.find(id);
      if (s.trk.item_loaded[k] && !o->held_by) o->pos = d->pos;
    }
  }

  for (auto& o : s.objects) {
    o.pos.x = clamp(o.pos.x, -1.0, 1.0);
    o.pos.y = clamp(o.pos.y, 0.0, 1.0);
  }

  update_trackers(s, cfg);
  ++s.step_index;
  return s;
}

// ---------------------------------------------------------------------------
// observe

std::vector<float> observe(const WorldState& state, const TaskSpec& task) {
  (void)task;  // layout is task-independent
  std::vector<float> v;
  v.reserve(kObsDim);
  auto push_pos = [&](const Vec2& p) {
    v.push_back(static_cast<float>(p.x));
    v.push_back(static_cast<float>(2.0 * p.y - 1.0));
  };
  push_pos(state.left_ee);
  push_pos(state.right_ee);
  v.push_back(state.left_grip ? 1.0f : -1.0f);
  v.push_back(state.right_grip ? 1.0f : -1.0f);
  for (int k = 0; k < kObjCount; ++k) {
    const ObjectState* o = state.find(static_cast<ObjId>(k));
    if (o) push_pos(o->pos);
    else {
      v.push_back(0.0f);
      v.push_back(0.0f);
    }
  }
  for (int k = 0; k < kObjCount; ++k) {
    const ObjectState* o = state.find(static_cast<ObjId>(k));
    bool held = o && o->held_by.has_value();
    bool bar_held = o && o->kind == ObjKind::Bar &&
                    (state.bar_left_held || state.bar_right_held);
    v.push_back(o ? ((held || bar_held) ? 1.0f : -1.0f) : 0.0f);
  }
  v.push_back(state.bar_dropped ? 1.0f : -1.0f);
  return v;
}

// ---------------------------------------------------------------------------
// score

namespace {

bool right_pattern_done(const WorldState& s, SkillId skill, const SimConfig& cfg) {
  switch (skill) {
    case SkillId::R1: return s.trk.touch_edges >= 1;
    case SkillId::R2: return s.trk.orbit_max_angle >= 2 * kPi;
    case SkillId::R3: return s.trk.press_max >= cfg.press_hold_steps;
    default: return false;
  }
}

int pair_subgoal_left(const WorldState& s, SkillId skill) {
  switch (skill) {
    case SkillId::L1: return s.trk.placed[0] ? 1 : 0;
    case SkillId::L2: return s.trk.placed[1] ? 1 : 0;
    case SkillId::L3: return s.trk.placed[2] ? 1 : 0;
    default: return 0;
  }
}

}  // namespace

int score(const WorldState& state, const TaskSpec& task) {
  SimConfig cfg;  // pattern thresholds; fixed per build, see SimConfig defaults
  switch (task.kind) {
    case TaskKind::PairSkills: {
      if (task.scene == SceneKind::ContinualBar) {
        bool dual = task.left != SkillId::Idle && task.right != SkillId::Idle;
        return (dual ? state.trk.bar_at_dest && !state.bar_dropped
                     : state.trk.bar_at_dest)
                   ? 1
                   : 0;
      }
      int sc = 0;
      if (task.left != SkillId::Idle) sc += pair_subgoal_left(state, task.left);
      if (task.right != SkillId::Idle)
        sc += right_pattern_done(state, task.right, cfg) ? 1 : 0;
      return sc;
    }
    case TaskKind::DualSkill: {
      switch (task.dual) {
        case SkillId::D1:
          return (state.trk.bar_at_dest && !state.bar_dropped) ? 1 : 0;
        case SkillId::D2:
          return (state.trk.shake_flips >= cfg.shake_flips && !state.bar_dropped)
                     ? 1 : 0;
        case SkillId::D3: {
          const auto& arr = state.trk.align_arrival;
          return (arr[0] >= 0 && arr[1] >= 0 &&
                  std::abs(arr[0] - arr[1]) <= cfg.align_sync_window)
                     ? 1 : 0;
        }
        default: return 0;
      }
    }
    case TaskKind::LongHorizon: {
      if (task.long_name == "tubes") {
        if (task.stage_slice == "left") return state.trk.tube_loaded[0] ? 1 : 0;
        if (task.stage_slice == "right") return state.trk.tube_loaded[1] ? 1 : 0;
        if (task.stage_slice == "rack") return state.trk.rack_placed ? 1 : 0;
        return (state.trk.tube_loaded[0] ? 1 : 0) +
               (state.trk.tube_loaded[1] ? 1 : 0) +
               (state.trk.rack_placed && !state.bar_dropped ? 1 : 0);
      }
      const Trackers& t = state.trk;
      if (task.stage_slice == "open") return t.drawer_opened_once ? 1 : 0;
      if (task.stage_slice == "load_a") return t.item_loaded[0] ? 1 : 0;
      if (task.stage_slice == "relocate") return t.relocated ? 1 : 0;
      if (task.stage_slice == "load_b") return t.item_loaded[1] ? 1 : 0;
      if (task.stage_slice == "close") return t.drawer_closed_after_load ? 1 : 0;
      return (t.drawer_opened_once ? 1 : 0) + (t.relocated ? 1 : 0) +
             (t.item_loaded[0] ? 1 : 0) + (t.item_loaded[1] ? 1 : 0) +
             (t.drawer_closed_after_load ? 1 : 0);
    }
  }
  return 0;
}

bool task_done(const WorldState& state, const TaskSpec& task) {
  return score(state, task) >= max_score(task);
}

bool terminal(const WorldState& state, const TaskSpec& task) {
  return task_done(state, task) || state.bar_dropped;
}

// ---------------------------------------------------------------------------
// experts

namespace {

// raw proportional command; callers clamp once after any coupling terms
ArmAction noisy(Vec2 wp, const Vec2& ee, double grip_cmd, Rng& rng, double sigma,
                const SimConfig& cfg) {
  ArmAction a;
  a.dx = static_cast<float>(cfg.k_p * (wp.x - ee.x) + rng.normal(0.0, sigma));
  a.dy = static_cast<float>(cfg.k_p * (wp.y - ee.y) + rng.normal(0.0, sigma));
  a.grip = static_cast<float>(grip_cmd + rng.normal(0.0, sigma));
  return a;
}

void clamp_action(ArmAction& a) {
  a.dx = static_cast<float>(clamp_unit(a.dx));
  a.dy = static_cast<float>(clamp_unit(a.dy));
  a.grip = static_cast<float>(clamp_unit(a.grip));
}

ArmAction idle_action(Rng& rng, const SimConfig& cfg) {
  ArmAction a;
  a.dx = static_cast<float>(rng.normal(0.0, cfg.sigma_idle));
  a.dy = static_cast<float>(rng.normal(0.0, cfg.sigma_idle));
  a.grip = static_cast<float>(-1.0 + rng.normal(0.0, cfg.sigma_idle));
  return a;
}

// generic fetch-and-place: approach obj, grasp, carry to dest, release, retreat
ArmAction pick_place(const WorldState& s, Arm arm, ObjId obj_id, Vec2 dest,
                     bool done_flag, Rng& rng, const SimConfig& cfg) {
  const Vec2& ee = (arm == Arm::Left) ? s.left_ee : s.right_ee;
  Vec2 home = (arm == Arm::Left) ? kHomeLeft : kHomeRight;
  const ObjectState* obj = s.find(obj_id);
  if (!obj) return idle_action(rng, cfg);
  bool holding = obj->held_by == arm;
  if (done_flag || (!holding && dist(obj->pos, dest) <= cfg.success_r))
    return noisy(home, ee, -1.0, rng, cfg.sigma_a, cfg);
  if (holding) {
    if (dist(ee, dest) <= 0.03) return noisy(dest, ee, -1.0, rng, cfg.sigma_a, cfg);
    return noisy(dest, ee, 1.0, rng, cfg.sigma_a, cfg);
  }
  if (dist(ee, obj->pos) <= cfg.r_grasp * 0.6)
    return noisy(obj->pos, ee, 1.0, rng, cfg.sigma_a, cfg);
  return noisy(obj->pos, ee, -1.0, rng, cfg.sigma_a, cfg);
}

ArmAction right_pattern(const WorldState& s, SkillId skill, Rng& rng,
                        const SimConfig& cfg) {
  const Vec2& ee = s.right_ee;
  const ObjectState* tgt = s.find(ObjId::TapTarget);
  if (!tgt) return idle_action(rng, cfg);
  switch (skill) {
    case SkillId::R1: {
      if (s.trk.touch_edges >= 1)
        return noisy(kHomeRight, ee, -1.0, rng, cfg.sigma_a, cfg);
      return noisy(tgt->pos, ee, -1.0, rng, cfg.sigma_a, cfg);
    }
    case SkillId::R2: {
      if (s.trk.orbit_max_angle >= 2 * kPi)
        return noisy(kHomeRight, ee, -1.0, rng, cfg.sigma_a, cfg);
      Vec2 rel = ee - tgt->pos;
      double r = rel.norm();
      double theta = std::atan2(rel.y, rel.x);
      double ahead = (std::abs(r - cfg.orbit_radius) <= cfg.orbit_band * 0.8)
                         ? 0.35 : 0.0;
      Vec2 wp{tgt->pos.x + cfg.orbit_radius * std::cos(theta + ahead),
              tgt->pos.y + cfg.orbit_radius * std::sin(theta + ahead)};
      return noisy(wp, ee, -1.0, rng, cfg.sigma_a, cfg);
    }
    case SkillId::R3:
      return noisy(tgt->pos, ee, -1.0, rng, cfg.sigma_a, cfg);
    default:
      return idle_action(rng, cfg);
  }
}

// Dual-skill coupling: a vertical correction toward the partner plus a noise
// component shared by both arms. Applied whenever both arms are engaged.
void couple_vertical(ArmAction& a_l, ArmAction& a_r, const WorldState& s,
                     double shared_noise, const SimConfig& cfg) {
  a_l.dy += static_cast<float>(cfg.c_couple * (s.right_ee.y - s.left_ee.y) +
                               shared_noise);
  a_r.dy += static_cast<float>(cfg.c_couple * (s.left_ee.y - s.right_ee.y) +
                               shared_noise);
}

std::pair<ArmAction, ArmAction> dual_bar_lift(const WorldState& s, Rng& rng,
                                              const SimConfig& cfg,
                                              bool place_and_release) {
  const ObjectState* bar = s.find(ObjId::Bar);
  Vec2 dest = bar_dest(s, cfg);
  Vec2 hl = bar_handle(bar->pos, Arm::Left, cfg);
  Vec2 hr = bar_handle(bar->pos, Arm::Right, cfg);
  Vec2 dl = bar_handle(dest, Arm::Left, cfg);
  Vec2 dr = bar_handle(dest, Arm::Right, cfg);
  bool both = s.bar_left_held && s.bar_right_held;

  if (!both) {
    ArmAction al = s.bar_left_held
                       ? noisy(hl, s.left_ee, 1.0, rng, cfg.sigma_a, cfg)
                       : (dist(s.left_ee, hl) <= cfg.r_grasp * 0.6
                              ? noisy(hl, s.left_ee, 1.0, rng, cfg.sigma_a, cfg)
                              : noisy(hl, s.left_ee, -1.0, rng, cfg.sigma_a, cfg));
    ArmAction ar = s.bar_right_held
                       ? noisy(hr, s.right_ee, 1.0, rng, cfg.sigma_a, cfg)
                       : (dist(s.right_ee, hr) <= cfg.r_grasp * 0.6
                              ? noisy(hr, s.right_ee, 1.0, rng, cfg.sigma_a, cfg)
                              : noisy(hr, s.right_ee, -1.0, rng, cfg.sigma_a, cfg));
    return {al, ar};
  }

  double eta = rng.normal(0.0, cfg.sigma_couple);
  bool lifted = std::abs(bar->pos.y - s.bar_home_y) > 0.02 ||
                dist(bar->pos, dest) <= 0.1;
  bool at_dest = dist(bar->pos, dest) <= 0.03;

  ArmAction al, ar;
  if (at_dest && place_and_release) {
    al = noisy(dl, s.left_ee, -1.0, rng, cfg.sigma_a, cfg);
    ar = noisy(dr, s.right_ee, -1.0, rng, cfg.sigma_a, cfg);
    return {al, ar};  // let go together; no coupling needed on release
  }
  if (!lifted) {
    // wait at grasp; a shared coin decides when the pair starts moving
    bool go = rng.bernoulli(cfg.p_go);
    Vec2 wl = go ? dl : s.left_ee;
    Vec2 wr = go ? dr : s.right_ee;
    al = noisy(wl, s.left_ee, 1.0, rng, cfg.sigma_a, cfg);
    ar = noisy(wr, s.right_ee, 1.0, rng, cfg.sigma_a, cfg);
  } else {
    al = noisy(dl, s.left_ee, 1.0, rng, cfg.sigma_a, cfg);
    ar = noisy(dr, s.right_ee, 1.0, rng, cfg.sigma_a, cfg);
  }
  couple_vertical(al, ar, s, eta, cfg);
  return {al, ar};
}

std::pair<ArmAction, ArmAction> dual_shake(const WorldState& s, Rng& rng,
                                           const SimConfig& cfg) {
  const ObjectState* bar = s.find(ObjId::Bar);
  Vec2 hl = bar_handle(bar->pos, Arm::Left, cfg);
  Vec2 hr = bar_handle(bar->pos, Arm::Right, cfg);
  bool both = s.bar_left_held && s.bar_right_held;
  if (!both) {
    auto approach = [&](const Vec2& h, const Vec2& ee, bool held) {
      if (held) return noisy(h, ee, 1.0, rng, cfg.sigma_a, cfg);
      return dist(ee, h) <= cfg.r_grasp * 0.6
                 ? noisy(h, ee, 1.0, rng, cfg.sigma_a, cfg)
                 : noisy(h, ee, -1.0, rng, cfg.sigma_a, cfg);
    };
    return {approach(hl, s.left_ee, s.bar_left_held),
            approach(hr, s.right_ee, s.bar_right_held)};
  }
  double eta = rng.normal(0.0, cfg.sigma_couple);
  double lo = s.bar_home_y;
  double hi = s.bar_home_y + cfg.shake_amp;
  int dir = s.trk.shake_dir;
  if (dir == 0) dir = 1;
  if (bar->pos.y >= hi - 0.02) dir = -1;
  if (bar->pos.y <= lo + 0.02 && s.trk.shake_dir != 0) dir = 1;
  bool done = s.trk.shake_flips >= cfg.shake_flips;
  double wy = done ? bar->pos.y : (dir > 0 ? hi + 0.05 : lo - 0.05);
  ArmAction al = noisy({hl.x, wy}, s.left_ee, 1.0, rng, cfg.sigma_a, cfg);
  ArmAction ar = noisy({hr.x, wy}, s.right_ee, 1.0, rng, cfg.sigma_a, cfg);
  couple_vertical(al, ar, s, eta, cfg);
  return {al, ar};
}

std::pair<ArmAction, ArmAction> dual_align(const WorldState& s, Rng& rng,
                                           const SimConfig& cfg) {
  const ObjectState* a = s.find(ObjId::PickA);
  const ObjectState* b = s.find(ObjId::PickB);
  double eta = rng.normal(0.0, cfg.sigma_couple);
  Vec2 pre_l = kAlignLeft + Vec2{0.0, 0.15};
  Vec2 pre_r = kAlignRight + Vec2{0.0, 0.15};

  // staging gates on state only; one go coin drives both descents
  bool both_staged =
      a->held_by == Arm::Left && b->held_by == Arm::Right &&
      dist(s.left_ee, pre_l) <= 0.04 && dist(s.right_ee, pre_r) <= 0.04;
  bool go = both_staged && rng.bernoulli(cfg.p_go);

  auto side = [&](Arm arm, const ObjectState* blk, Vec2 anchor, Vec2 pre,
                  int arrival) -> ArmAction {
    const Vec2& ee = (arm == Arm::Left) ? s.left_ee : s.right_ee;
    Vec2 home = (arm == Arm::Left) ? kHomeLeft : kHomeRight;
    if (arrival >= 0) return noisy(home, ee, -1.0, rng, cfg.sigma_a, cfg);
    bool holding = blk->held_by == arm;
    if (!holding) {
      if (dist(ee, blk->pos) <= cfg.r_grasp * 0.6)
        return noisy(blk->pos, ee, 1.0, rng, cfg.sigma_a, cfg);
      return noisy(blk->pos, ee, -1.0, rng, cfg.sigma_a, cfg);
    }
    bool lowering = ee.y < pre.y - 0.06;
    if (lowering) {
      if (dist(ee, anchor) <= 0.02)
        return noisy(anchor, ee, -1.0, rng, cfg.sigma_a, cfg);
      return noisy(anchor, ee, 1.0, rng, cfg.sigma_a, cfg);
    }
    if (go) return noisy(anchor, ee, 1.0, rng, cfg.sigma_a, cfg);
    return noisy(pre, ee, 1.0, rng, cfg.sigma_a, cfg);
  };

  ArmAction al = side(Arm::Left, a, kAlignLeft, pre_l, s.trk.align_arrival[0]);
  ArmAction ar = side(Arm::Right, b, kAlignRight, pre_r, s.trk.align_arrival[1]);
  if (a->held_by == Arm::Left && b->held_by == Arm::Right)
    couple_vertical(al, ar, s, eta, cfg);
  return {al, ar};
}

std::pair<ArmAction, ArmAction> dual_drawer(const WorldState& s, Rng& rng,
                                            const SimConfig& cfg) {
  const ObjectState* d = s.find(ObjId::Drawer);
  Vec2 hl = drawer_handle(d->pos, Arm::Left);
  Vec2 hr = drawer_handle(d->pos, Arm::Right);
  double eta = rng.normal(0.0, cfg.sigma_couple);
  ArmAction al = noisy(hl, s.left_ee, -1.0, rng, cfg.sigma_a, cfg);
  ArmAction ar = noisy(hr, s.right_ee, -1.0, rng, cfg.sigma_a, cfg);
  bool both_near = dist(s.left_ee, hl) <= 2 * cfg.contact_r &&
                   dist(s.right_ee, hr) <= 2 * cfg.contact_r;
  if (both_near) couple_vertical(al, ar, s, eta, cfg);
  return {al, ar};
}

ArmAction single_bar_lift(const WorldState& s, Arm arm, Rng& rng,
                          const SimConfig& cfg) {
  const ObjectState* bar = s.find(ObjId::Bar);
  Vec2 h = bar_handle(bar->pos, arm, cfg);
  Vec2 dest_h = bar_handle({0.0, cfg.lift_target_y}, arm, cfg);
  const Vec2& ee = (arm == Arm::Left) ? s.left_ee : s.right_ee;
  bool held = (arm == Arm::Left) ? s.bar_left_held : s.bar_right_held;
  if (held) return noisy(dest_h, ee, 1.0, rng, cfg.sigma_a, cfg);
  if (dist(ee, h) <= cfg.r_grasp * 0.6)
    return noisy(h, ee, 1.0, rng, cfg.sigma_a, cfg);
  return noisy(h, ee, -1.0, rng, cfg.sigma_a, cfg);
}

Vec2 drawer_interior(const WorldState& s) { return s.find(ObjId::Drawer)->pos; }

}  // namespace

std::pair<ArmAction, ArmAction> expert_pair(const WorldState& state,
                                            SkillId dual_skill, Rng& rng,
                                            const TaskSpec& task,
                                            const SimConfig& cfg) {
  (void)task;
  std::pair<ArmAction, ArmAction> out;
  if (state.scene == SceneKind::Collect) {
    // both dual stages of the drawer task share one motion program
    out = dual_drawer(state, rng, cfg);
  } else if (state.scene == SceneKind::Tubes) {
    out = dual_bar_lift(state, rng, cfg, /*place_and_release=*/true);
  } else if (state.scene == SceneKind::ContinualBar) {
    out = dual_bar_lift(state, rng, cfg, /*place_and_release=*/false);
  } else {
    switch (dual_skill) {
      case SkillId::D1: out = dual_bar_lift(state, rng, cfg, false); break;
      case SkillId::D2: out = dual_shake(state, rng, cfg); break;
      case SkillId::D3: out = dual_align(state, rng, cfg); break;
      default:
        throw std::invalid_argument("expert_pair: not a dual skill: " +
                                    skill_name(dual_skill));
    }
  }
  clamp_action(out.first);
  clamp_action(out.second);
  return out;
}

namespace {

ArmAction single_expert_action(const WorldState& state, SkillId skill, Arm arm,
                               Rng& rng, const TaskSpec& task,
                               const SimConfig& cfg) {
  (void)task;
  (void)arm;
  switch (state.scene) {
    case SceneKind::Pair: {
      if (is_left_skill(skill)) {
        int k = static_cast<int>(skill);
        return pick_place(state, Arm::Left, static_cast<ObjId>(k), kLeftDest,
                          state.trk.placed[k], rng, cfg);
      }
      return right_pattern(state, skill, rng, cfg);
    }
    case SceneKind::Tubes: {
      const ObjectState* bar = state.find(ObjId::Bar);
      if (skill == SkillId::L1)
        return pick_place(state, Arm::Left, ObjId::PickA, tube_slot(bar->pos, 0),
                          state.trk.tube_loaded[0], rng, cfg);
      if (skill == SkillId::R1)
        return pick_place(state, Arm::Right, ObjId::PickB, tube_slot(bar->pos, 1),
                          state.trk.tube_loaded[1], rng, cfg);
      throw std::invalid_argument("skill " + skill_name(skill) +
                                  " undefined in the tubes scene");
    }
    case SceneKind::Collect: {
      if (skill == SkillId::L1)
        return pick_place(state, Arm::Left, ObjId::PickA, drawer_interior(state),
                          state.trk.item_loaded[0], rng, cfg);
      if (skill == SkillId::L2)
        return pick_place(state, Arm::Left, ObjId::PickB, drawer_interior(state),
                          state.trk.item_loaded[1], rng, cfg);
      if (skill == SkillId::R1) {
        const ObjectState* d = state.find(ObjId::Drawer);
        Vec2 handoff{d->pos.x - (state.trk.drawer_open ? cfg.drawer_stroke : 0.0),
                     kHandoffY};
        return pick_place(state, Arm::Right, ObjId::PickB, handoff,
                          state.trk.relocated && !state.find(ObjId::PickB)->held_by,
                          rng, cfg);
      }
      throw std::invalid_argument("skill " + skill_name(skill) +
                                  " undefined in the collect scene");
    }
    case SceneKind::ContinualBar: {
      if (skill == SkillId::L1) return single_bar_lift(state, Arm::Left, rng, cfg);
      if (skill == SkillId::R1) return single_bar_lift(state, Arm::Right, rng, cfg);
      throw std::invalid_argument("skill " + skill_name(skill) +
                                  " undefined in the bar scene");
    }
  }
  return idle_action(rng, cfg);
}

}  // namespace

ArmAction expert_action(const WorldState& state, SkillId skill, Arm arm,
                        Rng& rng, const TaskSpec& task, const SimConfig& cfg) {
  if (skill == SkillId::Idle) return idle_action(rng, cfg);
  if (is_dual_skill(skill)) {
    auto [l, r] = expert_pair(state, skill, rng, task, cfg);
    return arm == Arm::Left ? l : r;
  }
  if (is_left_skill(skill) && arm != Arm::Left)
    throw std::invalid_argument("skill " + skill_name(skill) + " is left-arm only");
  if (is_right_skill(skill) && arm != Arm::Right)
    throw std::invalid_argument("skill " + skill_name(skill) + " is right-arm only");
  ArmAction a = single_expert_action(state, skill, arm, rng, task, cfg);
  clamp_action(a);
  return a;
}

// ---------------------------------------------------------------------------
// stage logic

Stage current_stage(const WorldState& s, const TaskSpec& task,
                    const SimConfig& cfg) {
  Stage st;
  switch (task.kind) {
    case TaskKind::PairSkills: {
      if (task.scene == SceneKind::ContinualBar && task.left != SkillId::Idle &&
          task.right != SkillId::Idle) {
        st.left = task.left;
        st.right = task.right;
        st.dual = true;
        st.dual_skill = SkillId::D1;
        return st;
      }
      st.left = task.left;
      st.right = task.right;
      return st;
    }
    case TaskKind::DualSkill: {
      st.left = task.dual;
      st.right = task.dual;
      st.dual = true;
      st.dual_skill = task.dual;
      return st;
    }
    case TaskKind::LongHorizon: {
      const Trackers& t = s.trk;
      if (task.long_name == "tubes") {
        bool need1 = !t.tube_loaded[0];
        bool need2 = !t.tube_loaded[1];
        if (task.stage_slice == "left") need2 = false;
        if (task.stage_slice == "right") need1 = false;
        if (task.stage_slice == "rack") need1 = need2 = false;
        if (need1) st.left = SkillId::L1;
        if (need2) st.right = SkillId::R1;
        if (!need1 && !need2) {
          if (task.stage_slice == "left" || task.stage_slice == "right")
            return st;  // slice finished; idle out
          st.left = st.right = SkillId::D1;
          st.dual = true;
          st.dual_skill = SkillId::D1;
        }
        return st;
      }
      // collect
      const std::string& sl = task.stage_slice;
      bool all_loaded = t.item_loaded[0] && t.item_loaded[1];
      if (!t.drawer_open) {
        if ((sl.empty() && !(all_loaded && t.drawer_closed_after_load)) ||
            sl == "open" || sl == "close") {
          if (sl == "close" && t.drawer_closed_after_load) return st;
          if (sl == "open" && t.drawer_opened_once) return st;
          st.left = st.right = SkillId::D1;
          st.dual = true;
          st.dual_skill = SkillId::D1;
        }
        return st;
      }
      // drawer open
      if (all_loaded && (sl.empty() || sl == "close")) {
        st.left = st.right = SkillId::D1;
        st.dual = true;
        st.dual_skill = SkillId::D1;
        return st;
      }
      const ObjectState* b = s.find(ObjId::PickB);
      const ObjectState* d = s.find(ObjId::Drawer);
      bool b_behind = !t.item_loaded[1] &&
                      (b->held_by == Arm::Right ||
                       (!b->held_by && b->pos.x > d->pos.x + 0.14));
      Vec2 handoff{d->pos.x - cfg.drawer_stroke, kHandoffY};
      bool b_at_handoff = !t.item_loaded[1] &&
                          (b->held_by == Arm::Left ||
                           (!b->held_by && dist(b->pos, handoff) <= 0.09));
      if (sl.empty() || sl == "load_a") {
        if (!t.item_loaded[0]) st.left = SkillId::L1;
      }
      if ((sl.empty() || sl == "load_b") && st.left == SkillId::Idle &&
          t.item_loaded[0] && b_at_handoff)
        st.left = SkillId::L2;
      if (sl.empty() || sl == "relocate") {
        if (!t.relocated && b_behind) st.right = SkillId::R1;
        else if (b_behind && b->held_by == Arm::Right) st.right = SkillId::R1;
      }
      return st;
    }
  }
  return st;
}

std::pair<ArmAction, ArmAction> expert_step(const WorldState& state,
                                            const TaskSpec& task, Rng& rng,
                                            const SimConfig& cfg) {
  Stage st = current_stage(state, task, cfg);
  if (st.dual) return expert_pair(state, st.dual_skill, rng, task, cfg);
  ArmAction l = st.left == SkillId::Idle
                    ? idle_action(rng, cfg)
                    : expert_action(state, st.left, Arm::Left, rng, task, cfg);
  ArmAction r = st.right == SkillId::Idle
                    ? idle_action(rng, cfg)
                    : expert_action(state, st.right, Arm::Right, rng, task, cfg);
  return {l, r};
}

}  // namespace skilllab::world
