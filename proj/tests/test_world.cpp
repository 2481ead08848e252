#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "skilllab/evalsuite.hpp"
#include "skilllab/world.hpp"

using namespace skilllab;
using namespace skilllab::world;

namespace {

SimConfig cfg;  // defaults

bool states_equal(const WorldState& a, const WorldState& b) {
  if (a.left_ee.x != b.left_ee.x || a.left_ee.y != b.left_ee.y) return false;
  if (a.right_ee.x != b.right_ee.x || a.right_ee.y != b.right_ee.y) return false;
  if (a.objects.size() != b.objects.size()) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    if (a.objects[i].pos.x != b.objects[i].pos.x) return false;
    if (a.objects[i].pos.y != b.objects[i].pos.y) return false;
  }
  return a.step_index == b.step_index && a.bar_dropped == b.bar_dropped;
}

}  // namespace

TEST_CASE("reset is deterministic") {
  TaskSpec task = parse_task("pair:L1,R2", cfg);
  WorldState a = reset(task, 42, cfg);
  WorldState b = reset(task, 42, cfg);
  CHECK(states_equal(a, b));
  WorldState c = reset(task, 43, cfg);
  CHECK(!states_equal(a, c));
}

TEST_CASE("tubes scene holds two rack slots and one bar") {
  TaskSpec task = parse_task("tubes", cfg);
  WorldState s = reset(task, 5, cfg);
  int slots = 0, bars = 0;
  for (const auto& o : s.objects) {
    if (o.kind == ObjKind::RackSlot) ++slots;
    if (o.kind == ObjKind::Bar) ++bars;
  }
  CHECK(slots == 2);
  CHECK(bars == 1);
}

TEST_CASE("pair-task pickables sample inside the left zone over 1000 seeds") {
  TaskSpec task = parse_task("pair:L1,R2", cfg);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    WorldState s = reset(task, seed, cfg);
    for (const auto& o : s.objects) {
      if (o.kind == ObjKind::Pickable) {
        CHECK(o.pos.x <= -0.2);
        CHECK(o.pos.x >= -0.9);
      }
      if (o.kind == ObjKind::Target) {
        CHECK(o.pos.x >= 0.2);
        CHECK(o.pos.x <= 0.9);
      }
    }
  }
}

TEST_CASE("zero actions keep positions, advance the step index") {
  TaskSpec task = parse_task("pair:L1,IDLE", cfg);
  WorldState s = reset(task, 1, cfg);
  ArmAction zero{0.0f, 0.0f, -1.0f};
  WorldState s2 = step(s, zero, zero, cfg);
  CHECK(s2.left_ee.x == s.left_ee.x);
  CHECK(s2.left_ee.y == s.left_ee.y);
  CHECK(s2.right_ee.x == s.right_ee.x);
  CHECK(s2.step_index == s.step_index + 1);
}

TEST_CASE("velocity clamps at v_max") {
  TaskSpec task = parse_task("pair:L1,IDLE", cfg);
  WorldState s = reset(task, 1, cfg);
  s.left_ee = {0.0, 0.5};
  ArmAction fast{2.0f, 0.0f, -1.0f};
  ArmAction zero{0.0f, 0.0f, -1.0f};
  WorldState s2 = step(s, fast, zero, cfg);
  CHECK(s2.left_ee.x == doctest::Approx(cfg.v_max).epsilon(1e-12));
}

TEST_CASE("bar drops when tilt exceeds the threshold with both handles held") {
  TaskSpec task = parse_task("dual:D1", cfg);
  WorldState s = reset(task, 1, cfg);
  ObjectState* bar = s.find(ObjId::Bar);
  bar->pos = {0.0, 0.56};
  s.left_ee = {-cfg.bar_halfwidth, 0.5};
  s.right_ee = {cfg.bar_halfwidth, 0.62};
  s.bar_left_held = true;
  s.bar_right_held = true;
  ArmAction hold{0.0f, 0.0f, 1.0f};
  WorldState s2 = step(s, hold, hold, cfg);
  CHECK(s2.bar_dropped);
  CHECK(!s2.bar_left_held);
  CHECK(!s2.bar_right_held);
  // monotone: once dropped, stays dropped
  WorldState s3 = step(s2, hold, hold, cfg);
  CHECK(s3.bar_dropped);
}

TEST_CASE("bar survives tilt within the threshold") {
  TaskSpec task = parse_task("dual:D1", cfg);
  WorldState s = reset(task, 1, cfg);
  s.left_ee = {-cfg.bar_halfwidth, 0.5};
  s.right_ee = {cfg.bar_halfwidth, 0.58};
  s.bar_left_held = true;
  s.bar_right_held = true;
  ArmAction hold{0.0f, 0.0f, 1.0f};
  WorldState s2 = step(s, hold, hold, cfg);
  CHECK(!s2.bar_dropped);
}

TEST_CASE("observe: layout, normalization, fixed length") {
  TaskSpec task = parse_task("pair:L1,R2", cfg);
  WorldState s = reset(task, 3, cfg);
  std::vector<float> v = observe(s, task);
  CHECK(static_cast<int>(v.size()) == kObsDim);
  CHECK(v[0] == doctest::Approx(s.left_ee.x));
  CHECK(v[1] == doctest::Approx(2.0 * s.left_ee.y - 1.0));
  CHECK(v[2] == doctest::Approx(s.right_ee.x));

  // y = 1 maps to 1, y = 0 maps to -1
  s.left_ee = {0.0, 1.0};
  s.right_ee = {0.0, 0.0};
  std::vector<float> v2 = observe(s, task);
  CHECK(v2[1] == doctest::Approx(1.0));
  CHECK(v2[3] == doctest::Approx(-1.0));

  // two states differing only in left_ee differ only in slots 0-1
  WorldState s3 = reset(task, 3, cfg);
  WorldState s4 = s3;
  s4.left_ee.x += 0.05;
  std::vector<float> a = observe(s3, task);
  std::vector<float> b = observe(s4, task);
  CHECK(a[0] != b[0]);
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // absent objects are zero-padded: the pair scene has no bar/slots/drawer
  int base = 6 + 2 * static_cast<int>(ObjId::Bar);
  CHECK(a[base] == 0.0f);
  CHECK(a[base + 1] == 0.0f);
  // tubes scene fills those slots; lengths stay equal
  TaskSpec tubes = parse_task("tubes", cfg);
  std::vector<float> tv = observe(reset(tubes, 3, cfg), tubes);
  CHECK(tv.size() == a.size());
}

TEST_CASE("expert proportional law and idle conventions") {
  SimConfig quiet = cfg;
  quiet.sigma_a = 0.0;
  quiet.sigma_idle = 0.0;
  TaskSpec task = parse_task("pair:L1,IDLE", quiet);
  WorldState s = reset(task, 7, quiet);
  // place the arm and the object so the waypoint term is the whole action
  s.left_ee = {-0.5, 0.2};
  ObjectState* obj = s.find(ObjId::PickA);
  obj->pos = {-0.3, 0.2};
  Rng rng(1);
  ArmAction a = expert_action(s, SkillId::L1, Arm::Left, rng, task, quiet);
  CHECK(a.dx == doctest::Approx(quiet.k_p * 0.2).epsilon(1e-6));
  CHECK(a.dy == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(a.grip < 0);  // still approaching: gripper open

  ArmAction idle = expert_action(s, SkillId::Idle, Arm::Right, rng, task, quiet);
  CHECK(idle.dx == 0.0f);
  CHECK(idle.dy == 0.0f);
  CHECK(idle.grip == -1.0f);
}

TEST_CASE("dual expert includes the vertical correction term") {
  SimConfig quiet = cfg;
  quiet.sigma_a = 0.0;
  quiet.sigma_couple = 0.0;
  quiet.p_go = 0.0;  // hold phase: waypoint is the current position
  TaskSpec task = parse_task("dual:D1", quiet);
  WorldState s = reset(task, 7, quiet);
  ObjectState* bar = s.find(ObjId::Bar);
  bar->pos = {0.0, s.bar_home_y};  // not lifted: hold phase
  s.left_ee = {-quiet.bar_halfwidth, s.bar_home_y};
  s.right_ee = {quiet.bar_halfwidth, s.bar_home_y + 0.05};
  s.bar_left_held = true;
  s.bar_right_held = true;
  Rng rng(1);
  auto [al, ar] = expert_pair(s, SkillId::D1, rng, task, quiet);
  // y_other - y_self = +0.05 for the left arm, c = 2 -> dy includes +0.10
  CHECK(al.dy == doctest::Approx(quiet.c_couple * 0.05).epsilon(1e-6));
  CHECK(ar.dy == doctest::Approx(-quiet.c_couple * 0.05).epsilon(1e-6));
}

TEST_CASE("skill/arm mismatch throws") {
  TaskSpec task = parse_task("pair:L1,R2", cfg);
  WorldState s = reset(task, 7, cfg);
  Rng rng(1);
  CHECK_THROWS_AS(expert_action(s, SkillId::L1, Arm::Right, rng, task, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(expert_action(s, SkillId::R2, Arm::Left, rng, task, cfg),
                  std::invalid_argument);
}

TEST_CASE("score: reset state scores zero everywhere") {
  for (const char* name : {"pair:L1,R2", "dual:D1", "dual:D3", "tubes", "collect",
                           "bar:dual"}) {
    TaskSpec task = parse_task(name, cfg);
    WorldState s = reset(task, 11, cfg);
    CHECK(score(s, task) == 0);
  }
}

TEST_CASE("score: tubes rubric gives 2 of 3 with both tubes racked") {
  TaskSpec task = parse_task("tubes", cfg);
  WorldState s = reset(task, 11, cfg);
  s.trk.tube_loaded = {true, true};
  CHECK(score(s, task) == 2);
  CHECK(max_score(task) == 3);
  s.trk.rack_placed = true;
  CHECK(score(s, task) == 3);
}

TEST_CASE("score: collect rubric maxes at 5") {
  TaskSpec task = parse_task("collect", cfg);
  WorldState s = reset(task, 11, cfg);
  s.trk.drawer_opened_once = true;
  s.trk.relocated = true;
  s.trk.item_loaded = {true, true};
  s.trk.drawer_closed_after_load = true;
  CHECK(score(s, task) == 5);
  CHECK(max_score(task) == 5);
}

TEST_CASE("determinism: identical task, seed, and actions give identical states") {
  TaskSpec task = parse_task("tubes", cfg);
  WorldState a = reset(task, 21, cfg);
  WorldState b = reset(task, 21, cfg);
  Rng ra(5), rb(5);
  for (int t = 0; t < 50; ++t) {
    auto [al, ar] = expert_step(a, task, ra, cfg);
    auto [bl, br] = expert_step(b, task, rb, cfg);
    CHECK(al.dx == bl.dx);
    CHECK(ar.dy == br.dy);
    a = step(a, al, ar, cfg);
    b = step(b, bl, br, cfg);
  }
  CHECK(states_equal(a, b));
}

TEST_CASE("expert competence: every skill succeeds in >= 95% of 100 episodes") {
  RunConfig rc;
  const char* tasks[] = {"pair:L1,IDLE", "pair:L2,IDLE", "pair:L3,IDLE",
                         "pair:IDLE,R1", "pair:IDLE,R2", "pair:IDLE,R3",
                         "dual:D1",      "dual:D2",      "dual:D3",
                         "tubes:left",   "tubes:right",  "tubes:rack",
                         "collect:open", "collect:load_a", "collect:relocate",
                         "collect:load_b", "collect:close", "bar:left",
                         "bar:right",    "bar:dual",     "tubes", "collect"};
  for (const char* name : tasks) {
    TaskSpec task = parse_task(name, cfg);
    int horizon = task_horizon(task, cfg);
    int ok = 0;
    for (std::uint64_t ep = 0; ep < 100; ++ep) {
      WorldState s = reset(task, Rng::mix(1000, ep), cfg);
      Rng rng(Rng::mix(2000, ep));
      for (int t = 0; t < horizon; ++t) {
        auto [al, ar] = expert_step(s, task, rng, cfg);
        s = step(s, al, ar, cfg);
        if (terminal(s, task)) break;
      }
      if (task_done(s, task)) ++ok;
    }
    INFO("task ", name, " ok=", ok);
    CHECK(ok >= 95);
  }
}

TEST_CASE("coupling signature: lift-bar MI well above the idle-pair floor") {
  // matched hold-phase state (both handles grasped, lift not started): the
  // shared go coin and the shared vertical noise are both visible here
  TaskSpec dual = parse_task("dual:D1", cfg);
  WorldState s = reset(dual, 3, cfg);
  ObjectState* bar = s.find(ObjId::Bar);
  bar->pos = {0.0, s.bar_home_y};
  s.left_ee = {-cfg.bar_halfwidth, bar->pos.y};
  s.right_ee = {cfg.bar_halfwidth, bar->pos.y};
  s.bar_left_held = true;
  s.bar_right_held = true;

  const int N = 20000;
  std::vector<float> dl_raw(N), dr_raw(N), il_raw(N), ir_raw(N);
  TaskSpec idle_task = parse_task("pair:IDLE,R1", cfg);
  WorldState idle_state = reset(idle_task, 3, cfg);
  for (int i = 0; i < N; ++i) {
    Rng rng(Rng::mix(77, static_cast<std::uint64_t>(i)));
    auto [al, ar] = expert_pair(s, SkillId::D1, rng, dual, cfg);
    dl_raw[i] = al.dy;
    dr_raw[i] = ar.dy;
    Rng rng2(Rng::mix(78, static_cast<std::uint64_t>(i)));
    ArmAction x = expert_action(idle_state, SkillId::Idle, Arm::Left, rng2,
                                idle_task, cfg);
    ArmAction y = expert_action(idle_state, SkillId::Idle, Arm::Right, rng2,
                                idle_task, cfg);
    il_raw[i] = x.dy;
    ir_raw[i] = y.dy;
  }
  // equal-width bins over each channel's empirical range
  auto discretize = [](const std::vector<float>& v) {
    float lo = *std::min_element(v.begin(), v.end());
    float hi = *std::max_element(v.begin(), v.end());
    float w = (hi - lo) > 1e-12f ? (hi - lo) : 1.0f;
    std::vector<int> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      out[i] = std::min(8, static_cast<int>((v[i] - lo) / w * 9.0f));
    return out;
  };
  double mi_dual = evalsuite::plug_in_mi(discretize(dl_raw), discretize(dr_raw));
  double mi_idle = evalsuite::plug_in_mi(discretize(il_raw), discretize(ir_raw));
  INFO("dual MI ", mi_dual, " idle MI ", mi_idle);
  CHECK(mi_dual >= 5.0 * std::max(mi_idle, 1e-4));
}

TEST_CASE("independence signature: concurrent single-arm experts stay at the floor") {
  TaskSpec task = parse_task("pair:L1,R2", cfg);
  WorldState s = reset(task, 9, cfg);
  const int N = 8000;
  std::vector<int> cl(N), cr(N);
  for (int i = 0; i < N; ++i) {
    Rng rng(Rng::mix(99, static_cast<std::uint64_t>(i)));
    ArmAction al = expert_action(s, SkillId::L1, Arm::Left, rng, task, cfg);
    ArmAction ar = expert_action(s, SkillId::R2, Arm::Right, rng, task, cfg);
    auto b = [](float v) {
      double x = (std::clamp(v, -1.0f, 1.0f) + 1.0) / 2.0;
      return static_cast<int>(std::min(x * 9.0, 8.999));
    };
    cl[i] = b(al.dy);
    cr[i] = b(ar.dy);
  }
  double mi = evalsuite::plug_in_mi(cl, cr);
  // bias floor from shuffled pairings
  Rng shuffle(123);
  std::vector<double> floors;
  for (int k = 0; k < 10; ++k) {
    std::vector<int> perm(cr);
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[shuffle.below(i)]);
    floors.push_back(evalsuite::plug_in_mi(cl, perm));
  }
  double floor_mean = 0.0;
  for (double f : floors) floor_mean += f;
  floor_mean /= floors.size();
  double var = 0.0;
  for (double f : floors) var += (f - floor_mean) * (f - floor_mean);
  double se = std::sqrt(var / (floors.size() - 1) / floors.size());
  INFO("mi ", mi, " floor ", floor_mean, " se ", se);
  CHECK(mi <= floor_mean + 2.0 * se + 1e-6);
}

TEST_CASE("held objects track the holding end-effector exactly") {
  TaskSpec task = parse_task("pair:L1,IDLE", cfg);
  WorldState s = reset(task, 13, cfg);
  ObjectState* obj = s.find(ObjId::PickA);
  s.left_ee = obj->pos;
  ArmAction grab{0.0f, 0.0f, 1.0f};
  ArmAction idle{0.0f, 0.0f, -1.0f};
  s = step(s, grab, idle, cfg);
  REQUIRE(s.find(ObjId::PickA)->held_by == Arm::Left);
  ArmAction move{0.5f, 0.3f, 1.0f};
  s = step(s, move, idle, cfg);
  CHECK(s.find(ObjId::PickA)->pos.x == s.left_ee.x);
  CHECK(s.find(ObjId::PickA)->pos.y == s.left_ee.y);
  // release leaves the object in place
  s = step(s, idle, idle, cfg);
  CHECK(!s.find(ObjId::PickA)->held_by.has_value());
}
