#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "skilllab/sampler.hpp"

using namespace skilllab;
using namespace skilllab::sampler;
namespace w = skilllab::world;
namespace p = skilllab::policy;
namespace dc = skilllab::diffcore;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.model.d_hidden = 32;
  cfg.model.d_latent = 16;
  cfg.model.d_embed = 8;
  cfg.model.n_heads = 2;
  cfg.model.attn_tokens = 2;
  return cfg;
}

p::PolicyModel zero_model(p::Variant v, const RunConfig& cfg) {
  p::PolicyModel m = p::make_model(v, cfg.model, 1);
  for (auto& [_, e] : m.params.entries())
    std::fill(e.value.values.begin(), e.value.values.end(), 0.0f);
  return m;
}

std::vector<float> reference_noise(std::uint64_t seed, int n) {
  Rng rng(Rng::mix(seed, 0x501ull));
  std::vector<float> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = static_cast<float>(rng.normal());
  return out;
}

}  // namespace

TEST_CASE("zero velocity field returns the clamped initial noise") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = zero_model(p::Variant::Shared, cfg);
  w::TaskSpec task = w::parse_task("pair:L1,IDLE", cfg.world);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), 0.2f);
  Rng rng(Rng::mix(77, 0x501ull));  // mirror of sample_actions' stream
  (void)rng;
  Rng call_rng(42);
  SampleOut s = sample_actions(m, obs, task, 10, call_rng, cfg);
  Rng expect_rng(42);
  float e0 = static_cast<float>(expect_rng.normal());
  float e1 = static_cast<float>(expect_rng.normal());
  float e2 = static_cast<float>(expect_rng.normal());
  auto clampf = [](float v) { return std::clamp(v, -1.0f, 1.0f); };
  CHECK(s.a_left.dx == doctest::Approx(clampf(e0)).epsilon(1e-6));
  CHECK(s.a_left.dy == doctest::Approx(clampf(e1)).epsilon(1e-6));
  CHECK(s.a_left.grip == doctest::Approx(clampf(e2)).epsilon(1e-6));
}

TEST_CASE("constant velocity field: Euler integration is exact, action = eps + c") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = zero_model(p::Variant::Shared, cfg);
  // set the output bias: v = c per component
  for (const char* nm : {"expert_l.out.b", "expert_r.out.b"}) {
    auto& e = m.params.at(nm);
    e.value.values = {0.25f, -0.125f, 0.5f};
  }
  w::TaskSpec task = w::parse_task("pair:L1,IDLE", cfg.world);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), 0.1f);
  Rng call_rng(9);
  SampleOut s = sample_actions(m, obs, task, 10, call_rng, cfg);
  Rng expect_rng(9);
  float e[6];
  for (int i = 0; i < 6; ++i) e[i] = static_cast<float>(expect_rng.normal());
  auto clampf = [](float v) { return std::clamp(v, -1.0f, 1.0f); };
  CHECK(s.a_left.dx == doctest::Approx(clampf(e[0] + 0.25f)).epsilon(1e-5));
  CHECK(s.a_left.dy == doctest::Approx(clampf(e[1] - 0.125f)).epsilon(1e-5));
  CHECK(s.a_left.grip == doctest::Approx(clampf(e[2] + 0.5f)).epsilon(1e-5));
  CHECK(s.a_right.dx == doctest::Approx(clampf(e[3] + 0.25f)).epsilon(1e-5));
}

TEST_CASE("sampling is deterministic given model, obs, and seed") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = p::make_model(p::Variant::Twin, cfg.model, 5);
  w::TaskSpec task = w::parse_task("pair:L2,R3", cfg.world);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), -0.1f);
  Rng r1(31), r2(31);
  SampleOut a = sample_actions(m, obs, task, 10, r1, cfg);
  SampleOut b = sample_actions(m, obs, task, 10, r2, cfg);
  CHECK(a.a_left.dx == b.a_left.dx);
  CHECK(a.a_right.grip == b.a_right.grip);
}

TEST_CASE("gate-zero factorization: left action invariant to right-arm perturbations") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = p::make_model(p::Variant::SkillVla, cfg.model, 6);
  m.selector_trained = true;  // selector untrained but callable
  w::TaskSpec task = w::parse_task("pair:L1,R1", cfg.world);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), 0.05f);

  Rng r1(11);
  SampleOut a = sample_actions(m, obs, task, 10, r1, cfg, GateOverride::ForceOff);

  // perturb everything right-arm-only: its stream, expert, and token table
  Rng noise(99);
  for (auto& [name, e] : m.params.entries()) {
    if (name.rfind("stream_r", 0) == 0 || name.rfind("expert_r", 0) == 0 ||
        name.rfind("embed_r", 0) == 0)
      for (auto& v : e.value.values) v += static_cast<float>(noise.normal());
  }
  Rng r2(11);
  SampleOut b = sample_actions(m, obs, task, 10, r2, cfg, GateOverride::ForceOff);
  CHECK(a.a_left.dx == b.a_left.dx);
  CHECK(a.a_left.dy == b.a_left.dy);
  CHECK(a.a_left.grip == b.a_left.grip);
  // the right action does change under the same perturbation
  CHECK(a.a_right.dx != b.a_right.dx);
}

TEST_CASE("euler consistency: doubling flow steps moves actions only slightly") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = p::make_model(p::Variant::Shared, cfg.model, 8);
  // mildly scaled weights keep the field smooth
  for (auto& [_, e] : m.params.entries())
    for (auto& v : e.value.values) v *= 0.3f;
  w::TaskSpec task = w::parse_task("pair:L1,IDLE", cfg.world);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), 0.0f);
  std::vector<double> deltas;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r1(Rng::mix(100, s)), r2(Rng::mix(100, s));
    SampleOut a10 = sample_actions(m, obs, task, 10, r1, cfg);
    SampleOut a20 = sample_actions(m, obs, task, 20, r2, cfg);
    deltas.push_back(std::abs(a10.a_left.dx - a20.a_left.dx));
    deltas.push_back(std::abs(a10.a_left.dy - a20.a_left.dy));
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[deltas.size() / 2] < 0.05);  // median change
}

TEST_CASE("expert-as-policy wrapper reaches expert-level score through the harness") {
  RunConfig cfg;
  int ok = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rollout r = rollout_expert(w::parse_task("tubes", cfg.world),
                               cfg.world.horizon_long, Rng::mix(500, s), cfg);
    if (r.success) ++ok;
    CHECK(r.gate.yhat.size() == static_cast<std::size_t>(r.steps));
    CHECK(r.gate.alpha.size() == static_cast<std::size_t>(r.steps));
    CHECK(r.final_score == w::score(r.states.back(), r.task));
  }
  CHECK(ok >= 19);
}

TEST_CASE("rollout gate trace matches executed steps and dumps cleanly") {
  RunConfig cfg = tiny_config();
  p::PolicyModel m = p::make_model(p::Variant::Mono, cfg.model, 12);
  w::TaskSpec task = w::parse_task("pair:L1,IDLE", cfg.world);
  Rollout r = rollout(m, task, 40, 3, cfg);
  CHECK(r.steps == 40);  // untrained model should not finish
  CHECK(r.gate.yhat.size() == 40);
  CHECK(r.observations.size() == 40);
  CHECK(r.states.size() == 41);
  std::string dump = rollout_jsonl(r);
  CHECK(dump.find("\"yhat\"") != std::string::npos);
  CHECK(dump.find("\"alpha\"") != std::string::npos);
  CHECK(std::count(dump.begin(), dump.end(), '\n') == 40);
}
