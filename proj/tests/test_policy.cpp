#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "skilllab/policy.hpp"

using namespace skilllab;
using namespace skilllab::policy;
namespace w = skilllab::world;
namespace dc = skilllab::diffcore;
using Ref = dc::Tape::Ref;

namespace {

ModelConfig mc;  // defaults: 128/64/16, 4 heads, 4 tokens

dc::Tensor rand_obs(int b, std::uint64_t seed) {
  Rng rng(seed);
  return dc::randn(rng, {b, w::kObsDim}, 0.5f);
}

}  // namespace

TEST_CASE("encode: stream isolation and shared pathways") {
  PolicyModel skill = make_model(Variant::SkillVla, mc, 1);
  PolicyModel shared = make_model(Variant::Shared, mc, 1);
  dc::Tensor obs = rand_obs(2, 3);

  // SkillVLA: perturbing the right token leaves z_left unchanged
  dc::Tape t1, t2;
  EncodeOut a = encode(t1, skill, t1.input(obs), {0, 1}, {3, 4});
  EncodeOut b = encode(t2, skill, t2.input(obs), {0, 1}, {5, 5});
  CHECK(t1.value(a.z_left).values == t2.value(b.z_left).values);
  CHECK(t1.value(a.z_right).values != t2.value(b.z_right).values);

  // Shared: perturbing the right token changes the single z
  dc::Tape t3, t4;
  EncodeOut c = encode(t3, shared, t3.input(obs), {0, 1}, {3, 4});
  EncodeOut d = encode(t4, shared, t4.input(obs), {0, 1}, {5, 5});
  CHECK(t3.value(c.z_left).values != t4.value(d.z_left).values);

  // declared latent dimension
  CHECK(t1.value(a.z_left).cols() == mc.d_latent);
  CHECK(t3.value(c.z_left).cols() == mc.d_latent);
}

TEST_CASE("gate zero: left velocity ignores right-arm tokens and noise") {
  PolicyModel m = make_model(Variant::SkillVla, mc, 2);
  dc::Tensor obs = rand_obs(3, 5);
  Rng rng(9);
  dc::Tensor a_l = dc::randn(rng, {3, 3}, 1.0f);
  dc::Tensor a_r1 = dc::randn(rng, {3, 3}, 1.0f);
  dc::Tensor a_r2 = dc::randn(rng, {3, 3}, 1.0f);
  dc::Tensor tau = dc::full({3, 1}, 0.4f);

  auto run = [&](const dc::Tensor& ar, int tok_r) {
    dc::Tape t;
    Ref o = t.input(obs);
    EncodeOut z = encode(t, m, o, {0, 0, 0}, {tok_r, tok_r, tok_r});
    VelocityOut v = expert_velocity(t, m, t.input(a_l), t.input(ar),
                                    t.input(tau), z, o, Gate::zero());
    return t.value(v.v_left).values;
  };
  CHECK(run(a_r1, 3) == run(a_r2, 5));  // bit-identical

  // gate one differs whenever the message is nonzero
  dc::Tape t;
  Ref o = t.input(obs);
  EncodeOut z = encode(t, m, o, {0, 0, 0}, {3, 3, 3});
  VelocityOut v_on = expert_velocity(t, m, t.input(a_l), t.input(a_r1),
                                     t.input(tau), z, o, Gate::one());
  dc::Tape t2;
  Ref o2 = t2.input(obs);
  EncodeOut z2 = encode(t2, m, o2, {0, 0, 0}, {3, 3, 3});
  VelocityOut v_off = expert_velocity(t2, m, t2.input(a_l), t2.input(a_r1),
                                      t2.input(tau), z2, o2, Gate::zero());
  CHECK(t.value(v_on.v_left).values != t2.value(v_off.v_left).values);
}

TEST_CASE("stream isolation: right-token-embedding gradient is exactly zero at gate 0") {
  PolicyModel m = make_model(Variant::SkillVla, mc, 7);
  dc::Tensor obs = rand_obs(2, 11);
  Rng rng(13);
  dc::Tensor a_l = dc::randn(rng, {2, 3}, 1.0f);
  dc::Tensor a_r = dc::randn(rng, {2, 3}, 1.0f);
  dc::Tensor tau = dc::full({2, 1}, 0.3f);

  dc::Tape t;
  Ref o = t.input(obs);
  EncodeOut z = encode(t, m, o, {0, 1}, {3, 4});
  VelocityOut v = expert_velocity(t, m, t.input(a_l), t.input(a_r), t.input(tau),
                                  z, o, Gate::zero());
  Ref loss = t.mean_all(v.v_left);
  t.backward(loss);
  for (float g : m.params.at("embed_r").grad.values) CHECK(g == 0.0f);
  // and the left embedding does receive gradient
  bool any = false;
  for (float g : m.params.at("embed_l").grad.values)
    if (g != 0.0f) any = true;
  CHECK(any);
}

TEST_CASE("variant output dimensions") {
  dc::Tensor obs = rand_obs(2, 17);
  Rng rng(19);
  dc::Tensor tau = dc::full({2, 1}, 0.6f);
  dc::Tensor a3 = dc::randn(rng, {2, 3}, 1.0f);
  dc::Tensor a6 = dc::randn(rng, {2, 6}, 1.0f);

  PolicyModel mono = make_model(Variant::Mono, mc, 3);
  dc::Tape t;
  Ref o = t.input(obs);
  EncodeOut z = encode(t, mono, o, {0, 0}, {3, 3});
  VelocityOut v = expert_velocity(t, mono, t.input(a6), -1, t.input(tau), z, o,
                                  Gate::zero());
  CHECK(t.value(v.v_left).cols() == 6);
  CHECK(v.v_right == -1);

  for (Variant var : {Variant::SkillVla, Variant::Shared, Variant::Twin}) {
    PolicyModel m = make_model(var, mc, 3);
    dc::Tape t2;
    Ref o2 = t2.input(obs);
    EncodeOut z2 = encode(t2, m, o2, {0, 0}, {3, 3});
    VelocityOut v2 = expert_velocity(t2, m, t2.input(a3), t2.input(a3),
                                     t2.input(tau), z2, o2, Gate::zero());
    CHECK(t2.value(v2.v_left).cols() == 3);
    CHECK(t2.value(v2.v_right).cols() == 3);
  }
}

TEST_CASE("estimator output lies strictly inside (0,1); sigmoid(0) = 0.5") {
  PolicyModel m = make_model(Variant::SkillVla, mc, 23);
  dc::Tape t;
  Rng rng(29);
  Ref z_h = t.input(dc::randn(rng, {4, mc.d_latent}, 1.0f));
  Ref y = estimator_forward(t, m, z_h);
  for (float v : t.value(y).values) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  dc::Tape t2;
  Ref s = t2.sigmoid(t2.input(dc::zeros({1, 1})));
  CHECK(t2.value(s).values[0] == doctest::Approx(0.5));
}

TEST_CASE("parameter counts match the declared architectures") {
  auto linear_params = [](int in, int out) { return in * out + out; };
  auto ln_params = [](int d) { return 2 * d; };
  int obs = w::kObsDim;
  int instr = 2 * kInstrVocab;
  int dh = mc.d_hidden, dz = mc.d_latent, de = mc.d_embed;
  int dt = dh / mc.attn_tokens;

  long stream = linear_params(obs + de, dh) + linear_params(dh, dh) +
                linear_params(dh, dz);
  long expert_noattn3 = linear_params(3 + 1 + dz + 3, dh) + ln_params(dh) +
                        linear_params(dh, dh) + ln_params(dh) +
                        linear_params(dh, dh) + ln_params(dh) +
                        linear_params(dh, 3);
  long attn = 3 * linear_params(dt, dt) + dt * dt;  // wq wk wv (+bias), wo
  int est_dt = dz / mc.attn_tokens;
  long estimator = est_dt +  // learned query
                   3 * linear_params(est_dt, est_dt) + est_dt * est_dt +
                   linear_params(est_dt, 1);
  long embed = static_cast<long>(kInstrVocab) * de;

  PolicyModel skill = make_model(Variant::SkillVla, mc, 1);
  long expect_skill =
      2 * embed + 2 * stream + 2 * (expert_noattn3 + attn) + estimator;
  CHECK(skill.params.param_count() == expect_skill);
  long sel = linear_params(obs + instr, dh) + linear_params(dh, dh) +
             linear_params(dh, dz) + 2 * linear_params(dz, kHeadClasses);
  CHECK(skill.selector.param_count() == sel);

  PolicyModel twin = make_model(Variant::Twin, mc, 1);
  CHECK(twin.params.param_count() ==
        2 * embed + 2 * stream + 2 * (expert_noattn3 + attn));
  CHECK(twin.selector.param_count() == 0);

  long stream2 = linear_params(obs + 2 * de, dh) + linear_params(dh, dh) +
                 linear_params(dh, dz);
  long expert_mono = linear_params(6 + 1 + dz + 6, dh) + ln_params(dh) +
                     linear_params(dh, dh) + ln_params(dh) +
                     linear_params(dh, dh) + ln_params(dh) +
                     linear_params(dh, 6);
  PolicyModel mono = make_model(Variant::Mono, mc, 1);
  CHECK(mono.params.param_count() == embed + stream2 + expert_mono);

  PolicyModel shared = make_model(Variant::Shared, mc, 1);
  CHECK(shared.params.param_count() == embed + stream2 + 2 * expert_noattn3);
}

TEST_CASE("instruction tokens cover tasks; head classes round trip") {
  world::SimConfig wc;
  auto [l1, r1] = instruction_tokens(w::parse_task("pair:L2,R3", wc));
  CHECK(l1 == instr_token(w::SkillId::L2));
  CHECK(r1 == instr_token(w::SkillId::R3));
  auto [l2, r2] = instruction_tokens(w::parse_task("dual:D2", wc));
  CHECK(l2 == r2);
  auto [l3, r3] = instruction_tokens(w::parse_task("tubes", wc));
  CHECK(l3 == kInstrTubes);
  CHECK(r3 == kInstrTubes);
  auto [l4, r4] = instruction_tokens(w::parse_task("bar:dual", wc));
  CHECK(l4 == instr_token(w::SkillId::L1));
  CHECK(r4 == instr_token(w::SkillId::R1));

  for (int c = 0; c < kHeadClasses; ++c) {
    CHECK(head_class(head_skill(c, w::Arm::Left), w::Arm::Left) == c);
    CHECK(head_class(head_skill(c, w::Arm::Right), w::Arm::Right) == c);
  }
  CHECK_THROWS_AS(head_class(w::SkillId::R1, w::Arm::Left),
                  std::invalid_argument);
}

TEST_CASE("model save/load round trips parameters bit-exactly") {
  PolicyModel m = make_model(Variant::SkillVla, mc, 31);
  m.selector_trained = true;
  m.selector.freeze();
  m.trained_skills = {"L1", "R2"};
  std::string base =
      (std::filesystem::temp_directory_path() / "skilllab_model_test").string();
  save_model(m, base, 1234);
  PolicyModel m2 = load_model(base);
  CHECK(m2.variant == Variant::SkillVla);
  CHECK(m2.selector_trained);
  CHECK(m2.trained_skills == m.trained_skills);
  for (const auto& [name, e] : m.params.entries())
    CHECK(m2.params.at(name).value.values == e.value.values);
  for (const auto& [name, e] : m.selector.entries())
    CHECK(m2.selector.at(name).value.values == e.value.values);
  std::filesystem::remove(base + ".json");
  std::filesystem::remove(base + ".bin");
}

TEST_CASE("select_skills requires a trained selector") {
  PolicyModel m = make_model(Variant::SkillVla, mc, 37);
  std::vector<float> obs(static_cast<std::size_t>(w::kObsDim), 0.1f);
  world::SimConfig wc;
  w::TaskSpec task = w::parse_task("pair:L1,IDLE", wc);
  CHECK_THROWS_AS(select_skills(m, obs, task), std::logic_error);
  m.selector_trained = true;
  SkillChoice c = select_skills(m, obs, task);
  double suml = 0.0, sumr = 0.0;
  for (float v : c.probs_left) suml += v;
  for (float v : c.probs_right) sumr += v;
  CHECK(suml == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(sumr == doctest::Approx(1.0).epsilon(1e-5));
}
