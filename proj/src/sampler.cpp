#include "skilllab/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skilllab/data.hpp"

namespace skilllab::sampler {

using json = nlohmann::ordered_json;
namespace w = skilllab::world;
namespace p = skilllab::policy;
namespace dc = skilllab::diffcore;
using Ref = dc::Tape::Ref;

namespace {

float clampf(float v) { return std::clamp(v, -1.0f, 1.0f); }

// extracts the latent values once per control step so the flow loop can feed
// them back as constants
struct StepContext {
  dc::Tensor z_left;   // (1, d_latent)
  dc::Tensor z_right;
  dc::Tensor obs_row;  // (1, obs_dim)
  float yhat = 0.0f;
  int alpha = 0;
  w::SkillId u_left = w::SkillId::Idle;
  w::SkillId u_right = w::SkillId::Idle;
};

StepContext prepare_step(p::PolicyModel& model, const std::vector<float>& obs,
                         const w::TaskSpec& task, const RunConfig& cfg,
                         GateOverride ov) {
  StepContext ctx;
  ctx.obs_row = dc::from_rows({obs});
  dc::Tape tape;
  Ref obs_ref = tape.input(ctx.obs_row);

  std::vector<int> tok_l, tok_r;
  if (model.variant == p::Variant::SkillVla) {
    Ref instr = tape.input(dc::from_rows({p::instruction_onehot(task)}));
    p::SelectorOut sel = p::selector_forward(tape, model, obs_ref, instr);
    auto argmax = [&](Ref probs) {
      const dc::Tensor& t = tape.value(probs);
      int best = 0;
      for (int c = 1; c < t.cols(); ++c)
        if (t.at(0, c) > t.at(0, best)) best = c;
      return best;
    };
    ctx.u_left = p::head_skill(argmax(sel.probs_l), w::Arm::Left);
    ctx.u_right = p::head_skill(argmax(sel.probs_r), w::Arm::Right);
    tok_l = {p::instr_token(ctx.u_left)};
    tok_r = {p::instr_token(ctx.u_right)};
    Ref yhat = p::estimator_forward(tape, model, sel.z_h);
    ctx.yhat = tape.value(yhat).values[0];
    ctx.alpha = ctx.yhat >= cfg.sampler.gate_threshold ? 1 : 0;
  } else {
    auto [il, ir] = p::instruction_tokens(task);
    tok_l = {il};
    tok_r = {ir};
    ctx.alpha = model.variant == p::Variant::Twin ? 1 : 0;
    ctx.yhat = static_cast<float>(ctx.alpha);
  }
  if (ov == GateOverride::ForceOff) ctx.alpha = 0;
  if (ov == GateOverride::ForceOn) ctx.alpha = 1;

  p::EncodeOut enc = p::encode(tape, model, obs_ref, tok_l, tok_r);
  ctx.z_left = tape.value(enc.z_left);
  ctx.z_right = tape.value(enc.z_right);
  return ctx;
}

}  // namespace

SampleOut sample_actions(p::PolicyModel& model, const std::vector<float>& obs,
                         const w::TaskSpec& task, int n_steps, Rng& rng,
                         const RunConfig& cfg, GateOverride ov) {
  if (n_steps < 1) throw std::invalid_argument("sample_actions: n_steps >= 1");
  StepContext ctx = prepare_step(model, obs, task, cfg, ov);

  int adim = model.action_dim();
  // initial noise; left arm components are always drawn first
  dc::Tensor a_l = dc::zeros({1, adim == 6 ? 6 : 3});
  for (auto& v : a_l.values) v = static_cast<float>(rng.normal());
  bool two_sided = model.variant != p::Variant::Mono;
  dc::Tensor a_r = dc::zeros({1, two_sided ? 3 : 1});
  if (two_sided)
    for (auto& v : a_r.values) v = static_cast<float>(rng.normal());

  float dt = 1.0f / static_cast<float>(n_steps);
  for (int i = 0; i < n_steps; ++i) {
    float tau = dt * static_cast<float>(i);
    dc::Tape tape;
    Ref obs_ref = tape.input(ctx.obs_row);
    p::EncodeOut latents;
    latents.z_left = tape.input(ctx.z_left);
    latents.z_right = tape.input(ctx.z_right);
    Ref tau_ref = tape.input(dc::full({1, 1}, tau));
    Ref al_ref = tape.input(a_l);
    Ref ar_ref = two_sided ? tape.input(a_r) : -1;
    p::Gate gate = ctx.alpha ? p::Gate::one() : p::Gate::zero();
    p::VelocityOut v = p::expert_velocity(tape, model, al_ref, ar_ref, tau_ref,
                                          latents, obs_ref, gate);
    const dc::Tensor& vl = tape.value(v.v_left);
    for (int c = 0; c < a_l.numel(); ++c) a_l.values[c] += dt * vl.values[c];
    if (two_sided) {
      const dc::Tensor& vr = tape.value(v.v_right);
      for (int c = 0; c < a_r.numel(); ++c) a_r.values[c] += dt * vr.values[c];
    }
  }

  SampleOut out;
  out.yhat = ctx.yhat;
  out.alpha = ctx.alpha;
  out.u_left = ctx.u_left;
  out.u_right = ctx.u_right;
  if (model.variant == p::Variant::Mono) {
    out.a_left = {clampf(a_l.values[0]), clampf(a_l.values[1]),
                  clampf(a_l.values[2])};
    out.a_right = {clampf(a_l.values[3]), clampf(a_l.values[4]),
                   clampf(a_l.values[5])};
  } else {
    out.a_left = {clampf(a_l.values[0]), clampf(a_l.values[1]),
                  clampf(a_l.values[2])};
    out.a_right = {clampf(a_r.values[0]), clampf(a_r.values[1]),
                   clampf(a_r.values[2])};
  }
  return out;
}

Rollout rollout(p::PolicyModel& model, const w::TaskSpec& task, int horizon,
                std::uint64_t seed, const RunConfig& cfg, GateOverride ov) {
  Rollout r;
  r.task = task;
  r.max_score = w::max_score(task);
  Rng rng(Rng::mix(seed, 0x9011ull));
  w::WorldState s = w::reset(task, seed, cfg.world);
  r.states.push_back(s);
  for (int t = 0; t < horizon; ++t) {
    std::vector<float> obs = w::observe(s, task);
    SampleOut a = sample_actions(model, obs, task, cfg.sampler.flow_steps, rng,
                                 cfg, ov);
    r.observations.push_back(std::move(obs));
    r.actions.emplace_back(a.a_left, a.a_right);
    r.gate.yhat.push_back(a.yhat);
    r.gate.alpha.push_back(a.alpha);
    s = w::step(s, a.a_left, a.a_right, cfg.world);
    r.states.push_back(s);
    if (w::terminal(s, task)) break;
  }
  r.steps = static_cast<int>(r.actions.size());
  r.final_score = w::score(r.states.back(), task);
  r.success = r.final_score >= r.max_score;
  return r;
}

Rollout rollout_expert(const w::TaskSpec& task, int horizon, std::uint64_t seed,
                       const RunConfig& cfg) {
  Rollout r;
  r.task = task;
  r.max_score = w::max_score(task);
  Rng rng(Rng::mix(seed, 0x9012ull));
  w::WorldState s = w::reset(task, seed, cfg.world);
  r.states.push_back(s);
  for (int t = 0; t < horizon; ++t) {
    w::Stage stage = w::current_stage(s, task, cfg.world);
    auto [al, ar] = w::expert_step(s, task, rng, cfg.world);
    r.observations.push_back(w::observe(s, task));
    r.actions.emplace_back(al, ar);
    r.gate.yhat.push_back(stage.dual ? 1.0f : 0.0f);
    r.gate.alpha.push_back(stage.dual ? 1 : 0);
    s = w::step(s, al, ar, cfg.world);
    r.states.push_back(s);
    if (w::terminal(s, task)) break;
  }
  r.steps = static_cast<int>(r.actions.size());
  r.final_score = w::score(r.states.back(), task);
  r.success = r.final_score >= r.max_score;
  return r;
}

std::string rollout_jsonl(const Rollout& r) {
  std::ostringstream ss;
  for (int t = 0; t < r.steps; ++t) {
    json line;
    line["ep"] = 0;
    line["t"] = t;
    json obs = json::array();
    for (float v : r.observations[static_cast<std::size_t>(t)])
      obs.push_back(json::parse(data::format_float(v)));
    line["obs"] = obs;
    auto act = [](const w::ArmAction& a) {
      return json::array({json::parse(data::format_float(a.dx)),
                          json::parse(data::format_float(a.dy)),
                          json::parse(data::format_float(a.grip))});
    };
    line["aL"] = act(r.actions[static_cast<std::size_t>(t)].first);
    line["aR"] = act(r.actions[static_cast<std::size_t>(t)].second);
    line["yhat"] = json::parse(
        data::format_float(r.gate.yhat[static_cast<std::size_t>(t)]));
    line["alpha"] = r.gate.alpha[static_cast<std::size_t>(t)];
    ss << line.dump() << "\n";
  }
  return ss.str();
}

}  // namespace skilllab::sampler
