#include "skilllab/policy.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace skilllab::policy {

using json = nlohmann::ordered_json;
namespace w = skilllab::world;
using Ref = dc::Tape::Ref;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::SkillVla: return "SKILLVLA";
    case Variant::Mono: return "MONO";
    case Variant::Shared: return "SHARED";
    case Variant::Twin: return "TWIN";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  std::string up;
  for (char c : name) up.push_back(static_cast<char>(std::toupper(c)));
  if (up == "SKILLVLA") return Variant::SkillVla;
  if (up == "MONO") return Variant::Mono;
  if (up == "SHARED") return Variant::Shared;
  if (up == "TWIN") return Variant::Twin;
  throw std::invalid_argument("unknown variant: " + name);
}

// ---------------------------------------------------------------------------
// vocabularies

int instr_token(world::SkillId s) { return static_cast<int>(s); }

std::pair<int, int> instruction_tokens(const world::TaskSpec& task) {
  switch (task.kind) {
    case w::TaskKind::PairSkills:
      return {instr_token(task.left), instr_token(task.right)};
    case w::TaskKind::DualSkill:
      return {instr_token(task.dual), instr_token(task.dual)};
    case w::TaskKind::LongHorizon: {
      int tok = task.long_name == "tubes" ? kInstrTubes : kInstrCollect;
      return {tok, tok};
    }
  }
  return {instr_token(w::SkillId::Idle), instr_token(w::SkillId::Idle)};
}

std::vector<float> instruction_onehot(const world::TaskSpec& task) {
  auto [l, r] = instruction_tokens(task);
  std::vector<float> v(2 * kInstrVocab, 0.0f);
  v[static_cast<std::size_t>(l)] = 1.0f;
  v[static_cast<std::size_t>(kInstrVocab + r)] = 1.0f;
  return v;
}

int head_class(world::SkillId s, world::Arm arm) {
  using S = world::SkillId;
  if (arm == world::Arm::Left) {
    switch (s) {
      case S::L1: return 0;
      case S::L2: return 1;
      case S::L3: return 2;
      case S::D1: return 3;
      case S::D2: return 4;
      case S::D3: return 5;
      case S::Idle: return 6;
      default: break;
    }
  } else {
    switch (s) {
      case S::R1: return 0;
      case S::R2: return 1;
      case S::R3: return 2;
      case S::D1: return 3;
      case S::D2: return 4;
      case S::D3: return 5;
      case S::Idle: return 6;
      default: break;
    }
  }
  throw std::invalid_argument("skill " + w::skill_name(s) +
                              " is not emittable by this head");
}

world::SkillId head_skill(int cls, world::Arm arm) {
  using S = world::SkillId;
  static constexpr S left[] = {S::L1, S::L2, S::L3, S::D1, S::D2, S::D3, S::Idle};
  static constexpr S right[] = {S::R1, S::R2, S::R3, S::D1, S::D2, S::D3, S::Idle};
  if (cls < 0 || cls >= kHeadClasses)
    throw std::invalid_argument("bad head class " + std::to_string(cls));
  return arm == world::Arm::Left ? left[cls] : right[cls];
}

// ---------------------------------------------------------------------------
// construction

namespace {

void add_linear(dc::ParameterSet& ps, Rng& rng, const std::string& name, int in,
                int out) {
  float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(in)));
  ps.add(name + ".w", dc::randn(rng, {in, out}, scale));
  ps.add(name + ".b", dc::zeros({1, out}));
}

void add_layernorm(dc::ParameterSet& ps, const std::string& name, int dim) {
  ps.add(name + ".g", dc::full({1, dim}, 1.0f));
  ps.add(name + ".b", dc::zeros({1, dim}));
}

// expert trunk: 3 hidden layers of d_hidden with layer norm, cross-attention
// block between layers 2 and 3 (message variants only)
void add_expert(dc::ParameterSet& ps, Rng& rng, const std::string& p, int in_dim,
                int out_dim, const ModelConfig& cfg, bool with_attn) {
  add_linear(ps, rng, p + ".l1", in_dim, cfg.d_hidden);
  add_layernorm(ps, p + ".n1", cfg.d_hidden);
  add_linear(ps, rng, p + ".l2", cfg.d_hidden, cfg.d_hidden);
  add_layernorm(ps, p + ".n2", cfg.d_hidden);
  if (with_attn) {
    int dt = cfg.d_hidden / cfg.attn_tokens;
    add_linear(ps, rng, p + ".wq", dt, dt);
    add_linear(ps, rng, p + ".wk", dt, dt);
    add_linear(ps, rng, p + ".wv", dt, dt);
    ps.add(p + ".wo", dc::randn(rng, {dt, dt},
                                static_cast<float>(1.0 / std::sqrt(double(dt)))));
  }
  add_linear(ps, rng, p + ".l3", cfg.d_hidden, cfg.d_hidden);
  add_layernorm(ps, p + ".n3", cfg.d_hidden);
  add_linear(ps, rng, p + ".out", cfg.d_hidden, out_dim);
}

void add_stream(dc::ParameterSet& ps, Rng& rng, const std::string& p, int in_dim,
                const ModelConfig& cfg) {
  add_linear(ps, rng, p + ".l1", in_dim, cfg.d_hidden);
  add_linear(ps, rng, p + ".l2", cfg.d_hidden, cfg.d_hidden);
  add_linear(ps, rng, p + ".lz", cfg.d_hidden, cfg.d_latent);
}

}  // namespace

PolicyModel make_model(Variant v, const ModelConfig& cfg, std::uint64_t seed) {
  PolicyModel m;
  m.variant = v;
  m.cfg = cfg;
  Rng rng(Rng::mix(seed, 0x90de1ull));
  int obs = w::kObsDim;
  int instr = 2 * kInstrVocab;

  if (v == Variant::SkillVla) {
    add_linear(m.selector, rng, "enc.l1", obs + instr, cfg.d_hidden);
    add_linear(m.selector, rng, "enc.l2", cfg.d_hidden, cfg.d_hidden);
    add_linear(m.selector, rng, "enc.lz", cfg.d_hidden, cfg.d_latent);
    add_linear(m.selector, rng, "head_l", cfg.d_latent, kHeadClasses);
    add_linear(m.selector, rng, "head_r", cfg.d_latent, kHeadClasses);
  }

  dc::ParameterSet& ps = m.params;
  int proprio = 3;
  switch (v) {
    case Variant::SkillVla:
    case Variant::Twin: {
      ps.add("embed_l", dc::randn(rng, {kInstrVocab, cfg.d_embed}, 0.5f));
      ps.add("embed_r", dc::randn(rng, {kInstrVocab, cfg.d_embed}, 0.5f));
      add_stream(ps, rng, "stream_l", obs + cfg.d_embed, cfg);
      add_stream(ps, rng, "stream_r", obs + cfg.d_embed, cfg);
      int ein = 3 + 1 + cfg.d_latent + proprio;
      add_expert(ps, rng, "expert_l", ein, 3, cfg, true);
      add_expert(ps, rng, "expert_r", ein, 3, cfg, true);
      if (v == Variant::SkillVla) {
        int dt = cfg.d_latent / cfg.attn_tokens;
        ps.add("est.query", dc::randn(rng, {1, dt}, 0.5f));
        add_linear(ps, rng, "est.wq", dt, dt);
        add_linear(ps, rng, "est.wk", dt, dt);
        add_linear(ps, rng, "est.wv", dt, dt);
        ps.add("est.wo", dc::randn(rng, {dt, dt},
                                   static_cast<float>(1.0 / std::sqrt(double(dt)))));
        add_linear(ps, rng, "est.out", dt, 1);
      }
      break;
    }
    case Variant::Mono: {
      ps.add("embed", dc::randn(rng, {kInstrVocab, cfg.d_embed}, 0.5f));
      add_stream(ps, rng, "stream", obs + 2 * cfg.d_embed, cfg);
      int ein = 6 + 1 + cfg.d_latent + 2 * proprio;
      add_expert(ps, rng, "expert", ein, 6, cfg, false);
      break;
    }
    case Variant::Shared: {
      ps.add("embed", dc::randn(rng, {kInstrVocab, cfg.d_embed}, 0.5f));
      add_stream(ps, rng, "stream", obs + 2 * cfg.d_embed, cfg);
      int ein = 3 + 1 + cfg.d_latent + proprio;
      add_expert(ps, rng, "expert_l", ein, 3, cfg, false);
      add_expert(ps, rng, "expert_r", ein, 3, cfg, false);
      break;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// forward blocks

namespace {

Ref linear(dc::Tape& t, dc::ParameterSet& ps, const std::string& name, Ref x) {
  return t.add_bias(t.matmul(x, t.param(ps, name + ".w")),
                    t.param(ps, name + ".b"));
}

Ref linear_tanh(dc::Tape& t, dc::ParameterSet& ps, const std::string& name,
                Ref x) {
  return t.tanh(linear(t, ps, name, x));
}

Ref layernorm(dc::Tape& t, dc::ParameterSet& ps, const std::string& name, Ref x) {
  return t.layer_norm(x, t.param(ps, name + ".g"), t.param(ps, name + ".b"));
}

// one-hot rows for a token id list
dc::Tensor onehot_rows(const std::vector<int>& toks, int vocab) {
  dc::Tensor t = dc::zeros({static_cast<int>(toks.size()), vocab});
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] < 0 || toks[i] >= vocab)
      throw std::invalid_argument("token id out of range: " + std::to_string(toks[i]));
    t.at(static_cast<int>(i), toks[i]) = 1.0f;
  }
  return t;
}

Ref embed_tokens(dc::Tape& t, dc::ParameterSet& ps, const std::string& table,
                 const std::vector<int>& toks) {
  Ref onehot = t.input(onehot_rows(toks, kInstrVocab));
  return t.matmul(onehot, t.param(ps, table));
}

Ref stream_forward(dc::Tape& t, dc::ParameterSet& ps, const std::string& p,
                   Ref obs, Ref emb) {
  Ref x = t.concat_cols({obs, emb});
  Ref h = linear_tanh(t, ps, p + ".l1", x);
  h = linear_tanh(t, ps, p + ".l2", h);
  return t.tanh(linear(t, ps, p + ".lz", h));
}

struct ExpertHidden {
  Ref h2;  // pre-message hidden state (B, d_hidden)
};

ExpertHidden expert_trunk(dc::Tape& t, dc::ParameterSet& ps, const std::string& p,
                          Ref a_tau, Ref tau, Ref z, Ref proprio) {
  Ref x = t.concat_cols({a_tau, tau, z, proprio});
  Ref h1 = t.tanh(layernorm(t, ps, p + ".n1", linear(t, ps, p + ".l1", x)));
  Ref h2 = t.tanh(layernorm(t, ps, p + ".n2", linear(t, ps, p + ".l2", h1)));
  return {h2};
}

Ref expert_head(dc::Tape& t, dc::ParameterSet& ps, const std::string& p, Ref h) {
  Ref h3 = t.tanh(layernorm(t, ps, p + ".n3", linear(t, ps, p + ".l3", h)));
  return linear(t, ps, p + ".out", h3);
}

// cross-attention message: queries from own hidden state, keys/values from the
// partner's hidden state, independent QKV projections per expert
Ref message(dc::Tape& t, dc::ParameterSet& ps, const std::string& p, Ref h_own,
            Ref h_other, const ModelConfig& cfg) {
  int B = t.value(h_own).rows();
  int dt = cfg.d_hidden / cfg.attn_tokens;
  Ref own_tok = t.reshape(h_own, {B * cfg.attn_tokens, dt});
  Ref oth_tok = t.reshape(h_other, {B * cfg.attn_tokens, dt});
  Ref q = linear(t, ps, p + ".wq", own_tok);
  Ref k = linear(t, ps, p + ".wk", oth_tok);
  Ref v = linear(t, ps, p + ".wv", oth_tok);
  Ref o = t.attention(q, k, v, t.param(ps, p + ".wo"), cfg.n_heads,
                      cfg.attn_tokens, cfg.attn_tokens);
  return t.reshape(o, {B, cfg.d_hidden});
}

Ref proprio_slice(dc::Tape& t, Ref obs, world::Arm arm) {
  // obs layout: [lx, ly, rx, ry, lgrip, rgrip, ...]
  if (arm == world::Arm::Left)
    return t.concat_cols({t.slice_cols(obs, 0, 2), t.slice_cols(obs, 4, 5)});
  return t.concat_cols({t.slice_cols(obs, 2, 4), t.slice_cols(obs, 5, 6)});
}

}  // namespace

SelectorOut selector_forward(dc::Tape& tape, PolicyModel& model, Ref obs,
                             Ref instr) {
  if (model.variant != Variant::SkillVla)
    throw std::logic_error("variant " + variant_name(model.variant) +
                           " has no skill selector");
  dc::ParameterSet& ps = model.selector;
  Ref x = tape.concat_cols({obs, instr});
  Ref h = linear_tanh(tape, ps, "enc.l1", x);
  h = linear_tanh(tape, ps, "enc.l2", h);
  Ref z_h = tape.tanh(linear(tape, ps, "enc.lz", h));
  SelectorOut out;
  out.z_h = z_h;
  out.logits_l = linear(tape, ps, "head_l", z_h);
  out.logits_r = linear(tape, ps, "head_r", z_h);
  out.probs_l = tape.softmax_rows(out.logits_l);
  out.probs_r = tape.softmax_rows(out.logits_r);
  return out;
}

EncodeOut encode(dc::Tape& tape, PolicyModel& model, Ref obs,
                 const std::vector<int>& tok_left,
                 const std::vector<int>& tok_right) {
  dc::ParameterSet& ps = model.params;
  EncodeOut out;
  switch (model.variant) {
    case Variant::SkillVla:
    case Variant::Twin: {
      Ref el = embed_tokens(tape, ps, "embed_l", tok_left);
      Ref er = embed_tokens(tape, ps, "embed_r", tok_right);
      out.z_left = stream_forward(tape, ps, "stream_l", obs, el);
      out.z_right = stream_forward(tape, ps, "stream_r", obs, er);
      return out;
    }
    case Variant::Mono:
    case Variant::Shared: {
      Ref el = embed_tokens(tape, ps, "embed", tok_left);
      Ref er = embed_tokens(tape, ps, "embed", tok_right);
      Ref emb = tape.concat_cols({el, er});
      Ref z = stream_forward(tape, ps, "stream", obs, emb);
      out.z_left = z;
      out.z_right = z;
      return out;
    }
  }
  return out;
}

VelocityOut expert_velocity(dc::Tape& tape, PolicyModel& model, Ref a_tau_left,
                            Ref a_tau_right, Ref tau, const EncodeOut& latents,
                            Ref obs, const Gate& gate) {
  dc::ParameterSet& ps = model.params;
  VelocityOut out;
  switch (model.variant) {
    case Variant::Mono: {
      Ref pro = tape.slice_cols(obs, 0, 6);
      ExpertHidden h =
          expert_trunk(tape, ps, "expert", a_tau_left, tau, latents.z_left, pro);
      out.v_left = expert_head(tape, ps, "expert", h.h2);
      out.v_right = -1;
      return out;
    }
    case Variant::Shared: {
      Ref pl = proprio_slice(tape, obs, world::Arm::Left);
      Ref pr = proprio_slice(tape, obs, world::Arm::Right);
      ExpertHidden hl =
          expert_trunk(tape, ps, "expert_l", a_tau_left, tau, latents.z_left, pl);
      ExpertHidden hr =
          expert_trunk(tape, ps, "expert_r", a_tau_right, tau, latents.z_right, pr);
      out.v_left = expert_head(tape, ps, "expert_l", hl.h2);
      out.v_right = expert_head(tape, ps, "expert_r", hr.h2);
      return out;
    }
    case Variant::SkillVla:
    case Variant::Twin: {
      Gate g = gate;
      if (model.variant == Variant::Twin) g = Gate::one();  // always-on messages
      Ref pl = proprio_slice(tape, obs, world::Arm::Left);
      Ref pr = proprio_slice(tape, obs, world::Arm::Right);
      ExpertHidden hl =
          expert_trunk(tape, ps, "expert_l", a_tau_left, tau, latents.z_left, pl);
      ExpertHidden hr =
          expert_trunk(tape, ps, "expert_r", a_tau_right, tau, latents.z_right, pr);
      Ref in_l = hl.h2;
      Ref in_r = hr.h2;
      if (g.mode != Gate::Mode::Zero) {
        Ref ml = message(tape, ps, "expert_l", hl.h2, hr.h2, model.cfg);
        Ref mr = message(tape, ps, "expert_r", hr.h2, hl.h2, model.cfg);
        if (g.mode == Gate::Mode::Column) {
          ml = tape.row_scale(ml, g.column);
          mr = tape.row_scale(mr, g.column);
        }
        in_l = tape.add(hl.h2, ml);
        in_r = tape.add(hr.h2, mr);
      }
      out.v_left = expert_head(tape, ps, "expert_l", in_l);
      out.v_right = expert_head(tape, ps, "expert_r", in_r);
      return out;
    }
  }
  return out;
}

Ref estimator_forward(dc::Tape& tape, PolicyModel& model, Ref z_h) {
  if (model.variant != Variant::SkillVla)
    throw std::logic_error("variant " + variant_name(model.variant) +
                           " has no cooperation estimator");
  dc::ParameterSet& ps = model.params;
  const ModelConfig& cfg = model.cfg;
  int B = tape.value(z_h).rows();
  int dt = cfg.d_latent / cfg.attn_tokens;
  // keys/values: z_h split into tokens; query: one learned token per sample
  Ref kv_tok = tape.reshape(z_h, {B * cfg.attn_tokens, dt});
  Ref ones = tape.input(dc::full({B, 1}, 1.0f));
  Ref q_tok = tape.matmul(ones, tape.param(ps, "est.query"));
  Ref q = linear(tape, ps, "est.wq", q_tok);
  Ref k = linear(tape, ps, "est.wk", kv_tok);
  Ref v = linear(tape, ps, "est.wv", kv_tok);
  Ref o = tape.attention(q, k, v, tape.param(ps, "est.wo"), cfg.n_heads, 1,
                         cfg.attn_tokens);
  return tape.sigmoid(linear(tape, ps, "est.out", o));
}

// ---------------------------------------------------------------------------
// persistence

void save_model(const PolicyModel& model, const std::string& path_base,
                std::uint64_t config_hash) {
  json extra;
  extra["variant"] = variant_name(model.variant);
  extra["config_hash"] = config_hash;
  extra["selector_trained"] = model.selector_trained;
  extra["trained_skills"] = model.trained_skills;
  extra["model"] = {{"d_hidden", model.cfg.d_hidden},
                    {"d_latent", model.cfg.d_latent},
                    {"d_embed", model.cfg.d_embed},
                    {"n_heads", model.cfg.n_heads},
                    {"attn_tokens", model.cfg.attn_tokens}};
  std::map<std::string, const dc::ParameterSet*> sets;
  sets["policy"] = &model.params;
  if (model.variant == Variant::SkillVla) sets["selector"] = &model.selector;
  dc::save_checkpoint(path_base, sets, extra.dump());
}

PolicyModel load_model(const std::string& path_base) {
  // manifest first, to learn variant and sizes
  json manifest = json::parse(read_text_file(path_base + ".json"));
  json extra = manifest.at("extra");
  ModelConfig cfg;
  cfg.d_hidden = extra.at("model").at("d_hidden").get<int>();
  cfg.d_latent = extra.at("model").at("d_latent").get<int>();
  cfg.d_embed = extra.at("model").at("d_embed").get<int>();
  cfg.n_heads = extra.at("model").at("n_heads").get<int>();
  cfg.attn_tokens = extra.at("model").at("attn_tokens").get<int>();
  PolicyModel model =
      make_model(variant_from_name(extra.at("variant").get<std::string>()), cfg, 0);
  model.selector_trained = extra.at("selector_trained").get<bool>();
  model.trained_skills = extra.at("trained_skills").get<std::vector<std::string>>();
  std::map<std::string, dc::ParameterSet*> sets;
  sets["policy"] = &model.params;
  if (model.variant == Variant::SkillVla) sets["selector"] = &model.selector;
  dc::load_checkpoint(path_base, sets);
  if (model.selector_trained) model.selector.freeze();
  return model;
}

// ---------------------------------------------------------------------------
// single-observation helpers

SkillChoice select_skills(PolicyModel& model, const std::vector<float>& obs,
                          const world::TaskSpec& task) {
  if (model.variant != Variant::SkillVla)
    throw std::logic_error("select_skills requires the gated variant");
  if (!model.selector_trained)
    throw std::logic_error("selector has not been trained");
  dc::Tape tape;
  Ref o = tape.input(dc::from_rows({obs}));
  Ref i = tape.input(dc::from_rows({instruction_onehot(task)}));
  SelectorOut s = selector_forward(tape, model, o, i);
  SkillChoice choice;
  choice.probs_left = tape.value(s.probs_l).values;
  choice.probs_right = tape.value(s.probs_r).values;
  auto argmax = [](const std::vector<float>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  };
  choice.left = head_skill(argmax(choice.probs_left), world::Arm::Left);
  choice.right = head_skill(argmax(choice.probs_right), world::Arm::Right);
  return choice;
}

double estimate_coop(PolicyModel& model, const std::vector<float>& obs,
                     const world::TaskSpec& task) {
  dc::Tape tape;
  Ref o = tape.input(dc::from_rows({obs}));
  Ref i = tape.input(dc::from_rows({instruction_onehot(task)}));
  SelectorOut s = selector_forward(tape, model, o, i);
  Ref y = estimator_forward(tape, model, s.z_h);
  return tape.value(y).values[0];
}

}  // namespace skilllab::policy
