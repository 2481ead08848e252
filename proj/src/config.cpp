#include "skilllab/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace skilllab {

using json = nlohmann::ordered_json;

namespace {

// pulls a key and marks it consumed so leftovers can be rejected
template <typename T>
void take(json& obj, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  out = it->get<T>();
  obj.erase(it);
}

void reject_leftovers(const json& obj, const std::string& where) {
  if (!obj.empty()) {
    std::string keys;
    for (auto it = obj.begin(); it != obj.end(); ++it)
      keys += (keys.empty() ? "" : ", ") + it.key();
    throw std::invalid_argument("unknown config key(s) in " + where + ": " + keys);
  }
}

json world_json(const world::SimConfig& w) {
  json j;
  j["v_max"] = w.v_max;
  j["r_grasp"] = w.r_grasp;
  j["delta_tilt"] = w.delta_tilt;
  j["k_p"] = w.k_p;
  j["sigma_a"] = w.sigma_a;
  j["sigma_idle"] = w.sigma_idle;
  j["c_couple"] = w.c_couple;
  j["sigma_couple"] = w.sigma_couple;
  j["p_go"] = w.p_go;
  j["horizon_single"] = w.horizon_single;
  j["horizon_long"] = w.horizon_long;
  j["contact_r"] = w.contact_r;
  j["success_r"] = w.success_r;
  j["orbit_radius"] = w.orbit_radius;
  j["orbit_band"] = w.orbit_band;
  j["press_hold_steps"] = w.press_hold_steps;
  j["shake_flips"] = w.shake_flips;
  j["shake_amp"] = w.shake_amp;
  j["align_sync_window"] = w.align_sync_window;
  j["bar_halfwidth"] = w.bar_halfwidth;
  j["drawer_stroke"] = w.drawer_stroke;
  j["drawer_hold_steps"] = w.drawer_hold_steps;
  j["lift_target_y"] = w.lift_target_y;
  return j;
}

void world_from(json j, world::SimConfig& w) {
  take(j, "v_max", w.v_max);
  take(j, "r_grasp", w.r_grasp);
  take(j, "delta_tilt", w.delta_tilt);
  take(j, "k_p", w.k_p);
  take(j, "sigma_a", w.sigma_a);
  take(j, "sigma_idle", w.sigma_idle);
  take(j, "c_couple", w.c_couple);
  take(j, "sigma_couple", w.sigma_couple);
  take(j, "p_go", w.p_go);
  take(j, "horizon_single", w.horizon_single);
  take(j, "horizon_long", w.horizon_long);
  take(j, "contact_r", w.contact_r);
  take(j, "success_r", w.success_r);
  take(j, "orbit_radius", w.orbit_radius);
  take(j, "orbit_band", w.orbit_band);
  take(j, "press_hold_steps", w.press_hold_steps);
  take(j, "shake_flips", w.shake_flips);
  take(j, "shake_amp", w.shake_amp);
  take(j, "align_sync_window", w.align_sync_window);
  take(j, "bar_halfwidth", w.bar_halfwidth);
  take(j, "drawer_stroke", w.drawer_stroke);
  take(j, "drawer_hold_steps", w.drawer_hold_steps);
  take(j, "lift_target_y", w.lift_target_y);
  reject_leftovers(j, "world");
}

}  // namespace

std::string RunConfig::to_json() const {
  json j;
  j["world"] = world_json(world);
  j["data"] = {{"episodes_single", data.episodes_single},
               {"episodes_dual", data.episodes_dual},
               {"max_expert_failure", data.max_expert_failure}};
  j["model"] = {{"d_hidden", model.d_hidden},
                {"d_latent", model.d_latent},
                {"d_embed", model.d_embed},
                {"n_heads", model.n_heads},
                {"attn_tokens", model.attn_tokens}};
  j["train"] = {{"lr", train.lr},
                {"lr_floor", train.lr_floor},
                {"batch", train.batch},
                {"steps", train.steps},
                {"selector_steps", train.selector_steps},
                {"selector_lr", train.selector_lr},
                {"log_every", train.log_every},
                {"weights",
                 {{"coop", train.weights.coop},
                  {"prior", train.weights.prior},
                  {"sticky", train.weights.sticky},
                  {"sup", train.weights.sup},
                  {"disc", train.weights.disc}}},
                {"discrete_gate", train.discrete_gate},
                {"onoff_expert_grads", train.onoff_expert_grads},
                {"seed", train.seed}};
  j["sampler"] = {{"flow_steps", sampler.flow_steps},
                  {"gate_threshold", sampler.gate_threshold}};
  j["eval"] = {{"n_trials", eval.n_trials},
               {"mi_bins", eval.mi_bins},
               {"mi_samples", eval.mi_samples},
               {"mi_shuffles", eval.mi_shuffles},
               {"support_tol", eval.support_tol}};
  j["seed"] = seed;
  return j.dump(1);
}

RunConfig RunConfig::from_json(const std::string& text) {
  RunConfig cfg;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  if (j.contains("world")) {
    world_from(j["world"], cfg.world);
    j.erase("world");
  }
  if (j.contains("data")) {
    json d = j["data"];
    take(d, "episodes_single", cfg.data.episodes_single);
    take(d, "episodes_dual", cfg.data.episodes_dual);
    take(d, "max_expert_failure", cfg.data.max_expert_failure);
    reject_leftovers(d, "data");
    j.erase("data");
  }
  if (j.contains("model")) {
    json m = j["model"];
    take(m, "d_hidden", cfg.model.d_hidden);
    take(m, "d_latent", cfg.model.d_latent);
    take(m, "d_embed", cfg.model.d_embed);
    take(m, "n_heads", cfg.model.n_heads);
    take(m, "attn_tokens", cfg.model.attn_tokens);
    reject_leftovers(m, "model");
    j.erase("model");
  }
  if (j.contains("train")) {
    json t = j["train"];
    take(t, "lr", cfg.train.lr);
    take(t, "lr_floor", cfg.train.lr_floor);
    take(t, "batch", cfg.train.batch);
    take(t, "steps", cfg.train.steps);
    take(t, "selector_steps", cfg.train.selector_steps);
    take(t, "selector_lr", cfg.train.selector_lr);
    take(t, "log_every", cfg.train.log_every);
    if (t.contains("weights")) {
      json w = t["weights"];
      take(w, "coop", cfg.train.weights.coop);
      take(w, "prior", cfg.train.weights.prior);
      take(w, "sticky", cfg.train.weights.sticky);
      take(w, "sup", cfg.train.weights.sup);
      take(w, "disc", cfg.train.weights.disc);
      reject_leftovers(w, "train.weights");
      t.erase("weights");
    }
    take(t, "discrete_gate", cfg.train.discrete_gate);
    take(t, "onoff_expert_grads", cfg.train.onoff_expert_grads);
    take(t, "seed", cfg.train.seed);
    reject_leftovers(t, "train");
    j.erase("train");
  }
  if (j.contains("sampler")) {
    json s = j["sampler"];
    take(s, "flow_steps", cfg.sampler.flow_steps);
    take(s, "gate_threshold", cfg.sampler.gate_threshold);
    reject_leftovers(s, "sampler");
    j.erase("sampler");
  }
  if (j.contains("eval")) {
    json e = j["eval"];
    take(e, "n_trials", cfg.eval.n_trials);
    take(e, "mi_bins", cfg.eval.mi_bins);
    take(e, "mi_samples", cfg.eval.mi_samples);
    take(e, "mi_shuffles", cfg.eval.mi_shuffles);
    take(e, "support_tol", cfg.eval.support_tol);
    reject_leftovers(e, "eval");
    j.erase("eval");
  }
  take(j, "seed", cfg.seed);
  reject_leftovers(j, "config root");
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_json(read_text_file(path));
}

std::uint64_t RunConfig::hash() const {
  // FNV-1a over the resolved text
  std::string s = to_json();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace skilllab
