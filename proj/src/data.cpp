#include "skilllab/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace skilllab::data {

using json = nlohmann::ordered_json;
namespace w = skilllab::world;

namespace {

constexpr int kFormatVersion = 1;

bool action_eq(const w::ArmAction& a, const w::ArmAction& b) {
  return a.dx == b.dx && a.dy == b.dy && a.grip == b.grip;
}

}  // namespace

bool StepRecord::operator==(const StepRecord& o) const {
  return obs == o.obs && action_eq(a_left, o.a_left) &&
         action_eq(a_right, o.a_right) && u_left == o.u_left &&
         u_right == o.u_right && prior == o.prior;
}

bool Demonstration::operator==(const Demonstration& o) const {
  return task.name() == o.task.name() && steps == o.steps;
}

int label_prior(world::SkillId skill) {
  return w::is_dual_skill(skill) ? 1 : 0;
}

std::vector<Demonstration> generate(const world::TaskSpec& task, int n_episodes,
                                    std::uint64_t seed, const RunConfig& cfg) {
  if (n_episodes < 1) throw std::invalid_argument("generate: n_episodes must be >= 1");
  std::vector<Demonstration> demos;
  demos.reserve(static_cast<std::size_t>(n_episodes));
  int failures = 0;
  int horizon = w::task_horizon(task, cfg.world);

  for (int ep = 0; ep < n_episodes; ++ep) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(ep)));
    w::WorldState s = w::reset(task, Rng::mix(seed, static_cast<std::uint64_t>(ep)),
                               cfg.world);
    Demonstration demo;
    demo.task = task;
    for (int t = 0; t < horizon; ++t) {
      w::Stage stage = w::current_stage(s, task, cfg.world);
      auto [al, ar] = w::expert_step(s, task, rng, cfg.world);
      StepRecord rec;
      rec.obs = w::observe(s, task);
      rec.a_left = al;
      rec.a_right = ar;
      rec.u_left = stage.left;
      rec.u_right = stage.right;
      rec.prior = stage.dual ? 1 : 0;
      demo.steps.push_back(std::move(rec));
      s = w::step(s, al, ar, cfg.world);
      if (w::terminal(s, task)) break;
    }
    if (!w::task_done(s, task)) ++failures;
    demos.push_back(std::move(demo));
  }

  double rate = static_cast<double>(failures) / n_episodes;
  if (rate > cfg.data.max_expert_failure)
    throw std::runtime_error("expert failure rate " + std::to_string(rate) +
                             " exceeds " +
                             std::to_string(cfg.data.max_expert_failure) +
                             " on task " + task.name());
  return demos;
}

std::string format_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

namespace {

json action_json(const w::ArmAction& a) {
  return json::array({json::parse(format_float(a.dx)),
                      json::parse(format_float(a.dy)),
                      json::parse(format_float(a.grip))});
}

w::ArmAction action_from(const json& j) {
  w::ArmAction a;
  a.dx = j.at(0).get<double>();
  a.dy = j.at(1).get<double>();
  a.grip = j.at(2).get<double>();
  return a;
}

}  // namespace

void save(const std::vector<Demonstration>& demos, const std::string& path,
          const std::string& dataset_name, std::uint64_t seed,
          const RunConfig& cfg) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  long total_steps = 0;
  for (std::size_t ep = 0; ep < demos.size(); ++ep) {
    const Demonstration& d = demos[ep];
    for (std::size_t t = 0; t < d.steps.size(); ++t) {
      const StepRecord& r = d.steps[t];
      json line;
      line["ep"] = ep;
      line["t"] = t;
      json obs = json::array();
      for (float v : r.obs) obs.push_back(json::parse(format_float(v)));
      line["obs"] = obs;
      line["aL"] = action_json(r.a_left);
      line["aR"] = action_json(r.a_right);
      line["uL"] = w::skill_name(r.u_left);
      line["uR"] = w::skill_name(r.u_right);
      line["prior"] = r.prior;
      f << line.dump() << "\n";
      ++total_steps;
    }
  }
  json manifest;
  manifest["name"] = dataset_name;
  manifest["format_version"] = kFormatVersion;
  manifest["task"] = demos.empty() ? "" : demos.front().task.name();
  manifest["episodes"] = demos.size();
  manifest["steps"] = total_steps;
  manifest["seed"] = seed;
  manifest["world"] = json::parse(cfg.to_json())["world"];
  write_text_file(path + ".manifest.json", manifest.dump(1) + "\n");
}

std::vector<Demonstration> load(const std::string& path) {
  std::ifstream mf(path + ".manifest.json");
  if (!mf) throw std::runtime_error("missing manifest: " + path + ".manifest.json");
  json manifest = json::parse(mf);
  if (manifest.value("format_version", -1) != kFormatVersion)
    throw std::runtime_error("unsupported dataset format version in " + path);
  std::string task_name = manifest.value("task", "");
  w::TaskSpec task = w::parse_task(task_name, world::SimConfig{});

  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<Demonstration> demos;
  std::string line;
  long line_no = 0;
  long total_steps = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed line: " + e.what());
    }
    try {
      std::size_t ep = j.at("ep").get<std::size_t>();
      if (ep == demos.size()) {
        demos.emplace_back();
        demos.back().task = task;
      } else if (ep != demos.size() - 1) {
        throw std::runtime_error("episode index out of order");
      }
      StepRecord r;
      r.obs.reserve(j.at("obs").size());
      for (const auto& v : j.at("obs")) r.obs.push_back(v.get<float>());
      r.a_left = action_from(j.at("aL"));
      r.a_right = action_from(j.at("aR"));
      r.u_left = w::skill_from_name(j.at("uL").get<std::string>());
      r.u_right = w::skill_from_name(j.at("uR").get<std::string>());
      r.prior = j.at("prior").get<int>();
      if (j.at("t").get<std::size_t>() != demos.back().steps.size())
        throw std::runtime_error("step index out of order");
      demos.back().steps.push_back(std::move(r));
      ++total_steps;
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                               e.what());
    }
  }
  if (manifest.at("episodes").get<std::size_t>() != demos.size() ||
      manifest.at("steps").get<long>() != total_steps)
    throw std::runtime_error("manifest counts do not match body: " + path);
  return demos;
}

}  // namespace skilllab::data
