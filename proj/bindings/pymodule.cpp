#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "skilllab/data.hpp"
#include "skilllab/evalsuite.hpp"
#include "skilllab/learn.hpp"
#include "skilllab/policy.hpp"
#include "skilllab/runner.hpp"
#include "skilllab/sampler.hpp"
#include "skilllab/world.hpp"

namespace py = pybind11;
using namespace skilllab;
namespace w = skilllab::world;
namespace p = skilllab::policy;

namespace {

RunConfig config_from_json(const std::string& text) {
  return text.empty() ? RunConfig{} : RunConfig::from_json(text);
}

py::dict rollout_dict(const sampler::Rollout& r) {
  py::dict d;
  d["task"] = r.task.name();
  d["steps"] = r.steps;
  d["score"] = r.final_score;
  d["max_score"] = r.max_score;
  d["success"] = r.success;
  d["yhat"] = r.gate.yhat;
  d["alpha"] = r.gate.alpha;
  return d;
}

}  // namespace

PYBIND11_MODULE(_skilllab, m) {
  m.doc() = "dual-arm skill composition lab (C++ core)";

  py::class_<w::ArmAction>(m, "ArmAction")
      .def(py::init<>())
      .def_readwrite("dx", &w::ArmAction::dx)
      .def_readwrite("dy", &w::ArmAction::dy)
      .def_readwrite("grip", &w::ArmAction::grip);

  // a world bound to one task; mirrors reset/step/observe/score
  struct PyWorld {
    RunConfig cfg;
    w::TaskSpec task;
    w::WorldState state;
    Rng rng{1};
  };
  py::class_<PyWorld>(m, "World")
      .def(py::init([](const std::string& task, std::uint64_t seed,
                       const std::string& config_json) {
             auto world = std::make_unique<PyWorld>();
             world->cfg = config_from_json(config_json);
             world->task = w::parse_task(task, world->cfg.world);
             world->state = w::reset(world->task, seed, world->cfg.world);
             world->rng = Rng(Rng::mix(seed, 0xb1ull));
             return world;
           }),
           py::arg("task"), py::arg("seed") = 0, py::arg("config_json") = "")
      .def("reset",
           [](PyWorld& self, std::uint64_t seed) {
             self.state = w::reset(self.task, seed, self.cfg.world);
             self.rng = Rng(Rng::mix(seed, 0xb1ull));
             return w::observe(self.state, self.task);
           })
      .def("observe",
           [](PyWorld& self) { return w::observe(self.state, self.task); })
      .def("step",
           [](PyWorld& self, const w::ArmAction& l, const w::ArmAction& r) {
             self.state = w::step(self.state, l, r, self.cfg.world);
             return w::observe(self.state, self.task);
           })
      .def("expert_step",
           [](PyWorld& self) {
             auto [l, r] = w::expert_step(self.state, self.task, self.rng,
                                          self.cfg.world);
             return py::make_tuple(l, r);
           })
      .def("score", [](PyWorld& self) { return w::score(self.state, self.task); })
      .def("max_score", [](PyWorld& self) { return w::max_score(self.task); })
      .def("done", [](PyWorld& self) { return w::task_done(self.state, self.task); })
      .def("terminal",
           [](PyWorld& self) { return w::terminal(self.state, self.task); })
      .def_property_readonly(
          "step_index", [](PyWorld& self) { return self.state.step_index; });

  m.attr("OBS_DIM") = w::kObsDim;

  m.def(
      "generate",
      [](const std::string& task, int episodes, std::uint64_t seed,
         const std::string& path, const std::string& config_json) {
        RunConfig cfg = config_from_json(config_json);
        auto demos =
            data::generate(w::parse_task(task, cfg.world), episodes, seed, cfg);
        data::save(demos, path, task, seed, cfg);
        long steps = 0;
        for (const auto& d : demos) steps += static_cast<long>(d.steps.size());
        return steps;
      },
      py::arg("task"), py::arg("episodes"), py::arg("seed"), py::arg("path"),
      py::arg("config_json") = "",
      "Generate expert demonstrations and write them as JSON lines.");

  m.def(
      "train",
      [](const std::string& arch, const std::vector<std::string>& data_paths,
         const std::string& out_dir, const std::string& config_json) {
        RunConfig cfg = config_from_json(config_json);
        return runner::run_train(arch, data_paths, out_dir, cfg);
      },
      py::arg("arch"), py::arg("data_paths"), py::arg("out_dir"),
      py::arg("config_json") = "",
      "Train a policy variant; returns the checkpoint base path.");

  m.def(
      "rollout",
      [](const std::string& ckpt, const std::string& task, std::uint64_t seed,
         const std::string& config_json) {
        RunConfig cfg = config_from_json(config_json);
        p::PolicyModel model = p::load_model(ckpt);
        w::TaskSpec t = w::parse_task(task, cfg.world);
        sampler::Rollout r = sampler::rollout(
            model, t, w::task_horizon(t, cfg.world), seed, cfg);
        return rollout_dict(r);
      },
      py::arg("ckpt"), py::arg("task"), py::arg("seed") = 0,
      py::arg("config_json") = "",
      "Closed-loop policy rollout; returns score, gate trace, and lengths.");

  m.def(
      "eval_suite",
      [](const std::string& suite, const std::string& ckpt,
         const std::string& out_dir, const std::string& config_json, int jobs) {
        RunConfig cfg = config_from_json(config_json);
        runner::EvalArgs args;
        args.suite = suite;
        args.ckpt = ckpt;
        args.jobs = jobs;
        return runner::run_eval(args, out_dir, cfg);
      },
      py::arg("suite"), py::arg("ckpt"), py::arg("out_dir"),
      py::arg("config_json") = "", py::arg("jobs") = 1,
      "Run an evaluation suite; returns the report path.");

  m.def(
      "conditional_mi",
      [](const std::string& ckpt, const std::string& task_name, int n_samples,
         int bins, std::uint64_t seed, const std::string& config_json,
         bool force_gate_off) {
        RunConfig cfg = config_from_json(config_json);
        p::PolicyModel model = p::load_model(ckpt);
        w::TaskSpec task = w::parse_task(task_name, cfg.world);
        w::WorldState s = w::reset(task, seed, cfg.world);
        auto d = evalsuite::conditional_mi(
            model, task, w::observe(s, task), n_samples, bins, seed, cfg,
            force_gate_off ? sampler::GateOverride::ForceOff
                           : sampler::GateOverride::None);
        py::dict out;
        out["mi"] = d.mi;
        out["bias_floor"] = d.bias_floor;
        out["floor_se"] = d.floor_se;
        return out;
      },
      py::arg("ckpt"), py::arg("task"), py::arg("n_samples") = 4096,
      py::arg("bins") = 2, py::arg("seed") = 0, py::arg("config_json") = "",
      py::arg("force_gate_off") = false,
      "Plug-in conditional MI between the arms' sampled actions at a fixed "
      "context.");

  m.def("gradcheck", &runner::gradcheck_battery, py::arg("seeds") = 5,
        py::arg("eps") = 1e-3,
        "Max relative error of reverse-mode gradients vs central differences.");

  m.def("default_config", [] { return RunConfig{}.to_json(); });
  m.def("version", [] { return std::string(runner::kToolVersion); });
}
