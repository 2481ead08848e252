#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "skilllab/config.hpp"
#include "skilllab/runner.hpp"

namespace {

using skilllab::RunConfig;
namespace runner = skilllab::runner;

RunConfig resolve_config(const std::string& config_path, long seed_flag) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
  if (const char* env = std::getenv("SKILLLAB_SEED")) cfg.seed = std::stoull(env);
  if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
  cfg.train.seed = cfg.seed;
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skilllab: dual-arm skill composition lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", task, arch, suite, kind, only_task;
  std::string ckpt, ckpt_dir, data_list, inputs, klist_str = "0,5,10,20,30";
  int episodes = 50;
  long seed_flag = -1;
  int jobs = 1;
  bool no_attn = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed_flag, "seed override");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate demonstrations");
  gen->add_option("--task", task, "task name, e.g. pair:L1,IDLE")->required();
  gen->add_option("--episodes", episodes, "episode count");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "train a policy");
  train->add_option("--arch", arch, "skillvla|mono|shared|twin")->required();
  train->add_option("--data", data_list, "comma-separated dataset paths")
      ->required();
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "run an evaluation suite");
  eval->add_option("--suite", suite,
                   "recompose|seen|coop|longhorizon|continual")->required();
  eval->add_option("--ckpt", ckpt, "checkpoint base path (no extension)");
  eval->add_option("--ckpts", ckpt_dir, "checkpoint directory (continual)");
  eval->add_option("--data", data_list, "datasets (continual fine-tuning)");
  eval->add_option("--klist", klist_str, "continual demo counts");
  eval->add_option("--task", only_task, "restrict longhorizon to one task");
  eval->add_flag("--no-attn", no_attn, "force the cooperation gate closed");
  eval->add_option("--jobs", jobs, "parallel trials");
  add_common(eval);

  CLI::App* diag = app.add_subcommand("diag", "diagnostics");
  diag->add_option("--kind", kind, "mi|support|gradcheck")->required();
  diag->add_option("--ckpt", ckpt, "checkpoint base path");
  diag->add_option("--jobs", jobs, "parallel trials");
  add_common(diag);

  CLI::App* report = app.add_subcommand("report", "merge eval reports");
  report->add_option("--in", inputs, "comma-separated report JSON files")
      ->required();
  report->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = resolve_config(config_path, seed_flag);
    if (gen->parsed()) {
      runner::run_gen(task, episodes, cfg.seed, out_dir, cfg);
    } else if (train->parsed()) {
      runner::run_train(arch, split_list(data_list), out_dir, cfg);
    } else if (eval->parsed()) {
      runner::EvalArgs args;
      args.suite = suite;
      args.ckpt = ckpt;
      args.ckpt_dir = ckpt_dir;
      args.data = split_list(data_list);
      args.no_attn = no_attn;
      args.only_task = only_task;
      args.jobs = jobs;
      if (!klist_str.empty()) {
        args.k_list.clear();
        for (const auto& k : split_list(klist_str))
          args.k_list.push_back(std::stoi(k));
      }
      runner::run_eval(args, out_dir, cfg);
    } else if (diag->parsed()) {
      runner::DiagArgs args;
      args.kind = kind;
      args.ckpt = ckpt;
      args.jobs = jobs;
      double v = runner::run_diag(args, out_dir, cfg);
      if (kind == "gradcheck" && !(v < 1e-3)) return 1;
    } else if (report->parsed()) {
      runner::run_report(split_list(inputs), out_dir);
    }
  } catch (const runner::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const runner::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const runner::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
