#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "skilllab/config.hpp"

namespace skilllab::runner {

constexpr const char* kToolVersion = "skilllab 0.1.0";

// Exit-code carriers: 2 config, 3 data, 4 numeric.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Writes the resolved config, tool info, and the timestamp sidecar into dir.
void write_run_artifacts(const std::string& dir, const RunConfig& cfg,
                         const std::string& command);

// gen: dataset + manifest under out_dir; returns the dataset path.
std::string run_gen(const std::string& task, int episodes, std::uint64_t seed,
                    const std::string& out_dir, const RunConfig& cfg);

// train: checkpoint (ckpt.json/.bin), log.csv, resolved config. Returns the
// checkpoint base path.
std::string run_train(const std::string& arch,
                      const std::vector<std::string>& data_paths,
                      const std::string& out_dir, const RunConfig& cfg);

struct EvalArgs {
  std::string suite;                 // recompose|seen|coop|longhorizon|continual
  std::string ckpt;                  // checkpoint base path
  std::string ckpt_dir;              // continual: directory of <variant>.ckpt
  std::vector<std::string> data;     // continual: dual-arm demos
  std::vector<int> k_list = {0, 5, 10, 20, 30};
  bool no_attn = false;              // coop ablation: force the gate closed
  std::string only_task;             // longhorizon: restrict to one task
  int jobs = 1;
};
std::string run_eval(const EvalArgs& args, const std::string& out_dir,
                     const RunConfig& cfg);

struct DiagArgs {
  std::string kind;   // mi|support|gradcheck
  std::string ckpt;
  int jobs = 1;
};
// Returns the max relative error for gradcheck (also printed); writes a JSON
// report for mi/support.
double run_diag(const DiagArgs& args, const std::string& out_dir,
                const RunConfig& cfg);

// report: merge eval JSON reports into one CSV plus SVG plots.
void run_report(const std::vector<std::string>& inputs,
                const std::string& out_dir);

// The grad-check battery: every tape primitive plus one full gated-loss pass
// on a tiny model. Returns the max relative error over `seeds` random draws.
double gradcheck_battery(int seeds, double eps);

}  // namespace skilllab::runner
