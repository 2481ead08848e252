#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skilllab/config.hpp"
#include "skilllab/data.hpp"
#include "skilllab/policy.hpp"
#include "skilllab/sampler.hpp"

namespace skilllab::evalsuite {

namespace p = skilllab::policy;
namespace w = skilllab::world;

// ---------------------------------------------------------------------------
// Reports

struct MIDiagnostic {
  std::string context;
  int bins = 0;
  int n_samples = 0;
  double mi = 0.0;          // plug-in estimate, nats
  double bias_floor = 0.0;  // shuffled-marginals estimate (mean)
  double floor_se = 0.0;    // standard error of the shuffle mean
};

struct EvalReport {
  std::string suite;
  std::uint64_t seed = 0;
  int n_trials = 0;
  std::map<std::string, double> success;       // per task
  std::map<std::string, double> progress;      // per task, score / max
  std::map<std::string, double> t_norm;        // absent if undefined
  std::map<std::string, double> gate_agreement;
  std::map<std::string, double> gate_variance;  // within-stage variance of the gate
  std::vector<std::vector<double>> matrix;     // recomposition grid
  double matrix_avg = 0.0;
  std::vector<MIDiagnostic> mi_table;
  // continual curves: variant -> (K, success) points
  std::map<std::string, std::vector<std::pair<int, double>>> curves;
  sampler::GateTrace sample_trace;             // one gate trace for plotting
  std::vector<int> sample_trace_stage;         // oracle stage labels for it

  std::string to_json() const;
};

// ---------------------------------------------------------------------------
// Suites. `jobs` parallelizes independent trials; results are byte-identical
// for any job count.

// 9 unseen left x right pairings plus the 6 seen single-skill tasks.
EvalReport recomposition_suite(p::PolicyModel& model, int n_trials,
                               std::uint64_t seed, const RunConfig& cfg,
                               int jobs = 1);

// Seen single-skill tasks only (the recomposition report includes them too).
EvalReport seen_suite(p::PolicyModel& model, int n_trials, std::uint64_t seed,
                      const RunConfig& cfg, int jobs = 1);

// The three cooperative dual-arm tasks; optionally force the gate closed.
EvalReport coop_suite(p::PolicyModel& model, int n_trials, std::uint64_t seed,
                      const RunConfig& cfg, bool force_gate_off = false,
                      int jobs = 1);

// Long-horizon tasks: progress rate, progress-normalized completion time,
// gate/stage step agreement, within-stage gate variance.
EvalReport longhorizon_suite(p::PolicyModel& model, int n_trials,
                             std::uint64_t seed, const RunConfig& cfg,
                             int jobs = 1, const std::string& only_task = "");

// Continual learning: fine-tune each pretrained model on K dual-arm
// demonstrations and evaluate the dual task.
EvalReport continual_suite(
    std::map<std::string, p::PolicyModel>& pretrained,
    const std::vector<data::Demonstration>& dual_demos,
    const std::vector<int>& k_list, int n_trials, std::uint64_t seed,
    const RunConfig& cfg, int jobs = 1);

// ---------------------------------------------------------------------------
// Entanglement diagnostics

// Plug-in conditional MI between the two arms' sampled actions at a fixed
// observation. Each arm's 3 components are discretized into bins^3 equal-width
// cells over [-1,1]; the bias floor comes from independently shuffled
// marginals of the same samples.
MIDiagnostic conditional_mi(p::PolicyModel& model, const w::TaskSpec& task,
                            const std::vector<float>& obs, int n_samples,
                            int bins, std::uint64_t seed, const RunConfig& cfg,
                            sampler::GateOverride ov = sampler::GateOverride::None);

// Per-arm action-space boxes; the coverage fraction counts samples whose two
// arm actions both land inside.
struct ActionBox {
  std::array<float, 3> lo;
  std::array<float, 3> hi;
};
double support_coverage(p::PolicyModel& model, const w::TaskSpec& task,
                        const std::vector<float>& obs, const ActionBox& left,
                        const ActionBox& right, int n_samples,
                        std::uint64_t seed, const RunConfig& cfg,
                        sampler::GateOverride ov = sampler::GateOverride::None);

// The defining expert action at a context (zero noise), the oracle for
// support_coverage target regions.
ActionBox expert_box(const w::WorldState& state, w::SkillId skill, w::Arm arm,
                     const w::TaskSpec& task, const RunConfig& cfg, double tol);

// Plug-in MI core over discrete label pairs (exposed for the estimator
// sanity tests).
double plug_in_mi(const std::vector<int>& a, const std::vector<int>& b);

// Progress-normalized completion time: mean of t_i / s_i over episodes with
// s_i > 0; empty optional if no episode made progress.
std::optional<double> t_norm(const std::vector<std::pair<int, double>>& episodes);

}  // namespace skilllab::evalsuite
