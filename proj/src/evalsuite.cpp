#include "skilllab/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "skilllab/learn.hpp"

namespace skilllab::evalsuite {

using json = nlohmann::ordered_json;

namespace {

// index-deterministic parallel map: results identical for any job count
template <typename Fn>
void parallel_for(int n, int jobs, Fn&& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < std::min(jobs, n); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// success rate of one task over seeded trials
struct TaskEval {
  double success = 0.0;
  double progress = 0.0;
  std::optional<double> tnorm;
  double gate_agreement = 0.0;
  double gate_variance = 0.0;
  sampler::Rollout sample;          // trial 0, kept for traces
  std::vector<int> sample_stages;
};

TaskEval eval_task(p::PolicyModel& model, const w::TaskSpec& task, int n_trials,
                   std::uint64_t seed, const RunConfig& cfg,
                   sampler::GateOverride ov, int jobs) {
  int horizon = w::task_horizon(task, cfg.world);
  std::vector<double> succ(static_cast<std::size_t>(n_trials));
  std::vector<double> prog(static_cast<std::size_t>(n_trials));
  std::vector<double> agree(static_cast<std::size_t>(n_trials));
  std::vector<double> gvar(static_cast<std::size_t>(n_trials));
  std::vector<std::pair<int, double>> episodes(static_cast<std::size_t>(n_trials));
  sampler::Rollout sample;
  std::vector<int> sample_stages;
  std::mutex sample_mu;

  parallel_for(n_trials, jobs, [&](int i) {
    // read-only model snapshot per spec concurrency contract; PolicyModel is
    // only mutated by training
    sampler::Rollout r = sampler::rollout(
        model, task, horizon, Rng::mix(seed, static_cast<std::uint64_t>(i)), cfg,
        ov);
    succ[static_cast<std::size_t>(i)] = r.success ? 1.0 : 0.0;
    double s = static_cast<double>(r.final_score) / r.max_score;
    prog[static_cast<std::size_t>(i)] = s;
    episodes[static_cast<std::size_t>(i)] = {r.steps, s};
    // gate/stage agreement and within-stage gate variance
    long match = 0;
    std::vector<int> stages(static_cast<std::size_t>(r.steps));
    for (int t = 0; t < r.steps; ++t) {
      w::Stage st = w::current_stage(r.states[static_cast<std::size_t>(t)], task,
                                     cfg.world);
      stages[static_cast<std::size_t>(t)] = st.dual ? 1 : 0;
      if ((st.dual ? 1 : 0) == r.gate.alpha[static_cast<std::size_t>(t)]) ++match;
    }
    agree[static_cast<std::size_t>(i)] =
        r.steps ? static_cast<double>(match) / r.steps : 1.0;
    // variance of the applied gate value within each contiguous stage block
    double var_acc = 0.0;
    long var_n = 0;
    int b0 = 0;
    for (int t = 1; t <= r.steps; ++t) {
      if (t == r.steps || stages[static_cast<std::size_t>(t)] !=
                              stages[static_cast<std::size_t>(b0)]) {
        if (t - b0 >= 2) {
          double m = 0.0;
          for (int u = b0; u < t; ++u) m += r.gate.yhat[static_cast<std::size_t>(u)];
          m /= (t - b0);
          for (int u = b0; u < t; ++u) {
            double d = r.gate.yhat[static_cast<std::size_t>(u)] - m;
            var_acc += d * d;
            ++var_n;
          }
        }
        b0 = t;
      }
    }
    gvar[static_cast<std::size_t>(i)] = var_n ? var_acc / var_n : 0.0;
    if (i == 0) {
      std::lock_guard<std::mutex> lock(sample_mu);
      sample = std::move(r);
      sample_stages = std::move(stages);
    }
  });

  TaskEval out;
  out.success = mean_of(succ);
  out.progress = mean_of(prog);
  out.tnorm = t_norm(episodes);
  out.gate_agreement = mean_of(agree);
  out.gate_variance = mean_of(gvar);
  out.sample = std::move(sample);
  out.sample_stages = std::move(sample_stages);
  return out;
}

w::TaskSpec pair_task(w::SkillId l, w::SkillId r) {
  w::TaskSpec t;
  t.kind = w::TaskKind::PairSkills;
  t.scene = w::SceneKind::Pair;
  t.left = l;
  t.right = r;
  return t;
}

}  // namespace

std::optional<double> t_norm(const std::vector<std::pair<int, double>>& episodes) {
  double acc = 0.0;
  long n = 0;
  for (const auto& [t, s] : episodes) {
    if (s > 0.0) {
      acc += static_cast<double>(t) / s;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

EvalReport recomposition_suite(p::PolicyModel& model, int n_trials,
                               std::uint64_t seed, const RunConfig& cfg,
                               int jobs) {
  for (const char* s : {"L1", "L2", "L3", "R1", "R2", "R3"}) {
    const auto& inv = model.trained_skills;
    if (std::find(inv.begin(), inv.end(), s) == inv.end())
      throw std::runtime_error(std::string("model manifest lacks skill ") + s);
  }
  EvalReport rep;
  rep.suite = "recompose";
  rep.seed = seed;
  rep.n_trials = n_trials;
  const w::SkillId ls[] = {w::SkillId::L1, w::SkillId::L2, w::SkillId::L3};
  const w::SkillId rs[] = {w::SkillId::R1, w::SkillId::R2, w::SkillId::R3};
  rep.matrix.assign(3, std::vector<double>(3, 0.0));
  double acc = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      w::TaskSpec task = pair_task(ls[i], rs[j]);
      TaskEval e = eval_task(model, task, n_trials,
                             Rng::mix(seed, static_cast<std::uint64_t>(i * 3 + j)),
                             cfg, sampler::GateOverride::None, jobs);
      rep.matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          e.success;
      rep.success[task.name()] = e.success;
      acc += e.success;
    }
  rep.matrix_avg = acc / 9.0;
  // seen tasks (each skill paired with IDLE)
  int k = 9;
  for (w::SkillId l : ls) {
    w::TaskSpec task = pair_task(l, w::SkillId::Idle);
    rep.success[task.name()] =
        eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg,
                  sampler::GateOverride::None, jobs)
            .success;
  }
  for (w::SkillId r : rs) {
    w::TaskSpec task = pair_task(w::SkillId::Idle, r);
    rep.success[task.name()] =
        eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg,
                  sampler::GateOverride::None, jobs)
            .success;
  }
  return rep;
}

EvalReport seen_suite(p::PolicyModel& model, int n_trials, std::uint64_t seed,
                      const RunConfig& cfg, int jobs) {
  EvalReport rep;
  rep.suite = "seen";
  rep.seed = seed;
  rep.n_trials = n_trials;
  int k = 0;
  for (w::SkillId l : {w::SkillId::L1, w::SkillId::L2, w::SkillId::L3}) {
    w::TaskSpec task = pair_task(l, w::SkillId::Idle);
    rep.success[task.name()] =
        eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg,
                  sampler::GateOverride::None, jobs)
            .success;
  }
  for (w::SkillId r : {w::SkillId::R1, w::SkillId::R2, w::SkillId::R3}) {
    w::TaskSpec task = pair_task(w::SkillId::Idle, r);
    rep.success[task.name()] =
        eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg,
                  sampler::GateOverride::None, jobs)
            .success;
  }
  double acc = 0.0;
  for (const auto& [_, v] : rep.success) acc += v;
  rep.matrix_avg = rep.success.empty() ? 0.0 : acc / rep.success.size();
  return rep;
}

EvalReport coop_suite(p::PolicyModel& model, int n_trials, std::uint64_t seed,
                      const RunConfig& cfg, bool force_gate_off, int jobs) {
  EvalReport rep;
  rep.suite = force_gate_off ? "coop_no_attn" : "coop";
  rep.seed = seed;
  rep.n_trials = n_trials;
  sampler::GateOverride ov = force_gate_off ? sampler::GateOverride::ForceOff
                                            : sampler::GateOverride::None;
  int k = 0;
  for (w::SkillId d : {w::SkillId::D1, w::SkillId::D2, w::SkillId::D3}) {
    w::TaskSpec task;
    task.kind = w::TaskKind::DualSkill;
    task.scene = w::SceneKind::Pair;
    task.dual = d;
    TaskEval e = eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg, ov,
                           jobs);
    rep.success[task.name()] = e.success;
  }
  double acc = 0.0;
  for (const auto& [_, v] : rep.success) acc += v;
  rep.matrix_avg = acc / 3.0;
  return rep;
}

EvalReport longhorizon_suite(p::PolicyModel& model, int n_trials,
                             std::uint64_t seed, const RunConfig& cfg, int jobs,
                             const std::string& only_task) {
  EvalReport rep;
  rep.suite = "longhorizon";
  rep.seed = seed;
  rep.n_trials = n_trials;
  int k = 0;
  for (const char* name : {"tubes", "collect"}) {
    if (!only_task.empty() && only_task != name) continue;
    w::TaskSpec task = w::parse_task(name, cfg.world);
    TaskEval e = eval_task(model, task, n_trials, Rng::mix(seed, k++), cfg,
                           sampler::GateOverride::None, jobs);
    rep.success[name] = e.success;
    rep.progress[name] = e.progress;
    if (e.tnorm) rep.t_norm[name] = *e.tnorm;
    rep.gate_agreement[name] = e.gate_agreement;
    rep.gate_variance[name] = e.gate_variance;
    if (std::string(name) == (only_task.empty() ? "tubes" : only_task)) {
      rep.sample_trace = e.sample.gate;
      rep.sample_trace_stage = e.sample_stages;
    }
  }
  return rep;
}

EvalReport continual_suite(std::map<std::string, p::PolicyModel>& pretrained,
                           const std::vector<data::Demonstration>& dual_demos,
                           const std::vector<int>& k_list, int n_trials,
                           std::uint64_t seed, const RunConfig& cfg, int jobs) {
  EvalReport rep;
  rep.suite = "continual";
  rep.seed = seed;
  rep.n_trials = n_trials;
  w::TaskSpec dual = w::parse_task("bar:dual", cfg.world);
  for (auto& [name, model] : pretrained) {
    std::vector<std::pair<int, double>> curve;
    for (int k : k_list) {
      learn::TrainResult ft = learn::continual_finetune(model, dual_demos, k, cfg);
      TaskEval e = eval_task(ft.model, dual, n_trials,
                             Rng::mix(seed, static_cast<std::uint64_t>(k)), cfg,
                             sampler::GateOverride::None, jobs);
      curve.emplace_back(k, e.success);
    }
    rep.curves[name] = curve;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// diagnostics

double plug_in_mi(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("plug_in_mi: misaligned samples");
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> pab;
  double n = static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    pab[{a[i], b[i]}] += 1.0;
  }
  double mi = 0.0;
  for (const auto& [key, c] : pab) {
    double pxy = c / n;
    double px = pa[key.first] / n;
    double py = pb[key.second] / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return std::max(0.0, mi);
}

namespace {

int action_cell(const w::ArmAction& a, int bins) {
  auto bin_of = [bins](float v) {
    double x = (std::clamp(v, -1.0f, 1.0f) + 1.0) / 2.0;  // [0,1]
    int b = static_cast<int>(x * bins);
    return std::min(b, bins - 1);
  };
  return (bin_of(a.dx) * bins + bin_of(a.dy)) * bins + bin_of(a.grip);
}

}  // namespace

MIDiagnostic conditional_mi(p::PolicyModel& model, const w::TaskSpec& task,
                            const std::vector<float>& obs, int n_samples,
                            int bins, std::uint64_t seed, const RunConfig& cfg,
                            sampler::GateOverride ov) {
  if (bins < 2) throw std::invalid_argument("conditional_mi: bins >= 2");
  if (n_samples < 100 * bins * bins)
    throw std::invalid_argument("conditional_mi: need at least 100*bins^2 samples");
  std::vector<int> cl(static_cast<std::size_t>(n_samples));
  std::vector<int> cr(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    sampler::SampleOut s = sampler::sample_actions(model, obs, task,
                                                   cfg.sampler.flow_steps, rng,
                                                   cfg, ov);
    cl[static_cast<std::size_t>(i)] = action_cell(s.a_left, bins);
    cr[static_cast<std::size_t>(i)] = action_cell(s.a_right, bins);
  }
  MIDiagnostic d;
  d.context = task.name();
  d.bins = bins;
  d.n_samples = n_samples;
  d.mi = plug_in_mi(cl, cr);
  // bias floor: same estimator on independently shuffled pairings
  std::vector<double> floors;
  Rng shuffle_rng(Rng::mix(seed, 0x51511ull));
  for (int s = 0; s < cfg.eval.mi_shuffles; ++s) {
    std::vector<int> perm(cr);
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[shuffle_rng.below(i)]);
    floors.push_back(plug_in_mi(cl, perm));
  }
  d.bias_floor = mean_of(floors);
  double var = 0.0;
  for (double f : floors) var += (f - d.bias_floor) * (f - d.bias_floor);
  var /= std::max<std::size_t>(1, floors.size() - 1);
  d.floor_se = std::sqrt(var / static_cast<double>(floors.size()));
  return d;
}

double support_coverage(p::PolicyModel& model, const w::TaskSpec& task,
                        const std::vector<float>& obs, const ActionBox& left,
                        const ActionBox& right, int n_samples,
                        std::uint64_t seed, const RunConfig& cfg,
                        sampler::GateOverride ov) {
  for (int c = 0; c < 3; ++c)
    if (left.hi[c] <= left.lo[c] || right.hi[c] <= right.lo[c])
      throw std::invalid_argument("support_coverage: degenerate target region");
  long inside = 0;
  for (int i = 0; i < n_samples; ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    sampler::SampleOut s = sampler::sample_actions(model, obs, task,
                                                   cfg.sampler.flow_steps, rng,
                                                   cfg, ov);
    auto in_box = [](const w::ArmAction& a, const ActionBox& b) {
      const float v[3] = {a.dx, a.dy, a.grip};
      for (int c = 0; c < 3; ++c)
        if (v[c] < b.lo[c] || v[c] > b.hi[c]) return false;
      return true;
    };
    if (in_box(s.a_left, left) && in_box(s.a_right, right)) ++inside;
  }
  return static_cast<double>(inside) / n_samples;
}

ActionBox expert_box(const w::WorldState& state, w::SkillId skill, w::Arm arm,
                     const w::TaskSpec& task, const RunConfig& cfg, double tol) {
  // zero-noise expert action at the context
  RunConfig quiet = cfg;
  quiet.world.sigma_a = 0.0;
  quiet.world.sigma_idle = 0.0;
  quiet.world.sigma_couple = 0.0;
  quiet.world.p_go = 1.0;  // deterministic go
  Rng rng(1);
  w::ArmAction a = w::expert_action(state, skill, arm, rng, task, quiet.world);
  ActionBox box;
  const float v[3] = {std::clamp(a.dx, -1.0f, 1.0f), std::clamp(a.dy, -1.0f, 1.0f),
                      a.grip};
  for (int c = 0; c < 3; ++c) {
    box.lo[c] = static_cast<float>(v[c] - tol);
    box.hi[c] = static_cast<float>(v[c] + tol);
  }
  // grip is a threshold channel: accept the full commanded half-range
  if (a.grip > 0) {
    box.lo[2] = 0.0f;
    box.hi[2] = 1.0f;
  } else {
    box.lo[2] = -1.0f;
    box.hi[2] = 0.0f;
  }
  return box;
}

// ---------------------------------------------------------------------------
// serialization

std::string EvalReport::to_json() const {
  json j;
  j["suite"] = suite;
  j["seed"] = seed;
  j["n_trials"] = n_trials;
  if (!matrix.empty()) {
    j["matrix"] = matrix;
    j["matrix_avg"] = matrix_avg;
  }
  if (!success.empty()) j["success"] = success;
  if (!progress.empty()) j["progress"] = progress;
  if (!t_norm.empty()) j["t_norm"] = t_norm;
  if (!gate_agreement.empty()) j["gate_agreement"] = gate_agreement;
  if (!gate_variance.empty()) j["gate_variance"] = gate_variance;
  if (!mi_table.empty()) {
    json arr = json::array();
    for (const auto& d : mi_table) {
      arr.push_back({{"context", d.context},
                     {"bins", d.bins},
                     {"n_samples", d.n_samples},
                     {"mi", d.mi},
                     {"bias_floor", d.bias_floor},
                     {"floor_se", d.floor_se}});
    }
    j["mi_table"] = arr;
  }
  if (!curves.empty()) {
    json c;
    for (const auto& [name, pts] : curves) {
      json arr = json::array();
      for (const auto& [k, v] : pts) arr.push_back({{"K", k}, {"success", v}});
      c[name] = arr;
    }
    j["curves"] = c;
  }
  if (!sample_trace.yhat.empty()) {
    j["sample_trace"] = {{"yhat", sample_trace.yhat},
                         {"alpha", sample_trace.alpha},
                         {"stage", sample_trace_stage}};
  }
  return j.dump(1);
}

}  // namespace skilllab::evalsuite
