#include "skilllab/runner.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>

#include <nlohmann/json.hpp>

#include "skilllab/data.hpp"
#include "skilllab/evalsuite.hpp"
#include "skilllab/learn.hpp"
#include "skilllab/policy.hpp"
#include "skilllab/report.hpp"
#include "skilllab/sampler.hpp"

namespace skilllab::runner {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
namespace w = skilllab::world;
namespace p = skilllab::policy;
namespace dc = skilllab::diffcore;

namespace {

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name) out.push_back((c == ':' || c == ',') ? '_' : c);
  return out;
}

std::vector<data::Demonstration> load_all(const std::vector<std::string>& paths) {
  if (paths.empty()) throw ConfigError("no dataset paths given");
  std::vector<data::Demonstration> demos;
  for (const auto& path : paths) {
    if (!fs::exists(path)) throw ConfigError("missing dataset: " + path);
    std::vector<data::Demonstration> part = data::load(path);
    for (auto& d : part) demos.push_back(std::move(d));
  }
  return demos;
}

}  // namespace

void write_run_artifacts(const std::string& dir, const RunConfig& cfg,
                         const std::string& command) {
  fs::create_directories(dir);
  write_text_file(dir + "/config.resolved.json", cfg.to_json() + "\n");
  json info;
  info["tool"] = kToolVersion;
  info["command"] = command;
  write_text_file(dir + "/run_info.json", info.dump(1) + "\n");
  // timestamps stay out of the deterministic artifact set
  json side;
  side["walltime_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count();
  write_text_file(dir + "/run_sidecar.json", side.dump(1) + "\n");
}

std::string run_gen(const std::string& task_str, int episodes,
                    std::uint64_t seed, const std::string& out_dir,
                    const RunConfig& cfg) {
  w::TaskSpec task;
  try {
    task = w::parse_task(task_str, cfg.world);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::vector<data::Demonstration> demos;
  try {
    demos = data::generate(task, episodes, seed, cfg);
  } catch (const std::runtime_error& e) {
    throw DataError(e.what());
  }
  write_run_artifacts(out_dir, cfg, "gen " + task_str);
  std::string path = out_dir + "/" + sanitize(task_str) + ".jsonl";
  data::save(demos, path, task_str, seed, cfg);
  long steps = 0;
  for (const auto& d : demos) steps += static_cast<long>(d.steps.size());
  std::cout << "wrote " << demos.size() << " episodes (" << steps << " steps) to "
            << path << "\n";
  return path;
}

std::string run_train(const std::string& arch,
                      const std::vector<std::string>& data_paths,
                      const std::string& out_dir, const RunConfig& cfg) {
  p::Variant variant;
  try {
    variant = p::variant_from_name(arch);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::vector<data::Demonstration> demos = load_all(data_paths);
  learn::TrainResult result;
  try {
    result = learn::train_policy(demos, variant, cfg);
  } catch (const std::runtime_error& e) {
    throw NumericError(e.what());
  }
  write_run_artifacts(out_dir, cfg, "train " + arch);
  std::string base = out_dir + "/ckpt";
  p::save_model(result.model, base, cfg.hash());
  write_text_file(out_dir + "/log.csv", learn::log_csv(result.log));
  std::cout << "trained " << p::variant_name(variant) << " ("
            << result.model.params.param_count() << " params) -> " << base
            << ".json\n";
  return base;
}

std::string run_eval(const EvalArgs& args, const std::string& out_dir,
                     const RunConfig& cfg) {
  write_run_artifacts(out_dir, cfg, "eval " + args.suite);
  evalsuite::EvalReport rep;
  if (args.suite == "continual") {
    if (args.ckpt_dir.empty())
      throw ConfigError("continual suite needs --ckpts <dir>");
    std::map<std::string, p::PolicyModel> models;
    for (const auto& entry : fs::directory_iterator(args.ckpt_dir)) {
      std::string path = entry.path().string();
      if (path.size() > 5 && path.substr(path.size() - 5) == ".json" &&
          path.find(".manifest.") == std::string::npos) {
        p::PolicyModel m = p::load_model(path.substr(0, path.size() - 5));
        models.emplace(p::variant_name(m.variant), std::move(m));
      }
    }
    if (models.empty()) throw ConfigError("no checkpoints in " + args.ckpt_dir);
    std::vector<data::Demonstration> dual = load_all(args.data);
    rep = evalsuite::continual_suite(models, dual, args.k_list, cfg.eval.n_trials,
                                     cfg.seed, cfg, args.jobs);
  } else {
    if (args.ckpt.empty()) throw ConfigError("missing --ckpt");
    if (!fs::exists(args.ckpt + ".json"))
      throw ConfigError("missing checkpoint: " + args.ckpt + ".json");
    p::PolicyModel model = p::load_model(args.ckpt);
    if (args.suite == "recompose")
      rep = evalsuite::recomposition_suite(model, cfg.eval.n_trials, cfg.seed,
                                           cfg, args.jobs);
    else if (args.suite == "seen")
      rep = evalsuite::seen_suite(model, cfg.eval.n_trials, cfg.seed, cfg,
                                  args.jobs);
    else if (args.suite == "coop")
      rep = evalsuite::coop_suite(model, cfg.eval.n_trials, cfg.seed, cfg,
                                  args.no_attn, args.jobs);
    else if (args.suite == "longhorizon")
      rep = evalsuite::longhorizon_suite(model, cfg.eval.n_trials, cfg.seed, cfg,
                                         args.jobs, args.only_task);
    else
      throw ConfigError("unknown suite: " + args.suite);
  }
  std::string path = out_dir + "/" + rep.suite + ".json";
  write_text_file(path, rep.to_json() + "\n");
  std::cout << "wrote " << path << "\n";
  return path;
}

namespace {

// recomposition context for the mi/support diagnostics: an unseen pairing
struct DiagContext {
  w::TaskSpec task;
  w::WorldState state;
  std::vector<float> obs;
};

DiagContext diag_context(const RunConfig& cfg) {
  DiagContext ctx;
  ctx.task = w::parse_task("pair:L1,R2", cfg.world);
  ctx.state = w::reset(ctx.task, 17, cfg.world);
  ctx.obs = w::observe(ctx.state, ctx.task);
  return ctx;
}

}  // namespace

double run_diag(const DiagArgs& args, const std::string& out_dir,
                const RunConfig& cfg) {
  write_run_artifacts(out_dir, cfg, "diag " + args.kind);
  if (args.kind == "gradcheck") {
    double err = gradcheck_battery(20, 1e-3);
    json j;
    j["kind"] = "gradcheck";
    j["max_rel_error"] = err;
    j["threshold"] = 1e-3;
    write_text_file(out_dir + "/gradcheck.json", j.dump(1) + "\n");
    std::cout << "gradcheck max rel error: " << err << "\n";
    return err;
  }
  if (args.ckpt.empty()) throw ConfigError("missing --ckpt");
  p::PolicyModel model = p::load_model(args.ckpt);
  DiagContext ctx = diag_context(cfg);
  if (args.kind == "mi") {
    auto ov = model.has_gate() ? sampler::GateOverride::ForceOff
                               : sampler::GateOverride::None;
    evalsuite::MIDiagnostic d = evalsuite::conditional_mi(
        model, ctx.task, ctx.obs, cfg.eval.mi_samples, cfg.eval.mi_bins,
        cfg.seed, cfg, ov);
    json j;
    j["kind"] = "mi";
    j["context"] = d.context;
    j["mi"] = d.mi;
    j["bias_floor"] = d.bias_floor;
    j["floor_se"] = d.floor_se;
    j["bins"] = d.bins;
    j["n_samples"] = d.n_samples;
    write_text_file(out_dir + "/mi.json", j.dump(1) + "\n");
    std::cout << "conditional MI at " << d.context << ": " << d.mi
              << " (floor " << d.bias_floor << " +/- " << d.floor_se << ")\n";
    return d.mi;
  }
  if (args.kind == "support") {
    evalsuite::ActionBox bl = evalsuite::expert_box(
        ctx.state, w::SkillId::L1, w::Arm::Left, ctx.task, cfg,
        cfg.eval.support_tol);
    evalsuite::ActionBox br = evalsuite::expert_box(
        ctx.state, w::SkillId::R2, w::Arm::Right, ctx.task, cfg,
        cfg.eval.support_tol);
    double frac = evalsuite::support_coverage(model, ctx.task, ctx.obs, bl, br,
                                              cfg.eval.mi_samples, cfg.seed, cfg);
    json j;
    j["kind"] = "support";
    j["context"] = ctx.task.name();
    j["coverage"] = frac;
    j["tol"] = cfg.eval.support_tol;
    write_text_file(out_dir + "/support.json", j.dump(1) + "\n");
    std::cout << "product-support coverage at " << ctx.task.name() << ": "
              << frac << "\n";
    return frac;
  }
  throw ConfigError("unknown diag kind: " + args.kind);
}

void run_report(const std::vector<std::string>& inputs,
                const std::string& out_dir) {
  if (inputs.empty()) throw ConfigError("report: no inputs");
  fs::create_directories(out_dir);
  report::merge_reports(inputs, out_dir);
  std::cout << "wrote " << out_dir << "/report.csv\n";
}

// ---------------------------------------------------------------------------
// grad-check battery

namespace {

using dc::Tape;
using Ref = Tape::Ref;

double check_primitive(const std::string& name, std::uint64_t seed, double eps) {
  Rng rng(Rng::mix(seed, std::hash<std::string>{}(name)));
  dc::ParameterSet ps;

  auto checked = [&](auto&& builder) {
    return dc::grad_check(
        [&](dc::ParameterSet& q) {
          Tape tape;
          Ref loss = builder(tape, q);
          tape.backward(loss);
          return static_cast<double>(tape.value(loss).values[0]);
        },
        ps, eps);
  };

  if (name == "matmul") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {4, 2}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(t.matmul(t.param(q, "a"), t.param(q, "b"))));
    });
  }
  if (name == "add") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {3, 4}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(t.add(t.param(q, "a"), t.param(q, "b"))));
    });
  }
  if (name == "add_bias") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {1, 4}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(t.add_bias(t.param(q, "a"), t.param(q, "b"))));
    });
  }
  if (name == "sub_mul_scale") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {3, 4}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      Ref d = t.sub(t.param(q, "a"), t.param(q, "b"));
      return t.mean_all(t.scale(t.mul(d, t.param(q, "a")), 0.7));
    });
  }
  if (name == "row_scale") {
    ps.add("x", dc::randn(rng, {4, 3}, 0.5f));
    ps.add("s", dc::randn(rng, {4, 1}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(t.row_scale(t.param(q, "x"), t.param(q, "s"))));
    });
  }
  if (name == "tanh") {
    ps.add("a", dc::randn(rng, {3, 5}, 0.8f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(t.param(q, "a")));
    });
  }
  if (name == "sigmoid") {
    ps.add("a", dc::randn(rng, {3, 5}, 0.8f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.sigmoid(t.param(q, "a")));
    });
  }
  if (name == "layer_norm") {
    ps.add("x", dc::randn(rng, {4, 8}, 0.8f));
    ps.add("g", dc::randn(rng, {1, 8}, 0.3f));
    ps.add("b", dc::randn(rng, {1, 8}, 0.3f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.tanh(
          t.layer_norm(t.param(q, "x"), t.param(q, "g"), t.param(q, "b"))));
    });
  }
  if (name == "softmax") {
    ps.add("x", dc::randn(rng, {4, 6}, 0.8f));
    ps.add("w", dc::randn(rng, {4, 6}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.mul(t.softmax_rows(t.param(q, "x")), t.param(q, "w")));
    });
  }
  if (name == "concat_slice_reshape") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {3, 2}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      Ref c = t.concat_cols({t.param(q, "a"), t.param(q, "b")});
      Ref s = t.slice_cols(c, 1, 5);
      return t.mean_all(t.tanh(t.reshape(s, {6, 2})));
    });
  }
  if (name == "attention") {
    // the 4x8 instance: 4 tokens of width 8, 2 heads
    ps.add("q", dc::randn(rng, {4, 8}, 0.6f));
    ps.add("k", dc::randn(rng, {4, 8}, 0.6f));
    ps.add("v", dc::randn(rng, {4, 8}, 0.6f));
    ps.add("wo", dc::randn(rng, {8, 8}, 0.4f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      Ref o = t.attention(t.param(q, "q"), t.param(q, "k"), t.param(q, "v"),
                          t.param(q, "wo"), 2, 4, 4);
      return t.mean_all(t.tanh(o));
    });
  }
  if (name == "attention_decoder") {
    ps.add("q", dc::randn(rng, {2, 8}, 0.6f));   // 2 groups x 1 token
    ps.add("k", dc::randn(rng, {8, 8}, 0.6f));   // 2 groups x 4 tokens
    ps.add("v", dc::randn(rng, {8, 8}, 0.6f));
    ps.add("wo", dc::randn(rng, {8, 8}, 0.4f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      Ref o = t.attention(t.param(q, "q"), t.param(q, "k"), t.param(q, "v"),
                          t.param(q, "wo"), 2, 1, 4);
      return t.mean_all(t.tanh(o));
    });
  }
  if (name == "mse") {
    ps.add("a", dc::randn(rng, {3, 4}, 0.5f));
    ps.add("b", dc::randn(rng, {3, 4}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mse(t.param(q, "a"), t.param(q, "b"));
    });
  }
  if (name == "bce") {
    ps.add("logit", dc::randn(rng, {4, 1}, 0.8f));
    ps.add("tlogit", dc::randn(rng, {4, 1}, 0.8f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.bce(t.sigmoid(t.param(q, "logit")),
                   t.sigmoid(t.param(q, "tlogit")));
    });
  }
  if (name == "row_sqerr") {
    ps.add("a", dc::randn(rng, {4, 3}, 0.5f));
    ps.add("b", dc::randn(rng, {4, 3}, 0.5f));
    return checked([](Tape& t, dc::ParameterSet& q) {
      return t.mean_all(t.row_sqerr(t.param(q, "a"), t.param(q, "b")));
    });
  }
  if (name == "softmax_ce") {
    ps.add("logits", dc::randn(rng, {4, 5}, 0.8f));
    dc::Tensor onehot = dc::zeros({4, 5});
    for (int r = 0; r < 4; ++r)
      onehot.at(r, r % 5) = 1.0f;
    return dc::grad_check(
        [&, onehot](dc::ParameterSet& q) {
          Tape tape;
          Ref loss = tape.softmax_ce(tape.param(q, "logits"), tape.input(onehot));
          tape.backward(loss);
          return static_cast<double>(tape.value(loss).values[0]);
        },
        ps, eps);
  }
  throw std::logic_error("unknown primitive: " + name);
}

// one full gated-model loss pass on a tiny instance; detached quantities are
// frozen so the finite-difference oracle sees the same function the backward
// pass differentiates
double check_full_loss(std::uint64_t seed, double eps) {
  ModelConfig mc;
  mc.d_hidden = 16;
  mc.d_latent = 8;
  mc.d_embed = 4;
  mc.n_heads = 2;
  mc.attn_tokens = 2;
  p::PolicyModel model = p::make_model(p::Variant::SkillVla, mc, seed);
  model.selector_trained = true;

  Rng rng(Rng::mix(seed, 0xf0011ull));
  const int B = 4;
  learn::Batch batch;
  batch.size = B;
  batch.obs = dc::randn(rng, {B, w::kObsDim}, 0.5f);
  batch.prev_obs = dc::randn(rng, {B, w::kObsDim}, 0.5f);
  batch.instr = dc::zeros({B, 2 * p::kInstrVocab});
  for (int r = 0; r < B; ++r) {
    batch.instr.at(r, r % p::kInstrVocab) = 1.0f;
    batch.instr.at(r, p::kInstrVocab + (r + 3) % p::kInstrVocab) = 1.0f;
  }
  batch.act_left = dc::randn(rng, {B, 3}, 0.5f);
  batch.act_right = dc::randn(rng, {B, 3}, 0.5f);
  batch.prior = dc::zeros({B, 1});
  for (int r = 0; r < B; ++r) batch.prior.values[r] = static_cast<float>(r % 2);
  batch.eps_left = dc::randn(rng, {B, 3}, 1.0f);
  batch.eps_right = dc::randn(rng, {B, 3}, 1.0f);
  batch.tau = dc::zeros({B, 1});
  for (int r = 0; r < B; ++r)
    batch.tau.values[r] = static_cast<float>(0.1 + 0.2 * r);
  batch.tok_left = {0, 1, 2, 9};
  batch.tok_right = {3, 4, 5, 9};

  LossWeights wts;

  // freeze the detached quantities at the unperturbed parameters
  std::vector<float> frozen_diff, frozen_prev, frozen_labels;
  {
    dc::Tape tape;
    Ref obs = tape.input(batch.obs);
    p::EncodeOut lat = p::encode(tape, model, obs, batch.tok_left,
                                 batch.tok_right);
    learn::OnOff oo = learn::bc_on_off(tape, model, batch, lat, obs);
    const auto& on = tape.value(oo.on.per_sample).values;
    const auto& off = tape.value(oo.off.per_sample).values;
    for (int i = 0; i < B; ++i) {
      frozen_diff.push_back(on[i] - off[i]);
      frozen_labels.push_back(on[i] < off[i] ? 1.0f : 0.0f);
    }
    Ref instr = tape.input(batch.instr);
    Ref prev = tape.input(batch.prev_obs);
    p::SelectorOut sp = p::selector_forward(tape, model, prev, instr);
    Ref yp = p::estimator_forward(tape, model, tape.detach(sp.z_h));
    frozen_prev = tape.value(yp).values;
  }

  auto loss_fn = [&](dc::ParameterSet& q) -> double {
    (void)q;
    dc::Tape tape;
    Ref obs = tape.input(batch.obs);
    p::EncodeOut lat = p::encode(tape, model, obs, batch.tok_left,
                                 batch.tok_right);
    learn::OnOff oo = learn::bc_on_off(tape, model, batch, lat, obs);
    Ref fm = tape.scale(tape.add(tape.add(oo.on.loss_left, oo.on.loss_right),
                                 tape.add(oo.off.loss_left, oo.off.loss_right)),
                        0.25);
    Ref instr = tape.input(batch.instr);
    p::SelectorOut sel = p::selector_forward(tape, model, obs, instr);
    Ref yhat = p::estimator_forward(tape, model, tape.detach(sel.z_h));

    dc::Tensor diff = dc::zeros({B, 1});
    diff.values.assign(frozen_diff.begin(), frozen_diff.end());
    Ref coop = tape.scale(tape.mean_all(tape.mul(tape.input(diff), yhat)),
                          wts.coop);

    dc::Tensor prev = dc::zeros({B, 1});
    prev.values.assign(frozen_prev.begin(), frozen_prev.end());
    learn::GateRegs regs = learn::gate_regularizers(
        tape, yhat, tape.input(prev), tape.input(batch.prior), true);

    dc::Tensor lbl = dc::zeros({B, 1});
    lbl.values.assign(frozen_labels.begin(), frozen_labels.end());
    Ref disc = tape.bce(yhat, tape.input(lbl));

    Ref total = tape.add(fm, coop);
    total = tape.add(total, tape.scale(regs.prior, wts.prior));
    total = tape.add(total, tape.scale(regs.sticky, wts.sticky));
    total = tape.add(total, tape.scale(regs.sup, wts.sup));
    total = tape.add(total, tape.scale(disc, wts.disc));
    tape.backward(total);
    return static_cast<double>(tape.value(total).values[0]);
  };

  double err_policy = dc::grad_check(loss_fn, model.params, eps);
  return err_policy;
}

}  // namespace

double gradcheck_battery(int seeds, double eps) {
  static const char* kPrimitives[] = {
      "matmul", "add", "add_bias", "sub_mul_scale", "row_scale", "tanh",
      "sigmoid", "layer_norm", "softmax", "concat_slice_reshape", "attention",
      "attention_decoder", "mse", "bce", "row_sqerr", "softmax_ce"};
  double max_err = 0.0;
  for (int s = 0; s < seeds; ++s) {
    for (const char* prim : kPrimitives)
      max_err = std::max(max_err,
                         check_primitive(prim, static_cast<std::uint64_t>(s), eps));
  }
  // the full-model pass is heavier; a few seeds cover it
  for (int s = 0; s < std::min(seeds, 3); ++s)
    max_err = std::max(max_err, check_full_loss(static_cast<std::uint64_t>(s), eps));
  return max_err;
}

}  // namespace skilllab::runner
