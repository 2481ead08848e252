#include "skilllab/learn.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace skilllab::learn {

namespace w = skilllab::world;
namespace p = skilllab::policy;

// ---------------------------------------------------------------------------
// DemoPool

DemoPool::DemoPool(const std::vector<data::Demonstration>& demos)
    : demos_(&demos) {
  for (std::size_t d = 0; d < demos.size(); ++d)
    for (std::size_t s = 0; s < demos[d].steps.size(); ++s)
      index_.push_back({static_cast<int>(d), static_cast<int>(s)});
  if (index_.empty()) throw std::invalid_argument("empty demonstration set");
}

std::vector<std::string> DemoPool::skill_inventory() const {
  std::set<std::string> names;
  for (const auto& d : *demos_)
    for (const auto& s : d.steps) {
      if (s.u_left != w::SkillId::Idle) names.insert(w::skill_name(s.u_left));
      if (s.u_right != w::SkillId::Idle) names.insert(w::skill_name(s.u_right));
    }
  return {names.begin(), names.end()};
}

Batch DemoPool::slice(const std::vector<int>& indices, Rng& rng) const {
  Batch b;
  b.size = static_cast<int>(indices.size());
  int obs_dim = static_cast<int>((*demos_)[index_[0].demo].steps[0].obs.size());
  b.obs = dc::zeros({b.size, obs_dim});
  b.prev_obs = dc::zeros({b.size, obs_dim});
  b.instr = dc::zeros({b.size, 2 * p::kInstrVocab});
  b.act_left = dc::zeros({b.size, 3});
  b.act_right = dc::zeros({b.size, 3});
  b.prior = dc::zeros({b.size, 1});
  b.eps_left = dc::zeros({b.size, 3});
  b.eps_right = dc::zeros({b.size, 3});
  b.tau = dc::zeros({b.size, 1});
  b.tok_left.resize(indices.size());
  b.tok_right.resize(indices.size());
  b.instr_left.resize(indices.size());
  b.instr_right.resize(indices.size());

  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Entry& e = index_[static_cast<std::size_t>(indices[i])];
    const data::Demonstration& demo = (*demos_)[e.demo];
    const data::StepRecord& rec = demo.steps[e.step];
    const data::StepRecord& prev = demo.steps[e.step == 0 ? 0 : e.step - 1];
    int r = static_cast<int>(i);
    std::copy(rec.obs.begin(), rec.obs.end(), b.obs.values.begin() + r * obs_dim);
    std::copy(prev.obs.begin(), prev.obs.end(),
              b.prev_obs.values.begin() + r * obs_dim);
    std::vector<float> ins = p::instruction_onehot(demo.task);
    std::copy(ins.begin(), ins.end(),
              b.instr.values.begin() + r * 2 * p::kInstrVocab);
    b.act_left.at(r, 0) = rec.a_left.dx;
    b.act_left.at(r, 1) = rec.a_left.dy;
    b.act_left.at(r, 2) = rec.a_left.grip;
    b.act_right.at(r, 0) = rec.a_right.dx;
    b.act_right.at(r, 1) = rec.a_right.dy;
    b.act_right.at(r, 2) = rec.a_right.grip;
    b.prior.values[static_cast<std::size_t>(r)] = static_cast<float>(rec.prior);
    b.tok_left[i] = p::instr_token(rec.u_left);
    b.tok_right[i] = p::instr_token(rec.u_right);
    auto [il, ir] = p::instruction_tokens(demo.task);
    b.instr_left[i] = il;
    b.instr_right[i] = ir;
    for (int c = 0; c < 3; ++c) {
      b.eps_left.at(r, c) = static_cast<float>(rng.normal());
      b.eps_right.at(r, c) = static_cast<float>(rng.normal());
    }
    b.tau.values[static_cast<std::size_t>(r)] = static_cast<float>(rng.uniform());
  }
  return b;
}

Batch DemoPool::sample(int batch, Rng& rng) const {
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (auto& v : idx)
    v = static_cast<int>(rng.below(static_cast<std::uint64_t>(index_.size())));
  return slice(idx, rng);
}

// ---------------------------------------------------------------------------
// losses

namespace {

// a_tau = (1 - tau) * eps + tau * a ; target u = a - eps  (computed host-side)
struct FlowInputs {
  dc::Tensor a_tau;
  dc::Tensor target;
};

FlowInputs flow_inputs(const dc::Tensor& act, const dc::Tensor& eps,
                       const dc::Tensor& tau) {
  FlowInputs f;
  f.a_tau = act;
  f.target = act;
  for (int r = 0; r < act.rows(); ++r) {
    float t = tau.values[static_cast<std::size_t>(r)];
    for (int c = 0; c < act.cols(); ++c) {
      float a = act.at(r, c);
      float e = eps.at(r, c);
      f.a_tau.at(r, c) = (1.0f - t) * e + t * a;
      f.target.at(r, c) = a - e;
    }
  }
  return f;
}

dc::Tensor concat_host(const dc::Tensor& a, const dc::Tensor& b) {
  dc::Tensor out = dc::zeros({a.rows(), a.cols() + b.cols()});
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) out.at(r, c) = a.at(r, c);
    for (int c = 0; c < b.cols(); ++c) out.at(r, a.cols() + c) = b.at(r, c);
  }
  return out;
}

}  // namespace

FlowLoss flow_matching_loss(dc::Tape& tape, p::PolicyModel& model,
                            const Batch& batch, const p::Gate& gate,
                            const p::EncodeOut& latents, Ref obs_ref) {
  FlowLoss out;
  Ref tau = tape.input(batch.tau);
  if (model.variant == p::Variant::Mono) {
    dc::Tensor act = concat_host(batch.act_left, batch.act_right);
    dc::Tensor eps = concat_host(batch.eps_left, batch.eps_right);
    FlowInputs fi = flow_inputs(act, eps, batch.tau);
    Ref a_tau = tape.input(fi.a_tau);
    Ref target = tape.input(fi.target);
    p::VelocityOut v = p::expert_velocity(tape, model, a_tau, -1, tau, latents,
                                          obs_ref, gate);
    Ref err_l = tape.row_sqerr(tape.slice_cols(v.v_left, 0, 3),
                               tape.slice_cols(target, 0, 3));
    Ref err_r = tape.row_sqerr(tape.slice_cols(v.v_left, 3, 6),
                               tape.slice_cols(target, 3, 6));
    out.loss_left = tape.mean_all(err_l);
    out.loss_right = tape.mean_all(err_r);
    out.per_sample = tape.add(err_l, err_r);
    return out;
  }
  FlowInputs fl = flow_inputs(batch.act_left, batch.eps_left, batch.tau);
  FlowInputs fr = flow_inputs(batch.act_right, batch.eps_right, batch.tau);
  Ref a_tau_l = tape.input(fl.a_tau);
  Ref a_tau_r = tape.input(fr.a_tau);
  Ref tgt_l = tape.input(fl.target);
  Ref tgt_r = tape.input(fr.target);
  p::VelocityOut v = p::expert_velocity(tape, model, a_tau_l, a_tau_r, tau,
                                        latents, obs_ref, gate);
  Ref err_l = tape.row_sqerr(v.v_left, tgt_l);
  Ref err_r = tape.row_sqerr(v.v_right, tgt_r);
  out.loss_left = tape.mean_all(err_l);
  out.loss_right = tape.mean_all(err_r);
  out.per_sample = tape.add(err_l, err_r);
  return out;
}

OnOff bc_on_off(dc::Tape& tape, p::PolicyModel& model, const Batch& batch,
                const p::EncodeOut& latents, Ref obs_ref) {
  if (!model.has_gate())
    throw std::logic_error("bc_on_off requires the gated variant");
  OnOff oo;
  oo.on = flow_matching_loss(tape, model, batch, p::Gate::one(), latents, obs_ref);
  oo.off = flow_matching_loss(tape, model, batch, p::Gate::zero(), latents, obs_ref);
  return oo;
}

Ref coop_loss(dc::Tape& tape, Ref per_sample_on, Ref per_sample_off, Ref gate,
              double lambda) {
  Ref diff = tape.detach(tape.sub(per_sample_on, per_sample_off));
  return tape.scale(tape.mean_all(tape.mul(diff, gate)), lambda);
}

GateRegs gate_regularizers(dc::Tape& tape, Ref y_t, Ref y_prev, Ref alpha_vlm,
                           bool discrete) {
  GateRegs out;
  if (discrete) {
    out.prior = tape.bce(y_t, alpha_vlm);
    out.sticky = tape.bce(y_t, y_prev);
  } else {
    out.prior = tape.mse(y_t, alpha_vlm);
    out.sticky = tape.mse(y_t, y_prev);
  }
  out.sup = tape.mean_all(y_t);
  return out;
}

DiscLoss disc_loss(dc::Tape& tape, const std::vector<float>& l_on,
                   const std::vector<float>& l_off, Ref yhat) {
  if (l_on.size() != l_off.size())
    throw std::invalid_argument("disc_loss: misaligned per-sample losses");
  DiscLoss out;
  out.labels.resize(l_on.size());
  for (std::size_t i = 0; i < l_on.size(); ++i)
    out.labels[i] = l_on[i] < l_off[i] ? 1.0f : 0.0f;  // ties -> 0
  dc::Tensor lbl = dc::zeros({static_cast<int>(l_on.size()), 1});
  lbl.values.assign(out.labels.begin(), out.labels.end());
  out.loss = tape.bce(yhat, tape.input(lbl));
  return out;
}

// ---------------------------------------------------------------------------
// selector training

double train_selector(p::PolicyModel& model,
                      const std::vector<data::Demonstration>& demos,
                      const RunConfig& cfg) {
  if (model.variant != p::Variant::SkillVla)
    throw std::logic_error("train_selector requires the gated variant");
  if (model.selector.frozen())
    throw std::logic_error("selector is already frozen");

  // flatten labelled steps; every 10th goes to the held-out split
  struct Row {
    const data::StepRecord* rec;
    const w::TaskSpec* task;
  };
  std::vector<Row> train_rows, held_rows;
  long n = 0;
  for (const auto& d : demos)
    for (const auto& s : d.steps) {
      if (n++ % 10 == 9) held_rows.push_back({&s, &d.task});
      else train_rows.push_back({&s, &d.task});
    }

  auto fill = [&](const std::vector<Row>& rows, const std::vector<int>& idx,
                  dc::Tensor& obs, dc::Tensor& instr, dc::Tensor& yl,
                  dc::Tensor& yr) {
    int B = static_cast<int>(idx.size());
    int obs_dim = static_cast<int>(rows[0].rec->obs.size());
    obs = dc::zeros({B, obs_dim});
    instr = dc::zeros({B, 2 * p::kInstrVocab});
    yl = dc::zeros({B, p::kHeadClasses});
    yr = dc::zeros({B, p::kHeadClasses});
    for (int i = 0; i < B; ++i) {
      const Row& row = rows[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      std::copy(row.rec->obs.begin(), row.rec->obs.end(),
                obs.values.begin() + i * obs_dim);
      std::vector<float> ins = p::instruction_onehot(*row.task);
      std::copy(ins.begin(), ins.end(),
                instr.values.begin() + i * 2 * p::kInstrVocab);
      yl.at(i, p::head_class(row.rec->u_left, w::Arm::Left)) = 1.0f;
      yr.at(i, p::head_class(row.rec->u_right, w::Arm::Right)) = 1.0f;
    }
  };

  auto accuracy = [&](const std::vector<Row>& rows) {
    if (rows.empty()) return 1.0;
    std::vector<int> idx(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) idx[i] = static_cast<int>(i);
    dc::Tensor obs, instr, yl, yr;
    fill(rows, idx, obs, instr, yl, yr);
    dc::Tape tape;
    p::SelectorOut s = p::selector_forward(tape, model, tape.input(obs),
                                           tape.input(instr));
    const dc::Tensor& pl = tape.value(s.probs_l);
    const dc::Tensor& pr = tape.value(s.probs_r);
    long ok_l = 0, ok_r = 0;
    for (int r = 0; r < pl.rows(); ++r) {
      auto arg = [&](const dc::Tensor& t) {
        int best = 0;
        for (int c = 1; c < t.cols(); ++c)
          if (t.at(r, c) > t.at(r, best)) best = c;
        return best;
      };
      if (yl.at(r, arg(pl)) > 0.0f) ++ok_l;
      if (yr.at(r, arg(pr)) > 0.0f) ++ok_r;
    }
    return std::min(static_cast<double>(ok_l), static_cast<double>(ok_r)) /
           pl.rows();
  };

  Rng rng(Rng::mix(cfg.train.seed, 0x5e1ec7ull));
  const int batch = std::min<int>(128, static_cast<int>(train_rows.size()));
  double held_acc = 0.0;
  for (int step = 0; step < cfg.train.selector_steps; ++step) {
    std::vector<int> idx(static_cast<std::size_t>(batch));
    for (auto& v : idx)
      v = static_cast<int>(rng.below(train_rows.size()));
    dc::Tensor obs, instr, yl, yr;
    fill(train_rows, idx, obs, instr, yl, yr);
    dc::Tape tape;
    p::SelectorOut s = p::selector_forward(tape, model, tape.input(obs),
                                           tape.input(instr));
    Ref loss = tape.add(tape.softmax_ce(s.logits_l, tape.input(yl)),
                        tape.softmax_ce(s.logits_r, tape.input(yr)));
    tape.backward(loss);
    dc::adam_step(model.selector, cfg.train.selector_lr);
    if ((step + 1) % 200 == 0 || step + 1 == cfg.train.selector_steps) {
      held_acc = accuracy(held_rows);
      if (held_acc >= 0.99) break;
    }
  }
  if (held_acc < 0.99)
    throw std::runtime_error("selector held-out accuracy " +
                             std::to_string(held_acc) + " below 0.99");
  model.selector.freeze();
  model.selector_trained = true;
  return held_acc;
}

// ---------------------------------------------------------------------------
// policy training

std::string log_header() {
  return "step,L_FM_L,L_FM_R,L_coop,L_prior,L_sticky,L_sup,L_disc,mean_gate,lr";
}

std::string log_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream ss;
  ss << log_header() << "\n";
  for (const auto& r : rows) {
    ss << r.step << "," << data::format_float(r.fm_l) << ","
       << data::format_float(r.fm_r) << "," << data::format_float(r.coop) << ","
       << data::format_float(r.prior) << "," << data::format_float(r.sticky)
       << "," << data::format_float(r.sup) << "," << data::format_float(r.disc)
       << "," << data::format_float(r.mean_gate) << ","
       << data::format_float(r.lr) << "\n";
  }
  return ss.str();
}

namespace {

// cosine decay from lr to lr * lr_floor over the run
double lr_at(const TrainConfig& tc, int step, int total) {
  double t = total > 1 ? static_cast<double>(step - 1) / (total - 1) : 0.0;
  double floor = tc.lr * tc.lr_floor;
  return floor + (tc.lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979 * t));
}

// one optimizer step over a sampled batch; returns the log row
TrainLogRow train_step(p::PolicyModel& model, const DemoPool& pool, Rng& rng,
                       const RunConfig& cfg, int step, int total_steps) {
  const TrainConfig& tc = cfg.train;
  Batch batch = pool.sample(tc.batch, rng);
  dc::Tape tape;
  Ref obs = tape.input(batch.obs);
  TrainLogRow row{};
  row.step = step;
  row.lr = lr_at(tc, step, total_steps);

  const bool gated = model.has_gate();
  const std::vector<int>& enc_l = gated ? batch.tok_left : batch.instr_left;
  const std::vector<int>& enc_r = gated ? batch.tok_right : batch.instr_right;
  p::EncodeOut latents = p::encode(tape, model, obs, enc_l, enc_r);

  Ref total;
  if (!gated) {
    p::Gate gate = model.variant == p::Variant::Twin ? p::Gate::one()
                                                     : p::Gate::zero();
    FlowLoss fm = flow_matching_loss(tape, model, batch, gate, latents, obs);
    total = tape.scale(tape.add(fm.loss_left, fm.loss_right), 0.5);
    row.fm_l = tape.value(fm.loss_left).values[0];
    row.fm_r = tape.value(fm.loss_right).values[0];
    row.mean_gate = model.variant == p::Variant::Twin ? 1.0 : 0.0;
    row.total = tape.value(total).values[0];
    tape.backward(total);
    dc::adam_step(model.params, row.lr);
    return row;
  }

  // gated variant: two passes on shared noise
  OnOff oo = bc_on_off(tape, model, batch, latents, obs);

  // estimator on the frozen selector's latent (gradients stop at z_H)
  Ref instr = tape.input(batch.instr);
  p::SelectorOut sel = p::selector_forward(tape, model, obs, instr);
  Ref z_h = tape.detach(sel.z_h);
  Ref yhat = p::estimator_forward(tape, model, z_h);

  Ref prev_obs = tape.input(batch.prev_obs);
  p::SelectorOut sel_prev = p::selector_forward(tape, model, prev_obs, instr);
  Ref yhat_prev =
      tape.detach(p::estimator_forward(tape, model, tape.detach(sel_prev.z_h)));

  // expert supervision
  Ref fm_expert;
  if (tc.onoff_expert_grads) {
    fm_expert = tape.scale(
        tape.add(tape.add(oo.on.loss_left, oo.on.loss_right),
                 tape.add(oo.off.loss_left, oo.off.loss_right)),
        0.5 * 0.5);
    row.fm_l = 0.5 * (tape.value(oo.on.loss_left).values[0] +
                      tape.value(oo.off.loss_left).values[0]);
    row.fm_r = 0.5 * (tape.value(oo.on.loss_right).values[0] +
                      tape.value(oo.off.loss_right).values[0]);
  } else {
    // teacher-forced: per sample pick the pass matching the gate actually fed
    Ref prior_ref = tape.input(batch.prior);
    Ref ones = tape.input(dc::full({batch.size, 1}, 1.0f));
    Ref inv = tape.sub(ones, prior_ref);
    Ref picked = tape.add(tape.mul(oo.on.per_sample, prior_ref),
                          tape.mul(oo.off.per_sample, inv));
    fm_expert = tape.scale(tape.mean_all(picked), 0.5);
    row.fm_l = 0.5 * (tape.value(oo.on.loss_left).values[0] +
                      tape.value(oo.off.loss_left).values[0]);
    row.fm_r = 0.5 * (tape.value(oo.on.loss_right).values[0] +
                      tape.value(oo.off.loss_right).values[0]);
  }

  Ref l_coop = coop_loss(tape, oo.on.per_sample, oo.off.per_sample, yhat,
                         tc.weights.coop);
  Ref alpha = tape.input(batch.prior);
  GateRegs regs = gate_regularizers(tape, yhat, yhat_prev, alpha,
                                    tc.discrete_gate);

  total = tape.add(fm_expert, l_coop);
  total = tape.add(total, tape.scale(regs.prior, tc.weights.prior));
  total = tape.add(total, tape.scale(regs.sticky, tc.weights.sticky));
  total = tape.add(total, tape.scale(regs.sup, tc.weights.sup));

  double disc_val = 0.0;
  if (tc.discrete_gate) {
    DiscLoss dl = disc_loss(tape, tape.value(oo.on.per_sample).values,
                            tape.value(oo.off.per_sample).values, yhat);
    total = tape.add(total, tape.scale(dl.loss, tc.weights.disc));
    disc_val = tape.value(dl.loss).values[0];
  }

  row.coop = tape.value(l_coop).values[0];
  row.prior = tape.value(regs.prior).values[0];
  row.sticky = tape.value(regs.sticky).values[0];
  row.sup = tape.value(regs.sup).values[0];
  row.disc = disc_val;
  double mg = 0.0;
  for (float v : tape.value(yhat).values) mg += v;
  row.mean_gate = mg / batch.size;
  row.total = tape.value(total).values[0];

  tape.backward(total);
  model.selector.zero_grad();  // frozen; discard any stray accumulation
  dc::adam_step(model.params, row.lr);
  return row;
}

}  // namespace

TrainResult train_policy(const std::vector<data::Demonstration>& demos,
                         p::Variant variant, const RunConfig& cfg,
                         bool pretrain_selector) {
  TrainResult result;
  result.model = p::make_model(variant, cfg.model, cfg.train.seed);
  if (variant == p::Variant::SkillVla && pretrain_selector)
    train_selector(result.model, demos, cfg);

  DemoPool pool(demos);
  result.model.trained_skills = pool.skill_inventory();
  Rng rng(Rng::mix(cfg.train.seed, 0x7141ull));
  for (int step = 1; step <= cfg.train.steps; ++step) {
    TrainLogRow row = train_step(result.model, pool, rng, cfg, step, cfg.train.steps);
    if (!std::isfinite(row.total))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    if (step % cfg.train.log_every == 0 || step == cfg.train.steps)
      result.log.push_back(row);
  }
  return result;
}

TrainResult continual_finetune(p::PolicyModel model,
                               const std::vector<data::Demonstration>& new_demos,
                               int k_episodes, const RunConfig& cfg) {
  if (k_episodes < 0) throw std::invalid_argument("k_episodes must be >= 0");
  TrainResult result;
  if (k_episodes == 0) {
    result.model = std::move(model);  // zero-shot: checkpoint unchanged
    return result;
  }
  if (static_cast<std::size_t>(k_episodes) > new_demos.size())
    throw std::invalid_argument("not enough demonstrations for K = " +
                                std::to_string(k_episodes));
  std::vector<data::Demonstration> subset(new_demos.begin(),
                                          new_demos.begin() + k_episodes);
  DemoPool pool(subset);
  for (const auto& s : pool.skill_inventory()) {
    auto& inv = model.trained_skills;
    if (std::find(inv.begin(), inv.end(), s) == inv.end()) inv.push_back(s);
  }
  Rng rng(Rng::mix(cfg.train.seed, 0xf17eull));
  result.model = std::move(model);
  for (int step = 1; step <= cfg.train.steps; ++step) {
    TrainLogRow row = train_step(result.model, pool, rng, cfg, step, cfg.train.steps);
    if (!std::isfinite(row.total))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    if (step % cfg.train.log_every == 0 || step == cfg.train.steps)
      result.log.push_back(row);
  }
  return result;
}

}  // namespace skilllab::learn
