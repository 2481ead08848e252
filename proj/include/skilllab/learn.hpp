#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skilllab/config.hpp"
#include "skilllab/data.hpp"
#include "skilllab/policy.hpp"

namespace skilllab::learn {

namespace dc = skilllab::diffcore;
using Ref = dc::Tape::Ref;

// ---------------------------------------------------------------------------
// Batch assembly

struct Batch {
  dc::Tensor obs;        // (B, obs_dim)
  dc::Tensor prev_obs;   // (B, obs_dim); equals obs at episode starts
  dc::Tensor instr;      // (B, 2*kInstrVocab)
  dc::Tensor act_left;   // (B, 3)
  dc::Tensor act_right;  // (B, 3)
  dc::Tensor prior;      // (B, 1)
  std::vector<int> tok_left;   // stored skill tokens (instruction-token ids)
  std::vector<int> tok_right;
  std::vector<int> instr_left;   // instruction-token ids (constant per task)
  std::vector<int> instr_right;
  // flow-matching draws, shared between on/off passes
  dc::Tensor eps_left;   // (B, 3)
  dc::Tensor eps_right;  // (B, 3)
  dc::Tensor tau;        // (B, 1)
  int size = 0;
};

// Flattened view over a set of demonstrations, with deterministic sampling.
class DemoPool {
 public:
  explicit DemoPool(const std::vector<data::Demonstration>& demos);
  Batch sample(int batch, Rng& rng) const;
  Batch slice(const std::vector<int>& indices, Rng& rng) const;  // fresh noise
  int size() const { return static_cast<int>(index_.size()); }
  std::vector<std::string> skill_inventory() const;

 private:
  const std::vector<data::Demonstration>* demos_;
  struct Entry {
    int demo;
    int step;
  };
  std::vector<Entry> index_;
};

// ---------------------------------------------------------------------------
// Losses. Free functions that extend a tape; values are also readable for
// logging via tape.value().

// Flow-matching supervision for one gated pass. Per-arm scalar losses plus the
// per-sample total (L_left + L_right), used by the gate objectives.
struct FlowLoss {
  Ref loss_left;    // scalar
  Ref loss_right;   // scalar
  Ref per_sample;   // (B, 1)
};
FlowLoss flow_matching_loss(dc::Tape& tape, policy::PolicyModel& model,
                            const Batch& batch, const policy::Gate& gate,
                            const policy::EncodeOut& latents, Ref obs_ref);

// Both gated passes on identical noise draws.
struct OnOff {
  FlowLoss on;
  FlowLoss off;
};
OnOff bc_on_off(dc::Tape& tape, policy::PolicyModel& model, const Batch& batch,
                const policy::EncodeOut& latents, Ref obs_ref);

// mean over the batch of lambda * sg(L_on - L_off) * gate
Ref coop_loss(dc::Tape& tape, Ref per_sample_on, Ref per_sample_off, Ref gate,
              double lambda);

// L_prior = l(y, alpha_vlm); L_sticky = l(y, y_prev); L_sup = mean(y).
// l is Bernoulli cross-entropy when discrete, squared error otherwise.
// y_prev and alpha enter as targets (detached by the caller when needed).
struct GateRegs {
  Ref prior;
  Ref sticky;
  Ref sup;
};
GateRegs gate_regularizers(dc::Tape& tape, Ref y_t, Ref y_prev, Ref alpha_vlm,
                           bool discrete);

// y = 1[L_on < L_off] (ties -> 0); loss = BCE(y, yhat) over the batch.
struct DiscLoss {
  Ref loss;
  std::vector<float> labels;
};
DiscLoss disc_loss(dc::Tape& tape, const std::vector<float>& l_on,
                   const std::vector<float>& l_off, Ref yhat);

// ---------------------------------------------------------------------------
// Training loops

struct TrainLogRow {
  int step;
  double fm_l, fm_r, coop, prior, sticky, sup, disc, mean_gate, lr, total;
};

std::string log_header();
std::string log_csv(const std::vector<TrainLogRow>& rows);

// Supervised selector pretraining; freezes on success and returns held-out
// accuracy. Throws if accuracy stays below the threshold.
double train_selector(policy::PolicyModel& model,
                      const std::vector<data::Demonstration>& demos,
                      const RunConfig& cfg);

struct TrainResult {
  policy::PolicyModel model;
  std::vector<TrainLogRow> log;
};

// Full policy training for any variant. For the gated variant the selector
// must already be trained (train_selector), or demos are used to train it
// first when `pretrain_selector` is set.
TrainResult train_policy(const std::vector<data::Demonstration>& demos,
                         policy::Variant variant, const RunConfig& cfg,
                         bool pretrain_selector = true);

// Fine-tune an existing model on the first K episodes of new_demos.
// K = 0 returns the checkpoint unchanged. The selector stays frozen.
TrainResult continual_finetune(policy::PolicyModel model,
                               const std::vector<data::Demonstration>& new_demos,
                               int k_episodes, const RunConfig& cfg);

}  // namespace skilllab::learn
