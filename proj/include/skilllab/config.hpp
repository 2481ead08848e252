#pragma once

#include <cstdint>
#include <string>

#include "skilllab/world.hpp"

namespace skilllab {

// Loss weights for the gated objective.
struct LossWeights {
  double coop = 1.0;
  double prior = 2.0;
  double sticky = 0.1;
  double sup = 0.01;
  double disc = 1.0;
};

struct ModelConfig {
  int d_hidden = 128;    // encoder/expert hidden width
  int d_latent = 64;     // per-arm latent and selector latent size
  int d_embed = 16;      // skill/instruction token embedding size
  int n_heads = 4;
  int attn_tokens = 4;   // hidden state is split into this many tokens
};

struct TrainConfig {
  double lr = 1e-3;
  double lr_floor = 0.1;  // cosine decay down to lr * lr_floor
  int batch = 64;
  int steps = 3000;
  int selector_steps = 3000;
  double selector_lr = 3e-3;
  int log_every = 50;
  LossWeights weights;
  bool discrete_gate = true;       // paper default; continuous is the ablation
  bool onoff_expert_grads = true;  // both passes supervise the experts at 0.5 each
  std::uint64_t seed = 0;
};

struct SamplerConfig {
  int flow_steps = 10;
  double gate_threshold = 0.5;
};

struct EvalConfig {
  int n_trials = 50;
  int mi_bins = 2;
  int mi_samples = 4096;
  int mi_shuffles = 10;
  double support_tol = 0.35;
};

struct DataConfig {
  int episodes_single = 200;
  int episodes_dual = 100;
  double max_expert_failure = 0.2;
};

// Everything a run needs. Unknown keys in a config file are rejected; a
// resolved copy is written next to every artifact.
struct RunConfig {
  world::SimConfig world;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  EvalConfig eval;
  std::uint64_t seed = 0;

  std::string to_json() const;              // resolved, all keys present
  static RunConfig from_json(const std::string& text);  // strict
  static RunConfig from_file(const std::string& path);
  std::uint64_t hash() const;               // stable content hash
};

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace skilllab
