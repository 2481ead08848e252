#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "skilllab/rng.hpp"

namespace skilllab::diffcore {

// ---------------------------------------------------------------------------
// Tensor: dense row-major float32 storage.

struct Tensor {
  std::vector<int> shape;
  std::vector<float> values;

  Tensor() = default;
  Tensor(std::vector<int> shp, float fill = 0.0f);

  int numel() const;
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  float& at(int r, int c) { return values[r * cols() + c]; }
  float at(int r, int c) const { return values[r * cols() + c]; }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

Tensor zeros(std::vector<int> shape);
Tensor full(std::vector<int> shape, float v);
Tensor randn(Rng& rng, std::vector<int> shape, float scale);
Tensor from_rows(const std::vector<std::vector<float>>& rows);

// ---------------------------------------------------------------------------
// ParameterSet: named trainable tensors plus Adam slots.

class ParameterSet {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor m;  // first moment
    Tensor v;  // second moment
  };

  void add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void zero_grad();
  long param_count() const;
  long step_count() const { return step_count_; }
  void set_step_count(long n) { step_count_ = n; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  bool grads_ready = false;  // set by Tape::backward, cleared by adam_step

 private:
  std::map<std::string, Entry> entries_;
  long step_count_ = 0;
  bool frozen_ = false;
  friend void adam_step(ParameterSet&, double, double, double, double);
};

// Bias-corrected Adam over every entry. Throws if gradients were never
// populated or the set is frozen. Clears gradients afterwards.
void adam_step(ParameterSet& ps, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// ---------------------------------------------------------------------------
// Tape: reverse-mode autodiff. One tape per training step; rebuilt each time.

class Tape {
 public:
  using Ref = std::int32_t;

  Ref input(Tensor value);                              // constant leaf
  Ref param(ParameterSet& ps, const std::string& name); // trainable leaf

  Ref matmul(Ref a, Ref b);
  Ref add(Ref a, Ref b);           // same shape
  Ref add_bias(Ref x, Ref bias);   // bias row broadcast over the rows of x
  Ref sub(Ref a, Ref b);
  Ref mul(Ref a, Ref b);           // elementwise
  Ref scale(Ref a, double s);
  Ref row_scale(Ref x, Ref s);     // s has shape (rows, 1)
  Ref tanh(Ref a);
  Ref sigmoid(Ref a);
  Ref layer_norm(Ref x, Ref gain, Ref bias);  // normalizes each row
  Ref softmax_rows(Ref x);
  Ref concat_cols(const std::vector<Ref>& xs);
  Ref slice_cols(Ref x, int begin, int end);
  Ref reshape(Ref x, std::vector<int> shape);
  Ref detach(Ref x);

  // Scaled-dot-product attention over groups of consecutive rows.
  // q: (batch*q_tokens, d); k, v: (batch*kv_tokens, d). Per group, per head:
  // softmax(QK^T/sqrt(dh))V, heads concatenated, then the output projection
  // wo (d, d) is applied. Returns (batch*q_tokens, d).
  Ref attention(Ref q, Ref k, Ref v, Ref wo, int n_heads, int q_tokens,
                int kv_tokens);

  Ref mse(Ref pred, Ref target);        // scalar: mean squared error, all elements
  Ref bce(Ref prob, Ref target);        // scalar: mean binary cross-entropy
  Ref row_sqerr(Ref a, Ref b);          // (rows,1): per-row sum of squared diff
  Ref mean_all(Ref x);                  // scalar
  Ref softmax_ce(Ref logits, Ref onehot);  // scalar: mean cross-entropy over rows

  const Tensor& value(Ref r) const;
  const Tensor& grad(Ref r) const;

  // Accumulates d(loss)/d(param) into each ParameterSet entry touched by the
  // tape and marks the sets' grads_ready. Throws if loss is not scalar or if
  // called twice on the same tape.
  void backward(Ref loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    Input, Param, MatMul, Add, AddBias, Sub, Mul, Scale, RowScale, Tanh,
    Sigmoid, LayerNorm, SoftmaxRows, ConcatCols, SliceCols, Reshape, Detach,
    Attention, Mse, Bce, RowSqErr, MeanAll, SoftmaxCe,
  };

  struct Node {
    Op op;
    std::array<Ref, 4> in{-1, -1, -1, -1};
    std::vector<Ref> many;  // ConcatCols only
    Tensor val;
    Tensor grd;
    Tensor extra0, extra1;  // op-specific forward caches (attention)
    ParameterSet* ps = nullptr;
    std::string pname;
    double s0 = 0.0;
    int i0 = 0, i1 = 0, i2 = 0;
  };

  Ref push(Node n);
  Node& node(Ref r) { return nodes_[static_cast<std::size_t>(r)]; }
  void ensure_grad(Ref r);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// dense C += A * B (row-major)
void matmul_accum(const float* a, const float* b, float* c, int m, int k, int n);

// ---------------------------------------------------------------------------
// Gradient checking: central differences (64-bit accumulated) vs reverse mode.
// Returns the max relative error over every scalar parameter.
double grad_check(const std::function<double(ParameterSet&)>& f,
                  ParameterSet& ps, double eps);

// ---------------------------------------------------------------------------
// Checkpoints: a JSON manifest (names, shapes, byte offsets) plus one raw
// little-endian float32 blob. Round trips bit-exactly.

void save_checkpoint(const std::string& path_base,
                     const std::map<std::string, const ParameterSet*>& sets,
                     const std::string& extra_json);

// Returns the manifest's "extra" object (raw json text) and fills `sets`.
std::string load_checkpoint(const std::string& path_base,
                            std::map<std::string, ParameterSet*>& sets);

}  // namespace skilllab::diffcore
