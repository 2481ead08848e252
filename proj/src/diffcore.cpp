#include "skilllab/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

namespace skilllab::diffcore {

using json = nlohmann::ordered_json;

namespace {

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  auto fmt = [](const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(t.shape[i]);
    return s + ")";
  };
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + fmt(a) +
                              " vs " + fmt(b));
}

constexpr float kProbEps = 1e-7f;

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<int> shp, float fill)
    : shape(std::move(shp)), values(static_cast<std::size_t>(shape_numel(shape)), fill) {}

int Tensor::numel() const { return shape_numel(shape); }

Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }
Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

Tensor randn(Rng& rng, std::vector<int> shape, float scale) {
  Tensor t(std::move(shape));
  for (auto& v : t.values) v = static_cast<float>(rng.normal() * scale);
  return t;
}

Tensor from_rows(const std::vector<std::vector<float>>& rows) {
  Tensor t({static_cast<int>(rows.size()),
            static_cast<int>(rows.empty() ? 0 : rows[0].size())});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(),
              t.values.begin() + static_cast<long>(r) * t.cols());
  return t;
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(const std::string& name, Tensor init) {
  if (entries_.count(name))
    throw std::invalid_argument("duplicate parameter: " + name);
  Entry e;
  e.grad = zeros(init.shape);
  e.m = zeros(init.shape);
  e.v = zeros(init.shape);
  e.value = std::move(init);
  entries_.emplace(name, std::move(e));
}

ParameterSet::Entry& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

const ParameterSet::Entry& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& [_, e] : entries_)
    std::fill(e.grad.values.begin(), e.grad.values.end(), 0.0f);
  grads_ready = false;
}

long ParameterSet::param_count() const {
  long n = 0;
  for (const auto& [_, e] : entries_) n += e.value.numel();
  return n;
}

void adam_step(ParameterSet& ps, double lr, double beta1, double beta2,
               double eps) {
  if (ps.frozen()) throw std::logic_error("parameter set is frozen");
  if (!ps.grads_ready) throw std::logic_error("adam_step: no gradients populated");
  ps.step_count_ += 1;
  double t = static_cast<double>(ps.step_count_);
  double bc1 = 1.0 - std::pow(beta1, t);
  double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [_, e] : ps.entries_) {
    for (int i = 0; i < e.value.numel(); ++i) {
      double g = e.grad.values[i];
      double m = beta1 * e.m.values[i] + (1.0 - beta1) * g;
      double v = beta2 * e.v.values[i] + (1.0 - beta2) * g * g;
      e.m.values[i] = static_cast<float>(m);
      e.v.values[i] = static_cast<float>(v);
      double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
      e.value.values[i] = static_cast<float>(e.value.values[i] - update);
    }
    std::fill(e.grad.values.begin(), e.grad.values.end(), 0.0f);
  }
  ps.grads_ready = false;
}

// ---------------------------------------------------------------------------
// matmul kernels. Large products split their output rows over a fixed number
// of threads; the per-row accumulation order never changes, so results are
// bit-identical at any thread count.

namespace {

int mm_threads() {
  static int n = [] {
    if (const char* env = std::getenv("SKILLLAB_MM_THREADS"))
      return std::max(1, std::atoi(env));
    return 2;
  }();
  return n;
}

constexpr long kParallelFlops = 400000;

template <typename Fn>
void split_rows(int rows, long work, Fn&& fn) {
  int nt = mm_threads();
  if (nt < 2 || rows < 2 * nt || work < kParallelFlops) {
    fn(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  int chunk = (rows + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int b = t * chunk;
    int e = std::min(rows, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

void matmul_accum(const float* a, const float* b, float* c, int m, int k, int n) {
  split_rows(m, static_cast<long>(m) * k * n, [&](int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
      const float* arow = a + static_cast<long>(i) * k;
      float* crow = c + static_cast<long>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        float av = arow[kk];
        if (av == 0.0f) continue;
        const float* brow = b + static_cast<long>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

namespace {

// C += A^T * B, with A (m,k), B (m,n), C (k,n); partitioned over C's rows
void matmul_at_b(const float* a, const float* b, float* c, int m, int k, int n) {
  split_rows(k, static_cast<long>(m) * k * n, [&](int k0, int k1) {
    for (int i = 0; i < m; ++i) {
      const float* arow = a + static_cast<long>(i) * k;
      const float* brow = b + static_cast<long>(i) * n;
      for (int kk = k0; kk < k1; ++kk) {
        float av = arow[kk];
        if (av == 0.0f) continue;
        float* crow = c + static_cast<long>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// C += A * B^T, with A (m,k), B (n,k), C (m,n)
void matmul_a_bt(const float* a, const float* b, float* c, int m, int k, int n) {
  split_rows(m, static_cast<long>(m) * k * n, [&](int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
      const float* arow = a + static_cast<long>(i) * k;
      float* crow = c + static_cast<long>(i) * n;
      for (int j = 0; j < n; ++j) {
        const float* brow = b + static_cast<long>(j) * k;
        double acc = 0.0;
        for (int kk = 0; kk < k; ++kk) acc += double(arow[kk]) * brow[kk];
        crow[j] += static_cast<float>(acc);
      }
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

Tape::Ref Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size() - 1);
}

void Tape::ensure_grad(Ref r) {
  Node& nd = node(r);
  if (nd.grd.values.empty()) nd.grd = zeros(nd.val.shape);
}

const Tensor& Tape::value(Ref r) const { return nodes_.at(r).val; }
const Tensor& Tape::grad(Ref r) const { return nodes_.at(r).grd; }

Tape::Ref Tape::input(Tensor value) {
  Node n;
  n.op = Op::Input;
  n.val = std::move(value);
  return push(std::move(n));
}

Tape::Ref Tape::param(ParameterSet& ps, const std::string& name) {
  Node n;
  n.op = Op::Param;
  n.ps = &ps;
  n.pname = name;
  n.val = ps.at(name).value;
  return push(std::move(n));
}

Tape::Ref Tape::matmul(Ref a, Ref b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.cols() != B.rows()) shape_error("matmul", A, B);
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b, -1, -1};
  n.val = zeros({A.rows(), B.cols()});
  matmul_accum(A.values.data(), B.values.data(), n.val.values.data(), A.rows(),
               A.cols(), B.cols());
  return push(std::move(n));
}

Tape::Ref Tape::add(Ref a, Ref b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_error("add", A, B);
  Node n;
  n.op = Op::Add;
  n.in = {a, b, -1, -1};
  n.val = A;
  for (int i = 0; i < n.val.numel(); ++i) n.val.values[i] += B.values[i];
  return push(std::move(n));
}

Tape::Ref Tape::add_bias(Ref x, Ref bias) {
  const Tensor& X = value(x);
  const Tensor& B = value(bias);
  if (B.numel() != X.cols()) shape_error("add_bias", X, B);
  Node n;
  n.op = Op::AddBias;
  n.in = {x, bias, -1, -1};
  n.val = X;
  for (int r = 0; r < X.rows(); ++r)
    for (int c = 0; c < X.cols(); ++c) n.val.at(r, c) += B.values[c];
  return push(std::move(n));
}

Tape::Ref Tape::sub(Ref a, Ref b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_error("sub", A, B);
  Node n;
  n.op = Op::Sub;
  n.in = {a, b, -1, -1};
  n.val = A;
  for (int i = 0; i < n.val.numel(); ++i) n.val.values[i] -= B.values[i];
  return push(std::move(n));
}

Tape::Ref Tape::mul(Ref a, Ref b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_error("mul", A, B);
  Node n;
  n.op = Op::Mul;
  n.in = {a, b, -1, -1};
  n.val = A;
  for (int i = 0; i < n.val.numel(); ++i) n.val.values[i] *= B.values[i];
  return push(std::move(n));
}

Tape::Ref Tape::scale(Ref a, double s) {
  Node n;
  n.op = Op::Scale;
  n.in = {a, -1, -1, -1};
  n.s0 = s;
  n.val = value(a);
  for (auto& v : n.val.values) v = static_cast<float>(v * s);
  return push(std::move(n));
}

Tape::Ref Tape::row_scale(Ref x, Ref s) {
  const Tensor& X = value(x);
  const Tensor& S = value(s);
  if (S.numel() != X.rows()) shape_error("row_scale", X, S);
  Node n;
  n.op = Op::RowScale;
  n.in = {x, s, -1, -1};
  n.val = X;
  for (int r = 0; r < X.rows(); ++r)
    for (int c = 0; c < X.cols(); ++c) n.val.at(r, c) *= S.values[r];
  return push(std::move(n));
}

Tape::Ref Tape::tanh(Ref a) {
  Node n;
  n.op = Op::Tanh;
  n.in = {a, -1, -1, -1};
  n.val = value(a);
  for (auto& v : n.val.values) v = std::tanh(v);
  return push(std::move(n));
}

Tape::Ref Tape::sigmoid(Ref a) {
  Node n;
  n.op = Op::Sigmoid;
  n.in = {a, -1, -1, -1};
  n.val = value(a);
  for (auto& v : n.val.values) v = 1.0f / (1.0f + std::exp(-v));
  return push(std::move(n));
}

Tape::Ref Tape::layer_norm(Ref x, Ref gain, Ref bias) {
  const Tensor& X = value(x);
  if (value(gain).numel() != X.cols()) shape_error("layer_norm", X, value(gain));
  if (value(bias).numel() != X.cols()) shape_error("layer_norm", X, value(bias));
  Node n;
  n.op = Op::LayerNorm;
  n.in = {x, gain, bias, -1};
  n.val = X;
  const Tensor& G = value(gain);
  const Tensor& B = value(bias);
  const double eps = 1e-5;
  for (int r = 0; r < X.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < X.cols(); ++c) mean += X.at(r, c);
    mean /= X.cols();
    for (int c = 0; c < X.cols(); ++c) {
      double d = X.at(r, c) - mean;
      var += d * d;
    }
    var /= X.cols();
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < X.cols(); ++c)
      n.val.at(r, c) = static_cast<float>(
          (X.at(r, c) - mean) * inv * G.values[c] + B.values[c]);
  }
  return push(std::move(n));
}

Tape::Ref Tape::softmax_rows(Ref x) {
  Node n;
  n.op = Op::SoftmaxRows;
  n.in = {x, -1, -1, -1};
  n.val = value(x);
  for (int r = 0; r < n.val.rows(); ++r) {
    float mx = n.val.at(r, 0);
    for (int c = 1; c < n.val.cols(); ++c) mx = std::max(mx, n.val.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < n.val.cols(); ++c) {
      float e = std::exp(n.val.at(r, c) - mx);
      n.val.at(r, c) = e;
      sum += e;
    }
    for (int c = 0; c < n.val.cols(); ++c)
      n.val.at(r, c) = static_cast<float>(n.val.at(r, c) / sum);
  }
  return push(std::move(n));
}

Tape::Ref Tape::concat_cols(const std::vector<Ref>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  int rows = value(xs[0]).rows();
  int cols = 0;
  for (Ref r : xs) {
    if (value(r).rows() != rows) shape_error("concat_cols", value(xs[0]), value(r));
    cols += value(r).cols();
  }
  Node n;
  n.op = Op::ConcatCols;
  n.many = xs;
  n.val = zeros({rows, cols});
  int off = 0;
  for (Ref ref : xs) {
    const Tensor& T = value(ref);
    for (int r = 0; r < rows; ++r)
      std::copy(T.values.begin() + static_cast<long>(r) * T.cols(),
                T.values.begin() + static_cast<long>(r + 1) * T.cols(),
                n.val.values.begin() + static_cast<long>(r) * cols + off);
    off += T.cols();
  }
  return push(std::move(n));
}

Tape::Ref Tape::slice_cols(Ref x, int begin, int end) {
  const Tensor& X = value(x);
  if (begin < 0 || end > X.cols() || begin >= end)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(begin) +
                                "," + std::to_string(end) + ") for cols " +
                                std::to_string(X.cols()));
  Node n;
  n.op = Op::SliceCols;
  n.in = {x, -1, -1, -1};
  n.i0 = begin;
  n.i1 = end;
  n.val = zeros({X.rows(), end - begin});
  for (int r = 0; r < X.rows(); ++r)
    for (int c = begin; c < end; ++c) n.val.at(r, c - begin) = X.at(r, c);
  return push(std::move(n));
}

Tape::Ref Tape::reshape(Ref x, std::vector<int> shape) {
  const Tensor& X = value(x);
  if (shape_numel(shape) != X.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.in = {x, -1, -1, -1};
  n.val.shape = std::move(shape);
  n.val.values = X.values;
  return push(std::move(n));
}

Tape::Ref Tape::detach(Ref x) {
  Node n;
  n.op = Op::Detach;
  n.in = {x, -1, -1, -1};
  n.val = value(x);
  return push(std::move(n));
}

Tape::Ref Tape::attention(Ref q, Ref k, Ref v, Ref wo, int n_heads, int q_tokens,
                          int kv_tokens) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  const Tensor& V = value(v);
  const Tensor& WO = value(wo);
  int d = Q.cols();
  if (K.cols() != d || !K.same_shape(V)) shape_error("attention", Q, K);
  if (d % n_heads != 0)
    throw std::invalid_argument("attention: dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(n_heads));
  if (Q.rows() % q_tokens != 0 || K.rows() % kv_tokens != 0)
    throw std::invalid_argument("attention: rows not a multiple of tokens");
  if (Q.rows() / q_tokens != K.rows() / kv_tokens)
    throw std::invalid_argument("attention: group count mismatch");
  if (WO.rows() != d || WO.cols() != d) shape_error("attention", Q, WO);

  int groups = Q.rows() / q_tokens;
  int dh = d / n_heads;
  double inv = 1.0 / std::sqrt(static_cast<double>(dh));

  Node n;
  n.op = Op::Attention;
  n.in = {q, k, v, wo};
  n.i0 = n_heads;
  n.i1 = q_tokens;
  n.i2 = kv_tokens;
  // cache softmax weights for backward
  Tensor attnw = zeros({groups * n_heads * q_tokens, kv_tokens});
  Tensor headout = zeros({Q.rows(), d});  // pre-projection output
  for (int g = 0; g < groups; ++g) {
    int qrow0 = g * q_tokens;
    int krow0 = g * kv_tokens;
    for (int h = 0; h < n_heads; ++h) {
      int c0 = h * dh;
      for (int i = 0; i < q_tokens; ++i) {
        double mx = -1e30;
        std::vector<double> sc(static_cast<std::size_t>(kv_tokens));
        for (int j = 0; j < kv_tokens; ++j) {
          double s = 0.0;
          for (int c = 0; c < dh; ++c)
            s += double(Q.at(qrow0 + i, c0 + c)) * K.at(krow0 + j, c0 + c);
          sc[j] = s * inv;
          mx = std::max(mx, sc[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < kv_tokens; ++j) {
          sc[j] = std::exp(sc[j] - mx);
          sum += sc[j];
        }
        int arow = (g * n_heads + h) * q_tokens + i;
        for (int j = 0; j < kv_tokens; ++j)
          attnw.at(arow, j) = static_cast<float>(sc[j] / sum);
        for (int c = 0; c < dh; ++c) {
          double o = 0.0;
          for (int j = 0; j < kv_tokens; ++j)
            o += double(attnw.at(arow, j)) * V.at(krow0 + j, c0 + c);
          headout.at(qrow0 + i, c0 + c) = static_cast<float>(o);
        }
      }
    }
  }
  n.val = zeros({Q.rows(), d});
  matmul_accum(headout.values.data(), WO.values.data(), n.val.values.data(),
               Q.rows(), d, d);
  n.extra0 = std::move(attnw);
  n.extra1 = std::move(headout);
  return push(std::move(n));
}

Tape::Ref Tape::mse(Ref pred, Ref target) {
  const Tensor& P = value(pred);
  const Tensor& T = value(target);
  if (!P.same_shape(T)) shape_error("mse", P, T);
  Node n;
  n.op = Op::Mse;
  n.in = {pred, target, -1, -1};
  double acc = 0.0;
  for (int i = 0; i < P.numel(); ++i) {
    double d = double(P.values[i]) - T.values[i];
    acc += d * d;
  }
  n.val = zeros({1, 1});
  n.val.values[0] = static_cast<float>(acc / P.numel());
  return push(std::move(n));
}

Tape::Ref Tape::bce(Ref prob, Ref target) {
  const Tensor& P = value(prob);
  const Tensor& T = value(target);
  if (!P.same_shape(T)) shape_error("bce", P, T);
  Node n;
  n.op = Op::Bce;
  n.in = {prob, target, -1, -1};
  double acc = 0.0;
  for (int i = 0; i < P.numel(); ++i) {
    double u = std::clamp(P.values[i], kProbEps, 1.0f - kProbEps);
    double v = T.values[i];
    acc += -v * std::log(u) - (1.0 - v) * std::log(1.0 - u);
  }
  n.val = zeros({1, 1});
  n.val.values[0] = static_cast<float>(acc / P.numel());
  return push(std::move(n));
}

Tape::Ref Tape::row_sqerr(Ref a, Ref b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!A.same_shape(B)) shape_error("row_sqerr", A, B);
  Node n;
  n.op = Op::RowSqErr;
  n.in = {a, b, -1, -1};
  n.val = zeros({A.rows(), 1});
  for (int r = 0; r < A.rows(); ++r) {
    double acc = 0.0;
    for (int c = 0; c < A.cols(); ++c) {
      double d = double(A.at(r, c)) - B.at(r, c);
      acc += d * d;
    }
    n.val.values[r] = static_cast<float>(acc);
  }
  return push(std::move(n));
}

Tape::Ref Tape::softmax_ce(Ref logits, Ref onehot) {
  const Tensor& L = value(logits);
  const Tensor& Y = value(onehot);
  if (!L.same_shape(Y)) shape_error("softmax_ce", L, Y);
  Node n;
  n.op = Op::SoftmaxCe;
  n.in = {logits, onehot, -1, -1};
  // cache softmax probabilities for backward
  Tensor probs = L;
  double acc = 0.0;
  for (int r = 0; r < L.rows(); ++r) {
    float mx = L.at(r, 0);
    for (int c = 1; c < L.cols(); ++c) mx = std::max(mx, L.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < L.cols(); ++c) {
      double e = std::exp(double(L.at(r, c)) - mx);
      probs.at(r, c) = static_cast<float>(e);
      sum += e;
    }
    for (int c = 0; c < L.cols(); ++c) {
      double p = probs.at(r, c) / sum;
      probs.at(r, c) = static_cast<float>(p);
      if (Y.at(r, c) > 0.0f)
        acc -= Y.at(r, c) * std::log(std::max(p, 1e-12));
    }
  }
  n.val = zeros({1, 1});
  n.val.values[0] = static_cast<float>(acc / L.rows());
  n.extra0 = std::move(probs);
  return push(std::move(n));
}

Tape::Ref Tape::mean_all(Ref x) {
  const Tensor& X = value(x);
  Node n;
  n.op = Op::MeanAll;
  n.in = {x, -1, -1, -1};
  double acc = 0.0;
  for (float v : X.values) acc += v;
  n.val = zeros({1, 1});
  n.val.values[0] = static_cast<float>(acc / X.numel());
  return push(std::move(n));
}

void Tape::backward(Ref loss) {
  if (backward_done_) throw std::logic_error("backward called twice on one tape");
  backward_done_ = true;
  if (value(loss).numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar");

  ensure_grad(loss);
  node(loss).grd.values[0] = 1.0f;

  for (Ref r = loss; r >= 0; --r) {
    Node& nd = node(r);
    if (nd.grd.values.empty()) continue;  // not on any path to the loss
    const Tensor& g = nd.grd;
    switch (nd.op) {
      case Op::Input:
        break;
      case Op::Param: {
        auto& entry = nd.ps->at(nd.pname);
        for (int i = 0; i < g.numel(); ++i) entry.grad.values[i] += g.values[i];
        nd.ps->grads_ready = true;
        break;
      }
      case Op::MatMul: {
        Node& a = node(nd.in[0]);
        Node& b = node(nd.in[1]);
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        // dA += dC * B^T ; dB += A^T * dC
        matmul_a_bt(g.values.data(), b.val.values.data(), a.grd.values.data(),
                    g.rows(), g.cols(), a.val.cols());
        matmul_at_b(a.val.values.data(), g.values.data(), b.grd.values.data(),
                    a.val.rows(), a.val.cols(), g.cols());
        break;
      }
      case Op::Add: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        for (int i = 0; i < g.numel(); ++i) {
          node(nd.in[0]).grd.values[i] += g.values[i];
          node(nd.in[1]).grd.values[i] += g.values[i];
        }
        break;
      }
      case Op::AddBias: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& x = node(nd.in[0]);
        Node& b = node(nd.in[1]);
        for (int i = 0; i < g.numel(); ++i) x.grd.values[i] += g.values[i];
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < g.cols(); ++c) b.grd.values[c] += g.at(r, c);
        break;
      }
      case Op::Sub: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        for (int i = 0; i < g.numel(); ++i) {
          node(nd.in[0]).grd.values[i] += g.values[i];
          node(nd.in[1]).grd.values[i] -= g.values[i];
        }
        break;
      }
      case Op::Mul: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& a = node(nd.in[0]);
        Node& b = node(nd.in[1]);
        for (int i = 0; i < g.numel(); ++i) {
          a.grd.values[i] += g.values[i] * b.val.values[i];
          b.grd.values[i] += g.values[i] * a.val.values[i];
        }
        break;
      }
      case Op::Scale: {
        ensure_grad(nd.in[0]);
        Node& a = node(nd.in[0]);
        for (int i = 0; i < g.numel(); ++i)
          a.grd.values[i] += static_cast<float>(g.values[i] * nd.s0);
        break;
      }
      case Op::RowScale: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& x = node(nd.in[0]);
        Node& s = node(nd.in[1]);
        for (int r = 0; r < g.rows(); ++r) {
          double sg = 0.0;
          for (int c = 0; c < g.cols(); ++c) {
            x.grd.at(r, c) += g.at(r, c) * s.val.values[r];
            sg += double(g.at(r, c)) * x.val.at(r, c);
          }
          s.grd.values[r] += static_cast<float>(sg);
        }
        break;
      }
      case Op::Tanh: {
        ensure_grad(nd.in[0]);
        Node& a = node(nd.in[0]);
        for (int i = 0; i < g.numel(); ++i) {
          float y = nd.val.values[i];
          a.grd.values[i] += g.values[i] * (1.0f - y * y);
        }
        break;
      }
      case Op::Sigmoid: {
        ensure_grad(nd.in[0]);
        Node& a = node(nd.in[0]);
        for (int i = 0; i < g.numel(); ++i) {
          float y = nd.val.values[i];
          a.grd.values[i] += g.values[i] * y * (1.0f - y);
        }
        break;
      }
      case Op::LayerNorm: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        ensure_grad(nd.in[2]);
        Node& x = node(nd.in[0]);
        Node& gn = node(nd.in[1]);
        Node& bn = node(nd.in[2]);
        int C = x.val.cols();
        const double eps = 1e-5;
        for (int r = 0; r < x.val.rows(); ++r) {
          double mean = 0.0, var = 0.0;
          for (int c = 0; c < C; ++c) mean += x.val.at(r, c);
          mean /= C;
          for (int c = 0; c < C; ++c) {
            double d = x.val.at(r, c) - mean;
            var += d * d;
          }
          var /= C;
          double inv = 1.0 / std::sqrt(var + eps);
          // xhat_c = (x_c - mean) * inv ; out = g*xhat + b
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int c = 0; c < C; ++c) {
            double xhat = (x.val.at(r, c) - mean) * inv;
            double dy = double(g.at(r, c)) * gn.val.values[c];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
            gn.grd.values[c] += static_cast<float>(double(g.at(r, c)) * xhat);
            bn.grd.values[c] += g.at(r, c);
          }
          for (int c = 0; c < C; ++c) {
            double xhat = (x.val.at(r, c) - mean) * inv;
            double dy = double(g.at(r, c)) * gn.val.values[c];
            double dx = inv * (dy - sum_dy / C - xhat * sum_dy_xhat / C);
            x.grd.at(r, c) += static_cast<float>(dx);
          }
        }
        break;
      }
      case Op::SoftmaxRows: {
        ensure_grad(nd.in[0]);
        Node& x = node(nd.in[0]);
        for (int r = 0; r < g.rows(); ++r) {
          double dot = 0.0;
          for (int c = 0; c < g.cols(); ++c)
            dot += double(g.at(r, c)) * nd.val.at(r, c);
          for (int c = 0; c < g.cols(); ++c)
            x.grd.at(r, c) += static_cast<float>(
                nd.val.at(r, c) * (double(g.at(r, c)) - dot));
        }
        break;
      }
      case Op::ConcatCols: {
        int off = 0;
        for (Ref ref : nd.many) {
          ensure_grad(ref);
          Node& part = node(ref);
          int pc = part.val.cols();
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < pc; ++c)
              part.grd.at(r, c) += g.at(r, off + c);
          off += pc;
        }
        break;
      }
      case Op::SliceCols: {
        ensure_grad(nd.in[0]);
        Node& x = node(nd.in[0]);
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < g.cols(); ++c)
            x.grd.at(r, nd.i0 + c) += g.at(r, c);
        break;
      }
      case Op::Reshape: {
        ensure_grad(nd.in[0]);
        Node& x = node(nd.in[0]);
        for (int i = 0; i < g.numel(); ++i) x.grd.values[i] += g.values[i];
        break;
      }
      case Op::Detach:
        break;  // gradient flow stops here, exactly
      case Op::Attention: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        ensure_grad(nd.in[2]);
        ensure_grad(nd.in[3]);
        Node& qn = node(nd.in[0]);
        Node& kn = node(nd.in[1]);
        Node& vn = node(nd.in[2]);
        Node& won = node(nd.in[3]);
        int heads = nd.i0, tq = nd.i1, tkv = nd.i2;
        int rows = qn.val.rows();
        int d = qn.val.cols();
        int groups = rows / tq;
        int dh = d / heads;
        double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        const Tensor& attnw = nd.extra0;
        const Tensor& headout = nd.extra1;
        // d(headout) = g * Wo^T ; dWo = headout^T * g
        Tensor dhead = zeros({rows, d});
        matmul_a_bt(g.values.data(), won.val.values.data(),
                    dhead.values.data(), rows, d, d);
        matmul_at_b(headout.values.data(), g.values.data(),
                    won.grd.values.data(), rows, d, d);
        for (int grp = 0; grp < groups; ++grp) {
          int qrow0 = grp * tq;
          int krow0 = grp * tkv;
          for (int h = 0; h < heads; ++h) {
            int c0 = h * dh;
            for (int i = 0; i < tq; ++i) {
              int arow = (grp * heads + h) * tq + i;
              // dA_ij = sum_c dhead_ic V_jc ; dV_jc += A_ij dhead_ic
              std::vector<double> dA(static_cast<std::size_t>(tkv), 0.0);
              for (int j = 0; j < tkv; ++j) {
                double acc = 0.0;
                for (int c = 0; c < dh; ++c) {
                  acc += double(dhead.at(qrow0 + i, c0 + c)) *
                         vn.val.at(krow0 + j, c0 + c);
                  vn.grd.at(krow0 + j, c0 + c) +=
                      attnw.at(arow, j) * dhead.at(qrow0 + i, c0 + c);
                }
                dA[j] = acc;
              }
              // softmax backward
              double dot = 0.0;
              for (int j = 0; j < tkv; ++j)
                dot += dA[j] * attnw.at(arow, j);
              for (int j = 0; j < tkv; ++j) {
                double dS = attnw.at(arow, j) * (dA[j] - dot) * inv;
                for (int c = 0; c < dh; ++c) {
                  qn.grd.at(qrow0 + i, c0 + c) += static_cast<float>(
                      dS * kn.val.at(krow0 + j, c0 + c));
                  kn.grd.at(krow0 + j, c0 + c) += static_cast<float>(
                      dS * qn.val.at(qrow0 + i, c0 + c));
                }
              }
            }
          }
        }
        break;
      }
      case Op::Mse: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& p = node(nd.in[0]);
        Node& t = node(nd.in[1]);
        float go = g.values[0];
        float scale = 2.0f / p.val.numel();
        for (int i = 0; i < p.val.numel(); ++i) {
          float d = p.val.values[i] - t.val.values[i];
          p.grd.values[i] += go * scale * d;
          t.grd.values[i] -= go * scale * d;
        }
        break;
      }
      case Op::Bce: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& p = node(nd.in[0]);
        Node& t = node(nd.in[1]);
        float go = g.values[0];
        int N = p.val.numel();
        for (int i = 0; i < N; ++i) {
          double u = std::clamp(p.val.values[i], kProbEps, 1.0f - kProbEps);
          double v = t.val.values[i];
          p.grd.values[i] += static_cast<float>(
              go * (-v / u + (1.0 - v) / (1.0 - u)) / N);
          t.grd.values[i] += static_cast<float>(
              go * (std::log(1.0 - u) - std::log(u)) / N);
        }
        break;
      }
      case Op::RowSqErr: {
        ensure_grad(nd.in[0]);
        ensure_grad(nd.in[1]);
        Node& a = node(nd.in[0]);
        Node& b = node(nd.in[1]);
        for (int r = 0; r < a.val.rows(); ++r) {
          float go = g.values[r];
          for (int c = 0; c < a.val.cols(); ++c) {
            float d = a.val.at(r, c) - b.val.at(r, c);
            a.grd.at(r, c) += go * 2.0f * d;
            b.grd.at(r, c) -= go * 2.0f * d;
          }
        }
        break;
      }
      case Op::MeanAll: {
        ensure_grad(nd.in[0]);
        Node& x = node(nd.in[0]);
        float go = g.values[0] / x.val.numel();
        for (int i = 0; i < x.val.numel(); ++i) x.grd.values[i] += go;
        break;
      }
      case Op::SoftmaxCe: {
        ensure_grad(nd.in[0]);
        Node& l = node(nd.in[0]);
        const Tensor& probs = nd.extra0;
        const Tensor& y = node(nd.in[1]).val;
        float go = g.values[0] / l.val.rows();
        for (int i = 0; i < l.val.numel(); ++i)
          l.grd.values[i] += go * (probs.values[i] - y.values[i]);
        break;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// grad_check

double grad_check(const std::function<double(ParameterSet&)>& f,
                  ParameterSet& ps, double eps) {
  // analytic pass: the callback is expected to run forward+backward and
  // return the loss; grads accumulate into ps
  ps.zero_grad();
  double base = f(ps);
  if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss");
  std::map<std::string, Tensor> analytic;
  for (auto& [name, e] : ps.entries()) analytic[name] = e.grad;

  double max_rel = 0.0;
  for (auto& [name, e] : ps.entries()) {
    for (int i = 0; i < e.value.numel(); ++i) {
      float keep = e.value.values[i];
      e.value.values[i] = static_cast<float>(keep + eps);
      ps.zero_grad();
      double lp = f(ps);
      e.value.values[i] = static_cast<float>(keep - eps);
      ps.zero_grad();
      double lm = f(ps);
      e.value.values[i] = keep;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw std::runtime_error("grad_check: non-finite loss at " + name);
      double fd = (lp - lm) / (2.0 * eps);
      double an = analytic[name].values[i];
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
      max_rel = std::max(max_rel, rel);
    }
  }
  ps.zero_grad();
  return max_rel;
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const std::string& path_base,
                     const std::map<std::string, const ParameterSet*>& sets,
                     const std::string& extra_json) {
  json manifest;
  manifest["format"] = "skilllab-ckpt-v1";
  manifest["extra"] = extra_json.empty() ? json::object() : json::parse(extra_json);
  json tensors = json::array();
  std::ofstream blob(path_base + ".bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw std::runtime_error("cannot write " + path_base + ".bin");
  std::uint64_t offset = 0;
  for (const auto& [set_name, ps] : sets) {
    for (const auto& [name, e] : ps->entries()) {
      json t;
      t["name"] = set_name + "/" + name;
      t["shape"] = e.value.shape;
      t["offset"] = offset;
      tensors.push_back(t);
      blob.write(reinterpret_cast<const char*>(e.value.values.data()),
                 static_cast<long>(e.value.values.size() * sizeof(float)));
      offset += e.value.values.size() * sizeof(float);
    }
  }
  manifest["tensors"] = tensors;
  manifest["blob_bytes"] = offset;
  std::ofstream mf(path_base + ".json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write " + path_base + ".json");
  mf << manifest.dump(1) << "\n";
}

std::string load_checkpoint(const std::string& path_base,
                            std::map<std::string, ParameterSet*>& sets) {
  std::ifstream mf(path_base + ".json");
  if (!mf) throw std::runtime_error("cannot read " + path_base + ".json");
  json manifest = json::parse(mf);
  if (manifest.value("format", "") != "skilllab-ckpt-v1")
    throw std::runtime_error("unknown checkpoint format in " + path_base);
  std::ifstream blob(path_base + ".bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot read " + path_base + ".bin");
  for (const auto& t : manifest["tensors"]) {
    std::string full = t["name"].get<std::string>();
    auto slash = full.find('/');
    std::string set_name = full.substr(0, slash);
    std::string pname = full.substr(slash + 1);
    auto it = sets.find(set_name);
    if (it == sets.end()) continue;  // caller did not request this set
    std::vector<int> shape = t["shape"].get<std::vector<int>>();
    Tensor tensor(shape);
    blob.seekg(static_cast<long>(t["offset"].get<std::uint64_t>()));
    blob.read(reinterpret_cast<char*>(tensor.values.data()),
              static_cast<long>(tensor.values.size() * sizeof(float)));
    if (!blob) throw std::runtime_error("truncated checkpoint blob: " + path_base);
    ParameterSet* ps = it->second;
    if (ps->has(pname)) {
      if (ps->at(pname).value.shape != shape)
        throw std::runtime_error("checkpoint shape mismatch for " + full);
      ps->at(pname).value = std::move(tensor);
    } else {
      ps->add(pname, std::move(tensor));
    }
  }
  return manifest["extra"].dump();
}

}  // namespace skilllab::diffcore
