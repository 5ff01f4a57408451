#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "mvd/mat.hpp"

namespace mvd::nn {

// Tape-based reverse-mode autodiff over Mat. A forward op allocates a Node
// holding the result and a closure that routes the incoming gradient to the
// parents. backward() walks the graph once in reverse topological order.
//
// Frozen models build their forwards from non-grad leaves, so their subgraphs
// are constants: no gradient is ever computed for or through them.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Mat value;
  Mat grad;  // allocated on demand, same shape as value
  bool requires_grad = false;
  bool grad_ready = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // empty for leaves

  Mat& ensure_grad() {
    if (!grad_ready) {
      grad = Mat::zeros(value.rows, value.cols);
      grad_ready = true;
    }
    return grad;
  }
  void zero_grad() {
    if (grad_ready) {
      for (auto& x : grad.d) x = 0.0;
    }
  }
};

// Multiply-add counter covering every matmul-like op, forward and backward.
// Serves as the deterministic cost proxy for the encoder scaling checks.
extern std::atomic<unsigned long long> g_flop_count;
inline void reset_flop_count() { g_flop_count.store(0); }
inline unsigned long long flop_count() { return g_flop_count.load(); }

Var leaf(Mat value, bool requires_grad);
Var constant(Mat value);

// Elementwise / broadcast
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_rowvec(const Var& x, const Var& row);  // x: m*n, row: 1*n

// Linear algebra
Var matmul(const Var& a, const Var& b);     // a: m*k, b: k*n
Var matmul_nt(const Var& a, const Var& b);  // a: m*k, b: n*k -> m*n

// Shape / indexing
Var gather_rows(const Var& x, std::vector<int> idx);
Var slice_cols(const Var& x, long c0, long c1);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
// Places visible rows at vis_idx and a broadcast mask-token row at mask_idx
// of a total-row output; builds the decoder input sequence after masking.
Var assemble_rows(const Var& visible, const Var& mask_token,
                  std::vector<int> vis_idx, std::vector<int> mask_idx);
Var mean_rows(const Var& x);  // -> 1*n
Var detach(const Var& x);     // stop-gradient copy

// Nonlinearities
Var gelu(const Var& x);                                            // erf-based
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-6);                                 // rowwise
Var softmax_rows(const Var& x);

// Reductions / losses
Var mean_all(const Var& x);  // -> 1*1
// Mean over masked rows of the per-row mean squared error; rows not in
// mask_rows contribute nothing (and receive zero gradient).
Var mse_masked(const Var& y, const Var& target, std::vector<int> mask_rows);
// Same averaging with the beta-parameterized smooth-L1 elementwise distance.
Var huber_masked(const Var& y, const Var& target, std::vector<int> mask_rows,
                 double beta);
Var cross_entropy(const Var& logits, std::vector<int> labels);  // mean NLL

// Accumulates d(root)/d(leaf) into every reachable grad-requiring leaf.
// root must be scalar (1*1).
void backward(const Var& root);

}  // namespace mvd::nn
