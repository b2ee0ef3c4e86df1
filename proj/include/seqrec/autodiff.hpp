#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "seqrec/tensor.hpp"

namespace seqrec::ad {

// Reverse-mode tape over dense double tensors. Each operation allocates a
// node holding its forward value and a closure that scatters the node's
// cotangent into its parents. Graphs are rebuilt per step; parameter leaves
// live across steps and keep their gradient buffers until zeroed.
class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor::zeros(value.shape);
    return grad;
  }
  void zero_grad() {
    if (!grad.data.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Leaf constructors.
Var make_param(Tensor value);
Var make_const(Tensor value);

// Elementwise and scalar ops (same-shape operands).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

// x: N x D, v: vector of length D added to every row.
Var add_rowvec(const Var& x, const Var& v);

// Matrix product of optionally transposed 2-D operands.
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// Row gather from an embedding table (backward scatter-adds).
Var embed_rows(const Var& table, const std::vector<int64_t>& ids);

// Row gather from an intermediate matrix.
Var select_rows(const Var& x, const std::vector<int64_t>& rows);

Var concat_rows(const Var& a, const Var& b);
Var concat_cols(const Var& a, const Var& b);

// Per-row layer norm with learned gain/bias vectors (length D).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var gelu(const Var& x);
Var tanh_op(const Var& x);

// Inverted dropout with a mask derived deterministically from `seed`.
// rate == 0 returns the input unchanged.
Var dropout(const Var& x, double rate, uint64_t seed);

// Multi-head causal self attention over right-aligned rows.
// q,k,v: (B*L) x D with head count H dividing D; lengths[b] gives the number
// of trailing non-padding positions in row b. Position t attends to
// positions [L-len, t]; fully padded query positions attend only to
// themselves so the softmax stays defined (their outputs carry no gradient).
Var attention(const Var& q, const Var& k, const Var& v, int64_t batch, int64_t len,
              int64_t heads, const std::vector<int64_t>& lengths);

// Rows scaled to unit L2 norm; throws naming the row index on a zero row.
Var row_l2_normalize(const Var& x);

// Mean over rows of -log softmax(logits)[target]. Column 0 (the padding
// item) is excluded from the softmax support.
Var cross_entropy_mean(const Var& logits, const std::vector<int64_t>& targets,
                       bool mask_col0 = true);

// Membership bookkeeping for the contrastive terms. Index sets are fixed
// data for the step; gradients flow only through the similarity values.
struct ContrastCtx {
  std::vector<int64_t> pos;                    // positive partner per anchor
  std::vector<std::vector<int64_t>> m_minus;   // retained negatives per anchor
  std::vector<std::vector<int64_t>> m_plus;    // relabeled positives per anchor
  double tau = 1.0;
  bool positive_sampling = false;
};

// Per-anchor contrastive terms from a similarity matrix S (2B x 2B).
// With positive_sampling off, each term is
//   -log( e^{S[i,pos]/tau} / sum_{j in m_minus[i] + {pos}} e^{S[i,j]/tau} )
// and an anchor with empty m_minus contributes exactly 0. With sampling on,
// the relabeled positives get weight 1/(2|M+|) and the augmented positive
// weight 1/2, both inside the log; empty M+ falls back to the plain term.
Var contrastive_terms(const Var& sim, const ContrastCtx& ctx);

Var sum_all(const Var& x);
Var mean_all(const Var& x);

// sum_i x_i * w_i with constant weights.
Var dot_const(const Var& x, const Tensor& w);

// sum_i (x_i - target)^2
Var sq_diff_sum(const Var& x, double target);

// Value passes through, gradient does not.
Var detach(const Var& x);

// Accumulate gradients of a scalar root into every reachable node.
void backward(const Var& root);

}  // namespace seqrec::ad
