#pragma once

#include "moestack/graph.hpp"
#include "moestack/tensor.hpp"

namespace moestack {
namespace ops {

// All ops are differentiable through the tape unless noted. Reductions
// accumulate in double; storage stays float32.

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]

// mid[t,e,r] = sum_f x[t,f] A[e,r,f];  out[t,e,o] = sum_r mid[t,e,r] B[e,o,r] * s
Tensor batched_contract(const Tensor& x, const Tensor& a, const Tensor& b,
                        float scale);

// out[t,o] = sum_e gates[t,e] * expert_out[t,e,o]
Tensor gate_combine(const Tensor& gates, const Tensor& expert_out);

// ---- elementwise / shape ----
Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowwise(const Tensor& x, const Tensor& b);  // [t,n] + [n]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float c);
Tensor reshape(const Tensor& x, const Shape& shape);  // copy, numel preserved
Tensor transpose(const Tensor& x);                    // 2-d only

Tensor softplus(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);

// ---- normalization / regularization ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
// Inverted dropout; mask is drawn once and treated as a constant. Callers
// skip this op entirely in eval mode.
Tensor dropout(const Tensor& x, float p, Rng& rng);

// ---- softmax / routing ----
// Rows with -inf entries map those entries to exactly 0. A row that is
// all -inf has no selectable expert and raises RoutingError.
Tensor softmax(const Tensor& x, int axis = -1);

// Keeps the k largest entries per row (last axis), sets the rest to -inf.
// Ties break toward the lowest index. Gradient passes through kept entries.
Tensor topk_mask(const Tensor& x, int64_t k);

// ---- reductions / losses ----
Tensor sum(const Tensor& x);                      // -> scalar
Tensor mean_rows(const Tensor& x);                // [t,n] -> [n]
Tensor dot(const Tensor& a, const Tensor& b);     // [n].[n] -> scalar

// Mean token cross-entropy over positions whose target != ignore_index.
// targets are not differentiated. Target ids must be < vocab.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_index = -1);

// Elementwise stable binary cross-entropy on logits; targets constant.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// ---- model building blocks ----
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Causal multi-head self attention over a single sequence.
// q,k,v: [t, d]; d divisible by n_heads; scores masked above the diagonal.
Tensor multihead_causal_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, int n_heads);

}  // namespace ops
}  // namespace moestack
