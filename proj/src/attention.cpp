#include "mast/attention.hpp"

#include <cmath>

namespace mast {

MaskMatrix window_mask(const Matrix& positions, double radius) {
  const Index n = positions.rows();
  MaskMatrix mask(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      mask(i, j) = i == j || (positions.row(i) - positions.row(j)).norm() < radius;
    }
  }
  return mask;
}

MaskMatrix component_mask(const CommGraph& graph) { return reachability(graph); }

MaskMatrix combine_masks(const MaskMatrix& a, const MaskMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("combine_masks: " + shape_string(a) + " vs " + shape_string(b));
  }
  return a.array() && b.array();
}

namespace {

Var head_logits(Var x, const Matrix& positions, Var q, Var k, const AttentionOptions& options) {
  Var queries = matmul_bt(x, q);
  Var keys = matmul_bt(x, k);
  if (options.rope) {
    queries = rope_rows(queries, positions, *options.rope);
    keys = rope_rows(keys, positions, *options.rope);
  }
  Var logits = matmul_bt(queries, keys);
  if (options.scaled) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(q.rows())));
  return logits;
}

}  // namespace

Var attend(Var x, const Matrix& positions, const AttentionWeights& weights, const MaskMatrix& mask,
           const AttentionOptions& options) {
  const Index n = x.rows();
  if (positions.rows() != n || positions.cols() != 2) {
    throw ShapeError("attend: embeddings " + shape_string(x.value()) + " vs positions " + shape_string(positions));
  }
  if (mask.rows() != n || mask.cols() != n) {
    throw ShapeError("attend: mask " + shape_string(mask) + " for " + std::to_string(n) + " rows");
  }
  if (weights.q.empty() || weights.q.size() != weights.k.size() || weights.q.size() != weights.v.size()) {
    throw ShapeError("attend: inconsistent head counts");
  }
  std::vector<Var> heads;
  heads.reserve(weights.q.size());
  for (std::size_t h = 0; h < weights.q.size(); ++h) {
    Var logits = head_logits(x, positions, weights.q[h], weights.k[h], options);
    Var attn = softmax_masked_rows(logits, mask, options.denominator);
    heads.push_back(matmul(attn, matmul_bt(x, weights.v[h])));
  }
  return matmul_bt(hconcat(heads), weights.output);
}

Matrix attend(const Matrix& x, const Matrix& positions, const AttentionParams& params, const MaskMatrix& mask,
              const AttentionOptions& options) {
  Tape tape;
  AttentionWeights w;
  for (int h = 0; h < params.heads(); ++h) {
    w.q.push_back(tape.constant(params.q[static_cast<std::size_t>(h)]));
    w.k.push_back(tape.constant(params.k[static_cast<std::size_t>(h)]));
    w.v.push_back(tape.constant(params.v[static_cast<std::size_t>(h)]));
  }
  w.output = tape.constant(params.output);
  return attend(tape.constant(x), positions, w, mask, options).value();
}

Matrix attention_weights(const Matrix& x, const Matrix& positions, const Matrix& q, const Matrix& k,
                         const MaskMatrix& mask, const AttentionOptions& options) {
  Tape tape;
  Var logits = head_logits(tape.constant(x), positions, tape.constant(q), tape.constant(k), options);
  return softmax_masked_rows(logits, mask, options.denominator).value();
}

}  // namespace mast
