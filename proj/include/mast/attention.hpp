#pragma once

// Masked multi-head spatial self-attention. Rows are agents; mask(i, j) says
// whether receiver i may attend to sender j.

#include "mast/comm.hpp"
#include "mast/numkernel.hpp"
#include "mast/posenc.hpp"

#include <limits>
#include <span>
#include <vector>

namespace mast {

using MaskMatrix = BoolMatrix;

inline constexpr double kUnboundedRadius = std::numeric_limits<double>::infinity();

/// mask(i, j) = ||p_i - p_j|| < radius; the diagonal is always true.
MaskMatrix window_mask(const Matrix& positions, double radius);

/// mask(i, j) = there is a directed path from j to i (always true on the diagonal).
/// On symmetric graphs this is "i and j share a connected component".
MaskMatrix component_mask(const CommGraph& graph);

/// Elementwise AND.
MaskMatrix combine_masks(const MaskMatrix& a, const MaskMatrix& b);

/// Per-head projections. q/k/v[h] are head_dim x d, output is d x (heads * head_dim).
struct AttentionWeights {
  std::vector<Var> q, k, v;
  Var output;
};

struct AttentionOptions {
  bool scaled = true;  // divide logits by sqrt(head_dim)
  SoftmaxDenominator denominator = SoftmaxDenominator::masked;
  const FrequencySet* rope = nullptr;  // rotary encoding of queries/keys when set
};

/// Multi-head attention of X (N x d) at positions (N x 2) under `mask`.
Var attend(Var x, const Matrix& positions, const AttentionWeights& weights, const MaskMatrix& mask,
           const AttentionOptions& options);

/// Value-level weights for attend() without a caller-managed tape.
struct AttentionParams {
  std::vector<Matrix> q, k, v;
  Matrix output;

  int heads() const { return static_cast<int>(q.size()); }
};

Matrix attend(const Matrix& x, const Matrix& positions, const AttentionParams& params, const MaskMatrix& mask,
              const AttentionOptions& options);

/// Attention weights a_ij (after softmax) of one head, for inspection and tests.
Matrix attention_weights(const Matrix& x, const Matrix& positions, const Matrix& q, const Matrix& k,
                         const MaskMatrix& mask, const AttentionOptions& options);

}  // namespace mast
