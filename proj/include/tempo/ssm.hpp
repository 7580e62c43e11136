#pragma once

#include <utility>

#include "tempo/nn.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

/// Selective state-space primitive over d channels with an n-dimensional
/// state per channel. The transition is diagonal with A = -exp(a_log), so
/// |exp(delta * A)| < 1 for any delta > 0. Selectivity: delta, B and C are
/// projections of the current input token.
struct SelectiveSSM {
  Index channels = 0;  // d
  Index state = 0;     // n
  Tensor a_log;        // d x n
  Tensor w_delta;      // d x d
  Tensor b_delta;      // d, softplus(b) in [1e-3, 1e-1] at init
  Tensor w_b;          // d x n
  Tensor w_c;          // d x n
  Tensor skip;         // d, per-channel input passthrough

  static SelectiveSSM init(Index channels, Index state, Rng& rng);
  void collect(ParamStore& ps, const std::string& prefix);
};

/// Hidden state for M tokens scanned independently: rows are (token, channel)
/// pairs, token-major. Zero-initialized at sequence start.
struct SSMState {
  Tensor h;  // (tokens * d) x n
  Index tokens = 0;
  long steps = 0;

  static SSMState zeros(Index tokens, Index channels, Index state_dim) {
    return {Tensor::zeros({tokens * channels, state_dim}), tokens, 0};
  }
  void detach() { h.detach(); }
};

/// Zero-order-hold discretization for a single token:
///   A_bar = exp(delta * A),  B_bar = (A_bar - 1) / A * B_t
/// with delta applied per channel (row of A). delta must be positive.
std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a,
                                     const Tensor& b_t);

/// One recurrence step. x is {M, d} (or {d}, treated as one token):
///   h' = A_bar ⊙ h + B_bar ⊙ x,   y = Σ_n C_t ⊙ h' + skip ⊙ x.
std::pair<Tensor, SSMState> ssm_step(const SelectiveSSM& ssm, const Tensor& x,
                                     const SSMState& state);

/// Fold of ssm_step over the rows of xs {T, d} (single token).
std::pair<Tensor, SSMState> selective_scan_sequential(const SelectiveSSM& ssm,
                                                      const Tensor& xs,
                                                      const SSMState& init);

/// Blockwise scan: each chunk runs a local scan from zero plus cumulative
/// A_bar products to splice in the carried state. Agrees with the sequential
/// scan within 1e-10 for any chunk size, including non-dividing ones.
std::pair<Tensor, SSMState> selective_scan_chunked(const SelectiveSSM& ssm,
                                                   const Tensor& xs,
                                                   Index chunk,
                                                   const SSMState& init);

}  // namespace tempo
