#pragma once

#include <array>

#include "tempo/encoder.hpp"
#include "tempo/nn.hpp"

namespace tempo {

enum class FeatureMode { multi_depth, final_layer };

/// Four per-depth adapter branches: Norm -> MLP -> residual add. The second
/// MLP layer starts at zero so adaptation begins as the identity.
///
/// Normalization is per-channel batch statistics while training (callers
/// hand in the whole batch of token rows) and frozen running statistics at
/// evaluation time. A per-token layer-norm fallback is available for strict
/// determinism studies.
class DepthAdapter {
 public:
  enum class Norm { batch, token };

  struct Branch {
    Tensor gamma, beta;          // D
    Tensor run_mean, run_var;    // D buffers (batch mode)
    MlpParams mlp;               // D -> hidden -> D, second layer zero-init
  };

  static DepthAdapter init(Index width, Index hidden, Norm norm, Rng& rng);

  /// Evaluation-time adaptation of one depth's features (j in 1..4).
  Tensor adapt_layer(const Tensor& features, int j) const;

  /// Training-time adaptation: normalizes with the statistics of
  /// `features`'s rows and folds them into the running estimates.
  Tensor adapt_layer_train(const Tensor& features, int j);

  void collect(ParamStore& ps, const std::string& prefix);

  Norm norm_mode() const { return norm_; }
  std::array<Branch, 4>& branches() { return branches_; }
  const std::array<Branch, 4>& branches() const { return branches_; }

  static constexpr Scalar kNormEps = 1e-5;
  static constexpr Scalar kMomentum = 0.1;

 private:
  Tensor run_branch(const Branch& b, const Tensor& features,
                    const Tensor& centered_scale_mean,
                    const Tensor& centered_scale_var) const;

  Norm norm_ = Norm::batch;
  std::array<Branch, 4> branches_;
};

/// Arithmetic mean of the four adapted depth tensors.
Tensor fuse_depths(const std::array<Tensor, 4>& adapted);

/// Token sequence [patch tokens; CLS; registers], (N + 1 + R) x D.
Tensor assemble_frame_tokens(const Tensor& fused, const Tensor& cls,
                             const Tensor& registers);

/// Baseline assembly from raw final-depth features, no adapters.
Tensor final_layer_only(const FeatureStack& stack);

}  // namespace tempo
