#include "tempo/fusion.hpp"

namespace tempo {

DepthAdapter DepthAdapter::init(Index width, Index hidden, Norm norm,
                                Rng& rng) {
  DepthAdapter a;
  a.norm_ = norm;
  for (Branch& b : a.branches_) {
    b.gamma = Tensor::full({width}, 1.0);
    b.beta = Tensor::zeros({width});
    b.run_mean = Tensor::zeros({width});
    b.run_var = Tensor::full({width}, 1.0);
    b.mlp = MlpParams::init(width, hidden, width, rng, 0.02, /*zero_out=*/true);
  }
  return a;
}

namespace {
const DepthAdapter::Branch& pick_branch(
    const std::array<DepthAdapter::Branch, 4>& branches, int j) {
  if (j < 1 || j > 4) {
    throw ContractError("adapt_layer: depth index " + std::to_string(j) +
                        " outside 1..4");
  }
  return branches[static_cast<std::size_t>(j - 1)];
}
}  // namespace

Tensor DepthAdapter::adapt_layer(const Tensor& features, int j) const {
  const Branch& b = pick_branch(branches_, j);
  Tensor normed;
  if (norm_ == Norm::token) {
    normed = layer_norm(features, b.gamma, b.beta, kNormEps);
  } else {
    Tensor centered = sub(features, b.run_mean);
    Tensor inv = sqrt(add_scalar(b.run_var, kNormEps));
    normed = add(mul(div(centered, inv), b.gamma), b.beta);
  }
  return add(features, apply_mlp(normed, b.mlp));
}

Tensor DepthAdapter::adapt_layer_train(const Tensor& features, int j) {
  pick_branch(branches_, j);  // validates the depth index
  Branch& b = branches_[static_cast<std::size_t>(j - 1)];
  if (norm_ == Norm::token) {
    Tensor normed = layer_norm(features, b.gamma, b.beta, kNormEps);
    return add(features, apply_mlp(normed, b.mlp));
  }
  Tensor mu = mean_axis0(features);
  Tensor centered = sub(features, mu);
  Tensor var = mean_axis0(mul(centered, centered));
  Tensor normed =
      add(mul(div(centered, sqrt(add_scalar(var, kNormEps))), b.gamma), b.beta);
  // Fold batch statistics into the running estimates (plain values).
  b.run_mean.values() =
      (1.0 - kMomentum) * b.run_mean.values() + kMomentum * mu.values();
  b.run_var.values() =
      (1.0 - kMomentum) * b.run_var.values() + kMomentum * var.values();
  return add(features, apply_mlp(normed, b.mlp));
}

void DepthAdapter::collect(ParamStore& ps, const std::string& prefix) {
  for (std::size_t j = 0; j < 4; ++j) {
    const std::string p = prefix + ".depth" + std::to_string(j + 1);
    Branch& b = branches_[j];
    ps.add(p + ".gamma", b.gamma);
    ps.add(p + ".beta", b.beta);
    ps.add(p + ".run_mean", b.run_mean, /*trainable=*/false);
    ps.add(p + ".run_var", b.run_var, /*trainable=*/false);
    b.mlp.collect(ps, p + ".mlp");
  }
}

Tensor fuse_depths(const std::array<Tensor, 4>& adapted) {
  const Shape& shape = adapted[0].shape();
  for (const Tensor& t : adapted) {
    if (t.shape() != shape) {
      throw ShapeError("fuse_depths: " + shape_string(shape) + " vs " +
                       shape_string(t.shape()));
    }
  }
  return scale(add(add(adapted[0], adapted[1]), add(adapted[2], adapted[3])),
               0.25);
}

Tensor assemble_frame_tokens(const Tensor& fused, const Tensor& cls,
                             const Tensor& registers) {
  if (fused.cols() != cls.cols() || fused.cols() != registers.cols()) {
    throw ShapeError("assemble_frame_tokens: widths " +
                     shape_string(fused.shape()) + ", " +
                     shape_string(cls.shape()) + ", " +
                     shape_string(registers.shape()));
  }
  return concat_rows({fused, cls, registers});
}

Tensor final_layer_only(const FeatureStack& stack) {
  return assemble_frame_tokens(stack.per_depth[3], stack.cls, stack.registers);
}

}  // namespace tempo
