#include "tempo/fusion.hpp"

#include <cmath>

#include "doctest.h"
#include "test_support.hpp"

using namespace tempo;
using tempo::testsupport::bit_identical;
using tempo::testsupport::max_abs_diff;

namespace {

// Independent composition: batch-stat normalize -> linear -> GELU -> linear
// -> residual, written with plain Eigen arithmetic.
MatrixR naive_adapt(const MatrixR& f, const DepthAdapter::Branch& b) {
  const Index r = f.rows(), c = f.cols();
  Eigen::RowVectorXd mu = f.colwise().mean();
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(c);
  for (Index i = 0; i < r; ++i) {
    var += (f.row(i) - mu).array().square().matrix();
  }
  var /= static_cast<double>(r);
  MatrixR normed(r, c);
  for (Index i = 0; i < r; ++i) {
    for (Index j = 0; j < c; ++j) {
      normed(i, j) = (f(i, j) - mu(j)) /
                         std::sqrt(var(j) + DepthAdapter::kNormEps) *
                         b.gamma.at(j) +
                     b.beta.at(j);
    }
  }
  MatrixR hidden = normed * b.mlp.w1.mat();
  for (Index i = 0; i < hidden.rows(); ++i) hidden.row(i) += b.mlp.b1.mat();
  for (Index i = 0; i < hidden.size(); ++i) {
    double& x = hidden.data()[i];
    x = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
  }
  MatrixR out = hidden * b.mlp.w2.mat();
  for (Index i = 0; i < out.rows(); ++i) out.row(i) += b.mlp.b2.mat();
  return f + out;
}

}  // namespace

TEST_CASE("adapt_layer is the identity with a zeroed MLP output layer") {
  Rng rng(41);
  DepthAdapter a = DepthAdapter::init(8, 32, DepthAdapter::Norm::batch, rng);
  Tensor f = Tensor::randn({6, 8}, rng);
  for (int j = 1; j <= 4; ++j) {
    CHECK(bit_identical(a.adapt_layer(f, j), f));
    CHECK(bit_identical(a.adapt_layer_train(f, j), f));
  }
  CHECK_THROWS_AS(a.adapt_layer(f, 0), ContractError);
  CHECK_THROWS_AS(a.adapt_layer(f, 5), ContractError);
}

TEST_CASE("zero input isolates the adapter branch") {
  Rng rng(42);
  DepthAdapter a = DepthAdapter::init(4, 8, DepthAdapter::Norm::batch, rng);
  auto& b = a.branches()[1];
  b.mlp.w2 = Tensor::randn({8, 4}, rng, 0.1);
  b.mlp.b2 = Tensor::randn({4}, rng, 0.1);
  Tensor zero = Tensor::zeros({3, 4});
  Tensor out = a.adapt_layer(zero, 2);
  // With F = 0 the residual vanishes; output is MLP(Norm(0)) rowwise.
  MatrixR expect = naive_adapt(MatrixR::Zero(3, 4), b);
  CHECK(max_abs_diff(out, Tensor::from({3, 4},
                                       ArrayX(Eigen::Map<const ArrayX>(
                                           expect.data(), expect.size())))) <
        1e-12);
}

TEST_CASE("adapt_layer_train matches the naive composition oracle") {
  Rng rng(43);
  DepthAdapter a = DepthAdapter::init(8, 16, DepthAdapter::Norm::batch, rng);
  for (std::size_t j = 0; j < 4; ++j) {
    auto& b = a.branches()[j];
    b.mlp.w2 = Tensor::randn({16, 8}, rng, 0.05);
    b.gamma = Tensor::randn({8}, rng, 0.2);
    b.gamma.values() += 1.0;
    b.beta = Tensor::randn({8}, rng, 0.1);
  }
  Tensor f = Tensor::randn({10, 8}, rng);
  for (int j = 1; j <= 4; ++j) {
    Tensor got = a.adapt_layer_train(f, j);
    MatrixR expect =
        naive_adapt(MatrixR(f.mat()),
                    a.branches()[static_cast<std::size_t>(j - 1)]);
    double worst = 0;
    for (Index i = 0; i < got.rows(); ++i) {
      for (Index c = 0; c < got.cols(); ++c) {
        worst = std::max(worst, std::abs(got(i, c) - expect(i, c)));
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("training folds batch statistics into the running estimates") {
  Rng rng(44);
  DepthAdapter a = DepthAdapter::init(4, 8, DepthAdapter::Norm::batch, rng);
  Tensor f = Tensor::randn({32, 4}, rng);
  f.values() += 2.0;  // clearly non-zero mean
  a.adapt_layer_train(f, 1);
  const auto& b = a.branches()[0];
  Eigen::RowVectorXd mu = f.mat().colwise().mean();
  for (Index j = 0; j < 4; ++j) {
    const double expect = 0.9 * 0.0 + 0.1 * mu(j);
    CHECK(b.run_mean.at(j) == doctest::Approx(expect).epsilon(1e-12));
  }
  // Evaluation now uses the running statistics, not the batch ones.
  Tensor e1 = a.adapt_layer(f, 1);
  Tensor e2 = a.adapt_layer(f, 1);
  CHECK(bit_identical(e1, e2));
}

TEST_CASE("token-norm fallback normalizes per token") {
  Rng rng(45);
  DepthAdapter a = DepthAdapter::init(6, 12, DepthAdapter::Norm::token, rng);
  auto& b = a.branches()[0];
  b.mlp.w2 = Tensor::randn({12, 6}, rng, 0.05);
  Tensor f = Tensor::randn({4, 6}, rng);
  Tensor eval_out = a.adapt_layer(f, 1);
  Tensor train_out = a.adapt_layer_train(f, 1);
  // No batch statistics involved: train and eval agree exactly.
  CHECK(bit_identical(eval_out, train_out));
}

TEST_CASE("fuse_depths arithmetic") {
  Rng rng(46);
  Tensor a = Tensor::randn({5, 6}, rng);
  std::array<Tensor, 4> same = {a, a, a, a};
  CHECK(max_abs_diff(fuse_depths(same), a) < 1e-15);

  Tensor four_a = scale(a, 4.0);
  Tensor z = Tensor::zeros({5, 6});
  std::array<Tensor, 4> mix = {z, z, z, four_a};
  CHECK(max_abs_diff(fuse_depths(mix), a) < 1e-15);

  std::array<Tensor, 4> rnd = {Tensor::randn({5, 6}, rng),
                               Tensor::randn({5, 6}, rng),
                               Tensor::randn({5, 6}, rng),
                               Tensor::randn({5, 6}, rng)};
  Tensor fused = fuse_depths(rnd);
  for (Index i = 0; i < fused.size(); ++i) {
    const double expect = (rnd[0].at(i) + rnd[1].at(i) + rnd[2].at(i) +
                           rnd[3].at(i)) /
                          4.0;
    CHECK(std::abs(fused.at(i) - expect) < 1e-15);
  }

  // Linearity in a scalar.
  std::array<Tensor, 4> scaled;
  for (std::size_t j = 0; j < 4; ++j) scaled[j] = scale(rnd[j], 3.5);
  CHECK(max_abs_diff(fuse_depths(scaled), scale(fused, 3.5)) < 1e-12);

  std::array<Tensor, 4> bad = {a, a, a, Tensor::zeros({4, 6})};
  CHECK_THROWS_AS(fuse_depths(bad), ShapeError);
}

TEST_CASE("assemble_frame_tokens order and counts") {
  Rng rng(47);
  Tensor fused = Tensor::randn({3, 4}, rng);
  Tensor cls = Tensor::randn({1, 4}, rng);
  Tensor regs = Tensor::randn({2, 4}, rng);

  Tensor out = assemble_frame_tokens(fused, cls, regs);
  CHECK(out.dim(0) == 6);
  CHECK(bit_identical(rows(out, 0, 3), fused));
  CHECK(bit_identical(rows(out, 3, 1), cls));
  CHECK(bit_identical(rows(out, 4, 2), regs));

  Tensor no_regs = Tensor::zeros({0, 4});
  CHECK(assemble_frame_tokens(fused, cls, no_regs).dim(0) == 4);

  Tensor single = Tensor::randn({1, 4}, rng);
  CHECK(assemble_frame_tokens(single, cls, Tensor::randn({1, 4}, rng)).dim(0) ==
        3);

  CHECK_THROWS_AS(assemble_frame_tokens(fused, Tensor::zeros({1, 5}), regs),
                  ShapeError);
}

TEST_CASE("final_layer_only uses raw depth-4 features") {
  Rng rng(48);
  FeatureStack stack;
  for (auto& d : stack.per_depth) d = Tensor::randn({4, 6}, rng);
  stack.cls = Tensor::randn({1, 6}, rng);
  stack.registers = Tensor::randn({2, 6}, rng);

  Tensor out = final_layer_only(stack);
  CHECK(bit_identical(
      out, assemble_frame_tokens(stack.per_depth[3], stack.cls,
                                 stack.registers)));

  // With zero adapters the multi-depth path equals the plain mean of raw
  // depth features; it differs from final-layer-only unless depths agree.
  DepthAdapter zeroed = DepthAdapter::init(6, 12, DepthAdapter::Norm::batch,
                                           rng);
  std::array<Tensor, 4> adapted;
  for (int j = 1; j <= 4; ++j) {
    adapted[static_cast<std::size_t>(j - 1)] =
        zeroed.adapt_layer(stack.per_depth[static_cast<std::size_t>(j - 1)],
                           j);
  }
  Tensor fused = fuse_depths(adapted);
  Tensor plain_mean = fuse_depths(stack.per_depth);
  CHECK(bit_identical(fused, plain_mean));
  CHECK(max_abs_diff(fused, stack.per_depth[3]) > 1e-3);

  FeatureStack equal_depths = stack;
  for (auto& d : equal_depths.per_depth) d = stack.per_depth[3];
  std::array<Tensor, 4> adapted_eq;
  for (int j = 1; j <= 4; ++j) {
    adapted_eq[static_cast<std::size_t>(j - 1)] = zeroed.adapt_layer(
        equal_depths.per_depth[static_cast<std::size_t>(j - 1)], j);
  }
  Tensor multi = assemble_frame_tokens(fuse_depths(adapted_eq),
                                       equal_depths.cls,
                                       equal_depths.registers);
  CHECK(bit_identical(multi, final_layer_only(equal_depths)));
}
