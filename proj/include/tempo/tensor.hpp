#pragma once

#include <Eigen/Dense>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "tempo/errors.hpp"
#include "tempo/rng.hpp"

namespace tempo {

// All math runs in 64-bit floats; the precision is a build-time constant.
using Scalar = double;
using Index = Eigen::Index;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using MatrixR =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixR>;
using ConstMatMap = Eigen::Map<const MatrixR>;

using Shape = std::vector<Index>;

std::string shape_string(const Shape& s);
Index shape_size(const Shape& s);

class GradTape;

/// Dense n-dimensional array of doubles in row-major order. A tensor may
/// carry a handle into a GradTape, in which case operations on it record
/// their reverse-mode gradient rules.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(ArrayX::Zero(shape_size(shape_))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v);
  static Tensor from(Shape shape, std::initializer_list<Scalar> vals);
  static Tensor from(Shape shape, ArrayX vals);
  static Tensor scalar(Scalar v) { return from({1}, {v}); }
  static Tensor randn(Shape shape, Rng& rng, Scalar stddev = 1.0);

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }

  /// Row count when the tensor is viewed as a matrix whose columns are the
  /// last axis and whose rows are all leading axes flattened. A 1-d tensor
  /// is a single row.
  Index rows() const { return ndim() <= 1 ? 1 : size() / last_dim(); }
  Index cols() const { return last_dim(); }
  Index last_dim() const {
    return shape_.empty() ? 0 : shape_.back();
  }

  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }
  MatMap mat() { return MatMap(data_.data(), rows(), cols()); }

  ArrayX& values() { return data_; }
  const ArrayX& values() const { return data_; }
  Scalar& at(Index i) { return data_[i]; }
  Scalar at(Index i) const { return data_[i]; }
  Scalar operator()(Index r, Index c) const { return mat()(r, c); }

  /// Value of a single-element tensor.
  Scalar item() const;

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  GradTape* tape() const { return tape_; }

  /// Drop any tape association; values are kept.
  void detach() {
    tape_ = nullptr;
    node_ = -1;
  }

 private:
  Shape shape_;
  ArrayX data_;
  GradTape* tape_ = nullptr;
  int node_ = -1;

  friend class GradTape;
  friend Tensor make_tracked(GradTape*, Tensor, int);
};

/// Gradients from one backward pass, addressable by the tensors that were
/// alive on the tape (typically the watched parameters).
class GradMap {
 public:
  /// Gradient of the loss with respect to `t`, shaped like `t`. Zero if no
  /// gradient reached it.
  Tensor grad(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  explicit GradMap(std::vector<ArrayX> grads) : grads_(std::move(grads)) {}
  std::vector<ArrayX> grads_;
  friend class GradTape;
};

/// Append-only record of differentiable operations. Nodes are stored in
/// topological order by construction: an operation's output is recorded
/// after its inputs, so a single reverse sweep visits each node once.
class GradTape {
 public:
  GradTape() = default;
  ~GradTape() { release_watched(); }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// Register `t` as a differentiable leaf. Idempotent per tape.
  void watch(Tensor& t);

  /// Reverse sweep from a scalar loss recorded on this tape.
  GradMap backward(const Tensor& loss) const;

  int node_count() const { return static_cast<int>(nodes_.size()); }

  using BackwardFn =
      std::function<void(const ArrayX& grad_out, const std::vector<ArrayX*>&)>;

  /// Internal: record an op node. Returns the new node id.
  int record(std::vector<int> parents, std::vector<Index> parent_sizes,
             Index out_size, BackwardFn back);

 private:
  struct Node {
    std::vector<int> parents;
    std::vector<Index> parent_sizes;
    Index out_size = 0;
    BackwardFn back;  // empty for leaves
  };

  void release_watched();

  std::vector<Node> nodes_;
  std::vector<Tensor*> watched_;
};

// ---------------------------------------------------------------------------
// Elementwise and structural operations. Each records its gradient rule when
// an input is tracked. `b` may either match `a`'s shape exactly or be a
// trailing-axes suffix of it (bias-style broadcast over leading axes).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, Scalar floor);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, Scalar c);
Tensor add_scalar(const Tensor& a, Scalar c);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
/// expm1(x)/x with the removable singularity at 0 filled in; accurate for
/// small |x| where exp(x)-1 would cancel.
Tensor expm1_over_x(const Tensor& a);

/// Softmax over the last axis; each row of the matrix view sums to 1.
Tensor softmax_last(const Tensor& a);

/// Per-row normalization over the last axis followed by the affine map
/// gamma * xhat + beta. Variance is the biased (population) estimate.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = 1e-6);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis0(const Tensor& a);
Tensor mean_axis0(const Tensor& a);
Tensor row_sums(const Tensor& a);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor rows(const Tensor& a, Index start, Index count);
Tensor cols(const Tensor& a, Index start, Index count);
Tensor reshape(const Tensor& a, Shape shape);
/// Stack `times` copies of `a` vertically.
Tensor tile_rows(const Tensor& a, Index times);
/// Repeat each row of `a` `times` consecutive times.
Tensor repeat_rows(const Tensor& a, Index times);
/// Scale row i of `a` by v[i].
Tensor scale_rows(const Tensor& a, const Tensor& v);

// Elementwise loss kernels; reduce with sum()/mean() as needed.
Tensor huber(const Tensor& pred, const Tensor& target, Scalar delta);
Tensor bce_logits(const Tensor& logits, const Tensor& targets);
Tensor l1(const Tensor& pred, const Tensor& target);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, Scalar c) { return scale(a, c); }
inline Tensor operator*(Scalar c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Attention. Weights are stored row-major as [in x out]; tokens are rows.
// ---------------------------------------------------------------------------

struct AttentionParams {
  Tensor wq, bq;
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;
  Index heads = 1;

  static AttentionParams init(Index dim, Index heads, Rng& rng,
                              Scalar stddev = 0.02);
  /// Identity projections, zero biases, one head.
  static AttentionParams identity(Index dim);
};

/// Multi-head self-attention over the rows of x [N x D].
Tensor mhsa(const Tensor& x, const AttentionParams& p);

/// Each query row attends over the context rows; attention rows sum to 1.
/// An empty context is a contract violation; zero queries give a 0 x D
/// result.
Tensor cross_attention(const Tensor& queries, const Tensor& context,
                       const AttentionParams& p);

}  // namespace tempo
