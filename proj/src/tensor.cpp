#include "tempo/tensor.hpp"

#include <cmath>
#include <utility>

namespace tempo {

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return s.empty() ? 0 : n;
}

Tensor Tensor::full(Shape shape, Scalar v) {
  Tensor t(std::move(shape));
  t.data_.setConstant(v);
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<Scalar> vals) {
  Tensor t(std::move(shape));
  if (static_cast<Index>(vals.size()) != t.size()) {
    throw ShapeError("Tensor::from: " + std::to_string(vals.size()) +
                     " values for shape " + shape_string(t.shape_));
  }
  Index i = 0;
  for (Scalar v : vals) t.data_[i++] = v;
  return t;
}

Tensor Tensor::from(Shape shape, ArrayX vals) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (vals.size() != shape_size(t.shape_)) {
    throw ShapeError("Tensor::from: " + std::to_string(vals.size()) +
                     " values for shape " + shape_string(t.shape_));
  }
  t.data_ = std::move(vals);
  return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data_[i] = rng.normal(0.0, stddev);
  return t;
}

Scalar Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(size()) +
                        " elements");
  }
  return data_[0];
}

Tensor make_tracked(GradTape* tape, Tensor out, int node) {
  out.tape_ = tape;
  out.node_ = node;
  return out;
}

// --- GradTape -------------------------------------------------------------

void GradTape::watch(Tensor& t) {
  if (t.tracked()) {
    if (t.tape_ == this) return;
    throw ContractError("watch: tensor already tracked by another tape");
  }
  t.tape_ = this;
  t.node_ = record({}, {}, t.size(), nullptr);
  watched_.push_back(&t);
}

int GradTape::record(std::vector<int> parents, std::vector<Index> parent_sizes,
                     Index out_size, BackwardFn back) {
  Node n;
  n.parents = std::move(parents);
  n.parent_sizes = std::move(parent_sizes);
  n.out_size = out_size;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void GradTape::release_watched() {
  for (Tensor* t : watched_) t->detach();
  watched_.clear();
}

GradMap GradTape::backward(const Tensor& loss) const {
  if (!loss.tracked() || loss.tape() != this) {
    throw ContractError("backward: loss is not recorded on this tape");
  }
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_string(loss.shape()));
  }
  std::vector<ArrayX> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node())] = ArrayX::Ones(1);
  std::vector<ArrayX*> pg;
  for (int i = loss.node(); i >= 0; --i) {
    auto& gi = grads[static_cast<std::size_t>(i)];
    if (gi.size() == 0) continue;
    const Node& nd = nodes_[static_cast<std::size_t>(i)];
    if (!nd.back) continue;  // leaf
    pg.clear();
    for (std::size_t j = 0; j < nd.parents.size(); ++j) {
      const int p = nd.parents[j];
      if (p < 0) {
        pg.push_back(nullptr);
        continue;
      }
      auto& gp = grads[static_cast<std::size_t>(p)];
      if (gp.size() == 0) gp = ArrayX::Zero(nd.parent_sizes[j]);
      pg.push_back(&gp);
    }
    nd.back(gi, pg);
    gi.resize(0);  // intermediate grads are not needed again
  }
  return GradMap(std::move(grads));
}

Tensor GradMap::grad(const Tensor& t) const {
  if (!t.tracked()) throw ContractError("grad: tensor is not tracked");
  const auto idx = static_cast<std::size_t>(t.node());
  if (idx >= grads_.size() || grads_[idx].size() == 0) {
    return Tensor::zeros(t.shape());
  }
  return Tensor::from(t.shape(), grads_[idx]);
}

bool GradMap::has(const Tensor& t) const {
  if (!t.tracked()) return false;
  const auto idx = static_cast<std::size_t>(t.node());
  return idx < grads_.size() && grads_[idx].size() != 0;
}

// --- op plumbing ------------------------------------------------------------

namespace {

GradTape* common_tape(std::initializer_list<const Tensor*> ts) {
  GradTape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw ContractError("operands are tracked by different tapes");
    }
  }
  return tape;
}

bool is_suffix(const Shape& outer, const Shape& inner) {
  if (inner.size() > outer.size()) return false;
  for (std::size_t i = 0; i < inner.size(); ++i) {
    if (inner[inner.size() - 1 - i] != outer[outer.size() - 1 - i])
      return false;
  }
  return true;
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return;
  if (!is_suffix(a.shape(), b.shape()) || b.size() == 0) {
    throw ShapeError(std::string(op) + ": " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

ArrayX expand_to(const ArrayX& b, Index n) {
  if (b.size() == n) return b;
  ArrayX out(n);
  for (Index i = 0; i < n; i += b.size()) out.segment(i, b.size()) = b;
  return out;
}

/// Record a unary op whose input gradient is g * deriv (deriv empty when the
/// input is untracked).
Tensor record_unary(const Tensor& a, Tensor out, ArrayX deriv) {
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [d = std::move(deriv)](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (pg[0]) *pg[0] += g * d;
      });
  return make_tracked(tape, std::move(out), id);
}

/// Record a binary elementwise op (with suffix broadcast on b). Per-element
/// derivative arrays may be empty, in which case the scalar factor applies.
Tensor record_binary(const Tensor& a, const Tensor& b, Tensor out, ArrayX da,
                     ArrayX db, Scalar da_scale, Scalar db_scale) {
  GradTape* tape = common_tape({&a, &b});
  if (!tape) return out;
  const Index bs = b.size();
  int id = tape->record(
      {a.node(), b.node()}, {a.size(), b.size()}, out.size(),
      [da = std::move(da), db = std::move(db), da_scale, db_scale,
       bs](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (pg[0]) {
          if (da.size())
            *pg[0] += g * da;
          else
            *pg[0] += da_scale * g;
        }
        if (pg[1]) {
          if (bs == g.size()) {
            if (db.size())
              *pg[1] += g * db;
            else
              *pg[1] += db_scale * g;
          } else {
            for (Index i = 0; i < g.size(); ++i) {
              (*pg[1])[i % bs] += g[i] * (db.size() ? db[i] : db_scale);
            }
          }
        }
      });
  return make_tracked(tape, std::move(out), id);
}

}  // namespace

// --- elementwise binary -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "add");
  ArrayX be = expand_to(b.values(), a.size());
  Tensor out = Tensor::from(a.shape(), a.values() + be);
  return record_binary(a, b, std::move(out), {}, {}, 1.0, 1.0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "sub");
  ArrayX be = expand_to(b.values(), a.size());
  Tensor out = Tensor::from(a.shape(), a.values() - be);
  return record_binary(a, b, std::move(out), {}, {}, 1.0, -1.0);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "mul");
  ArrayX be = expand_to(b.values(), a.size());
  Tensor out = Tensor::from(a.shape(), a.values() * be);
  ArrayX da = a.tracked() ? std::move(be) : ArrayX();
  ArrayX db = b.tracked() ? a.values() : ArrayX();
  return record_binary(a, b, std::move(out), std::move(da), std::move(db), 0.0,
                       0.0);
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "div");
  ArrayX be = expand_to(b.values(), a.size());
  ArrayX vals = a.values() / be;
  ArrayX da = a.tracked() ? ArrayX(be.inverse()) : ArrayX();
  ArrayX db = b.tracked() ? ArrayX(-vals / be) : ArrayX();
  Tensor out = Tensor::from(a.shape(), std::move(vals));
  return record_binary(a, b, std::move(out), std::move(da), std::move(db), 0.0,
                       0.0);
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "minimum");
  ArrayX be = expand_to(b.values(), a.size());
  ArrayX take_a = (a.values() <= be).cast<Scalar>();
  Tensor out = Tensor::from(a.shape(), a.values().min(be));
  ArrayX db = b.tracked() ? ArrayX(1.0 - take_a) : ArrayX();
  ArrayX da = a.tracked() ? std::move(take_a) : ArrayX();
  return record_binary(a, b, std::move(out), std::move(da), std::move(db), 0.0,
                       0.0);
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "maximum");
  ArrayX be = expand_to(b.values(), a.size());
  ArrayX take_a = (a.values() >= be).cast<Scalar>();
  Tensor out = Tensor::from(a.shape(), a.values().max(be));
  ArrayX db = b.tracked() ? ArrayX(1.0 - take_a) : ArrayX();
  ArrayX da = a.tracked() ? std::move(take_a) : ArrayX();
  return record_binary(a, b, std::move(out), std::move(da), std::move(db), 0.0,
                       0.0);
}

Tensor maximum(const Tensor& a, Scalar floor) {
  Tensor out = Tensor::from(a.shape(), a.values().max(floor));
  ArrayX deriv =
      a.tracked() ? ArrayX((a.values() >= floor).cast<Scalar>()) : ArrayX();
  return record_unary(a, std::move(out), std::move(deriv));
}

// --- elementwise unary --------------------------------------------------

Tensor neg(const Tensor& a) {
  Tensor out = Tensor::from(a.shape(), -a.values());
  if (!a.tracked()) return out;
  return record_unary(a, std::move(out),
                      ArrayX::Constant(a.size(), Scalar(-1)));
}

Tensor scale(const Tensor& a, Scalar c) {
  Tensor out = Tensor::from(a.shape(), a.values() * c);
  if (!a.tracked()) return out;
  return record_unary(a, std::move(out), ArrayX::Constant(a.size(), c));
}

Tensor add_scalar(const Tensor& a, Scalar c) {
  Tensor out = Tensor::from(a.shape(), a.values() + c);
  if (!a.tracked()) return out;
  return record_unary(a, std::move(out), ArrayX::Ones(a.size()));
}

Tensor abs(const Tensor& a) {
  Tensor out = Tensor::from(a.shape(), a.values().abs());
  if (!a.tracked()) return out;
  return record_unary(a, std::move(out), ArrayX(a.values().sign()));
}

Tensor exp(const Tensor& a) {
  ArrayX vals = a.values().exp();
  ArrayX deriv = a.tracked() ? vals : ArrayX();
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

Tensor log(const Tensor& a) {
  Tensor out = Tensor::from(a.shape(), a.values().log());
  ArrayX deriv = a.tracked() ? ArrayX(a.values().inverse()) : ArrayX();
  return record_unary(a, std::move(out), std::move(deriv));
}

Tensor sqrt(const Tensor& a) {
  ArrayX vals = a.values().sqrt();
  ArrayX deriv = a.tracked() ? ArrayX(0.5 / vals) : ArrayX();
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

Tensor sigmoid(const Tensor& a) {
  ArrayX vals(a.size());
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar z = a.at(i);
    if (z >= 0) {
      vals[i] = 1.0 / (1.0 + std::exp(-z));
    } else {
      const Scalar e = std::exp(z);
      vals[i] = e / (1.0 + e);
    }
  }
  ArrayX deriv = a.tracked() ? ArrayX(vals * (1.0 - vals)) : ArrayX();
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

Tensor softplus(const Tensor& a) {
  ArrayX vals(a.size());
  ArrayX deriv = a.tracked() ? ArrayX(a.size()) : ArrayX();
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar z = a.at(i);
    vals[i] = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    if (deriv.size()) {
      deriv[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                        : std::exp(z) / (1.0 + std::exp(z));
    }
  }
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

Tensor gelu(const Tensor& a) {
  constexpr Scalar inv_sqrt2 = 0.7071067811865475244;
  constexpr Scalar inv_sqrt2pi = 0.3989422804014326779;
  ArrayX vals(a.size());
  ArrayX deriv = a.tracked() ? ArrayX(a.size()) : ArrayX();
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar x = a.at(i);
    const Scalar cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    vals[i] = x * cdf;
    if (deriv.size()) {
      deriv[i] = cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
    }
  }
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

Tensor expm1_over_x(const Tensor& a) {
  ArrayX vals(a.size());
  ArrayX deriv = a.tracked() ? ArrayX(a.size()) : ArrayX();
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar x = a.at(i);
    if (std::abs(x) < 1e-4) {
      vals[i] = 1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0)));
      if (deriv.size()) {
        deriv[i] = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0));
      }
    } else {
      vals[i] = std::expm1(x) / x;
      if (deriv.size()) {
        deriv[i] = (std::exp(x) * (x - 1.0) + 1.0) / (x * x);
      }
    }
  }
  return record_unary(a, Tensor::from(a.shape(), std::move(vals)),
                      std::move(deriv));
}

// --- normalization and softmax ----------------------------------------------

Tensor softmax_last(const Tensor& a) {
  if (a.ndim() < 1 || a.cols() == 0) {
    throw ShapeError("softmax_last: needs a non-empty last axis, got " +
                     shape_string(a.shape()));
  }
  Tensor out(a.shape());
  const Index r = a.rows(), c = a.cols();
  auto src = a.mat();
  auto dst = out.mat();
  for (Index i = 0; i < r; ++i) {
    const Scalar m = src.row(i).maxCoeff();
    dst.row(i) = (src.row(i).array() - m).exp();
    dst.row(i) /= dst.row(i).sum();
  }
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  ArrayX s = out.values();
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [s = std::move(s), r, c](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        for (Index i = 0; i < r; ++i) {
          auto gi = g.segment(i * c, c);
          auto si = s.segment(i * c, c);
          const Scalar dot = (gi * si).sum();
          pg[0]->segment(i * c, c) += si * (gi - dot);
        }
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps) {
  const Index c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: feature dim " + std::to_string(c) +
                     " vs gamma " + shape_string(gamma.shape()) + ", beta " +
                     shape_string(beta.shape()));
  }
  const Index r = x.rows();
  Tensor out(x.shape());
  ArrayX xhat(x.size());
  ArrayX inv_std(r);
  auto src = x.mat();
  for (Index i = 0; i < r; ++i) {
    const auto row = src.row(i).array();
    const Scalar mu = row.mean();
    const Scalar var = (row - mu).square().mean();
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    xhat.segment(i * c, c) = (row - mu) * inv;
    out.values().segment(i * c, c) =
        xhat.segment(i * c, c) * gamma.values() + beta.values();
  }
  GradTape* tape = common_tape({&x, &gamma, &beta});
  if (!tape) return out;
  ArrayX gam = gamma.values();
  int id = tape->record(
      {x.node(), gamma.node(), beta.node()},
      {x.size(), gamma.size(), beta.size()}, out.size(),
      [xhat = std::move(xhat), inv_std = std::move(inv_std),
       gam = std::move(gam), r, c](const ArrayX& g,
                                   const std::vector<ArrayX*>& pg) {
        for (Index i = 0; i < r; ++i) {
          auto gi = g.segment(i * c, c);
          auto xh = xhat.segment(i * c, c);
          if (pg[1]) *pg[1] += gi * xh;
          if (pg[2]) *pg[2] += gi;
          if (pg[0]) {
            const ArrayX gw = gi * gam;
            const Scalar m1 = gw.mean();
            const Scalar m2 = (gw * xh).mean();
            pg[0]->segment(i * c, c) += inv_std[i] * (gw - m1 - xh * m2);
          }
        }
      });
  return make_tracked(tape, std::move(out), id);
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  out.mat().noalias() = a.mat() * b.mat();
  GradTape* tape = common_tape({&a, &b});
  if (!tape) return out;
  ArrayX av = b.tracked() ? a.values() : ArrayX();
  ArrayX bv = a.tracked() ? b.values() : ArrayX();
  int id = tape->record(
      {a.node(), b.node()}, {a.size(), b.size()}, out.size(),
      [av = std::move(av), bv = std::move(bv), m, k,
       n](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        ConstMatMap gm(g.data(), m, n);
        if (pg[0]) {
          ConstMatMap bm(bv.data(), k, n);
          MatMap(pg[0]->data(), m, k).noalias() += gm * bm.transpose();
        }
        if (pg[1]) {
          ConstMatMap am(av.data(), m, k);
          MatMap(pg[1]->data(), k, n).noalias() += am.transpose() * gm;
        }
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) {
    throw ShapeError("transpose: expects 2-d, got " + shape_string(a.shape()));
  }
  const Index r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  out.mat() = a.mat().transpose();
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [r, c](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        ConstMatMap gm(g.data(), c, r);
        MatMap(pg[0]->data(), r, c) += gm.transpose();
      });
  return make_tracked(tape, std::move(out), id);
}

// --- reductions ---------------------------------------------------------

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::scalar(a.values().sum());
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record({a.node()}, {a.size()}, 1,
                        [](const ArrayX& g, const std::vector<ArrayX*>& pg) {
                          if (pg[0]) *pg[0] += g[0];
                        });
  return make_tracked(tape, std::move(out), id);
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  Tensor out = Tensor::scalar(a.values().mean());
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  const Scalar inv = 1.0 / static_cast<Scalar>(a.size());
  int id = tape->record({a.node()}, {a.size()}, 1,
                        [inv](const ArrayX& g, const std::vector<ArrayX*>& pg) {
                          if (pg[0]) *pg[0] += g[0] * inv;
                        });
  return make_tracked(tape, std::move(out), id);
}

namespace {
Tensor axis0_reduce(const Tensor& a, bool take_mean) {
  if (a.ndim() < 2) {
    throw ShapeError("axis-0 reduction expects >= 2-d, got " +
                     shape_string(a.shape()));
  }
  const Index r = a.rows(), c = a.cols();
  if (r == 0) throw ContractError("axis-0 reduction over zero rows");
  const Scalar w = take_mean ? 1.0 / static_cast<Scalar>(r) : 1.0;
  Tensor out({c});
  out.values() = a.mat().colwise().sum().array() * w;
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [r, c, w](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        for (Index i = 0; i < r; ++i) pg[0]->segment(i * c, c) += g * w;
      });
  return make_tracked(tape, std::move(out), id);
}
}  // namespace

Tensor sum_axis0(const Tensor& a) { return axis0_reduce(a, false); }
Tensor mean_axis0(const Tensor& a) { return axis0_reduce(a, true); }

Tensor row_sums(const Tensor& a) {
  const Index r = a.rows(), c = a.cols();
  Tensor out({r});
  out.values() = a.mat().rowwise().sum();
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [r, c](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        for (Index i = 0; i < r; ++i) pg[0]->segment(i * c, c) += g[i];
      });
  return make_tracked(tape, std::move(out), id);
}

// --- structure -----------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const Index c = parts.front().cols();
  Index total = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " +
                       shape_string(parts.front().shape()) + " vs " +
                       shape_string(p.shape()));
    }
    total += p.rows();
  }
  Tensor out({total, c});
  Index at = 0;
  for (const Tensor& p : parts) {
    out.values().segment(at, p.size()) = p.values();
    at += p.size();
  }
  GradTape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (!p.tracked()) continue;
    if (!tape) {
      tape = p.tape();
    } else if (tape != p.tape()) {
      throw ContractError("concat_rows: operands on different tapes");
    }
  }
  if (!tape) return out;
  std::vector<int> parents;
  std::vector<Index> sizes;
  for (const Tensor& p : parts) {
    parents.push_back(p.node());
    sizes.push_back(p.size());
  }
  std::vector<Index> szs = sizes;
  int id = tape->record(
      std::move(parents), std::move(sizes), out.size(),
      [szs = std::move(szs)](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        Index at = 0;
        for (std::size_t j = 0; j < szs.size(); ++j) {
          if (pg[j]) *pg[j] += g.segment(at, szs[j]);
          at += szs[j];
        }
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const Index r = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out({r, ca + cb});
  out.mat().leftCols(ca) = a.mat();
  out.mat().rightCols(cb) = b.mat();
  GradTape* tape = common_tape({&a, &b});
  if (!tape) return out;
  int id = tape->record(
      {a.node(), b.node()}, {a.size(), b.size()}, out.size(),
      [r, ca, cb](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        ConstMatMap gm(g.data(), r, ca + cb);
        if (pg[0]) MatMap(pg[0]->data(), r, ca) += gm.leftCols(ca);
        if (pg[1]) MatMap(pg[1]->data(), r, cb) += gm.rightCols(cb);
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor rows(const Tensor& a, Index start, Index count) {
  const Index r = a.rows(), c = a.cols();
  if (start < 0 || count < 0 || start + count > r) {
    throw ShapeError("rows: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " +
                     std::to_string(r));
  }
  Tensor out({count, c});
  out.values() = a.values().segment(start * c, count * c);
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [start, c](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (pg[0]) pg[0]->segment(start * c, g.size()) += g;
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor cols(const Tensor& a, Index start, Index count) {
  const Index r = a.rows(), c = a.cols();
  if (start < 0 || count < 0 || start + count > c) {
    throw ShapeError("cols: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of " +
                     std::to_string(c));
  }
  Tensor out({r, count});
  out.mat() = a.mat().middleCols(start, count);
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [r, c, start, count](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        ConstMatMap gm(g.data(), r, count);
        MatMap(pg[0]->data(), r, c).middleCols(start, count) += gm;
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " to " +
                     shape_string(shape));
  }
  Tensor out = Tensor::from(std::move(shape), a.values());
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record({a.node()}, {a.size()}, out.size(),
                        [](const ArrayX& g, const std::vector<ArrayX*>& pg) {
                          if (pg[0]) *pg[0] += g;
                        });
  return make_tracked(tape, std::move(out), id);
}

Tensor tile_rows(const Tensor& a, Index times) {
  if (times < 1) throw ContractError("tile_rows: times must be >= 1");
  const Index n = a.size();
  Tensor out({a.rows() * times, a.cols()});
  for (Index t = 0; t < times; ++t) out.values().segment(t * n, n) = a.values();
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {n}, out.size(),
      [n, times](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        for (Index t = 0; t < times; ++t) *pg[0] += g.segment(t * n, n);
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor repeat_rows(const Tensor& a, Index times) {
  if (times < 1) throw ContractError("repeat_rows: times must be >= 1");
  const Index r = a.rows(), c = a.cols();
  Tensor out({r * times, c});
  for (Index i = 0; i < r; ++i) {
    for (Index t = 0; t < times; ++t) {
      out.values().segment((i * times + t) * c, c) =
          a.values().segment(i * c, c);
    }
  }
  GradTape* tape = common_tape({&a});
  if (!tape) return out;
  int id = tape->record(
      {a.node()}, {a.size()}, out.size(),
      [r, c, times](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        if (!pg[0]) return;
        for (Index i = 0; i < r; ++i) {
          for (Index t = 0; t < times; ++t) {
            pg[0]->segment(i * c, c) += g.segment((i * times + t) * c, c);
          }
        }
      });
  return make_tracked(tape, std::move(out), id);
}

Tensor scale_rows(const Tensor& a, const Tensor& v) {
  const Index r = a.rows(), c = a.cols();
  if (v.size() != r) {
    throw ShapeError("scale_rows: " + shape_string(a.shape()) + " vs " +
                     shape_string(v.shape()));
  }
  Tensor out(a.shape());
  for (Index i = 0; i < r; ++i) {
    out.values().segment(i * c, c) = a.values().segment(i * c, c) * v.at(i);
  }
  GradTape* tape = common_tape({&a, &v});
  if (!tape) return out;
  ArrayX vv = a.tracked() ? v.values() : ArrayX();
  ArrayX av = v.tracked() ? a.values() : ArrayX();
  int id = tape->record(
      {a.node(), v.node()}, {a.size(), v.size()}, out.size(),
      [vv = std::move(vv), av = std::move(av), r,
       c](const ArrayX& g, const std::vector<ArrayX*>& pg) {
        for (Index i = 0; i < r; ++i) {
          if (pg[0]) pg[0]->segment(i * c, c) += g.segment(i * c, c) * vv[i];
          if (pg[1]) {
            (*pg[1])[i] += (g.segment(i * c, c) * av.segment(i * c, c)).sum();
          }
        }
      });
  return make_tracked(tape, std::move(out), id);
}

// --- loss kernels -----------------------------------------------------------

Tensor huber(const Tensor& pred, const Tensor& target, Scalar delta) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("huber: " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  if (delta <= 0) throw ContractError("huber: delta must be positive");
  ArrayX e = pred.values() - target.values();
  ArrayX vals(e.size());
  ArrayX dp(e.size());
  for (Index i = 0; i < e.size(); ++i) {
    const Scalar ae = std::abs(e[i]);
    if (ae <= delta) {
      vals[i] = 0.5 * e[i] * e[i];
      dp[i] = e[i];
    } else {
      vals[i] = delta * (ae - 0.5 * delta);
      dp[i] = e[i] > 0 ? delta : -delta;
    }
  }
  Tensor out = Tensor::from(pred.shape(), std::move(vals));
  ArrayX da = pred.tracked() ? dp : ArrayX();
  ArrayX db = target.tracked() ? ArrayX(-dp) : ArrayX();
  return record_binary(pred, target, std::move(out), std::move(da),
                       std::move(db), 0.0, 0.0);
}

Tensor bce_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_logits: " + shape_string(logits.shape()) + " vs " +
                     shape_string(targets.shape()));
  }
  const ArrayX& z = logits.values();
  const ArrayX& y = targets.values();
  ArrayX vals(z.size());
  ArrayX dz = logits.tracked() ? ArrayX(z.size()) : ArrayX();
  for (Index i = 0; i < z.size(); ++i) {
    vals[i] = std::max(z[i], 0.0) - z[i] * y[i] +
              std::log1p(std::exp(-std::abs(z[i])));
    if (dz.size()) {
      const Scalar s = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                 : std::exp(z[i]) / (1.0 + std::exp(z[i]));
      dz[i] = s - y[i];
    }
  }
  Tensor out = Tensor::from(logits.shape(), std::move(vals));
  ArrayX dy = targets.tracked() ? ArrayX(-z) : ArrayX();
  return record_binary(logits, targets, std::move(out), std::move(dz),
                       std::move(dy), 0.0, 0.0);
}

Tensor l1(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1: " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  ArrayX e = pred.values() - target.values();
  Tensor out = Tensor::from(pred.shape(), e.abs());
  ArrayX sign = e.sign();
  ArrayX da = pred.tracked() ? sign : ArrayX();
  ArrayX db = target.tracked() ? ArrayX(-sign) : ArrayX();
  return record_binary(pred, target, std::move(out), std::move(da),
                       std::move(db), 0.0, 0.0);
}

// --- attention ----------------------------------------------------------

AttentionParams AttentionParams::init(Index dim, Index heads, Rng& rng,
                                      Scalar stddev) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionParams p;
  p.heads = heads;
  p.wq = Tensor::randn({dim, dim}, rng, stddev);
  p.wk = Tensor::randn({dim, dim}, rng, stddev);
  p.wv = Tensor::randn({dim, dim}, rng, stddev);
  p.wo = Tensor::randn({dim, dim}, rng, stddev);
  p.bq = Tensor::zeros({dim});
  p.bk = Tensor::zeros({dim});
  p.bv = Tensor::zeros({dim});
  p.bo = Tensor::zeros({dim});
  return p;
}

AttentionParams AttentionParams::identity(Index dim) {
  AttentionParams p;
  p.heads = 1;
  Tensor eye({dim, dim});
  eye.mat().setIdentity();
  p.wq = eye;
  p.wk = eye;
  p.wv = eye;
  p.wo = std::move(eye);
  p.bq = Tensor::zeros({dim});
  p.bk = Tensor::zeros({dim});
  p.bv = Tensor::zeros({dim});
  p.bo = Tensor::zeros({dim});
  return p;
}

Tensor cross_attention(const Tensor& queries, const Tensor& context,
                       const AttentionParams& p) {
  if (context.ndim() != 2 || context.dim(0) == 0) {
    throw ContractError("cross_attention: empty context");
  }
  const Index dim = p.wq.dim(0);
  if (queries.ndim() != 2 || queries.dim(1) != dim ||
      context.dim(1) != dim) {
    throw ShapeError("cross_attention: queries " +
                     shape_string(queries.shape()) + ", context " +
                     shape_string(context.shape()) + ", dim " +
                     std::to_string(dim));
  }
  if (p.heads < 1 || dim % p.heads != 0) {
    throw ConfigError("cross_attention: dim not divisible by head count");
  }
  if (queries.dim(0) == 0) return Tensor::zeros({0, p.wo.dim(1)});

  const Index dh = dim / p.heads;
  const Scalar scl = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  Tensor q = add(matmul(queries, p.wq), p.bq);
  Tensor k = add(matmul(context, p.wk), p.bk);
  Tensor v = add(matmul(context, p.wv), p.bv);
  std::vector<Tensor> heads_out;
  heads_out.reserve(static_cast<std::size_t>(p.heads));
  for (Index h = 0; h < p.heads; ++h) {
    Tensor qh = cols(q, h * dh, dh);
    Tensor kh = cols(k, h * dh, dh);
    Tensor vh = cols(v, h * dh, dh);
    Tensor attn = softmax_last(matmul(scale(qh, scl), transpose(kh)));
    heads_out.push_back(matmul(attn, vh));
  }
  Tensor merged = heads_out.front();
  for (std::size_t h = 1; h < heads_out.size(); ++h) {
    merged = concat_cols(merged, heads_out[h]);
  }
  return add(matmul(merged, p.wo), p.bo);
}

Tensor mhsa(const Tensor& x, const AttentionParams& p) {
  return cross_attention(x, x, p);
}

}  // namespace tempo
