#pragma once

#include <string>
#include <vector>

#include "tempo/tensor.hpp"

namespace tempo {

/// Named registry of module parameters. Non-trainable entries are buffers
/// (running statistics and the like): saved with checkpoints but never
/// touched by the optimizer.
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor* tensor;
    bool trainable;
  };
  std::vector<Entry> entries;

  void add(const std::string& name, Tensor& t, bool trainable = true) {
    entries.push_back({name, &t, trainable});
  }

  std::vector<Tensor*> trainable() const {
    std::vector<Tensor*> out;
    for (const Entry& e : entries) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }
};

struct LayerNormParams {
  Tensor gamma, beta;
  static LayerNormParams init(Index dim) {
    return {Tensor::full({dim}, 1.0), Tensor::zeros({dim})};
  }
  void collect(ParamStore& ps, const std::string& prefix) {
    ps.add(prefix + ".gamma", gamma);
    ps.add(prefix + ".beta", beta);
  }
};

inline constexpr Scalar kLayerNormEps = 1e-6;

inline Tensor apply_ln(const Tensor& x, const LayerNormParams& p,
                       Scalar eps = kLayerNormEps) {
  return layer_norm(x, p.gamma, p.beta, eps);
}

/// Two-layer MLP: linear -> GELU -> linear. `zero_out` zero-initializes the
/// second layer so the block starts as the identity inside residuals.
struct MlpParams {
  Tensor w1, b1, w2, b2;
  static MlpParams init(Index in, Index hidden, Index out, Rng& rng,
                        Scalar stddev = 0.02, bool zero_out = false) {
    MlpParams p;
    p.w1 = Tensor::randn({in, hidden}, rng, stddev);
    p.b1 = Tensor::zeros({hidden});
    p.w2 = zero_out ? Tensor::zeros({hidden, out})
                    : Tensor::randn({hidden, out}, rng, stddev);
    p.b2 = Tensor::zeros({out});
    return p;
  }
  void collect(ParamStore& ps, const std::string& prefix) {
    ps.add(prefix + ".w1", w1);
    ps.add(prefix + ".b1", b1);
    ps.add(prefix + ".w2", w2);
    ps.add(prefix + ".b2", b2);
  }
};

inline Tensor apply_mlp(const Tensor& x, const MlpParams& p) {
  return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

inline void collect_attention(ParamStore& ps, const std::string& prefix,
                              AttentionParams& p) {
  ps.add(prefix + ".wq", p.wq);
  ps.add(prefix + ".bq", p.bq);
  ps.add(prefix + ".wk", p.wk);
  ps.add(prefix + ".bk", p.bk);
  ps.add(prefix + ".wv", p.wv);
  ps.add(prefix + ".bv", p.bv);
  ps.add(prefix + ".wo", p.wo);
  ps.add(prefix + ".bo", p.bo);
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.)).
struct TransformerBlock {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  MlpParams mlp;

  static TransformerBlock init(Index dim, Index heads, Index mlp_hidden,
                               Rng& rng, Scalar stddev = 0.02) {
    TransformerBlock b;
    b.ln1 = LayerNormParams::init(dim);
    b.ln2 = LayerNormParams::init(dim);
    b.attn = AttentionParams::init(dim, heads, rng, stddev);
    b.mlp = MlpParams::init(dim, mlp_hidden, dim, rng, stddev);
    return b;
  }

  Tensor forward(const Tensor& x) const {
    Tensor z = add(x, mhsa(apply_ln(x, ln1), attn));
    return add(z, apply_mlp(apply_ln(z, ln2), mlp));
  }

  void collect(ParamStore& ps, const std::string& prefix) {
    ln1.collect(ps, prefix + ".ln1");
    collect_attention(ps, prefix + ".attn", attn);
    ln2.collect(ps, prefix + ".ln2");
    mlp.collect(ps, prefix + ".mlp");
  }
};

}  // namespace tempo
