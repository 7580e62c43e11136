#pragma once

#include <string>
#include <vector>

#include "tempo/nn.hpp"
#include "tempo/ssm.hpp"

namespace tempo {

enum class Variant { none, rvm_rnn, mamba, mambamix, gmmix };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

/// One layer of the gated recurrent core's fusion transformer: cross-attend
/// the running tokens over the gated state, then MLP, then self-attention,
/// pre-norm residuals around each sub-block.
struct TxLayer {
  LayerNormParams ln_cross, ln_mlp, ln_self;
  AttentionParams cross;
  MlpParams mlp;
  AttentionParams self_attn;

  static TxLayer init(Index dim, Index heads, Index mlp_hidden, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& ctx) const;
  void collect(ParamStore& ps, const std::string& prefix);
};

struct RvmRnnParams {
  Tensor wu_f, wu_s, bu;  // update gate
  Tensor wr_f, wr_s, br;  // reset gate
  LayerNormParams state_ln;
  std::vector<TxLayer> tx;  // K unshared layers
  LayerNormParams out_ln;
};

struct MambaLayer {
  LayerNormParams ln;
  SelectiveSSM ssm;
};

struct MambaMixLayer {
  TransformerBlock spatial;  // self-attention + MLP within the frame
  LayerNormParams ln;
  SelectiveSSM ssm;
};

struct GmmixLayer {
  TransformerBlock spatial;
  LayerNormParams ln;
  SelectiveSSM ssm;
  Tensor gate_w;  // 2D x D
  Tensor gate_b;  // D
};

/// The opaque per-module state carried across frames; zero at sequence
/// start, constant shape for a fixed configuration.
struct RecurrentState {
  Variant variant = Variant::none;
  Tensor s;                      // rvm_rnn: M x D token state
  std::vector<SSMState> layers;  // mamba family: one per layer
  long steps = 0;

  void detach();
};

/// The four interchangeable temporal modules behind one step interface: all
/// variants map {M x D, state} -> {M x D, state}.
struct TemporalModule {
  struct Config {
    Variant variant = Variant::gmmix;
    Index dim = 64;
    Index layers = 2;       // K
    Index state = 16;       // SSM n
    Index heads = 4;
    Scalar gate_bias_init = 0.0;
    Index mlp_hidden() const { return dim * 4; }
  };

  Config cfg;
  RvmRnnParams rvm;
  std::vector<MambaLayer> mamba_layers;
  std::vector<MambaMixLayer> mambamix_layers;
  std::vector<GmmixLayer> gmmix_layers;
  LayerNormParams out_ln;  // mamba-family output normalization

  static TemporalModule init(const Config& cfg, Rng& rng);

  RecurrentState initial_state(Index tokens) const;
  std::pair<Tensor, RecurrentState> step(const Tensor& x,
                                         const RecurrentState& state) const;
  void collect(ParamStore& ps, const std::string& prefix);
};

/// Whole-sequence application: the exact fold of step() over the frames, so
/// frame-by-frame streaming with carried state reproduces it bit-for-bit.
std::pair<std::vector<Tensor>, RecurrentState> temporal_forward(
    const TemporalModule& module, const std::vector<Tensor>& frames,
    const RecurrentState& init);

std::pair<std::vector<Tensor>, RecurrentState> temporal_forward(
    const TemporalModule& module, const std::vector<Tensor>& frames);

// State snapshot, binary little-endian, magic "VFMS" version 1. The round
// trip is bit-exact.
void save_state(const RecurrentState& state, const std::string& path);
RecurrentState load_state(const std::string& path);

}  // namespace tempo
