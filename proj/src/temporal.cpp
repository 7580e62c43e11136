#include "tempo/temporal.hpp"

#include <fstream>

#include "tempo/binio.hpp"

namespace tempo {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::none: return "none";
    case Variant::rvm_rnn: return "rvm_rnn";
    case Variant::mamba: return "mamba";
    case Variant::mambamix: return "mambamix";
    case Variant::gmmix: return "gmmix";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  if (s == "none") return Variant::none;
  if (s == "rvm_rnn") return Variant::rvm_rnn;
  if (s == "mamba") return Variant::mamba;
  if (s == "mambamix") return Variant::mambamix;
  if (s == "gmmix") return Variant::gmmix;
  throw ConfigError("unknown temporal variant \"" + s + "\"");
}

TxLayer TxLayer::init(Index dim, Index heads, Index mlp_hidden, Rng& rng) {
  TxLayer l;
  l.ln_cross = LayerNormParams::init(dim);
  l.ln_mlp = LayerNormParams::init(dim);
  l.ln_self = LayerNormParams::init(dim);
  l.cross = AttentionParams::init(dim, heads, rng);
  l.mlp = MlpParams::init(dim, mlp_hidden, dim, rng);
  l.self_attn = AttentionParams::init(dim, heads, rng);
  return l;
}

Tensor TxLayer::forward(const Tensor& x, const Tensor& ctx) const {
  Tensor y = add(x, cross_attention(apply_ln(x, ln_cross), ctx, cross));
  y = add(y, apply_mlp(apply_ln(y, ln_mlp), mlp));
  return add(y, mhsa(apply_ln(y, ln_self), self_attn));
}

void TxLayer::collect(ParamStore& ps, const std::string& prefix) {
  ln_cross.collect(ps, prefix + ".ln_cross");
  collect_attention(ps, prefix + ".cross", cross);
  ln_mlp.collect(ps, prefix + ".ln_mlp");
  mlp.collect(ps, prefix + ".mlp");
  ln_self.collect(ps, prefix + ".ln_self");
  collect_attention(ps, prefix + ".self", self_attn);
}

void RecurrentState::detach() {
  s.detach();
  for (SSMState& l : layers) l.detach();
}

TemporalModule TemporalModule::init(const Config& cfg, Rng& rng) {
  if (cfg.layers < 1) throw ConfigError("temporal: layers must be >= 1");
  TemporalModule m;
  m.cfg = cfg;
  const Index d = cfg.dim;
  switch (cfg.variant) {
    case Variant::none:
      break;
    case Variant::rvm_rnn: {
      m.rvm.wu_f = Tensor::randn({d, d}, rng, 0.02);
      m.rvm.wu_s = Tensor::randn({d, d}, rng, 0.02);
      m.rvm.bu = Tensor::zeros({d});
      m.rvm.wr_f = Tensor::randn({d, d}, rng, 0.02);
      m.rvm.wr_s = Tensor::randn({d, d}, rng, 0.02);
      m.rvm.br = Tensor::zeros({d});
      m.rvm.state_ln = LayerNormParams::init(d);
      for (Index k = 0; k < cfg.layers; ++k) {
        m.rvm.tx.push_back(TxLayer::init(d, cfg.heads, cfg.mlp_hidden(), rng));
      }
      m.rvm.out_ln = LayerNormParams::init(d);
      break;
    }
    case Variant::mamba: {
      for (Index k = 0; k < cfg.layers; ++k) {
        m.mamba_layers.push_back(
            {LayerNormParams::init(d), SelectiveSSM::init(d, cfg.state, rng)});
      }
      m.out_ln = LayerNormParams::init(d);
      break;
    }
    case Variant::mambamix: {
      for (Index k = 0; k < cfg.layers; ++k) {
        m.mambamix_layers.push_back(
            {TransformerBlock::init(d, cfg.heads, cfg.mlp_hidden(), rng),
             LayerNormParams::init(d), SelectiveSSM::init(d, cfg.state, rng)});
      }
      m.out_ln = LayerNormParams::init(d);
      break;
    }
    case Variant::gmmix: {
      for (Index k = 0; k < cfg.layers; ++k) {
        GmmixLayer l;
        l.spatial = TransformerBlock::init(d, cfg.heads, cfg.mlp_hidden(), rng);
        l.ln = LayerNormParams::init(d);
        l.ssm = SelectiveSSM::init(d, cfg.state, rng);
        l.gate_w = Tensor::randn({2 * d, d}, rng, 0.02);
        l.gate_b = Tensor::full({d}, cfg.gate_bias_init);
        m.gmmix_layers.push_back(std::move(l));
      }
      m.out_ln = LayerNormParams::init(d);
      break;
    }
  }
  return m;
}

RecurrentState TemporalModule::initial_state(Index tokens) const {
  RecurrentState st;
  st.variant = cfg.variant;
  switch (cfg.variant) {
    case Variant::none:
      break;
    case Variant::rvm_rnn:
      st.s = Tensor::zeros({tokens, cfg.dim});
      break;
    case Variant::mamba:
    case Variant::mambamix:
    case Variant::gmmix:
      for (Index k = 0; k < cfg.layers; ++k) {
        st.layers.push_back(SSMState::zeros(tokens, cfg.dim, cfg.state));
      }
      break;
  }
  return st;
}

std::pair<Tensor, RecurrentState> TemporalModule::step(
    const Tensor& x, const RecurrentState& state) const {
  if (state.variant != cfg.variant) {
    throw ContractError("temporal step: state built for variant " +
                        to_string(state.variant) + ", module is " +
                        to_string(cfg.variant));
  }
  if (x.ndim() != 2 || x.dim(1) != cfg.dim) {
    throw ShapeError("temporal step: input " + shape_string(x.shape()) +
                     " vs width " + std::to_string(cfg.dim));
  }
  RecurrentState next;
  next.variant = cfg.variant;
  next.steps = state.steps + 1;
  switch (cfg.variant) {
    case Variant::none:
      return {x, std::move(next)};
    case Variant::rvm_rnn: {
      const Tensor& s = state.s;
      if (s.shape() != x.shape()) {
        throw ShapeError("rvm_rnn: state " + shape_string(s.shape()) +
                         " vs input " + shape_string(x.shape()));
      }
      Tensor u = sigmoid(add(add(matmul(x, rvm.wu_f), matmul(s, rvm.wu_s)),
                             rvm.bu));
      Tensor r = sigmoid(add(add(matmul(x, rvm.wr_f), matmul(s, rvm.wr_s)),
                             rvm.br));
      Tensor ctx = mul(r, apply_ln(s, rvm.state_ln));
      Tensor cand = x;
      for (const TxLayer& l : rvm.tx) cand = l.forward(cand, ctx);
      // s' = (1 - u) ⊙ s + u ⊙ h̃, kept in this literal form so the gate
      // limits u = 0 and u = 1 reproduce s and h̃ exactly.
      next.s = add(mul(add_scalar(neg(u), 1.0), s), mul(u, cand));
      Tensor h = apply_ln(next.s, rvm.out_ln);
      return {std::move(h), std::move(next)};
    }
    case Variant::mamba: {
      Tensor cur = x;
      for (std::size_t k = 0; k < mamba_layers.size(); ++k) {
        const MambaLayer& l = mamba_layers[k];
        auto [y, st] = ssm_step(l.ssm, apply_ln(cur, l.ln), state.layers[k]);
        next.layers.push_back(std::move(st));
        cur = add(cur, y);
      }
      return {apply_ln(cur, out_ln), std::move(next)};
    }
    case Variant::mambamix: {
      Tensor cur = x;
      for (std::size_t k = 0; k < mambamix_layers.size(); ++k) {
        const MambaMixLayer& l = mambamix_layers[k];
        Tensor z = l.spatial.forward(cur);
        auto [y, st] = ssm_step(l.ssm, apply_ln(z, l.ln), state.layers[k]);
        next.layers.push_back(std::move(st));
        cur = add(z, y);
      }
      return {apply_ln(cur, out_ln), std::move(next)};
    }
    case Variant::gmmix: {
      Tensor cur = x;
      for (std::size_t k = 0; k < gmmix_layers.size(); ++k) {
        const GmmixLayer& l = gmmix_layers[k];
        Tensor z = l.spatial.forward(cur);
        auto [y, st] = ssm_step(l.ssm, apply_ln(z, l.ln), state.layers[k]);
        next.layers.push_back(std::move(st));
        Tensor zt = add(z, y);
        Tensor g = sigmoid(add(matmul(concat_cols(z, zt), l.gate_w), l.gate_b));
        cur = add(mul(add_scalar(neg(g), 1.0), z), mul(g, zt));
      }
      return {apply_ln(cur, out_ln), std::move(next)};
    }
  }
  throw ContractError("temporal step: unreachable variant");
}

void TemporalModule::collect(ParamStore& ps, const std::string& prefix) {
  switch (cfg.variant) {
    case Variant::none:
      return;
    case Variant::rvm_rnn: {
      ps.add(prefix + ".wu_f", rvm.wu_f);
      ps.add(prefix + ".wu_s", rvm.wu_s);
      ps.add(prefix + ".bu", rvm.bu);
      ps.add(prefix + ".wr_f", rvm.wr_f);
      ps.add(prefix + ".wr_s", rvm.wr_s);
      ps.add(prefix + ".br", rvm.br);
      rvm.state_ln.collect(ps, prefix + ".state_ln");
      for (std::size_t k = 0; k < rvm.tx.size(); ++k) {
        rvm.tx[k].collect(ps, prefix + ".tx" + std::to_string(k));
      }
      rvm.out_ln.collect(ps, prefix + ".out_ln");
      return;
    }
    case Variant::mamba: {
      for (std::size_t k = 0; k < mamba_layers.size(); ++k) {
        const std::string p = prefix + ".layer" + std::to_string(k);
        mamba_layers[k].ln.collect(ps, p + ".ln");
        mamba_layers[k].ssm.collect(ps, p + ".ssm");
      }
      out_ln.collect(ps, prefix + ".out_ln");
      return;
    }
    case Variant::mambamix: {
      for (std::size_t k = 0; k < mambamix_layers.size(); ++k) {
        const std::string p = prefix + ".layer" + std::to_string(k);
        mambamix_layers[k].spatial.collect(ps, p + ".spatial");
        mambamix_layers[k].ln.collect(ps, p + ".ln");
        mambamix_layers[k].ssm.collect(ps, p + ".ssm");
      }
      out_ln.collect(ps, prefix + ".out_ln");
      return;
    }
    case Variant::gmmix: {
      for (std::size_t k = 0; k < gmmix_layers.size(); ++k) {
        const std::string p = prefix + ".layer" + std::to_string(k);
        gmmix_layers[k].spatial.collect(ps, p + ".spatial");
        gmmix_layers[k].ln.collect(ps, p + ".ln");
        gmmix_layers[k].ssm.collect(ps, p + ".ssm");
        ps.add(p + ".gate_w", gmmix_layers[k].gate_w);
        ps.add(p + ".gate_b", gmmix_layers[k].gate_b);
      }
      out_ln.collect(ps, prefix + ".out_ln");
      return;
    }
  }
}

std::pair<std::vector<Tensor>, RecurrentState> temporal_forward(
    const TemporalModule& module, const std::vector<Tensor>& frames,
    const RecurrentState& init) {
  if (frames.empty()) throw ContractError("temporal_forward: empty sequence");
  std::vector<Tensor> outputs;
  outputs.reserve(frames.size());
  RecurrentState state = init;
  for (const Tensor& x : frames) {
    auto [h, next] = module.step(x, state);
    outputs.push_back(std::move(h));
    state = std::move(next);
  }
  return {std::move(outputs), std::move(state)};
}

std::pair<std::vector<Tensor>, RecurrentState> temporal_forward(
    const TemporalModule& module, const std::vector<Tensor>& frames) {
  const Index tokens = frames.empty() ? 0 : frames.front().dim(0);
  return temporal_forward(module, frames, module.initial_state(tokens));
}

// --- state snapshot ---------------------------------------------------------

namespace {
constexpr char kStateMagic[4] = {'V', 'F', 'M', 'S'};

void write_tensor_f64(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (Index i = 0; i < t.ndim(); ++i) {
    write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (Index i = 0; i < t.size(); ++i) write_f64(os, t.at(i));
}

Tensor read_tensor_f64(BinReader& r) {
  const std::uint32_t nd = r.read_u32("tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < nd; ++i) {
    shape.push_back(static_cast<Index>(r.read_u32("tensor dim")));
  }
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t.at(i) = r.read_f64("tensor data");
  return t;
}
}  // namespace

void save_state(const RecurrentState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os.write(kStateMagic, 4);
  write_u32(os, 1);
  write_u32(os, static_cast<std::uint32_t>(state.variant));
  write_u64(os, static_cast<std::uint64_t>(state.steps));
  if (state.variant == Variant::rvm_rnn) {
    write_tensor_f64(os, state.s);
  } else {
    write_u32(os, static_cast<std::uint32_t>(state.layers.size()));
    for (const SSMState& l : state.layers) {
      write_u32(os, static_cast<std::uint32_t>(l.tokens));
      write_u64(os, static_cast<std::uint64_t>(l.steps));
      write_tensor_f64(os, l.h);
    }
  }
}

RecurrentState load_state(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader r(is);
  r.expect_magic(kStateMagic);
  const std::uint32_t version = r.read_u32("version");
  if (version != 1) {
    throw FormatError("unsupported state version " + std::to_string(version));
  }
  RecurrentState st;
  st.variant = static_cast<Variant>(r.read_u32("variant"));
  st.steps = static_cast<long>(r.read_u64("steps"));
  if (st.variant == Variant::rvm_rnn) {
    st.s = read_tensor_f64(r);
  } else {
    const std::uint32_t k = r.read_u32("layer count");
    for (std::uint32_t i = 0; i < k; ++i) {
      SSMState l;
      l.tokens = static_cast<Index>(r.read_u32("tokens"));
      l.steps = static_cast<long>(r.read_u64("layer steps"));
      l.h = read_tensor_f64(r);
      st.layers.push_back(std::move(l));
    }
  }
  return st;
}

}  // namespace tempo
