#include "tempo/ssm.hpp"

#include <cmath>

namespace tempo {

SelectiveSSM SelectiveSSM::init(Index channels, Index state, Rng& rng) {
  if (channels < 1 || state < 1) {
    throw ConfigError("SelectiveSSM: channels and state must be positive");
  }
  SelectiveSSM s;
  s.channels = channels;
  s.state = state;
  // A = -exp(a_log) initialized to -1..-n per channel.
  s.a_log = Tensor({channels, state});
  for (Index i = 0; i < channels; ++i) {
    for (Index j = 0; j < state; ++j) {
      s.a_log.values()[i * state + j] = std::log(static_cast<Scalar>(j + 1));
    }
  }
  s.w_delta = Tensor::randn({channels, channels}, rng, 0.02);
  // softplus(b_delta) uniform in [1e-3, 1e-1] keeps every channel live.
  s.b_delta = Tensor({channels});
  for (Index i = 0; i < channels; ++i) {
    const Scalar target = rng.uniform(1e-3, 1e-1);
    s.b_delta.values()[i] = std::log(std::expm1(target));
  }
  s.w_b = Tensor::randn({channels, state}, rng, 0.02);
  s.w_c = Tensor::randn({channels, state}, rng, 0.02);
  s.skip = Tensor::full({channels}, 1.0);
  return s;
}

void SelectiveSSM::collect(ParamStore& ps, const std::string& prefix) {
  ps.add(prefix + ".a_log", a_log);
  ps.add(prefix + ".w_delta", w_delta);
  ps.add(prefix + ".b_delta", b_delta);
  ps.add(prefix + ".w_b", w_b);
  ps.add(prefix + ".w_c", w_c);
  ps.add(prefix + ".skip", skip);
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a,
                                     const Tensor& b_t) {
  if (a.ndim() != 2 || delta.size() != a.dim(0) || b_t.size() != a.dim(1)) {
    throw ShapeError("discretize: delta " + shape_string(delta.shape()) +
                     ", A " + shape_string(a.shape()) + ", B " +
                     shape_string(b_t.shape()));
  }
  for (Index i = 0; i < delta.size(); ++i) {
    if (!(delta.at(i) > 0)) {
      throw ContractError("discretize: delta must be positive, got " +
                          std::to_string(delta.at(i)));
    }
  }
  Tensor da = scale_rows(a, delta);
  Tensor a_bar = exp(da);
  // (A_bar - 1)/A = delta * expm1(dA)/(dA); the fused kernel stays accurate
  // as dA -> 0.
  Tensor b_bar = mul(scale_rows(expm1_over_x(da), delta), b_t);
  return {std::move(a_bar), std::move(b_bar)};
}

namespace {

struct StepInputs {
  Tensor delta_flat;  // (M*d)
  Tensor a_rows;      // (M*d) x n
  Tensor b_rows;      // (M*d) x n
  Tensor c_rows;      // (M*d) x n
  Tensor x2d;         // M x d
};

StepInputs selectivity(const SelectiveSSM& ssm, const Tensor& x) {
  Tensor x2d = x.ndim() == 1 ? reshape(x, {1, x.size()}) : x;
  if (x2d.ndim() != 2 || x2d.dim(1) != ssm.channels) {
    throw ShapeError("ssm: input " + shape_string(x.shape()) +
                     " vs channels " + std::to_string(ssm.channels));
  }
  const Index m = x2d.dim(0), d = ssm.channels;
  StepInputs s;
  s.delta_flat =
      reshape(softplus(add(matmul(x2d, ssm.w_delta), ssm.b_delta)), {m * d});
  s.a_rows = tile_rows(neg(exp(ssm.a_log)), m);
  s.b_rows = repeat_rows(matmul(x2d, ssm.w_b), d);
  s.c_rows = repeat_rows(matmul(x2d, ssm.w_c), d);
  s.x2d = std::move(x2d);
  return s;
}

struct Discretized {
  Tensor a_bar, b_bar;  // (M*d) x n
};

Discretized discretize_rows(const StepInputs& s) {
  Tensor da = scale_rows(s.a_rows, s.delta_flat);
  Discretized out;
  out.a_bar = exp(da);
  out.b_bar = mul(scale_rows(expm1_over_x(da), s.delta_flat), s.b_rows);
  return out;
}

Tensor readout_y(const StepInputs& s, const Tensor& h, const SelectiveSSM& ssm) {
  const Index m = s.x2d.dim(0), d = ssm.channels;
  Tensor y = reshape(row_sums(mul(s.c_rows, h)), {m, d});
  return add(y, mul(s.x2d, ssm.skip));
}

}  // namespace

std::pair<Tensor, SSMState> ssm_step(const SelectiveSSM& ssm, const Tensor& x,
                                     const SSMState& state) {
  StepInputs s = selectivity(ssm, x);
  const Index m = s.x2d.dim(0), d = ssm.channels;
  if (state.tokens != m || state.h.dim(0) != m * d ||
      state.h.dim(1) != ssm.state) {
    throw ShapeError("ssm_step: state " + shape_string(state.h.shape()) +
                     " vs " + std::to_string(m) + " tokens x " +
                     std::to_string(d) + " channels");
  }
  Discretized dz = discretize_rows(s);
  Tensor x_flat = reshape(s.x2d, {m * d});
  Tensor h_next = add(mul(dz.a_bar, state.h), scale_rows(dz.b_bar, x_flat));
  Tensor y = readout_y(s, h_next, ssm);
  if (x.ndim() == 1) y = reshape(y, {d});
  return {std::move(y), SSMState{std::move(h_next), m, state.steps + 1}};
}

std::pair<Tensor, SSMState> selective_scan_sequential(const SelectiveSSM& ssm,
                                                      const Tensor& xs,
                                                      const SSMState& init) {
  if (xs.ndim() != 2 || xs.dim(0) < 1) {
    throw ContractError("selective_scan_sequential: needs {T, d} with T >= 1");
  }
  const Index t_len = xs.dim(0);
  SSMState state = init;
  std::vector<Tensor> ys;
  ys.reserve(static_cast<std::size_t>(t_len));
  for (Index t = 0; t < t_len; ++t) {
    auto [y, next] = ssm_step(ssm, rows(xs, t, 1), state);
    ys.push_back(std::move(y));
    state = std::move(next);
  }
  return {concat_rows(ys), std::move(state)};
}

std::pair<Tensor, SSMState> selective_scan_chunked(const SelectiveSSM& ssm,
                                                   const Tensor& xs,
                                                   Index chunk,
                                                   const SSMState& init) {
  if (chunk < 1) throw ContractError("selective_scan_chunked: chunk >= 1");
  if (xs.ndim() != 2 || xs.dim(0) < 1) {
    throw ContractError("selective_scan_chunked: needs {T, d} with T >= 1");
  }
  const Index t_len = xs.dim(0), d = ssm.channels;
  Tensor carry = init.h;  // d x n (single token)
  long steps = init.steps;
  std::vector<Tensor> ys;
  ys.reserve(static_cast<std::size_t>(t_len));
  for (Index t0 = 0; t0 < t_len; t0 += chunk) {
    const Index len = std::min(chunk, t_len - t0);
    // Local scan from zero state, collecting per-step A_bar for the prefix
    // products that splice the carried state back in.
    std::vector<Tensor> local_h(static_cast<std::size_t>(len));
    std::vector<Tensor> prefix(static_cast<std::size_t>(len));
    std::vector<StepInputs> inputs;
    inputs.reserve(static_cast<std::size_t>(len));
    Tensor local = Tensor::zeros({d, ssm.state});
    for (Index i = 0; i < len; ++i) {
      inputs.push_back(selectivity(ssm, rows(xs, t0 + i, 1)));
      const StepInputs& s = inputs.back();
      Discretized dz = discretize_rows(s);
      Tensor x_flat = reshape(s.x2d, {d});
      local = add(mul(dz.a_bar, local), scale_rows(dz.b_bar, x_flat));
      local_h[static_cast<std::size_t>(i)] = local;
      prefix[static_cast<std::size_t>(i)] =
          i == 0 ? dz.a_bar
                 : mul(prefix[static_cast<std::size_t>(i - 1)], dz.a_bar);
    }
    for (Index i = 0; i < len; ++i) {
      Tensor h_t = add(mul(prefix[static_cast<std::size_t>(i)], carry),
                       local_h[static_cast<std::size_t>(i)]);
      Tensor y = readout_y(inputs[static_cast<std::size_t>(i)], h_t, ssm);
      ys.push_back(reshape(y, {1, d}));
      if (i == len - 1) carry = std::move(h_t);
    }
    steps += len;
  }
  return {concat_rows(ys), SSMState{std::move(carry), 1, steps}};
}

}  // namespace tempo
