// SPDX-License-Identifier: Apache-2.0
#include "switchsim/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "switchsim/bf16.hpp"
#include "switchsim/numerics.hpp"
#include "switchsim/ops.hpp"

namespace switchsim {

template <typename T>
std::int64_t SwitchLayerParams<T>::d_out() const {
  const auto& e = experts.at(0);
  return form == ExpertForm::ffn ? e.w_out.dim(1) : e.w_in.dim(1);
}

template <typename T>
void SwitchLayerParams<T>::validate() const {
  require_rank(router, 2, "switch layer router");
  if (experts.empty()) throw InvalidArgument("switch layer: no experts");
  if (router.dim(1) != num_experts())
    throw InvalidArgument("switch layer: router " + shape_str(router.shape()) + " does not match " +
                          std::to_string(num_experts()) + " experts");
  const Shape in_shape = experts[0].w_in.shape();
  const Shape out_shape = experts[0].w_out.shape();
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& ex = experts[e];
    if (ex.w_in.shape() != in_shape || ex.w_out.shape() != out_shape)
      throw InvalidArgument("switch layer: expert " + std::to_string(e) + " shapes " + shape_str(ex.w_in.shape()) +
                            "/" + shape_str(ex.w_out.shape()) + " differ from expert 0");
  }
  require_rank(experts[0].w_in, 2, "expert w_in");
  if (experts[0].w_in.dim(0) != d_model())
    throw InvalidArgument("switch layer: expert w_in " + shape_str(in_shape) + " vs router " + shape_str(router.shape()));
  if (form == ExpertForm::ffn) {
    require_rank(experts[0].w_out, 2, "expert w_out");
    if (experts[0].w_out.dim(0) != experts[0].w_in.dim(1))
      throw InvalidArgument("switch layer: expert w_in " + shape_str(in_shape) + " vs w_out " + shape_str(out_shape));
  } else if (!experts[0].w_out.empty()) {
    throw InvalidArgument("switch layer: linear experts carry no w_out");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0) || !(expert_dropout_rate >= 0.0 && expert_dropout_rate < 1.0))
    throw InvalidArgument("switch layer: dropout rates must be in [0,1)");
}

SwitchLayerParams<float> init_switch_params(std::int64_t d_model, std::int64_t d_ff, int num_experts, double scale,
                                            RngStream& rng, ExpertForm form) {
  if (num_experts < 1) throw InvalidArgument("init_switch_params: num_experts must be >= 1");
  SwitchLayerParams<float> p;
  p.form = form;
  RngStream r = rng.derive("router");
  p.router = trunc_normal_init({d_model, num_experts}, scale, d_model, r);
  for (int e = 0; e < num_experts; ++e) {
    const RngStream base = rng.derive("expert").derive(static_cast<std::uint64_t>(e));
    RngStream ri = base.derive("w_in");
    RngStream ro = base.derive("w_out");
    ExpertWeights<float> w;
    if (form == ExpertForm::ffn) {
      w.w_in = trunc_normal_init({d_model, d_ff}, scale, d_model, ri);
      w.w_out = trunc_normal_init({d_ff, d_model}, scale, d_ff, ro);
    } else {
      w.w_in = trunc_normal_init({d_model, d_model}, scale, d_model, ri);
    }
    p.experts.push_back(std::move(w));
  }
  return p;
}

AttentionWeights<float> init_attention_weights(std::int64_t d_model, double scale, RngStream& rng) {
  AttentionWeights<float> w;
  RngStream rq = rng.derive("w_q"), rk = rng.derive("w_k"), rv = rng.derive("w_v"), ro = rng.derive("w_o");
  w.w_q = trunc_normal_init({d_model, d_model}, scale, d_model, rq);
  w.w_k = trunc_normal_init({d_model, d_model}, scale, d_model, rk);
  w.w_v = trunc_normal_init({d_model, d_model}, scale, d_model, rv);
  w.w_o = trunc_normal_init({d_model, d_model}, scale, d_model, ro);
  return w;
}

// ---- dense FFN -----------------------------------------------------------------

template <typename T>
TensorT<T> expert_dropout_mask(const TensorT<T>& intermediate, double rate, const RngStream& rng,
                               const std::vector<std::int64_t>* row_ids) {
  require_rank(intermediate, 2, "expert_dropout_mask");
  if (rate == 0.0) {
    if (!(rate >= 0.0)) throw InvalidArgument("dropout rate must be in [0,1)");
    return intermediate;
  }
  return ops::mul(intermediate, dropout_scale<T>(intermediate.dim(0), intermediate.dim(1), rate, rng, row_ids));
}

template <typename T>
TensorT<T> dense_ffn_forward(const TensorT<T>& x, const TensorT<T>& w_in, const TensorT<T>& w_out, double dropout,
                             const RngStream& rng, Mode mode, DenseFfnCache<T>* cache,
                             const std::vector<std::int64_t>* row_ids, FlopCounter* flops) {
  require_rank(x, 2, "dense_ffn");
  if (w_in.rank() != 2 || w_out.rank() != 2 || x.dim(1) != w_in.dim(0) || w_in.dim(1) != w_out.dim(0))
    throw InvalidArgument("dense_ffn: shape mismatch x " + shape_str(x.shape()) + ", w_in " + shape_str(w_in.shape()) +
                          ", w_out " + shape_str(w_out.shape()));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dense_ffn: dropout must be in [0,1)");
  TensorT<T> pre = ops::matmul(x, w_in);
  TensorT<T> act = ops::relu(pre);
  TensorT<T> mask;
  if (mode == Mode::train && dropout > 0.0) {
    mask = dropout_scale<T>(act.dim(0), act.dim(1), dropout, rng.derive("ffn_dropout"), row_ids);
    act = ops::mul(act, mask);
  }
  TensorT<T> y = ops::matmul(act, w_out);
  if (flops) {
    flops->expert_macs += x.dim(0) * (w_in.dim(0) * w_in.dim(1) + w_out.dim(0) * w_out.dim(1));
    flops->expert_rows += x.dim(0);
  }
  if (cache) *cache = {x, std::move(pre), std::move(mask), std::move(act)};
  return y;
}

template <typename T>
DenseFfnGrads<T> dense_ffn_backward(const DenseFfnCache<T>& cache, const TensorT<T>& w_in, const TensorT<T>& w_out,
                                    const TensorT<T>& dy) {
  DenseFfnGrads<T> g;
  auto [d_act, dw_out] = ops::matmul_backward(cache.act, w_out, dy);
  g.dw_out = std::move(dw_out);
  if (!cache.mask.empty()) d_act = ops::mul(d_act, cache.mask);
  const TensorT<T> d_pre = ops::relu_backward(cache.pre, d_act);
  auto [dx, dw_in] = ops::matmul_backward(cache.x, w_in, d_pre);
  g.dx = std::move(dx);
  g.dw_in = std::move(dw_in);
  return g;
}

// ---- routed expert machinery ------------------------------------------------------

namespace {

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<std::int64_t>& rows) {
  const std::int64_t d = x.dim(1);
  TensorT<T> out({static_cast<std::int64_t>(rows.size()), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = x.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(static_cast<std::int64_t>(r)).begin());
  }
  return out;
}

template <typename T>
TensorT<T> expert_forward(const TensorT<T>& input, const ExpertWeights<T>& w, ExpertForm form, double dropout,
                          const RngStream& rng, Mode mode, const std::vector<std::int64_t>& row_ids,
                          DenseFfnCache<T>& cache, FlopCounter* flops) {
  if (form == ExpertForm::ffn) return dense_ffn_forward(input, w.w_in, w.w_out, dropout, rng, mode, &cache, &row_ids, flops);
  cache.x = input;
  if (flops) {
    flops->expert_macs += input.dim(0) * w.w_in.dim(0) * w.w_in.dim(1);
    flops->expert_rows += input.dim(0);
  }
  return ops::matmul(input, w.w_in);
}

template <typename T>
std::pair<TensorT<T>, ExpertWeights<T>> expert_backward(const DenseFfnCache<T>& cache, const ExpertWeights<T>& w,
                                                        ExpertForm form, const TensorT<T>& dy) {
  if (form == ExpertForm::ffn) {
    auto g = dense_ffn_backward(cache, w.w_in, w.w_out, dy);
    return {std::move(g.dx), ExpertWeights<T>{std::move(g.dw_in), std::move(g.dw_out)}};
  }
  auto [dx, dw] = ops::matmul_backward(cache.x, w.w_in, dy);
  return {std::move(dx), ExpertWeights<T>{std::move(dw), TensorT<T>()}};
}

template <typename T>
T maybe_bf16(T v, bool on) {
  return on ? static_cast<T>(bf16::round(static_cast<float>(v))) : v;
}

/// Fill each expert buffer from (slot row, token, rank) triples and run the
/// experts. Rows are ordered by slot so the layout matches [groups, C].
template <typename T>
void run_experts(std::vector<ExpertBuffer<T>>& buffers,
                 std::vector<std::vector<std::tuple<std::int64_t, std::int64_t, int>>>& slots, const TensorT<T>& x,
                 const SwitchLayerParams<T>& params, bool selective, const RngStream& rng, Mode mode,
                 std::int64_t token_offset, FlopCounter* flops) {
  const RngStream drop_rng = rng.derive("expert_dropout");
  buffers.resize(slots.size());
  for (std::size_t e = 0; e < slots.size(); ++e) {
    auto& s = slots[e];
    std::sort(s.begin(), s.end());
    auto& b = buffers[e];
    std::vector<std::int64_t> row_ids;
    for (const auto& [row, t, rank] : s) {
      b.tokens.push_back(t);
      b.rank.push_back(rank);
      row_ids.push_back(token_offset + t);
    }
    b.input = gather_rows(x, b.tokens);
    if (selective) b.input = quantize_bf16(b.input);
    b.output = expert_forward(b.input, params.experts[e], params.form, params.expert_dropout_rate, drop_rng, mode,
                              row_ids, b.cache, flops);
    if (selective) b.output = quantize_bf16(b.output);
  }
}

template <typename T>
void check_layer_input(const TensorT<T>& x, const SwitchLayerParams<T>& params, const RouterConfig& config) {
  params.validate();
  require_rank(x, 2, "switch layer input");
  if (params.num_experts() != config.num_experts)
    throw InvalidArgument("switch layer: params have " + std::to_string(params.num_experts()) +
                          " experts but router config has " + std::to_string(config.num_experts));
  if (x.dim(1) != params.d_model())
    throw InvalidArgument("switch layer: input " + shape_str(x.shape()) + " vs router " +
                          shape_str(params.router.shape()));
}

template <typename T>
SwitchLayerGrads<T> zero_grads(const SwitchLayerParams<T>& params, const Shape& x_shape) {
  SwitchLayerGrads<T> g;
  g.dx = TensorT<T>(x_shape);
  g.d_router = TensorT<T>(params.router.shape());
  for (const auto& e : params.experts) g.d_experts.push_back({TensorT<T>(e.w_in.shape()), TensorT<T>(e.w_out.shape())});
  return g;
}

template <typename T>
void add_into(TensorT<T>& dst, const TensorT<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
SwitchForward<T> switch_ffn_forward(const TensorT<T>& x, const SwitchLayerParams<T>& params, const RouterConfig& config,
                                    const RngStream& rng, Mode mode, const SwitchOptions& options,
                                    const RouteResult<T>* fixed_routing) {
  check_layer_input(x, params, config);
  const std::int64_t tokens = x.dim(0);
  const std::int64_t d_out = params.d_out();
  const bool passthrough_ok = d_out == x.dim(1);

  SwitchForward<T> f;
  auto& c = f.cache;
  c.config = config;
  c.x = x;
  RouteOptions<T> ro;
  ro.token_offset = options.token_offset;
  ro.fixed = fixed_routing;
  c.route = route(x, params.router, config, rng.derive("router"), mode, ro);
  const auto& plan = c.route.plan;
  if (options.flops) options.flops->router_macs += tokens * x.dim(1) * config.num_experts;

  std::vector<std::vector<std::tuple<std::int64_t, std::int64_t, int>>> slots(static_cast<std::size_t>(config.num_experts));
  for (std::int64_t t = 0; t < tokens; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    if (plan.dropped[ti]) continue;
    const std::int64_t row = static_cast<std::int64_t>(plan.group_of(t)) * plan.expert_capacity + plan.position_in_expert[ti];
    slots[static_cast<std::size_t>(plan.expert_index[ti])].emplace_back(row, t, 0);
  }
  run_experts(c.buffers, slots, x, params, config.selective_precision, rng, mode, options.token_offset, options.flops);

  c.combine_gate.resize(static_cast<std::size_t>(tokens));
  for (std::int64_t t = 0; t < tokens; ++t)
    c.combine_gate[static_cast<std::size_t>(t)] = maybe_bf16(plan.gate[static_cast<std::size_t>(t)], config.selective_precision);

  auto& out = f.out;
  out.y = TensorT<T>({tokens, d_out});
  out.passthrough.assign(static_cast<std::size_t>(tokens), 0);
  for (const auto& b : c.buffers)
    for (std::size_t r = 0; r < b.tokens.size(); ++r) {
      const std::int64_t t = b.tokens[r];
      const T g = c.combine_gate[static_cast<std::size_t>(t)];
      auto yr = out.y.row(t);
      const auto orow = b.output.row(static_cast<std::int64_t>(r));
      for (std::int64_t j = 0; j < d_out; ++j) yr[static_cast<std::size_t>(j)] += g * orow[static_cast<std::size_t>(j)];
    }
  for (std::int64_t t = 0; t < tokens; ++t) {
    if (!plan.dropped[static_cast<std::size_t>(t)]) continue;
    if (!passthrough_ok)
      throw InvalidArgument("switch layer: dropped tokens need d_out == d_model, got " + std::to_string(d_out));
    const auto xr = x.row(t);
    std::copy(xr.begin(), xr.end(), out.y.row(t).begin());
    out.passthrough[static_cast<std::size_t>(t)] = 1;
  }
  out.aux_loss = c.route.stats.aux_loss;
  out.stats = c.route.stats;
  out.dropped_fraction = plan.dropped_fraction();
  return f;
}

template <typename T>
SwitchLayerGrads<T> switch_ffn_backward(const SwitchFfnCache<T>& c, const SwitchLayerParams<T>& params,
                                        const TensorT<T>& dy, T daux) {
  const auto& plan = c.route.plan;
  const std::int64_t tokens = c.x.dim(0);
  if (dy.rank() != 2 || dy.dim(0) != tokens || dy.dim(1) != params.d_out())
    throw InvalidArgument("switch_ffn_backward: upstream shape " + shape_str(dy.shape()));
  SwitchLayerGrads<T> g = zero_grads(params, c.x.shape());
  TensorT<T> d_probs(plan.router_probs.shape());

  for (std::size_t e = 0; e < c.buffers.size(); ++e) {
    const auto& b = c.buffers[e];
    const auto rows = static_cast<std::int64_t>(b.tokens.size());
    TensorT<T> d_out({rows, b.output.dim(1)});
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t t = b.tokens[static_cast<std::size_t>(r)];
      const T gate = c.combine_gate[static_cast<std::size_t>(t)];
      const auto dyr = dy.row(t);
      const auto orow = b.output.row(r);
      auto dor = d_out.row(r);
      T dgate = T(0);
      for (std::size_t j = 0; j < dyr.size(); ++j) {
        dor[j] = gate * dyr[j];
        dgate += dyr[j] * orow[j];
      }
      d_probs.at(t, static_cast<std::int64_t>(e)) += dgate;
    }
    auto [dx_rows, dw] = expert_backward(b.cache, params.experts[e], params.form, d_out);
    for (std::int64_t r = 0; r < rows; ++r) {
      auto dst = g.dx.row(b.tokens[static_cast<std::size_t>(r)]);
      const auto src = dx_rows.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    g.d_experts[e] = std::move(dw);
  }
  for (std::int64_t t = 0; t < tokens; ++t) {
    if (!plan.dropped[static_cast<std::size_t>(t)]) continue;
    auto dst = g.dx.row(t);
    const auto src = dy.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  if (daux != T(0)) {
    const auto lb = load_balance_loss(plan.router_probs, c.route.expert_mask, c.config.alpha, plan.num_groups);
    for (std::size_t i = 0; i < d_probs.size(); ++i) d_probs[i] += daux * lb.grad_probs[i];
  }
  auto rg = router_backward(c.route, params.router, d_probs);
  add_into(g.dx, rg.dx);
  g.d_router = std::move(rg.d_router);
  return g;
}

template <typename T>
TopkForward<T> moe_topk_forward(const TensorT<T>& x, const SwitchLayerParams<T>& params, int k,
                                const RouterConfig& config, const RngStream& rng, Mode mode, bool renormalize,
                                const SwitchOptions& options, const TopkRouteResult<T>* fixed_routing) {
  check_layer_input(x, params, config);
  if (k < 1 || k > config.num_experts)
    throw InvalidArgument("moe_topk_ffn: k=" + std::to_string(k) + " exceeds " + std::to_string(config.num_experts) +
                          " experts");
  const std::int64_t tokens = x.dim(0);
  const std::int64_t d_out = params.d_out();

  TopkForward<T> f;
  auto& c = f.cache;
  c.config = config;
  c.x = x;
  c.renormalize = renormalize;
  TopkRouteOptions<T> ro;
  ro.token_offset = options.token_offset;
  ro.fixed = fixed_routing;
  c.route = route_topk(x, params.router, config, k, rng.derive("router"), mode, ro);
  const auto& plan = c.route.plan;
  if (options.flops) options.flops->router_macs += tokens * x.dim(1) * config.num_experts;

  const auto nslots = static_cast<std::size_t>(tokens * k);
  c.raw_gate.assign(nslots, T(0));
  c.slot_gate.assign(nslots, T(0));
  std::vector<std::vector<std::tuple<std::int64_t, std::int64_t, int>>> slots(static_cast<std::size_t>(config.num_experts));
  const std::int64_t group_size = tokens / plan.num_groups;
  for (std::int64_t t = 0; t < tokens; ++t) {
    T norm = T(0);
    if (renormalize)
      for (int j = 0; j < k; ++j) norm += plan.router_probs.at(t, plan.expert[static_cast<std::size_t>(t * k + j)]);
    for (int j = 0; j < k; ++j) {
      const auto s = static_cast<std::size_t>(t * k + j);
      T p = plan.router_probs.at(t, plan.expert[s]);
      if (renormalize) p /= norm;
      c.raw_gate[s] = p;
      if (plan.dropped[s]) continue;
      c.slot_gate[s] = maybe_bf16(p, config.selective_precision);
      const std::int64_t row = (t / group_size) * plan.expert_capacity + plan.position[s];
      slots[static_cast<std::size_t>(plan.expert[s])].emplace_back(row, t, j);
    }
  }
  run_experts(c.buffers, slots, x, params, config.selective_precision, rng, mode, options.token_offset, options.flops);

  // (token, rank) -> (expert, buffer row)
  std::vector<std::pair<int, std::int64_t>> where(nslots, {-1, -1});
  for (std::size_t e = 0; e < c.buffers.size(); ++e)
    for (std::size_t r = 0; r < c.buffers[e].tokens.size(); ++r) {
      const std::int64_t t = c.buffers[e].tokens[r];
      where[static_cast<std::size_t>(t * k + c.buffers[e].rank[r])] = {static_cast<int>(e), static_cast<std::int64_t>(r)};
    }

  auto& out = f.out;
  out.y = TensorT<T>({tokens, d_out});
  out.passthrough.assign(static_cast<std::size_t>(tokens), 0);
  std::int64_t dropped_assignments = 0;
  for (std::int64_t t = 0; t < tokens; ++t) {
    bool any = false;
    auto yr = out.y.row(t);
    for (int j = 0; j < k; ++j) {
      const auto s = static_cast<std::size_t>(t * k + j);
      if (plan.dropped[s]) {
        ++dropped_assignments;
        continue;
      }
      any = true;
      const auto [e, r] = where[s];
      const auto orow = c.buffers[static_cast<std::size_t>(e)].output.row(r);
      for (std::int64_t i = 0; i < d_out; ++i) yr[static_cast<std::size_t>(i)] += c.slot_gate[s] * orow[static_cast<std::size_t>(i)];
    }
    if (!any) {
      if (d_out != x.dim(1)) throw InvalidArgument("moe_topk_ffn: dropped tokens need d_out == d_model");
      const auto xr = x.row(t);
      std::copy(xr.begin(), xr.end(), yr.begin());
      out.passthrough[static_cast<std::size_t>(t)] = 1;
    }
  }
  out.aux_loss = c.route.stats.aux_loss;
  out.stats = c.route.stats;
  out.dropped_fraction = static_cast<double>(dropped_assignments) / static_cast<double>(tokens * k);
  return f;
}

template <typename T>
SwitchLayerGrads<T> moe_topk_backward(const TopkFfnCache<T>& c, const SwitchLayerParams<T>& params,
                                      const TensorT<T>& dy, T daux) {
  const auto& plan = c.route.plan;
  const int k = plan.k;
  const std::int64_t tokens = c.x.dim(0);
  if (dy.rank() != 2 || dy.dim(0) != tokens || dy.dim(1) != params.d_out())
    throw InvalidArgument("moe_topk_backward: upstream shape " + shape_str(dy.shape()));
  SwitchLayerGrads<T> g = zero_grads(params, c.x.shape());
  std::vector<T> d_gate(static_cast<std::size_t>(tokens * k), T(0));

  for (std::size_t e = 0; e < c.buffers.size(); ++e) {
    const auto& b = c.buffers[e];
    const auto rows = static_cast<std::int64_t>(b.tokens.size());
    TensorT<T> d_out({rows, b.output.dim(1)});
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t t = b.tokens[static_cast<std::size_t>(r)];
      const auto s = static_cast<std::size_t>(t * k + b.rank[static_cast<std::size_t>(r)]);
      const T gate = c.slot_gate[s];
      const auto dyr = dy.row(t);
      const auto orow = b.output.row(r);
      auto dor = d_out.row(r);
      T dg = T(0);
      for (std::size_t j = 0; j < dyr.size(); ++j) {
        dor[j] = gate * dyr[j];
        dg += dyr[j] * orow[j];
      }
      d_gate[s] = dg;
    }
    auto [dx_rows, dw] = expert_backward(b.cache, params.experts[e], params.form, d_out);
    for (std::int64_t r = 0; r < rows; ++r) {
      auto dst = g.dx.row(b.tokens[static_cast<std::size_t>(r)]);
      const auto src = dx_rows.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
    g.d_experts[e] = std::move(dw);
  }

  TensorT<T> d_probs(plan.router_probs.shape());
  for (std::int64_t t = 0; t < tokens; ++t) {
    if (!c.renormalize) {
      for (int j = 0; j < k; ++j) {
        const auto s = static_cast<std::size_t>(t * k + j);
        d_probs.at(t, plan.expert[s]) += d_gate[s];
      }
      continue;
    }
    // gate_i = p_i / S over the selected set
    T sum = T(0), weighted = T(0);
    for (int j = 0; j < k; ++j) sum += plan.router_probs.at(t, plan.expert[static_cast<std::size_t>(t * k + j)]);
    for (int j = 0; j < k; ++j) {
      const auto s = static_cast<std::size_t>(t * k + j);
      weighted += d_gate[s] * plan.router_probs.at(t, plan.expert[s]);
    }
    for (int j = 0; j < k; ++j) {
      const auto s = static_cast<std::size_t>(t * k + j);
      d_probs.at(t, plan.expert[s]) += d_gate[s] / sum - weighted / (sum * sum);
    }
  }
  for (std::int64_t t = 0; t < tokens; ++t) {
    if (!std::all_of(plan.dropped.begin() + t * k, plan.dropped.begin() + (t + 1) * k, [](auto d) { return d != 0; }))
      continue;
    auto dst = g.dx.row(t);
    const auto src = dy.row(t);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  if (daux != T(0)) {
    const auto lb = load_balance_loss(plan.router_probs, c.route.expert_mask, c.config.alpha, plan.num_groups);
    for (std::size_t i = 0; i < d_probs.size(); ++i) d_probs[i] += daux * lb.grad_probs[i];
  }
  auto rg = router_backward(c.route, params.router, d_probs);
  add_into(g.dx, rg.dx);
  g.d_router = std::move(rg.d_router);
  return g;
}

// ---- attention ---------------------------------------------------------------------

namespace {

template <typename T>
TensorT<T> attention_core_forward(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, const AttentionConfig& cfg,
                                  AttentionCoreCache<T>& cache) {
  require_same_shape(q, k, "attention q/k");
  require_same_shape(q, v, "attention q/v");
  const std::int64_t tokens = q.dim(0), d = q.dim(1);
  if (cfg.num_heads < 1 || d % cfg.num_heads != 0)
    throw InvalidArgument("attention: d_model " + std::to_string(d) + " not divisible by " +
                          std::to_string(cfg.num_heads) + " heads");
  const std::int64_t len = cfg.seq_len > 0 ? cfg.seq_len : tokens;
  if (tokens % len != 0)
    throw InvalidArgument("attention: " + std::to_string(tokens) + " tokens not divisible by seq_len " + std::to_string(len));
  const std::int64_t dh = d / cfg.num_heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  cache.q = q;
  cache.k = k;
  cache.v = v;
  cache.seq_len = len;
  cache.heads = cfg.num_heads;
  cache.probs.clear();
  TensorT<T> ctx({tokens, d});
  for (std::int64_t s0 = 0; s0 < tokens; s0 += len)
    for (int h = 0; h < cfg.num_heads; ++h) {
      const std::int64_t c0 = h * dh;
      TensorT<T> scores({len, len});
      for (std::int64_t i = 0; i < len; ++i)
        for (std::int64_t j = 0; j < len; ++j) {
          T acc = T(0);
          for (std::int64_t c = 0; c < dh; ++c) acc += q.at(s0 + i, c0 + c) * k.at(s0 + j, c0 + c);
          scores.at(i, j) = acc * inv;
        }
      TensorT<T> p = ops::softmax(scores, -1);
      for (std::int64_t i = 0; i < len; ++i)
        for (std::int64_t j = 0; j < len; ++j) {
          const T w = p.at(i, j);
          for (std::int64_t c = 0; c < dh; ++c) ctx.at(s0 + i, c0 + c) += w * v.at(s0 + j, c0 + c);
        }
      cache.probs.push_back(std::move(p));
    }
  return ctx;
}

template <typename T>
struct CoreGrads {
  TensorT<T> dq, dk, dv;
};

template <typename T>
CoreGrads<T> attention_core_backward(const AttentionCoreCache<T>& cache, const TensorT<T>& dctx) {
  const std::int64_t tokens = cache.q.dim(0), d = cache.q.dim(1);
  const std::int64_t len = cache.seq_len;
  const std::int64_t dh = d / cache.heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  CoreGrads<T> g{TensorT<T>(cache.q.shape()), TensorT<T>(cache.k.shape()), TensorT<T>(cache.v.shape())};
  std::size_t idx = 0;
  for (std::int64_t s0 = 0; s0 < tokens; s0 += len)
    for (int h = 0; h < cache.heads; ++h) {
      const std::int64_t c0 = h * dh;
      const TensorT<T>& p = cache.probs[idx++];
      TensorT<T> dp({len, len});
      for (std::int64_t i = 0; i < len; ++i)
        for (std::int64_t j = 0; j < len; ++j) {
          T acc = T(0);
          for (std::int64_t c = 0; c < dh; ++c) {
            acc += dctx.at(s0 + i, c0 + c) * cache.v.at(s0 + j, c0 + c);
            g.dv.at(s0 + j, c0 + c) += p.at(i, j) * dctx.at(s0 + i, c0 + c);
          }
          dp.at(i, j) = acc;
        }
      const TensorT<T> ds = ops::softmax_backward(p, dp, -1);
      for (std::int64_t i = 0; i < len; ++i)
        for (std::int64_t j = 0; j < len; ++j) {
          const T w = ds.at(i, j) * inv;
          for (std::int64_t c = 0; c < dh; ++c) {
            g.dq.at(s0 + i, c0 + c) += w * cache.k.at(s0 + j, c0 + c);
            g.dk.at(s0 + j, c0 + c) += w * cache.q.at(s0 + i, c0 + c);
          }
        }
    }
  return g;
}

}  // namespace

template <typename T>
TensorT<T> dense_attention_forward(const TensorT<T>& x, const AttentionWeights<T>& w, const AttentionConfig& cfg,
                                   DenseAttentionCache<T>* cache) {
  require_rank(x, 2, "dense_attention");
  DenseAttentionCache<T> local;
  DenseAttentionCache<T>& c = cache ? *cache : local;
  c.x = x;
  const TensorT<T> q = ops::matmul(x, w.w_q);
  const TensorT<T> k = ops::matmul(x, w.w_k);
  const TensorT<T> v = ops::matmul(x, w.w_v);
  c.ctx = attention_core_forward(q, k, v, cfg, c.core);
  return ops::matmul(c.ctx, w.w_o);
}

template <typename T>
AttentionGrads<T> dense_attention_backward(const DenseAttentionCache<T>& c, const AttentionWeights<T>& w,
                                           const TensorT<T>& dy) {
  AttentionGrads<T> g;
  auto [dctx, dw_o] = ops::matmul_backward(c.ctx, w.w_o, dy);
  g.dw.w_o = std::move(dw_o);
  auto core = attention_core_backward(c.core, dctx);
  auto q = ops::matmul_backward(c.x, w.w_q, core.dq);
  auto k = ops::matmul_backward(c.x, w.w_k, core.dk);
  auto v = ops::matmul_backward(c.x, w.w_v, core.dv);
  g.dw.w_q = std::move(q.db);
  g.dw.w_k = std::move(k.db);
  g.dw.w_v = std::move(v.db);
  g.dx = std::move(q.da);
  add_into(g.dx, k.da);
  add_into(g.dx, v.da);
  return g;
}

template <typename T>
SwitchAttentionForward<T> switch_attention_forward(const TensorT<T>& x, const SwitchAttentionParams<T>& params,
                                                   const RouterConfig& config, const AttentionConfig& cfg,
                                                   const RngStream& rng, Mode mode,
                                                   const SwitchAttentionCache<T>* fixed_routing) {
  require_rank(x, 2, "switch_attention");
  if (cfg.num_heads < 1 || x.dim(1) % cfg.num_heads != 0)
    throw InvalidArgument("switch_attention: d_model " + std::to_string(x.dim(1)) + " not divisible by " +
                          std::to_string(cfg.num_heads) + " heads");
  SwitchAttentionForward<T> f;
  auto& c = f.cache;
  c.x = x;
  c.cfg = cfg;
  auto qf = switch_ffn_forward(x, params.query, config, rng.derive("query"), mode, {},
                               fixed_routing ? &fixed_routing->q.route : nullptr);
  if (qf.out.y.dim(1) != x.dim(1)) throw InvalidArgument("switch_attention: query experts must map d_model to d_model");
  TensorT<T> q = std::move(qf.out.y);
  c.q = std::move(qf.cache);
  T aux = qf.out.aux_loss;
  TensorT<T> k, v;
  if (cfg.route_kv) {
    auto kf = switch_ffn_forward(x, params.key, config, rng.derive("key"), mode, {},
                                 fixed_routing ? &fixed_routing->k.route : nullptr);
    auto vf = switch_ffn_forward(x, params.value, config, rng.derive("value"), mode, {},
                                 fixed_routing ? &fixed_routing->v.route : nullptr);
    k = std::move(kf.out.y);
    v = std::move(vf.out.y);
    aux += kf.out.aux_loss + vf.out.aux_loss;
    c.k = std::move(kf.cache);
    c.v = std::move(vf.cache);
  } else {
    k = ops::matmul(x, params.shared.w_k);
    v = ops::matmul(x, params.shared.w_v);
  }
  c.ctx = attention_core_forward(q, k, v, cfg, c.core);
  f.out.y = ops::matmul(c.ctx, params.shared.w_o);
  f.out.aux_loss = aux;
  f.out.stats = qf.out.stats;
  f.out.dropped_fraction = qf.out.dropped_fraction;
  return f;
}

template <typename T>
SwitchAttentionGrads<T> switch_attention_backward(const SwitchAttentionCache<T>& c,
                                                  const SwitchAttentionParams<T>& params, const TensorT<T>& dy,
                                                  T daux) {
  SwitchAttentionGrads<T> g;
  auto [dctx, dw_o] = ops::matmul_backward(c.ctx, params.shared.w_o, dy);
  g.dshared.w_o = std::move(dw_o);
  auto core = attention_core_backward(c.core, dctx);
  g.dq = switch_ffn_backward(c.q, params.query, core.dq, daux);
  g.dx = g.dq.dx;
  if (c.cfg.route_kv) {
    g.dk = switch_ffn_backward(c.k, params.key, core.dk, daux);
    g.dv = switch_ffn_backward(c.v, params.value, core.dv, daux);
    add_into(g.dx, g.dk.dx);
    add_into(g.dx, g.dv.dx);
  } else {
    auto k = ops::matmul_backward(c.x, params.shared.w_k, core.dk);
    auto v = ops::matmul_backward(c.x, params.shared.w_v, core.dv);
    g.dshared.w_k = std::move(k.db);
    g.dshared.w_v = std::move(v.db);
    add_into(g.dx, k.da);
    add_into(g.dx, v.da);
  }
  return g;
}

#define SWITCHSIM_INSTANTIATE_LAYERS(T)                                                                                \
  template struct SwitchLayerParams<T>;                                                                               \
  template TensorT<T> expert_dropout_mask<T>(const TensorT<T>&, double, const RngStream&,                             \
                                             const std::vector<std::int64_t>*);                                      \
  template TensorT<T> dense_ffn_forward<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, double,           \
                                           const RngStream&, Mode, DenseFfnCache<T>*,                                 \
                                           const std::vector<std::int64_t>*, FlopCounter*);                          \
  template DenseFfnGrads<T> dense_ffn_backward<T>(const DenseFfnCache<T>&, const TensorT<T>&, const TensorT<T>&,      \
                                                  const TensorT<T>&);                                                 \
  template SwitchForward<T> switch_ffn_forward<T>(const TensorT<T>&, const SwitchLayerParams<T>&,                     \
                                                  const RouterConfig&, const RngStream&, Mode, const SwitchOptions&,  \
                                                  const RouteResult<T>*);                                             \
  template SwitchLayerGrads<T> switch_ffn_backward<T>(const SwitchFfnCache<T>&, const SwitchLayerParams<T>&,         \
                                                      const TensorT<T>&, T);                                          \
  template TopkForward<T> moe_topk_forward<T>(const TensorT<T>&, const SwitchLayerParams<T>&, int,                    \
                                              const RouterConfig&, const RngStream&, Mode, bool, const SwitchOptions&, \
                                              const TopkRouteResult<T>*);                                             \
  template SwitchLayerGrads<T> moe_topk_backward<T>(const TopkFfnCache<T>&, const SwitchLayerParams<T>&,             \
                                                    const TensorT<T>&, T);                                            \
  template TensorT<T> dense_attention_forward<T>(const TensorT<T>&, const AttentionWeights<T>&,                       \
                                                 const AttentionConfig&, DenseAttentionCache<T>*);                    \
  template AttentionGrads<T> dense_attention_backward<T>(const DenseAttentionCache<T>&, const AttentionWeights<T>&,   \
                                                         const TensorT<T>&);                                          \
  template SwitchAttentionForward<T> switch_attention_forward<T>(const TensorT<T>&, const SwitchAttentionParams<T>&,  \
                                                                 const RouterConfig&, const AttentionConfig&,         \
                                                                 const RngStream&, Mode,                              \
                                                                 const SwitchAttentionCache<T>*);                     \
  template SwitchAttentionGrads<T> switch_attention_backward<T>(const SwitchAttentionCache<T>&,                       \
                                                                const SwitchAttentionParams<T>&, const TensorT<T>&, T);

SWITCHSIM_INSTANTIATE_LAYERS(float)
SWITCHSIM_INSTANTIATE_LAYERS(double)

}  // namespace switchsim
