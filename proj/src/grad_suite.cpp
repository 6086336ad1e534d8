// SPDX-License-Identifier: Apache-2.0
#include "switchsim/cli.hpp"
#include "switchsim/layers.hpp"

namespace switchsim {

namespace {

TensorD uniform(const Shape& shape, const RngStream& rng, double a = 1.0) {
  TensorD t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = a * (2.0 * rng.uniform_at(i) - 1.0);
  return t;
}

// Keeps ReLU pre-activations of random inputs away from the kink.
TensorD away_from_zero(const Shape& shape, const RngStream& rng, double gap = 0.05) {
  TensorD t = uniform(shape, rng);
  for (auto& v : t.storage())
    if (std::abs(v) < gap) v = v < 0 ? -gap : gap;
  return t;
}

double dot(const TensorD& a, const TensorD& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

RouterConfig suite_router(int n, double cf) {
  RouterConfig c;
  c.num_experts = n;
  c.capacity_factor = cf;
  c.policy.kind = PolicyKind::input_jitter;
  return c;
}

void add_layer(std::vector<GradParam>& out, const std::string& prefix, SwitchLayerParams<double>& p,
               const SwitchLayerGrads<double>& g) {
  out.push_back({prefix + "router", &p.router, g.d_router});
  for (std::size_t e = 0; e < p.experts.size(); ++e) {
    out.push_back({prefix + "expert" + std::to_string(e) + ".w_in", &p.experts[e].w_in, g.d_experts[e].w_in});
    if (!p.experts[e].w_out.empty())
      out.push_back({prefix + "expert" + std::to_string(e) + ".w_out", &p.experts[e].w_out, g.d_experts[e].w_out});
  }
}

SwitchLayerParams<double> layer(std::int64_t d, std::int64_t dff, int n, const RngStream& rng, ExpertForm form,
                                double expert_dropout) {
  RngStream r = rng;
  auto p = init_switch_params(d, dff, n, 1.0, r, form);
  p.dropout_rate = 0.0;
  p.expert_dropout_rate = expert_dropout;
  return p.cast<double>();
}

GradReport router_probability_path(const RngStream& rng) {
  auto p = layer(6, 8, 4, rng.derive("params"), ExpertForm::ffn, 0.0);
  TensorD x = uniform({10, 6}, rng.derive("x"), 2.0);
  const auto cfg = suite_router(4, 1.0);
  const RngStream fr = rng.derive("forward");
  const auto fwd = switch_ffn_forward(x, p, cfg, fr, Mode::train);
  const auto g = switch_ffn_backward(fwd.cache, p, TensorD(fwd.out.y.shape()), 1.0);
  std::vector<GradParam> ps{{"router", &p.router, g.d_router}, {"x", &x, g.dx}};
  return grad_check(
      [&] { return double(switch_ffn_forward(x, p, cfg, fr, Mode::train, {}, &fwd.cache.route).out.aux_loss); }, ps);
}

GradReport dense_ffn(const RngStream& rng) {
  TensorD x = away_from_zero({5, 4}, rng.derive("x"));
  TensorD w_in = uniform({4, 6}, rng.derive("w_in"));
  TensorD w_out = uniform({6, 4}, rng.derive("w_out"));
  const TensorD r = uniform({5, 4}, rng.derive("r"));
  const RngStream fr = rng.derive("forward");
  DenseFfnCache<double> cache;
  dense_ffn_forward(x, w_in, w_out, 0.3, fr, Mode::train, &cache);
  const auto g = dense_ffn_backward(cache, w_in, w_out, r);
  std::vector<GradParam> ps{{"x", &x, g.dx}, {"w_in", &w_in, g.dw_in}, {"w_out", &w_out, g.dw_out}};
  return grad_check([&] { return dot(dense_ffn_forward(x, w_in, w_out, 0.3, fr, Mode::train), r); }, ps);
}

GradReport switch_ffn_path(const RngStream& rng) {
  auto p = layer(4, 8, 2, rng.derive("params"), ExpertForm::ffn, 0.25);
  TensorD x = away_from_zero({6, 4}, rng.derive("x"));
  const TensorD r = uniform({6, 4}, rng.derive("r"));
  const auto cfg = suite_router(2, 0.7);
  const RngStream fr = rng.derive("forward");
  const auto fwd = switch_ffn_forward(x, p, cfg, fr, Mode::train);
  const auto g = switch_ffn_backward(fwd.cache, p, r, 1.0);
  std::vector<GradParam> ps{{"x", &x, g.dx}};
  add_layer(ps, "", p, g);
  return grad_check(
      [&] {
        const auto o = switch_ffn_forward(x, p, cfg, fr, Mode::train, {}, &fwd.cache.route).out;
        return dot(o.y, r) + o.aux_loss;
      },
      ps);
}

GradReport switch_attention_path(const RngStream& rng, bool route_kv) {
  SwitchAttentionParams<double> p;
  p.query = layer(6, 6, 2, rng.derive("query"), ExpertForm::linear, 0.0);
  if (route_kv) {
    p.key = layer(6, 6, 2, rng.derive("key"), ExpertForm::linear, 0.0);
    p.value = layer(6, 6, 2, rng.derive("value"), ExpertForm::linear, 0.0);
  }
  {
    RngStream ar = rng.derive("shared");
    const auto w = init_attention_weights(6, 1.0, ar);
    p.shared = {w.w_q.cast<double>(), w.w_k.cast<double>(), w.w_v.cast<double>(), w.w_o.cast<double>()};
  }
  TensorD x = uniform({8, 6}, rng.derive("x"));
  const TensorD r = uniform({8, 6}, rng.derive("r"));
  AttentionConfig ac;
  ac.num_heads = 2;
  ac.seq_len = 4;
  ac.route_kv = route_kv;
  const auto cfg = suite_router(2, 0.75);
  const RngStream fr = rng.derive("forward");
  const auto fwd = switch_attention_forward(x, p, cfg, ac, fr, Mode::train);
  const auto g = switch_attention_backward(fwd.cache, p, r, 1.0);
  std::vector<GradParam> ps{{"x", &x, g.dx}, {"w_o", &p.shared.w_o, g.dshared.w_o}};
  add_layer(ps, "query.", p.query, g.dq);
  if (route_kv) {
    add_layer(ps, "key.", p.key, g.dk);
    add_layer(ps, "value.", p.value, g.dv);
  } else {
    ps.push_back({"w_k", &p.shared.w_k, g.dshared.w_k});
    ps.push_back({"w_v", &p.shared.w_v, g.dshared.w_v});
  }
  return grad_check(
      [&] {
        const auto o = switch_attention_forward(x, p, cfg, ac, fr, Mode::train, &fwd.cache).out;
        return dot(o.y, r) + o.aux_loss;
      },
      ps);
}

GradReport distill_path(const RngStream& rng) {
  TensorD s = uniform({4, 7}, rng.derive("student"), 1.5);
  const TensorD t = uniform({4, 7}, rng.derive("teacher"), 1.5);
  const std::vector<int> y = {3, 0, 6, 2};
  std::vector<GradParam> ps{{"student_logits", &s, distill_loss(s, t, y, 0.75).grad}};
  return grad_check([&] { return distill_loss(s, t, y, 0.75).loss; }, ps);
}

}  // namespace

std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed) {
  const RngStream root(seed);
  std::vector<GradSuiteEntry> out;
  out.push_back({"router_probability_path", router_probability_path(root.derive("router"))});
  out.push_back({"dense_ffn", dense_ffn(root.derive("dense_ffn"))});
  out.push_back({"switch_ffn", switch_ffn_path(root.derive("switch_ffn"))});
  out.push_back({"switch_attention", switch_attention_path(root.derive("switch_attention"), false)});
  out.push_back({"switch_attention_routed_kv", switch_attention_path(root.derive("switch_attention_kv"), true)});
  out.push_back({"distill_loss", distill_path(root.derive("distill"))});
  return out;
}

}  // namespace switchsim
