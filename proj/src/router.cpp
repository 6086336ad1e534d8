// SPDX-License-Identifier: Apache-2.0
#include "switchsim/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "switchsim/numerics.hpp"
#include "switchsim/ops.hpp"

namespace switchsim {

std::string to_string(PolicyKind p) {
  switch (p) {
    case PolicyKind::argmax: return "argmax";
    case PolicyKind::sample_softmax: return "sample_softmax";
    case PolicyKind::input_dropout: return "input_dropout";
    case PolicyKind::input_jitter: return "input_jitter";
  }
  return "unknown";
}

PolicyKind parse_policy(std::string_view s) {
  if (s == "argmax") return PolicyKind::argmax;
  if (s == "sample_softmax" || s == "sample") return PolicyKind::sample_softmax;
  if (s == "input_dropout" || s == "dropout") return PolicyKind::input_dropout;
  if (s == "input_jitter" || s == "jitter") return PolicyKind::input_jitter;
  throw InvalidArgument("unknown routing policy '" + std::string(s) +
                        "' (valid: argmax, sample_softmax, input_dropout, input_jitter)");
}

std::string to_string(JitterMode m) {
  return m == JitterMode::multiplicative_input ? "multiplicative_input" : "additive_logits";
}

JitterMode parse_jitter_mode(std::string_view s) {
  if (s == "multiplicative_input") return JitterMode::multiplicative_input;
  if (s == "additive_logits") return JitterMode::additive_logits;
  throw InvalidArgument("unknown jitter mode '" + std::string(s) + "' (valid: multiplicative_input, additive_logits)");
}

void RouterConfig::validate() const {
  if (num_experts < 1) throw InvalidArgument("router.num_experts must be >= 1, got " + std::to_string(num_experts));
  if (!(capacity_factor >= 0.0) || !std::isfinite(capacity_factor))
    throw InvalidArgument("router.capacity_factor must be >= 0, got " + std::to_string(capacity_factor));
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw InvalidArgument("router.alpha must be >= 0, got " + std::to_string(alpha));
  if (!(policy.dropout_rate >= 0.0 && policy.dropout_rate < 1.0))
    throw InvalidArgument("router.dropout_rate must be in [0,1), got " + std::to_string(policy.dropout_rate));
  if (!(policy.jitter_eps >= 0.0 && policy.jitter_eps < 1.0))
    throw InvalidArgument("router.jitter_eps must be in [0,1), got " + std::to_string(policy.jitter_eps));
  if (ntlb_stages < 0) throw InvalidArgument("router.ntlb_stages must be >= 0, got " + std::to_string(ntlb_stages));
  if (routing_groups < 1)
    throw InvalidArgument("router.routing_groups must be >= 1, got " + std::to_string(routing_groups));
}

int expert_capacity(std::int64_t tokens_per_batch, int num_experts, double capacity_factor) {
  if (num_experts < 1) throw InvalidArgument("expert_capacity: num_experts must be >= 1, got " + std::to_string(num_experts));
  if (tokens_per_batch < 1)
    throw InvalidArgument("expert_capacity: tokens_per_batch must be >= 1, got " + std::to_string(tokens_per_batch));
  if (!(capacity_factor >= 0.0) || !std::isfinite(capacity_factor))
    throw InvalidArgument("expert_capacity: capacity_factor must be >= 0, got " + std::to_string(capacity_factor));
  const double raw = static_cast<double>(tokens_per_batch) / num_experts * capacity_factor;
  // absorb representation error so that e.g. 2/3 * 1.5 does not round up past 1
  const double c = std::ceil(raw - 1e-9 * std::max(1.0, raw));
  return std::max(1, static_cast<int>(c));
}

template <typename T>
std::int64_t DispatchPlan<T>::num_dropped() const noexcept {
  return std::count(dropped.begin(), dropped.end(), std::uint8_t{1});
}

template <typename T>
double DispatchPlan<T>::dropped_fraction() const noexcept {
  return tokens() == 0 ? 0.0 : static_cast<double>(num_dropped()) / static_cast<double>(tokens());
}

template <typename T>
PolicyNoise<T> policy_noise(std::int64_t rows, std::int64_t d_model, int num_experts, const RoutingPolicy& policy,
                            const RngStream& rng, Mode mode, std::int64_t token_offset) {
  PolicyNoise<T> noise;
  if (mode == Mode::eval) return noise;
  if (policy.kind == PolicyKind::input_dropout && policy.dropout_rate > 0.0) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(rows));
    std::iota(ids.begin(), ids.end(), token_offset);
    noise.input_scale = dropout_scale<T>(rows, d_model, policy.dropout_rate, rng.derive("router_dropout"), &ids);
  } else if (policy.kind == PolicyKind::input_jitter && policy.jitter_eps > 0.0) {
    const double lo = 1.0 - policy.jitter_eps;
    const double width = 2.0 * policy.jitter_eps;
    if (policy.jitter_mode == JitterMode::multiplicative_input) {
      const RngStream s = rng.derive("router_jitter");
      noise.input_scale = TensorT<T>({rows, d_model});
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d_model; ++j)
          noise.input_scale.at(r, j) =
              static_cast<T>(lo + width * s.uniform_at(static_cast<std::uint64_t>((token_offset + r) * d_model + j)));
    } else {
      const RngStream s = rng.derive("router_logit_jitter");
      noise.logit_offset = TensorT<T>({rows, num_experts});
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t e = 0; e < num_experts; ++e)
          noise.logit_offset.at(r, e) =
              static_cast<T>(lo + width * s.uniform_at(static_cast<std::uint64_t>((token_offset + r) * num_experts + e)));
    }
  }
  return noise;
}

template <typename T>
TensorT<T> apply_policy(const TensorT<T>& inputs, const RoutingPolicy& policy, const RngStream& rng, Mode mode,
                        std::int64_t token_offset) {
  require_rank(inputs, 2, "apply_policy");
  const auto noise = policy_noise<T>(inputs.dim(0), inputs.dim(1), 1, policy, rng, mode, token_offset);
  if (noise.input_scale.empty()) return inputs;
  return ops::mul(inputs, noise.input_scale);
}

namespace {

template <typename T>
struct ProbsPass {
  TensorT<T> router_inputs;
  PolicyNoise<T> noise;
  TensorT<T> probs;
};

template <typename T>
ProbsPass<T> compute_probs(const TensorT<T>& inputs, const TensorT<T>& weights, const RouterConfig& config,
                           const RngStream& rng, Mode mode, std::int64_t token_offset, const PolicyNoise<T>* fixed) {
  require_rank(inputs, 2, "route");
  require_rank(weights, 2, "route");
  if (inputs.dim(1) != weights.dim(0) || weights.dim(1) != config.num_experts)
    throw InvalidArgument("route: shape mismatch inputs " + shape_str(inputs.shape()) + " vs router weights " +
                          shape_str(weights.shape()) + " with " + std::to_string(config.num_experts) + " experts");
  ProbsPass<T> p;
  p.noise = fixed ? *fixed
                  : policy_noise<T>(inputs.dim(0), inputs.dim(1), config.num_experts, config.policy, rng, mode,
                                    token_offset);
  p.router_inputs = p.noise.input_scale.empty() ? inputs : ops::mul(inputs, p.noise.input_scale);
  TensorT<T> logits = ops::matmul(p.router_inputs, weights);
  if (!p.noise.logit_offset.empty()) logits = ops::add(logits, p.noise.logit_offset);
  for (std::int64_t t = 0; t < logits.dim(0); ++t)
    for (T v : logits.row(t))
      if (!std::isfinite(v))
        throw NumericError("router: non-finite logits for token " + std::to_string(token_offset + t));
  p.probs = ops::softmax(logits, -1);
  return p;
}

template <typename T>
int argmax_lowest(std::span<const T> row) {
  int best = 0;
  for (int e = 1; e < static_cast<int>(row.size()); ++e)
    if (row[static_cast<std::size_t>(e)] > row[static_cast<std::size_t>(best)]) best = e;
  return best;
}

template <typename T>
int select_expert(std::span<const T> row, const RoutingPolicy& policy, const RngStream& sample_rng, Mode mode,
                  std::int64_t global_token) {
  if (mode == Mode::train && policy.kind == PolicyKind::sample_softmax) {
    const double u = sample_rng.uniform_at(static_cast<std::uint64_t>(global_token));
    double acc = 0.0;
    for (int e = 0; e < static_cast<int>(row.size()); ++e) {
      acc += static_cast<double>(row[static_cast<std::size_t>(e)]);
      if (u < acc) return e;
    }
    return static_cast<int>(row.size()) - 1;
  }
  return argmax_lowest(row);
}

/// Experts by descending probability (ties: lower index first), excluding `skip`.
template <typename T>
std::vector<int> ranked_excluding(std::span<const T> row, int skip) {
  std::vector<int> order(row.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
  });
  std::erase(order, skip);
  return order;
}

void check_groups(std::int64_t tokens, int groups) {
  if (tokens < 1) throw InvalidArgument("route: no tokens");
  if (tokens % groups != 0)
    throw InvalidArgument("route: " + std::to_string(tokens) + " tokens not divisible into " + std::to_string(groups) +
                          " routing groups");
}

}  // namespace

template <typename T>
LoadBalanceLoss<T> load_balance_loss(const TensorT<T>& router_probs, const TensorT<T>& expert_mask, double alpha,
                                     int groups) {
  require_rank(router_probs, 2, "load_balance_loss");
  require_same_shape(router_probs, expert_mask, "load_balance_loss");
  const std::int64_t tokens = router_probs.dim(0);
  const std::int64_t n = router_probs.dim(1);
  if (groups < 1 || tokens < 1 || tokens % groups != 0)
    throw InvalidArgument("load_balance_loss: " + std::to_string(tokens) + " tokens not divisible into " +
                          std::to_string(groups) + " groups");
  for (std::int64_t t = 0; t < tokens; ++t) {
    int ones = 0;
    for (T v : expert_mask.row(t)) {
      if (v == T(1)) ++ones;
      else if (v != T(0)) ones = -1000;
    }
    if (ones != 1) throw InvalidArgument("load_balance_loss: expert_mask row " + std::to_string(t) + " is not one-hot");
  }
  const std::int64_t s = tokens / groups;
  const T a = static_cast<T>(alpha);
  const T nn = static_cast<T>(n);
  LoadBalanceLoss<T> out;
  out.f.assign(static_cast<std::size_t>(n), T(0));
  out.P.assign(static_cast<std::size_t>(n), T(0));
  out.grad_probs = TensorT<T>(router_probs.shape());
  T total = T(0);
  for (int g = 0; g < groups; ++g) {
    std::vector<T> f(static_cast<std::size_t>(n), T(0)), p(static_cast<std::size_t>(n), T(0));
    for (std::int64_t t = g * s; t < (g + 1) * s; ++t)
      for (std::int64_t i = 0; i < n; ++i) {
        f[static_cast<std::size_t>(i)] += expert_mask.at(t, i);
        p[static_cast<std::size_t>(i)] += router_probs.at(t, i);
      }
    T dot = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
      f[static_cast<std::size_t>(i)] /= static_cast<T>(s);
      p[static_cast<std::size_t>(i)] /= static_cast<T>(s);
      dot += f[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(i)];
    }
    total += a * nn * dot;
    for (std::int64_t t = g * s; t < (g + 1) * s; ++t)
      for (std::int64_t i = 0; i < n; ++i)
        out.grad_probs.at(t, i) = a * nn * f[static_cast<std::size_t>(i)] / static_cast<T>(s) / static_cast<T>(groups);
    for (std::int64_t i = 0; i < n; ++i) {
      out.f[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)] / static_cast<T>(groups);
      out.P[static_cast<std::size_t>(i)] += p[static_cast<std::size_t>(i)] / static_cast<T>(groups);
    }
  }
  out.loss = total / static_cast<T>(groups);
  return out;
}

template <typename T>
RouteResult<T> route(const TensorT<T>& inputs, const TensorT<T>& router_weights, const RouterConfig& config,
                     const RngStream& rng, Mode mode, const RouteOptions<T>& options) {
  config.validate();
  const std::int64_t tokens = inputs.rank() == 2 ? inputs.dim(0) : 0;
  check_groups(tokens, config.routing_groups);
  const int n = config.num_experts;
  const int groups = config.routing_groups;
  const std::int64_t s = tokens / groups;

  RouteResult<T> r;
  auto pass = compute_probs(inputs, router_weights, config, rng, mode, options.token_offset,
                            options.fixed ? &options.fixed->noise : nullptr);
  r.router_inputs = std::move(pass.router_inputs);
  r.noise = std::move(pass.noise);

  DispatchPlan<T>& plan = r.plan;
  plan.num_experts = n;
  plan.num_groups = groups;
  plan.expert_capacity = expert_capacity(s, n, config.capacity_factor);
  plan.router_probs = std::move(pass.probs);

  if (options.fixed) {
    const auto& f = options.fixed->plan;
    if (f.tokens() != tokens || f.num_experts != n || f.num_groups != groups)
      throw InvalidArgument("route: fixed assignment does not match this batch");
    plan.expert_index = f.expert_index;
    plan.position_in_expert = f.position_in_expert;
    plan.dropped = f.dropped;
    plan.expert_capacity = f.expert_capacity;
    plan.warnings = f.warnings;
    r.expert_mask = options.fixed->expert_mask;
  } else {
    const RngStream sample_rng = rng.derive("router_sample");
    plan.expert_index.resize(static_cast<std::size_t>(tokens));
    for (std::int64_t t = 0; t < tokens; ++t)
      plan.expert_index[static_cast<std::size_t>(t)] =
          select_expert<T>(plan.router_probs.row(t), config.policy, sample_rng, mode, options.token_offset + t);
    r.expert_mask = ops::one_hot<T>(plan.expert_index, n);

    // Position of each token within its expert: exclusive running count of
    // earlier tokens in the same group choosing that expert.
    plan.position_in_expert.assign(static_cast<std::size_t>(tokens), -1);
    plan.dropped.assign(static_cast<std::size_t>(tokens), 0);
    for (int g = 0; g < groups; ++g) {
      TensorT<T> group_mask({s, n});
      std::copy_n(r.expert_mask.data().begin() + g * s * n, s * n, group_mask.data().begin());
      const TensorT<T> counts = ops::cumsum(group_mask, 0);
      for (std::int64_t i = 0; i < s; ++i) {
        const std::int64_t t = g * s + i;
        const int e = plan.expert_index[static_cast<std::size_t>(t)];
        const int pos = static_cast<int>(counts.at(i, e)) - 1;
        if (pos < plan.expert_capacity) {
          plan.position_in_expert[static_cast<std::size_t>(t)] = pos;
        } else {
          plan.dropped[static_cast<std::size_t>(t)] = 1;
        }
      }
    }
    if (config.ntlb_stages > 0) {
      plan.gate.assign(static_cast<std::size_t>(tokens), T(0));
      plan = ntlb_reroute(plan, config.ntlb_stages);
    }
  }

  plan.gate.resize(static_cast<std::size_t>(tokens));
  for (std::int64_t t = 0; t < tokens; ++t)
    plan.gate[static_cast<std::size_t>(t)] = plan.router_probs.at(t, plan.expert_index[static_cast<std::size_t>(t)]);

  auto lb = load_balance_loss(plan.router_probs, r.expert_mask, config.alpha, groups);
  r.stats.f = std::move(lb.f);
  r.stats.P = std::move(lb.P);
  r.stats.aux_loss = lb.loss;
  return r;
}

template <typename T>
DispatchPlan<T> ntlb_reroute(const DispatchPlan<T>& plan, int stages) {
  if (stages < 0) throw InvalidArgument("ntlb_reroute: stages must be >= 0, got " + std::to_string(stages));
  DispatchPlan<T> out = plan;
  if (stages == 0 || out.num_dropped() == 0) return out;
  const int n = out.num_experts;
  if (stages > n - 1) {
    out.warnings.push_back("ntlb_reroute: stages " + std::to_string(stages) + " clamped to " + std::to_string(n - 1));
    stages = n - 1;
  }
  if (out.router_probs.rank() != 2 || out.router_probs.dim(0) != out.tokens() || out.router_probs.dim(1) != n)
    throw InvalidArgument("ntlb_reroute: plan does not retain router probabilities");
  if (out.gate.size() != out.expert_index.size()) out.gate.assign(out.expert_index.size(), T(0));

  const std::int64_t s = out.group_size();
  for (int g = 0; g < out.num_groups; ++g) {
    std::vector<int> load(static_cast<std::size_t>(n), 0);
    std::vector<std::vector<int>> candidates(static_cast<std::size_t>(s));
    for (std::int64_t i = 0; i < s; ++i) {
      const std::int64_t t = g * s + i;
      if (!out.dropped[static_cast<std::size_t>(t)]) {
        ++load[static_cast<std::size_t>(out.expert_index[static_cast<std::size_t>(t)])];
      } else {
        candidates[static_cast<std::size_t>(i)] =
            ranked_excluding<T>(out.router_probs.row(t), out.expert_index[static_cast<std::size_t>(t)]);
      }
    }
    for (int k = 1; k <= stages; ++k) {
      bool any_dropped = false;
      for (std::int64_t i = 0; i < s; ++i) {
        const auto t = static_cast<std::size_t>(g * s + i);
        if (!out.dropped[t]) continue;
        const int e = candidates[static_cast<std::size_t>(i)][static_cast<std::size_t>(k - 1)];
        if (load[static_cast<std::size_t>(e)] < out.expert_capacity) {
          out.expert_index[t] = e;
          out.position_in_expert[t] = load[static_cast<std::size_t>(e)]++;
          out.dropped[t] = 0;
          out.gate[t] = out.router_probs.at(static_cast<std::int64_t>(t), e);
        } else {
          any_dropped = true;
        }
      }
      if (!any_dropped) break;
    }
  }
  return out;
}

template <typename T>
DispatchCombine<T> build_dispatch_combine(const DispatchPlan<T>& plan, bool selective_precision) {
  const std::int64_t tokens = plan.tokens();
  const Shape shape{tokens, plan.num_experts, plan.expert_capacity};
  DispatchCombine<T> dc{TensorT<T>(shape), TensorT<T>(shape)};
  for (std::int64_t t = 0; t < tokens; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    if (plan.dropped[ti]) continue;
    dc.dispatch.at(t, plan.expert_index[ti], plan.position_in_expert[ti]) = T(1);
    dc.combine.at(t, plan.expert_index[ti], plan.position_in_expert[ti]) = plan.gate[ti];
  }
  if (selective_precision) {
    dc.combine = quantize_bf16(dc.combine);
    dc.dispatch.set_precision(Precision::bf16);
  }
  return dc;
}

template <typename T>
RouterGrads<T> router_backward_impl(const TensorT<T>& probs, const TensorT<T>& router_inputs,
                                    const PolicyNoise<T>& noise, const TensorT<T>& router_weights,
                                    const TensorT<T>& d_probs) {
  const TensorT<T> d_logits = ops::softmax_backward(probs, d_probs, -1);
  RouterGrads<T> g;
  g.d_router = ops::matmul_tn(router_inputs, d_logits);
  g.dx = ops::matmul_nt(d_logits, router_weights);
  if (!noise.input_scale.empty()) g.dx = ops::mul(g.dx, noise.input_scale);
  return g;
}

template <typename T>
RouterGrads<T> router_backward(const RouteResult<T>& r, const TensorT<T>& router_weights, const TensorT<T>& d_probs) {
  return router_backward_impl(r.plan.router_probs, r.router_inputs, r.noise, router_weights, d_probs);
}

template <typename T>
RouterGrads<T> router_backward(const TopkRouteResult<T>& r, const TensorT<T>& router_weights,
                               const TensorT<T>& d_probs) {
  return router_backward_impl(r.plan.router_probs, r.router_inputs, r.noise, router_weights, d_probs);
}

template <typename T>
TopkRouteResult<T> route_topk(const TensorT<T>& inputs, const TensorT<T>& router_weights, const RouterConfig& config,
                              int k, const RngStream& rng, Mode mode, const TopkRouteOptions<T>& options) {
  config.validate();
  const int n = config.num_experts;
  if (k < 1 || k > n)
    throw InvalidArgument("route_topk: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  const std::int64_t tokens = inputs.rank() == 2 ? inputs.dim(0) : 0;
  check_groups(tokens, config.routing_groups);
  const int groups = config.routing_groups;
  const std::int64_t s = tokens / groups;

  TopkRouteResult<T> r;
  auto pass = compute_probs(inputs, router_weights, config, rng, mode, options.token_offset,
                            options.fixed ? &options.fixed->noise : nullptr);
  r.router_inputs = std::move(pass.router_inputs);
  r.noise = std::move(pass.noise);
  TopkPlan<T>& plan = r.plan;
  plan.k = k;
  plan.num_experts = n;
  plan.num_groups = groups;
  plan.expert_capacity = expert_capacity(s, n, config.capacity_factor);
  plan.router_probs = std::move(pass.probs);

  if (options.fixed) {
    const auto& f = options.fixed->plan;
    if (f.tokens() != tokens || f.k != k || f.num_experts != n || f.num_groups != groups)
      throw InvalidArgument("route_topk: fixed assignment does not match this batch");
    plan.expert = f.expert;
    plan.position = f.position;
    plan.dropped = f.dropped;
    plan.expert_capacity = f.expert_capacity;
    r.expert_mask = options.fixed->expert_mask;
  } else {
    const RngStream sample_rng = rng.derive("router_sample");
    const auto slots = static_cast<std::size_t>(tokens * k);
    plan.expert.assign(slots, -1);
    plan.position.assign(slots, -1);
    plan.dropped.assign(slots, 0);
    std::vector<int> first(static_cast<std::size_t>(tokens));
    for (std::int64_t t = 0; t < tokens; ++t) {
      const auto row = plan.router_probs.row(t);
      const int top = select_expert<T>(row, config.policy, sample_rng, mode, options.token_offset + t);
      first[static_cast<std::size_t>(t)] = top;
      plan.expert[static_cast<std::size_t>(t * k)] = top;
      if (k > 1) {
        const auto rest = ranked_excluding<T>(row, top);
        for (int j = 1; j < k; ++j) plan.expert[static_cast<std::size_t>(t * k + j)] = rest[static_cast<std::size_t>(j - 1)];
      }
    }
    r.expert_mask = ops::one_hot<T>(first, n);
    for (int g = 0; g < groups; ++g) {
      std::vector<int> load(static_cast<std::size_t>(n), 0);
      for (int j = 0; j < k; ++j)
        for (std::int64_t t = g * s; t < (g + 1) * s; ++t) {
          const auto slot = static_cast<std::size_t>(t * k + j);
          auto& l = load[static_cast<std::size_t>(plan.expert[slot])];
          if (l < plan.expert_capacity) plan.position[slot] = l++;
          else plan.dropped[slot] = 1;
        }
    }
  }

  auto lb = load_balance_loss(plan.router_probs, r.expert_mask, config.alpha, groups);
  r.stats.f = std::move(lb.f);
  r.stats.P = std::move(lb.P);
  r.stats.aux_loss = lb.loss;
  return r;
}

#define SWITCHSIM_INSTANTIATE_ROUTER(T)                                                                               \
  template struct DispatchPlan<T>;                                                                                   \
  template PolicyNoise<T> policy_noise<T>(std::int64_t, std::int64_t, int, const RoutingPolicy&, const RngStream&,  \
                                          Mode, std::int64_t);                                                       \
  template TensorT<T> apply_policy<T>(const TensorT<T>&, const RoutingPolicy&, const RngStream&, Mode, std::int64_t); \
  template LoadBalanceLoss<T> load_balance_loss<T>(const TensorT<T>&, const TensorT<T>&, double, int);              \
  template RouteResult<T> route<T>(const TensorT<T>&, const TensorT<T>&, const RouterConfig&, const RngStream&, Mode, \
                                   const RouteOptions<T>&);                                                          \
  template DispatchPlan<T> ntlb_reroute<T>(const DispatchPlan<T>&, int);                                            \
  template DispatchCombine<T> build_dispatch_combine<T>(const DispatchPlan<T>&, bool);                              \
  template RouterGrads<T> router_backward<T>(const RouteResult<T>&, const TensorT<T>&, const TensorT<T>&);          \
  template RouterGrads<T> router_backward<T>(const TopkRouteResult<T>&, const TensorT<T>&, const TensorT<T>&);      \
  template TopkRouteResult<T> route_topk<T>(const TensorT<T>&, const TensorT<T>&, const RouterConfig&, int,         \
                                            const RngStream&, Mode, const TopkRouteOptions<T>&);

SWITCHSIM_INSTANTIATE_ROUTER(float)
SWITCHSIM_INSTANTIATE_ROUTER(double)

}  // namespace switchsim
