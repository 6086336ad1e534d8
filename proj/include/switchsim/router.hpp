// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "switchsim/rng.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim {

enum class Mode { train, eval };

enum class PolicyKind { argmax, sample_softmax, input_dropout, input_jitter };

/// Where input jitter is applied. The multiplicative form scales the router
/// input; the additive form adds uniform(1-eps, 1+eps) to the logits.
enum class JitterMode { multiplicative_input, additive_logits };

std::string to_string(PolicyKind p);
PolicyKind parse_policy(std::string_view s);
std::string to_string(JitterMode m);
JitterMode parse_jitter_mode(std::string_view s);

struct RoutingPolicy {
  PolicyKind kind = PolicyKind::input_jitter;
  double dropout_rate = 0.1;
  double jitter_eps = 1e-2;
  JitterMode jitter_mode = JitterMode::multiplicative_input;

  bool operator==(const RoutingPolicy&) const = default;
};

struct RouterConfig {
  int num_experts = 1;
  double capacity_factor = 1.25;
  double alpha = 0.01;
  RoutingPolicy policy;
  /// Number of No-Token-Left-Behind reroute passes after top-1 routing.
  int ntlb_stages = 0;
  bool selective_precision = false;
  /// Tokens are split into this many contiguous groups that are routed
  /// independently, each with its own capacity (one group per core).
  int routing_groups = 1;

  void validate() const;
  bool operator==(const RouterConfig&) const = default;
};

/// ceil(tokens / experts * capacity_factor), never below 1.
int expert_capacity(std::int64_t tokens_per_batch, int num_experts, double capacity_factor);

template <typename T>
struct PolicyNoise {
  TensorT<T> input_scale;   // [tokens, d_model]; empty means identity
  TensorT<T> logit_offset;  // [tokens, experts]; empty means none
};

/// Noise for the router inputs of tokens [token_offset, token_offset + rows).
template <typename T>
PolicyNoise<T> policy_noise(std::int64_t rows, std::int64_t d_model, int num_experts, const RoutingPolicy& policy,
                            const RngStream& rng, Mode mode, std::int64_t token_offset = 0);

template <typename T>
TensorT<T> apply_policy(const TensorT<T>& inputs, const RoutingPolicy& policy, const RngStream& rng, Mode mode,
                        std::int64_t token_offset = 0);

template <typename T>
struct DispatchPlan {
  int num_experts = 0;
  int expert_capacity = 0;  // slots per expert per routing group
  int num_groups = 1;
  std::vector<int> expert_index;
  std::vector<T> gate;
  std::vector<int> position_in_expert;  // -1 when dropped
  std::vector<std::uint8_t> dropped;
  TensorT<T> router_probs;  // [tokens, experts]
  std::vector<std::string> warnings;

  std::int64_t tokens() const noexcept { return static_cast<std::int64_t>(expert_index.size()); }
  std::int64_t group_size() const noexcept { return tokens() / num_groups; }
  int group_of(std::int64_t t) const noexcept { return static_cast<int>(t / group_size()); }
  std::int64_t num_dropped() const noexcept;
  double dropped_fraction() const noexcept;
};

template <typename T>
struct LoadBalanceStats {
  std::vector<T> f;  // fraction of tokens whose top-1 choice is each expert
  std::vector<T> P;  // mean router probability per expert
  T aux_loss = T(0);
};

template <typename T>
struct LoadBalanceLoss {
  T loss = T(0);
  std::vector<T> f;
  std::vector<T> P;
  TensorT<T> grad_probs;  // d loss / d router_probs; f is held constant
};

/// alpha * N * sum_i f_i * P_i, averaged over `groups` equal token groups.
template <typename T>
LoadBalanceLoss<T> load_balance_loss(const TensorT<T>& router_probs, const TensorT<T>& expert_mask, double alpha,
                                     int groups = 1);

template <typename T>
struct RouteResult {
  DispatchPlan<T> plan;
  LoadBalanceStats<T> stats;
  TensorT<T> router_inputs;  // inputs after the exploration policy
  PolicyNoise<T> noise;
  TensorT<T> expert_mask;  // pre-capacity one-hot of the selected expert
};

template <typename T>
struct RouteOptions {
  std::int64_t token_offset = 0;
  /// Reuse the noise and the routing assignment of an earlier call; only
  /// probabilities, gates and P are recomputed. Used to differentiate with
  /// the piecewise-constant routing held fixed.
  const RouteResult<T>* fixed = nullptr;
};

template <typename T>
RouteResult<T> route(const TensorT<T>& inputs, const TensorT<T>& router_weights, const RouterConfig& config,
                     const RngStream& rng, Mode mode, const RouteOptions<T>& options = {});

/// Reroute dropped tokens to their next-ranked experts with spare capacity.
/// Pass k sends each still-dropped token to its (k+1)-th ranked expert.
template <typename T>
DispatchPlan<T> ntlb_reroute(const DispatchPlan<T>& plan, int stages);

template <typename T>
struct DispatchCombine {
  TensorT<T> dispatch;  // [tokens, experts, capacity], 0/1
  TensorT<T> combine;   // [tokens, experts, capacity], gate at the assigned slot
};

template <typename T>
DispatchCombine<T> build_dispatch_combine(const DispatchPlan<T>& plan, bool selective_precision);

template <typename T>
struct RouterGrads {
  TensorT<T> dx;
  TensorT<T> d_router;
};

/// Backpropagate d loss / d router_probs into the router input and weights.
template <typename T>
RouterGrads<T> router_backward(const RouteResult<T>& r, const TensorT<T>& router_weights, const TensorT<T>& d_probs);

// ---- top-k routing ----------------------------------------------------------

template <typename T>
struct TopkPlan {
  int k = 1;
  int num_experts = 0;
  int expert_capacity = 0;
  int num_groups = 1;
  // [tokens * k], rank-major within a token: entry t*k + r is rank r.
  std::vector<int> expert;
  std::vector<int> position;  // -1 when dropped
  std::vector<std::uint8_t> dropped;
  TensorT<T> router_probs;

  std::int64_t tokens() const noexcept { return router_probs.empty() ? 0 : router_probs.dim(0); }
};

template <typename T>
struct TopkRouteResult {
  TopkPlan<T> plan;
  LoadBalanceStats<T> stats;
  TensorT<T> router_inputs;
  PolicyNoise<T> noise;
  TensorT<T> expert_mask;
};

template <typename T>
struct TopkRouteOptions {
  std::int64_t token_offset = 0;
  const TopkRouteResult<T>* fixed = nullptr;
};

/// Route every token to its k highest-ranked experts. Rank-0 assignments of
/// all tokens claim capacity first, then rank-1, and so on.
template <typename T>
TopkRouteResult<T> route_topk(const TensorT<T>& inputs, const TensorT<T>& router_weights, const RouterConfig& config,
                              int k, const RngStream& rng, Mode mode, const TopkRouteOptions<T>& options = {});

template <typename T>
RouterGrads<T> router_backward(const TopkRouteResult<T>& r, const TensorT<T>& router_weights,
                               const TensorT<T>& d_probs);

}  // namespace switchsim
