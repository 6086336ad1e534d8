// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "switchsim/router.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim {

/// Each expert is either a two-matrix ReLU FFN or a single linear map.
enum class ExpertForm { ffn, linear };

template <typename T>
struct ExpertWeights {
  TensorT<T> w_in;   // [d_model, d_ff], or [d_model, d_out] for linear experts
  TensorT<T> w_out;  // [d_ff, d_model]; empty for linear experts
};

template <typename T>
struct SwitchLayerParams {
  TensorT<T> router;  // [d_model, num_experts]
  std::vector<ExpertWeights<T>> experts;
  ExpertForm form = ExpertForm::ffn;
  double dropout_rate = 0.1;
  double expert_dropout_rate = 0.1;

  std::int64_t d_model() const { return router.dim(0); }
  int num_experts() const { return static_cast<int>(experts.size()); }
  /// Shape of the expert output.
  std::int64_t d_out() const;
  void validate() const;

  template <typename U>
  SwitchLayerParams<U> cast() const {
    SwitchLayerParams<U> p;
    p.router = router.template cast<U>();
    for (const auto& e : experts) p.experts.push_back({e.w_in.template cast<U>(), e.w_out.template cast<U>()});
    p.form = form;
    p.dropout_rate = dropout_rate;
    p.expert_dropout_rate = expert_dropout_rate;
    return p;
  }
};

/// Truncated-normal initialization of a homogeneous expert layer.
SwitchLayerParams<float> init_switch_params(std::int64_t d_model, std::int64_t d_ff, int num_experts, double scale,
                                            RngStream& rng, ExpertForm form = ExpertForm::ffn);

template <typename T>
struct LayerOutput {
  TensorT<T> y;
  T aux_loss = T(0);
  LoadBalanceStats<T> stats;
  double dropped_fraction = 0.0;
  /// Rows whose output is the input itself (every assignment overflowed).
  std::vector<std::uint8_t> passthrough;
};

/// Multiply-add tallies, filled when a counter is passed to a forward call.
struct FlopCounter {
  std::int64_t expert_macs = 0;
  std::int64_t router_macs = 0;
  std::int64_t expert_rows = 0;
};

/// Multiply-adds per token of a dense d_model -> d_ff -> d_model FFN.
constexpr std::int64_t ffn_macs_per_token(std::int64_t d_model, std::int64_t d_ff) { return 2 * d_model * d_ff; }

// ---- dense FFN ---------------------------------------------------------------

template <typename T>
struct DenseFfnCache {
  TensorT<T> x;
  TensorT<T> pre;   // x W_in
  TensorT<T> mask;  // dropout scale
  TensorT<T> act;   // relu(pre) * mask
};

template <typename T>
struct DenseFfnGrads {
  TensorT<T> dx;
  TensorT<T> dw_in;
  TensorT<T> dw_out;
};

/// Inverted dropout applied to `intermediate`; rows are keyed by `row_ids`.
template <typename T>
TensorT<T> expert_dropout_mask(const TensorT<T>& intermediate, double rate, const RngStream& rng,
                               const std::vector<std::int64_t>* row_ids = nullptr);

/// relu(x W_in) W_out with dropout on the intermediate in train mode.
template <typename T>
TensorT<T> dense_ffn_forward(const TensorT<T>& x, const TensorT<T>& w_in, const TensorT<T>& w_out, double dropout,
                             const RngStream& rng, Mode mode, DenseFfnCache<T>* cache = nullptr,
                             const std::vector<std::int64_t>* row_ids = nullptr, FlopCounter* flops = nullptr);

template <typename T>
DenseFfnGrads<T> dense_ffn_backward(const DenseFfnCache<T>& cache, const TensorT<T>& w_in, const TensorT<T>& w_out,
                                    const TensorT<T>& dy);

template <typename T>
TensorT<T> dense_ffn(const TensorT<T>& x, const TensorT<T>& w_in, const TensorT<T>& w_out, double dropout,
                     const RngStream& rng, Mode mode) {
  return dense_ffn_forward(x, w_in, w_out, dropout, rng, mode);
}

// ---- routed expert layers -----------------------------------------------------

template <typename T>
struct ExpertBuffer {
  std::vector<std::int64_t> tokens;  // token per filled row, in slot order
  std::vector<int> rank;             // top-k rank that placed each row
  TensorT<T> input;                  // gathered (and possibly bf16) inputs
  TensorT<T> output;                 // expert outputs (possibly bf16)
  DenseFfnCache<T> cache;
};

template <typename T>
struct SwitchLayerGrads {
  TensorT<T> dx;
  TensorT<T> d_router;
  std::vector<ExpertWeights<T>> d_experts;
};

template <typename T>
struct SwitchFfnCache {
  RouteResult<T> route;
  std::vector<ExpertBuffer<T>> buffers;
  std::vector<T> combine_gate;  // gate actually used per token (bf16 if selective)
  TensorT<T> x;
  RouterConfig config;
};

template <typename T>
struct SwitchForward {
  LayerOutput<T> out;
  SwitchFfnCache<T> cache;
};

struct SwitchOptions {
  std::int64_t token_offset = 0;
  FlopCounter* flops = nullptr;
};

/// Top-1 routed expert layer. Dropped tokens pass through unchanged; every
/// other token gets gate * E(x) from its expert.
template <typename T>
SwitchForward<T> switch_ffn_forward(const TensorT<T>& x, const SwitchLayerParams<T>& params, const RouterConfig& config,
                                    const RngStream& rng, Mode mode, const SwitchOptions& options = {},
                                    const RouteResult<T>* fixed_routing = nullptr);

/// `daux` is the upstream gradient of the auxiliary loss (1 when the aux
/// loss is added to the objective unscaled).
template <typename T>
SwitchLayerGrads<T> switch_ffn_backward(const SwitchFfnCache<T>& cache, const SwitchLayerParams<T>& params,
                                        const TensorT<T>& dy, T daux);

template <typename T>
LayerOutput<T> switch_ffn(const TensorT<T>& x, const SwitchLayerParams<T>& params, const RouterConfig& config,
                          const RngStream& rng, Mode mode) {
  return switch_ffn_forward(x, params, config, rng, mode).out;
}

template <typename T>
struct TopkFfnCache {
  TopkRouteResult<T> route;
  std::vector<ExpertBuffer<T>> buffers;
  std::vector<T> slot_gate;   // [tokens * k] gate used per assignment (0 if dropped)
  std::vector<T> raw_gate;    // [tokens * k] un-quantized gate
  TensorT<T> x;
  RouterConfig config;
  bool renormalize = false;
};

template <typename T>
struct TopkForward {
  LayerOutput<T> out;
  TopkFfnCache<T> cache;
};

/// y = sum over surviving top-k assignments of p_i(x) E_i(x); p is the full
/// softmax (optionally renormalized over the selected set). A token whose
/// assignments all overflow passes through unchanged.
template <typename T>
TopkForward<T> moe_topk_forward(const TensorT<T>& x, const SwitchLayerParams<T>& params, int k,
                                const RouterConfig& config, const RngStream& rng, Mode mode, bool renormalize = false,
                                const SwitchOptions& options = {}, const TopkRouteResult<T>* fixed_routing = nullptr);

template <typename T>
SwitchLayerGrads<T> moe_topk_backward(const TopkFfnCache<T>& cache, const SwitchLayerParams<T>& params,
                                      const TensorT<T>& dy, T daux);

template <typename T>
LayerOutput<T> moe_topk_ffn(const TensorT<T>& x, const SwitchLayerParams<T>& params, int k, const RouterConfig& config,
                            const RngStream& rng, Mode mode, bool renormalize = false) {
  return moe_topk_forward(x, params, k, config, rng, mode, renormalize).out;
}

// ---- attention ------------------------------------------------------------------

struct AttentionConfig {
  int num_heads = 1;
  /// Attention is restricted to consecutive blocks of this many tokens
  /// (one sequence each); 0 means all tokens form one sequence.
  std::int64_t seq_len = 0;
  /// Route keys and values through their own expert layers as well.
  bool route_kv = false;
};

template <typename T>
struct AttentionWeights {
  TensorT<T> w_q;  // dense query projection (unused by switch attention)
  TensorT<T> w_k;
  TensorT<T> w_v;
  TensorT<T> w_o;
};

AttentionWeights<float> init_attention_weights(std::int64_t d_model, double scale, RngStream& rng);

template <typename T>
struct AttentionCoreCache {
  TensorT<T> q, k, v;
  std::vector<TensorT<T>> probs;  // per (sequence, head): [L, L]
  std::int64_t seq_len = 0;
  int heads = 1;
};

template <typename T>
struct DenseAttentionCache {
  TensorT<T> x;
  AttentionCoreCache<T> core;
  TensorT<T> ctx;
};

template <typename T>
struct AttentionGrads {
  TensorT<T> dx;
  AttentionWeights<T> dw;
};

template <typename T>
TensorT<T> dense_attention_forward(const TensorT<T>& x, const AttentionWeights<T>& w, const AttentionConfig& cfg,
                                   DenseAttentionCache<T>* cache = nullptr);

template <typename T>
AttentionGrads<T> dense_attention_backward(const DenseAttentionCache<T>& cache, const AttentionWeights<T>& w,
                                           const TensorT<T>& dy);

template <typename T>
struct SwitchAttentionParams {
  SwitchLayerParams<T> query;
  SwitchLayerParams<T> key;    // used only with route_kv
  SwitchLayerParams<T> value;  // used only with route_kv
  AttentionWeights<T> shared;  // w_k / w_v (unless routed) and w_o

  template <typename U>
  SwitchAttentionParams<U> cast() const {
    SwitchAttentionParams<U> p;
    p.query = query.template cast<U>();
    if (!key.experts.empty()) p.key = key.template cast<U>();
    if (!value.experts.empty()) p.value = value.template cast<U>();
    p.shared = {shared.w_q.template cast<U>(), shared.w_k.template cast<U>(), shared.w_v.template cast<U>(),
                shared.w_o.template cast<U>()};
    return p;
  }
};

template <typename T>
struct SwitchAttentionCache {
  SwitchFfnCache<T> q, k, v;
  TensorT<T> x;
  AttentionCoreCache<T> core;
  TensorT<T> ctx;
  AttentionConfig cfg;
};

template <typename T>
struct SwitchAttentionForward {
  LayerOutput<T> out;
  SwitchAttentionCache<T> cache;
};

template <typename T>
struct SwitchAttentionGrads {
  TensorT<T> dx;
  SwitchLayerGrads<T> dq, dk, dv;
  AttentionWeights<T> dshared;
};

/// Self-attention whose query projection is a Switch layer over expert
/// projections; keys and values come from shared dense weights.
template <typename T>
SwitchAttentionForward<T> switch_attention_forward(const TensorT<T>& x, const SwitchAttentionParams<T>& params,
                                                   const RouterConfig& config, const AttentionConfig& cfg,
                                                   const RngStream& rng, Mode mode,
                                                   const SwitchAttentionCache<T>* fixed_routing = nullptr);

template <typename T>
SwitchAttentionGrads<T> switch_attention_backward(const SwitchAttentionCache<T>& cache,
                                                  const SwitchAttentionParams<T>& params, const TensorT<T>& dy, T daux);

template <typename T>
LayerOutput<T> switch_attention(const TensorT<T>& x, const SwitchAttentionParams<T>& params,
                                const RouterConfig& config, const AttentionConfig& cfg, const RngStream& rng,
                                Mode mode) {
  return switch_attention_forward(x, params, config, cfg, rng, mode).out;
}

}  // namespace switchsim
