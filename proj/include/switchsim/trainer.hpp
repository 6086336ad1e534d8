// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "switchsim/layers.hpp"
#include "switchsim/router.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim {

// ---- synthetic corpus ---------------------------------------------------------

/// K bigram processes. Cluster c emits tokens from `ranges[c]` (a contiguous
/// id range) following its own transition table.
struct BigramTask {
  int vocab = 0;  // ids 0 .. vocab-2 are emitted; vocab-1 is left for the sentinel
  int clusters = 1;
  std::vector<std::pair<int, int>> ranges;  // [begin, end) per cluster
  std::vector<Tensor> tables;               // [range, range] row-stochastic per cluster
};

struct Sequence {
  int cluster = 0;
  std::vector<int> tokens;
};

using Dataset = std::vector<Sequence>;

/// Peaked random transition tables: row weights exp(2 z), z standard normal.
BigramTask make_bigram_task(int vocab, int clusters, bool disjoint_ranges, const RngStream& rng);

/// Sequence `index` of a stream is a pure function of (rng, index).
Sequence sample_sequence(const BigramTask& task, int seq_len, const RngStream& rng, std::uint64_t index);

Dataset gen_synthetic_corpus(const BigramTask& task, int seq_len, std::int64_t size, const RngStream& rng);

/// Builds the task from rng.derive("tables") and samples from rng.derive("sequences").
Dataset gen_synthetic_corpus(int vocab, int clusters, int seq_len, std::int64_t size, const RngStream& rng,
                             bool disjoint_ranges = false);

// ---- masking --------------------------------------------------------------------

struct MaskedSequence {
  std::vector<int> input;
  std::vector<int> positions;  // ascending
  std::vector<int> targets;
};

/// Masks max(1, floor(rate * len)) distinct positions chosen uniformly.
MaskedSequence mask_tokens(const std::vector<int>& seq, double rate, int sentinel, const RngStream& rng);

// ---- losses and metrics -----------------------------------------------------------

template <typename T>
struct LossGrad {
  T loss = T(0);
  TensorT<T> grad;  // d loss / d logits
};

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
LossGrad<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets);

/// Mean log-probability of the targets (higher is better).
template <typename T>
double neg_log_perplexity(const TensorT<T>& logits, const std::vector<int>& targets);

/// hard_weight * CE(student, targets) + (1 - hard_weight) * CE(student,
/// softmax(teacher)); the teacher side is a constant.
template <typename T>
LossGrad<T> distill_loss(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                         const std::vector<int>& targets, double hard_weight = 0.75);

// ---- model ----------------------------------------------------------------------------

enum class FfnKind { dense, switch_ffn, topk };
enum class AttentionKind { dense, switch_attention };
enum class TrainMode { pretrain, finetune, distill };

std::string to_string(FfnKind k);
FfnKind parse_ffn_kind(std::string_view s);
std::string to_string(AttentionKind k);
AttentionKind parse_attention_kind(std::string_view s);
std::string to_string(ExpertForm f);
ExpertForm parse_expert_form(std::string_view s);
std::string to_string(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct ModelConfig {
  int vocab = 64;
  int d_model = 32;
  int d_ff = 64;
  int layers = 2;
  int heads = 2;
  int seq_len = 16;
  /// Layer used at expert positions; every other block uses a dense FFN.
  FfnKind ffn = FfnKind::switch_ffn;
  AttentionKind attention = AttentionKind::dense;
  /// Expert form of the routed attention projections.
  ExpertForm attention_expert_form = ExpertForm::linear;
  /// Route keys and values through their own expert layers as well.
  bool attention_route_kv = false;
  /// Expert layers sit at blocks b with b % expert_every == expert_every - 1.
  int expert_every = 2;
  int num_experts = 4;
  int top_k = 2;
  /// Renormalize top-k gates over the selected experts.
  bool topk_renormalize = false;
  double init_scale = 0.1;
  double dropout = 0.1;
  double expert_dropout = 0.1;
  bool tie_embeddings = false;

  /// Blocks that host the routed variants selected by `ffn` / `attention`.
  bool expert_block(int b) const noexcept { return expert_every > 0 && b % expert_every == expert_every - 1; }
  /// Layers with a router (switch attention and expert FFNs).
  int num_routed_layers() const noexcept;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct Block {
  AttentionWeights<float> attn;     // w_q unused with switch attention
  SwitchLayerParams<float> query;   // switch attention only
  SwitchLayerParams<float> key, value;  // switch attention with routed keys and values
  Tensor w_in, w_out;               // dense FFN
  SwitchLayerParams<float> experts; // expert FFN
};

struct ToyModel {
  ModelConfig config;
  Tensor embedding;  // [V, d]
  Tensor position;   // [L, d]
  Tensor output;     // [d, V]; empty when tied
  std::vector<Block> blocks;

  bool switch_attention_at(int b) const noexcept {
    return config.attention == AttentionKind::switch_attention && config.expert_block(b);
  }
  bool expert_ffn_at(int b) const noexcept { return config.ffn != FfnKind::dense && config.expert_block(b); }

  /// Every trainable tensor in a fixed order with a stable name.
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<std::pair<std::string, const Tensor*>> named_params() const;
  /// Same structure with every tensor zeroed.
  ToyModel zeros_like() const;
};

ToyModel init_model(const ModelConfig& cfg, const RngStream& rng);

struct Batch {
  std::vector<int> tokens;  // [sequences * seq_len] masked inputs
  std::vector<std::int64_t> target_rows;  // flat positions of masked tokens
  std::vector<int> targets;
  int sequences = 0;
};

Batch make_batch(const std::vector<Sequence>& seqs, double mask_rate, int sentinel, const RngStream& rng);

struct SwitchLayerStats {
  std::vector<double> f;
  double aux_loss = 0.0;
  double dropped_fraction = 0.0;
};

struct ForwardResult {
  Tensor logits;  // [masked positions, V]
  double aux_loss = 0.0;
  std::vector<SwitchLayerStats> layers;  // one per expert-bearing layer
};

struct ModelCache;

/// `cache` may be null when no backward pass follows.
ForwardResult model_forward(const ToyModel& model, const RouterConfig& router, const Batch& batch,
                            const RngStream& rng, Mode mode, ModelCache* cache = nullptr);

struct ModelCache {
  struct BlockCache {
    DenseAttentionCache<float> attn;
    SwitchAttentionCache<float> sattn;
    DenseFfnCache<float> ffn;
    SwitchFfnCache<float> sw;
    TopkFfnCache<float> topk;
    std::vector<std::uint8_t> passthrough;
    Tensor h_mid;
  };
  std::vector<BlockCache> blocks;
  Tensor h_final;  // gathered masked rows
  const Batch* batch = nullptr;
  RouterConfig router;
};

/// Gradients of loss(logits) + daux * sum(aux) given d loss / d logits.
ToyModel model_backward(const ToyModel& model, const ModelCache& cache, const Tensor& d_logits, float daux = 1.0f);

// ---- training ----------------------------------------------------------------------------

struct TrainConfig {
  TrainMode mode = TrainMode::pretrain;
  int steps = 200;
  int batch_sequences = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double mask_rate = 0.15;
  int sentinel = -1;  // -1 means vocab - 1
  int clusters = 4;
  bool disjoint_clusters = true;
  int eval_sequences = 256;
  int eval_every = 0;  // 0: no periodic evaluation
  double hard_weight = 0.75;

  int resolved_sentinel(int vocab) const noexcept { return sentinel < 0 ? vocab - 1 : sentinel; }
  void validate(int vocab) const;
  bool operator==(const TrainConfig&) const = default;
};

struct MetricRow {
  int step = 0;
  double loss = 0.0;
  double cross_entropy = 0.0;
  double aux_loss = 0.0;
  double neg_log_perplexity = 0.0;
  double dropped_fraction = 0.0;
  std::vector<double> f;
};

inline constexpr int kMetricsSchemaVersion = 1;
std::string metrics_csv_header(int num_experts);
void write_metric_row(std::ostream& os, const MetricRow& row, int num_experts);

struct AdamState {
  std::int64_t t = 0;
  ToyModel m, v;
};

struct EvalResult {
  double cross_entropy = 0.0;
  double neg_log_perplexity = 0.0;
  double aux_loss = 0.0;
  double dropped_fraction = 0.0;
  std::vector<double> f;
};

/// Owns the model, optimizer state and data streams of one run. Batches,
/// masks and layer noise are keyed by step, so a restored trainer continues
/// exactly where the original left off.
class Trainer {
 public:
  Trainer(ModelConfig model, RouterConfig router, TrainConfig train, std::uint64_t seed);

  MetricRow step();
  /// Runs until `steps` steps have been taken in total.
  std::vector<MetricRow> run(int steps);
  EvalResult evaluate() const;

  /// Use a teacher's eval-mode logits as soft targets from now on.
  void set_teacher(const ToyModel* teacher) { teacher_ = teacher; }

  int current_step() const noexcept { return step_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ToyModel& model() noexcept { return model_; }
  const ToyModel& model() const noexcept { return model_; }
  AdamState& optimizer() noexcept { return adam_; }
  const AdamState& optimizer() const noexcept { return adam_; }
  const RouterConfig& router() const noexcept { return router_; }
  const TrainConfig& config() const noexcept { return train_; }
  const BigramTask& task() const noexcept { return task_; }
  void restore(int step, ToyModel model, AdamState adam);

  Batch train_batch(int step) const;
  const Batch& eval_batch() const noexcept { return eval_batch_; }

 private:
  ModelConfig model_cfg_;
  RouterConfig router_;
  TrainConfig train_;
  std::uint64_t seed_;
  RngStream root_;
  BigramTask task_;
  ToyModel model_;
  AdamState adam_;
  Batch eval_batch_;
  int step_ = 0;
  const ToyModel* teacher_ = nullptr;
};

void adam_update(ToyModel& model, const ToyModel& grads, AdamState& state, const TrainConfig& cfg);

/// Copy embeddings, attention, dense FFNs and the output projection of the
/// teacher into a dense student. Expert positions keep the student's own
/// initialization.
ToyModel init_student_from_teacher(const ToyModel& teacher, ToyModel student);

/// The dense counterpart of a config (same shapes, no expert layers).
ModelConfig dense_config(ModelConfig cfg);

}  // namespace switchsim
