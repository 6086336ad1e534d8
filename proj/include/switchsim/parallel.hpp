// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "switchsim/layers.hpp"
#include "switchsim/router.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim {

enum class Strategy { data, model, data_model, expert_data, expert_model_data };

std::string to_string(Strategy s);
Strategy parse_strategy(std::string_view s);
const std::vector<Strategy>& all_strategies();

/// Logical n x m processor mesh. Core (i, j) has flat index i * m + j, where
/// i indexes the data dimension and j the model dimension.
struct MeshLayout {
  int n = 1;
  int m = 1;
  Strategy strategy = Strategy::data;
  int num_experts = 1;

  int cores() const noexcept { return n * m; }
  bool experts_sharded() const noexcept {
    return strategy == Strategy::expert_data || strategy == Strategy::expert_model_data;
  }
  int experts_per_core() const noexcept { return experts_sharded() ? num_experts / n : num_experts; }
};

/// Expert strategies place num_experts / n experts on each data row and by
/// default require num_experts == n; `allow_multiple_experts` admits any
/// multiple of n.
MeshLayout make_mesh(int n, int m, Strategy strategy, int num_experts, bool allow_multiple_experts = false);

enum class MeshAxis { none, data, model, both };
enum class CollectiveOp { all_to_all, all_reduce };
enum class Pass { forward, backward };

std::string to_string(CollectiveOp op);
std::string to_string(Pass p);

/// Per-core volume of one collective step.
struct CommRecord {
  CollectiveOp op = CollectiveOp::all_reduce;
  Pass pass = Pass::forward;
  std::int64_t elements = 0;  // moved per core; 0 for a one-core group
  int width = 4;              // bytes per element
  int group = 1;              // cores taking part
  std::string label;

  std::int64_t bytes() const noexcept { return elements * width; }
};

/// Logical tensor distributed over the mesh. `data_axis` / `model_axis`
/// name the tensor dimension split over that mesh dimension (-1 means
/// replicated). `partial` marks blocks that are summands of the logical
/// value along a mesh dimension.
struct ShardedTensor {
  Shape shape;
  int n = 1;
  int m = 1;
  int data_axis = -1;
  int model_axis = -1;
  MeshAxis partial = MeshAxis::none;
  std::vector<Tensor> blocks;  // indexed by core i * m + j

  Tensor& block(int i, int j) { return blocks.at(static_cast<std::size_t>(i * m + j)); }
  const Tensor& block(int i, int j) const { return blocks.at(static_cast<std::size_t>(i * m + j)); }
};

ShardedTensor shard(const Tensor& t, int n, int m, int data_axis, int model_axis);
/// Reassemble the logical tensor; replicated copies are read from index 0
/// of the replicated mesh dimension.
Tensor unshard(const ShardedTensor& t);

/// Sum partial blocks within each group along `axis` in ascending core
/// order; every member ends with the full sum.
std::pair<ShardedTensor, CommRecord> all_reduce(const ShardedTensor& t, MeshAxis axis, Pass pass, int width = 4,
                                                std::string label = {});

/// Within each model column, move the data split from the current
/// `data_axis` to `to_axis` (the dispatch / return regrouping).
std::pair<ShardedTensor, CommRecord> all_to_all(const ShardedTensor& t, int to_axis, Pass pass, int width = 4,
                                                std::string label = {});

/// Router settings of the single-core run the mesh must reproduce: one
/// routing group per data shard.
RouterConfig reference_config(const MeshLayout& mesh, RouterConfig config);

struct ShardedRun {
  LayerOutput<float> out;
  std::vector<CommRecord> ledger;
  bool has_grads = false;
  SwitchLayerGrads<float> grads;  // d y . dy with the aux loss weighted by 1
};

/// Execute the Switch layer over a simulated mesh, one core at a time:
/// route per data shard, dispatch into [E, C, d] buffers, all-to-all to the
/// expert owners, expert FFN over the d_ff slice held by each model column,
/// all-to-all back, combine. With `dy` the backward pass and the gradient
/// synchronisation of replicated parameters run as well.
ShardedRun run_sharded_switch_layer(const Tensor& x, const SwitchLayerParams<float>& params, const MeshLayout& mesh,
                                    const RouterConfig& config, const RngStream& rng, Mode mode = Mode::train,
                                    const Tensor* dy = nullptr);

struct CommCostRow {
  std::string strategy;
  int n = 1;
  int m = 1;
  int E = 1;
  int C = 1;
  CollectiveOp op = CollectiveOp::all_to_all;
  Pass pass = Pass::forward;
  std::int64_t bytes = 0;

  bool operator==(const CommCostRow&) const = default;
};

/// Analytic per-core bytes of one layer step, one row per (op, pass).
std::vector<CommCostRow> comm_cost_report(const MeshLayout& mesh, std::int64_t batch_tokens, std::int64_t d_model,
                                          std::int64_t d_ff, int E, int C, Precision precision);

/// The simulated ledger folded into the same rows as comm_cost_report.
std::vector<CommCostRow> summarize_ledger(const MeshLayout& mesh, int C, const std::vector<CommRecord>& ledger);

inline constexpr std::string_view kCommCsvHeader = "strategy,n,m,E,C,op,pass,bytes";
void write_comm_csv(std::ostream& os, const std::vector<CommCostRow>& rows, bool header = true);

}  // namespace switchsim
