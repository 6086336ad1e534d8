// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "switchsim/numerics.hpp"
#include "switchsim/parallel.hpp"
#include "switchsim/trainer.hpp"

namespace switchsim {

// ---- configuration --------------------------------------------------------------------

struct ParallelConfig {
  bool enabled = false;
  int n = 1;
  int m = 1;
  Strategy strategy = Strategy::data;
  /// Tokens in the simulated layer step (split over the data dimension).
  int tokens = 64;

  bool operator==(const ParallelConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "run";
  std::string output_dir = "runs/run";
  std::uint64_t seed = 0;
  ModelConfig model;
  RouterConfig router;
  TrainConfig train;
  /// Write a checkpoint every this many steps (0: final only).
  int checkpoint_every = 0;
  int teacher_steps = 500;
  ParallelConfig parallel;

  /// Router expert count follows the model.
  RouterConfig resolved_router() const;
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Every accepted key, in serialization order.
const std::vector<std::string>& config_keys();

/// Assign one dotted key. Unknown keys list the valid ones; malformed values
/// name the key.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);

using Assignments = std::vector<std::pair<std::string, std::string>>;

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
Assignments parse_assignments(std::string_view text, std::string_view origin = "<config>");

/// Defaults, then the assignments in order, then mode-dependent defaults for
/// keys that were not assigned; the result is validated.
ExperimentConfig build_config(const Assignments& assignments);

ExperimentConfig parse_config_text(std::string_view text);
ExperimentConfig parse_config_file(const std::string& path);

/// One `key = value` line per key; doubles print with 17 significant digits.
std::string serialize_config(const ExperimentConfig& cfg);

// ---- checkpoints -----------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'W', 'C', 'K'};

/// Layout: magic "SWCK", u32 version, u64 header length, JSON header, then
/// the tensor payloads as little-endian f32 in header order.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  ExperimentConfig config;
  int step = 0;
  /// Training streams are counter based, keyed by (seed, step).
  std::uint64_t rng_seed = 0;
  ToyModel model;
  AdamState adam;
};

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);
Checkpoint make_checkpoint(const ExperimentConfig& cfg, const Trainer& trainer);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---- experiments ------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitNumeric = 2;
inline constexpr int kExitCheckFailed = 3;

inline constexpr int kEvalSchemaVersion = 1;
std::string eval_csv_header(int num_experts);

struct RunResult {
  int exit_code = kExitOk;
  std::string message;
  int steps = 0;
  EvalResult final_eval;
  std::vector<std::string> artifacts;
};

/// Train from scratch, or continue from `resume` when given. Writes
/// metrics.csv, eval.csv, checkpoint.bin and, with parallel.enabled,
/// comm_report.csv to output_dir. A non-finite loss writes
/// numeric_error.txt and returns kExitNumeric.
RunResult run_experiment(const ExperimentConfig& cfg, const Checkpoint* resume = nullptr);

/// One run per routing policy, each under output_dir/<policy>.
std::vector<RunResult> run_sweep(const ExperimentConfig& cfg);

struct DistillResult {
  int exit_code = kExitOk;
  std::string message;
  double teacher_ce = 0.0;
  double student_ce = 0.0;
  double scratch_ce = 0.0;
};

/// Train a teacher for teacher_steps, then a dense student initialized from
/// its non-expert weights with the mixed loss, and a dense scratch student,
/// each for train.steps. Writes teacher/, student/, scratch/ and
/// distill_summary.csv.
DistillResult run_distill(const ExperimentConfig& cfg);

struct ParallelCheckRow {
  Strategy strategy = Strategy::data;
  int n = 1;
  int m = 1;
  double max_abs_diff = 0.0;
  bool ledger_matches = false;
  bool passed = false;
};

inline constexpr double kParallelTolerance = 1e-6;

/// Sharded vs single-core switch layer on a seeded instance for each
/// strategy, using the config's mesh shape and model dimensions.
std::vector<ParallelCheckRow> parallel_check(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies);

/// Analytic per-core communication of one layer step for the configured mesh.
std::vector<CommCostRow> comm_report(const ExperimentConfig& cfg);

struct GradSuiteEntry {
  std::string name;
  GradReport report;
};

/// Finite-difference checks of the router probability path, dense FFN,
/// switch FFN, switch attention and the distillation loss, in double
/// precision with routing held fixed.
std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed);

// ---- command line -------------------------------------------------------------------------

/// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace switchsim
