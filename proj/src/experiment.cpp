// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "switchsim/cli.hpp"
#include "switchsim/errors.hpp"
#include "switchsim/ops.hpp"

namespace switchsim {

namespace fs = std::filesystem;

namespace {

std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write '" + p.string() + "'");
  return out;
}

void write_eval_row(std::ostream& os, int step, const EvalResult& e, int num_experts) {
  os << kEvalSchemaVersion << ',' << step << ',' << g9(e.cross_entropy) << ',' << g9(e.neg_log_perplexity) << ','
     << g9(e.aux_loss) << ',' << g9(e.dropped_fraction);
  for (int i = 0; i < num_experts; ++i)
    os << ',' << g9(static_cast<std::size_t>(i) < e.f.size() ? e.f[static_cast<std::size_t>(i)] : 0.0);
  os << '\n';
}

/// Steps `trainer` up to `steps`, streaming metrics and evaluations into
/// `dir`. Returns false after a numeric error (diagnostics written).
bool train_loop(const ExperimentConfig& cfg, Trainer& trainer, int steps, const fs::path& dir, RunResult& res) {
  fs::create_directories(dir);
  const int N = cfg.model.num_experts;
  {
    auto c = open_out(dir / "config.txt");
    c << serialize_config(cfg);
  }
  auto metrics = open_out(dir / "metrics.csv");
  auto evals = open_out(dir / "eval.csv");
  metrics << metrics_csv_header(N) << '\n';
  evals << eval_csv_header(N) << '\n';
  res.artifacts.push_back((dir / "config.txt").string());
  res.artifacts.push_back((dir / "metrics.csv").string());
  res.artifacts.push_back((dir / "eval.csv").string());
  int last_eval = -1;
  while (trainer.current_step() < steps) {
    MetricRow row;
    try {
      row = trainer.step();
    } catch (const NumericError& e) {
      metrics.flush();
      auto dump = open_out(dir / "numeric_error.txt");
      dump << "error: " << e.what() << '\n' << "step: " << trainer.current_step() + 1 << '\n' << "seed: " << cfg.seed << '\n'
           << "config:\n"
           << serialize_config(cfg);
      save_checkpoint(make_checkpoint(cfg, trainer), (dir / "numeric_error_checkpoint.bin").string());
      res.artifacts.push_back((dir / "numeric_error.txt").string());
      res.artifacts.push_back((dir / "numeric_error_checkpoint.bin").string());
      res.exit_code = kExitNumeric;
      res.message = e.what();
      res.steps = trainer.current_step();
      return false;
    }
    write_metric_row(metrics, row, N);
    const int s = trainer.current_step();
    if (cfg.train.eval_every > 0 && s % cfg.train.eval_every == 0) {
      write_eval_row(evals, s, trainer.evaluate(), N);
      last_eval = s;
    }
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 && s < steps) {
      const auto p = dir / ("checkpoint_" + std::to_string(s) + ".bin");
      save_checkpoint(make_checkpoint(cfg, trainer), p.string());
      res.artifacts.push_back(p.string());
    }
  }
  res.final_eval = trainer.evaluate();
  if (last_eval != trainer.current_step()) write_eval_row(evals, trainer.current_step(), res.final_eval, N);
  save_checkpoint(make_checkpoint(cfg, trainer), (dir / "checkpoint.bin").string());
  res.artifacts.push_back((dir / "checkpoint.bin").string());
  res.steps = trainer.current_step();
  return true;
}

struct ParallelInstance {
  MeshLayout mesh;
  SwitchLayerParams<float> params;
  Tensor x, dy;
  RouterConfig router;
  int capacity = 1;
};

ParallelInstance parallel_instance(const ExperimentConfig& cfg, Strategy strategy, const SwitchLayerParams<float>* trained) {
  ParallelInstance in;
  int n = cfg.parallel.n, m = cfg.parallel.m;
  if (strategy == Strategy::data || strategy == Strategy::expert_data) m = 1;
  if (strategy == Strategy::model) n = 1;
  const int E = cfg.model.num_experts;
  in.mesh = make_mesh(n, m, strategy, E, true);
  const RngStream rng = RngStream(cfg.seed).derive("parallel");
  if (trained) {
    in.params = *trained;
  } else {
    RngStream pr = rng.derive("params");
    in.params = init_switch_params(cfg.model.d_model, cfg.model.d_ff, E, 1.0, pr);
    in.params.dropout_rate = cfg.model.dropout;
    in.params.expert_dropout_rate = cfg.model.expert_dropout;
  }
  const Shape shape{cfg.parallel.tokens, cfg.model.d_model};
  in.x = Tensor(shape);
  in.dy = Tensor(shape);
  const RngStream xr = rng.derive("x"), yr = rng.derive("dy");
  for (std::size_t i = 0; i < in.x.size(); ++i) {
    in.x[i] = static_cast<float>(2.0 * (2.0 * xr.uniform_at(i) - 1.0));
    in.dy[i] = static_cast<float>(2.0 * yr.uniform_at(i) - 1.0);
  }
  in.router = cfg.resolved_router();
  in.capacity = expert_capacity(cfg.parallel.tokens / n, E, in.router.capacity_factor);
  return in;
}

ParallelCheckRow check_instance(const ExperimentConfig& cfg, const ParallelInstance& in) {
  const RngStream rng = RngStream(cfg.seed).derive("parallel").derive("run");
  const auto run = run_sharded_switch_layer(in.x, in.params, in.mesh, in.router, rng, Mode::train, &in.dy);
  const auto ref = switch_ffn_forward(in.x, in.params, reference_config(in.mesh, in.router), rng, Mode::train);
  const auto report = comm_cost_report(in.mesh, cfg.parallel.tokens, cfg.model.d_model, cfg.model.d_ff,
                                       cfg.model.num_experts, in.capacity,
                                       in.router.selective_precision ? Precision::bf16 : Precision::full);
  ParallelCheckRow row;
  row.strategy = in.mesh.strategy;
  row.n = in.mesh.n;
  row.m = in.mesh.m;
  row.max_abs_diff = max_abs_diff(run.out.y, ref.out.y);
  row.ledger_matches = summarize_ledger(in.mesh, in.capacity, run.ledger) == report;
  row.passed = row.max_abs_diff <= kParallelTolerance && row.ledger_matches;
  return row;
}

void write_parallel_rows(std::ostream& os, const std::vector<ParallelCheckRow>& rows) {
  os << "strategy,n,m,max_abs_diff,ledger_matches,passed\n";
  for (const auto& r : rows)
    os << to_string(r.strategy) << ',' << r.n << ',' << r.m << ',' << g9(r.max_abs_diff) << ','
       << (r.ledger_matches ? "true" : "false") << ',' << (r.passed ? "true" : "false") << '\n';
}

}  // namespace

std::string eval_csv_header(int num_experts) {
  std::string h = "schema_version,step,cross_entropy,neg_log_perplexity,aux_loss,dropped_fraction";
  for (int e = 0; e < num_experts; ++e) h += ",f_" + std::to_string(e);
  return h;
}

RunResult run_experiment(const ExperimentConfig& cfg, const Checkpoint* resume) {
  cfg.validate();
  if (cfg.train.mode == TrainMode::distill)
    throw InvalidArgument("train.mode: distill runs need a teacher; use the distill subcommand");
  Trainer trainer(cfg.model, cfg.resolved_router(), cfg.train, cfg.seed);
  if (resume) {
    if (resume->rng_seed != cfg.seed)
      throw InvalidArgument("run.seed: checkpoint was written with seed " + std::to_string(resume->rng_seed) +
                            ", got " + std::to_string(cfg.seed));
    if (!(resume->config.model == cfg.model))
      throw InvalidArgument("model: configuration differs from the checkpoint");
    trainer.restore(resume->step, resume->model, resume->adam);
  }
  RunResult res;
  const fs::path dir = cfg.output_dir;
  if (!train_loop(cfg, trainer, cfg.train.steps, dir, res)) return res;
  if (cfg.parallel.enabled) {
    const SwitchLayerParams<float>* trained = nullptr;
    for (int b = 0; b < cfg.model.layers; ++b)
      if (trainer.model().expert_ffn_at(b) && cfg.model.ffn == FfnKind::switch_ffn) {
        trained = &trainer.model().blocks[static_cast<std::size_t>(b)].experts;
        break;
      }
    const auto in = parallel_instance(cfg, cfg.parallel.strategy, trained);
    {
      auto out = open_out(dir / "comm_report.csv");
      write_comm_csv(out, comm_report(cfg));
    }
    const auto row = check_instance(cfg, in);
    {
      auto out = open_out(dir / "parallel_check.csv");
      write_parallel_rows(out, {row});
    }
    res.artifacts.push_back((dir / "comm_report.csv").string());
    res.artifacts.push_back((dir / "parallel_check.csv").string());
    if (!row.passed) {
      res.exit_code = kExitCheckFailed;
      res.message = "sharded layer differs from the single-core reference by " + g9(row.max_abs_diff) +
                    (row.ledger_matches ? "" : " and the byte ledger disagrees with the analytic report");
    }
  }
  return res;
}

std::vector<RunResult> run_sweep(const ExperimentConfig& cfg) {
  std::vector<RunResult> out;
  for (PolicyKind p : {PolicyKind::argmax, PolicyKind::sample_softmax, PolicyKind::input_dropout, PolicyKind::input_jitter}) {
    ExperimentConfig c = cfg;
    c.router.policy.kind = p;
    c.name = cfg.name + "-" + to_string(p);
    c.output_dir = (fs::path(cfg.output_dir) / to_string(p)).string();
    out.push_back(run_experiment(c));
  }
  return out;
}

DistillResult run_distill(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  DistillResult out;

  ExperimentConfig tc = cfg;
  tc.train.mode = TrainMode::pretrain;
  tc.train.steps = cfg.teacher_steps;
  tc.output_dir = (dir / "teacher").string();
  Trainer teacher(tc.model, tc.resolved_router(), tc.train, cfg.seed);
  RunResult tr;
  if (!train_loop(tc, teacher, tc.train.steps, tc.output_dir, tr)) {
    out.exit_code = tr.exit_code;
    out.message = "teacher: " + tr.message;
    return out;
  }

  ExperimentConfig sc = cfg;
  sc.model = dense_config(cfg.model);
  sc.train.mode = TrainMode::distill;
  sc.output_dir = (dir / "student").string();
  Trainer student(sc.model, sc.resolved_router(), sc.train, cfg.seed);
  student.model() = init_student_from_teacher(teacher.model(), student.model());
  student.set_teacher(&teacher.model());
  RunResult sr;
  if (!train_loop(sc, student, sc.train.steps, sc.output_dir, sr)) {
    out.exit_code = sr.exit_code;
    out.message = "student: " + sr.message;
    return out;
  }

  ExperimentConfig xc = cfg;
  xc.model = dense_config(cfg.model);
  xc.train.mode = TrainMode::pretrain;
  xc.output_dir = (dir / "scratch").string();
  Trainer scratch(xc.model, xc.resolved_router(), xc.train, cfg.seed);
  RunResult xr;
  if (!train_loop(xc, scratch, xc.train.steps, xc.output_dir, xr)) {
    out.exit_code = xr.exit_code;
    out.message = "scratch: " + xr.message;
    return out;
  }

  out.teacher_ce = tr.final_eval.cross_entropy;
  out.student_ce = sr.final_eval.cross_entropy;
  out.scratch_ce = xr.final_eval.cross_entropy;
  auto sum = open_out(dir / "distill_summary.csv");
  sum << "schema_version,role,steps,eval_cross_entropy,eval_neg_log_perplexity\n";
  sum << "1,teacher," << tr.steps << ',' << g9(tr.final_eval.cross_entropy) << ','
      << g9(tr.final_eval.neg_log_perplexity) << '\n';
  sum << "1,student," << sr.steps << ',' << g9(sr.final_eval.cross_entropy) << ','
      << g9(sr.final_eval.neg_log_perplexity) << '\n';
  sum << "1,scratch," << xr.steps << ',' << g9(xr.final_eval.cross_entropy) << ','
      << g9(xr.final_eval.neg_log_perplexity) << '\n';
  return out;
}

std::vector<ParallelCheckRow> parallel_check(const ExperimentConfig& cfg, const std::vector<Strategy>& strategies) {
  cfg.validate();
  std::vector<ParallelCheckRow> rows;
  for (Strategy s : strategies) rows.push_back(check_instance(cfg, parallel_instance(cfg, s, nullptr)));
  return rows;
}

std::vector<CommCostRow> comm_report(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto mesh = make_mesh(cfg.parallel.n, cfg.parallel.m, cfg.parallel.strategy, cfg.model.num_experts, true);
  const RouterConfig r = cfg.resolved_router();
  const int C = expert_capacity(cfg.parallel.tokens / cfg.parallel.n, cfg.model.num_experts, r.capacity_factor);
  return comm_cost_report(mesh, cfg.parallel.tokens, cfg.model.d_model, cfg.model.d_ff, cfg.model.num_experts, C,
                          r.selective_precision ? Precision::bf16 : Precision::full);
}

}  // namespace switchsim
