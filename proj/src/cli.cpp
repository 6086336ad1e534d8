// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "switchsim/cli.hpp"
#include "switchsim/errors.hpp"

namespace switchsim {

namespace {

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::string seed;
};

void add_config_flags(CLI::App* sub, ConfigFlags& f, bool seed_required) {
  sub->add_option("--config", f.config_path, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", f.sets, "override as key=value (repeatable)");
  auto* seed = sub->add_option("--seed", f.seed, "run seed (same as --run.seed)");
  if (seed_required) seed->required();
  const ExperimentConfig defaults;
  for (const auto& key : config_keys())
    sub->add_option("--" + key, f.values[key], "default: " + get_config_value(defaults, key));
}

ExperimentConfig resolve(const CLI::App* sub, const ConfigFlags& f) {
  Assignments a;
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    a = parse_assignments(ss.str(), f.config_path);
  }
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + s + "'");
    a.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& key : config_keys())
    if (sub->count("--" + key) > 0) a.emplace_back(key, f.values.at(key));
  if (sub->count("--seed") > 0) a.emplace_back("run.seed", f.seed);
  return build_config(a);
}

std::vector<Strategy> parse_strategy_list(const std::string& s) {
  std::vector<Strategy> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_strategy(item));
  if (out.empty()) throw InvalidArgument("--strategies: empty list");
  return out;
}

void print_run(std::ostream& out, const std::string& label, const RunResult& r) {
  out << label << ": steps " << r.steps << ", eval cross_entropy " << r.final_eval.cross_entropy
      << ", neg_log_perplexity " << r.final_eval.neg_log_perplexity << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"switchsim: Switch-layer experiments at toy scale"};
  app.require_subcommand(1);

  ConfigFlags tf, sf, pf, df, cf;
  std::string resume, strategies = "data,expert+data,data+model,expert+model+data", report_path;
  std::string grad_seed = "0";

  auto* train = app.add_subcommand("train", "train one model and write metrics and a checkpoint");
  add_config_flags(train, tf, true);
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "one run per routing policy");
  add_config_flags(sweep, sf, false);

  auto* pcheck = app.add_subcommand("parallel-check", "compare sharded layers with the single-core reference");
  add_config_flags(pcheck, pf, false);
  pcheck->add_option("--strategies", strategies, "comma-separated strategies");

  auto* distill = app.add_subcommand("distill", "teacher, distilled student and scratch student");
  add_config_flags(distill, df, false);

  auto* comm = app.add_subcommand("comm-report", "analytic per-core communication volumes");
  add_config_flags(comm, cf, false);
  comm->add_option("--out", report_path, "write the CSV here instead of stdout");

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient suite");
  grad->add_option("--seed", grad_seed, "instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (train->parsed()) {
      ExperimentConfig cfg = resolve(train, tf);
      std::optional<Checkpoint> ck;
      if (!resume.empty()) ck = load_checkpoint(resume);
      const RunResult r = run_experiment(cfg, ck ? &*ck : nullptr);
      if (r.exit_code != kExitOk) {
        err << "error: " << r.message << '\n';
        return r.exit_code;
      }
      print_run(out, cfg.name, r);
      out << "artifacts in " << cfg.output_dir << '\n';
      return kExitOk;
    }
    if (sweep->parsed()) {
      const ExperimentConfig cfg = resolve(sweep, sf);
      int code = kExitOk;
      const auto results = run_sweep(cfg);
      const char* names[] = {"argmax", "sample_softmax", "input_dropout", "input_jitter"};
      for (std::size_t i = 0; i < results.size(); ++i) {
        if (results[i].exit_code != kExitOk) {
          err << names[i] << ": " << results[i].message << '\n';
          code = std::max(code, results[i].exit_code);
        } else {
          print_run(out, names[i], results[i]);
        }
      }
      return code;
    }
    if (pcheck->parsed()) {
      const ExperimentConfig cfg = resolve(pcheck, pf);
      bool ok = true;
      for (const auto& r : parallel_check(cfg, parse_strategy_list(strategies))) {
        out << to_string(r.strategy) << " n=" << r.n << " m=" << r.m << " max|sharded-reference|=" << r.max_abs_diff
            << " ledger=" << (r.ledger_matches ? "match" : "MISMATCH") << ' ' << (r.passed ? "PASS" : "FAIL") << '\n';
        ok = ok && r.passed;
      }
      return ok ? kExitOk : kExitCheckFailed;
    }
    if (distill->parsed()) {
      const ExperimentConfig cfg = resolve(distill, df);
      const DistillResult r = run_distill(cfg);
      if (r.exit_code != kExitOk) {
        err << "error: " << r.message << '\n';
        return r.exit_code;
      }
      out << "teacher eval cross_entropy " << r.teacher_ce << "\nstudent eval cross_entropy " << r.student_ce
          << "\nscratch eval cross_entropy " << r.scratch_ce << '\n';
      return kExitOk;
    }
    if (comm->parsed()) {
      const ExperimentConfig cfg = resolve(comm, cf);
      const auto rows = comm_report(cfg);
      if (report_path.empty()) {
        write_comm_csv(out, rows);
      } else {
        std::ofstream f(report_path, std::ios::binary | std::ios::trunc);
        if (!f) throw InvalidArgument("cannot write '" + report_path + "'");
        write_comm_csv(f, rows);
      }
      return kExitOk;
    }
    if (grad->parsed()) {
      ExperimentConfig scratch;
      set_config_value(scratch, "run.seed", grad_seed);
      bool ok = true;
      for (const auto& e : run_grad_suite(scratch.seed)) {
        out << e.name << " max_rel_error=" << e.report.max_rel_error() << ' ' << (e.report.passed ? "PASS" : "FAIL")
            << '\n';
        if (!e.report.passed) err << e.report.summary() << '\n';
        ok = ok && e.report.passed;
      }
      return ok ? kExitOk : kExitCheckFailed;
    }
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const UnsupportedVersion& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const CorruptionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  }
  return kExitInvalid;
}

}  // namespace switchsim
