// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <sstream>

#include "switchsim/bf16.hpp"
#include "switchsim/cli.hpp"
#include "switchsim/errors.hpp"
#include "switchsim/layers.hpp"
#include "switchsim/router.hpp"
#include "switchsim/trainer.hpp"

namespace py = pybind11;
namespace ss = switchsim;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ArrayD = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
ss::TensorT<T> to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  ss::Shape shape(a.shape(), a.shape() + a.ndim());
  return ss::TensorT<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const ss::TensorT<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.storage().begin(), t.storage().end(), out.mutable_data());
  return out;
}

ss::ExperimentConfig config_from(const std::map<std::string, std::string>& values) {
  ss::Assignments a(values.begin(), values.end());
  return ss::build_config(a);
}

std::map<std::string, std::string> config_to(const ss::ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& k : ss::config_keys()) out[k] = ss::get_config_value(cfg, k);
  return out;
}

py::dict eval_dict(const ss::EvalResult& e) {
  py::dict d;
  d["cross_entropy"] = e.cross_entropy;
  d["neg_log_perplexity"] = e.neg_log_perplexity;
  d["aux_loss"] = e.aux_loss;
  d["dropped_fraction"] = e.dropped_fraction;
  d["f"] = e.f;
  return d;
}

py::dict metric_dict(const ss::MetricRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["loss"] = r.loss;
  d["cross_entropy"] = r.cross_entropy;
  d["aux_loss"] = r.aux_loss;
  d["neg_log_perplexity"] = r.neg_log_perplexity;
  d["dropped_fraction"] = r.dropped_fraction;
  d["f"] = r.f;
  return d;
}

py::dict run_dict(const ss::RunResult& r) {
  py::dict d;
  d["exit_code"] = r.exit_code;
  d["message"] = r.message;
  d["steps"] = r.steps;
  d["final_eval"] = eval_dict(r.final_eval);
  d["artifacts"] = r.artifacts;
  return d;
}

}  // namespace

PYBIND11_MODULE(_switchsim, m) {
  m.doc() = "Switch-layer routing, layers and toy training";

  py::register_exception<ss::InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<ss::NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ss::UnsupportedVersion>(m, "UnsupportedVersion", PyExc_ValueError);
  py::register_exception<ss::CorruptionError>(m, "CorruptionError", PyExc_ValueError);

  py::class_<ss::RouterConfig>(m, "RouterConfig")
      .def(py::init<>())
      .def_readwrite("num_experts", &ss::RouterConfig::num_experts)
      .def_readwrite("capacity_factor", &ss::RouterConfig::capacity_factor)
      .def_readwrite("alpha", &ss::RouterConfig::alpha)
      .def_readwrite("ntlb_stages", &ss::RouterConfig::ntlb_stages)
      .def_readwrite("selective_precision", &ss::RouterConfig::selective_precision)
      .def_readwrite("routing_groups", &ss::RouterConfig::routing_groups)
      .def_property(
          "policy", [](const ss::RouterConfig& c) { return ss::to_string(c.policy.kind); },
          [](ss::RouterConfig& c, const std::string& s) { c.policy.kind = ss::parse_policy(s); })
      .def_property(
          "dropout_rate", [](const ss::RouterConfig& c) { return c.policy.dropout_rate; },
          [](ss::RouterConfig& c, double v) { c.policy.dropout_rate = v; })
      .def_property(
          "jitter_eps", [](const ss::RouterConfig& c) { return c.policy.jitter_eps; },
          [](ss::RouterConfig& c, double v) { c.policy.jitter_eps = v; })
      .def_property(
          "jitter_mode", [](const ss::RouterConfig& c) { return ss::to_string(c.policy.jitter_mode); },
          [](ss::RouterConfig& c, const std::string& s) { c.policy.jitter_mode = ss::parse_jitter_mode(s); })
      .def("validate", &ss::RouterConfig::validate);

  m.def("expert_capacity", &ss::expert_capacity, py::arg("tokens"), py::arg("num_experts"),
        py::arg("capacity_factor"));

  m.def(
      "load_balance_loss",
      [](const ArrayD& probs, const ArrayD& mask, double alpha, int groups) {
        const auto r = ss::load_balance_loss(to_tensor(probs), to_tensor(mask), alpha, groups);
        py::dict d;
        d["loss"] = r.loss;
        d["f"] = r.f;
        d["P"] = r.P;
        d["grad_probs"] = to_array(r.grad_probs);
        return d;
      },
      py::arg("router_probs"), py::arg("expert_mask"), py::arg("alpha"), py::arg("groups") = 1);

  m.def(
      "route",
      [](const Array& x, const Array& w, const ss::RouterConfig& cfg, std::uint64_t seed, bool train) {
        const auto r = ss::route(to_tensor(x), to_tensor(w), cfg, ss::RngStream(seed),
                                 train ? ss::Mode::train : ss::Mode::eval);
        const auto& p = r.plan;
        py::dict d;
        d["expert_index"] = p.expert_index;
        d["gate"] = p.gate;
        d["position_in_expert"] = p.position_in_expert;
        d["dropped"] = std::vector<bool>(p.dropped.begin(), p.dropped.end());
        d["expert_capacity"] = p.expert_capacity;
        d["router_probs"] = to_array(p.router_probs);
        d["dropped_fraction"] = p.dropped_fraction();
        d["f"] = r.stats.f;
        d["P"] = r.stats.P;
        d["aux_loss"] = r.stats.aux_loss;
        d["warnings"] = p.warnings;
        return d;
      },
      py::arg("x"), py::arg("router_weights"), py::arg("config"), py::arg("seed") = 0, py::arg("train") = true);

  py::class_<ss::SwitchLayerParams<float>>(m, "SwitchParams")
      .def_property(
          "router", [](const ss::SwitchLayerParams<float>& p) { return to_array(p.router); },
          [](ss::SwitchLayerParams<float>& p, const Array& a) { p.router = to_tensor(a); })
      .def_property_readonly("num_experts", &ss::SwitchLayerParams<float>::num_experts)
      .def("expert", [](const ss::SwitchLayerParams<float>& p, int i) {
        const auto& e = p.experts.at(static_cast<std::size_t>(i));
        return py::make_tuple(to_array(e.w_in), to_array(e.w_out));
      })
      .def("set_expert",
           [](ss::SwitchLayerParams<float>& p, int i, const Array& w_in, const Array& w_out) {
             p.experts.at(static_cast<std::size_t>(i)) = {to_tensor(w_in), to_tensor(w_out)};
           })
      .def_readwrite("dropout_rate", &ss::SwitchLayerParams<float>::dropout_rate)
      .def_readwrite("expert_dropout_rate", &ss::SwitchLayerParams<float>::expert_dropout_rate);

  m.def(
      "init_switch_params",
      [](std::int64_t d_model, std::int64_t d_ff, int num_experts, double scale, std::uint64_t seed) {
        ss::RngStream rng(seed);
        return ss::init_switch_params(d_model, d_ff, num_experts, scale, rng);
      },
      py::arg("d_model"), py::arg("d_ff"), py::arg("num_experts"), py::arg("scale") = 0.1, py::arg("seed") = 0);

  m.def(
      "switch_ffn",
      [](const Array& x, const ss::SwitchLayerParams<float>& params, const ss::RouterConfig& cfg, std::uint64_t seed,
         bool train) {
        const auto out =
            ss::switch_ffn(to_tensor(x), params, cfg, ss::RngStream(seed), train ? ss::Mode::train : ss::Mode::eval);
        py::dict d;
        d["y"] = to_array(out.y);
        d["aux_loss"] = out.aux_loss;
        d["dropped_fraction"] = out.dropped_fraction;
        d["f"] = out.stats.f;
        return d;
      },
      py::arg("x"), py::arg("params"), py::arg("config"), py::arg("seed") = 0, py::arg("train") = true);

  m.def(
      "moe_topk_ffn",
      [](const Array& x, const ss::SwitchLayerParams<float>& params, int k, const ss::RouterConfig& cfg,
         std::uint64_t seed, bool train, bool renormalize) {
        const auto out = ss::moe_topk_ffn(to_tensor(x), params, k, cfg, ss::RngStream(seed),
                                          train ? ss::Mode::train : ss::Mode::eval, renormalize);
        py::dict d;
        d["y"] = to_array(out.y);
        d["aux_loss"] = out.aux_loss;
        d["dropped_fraction"] = out.dropped_fraction;
        return d;
      },
      py::arg("x"), py::arg("params"), py::arg("k"), py::arg("config"), py::arg("seed") = 0, py::arg("train") = true,
      py::arg("renormalize") = false);

  m.def(
      "bf16_round",
      [](const Array& a) {
        py::array_t<float> out(std::vector<py::ssize_t>(a.shape(), a.shape() + a.ndim()));
        for (py::ssize_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = ss::bf16::round(a.data()[i]);
        return out;
      },
      py::arg("values"));

  // configuration as {dotted key: text value}
  m.def("config_keys", &ss::config_keys);
  m.def("default_config", [] { return config_to(ss::ExperimentConfig{}); });
  m.def("build_config", [](const std::map<std::string, std::string>& v) { return config_to(config_from(v)); },
        py::arg("values"));
  m.def("parse_config", [](const std::string& text) { return config_to(ss::parse_config_text(text)); },
        py::arg("text"));
  m.def("serialize_config", [](const std::map<std::string, std::string>& v) {
    return ss::serialize_config(config_from(v));
  });

  py::class_<ss::Trainer>(m, "Trainer")
      .def(py::init([](const std::map<std::string, std::string>& v) {
             const auto cfg = config_from(v);
             return std::make_unique<ss::Trainer>(cfg.model, cfg.resolved_router(), cfg.train, cfg.seed);
           }),
           py::arg("config"))
      .def("step", [](ss::Trainer& t) { return metric_dict(t.step()); })
      .def("run",
           [](ss::Trainer& t, int steps) {
             py::list rows;
             for (const auto& r : t.run(steps)) rows.append(metric_dict(r));
             return rows;
           },
           py::arg("steps"))
      .def("evaluate", [](const ss::Trainer& t) { return eval_dict(t.evaluate()); })
      .def_property_readonly("current_step", &ss::Trainer::current_step)
      .def("parameters", [](const ss::Trainer& t) {
        py::dict d;
        for (const auto& [name, p] : t.model().named_params()) d[py::str(name)] = to_array(*p);
        return d;
      });

  m.def(
      "run_experiment",
      [](const std::map<std::string, std::string>& v, const std::string& resume) {
        const auto cfg = config_from(v);
        if (resume.empty()) return run_dict(ss::run_experiment(cfg));
        const auto ck = ss::load_checkpoint(resume);
        return run_dict(ss::run_experiment(cfg, &ck));
      },
      py::arg("config"), py::arg("resume") = "");

  m.def(
      "run_distill",
      [](const std::map<std::string, std::string>& v) {
        const auto r = ss::run_distill(config_from(v));
        py::dict d;
        d["exit_code"] = r.exit_code;
        d["message"] = r.message;
        d["teacher_ce"] = r.teacher_ce;
        d["student_ce"] = r.student_ce;
        d["scratch_ce"] = r.scratch_ce;
        return d;
      },
      py::arg("config"));

  m.def(
      "comm_report",
      [](const std::map<std::string, std::string>& v) {
        std::ostringstream os;
        ss::write_comm_csv(os, ss::comm_report(config_from(v)));
        return os.str();
      },
      py::arg("config"));

  m.def(
      "parallel_check",
      [](const std::map<std::string, std::string>& v, const std::vector<std::string>& strategies) {
        std::vector<ss::Strategy> s;
        for (const auto& name : strategies) s.push_back(ss::parse_strategy(name));
        py::list rows;
        for (const auto& r : ss::parallel_check(config_from(v), s)) {
          py::dict d;
          d["strategy"] = ss::to_string(r.strategy);
          d["n"] = r.n;
          d["m"] = r.m;
          d["max_abs_diff"] = r.max_abs_diff;
          d["ledger_matches"] = r.ledger_matches;
          d["passed"] = r.passed;
          rows.append(d);
        }
        return rows;
      },
      py::arg("config"), py::arg("strategies"));

  m.def(
      "grad_check",
      [](std::uint64_t seed) {
        py::list rows;
        for (const auto& e : ss::run_grad_suite(seed)) {
          py::dict d;
          d["name"] = e.name;
          d["max_rel_error"] = e.report.max_rel_error();
          d["passed"] = e.report.passed;
          rows.append(d);
        }
        return rows;
      },
      py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"switchsim"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = ss::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
