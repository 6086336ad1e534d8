// SPDX-License-Identifier: Apache-2.0
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "switchsim/cli.hpp"
#include "switchsim/errors.hpp"

namespace switchsim {

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const std::string& expected) {
  throw InvalidArgument("config key '" + std::string(key) + "': expected " + expected + ", got '" + std::string(value) +
                        "'");
}

long long to_int(std::string_view key, std::string_view v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return out;
}

int to_i32(std::string_view key, std::string_view v) {
  const long long x = to_int(key, v);
  if (x < INT32_MIN || x > INT32_MAX) bad_value(key, v, "a 32-bit integer");
  return static_cast<int>(x);
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "an unsigned integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE) bad_value(key, v, "a number");
  return x;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

template <typename F>
auto to_enum(std::string_view key, std::string_view v, F parse) {
  try {
    return parse(v);
  } catch (const InvalidArgument& e) {
    throw InvalidArgument("config key '" + std::string(key) + "': " + e.what());
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt(bool v) { return v ? "true" : "false"; }
std::string fmt(int v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

#define SW_FIELD(KEY, MEMBER, CONV)                                                        \
  Field {                                                                                  \
    KEY, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                          \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = CONV(KEY, v); }           \
  }

#define SW_ENUM(KEY, MEMBER, PARSE)                                                       \
  Field {                                                                                 \
    KEY, [](const ExperimentConfig& c) { return to_string(c.MEMBER); },                   \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_enum(KEY, v, PARSE); } \
  }

#define SW_TEXT(KEY, MEMBER)                                                                          \
  Field {                                                                                             \
    KEY, [](const ExperimentConfig& c) { return c.MEMBER; },                                          \
        [](ExperimentConfig& c, std::string_view v) {                                                 \
          if (v.empty()) throw InvalidArgument("config key '" KEY "': must not be empty");            \
          c.MEMBER = std::string(v);                                                                  \
        }                                                                                             \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      SW_TEXT("run.name", name),
      SW_TEXT("run.output_dir", output_dir),
      SW_FIELD("run.seed", seed, to_u64),
      SW_FIELD("run.checkpoint_every", checkpoint_every, to_i32),

      SW_FIELD("model.vocab", model.vocab, to_i32),
      SW_FIELD("model.d_model", model.d_model, to_i32),
      SW_FIELD("model.d_ff", model.d_ff, to_i32),
      SW_FIELD("model.layers", model.layers, to_i32),
      SW_FIELD("model.heads", model.heads, to_i32),
      SW_FIELD("model.seq_len", model.seq_len, to_i32),
      SW_ENUM("model.ffn", model.ffn, parse_ffn_kind),
      SW_ENUM("model.attention", model.attention, parse_attention_kind),
      SW_ENUM("model.attention_expert_form", model.attention_expert_form, parse_expert_form),
      SW_FIELD("model.attention_route_kv", model.attention_route_kv, to_bool),
      SW_FIELD("model.expert_every", model.expert_every, to_i32),
      SW_FIELD("model.num_experts", model.num_experts, to_i32),
      SW_FIELD("model.top_k", model.top_k, to_i32),
      SW_FIELD("model.topk_renormalize", model.topk_renormalize, to_bool),
      SW_FIELD("model.init_scale", model.init_scale, to_double),
      SW_FIELD("model.dropout", model.dropout, to_double),
      SW_FIELD("model.expert_dropout", model.expert_dropout, to_double),
      SW_FIELD("model.tie_embeddings", model.tie_embeddings, to_bool),

      SW_FIELD("router.capacity_factor", router.capacity_factor, to_double),
      SW_FIELD("router.alpha", router.alpha, to_double),
      SW_ENUM("router.policy", router.policy.kind, parse_policy),
      SW_FIELD("router.dropout_rate", router.policy.dropout_rate, to_double),
      SW_FIELD("router.jitter_eps", router.policy.jitter_eps, to_double),
      SW_ENUM("router.jitter_mode", router.policy.jitter_mode, parse_jitter_mode),
      SW_FIELD("router.ntlb_stages", router.ntlb_stages, to_i32),
      SW_FIELD("router.selective_precision", router.selective_precision, to_bool),
      SW_FIELD("router.routing_groups", router.routing_groups, to_i32),

      SW_ENUM("train.mode", train.mode, parse_train_mode),
      SW_FIELD("train.steps", train.steps, to_i32),
      SW_FIELD("train.batch", train.batch_sequences, to_i32),
      SW_FIELD("train.lr", train.lr, to_double),
      SW_FIELD("train.beta1", train.beta1, to_double),
      SW_FIELD("train.beta2", train.beta2, to_double),
      SW_FIELD("train.adam_eps", train.adam_eps, to_double),
      SW_FIELD("train.mask_rate", train.mask_rate, to_double),
      SW_FIELD("train.sentinel", train.sentinel, to_i32),
      SW_FIELD("train.clusters", train.clusters, to_i32),
      SW_FIELD("train.disjoint_clusters", train.disjoint_clusters, to_bool),
      SW_FIELD("train.eval_sequences", train.eval_sequences, to_i32),
      SW_FIELD("train.eval_every", train.eval_every, to_i32),
      SW_FIELD("train.hard_weight", train.hard_weight, to_double),

      SW_FIELD("distill.teacher_steps", teacher_steps, to_i32),

      SW_FIELD("parallel.enabled", parallel.enabled, to_bool),
      SW_FIELD("parallel.n", parallel.n, to_i32),
      SW_FIELD("parallel.m", parallel.m, to_i32),
      SW_ENUM("parallel.strategy", parallel.strategy, parse_strategy),
      SW_FIELD("parallel.tokens", parallel.tokens, to_i32),
  };
  return f;
}

#undef SW_FIELD
#undef SW_ENUM
#undef SW_TEXT

const Field& find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  std::string valid;
  for (const auto& f : fields()) valid += (valid.empty() ? "" : ", ") + f.key;
  throw InvalidArgument("unknown config key '" + std::string(key) + "'; valid keys: " + valid);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RouterConfig ExperimentConfig::resolved_router() const {
  RouterConfig r = router;
  r.num_experts = model.num_experts;
  return r;
}

void ExperimentConfig::validate() const {
  model.validate();
  resolved_router().validate();
  train.validate(model.vocab);
  if (checkpoint_every < 0) throw InvalidArgument("run.checkpoint_every: must be >= 0");
  if (teacher_steps < 0) throw InvalidArgument("distill.teacher_steps: must be >= 0");
  if (parallel.n < 1) throw InvalidArgument("parallel.n: must be >= 1");
  if (parallel.m < 1) throw InvalidArgument("parallel.m: must be >= 1");
  if (parallel.tokens < 1 || parallel.tokens % parallel.n != 0)
    throw InvalidArgument("parallel.tokens: must be a positive multiple of parallel.n");
  if (parallel.enabled) {
    if (model.d_ff % parallel.m != 0) throw InvalidArgument("parallel.m: must divide model.d_ff");
    try {
      make_mesh(parallel.n, parallel.m, parallel.strategy, model.num_experts, true);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(std::string("parallel.strategy: ") + e.what());
    }
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_field(key).set(cfg, trim(value));
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) { return find_field(key).get(cfg); }

Assignments parse_assignments(std::string_view text, std::string_view origin) {
  Assignments out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw InvalidArgument(std::string(origin) + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    find_field(key);
    out.emplace_back(key, std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

ExperimentConfig build_config(const Assignments& assignments) {
  ExperimentConfig cfg;
  std::set<std::string> assigned;
  for (const auto& [k, v] : assignments) {
    set_config_value(cfg, k, v);
    assigned.insert(k);
  }
  if (cfg.train.mode == TrainMode::finetune && !assigned.count("model.expert_dropout")) cfg.model.expert_dropout = 0.4;
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_text(std::string_view text) { return build_config(parse_assignments(text)); }

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return build_config(parse_assignments(ss.str(), path));
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace switchsim
