// SPDX-License-Identifier: Apache-2.0
#include "switchsim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "switchsim/numerics.hpp"
#include "switchsim/ops.hpp"

namespace switchsim {

// ---- corpus ----------------------------------------------------------------------

BigramTask make_bigram_task(int vocab, int clusters, bool disjoint_ranges, const RngStream& rng) {
  if (vocab < 4) throw InvalidArgument("bigram task: vocab must be >= 4, got " + std::to_string(vocab));
  if (clusters < 1 || clusters > vocab / 4)
    throw InvalidArgument("bigram task: clusters must be in [1, vocab/4], got " + std::to_string(clusters));
  BigramTask task;
  task.vocab = vocab;
  task.clusters = clusters;
  const int emitted = vocab - 1;
  const int width = disjoint_ranges ? emitted / clusters : emitted;
  for (int c = 0; c < clusters; ++c) {
    const int begin = disjoint_ranges ? c * width : 0;
    task.ranges.emplace_back(begin, begin + width);
    RngStream r = rng.derive("cluster").derive(static_cast<std::uint64_t>(c));
    Tensor table({width, width});
    for (int i = 0; i < width; ++i) {
      double sum = 0.0;
      for (int j = 0; j < width; ++j) {
        const double w = std::exp(2.0 * r.normal());
        table.at(i, j) = static_cast<float>(w);
        sum += w;
      }
      for (int j = 0; j < width; ++j) table.at(i, j) = static_cast<float>(table.at(i, j) / sum);
    }
    task.tables.push_back(std::move(table));
  }
  return task;
}

Sequence sample_sequence(const BigramTask& task, int seq_len, const RngStream& rng, std::uint64_t index) {
  RngStream r = rng.derive(index);
  Sequence s;
  s.cluster = static_cast<int>(r.below(static_cast<std::uint64_t>(task.clusters)));
  const auto [begin, end] = task.ranges[static_cast<std::size_t>(s.cluster)];
  const Tensor& table = task.tables[static_cast<std::size_t>(s.cluster)];
  const int width = end - begin;
  int cur = static_cast<int>(r.below(static_cast<std::uint64_t>(width)));
  s.tokens.reserve(static_cast<std::size_t>(seq_len));
  for (int i = 0; i < seq_len; ++i) {
    if (i > 0) {
      const double u = r.uniform();
      double acc = 0.0;
      int next = width - 1;
      for (int j = 0; j < width; ++j) {
        acc += table.at(cur, j);
        if (u < acc) {
          next = j;
          break;
        }
      }
      cur = next;
    }
    s.tokens.push_back(begin + cur);
  }
  return s;
}

Dataset gen_synthetic_corpus(const BigramTask& task, int seq_len, std::int64_t size, const RngStream& rng) {
  if (seq_len < 1) throw InvalidArgument("corpus: seq_len must be >= 1");
  Dataset d;
  d.reserve(static_cast<std::size_t>(std::max<std::int64_t>(size, 0)));
  for (std::int64_t i = 0; i < size; ++i) d.push_back(sample_sequence(task, seq_len, rng, static_cast<std::uint64_t>(i)));
  return d;
}

Dataset gen_synthetic_corpus(int vocab, int clusters, int seq_len, std::int64_t size, const RngStream& rng,
                             bool disjoint_ranges) {
  const BigramTask task = make_bigram_task(vocab, clusters, disjoint_ranges, rng.derive("tables"));
  return gen_synthetic_corpus(task, seq_len, size, rng.derive("sequences"));
}

// ---- masking -----------------------------------------------------------------------

MaskedSequence mask_tokens(const std::vector<int>& seq, double rate, int sentinel, const RngStream& rng) {
  if (seq.empty()) throw InvalidArgument("mask_tokens: empty sequence");
  if (!(rate > 0.0 && rate < 1.0)) throw InvalidArgument("mask_tokens: rate must be in (0,1), got " + std::to_string(rate));
  const auto len = static_cast<int>(seq.size());
  const int count = std::max(1, static_cast<int>(std::floor(rate * len + 1e-9)));
  std::vector<int> order(seq.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream r = rng;
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(r.below(static_cast<std::uint64_t>(len - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskedSequence m;
  m.input = seq;
  m.positions.assign(order.begin(), order.begin() + count);
  std::sort(m.positions.begin(), m.positions.end());
  for (int p : m.positions) {
    m.targets.push_back(seq[static_cast<std::size_t>(p)]);
    m.input[static_cast<std::size_t>(p)] = sentinel;
  }
  return m;
}

// ---- losses --------------------------------------------------------------------------

namespace {

template <typename T>
void check_targets(const TensorT<T>& logits, const std::vector<int>& targets, const char* what) {
  require_rank(logits, 2, what);
  if (static_cast<std::int64_t>(targets.size()) != logits.dim(0))
    throw InvalidArgument(std::string(what) + ": " + std::to_string(targets.size()) + " targets for " +
                          shape_str(logits.shape()) + " logits");
  if (targets.empty()) throw InvalidArgument(std::string(what) + ": no targets");
  for (int t : targets)
    if (t < 0 || t >= logits.dim(1)) throw InvalidArgument(std::string(what) + ": target " + std::to_string(t) + " out of range");
}

}  // namespace

template <typename T>
LossGrad<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets) {
  return distill_loss(logits, logits, targets, 1.0);
}

template <typename T>
double neg_log_perplexity(const TensorT<T>& logits, const std::vector<int>& targets) {
  check_targets(logits, targets, "neg_log_perplexity");
  const TensorT<T> lp = ops::log_softmax_rows(logits);
  double s = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) s += lp.at(static_cast<std::int64_t>(r), targets[r]);
  return s / static_cast<double>(targets.size());
}

template <typename T>
LossGrad<T> distill_loss(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                         const std::vector<int>& targets, double hard_weight) {
  check_targets(student_logits, targets, "distill_loss");
  require_same_shape(student_logits, teacher_logits, "distill_loss");
  if (!(hard_weight >= 0.0 && hard_weight <= 1.0)) throw InvalidArgument("distill_loss: hard_weight must be in [0,1]");
  const std::int64_t rows = student_logits.dim(0), V = student_logits.dim(1);
  const TensorT<T> lp = ops::log_softmax_rows(student_logits);
  const TensorT<T> soft = hard_weight < 1.0 ? ops::softmax(teacher_logits, -1) : TensorT<T>();
  const T hw = static_cast<T>(hard_weight), sw = static_cast<T>(1.0 - hard_weight), inv = T(1) / static_cast<T>(rows);
  LossGrad<T> out;
  out.grad = TensorT<T>(student_logits.shape());
  T total = T(0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    T row = -hw * lp.at(r, tgt);
    for (std::int64_t j = 0; j < V; ++j) {
      T target_mass = j == tgt ? hw : T(0);
      if (sw != T(0)) {
        row -= sw * soft.at(r, j) * lp.at(r, j);
        target_mass += sw * soft.at(r, j);
      }
      out.grad.at(r, j) = (std::exp(lp.at(r, j)) - target_mass) * inv;
    }
    total += row;
  }
  out.loss = total * inv;
  return out;
}

template LossGrad<float> cross_entropy(const Tensor&, const std::vector<int>&);
template LossGrad<double> cross_entropy(const TensorD&, const std::vector<int>&);
template double neg_log_perplexity(const Tensor&, const std::vector<int>&);
template double neg_log_perplexity(const TensorD&, const std::vector<int>&);
template LossGrad<float> distill_loss(const Tensor&, const Tensor&, const std::vector<int>&, double);
template LossGrad<double> distill_loss(const TensorD&, const TensorD&, const std::vector<int>&, double);

// ---- enums ------------------------------------------------------------------------------

std::string to_string(FfnKind k) {
  switch (k) {
    case FfnKind::dense: return "dense";
    case FfnKind::switch_ffn: return "switch";
    case FfnKind::topk: return "topk";
  }
  return "?";
}

FfnKind parse_ffn_kind(std::string_view s) {
  if (s == "dense") return FfnKind::dense;
  if (s == "switch") return FfnKind::switch_ffn;
  if (s == "topk" || s == "moe") return FfnKind::topk;
  throw InvalidArgument("unknown ffn kind '" + std::string(s) + "' (valid: dense, switch, topk)");
}

std::string to_string(AttentionKind k) { return k == AttentionKind::dense ? "dense" : "switch"; }

AttentionKind parse_attention_kind(std::string_view s) {
  if (s == "dense") return AttentionKind::dense;
  if (s == "switch") return AttentionKind::switch_attention;
  throw InvalidArgument("unknown attention kind '" + std::string(s) + "' (valid: dense, switch)");
}

std::string to_string(ExpertForm f) { return f == ExpertForm::ffn ? "ffn" : "linear"; }

ExpertForm parse_expert_form(std::string_view s) {
  if (s == "ffn") return ExpertForm::ffn;
  if (s == "linear") return ExpertForm::linear;
  throw InvalidArgument("unknown expert form '" + std::string(s) + "' (valid: linear, ffn)");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::pretrain: return "pretrain";
    case TrainMode::finetune: return "finetune";
    case TrainMode::distill: return "distill";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view s) {
  if (s == "pretrain") return TrainMode::pretrain;
  if (s == "finetune") return TrainMode::finetune;
  if (s == "distill") return TrainMode::distill;
  throw InvalidArgument("unknown train mode '" + std::string(s) + "' (valid: pretrain, finetune, distill)");
}

// ---- model --------------------------------------------------------------------------------

int ModelConfig::num_routed_layers() const noexcept {
  int n = 0;
  for (int b = 0; b < layers; ++b)
    if (expert_block(b))
      n += (ffn != FfnKind::dense) + (attention == AttentionKind::switch_attention) * (attention_route_kv ? 3 : 1);
  return n;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw InvalidArgument("model." + field + ": " + why);
  };
  need(vocab >= 4, "vocab", "must be >= 4");
  need(d_model >= 1, "d_model", "must be >= 1");
  need(d_ff >= 1, "d_ff", "must be >= 1");
  need(layers >= 1, "layers", "must be >= 1");
  need(heads >= 1 && d_model % heads == 0, "heads", "must divide d_model");
  need(seq_len >= 1, "seq_len", "must be >= 1");
  need(expert_every >= 0, "expert_every", "must be >= 0");
  need(num_experts >= 1, "num_experts", "must be >= 1");
  need(ffn != FfnKind::topk || (top_k >= 1 && top_k <= num_experts), "top_k", "must be in [1, num_experts]");
  need(!attention_route_kv || attention == AttentionKind::switch_attention, "attention_route_kv",
       "needs attention = switch");
  need(init_scale > 0.0, "init_scale", "must be > 0");
  need(dropout >= 0.0 && dropout < 1.0, "dropout", "must be in [0,1)");
  need(expert_dropout >= 0.0 && expert_dropout < 1.0, "expert_dropout", "must be in [0,1)");
}

std::vector<std::pair<std::string, Tensor*>> ToyModel::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add = [&](std::string name, Tensor& t) {
    if (!t.empty()) out.emplace_back(std::move(name), &t);
  };
  add("embedding", embedding);
  add("position", position);
  add("output", output);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& bl = blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    add(p + "attn.w_q", bl.attn.w_q);
    add(p + "attn.w_k", bl.attn.w_k);
    add(p + "attn.w_v", bl.attn.w_v);
    add(p + "attn.w_o", bl.attn.w_o);
    for (auto [label, sp] : {std::pair{"query", &bl.query}, std::pair{"key", &bl.key}, std::pair{"value", &bl.value}}) {
      add(p + label + ".router", sp->router);
      for (std::size_t e = 0; e < sp->experts.size(); ++e) {
        add(p + label + ".expert" + std::to_string(e) + ".w_in", sp->experts[e].w_in);
        add(p + label + ".expert" + std::to_string(e) + ".w_out", sp->experts[e].w_out);
      }
    }
    add(p + "ffn.w_in", bl.w_in);
    add(p + "ffn.w_out", bl.w_out);
    add(p + "moe.router", bl.experts.router);
    for (std::size_t e = 0; e < bl.experts.experts.size(); ++e) {
      add(p + "moe.expert" + std::to_string(e) + ".w_in", bl.experts.experts[e].w_in);
      add(p + "moe.expert" + std::to_string(e) + ".w_out", bl.experts.experts[e].w_out);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ToyModel::named_params() const {
  auto mut = const_cast<ToyModel*>(this)->named_params();
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
  return out;
}

ToyModel ToyModel::zeros_like() const {
  ToyModel z = *this;
  for (auto& [name, t] : z.named_params()) *t = Tensor(t->shape());
  return z;
}

ToyModel init_model(const ModelConfig& cfg, const RngStream& rng) {
  cfg.validate();
  const double s = cfg.init_scale;
  const std::int64_t d = cfg.d_model;
  ToyModel m;
  m.config = cfg;
  RngStream re = rng.derive("embedding");
  m.embedding = trunc_normal_init({cfg.vocab, d}, s, d, re);
  RngStream rp = rng.derive("position");
  m.position = trunc_normal_init({cfg.seq_len, d}, s, d, rp);
  if (!cfg.tie_embeddings) {
    RngStream ro = rng.derive("output");
    m.output = trunc_normal_init({d, cfg.vocab}, s, d, ro);
  }
  for (int b = 0; b < cfg.layers; ++b) {
    const RngStream rb = rng.derive("block").derive(static_cast<std::uint64_t>(b));
    Block bl;
    RngStream ra = rb.derive("attention");
    bl.attn = init_attention_weights(d, s, ra);
    if (m.switch_attention_at(b)) {
      bl.attn.w_q = Tensor();
      const auto routed = [&](const char* label) {
        RngStream r = rb.derive(label);
        auto sp = init_switch_params(d, cfg.d_ff, cfg.num_experts, s, r, cfg.attention_expert_form);
        sp.dropout_rate = cfg.dropout;
        sp.expert_dropout_rate = 0.0;
        return sp;
      };
      bl.query = routed("query");
      if (cfg.attention_route_kv) {
        bl.attn.w_k = Tensor();
        bl.attn.w_v = Tensor();
        bl.key = routed("key");
        bl.value = routed("value");
      }
    }
    // A dense FFN draws the same weights as expert 0 would at this block.
    RngStream rf = rb.derive("ffn");
    if (m.expert_ffn_at(b)) {
      bl.experts = init_switch_params(d, cfg.d_ff, cfg.num_experts, s, rf);
      bl.experts.dropout_rate = cfg.dropout;
      bl.experts.expert_dropout_rate = cfg.expert_dropout;
    } else {
      auto one = init_switch_params(d, cfg.d_ff, 1, s, rf);
      bl.w_in = std::move(one.experts[0].w_in);
      bl.w_out = std::move(one.experts[0].w_out);
    }
    m.blocks.push_back(std::move(bl));
  }
  return m;
}

Batch make_batch(const std::vector<Sequence>& seqs, double mask_rate, int sentinel, const RngStream& rng) {
  Batch b;
  b.sequences = static_cast<int>(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto m = mask_tokens(seqs[i].tokens, mask_rate, sentinel, rng.derive(static_cast<std::uint64_t>(i)));
    const auto base = static_cast<std::int64_t>(b.tokens.size());
    b.tokens.insert(b.tokens.end(), m.input.begin(), m.input.end());
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      b.target_rows.push_back(base + m.positions[k]);
      b.targets.push_back(m.targets[k]);
    }
  }
  return b;
}

namespace {

AttentionConfig attention_config(const ModelConfig& c) {
  AttentionConfig a;
  a.num_heads = c.heads;
  a.seq_len = c.seq_len;
  a.route_kv = c.attention_route_kv;
  return a;
}

SwitchAttentionParams<float> attention_params(const Block& bl) {
  SwitchAttentionParams<float> p;
  p.query = bl.query;
  p.key = bl.key;
  p.value = bl.value;
  p.shared = bl.attn;
  return p;
}

SwitchLayerStats layer_stats(const LayerOutput<float>& o) {
  SwitchLayerStats s;
  s.f.assign(o.stats.f.begin(), o.stats.f.end());
  s.aux_loss = o.aux_loss;
  s.dropped_fraction = o.dropped_fraction;
  return s;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void add_layer_grads(SwitchLayerParams<float>& dst, const SwitchLayerGrads<float>& g) {
  add_into(dst.router, g.d_router);
  for (std::size_t e = 0; e < dst.experts.size(); ++e) {
    add_into(dst.experts[e].w_in, g.d_experts[e].w_in);
    if (!dst.experts[e].w_out.empty()) add_into(dst.experts[e].w_out, g.d_experts[e].w_out);
  }
}

}  // namespace

ForwardResult model_forward(const ToyModel& model, const RouterConfig& router_in, const Batch& batch,
                            const RngStream& rng, Mode mode, ModelCache* cache) {
  const auto& cfg = model.config;
  const std::int64_t L = cfg.seq_len, d = cfg.d_model;
  const auto T = static_cast<std::int64_t>(batch.tokens.size());
  if (T != static_cast<std::int64_t>(batch.sequences) * L)
    throw InvalidArgument("model_forward: batch of " + std::to_string(T) + " tokens is not " +
                          std::to_string(batch.sequences) + " sequences of " + std::to_string(L));
  RouterConfig router = router_in;
  router.num_experts = cfg.num_experts;
  const AttentionConfig ac = attention_config(cfg);

  Tensor h({T, d});
  for (std::int64_t t = 0; t < T; ++t) {
    const int tok = batch.tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= cfg.vocab) throw InvalidArgument("model_forward: token " + std::to_string(tok) + " out of range");
    const auto e = model.embedding.row(tok);
    const auto p = model.position.row(t % L);
    auto hr = h.row(t);
    for (std::int64_t j = 0; j < d; ++j) hr[static_cast<std::size_t>(j)] = e[static_cast<std::size_t>(j)] + p[static_cast<std::size_t>(j)];
  }

  ForwardResult res;
  if (cache) {
    cache->blocks.assign(model.blocks.size(), {});
    cache->batch = &batch;
    cache->router = router;
  }
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const Block& bl = model.blocks[b];
    const int bi = static_cast<int>(b);
    const RngStream rb = rng.derive("block").derive(static_cast<std::uint64_t>(b));
    ModelCache::BlockCache* bc = cache ? &cache->blocks[b] : nullptr;

    Tensor a;
    if (model.switch_attention_at(bi)) {
      auto f = switch_attention_forward(h, attention_params(bl), router, ac, rb.derive("attention"), mode);
      a = std::move(f.out.y);
      res.aux_loss += f.out.aux_loss;
      res.layers.push_back(layer_stats(f.out));
      if (bc) bc->sattn = std::move(f.cache);
    } else {
      a = dense_attention_forward(h, bl.attn, ac, bc ? &bc->attn : nullptr);
    }
    add_into(h, a);

    Tensor y;
    std::vector<std::uint8_t> pass;
    const RngStream rf = rb.derive("ffn");
    if (model.expert_ffn_at(bi)) {
      LayerOutput<float> out;
      if (cfg.ffn == FfnKind::switch_ffn) {
        auto f = switch_ffn_forward(h, bl.experts, router, rf, mode);
        out = std::move(f.out);
        if (bc) bc->sw = std::move(f.cache);
      } else {
        auto f = moe_topk_forward(h, bl.experts, cfg.top_k, router, rf, mode, cfg.topk_renormalize);
        out = std::move(f.out);
        if (bc) bc->topk = std::move(f.cache);
      }
      res.aux_loss += out.aux_loss;
      res.layers.push_back(layer_stats(out));
      y = std::move(out.y);
      pass = std::move(out.passthrough);
    } else {
      y = dense_ffn_forward(h, bl.w_in, bl.w_out, cfg.dropout, rf.derive("expert_dropout"), mode, bc ? &bc->ffn : nullptr);
    }
    if (bc) bc->h_mid = h;
    // dropped tokens already carry their input in y
    for (std::int64_t t = 0; t < T; ++t) {
      auto hr = h.row(t);
      const auto yr = y.row(t);
      const bool through = !pass.empty() && pass[static_cast<std::size_t>(t)];
      for (std::int64_t j = 0; j < d; ++j)
        hr[static_cast<std::size_t>(j)] = through ? yr[static_cast<std::size_t>(j)] : hr[static_cast<std::size_t>(j)] + yr[static_cast<std::size_t>(j)];
    }
    if (bc) bc->passthrough = std::move(pass);
  }

  Tensor hf({static_cast<std::int64_t>(batch.target_rows.size()), d});
  for (std::size_t r = 0; r < batch.target_rows.size(); ++r) {
    const auto src = h.row(batch.target_rows[r]);
    std::copy(src.begin(), src.end(), hf.row(static_cast<std::int64_t>(r)).begin());
  }
  res.logits = cfg.tie_embeddings ? ops::matmul_nt(hf, model.embedding) : ops::matmul(hf, model.output);
  if (cache) cache->h_final = std::move(hf);
  return res;
}

ToyModel model_backward(const ToyModel& model, const ModelCache& cache, const Tensor& d_logits, float daux) {
  const auto& cfg = model.config;
  const Batch& batch = *cache.batch;
  const std::int64_t L = cfg.seq_len, d = cfg.d_model;
  const auto T = static_cast<std::int64_t>(batch.tokens.size());
  ToyModel g = model.zeros_like();

  Tensor d_hf;
  if (cfg.tie_embeddings) {
    d_hf = ops::matmul(d_logits, model.embedding);
    add_into(g.embedding, ops::matmul_tn(d_logits, cache.h_final));
  } else {
    auto [dh, dw] = ops::matmul_backward(cache.h_final, model.output, d_logits);
    d_hf = std::move(dh);
    g.output = std::move(dw);
  }
  Tensor dh({T, d});
  for (std::size_t r = 0; r < batch.target_rows.size(); ++r) {
    auto dst = dh.row(batch.target_rows[r]);
    const auto src = d_hf.row(static_cast<std::int64_t>(r));
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }

  for (std::size_t bb = model.blocks.size(); bb-- > 0;) {
    const Block& bl = model.blocks[bb];
    Block& gb = g.blocks[bb];
    const auto& bc = cache.blocks[bb];
    const int bi = static_cast<int>(bb);

    Tensor dx;
    if (model.expert_ffn_at(bi)) {
      auto lg = cfg.ffn == FfnKind::switch_ffn ? switch_ffn_backward(bc.sw, bl.experts, dh, daux)
                                               : moe_topk_backward(bc.topk, bl.experts, dh, daux);
      add_layer_grads(gb.experts, lg);
      dx = std::move(lg.dx);
    } else {
      auto fg = dense_ffn_backward(bc.ffn, bl.w_in, bl.w_out, dh);
      gb.w_in = std::move(fg.dw_in);
      gb.w_out = std::move(fg.dw_out);
      dx = std::move(fg.dx);
    }
    for (std::int64_t t = 0; t < T; ++t) {
      if (!bc.passthrough.empty() && bc.passthrough[static_cast<std::size_t>(t)]) {
        auto dst = dh.row(t);
        std::fill(dst.begin(), dst.end(), 0.0f);
      }
    }
    add_into(dh, dx);

    if (model.switch_attention_at(bi)) {
      const auto ag = switch_attention_backward(bc.sattn, attention_params(bl), dh, daux);
      add_layer_grads(gb.query, ag.dq);
      if (model.config.attention_route_kv) {
        add_layer_grads(gb.key, ag.dk);
        add_layer_grads(gb.value, ag.dv);
      } else {
        add_into(gb.attn.w_k, ag.dshared.w_k);
        add_into(gb.attn.w_v, ag.dshared.w_v);
      }
      add_into(gb.attn.w_o, ag.dshared.w_o);
      add_into(dh, ag.dx);
    } else {
      const auto ag = dense_attention_backward(bc.attn, bl.attn, dh);
      gb.attn = ag.dw;
      add_into(dh, ag.dx);
    }
  }

  for (std::int64_t t = 0; t < T; ++t) {
    const auto src = dh.row(t);
    auto de = g.embedding.row(batch.tokens[static_cast<std::size_t>(t)]);
    auto dp = g.position.row(t % L);
    for (std::size_t j = 0; j < src.size(); ++j) {
      de[j] += src[j];
      dp[j] += src[j];
    }
  }
  return g;
}

ModelConfig dense_config(ModelConfig cfg) {
  cfg.ffn = FfnKind::dense;
  cfg.attention = AttentionKind::dense;
  return cfg;
}

ToyModel init_student_from_teacher(const ToyModel& teacher, ToyModel student) {
  const auto& sc = student.config;
  auto same = [](const Tensor& a, const Tensor& b, const std::string& layer) {
    if (a.shape() != b.shape())
      throw InvalidArgument("init_student_from_teacher: layer " + layer + " has teacher shape " + shape_str(a.shape()) +
                            " but student shape " + shape_str(b.shape()));
  };
  if (sc.ffn != FfnKind::dense || sc.attention != AttentionKind::dense)
    throw InvalidArgument("init_student_from_teacher: the student must be dense");
  if (teacher.blocks.size() != student.blocks.size())
    throw InvalidArgument("init_student_from_teacher: teacher has " + std::to_string(teacher.blocks.size()) +
                          " blocks, student " + std::to_string(student.blocks.size()));
  same(teacher.embedding, student.embedding, "embedding");
  same(teacher.position, student.position, "position");
  same(teacher.output, student.output, "output");
  student.embedding = teacher.embedding;
  student.position = teacher.position;
  student.output = teacher.output;
  for (std::size_t b = 0; b < teacher.blocks.size(); ++b) {
    const Block& tb = teacher.blocks[b];
    Block& sb = student.blocks[b];
    const std::string p = "block" + std::to_string(b) + ".";
    const bool routed_query = teacher.switch_attention_at(static_cast<int>(b));
    if (!routed_query) {
      same(tb.attn.w_q, sb.attn.w_q, p + "attn.w_q");
      sb.attn.w_q = tb.attn.w_q;
    }
    if (tb.key.experts.empty()) {
      same(tb.attn.w_k, sb.attn.w_k, p + "attn.w_k");
      same(tb.attn.w_v, sb.attn.w_v, p + "attn.w_v");
      sb.attn.w_k = tb.attn.w_k;
      sb.attn.w_v = tb.attn.w_v;
    }
    same(tb.attn.w_o, sb.attn.w_o, p + "attn.w_o");
    sb.attn.w_o = tb.attn.w_o;
    if (!teacher.expert_ffn_at(static_cast<int>(b))) {
      same(tb.w_in, sb.w_in, p + "ffn.w_in");
      same(tb.w_out, sb.w_out, p + "ffn.w_out");
      sb.w_in = tb.w_in;
      sb.w_out = tb.w_out;
    }
  }
  return student;
}

// ---- metrics -------------------------------------------------------------------------------

std::string metrics_csv_header(int num_experts) {
  std::string h = "schema_version,step,loss,cross_entropy,aux_loss,neg_log_perplexity,dropped_fraction";
  for (int e = 0; e < num_experts; ++e) h += ",f_" + std::to_string(e);
  return h;
}

namespace {
std::string g9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace

void write_metric_row(std::ostream& os, const MetricRow& r, int num_experts) {
  os << kMetricsSchemaVersion << ',' << r.step << ',' << g9(r.loss) << ',' << g9(r.cross_entropy) << ','
     << g9(r.aux_loss) << ',' << g9(r.neg_log_perplexity) << ',' << g9(r.dropped_fraction);
  for (int e = 0; e < num_experts; ++e)
    os << ',' << g9(static_cast<std::size_t>(e) < r.f.size() ? r.f[static_cast<std::size_t>(e)] : 0.0);
  os << '\n';
}

// ---- training ----------------------------------------------------------------------------------

void TrainConfig::validate(int vocab) const {
  auto need = [](bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw InvalidArgument("train." + field + ": " + why);
  };
  need(steps >= 0, "steps", "must be >= 0");
  need(batch_sequences >= 1, "batch", "must be >= 1");
  need(lr >= 0.0, "lr", "must be >= 0");
  need(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must be in [0,1)");
  need(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must be in [0,1)");
  need(adam_eps > 0.0, "adam_eps", "must be > 0");
  need(mask_rate > 0.0 && mask_rate < 1.0, "mask_rate", "must be in (0,1)");
  const int s = resolved_sentinel(vocab);
  need(s >= 0 && s < vocab, "sentinel", "must be < vocab");
  need(clusters >= 1 && clusters <= vocab / 4, "clusters", "must be in [1, vocab/4]");
  need(eval_sequences >= 1, "eval_sequences", "must be >= 1");
  need(eval_every >= 0, "eval_every", "must be >= 0");
  need(hard_weight >= 0.0 && hard_weight <= 1.0, "hard_weight", "must be in [0,1]");
}

void adam_update(ToyModel& model, const ToyModel& grads, AdamState& st, const TrainConfig& cfg) {
  st.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float lr = static_cast<float>(cfg.lr), eps = static_cast<float>(cfg.adam_eps);
  const float ic1 = static_cast<float>(1.0 / c1), ic2 = static_cast<float>(1.0 / c2);
  auto params = model.named_params();
  const auto gs = grads.named_params();
  auto ms = st.m.named_params();
  auto vs = st.v.named_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].second;
    const Tensor& g = *gs[i].second;
    Tensor& m = *ms[i].second;
    Tensor& v = *vs[i].second;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      p[k] -= lr * (m[k] * ic1) / (std::sqrt(v[k] * ic2) + eps);
    }
  }
}

Trainer::Trainer(ModelConfig model, RouterConfig router, TrainConfig train, std::uint64_t seed)
    : model_cfg_(std::move(model)), router_(std::move(router)), train_(std::move(train)), seed_(seed), root_(seed) {
  model_cfg_.validate();
  train_.validate(model_cfg_.vocab);
  router_.num_experts = model_cfg_.num_experts;
  router_.validate();
  task_ = make_bigram_task(model_cfg_.vocab, train_.clusters, train_.disjoint_clusters, root_.derive("task"));
  model_ = init_model(model_cfg_, root_.derive("init"));
  adam_.m = model_.zeros_like();
  adam_.v = model_.zeros_like();
  const RngStream er = root_.derive("eval");
  const Dataset eval = gen_synthetic_corpus(task_, model_cfg_.seq_len, train_.eval_sequences, er.derive("sequences"));
  eval_batch_ = make_batch(eval, train_.mask_rate, train_.resolved_sentinel(model_cfg_.vocab), er.derive("mask"));
}

Batch Trainer::train_batch(int step) const {
  const RngStream r = root_.derive("train").derive(static_cast<std::uint64_t>(step));
  const Dataset seqs = gen_synthetic_corpus(task_, model_cfg_.seq_len, train_.batch_sequences, r.derive("sequences"));
  return make_batch(seqs, train_.mask_rate, train_.resolved_sentinel(model_cfg_.vocab), r.derive("mask"));
}

namespace {

void fill_layer_metrics(const std::vector<SwitchLayerStats>& layers, int num_experts, std::vector<double>& f,
                        double& dropped) {
  f.assign(static_cast<std::size_t>(num_experts), 0.0);
  dropped = 0.0;
  if (layers.empty()) return;
  for (const auto& l : layers) {
    for (std::size_t e = 0; e < l.f.size() && e < f.size(); ++e) f[e] += l.f[e];
    dropped += l.dropped_fraction;
  }
  for (double& v : f) v /= static_cast<double>(layers.size());
  dropped /= static_cast<double>(layers.size());
}

double param_norm(const ToyModel& m) {
  double s = 0.0;
  for (const auto& [n, t] : m.named_params())
    for (float v : t->storage()) s += double(v) * v;
  return std::sqrt(s);
}

}  // namespace

MetricRow Trainer::step() {
  const Batch batch = train_batch(step_);
  const RngStream rng = root_.derive("step").derive(static_cast<std::uint64_t>(step_));
  ModelCache cache;
  ForwardResult fwd;
  LossGrad<float> lg;
  try {
    fwd = model_forward(model_, router_, batch, rng, Mode::train, &cache);
    if (teacher_) {
      const ForwardResult t = model_forward(*teacher_, router_, batch, rng.derive("teacher"), Mode::eval);
      lg = distill_loss(fwd.logits, t.logits, batch.targets, train_.hard_weight);
    } else {
      lg = cross_entropy(fwd.logits, batch.targets);
    }
  } catch (const NumericError& e) {
    std::ostringstream os;
    os << "non-finite values at step " << step_ + 1 << ": " << e.what() << " param_norm=" << param_norm(model_);
    throw NumericError(os.str());
  }
  MetricRow row;
  row.step = step_ + 1;
  row.cross_entropy = lg.loss;
  row.aux_loss = fwd.aux_loss;
  row.loss = row.cross_entropy + row.aux_loss;
  if (!std::isfinite(row.loss)) {
    std::ostringstream os;
    os << "non-finite loss at step " << row.step << ": cross_entropy=" << row.cross_entropy
       << " aux_loss=" << row.aux_loss << " param_norm=" << param_norm(model_);
    throw NumericError(os.str());
  }
  row.neg_log_perplexity = neg_log_perplexity(fwd.logits, batch.targets);
  fill_layer_metrics(fwd.layers, model_cfg_.num_experts, row.f, row.dropped_fraction);
  const ToyModel grads = model_backward(model_, cache, lg.grad, 1.0f);
  adam_update(model_, grads, adam_, train_);
  ++step_;
  return row;
}

std::vector<MetricRow> Trainer::run(int steps) {
  std::vector<MetricRow> rows;
  while (step_ < steps) rows.push_back(step());
  return rows;
}

EvalResult Trainer::evaluate() const {
  const ForwardResult fwd = model_forward(model_, router_, eval_batch_, root_.derive("eval").derive("noise"), Mode::eval);
  EvalResult r;
  r.cross_entropy = cross_entropy(fwd.logits, eval_batch_.targets).loss;
  r.neg_log_perplexity = neg_log_perplexity(fwd.logits, eval_batch_.targets);
  r.aux_loss = fwd.aux_loss;
  fill_layer_metrics(fwd.layers, model_cfg_.num_experts, r.f, r.dropped_fraction);
  return r;
}

void Trainer::restore(int step, ToyModel model, AdamState adam) {
  const auto want = model_.named_params();
  const auto got = model.named_params();
  if (want.size() != got.size()) throw InvalidArgument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i].first != got[i].first || want[i].second->shape() != got[i].second->shape())
      throw InvalidArgument("restore: parameter " + got[i].first + " does not match " + want[i].first);
  step_ = step;
  model_ = std::move(model);
  adam_ = std::move(adam);
}

}  // namespace switchsim
