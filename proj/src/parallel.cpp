// SPDX-License-Identifier: Apache-2.0
#include "switchsim/parallel.hpp"

#include <algorithm>
#include <array>
#include <ostream>

#include "switchsim/numerics.hpp"
#include "switchsim/ops.hpp"

namespace switchsim {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::data: return "data";
    case Strategy::model: return "model";
    case Strategy::data_model: return "data+model";
    case Strategy::expert_data: return "expert+data";
    case Strategy::expert_model_data: return "expert+model+data";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view s) {
  for (Strategy k : all_strategies())
    if (s == to_string(k)) return k;
  throw InvalidArgument("unknown strategy '" + std::string(s) +
                        "' (valid: data, model, data+model, expert+data, expert+model+data)");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> v{Strategy::data, Strategy::model, Strategy::data_model, Strategy::expert_data,
                                       Strategy::expert_model_data};
  return v;
}

std::string to_string(CollectiveOp op) { return op == CollectiveOp::all_to_all ? "all_to_all" : "all_reduce"; }
std::string to_string(Pass p) { return p == Pass::forward ? "forward" : "backward"; }

MeshLayout make_mesh(int n, int m, Strategy strategy, int num_experts, bool allow_multiple_experts) {
  if (n < 1 || m < 1) throw InvalidArgument("make_mesh: n and m must be >= 1, got n=" + std::to_string(n) +
                                            " m=" + std::to_string(m));
  if (num_experts < 1) throw InvalidArgument("make_mesh: num_experts must be >= 1");
  const std::string name = to_string(strategy);
  if ((strategy == Strategy::data || strategy == Strategy::expert_data) && m != 1)
    throw InvalidArgument("make_mesh: strategy " + name + " needs m = 1, got m=" + std::to_string(m));
  if (strategy == Strategy::model && n != 1)
    throw InvalidArgument("make_mesh: strategy model needs n = 1, got n=" + std::to_string(n));
  MeshLayout mesh{n, m, strategy, num_experts};
  if (mesh.experts_sharded()) {
    const bool ok = allow_multiple_experts ? num_experts % n == 0 : num_experts == n;
    if (!ok)
      throw InvalidArgument("make_mesh: strategy " + name + " needs E " + (allow_multiple_experts ? "divisible by" : "==") +
                            " n, got E=" + std::to_string(num_experts) + " n=" + std::to_string(n));
  }
  return mesh;
}

// ---- sharded tensors ---------------------------------------------------------------

namespace {

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t k = s.size(); k-- > 1;) st[k - 1] = st[k] * s[k];
  return st;
}

/// Copy between a block and its region of a logical tensor starting at `offset`.
void copy_region(const Shape& logical, std::span<float> big, const Shape& block_shape, std::span<float> block,
                 const std::vector<std::int64_t>& offset, bool into_block) {
  const auto ls = strides_of(logical);
  const auto bs = strides_of(block_shape);
  const std::int64_t total = shape_numel(block_shape);
  for (std::int64_t flat = 0; flat < total; ++flat) {
    std::int64_t rem = flat, at = 0;
    for (std::size_t k = 0; k < block_shape.size(); ++k) {
      const std::int64_t idx = rem / bs[k];
      rem %= bs[k];
      at += (idx + offset[k]) * ls[k];
    }
    if (into_block) block[static_cast<std::size_t>(flat)] = big[static_cast<std::size_t>(at)];
    else big[static_cast<std::size_t>(at)] = block[static_cast<std::size_t>(flat)];
  }
}

Shape block_shape_of(const ShardedTensor& t) {
  Shape b = t.shape;
  if (t.data_axis >= 0) b[static_cast<std::size_t>(t.data_axis)] /= t.n;
  if (t.model_axis >= 0) b[static_cast<std::size_t>(t.model_axis)] /= t.m;
  return b;
}

std::vector<std::int64_t> block_offset(const ShardedTensor& t, int i, int j) {
  std::vector<std::int64_t> off(t.shape.size(), 0);
  const Shape b = block_shape_of(t);
  if (t.data_axis >= 0) off[static_cast<std::size_t>(t.data_axis)] = i * b[static_cast<std::size_t>(t.data_axis)];
  if (t.model_axis >= 0) off[static_cast<std::size_t>(t.model_axis)] = j * b[static_cast<std::size_t>(t.model_axis)];
  return off;
}

std::vector<std::vector<int>> reduce_groups(int n, int m, MeshAxis axis) {
  std::vector<std::vector<int>> groups;
  if (axis == MeshAxis::data) {
    for (int j = 0; j < m; ++j) {
      groups.emplace_back();
      for (int i = 0; i < n; ++i) groups.back().push_back(i * m + j);
    }
  } else if (axis == MeshAxis::model) {
    for (int i = 0; i < n; ++i) {
      groups.emplace_back();
      for (int j = 0; j < m; ++j) groups.back().push_back(i * m + j);
    }
  } else {
    groups.emplace_back();
    for (int c = 0; c < n * m; ++c) groups.back().push_back(c);
  }
  return groups;
}

}  // namespace

ShardedTensor shard(const Tensor& t, int n, int m, int data_axis, int model_axis) {
  if (n < 1 || m < 1) throw InvalidArgument("shard: mesh extents must be >= 1");
  const int rank = static_cast<int>(t.rank());
  if (data_axis >= rank || model_axis >= rank || data_axis < -1 || model_axis < -1 ||
      (data_axis >= 0 && data_axis == model_axis))
    throw InvalidArgument("shard: invalid axes " + std::to_string(data_axis) + "/" + std::to_string(model_axis) +
                          " for shape " + shape_str(t.shape()));
  if (data_axis >= 0 && t.dim(static_cast<std::size_t>(data_axis)) % n != 0)
    throw InvalidArgument("shard: axis " + std::to_string(data_axis) + " of " + shape_str(t.shape()) +
                          " not divisible by n=" + std::to_string(n));
  if (model_axis >= 0 && t.dim(static_cast<std::size_t>(model_axis)) % m != 0)
    throw InvalidArgument("shard: axis " + std::to_string(model_axis) + " of " + shape_str(t.shape()) +
                          " not divisible by m=" + std::to_string(m));
  ShardedTensor s{t.shape(), n, m, data_axis, model_axis, MeshAxis::none, {}};
  const Shape b = block_shape_of(s);
  Tensor src = t;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      Tensor blk(b);
      blk.set_precision(t.precision());
      copy_region(s.shape, src.data(), b, blk.data(), block_offset(s, i, j), true);
      s.blocks.push_back(std::move(blk));
    }
  return s;
}

Tensor unshard(const ShardedTensor& t) {
  if (t.partial != MeshAxis::none) throw InvalidArgument("unshard: blocks hold partial sums; all-reduce first");
  if (static_cast<int>(t.blocks.size()) != t.n * t.m)
    throw InvalidArgument("unshard: expected " + std::to_string(t.n * t.m) + " blocks, got " +
                          std::to_string(t.blocks.size()));
  Tensor out(t.shape);
  const Shape b = block_shape_of(t);
  const int ni = t.data_axis >= 0 ? t.n : 1;
  const int mj = t.model_axis >= 0 ? t.m : 1;
  for (int i = 0; i < ni; ++i)
    for (int j = 0; j < mj; ++j) {
      Tensor blk = t.block(i, j);
      if (blk.shape() != b)
        throw InvalidArgument("unshard: block " + shape_str(blk.shape()) + " vs expected " + shape_str(b));
      copy_region(t.shape, out.data(), b, blk.data(), block_offset(t, i, j), false);
      if (blk.precision() == Precision::bf16) out.set_precision(Precision::bf16);
    }
  return out;
}

std::pair<ShardedTensor, CommRecord> all_reduce(const ShardedTensor& t, MeshAxis axis, Pass pass, int width,
                                                std::string label) {
  if (axis == MeshAxis::none) throw InvalidArgument("all_reduce: no mesh axis given");
  if (t.partial != axis)
    throw InvalidArgument("all_reduce: blocks are not partial sums along the requested mesh axis");
  const bool touches_data = axis == MeshAxis::data || axis == MeshAxis::both;
  const bool touches_model = axis == MeshAxis::model || axis == MeshAxis::both;
  if ((touches_data && t.data_axis >= 0) || (touches_model && t.model_axis >= 0))
    throw InvalidArgument("all_reduce: reduced mesh axis also splits a tensor dimension");
  ShardedTensor out = t;
  out.partial = MeshAxis::none;
  const auto groups = reduce_groups(t.n, t.m, axis);
  for (const auto& g : groups) {
    Tensor acc = t.blocks[static_cast<std::size_t>(g[0])];
    for (std::size_t k = 1; k < g.size(); ++k) {
      const Tensor& b = t.blocks[static_cast<std::size_t>(g[k])];
      require_same_shape(acc, b, "all_reduce");
      for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += b[e];
    }
    for (int c : g) out.blocks[static_cast<std::size_t>(c)] = acc;
  }
  CommRecord rec;
  rec.op = CollectiveOp::all_reduce;
  rec.pass = pass;
  rec.width = width;
  rec.group = static_cast<int>(groups[0].size());
  rec.elements = rec.group > 1 ? static_cast<std::int64_t>(t.blocks[0].size()) : 0;
  rec.label = std::move(label);
  return {std::move(out), rec};
}

std::pair<ShardedTensor, CommRecord> all_to_all(const ShardedTensor& t, int to_axis, Pass pass, int width,
                                                std::string label) {
  if (t.data_axis < 0) throw InvalidArgument("all_to_all: tensor is not split over the data dimension");
  if (t.partial != MeshAxis::none) throw InvalidArgument("all_to_all: blocks hold partial sums");
  if (to_axis < 0 || to_axis >= static_cast<int>(t.shape.size()) || to_axis == t.data_axis || to_axis == t.model_axis)
    throw InvalidArgument("all_to_all: invalid target axis " + std::to_string(to_axis));
  if (t.shape[static_cast<std::size_t>(to_axis)] % t.n != 0)
    throw InvalidArgument("all_to_all: axis " + std::to_string(to_axis) + " extent " +
                          std::to_string(t.shape[static_cast<std::size_t>(to_axis)]) + " not divisible by " +
                          std::to_string(t.n) + " shards");
  ShardedTensor out = t;
  out.data_axis = to_axis;
  Shape column = t.shape;
  if (t.model_axis >= 0) column[static_cast<std::size_t>(t.model_axis)] /= t.m;
  for (int j = 0; j < t.m; ++j) {
    ShardedTensor col{column, t.n, 1, t.data_axis, -1, MeshAxis::none, {}};
    for (int i = 0; i < t.n; ++i) col.blocks.push_back(t.block(i, j));
    const Tensor whole = unshard(col);
    const ShardedTensor split = shard(whole, t.n, 1, to_axis, -1);
    for (int i = 0; i < t.n; ++i) {
      out.block(i, j) = split.blocks[static_cast<std::size_t>(i)];
      out.block(i, j).set_precision(t.block(i, j).precision());
    }
  }
  CommRecord rec;
  rec.op = CollectiveOp::all_to_all;
  rec.pass = pass;
  rec.width = width;
  rec.group = t.n;
  rec.elements = t.n > 1 ? static_cast<std::int64_t>(t.blocks[0].size()) : 0;
  rec.label = std::move(label);
  return {std::move(out), rec};
}

RouterConfig reference_config(const MeshLayout& mesh, RouterConfig config) {
  config.routing_groups = mesh.n;
  return config;
}

// ---- simulated layer ------------------------------------------------------------------

namespace {

Tensor take_columns(const Tensor& w, std::int64_t start, std::int64_t count) {
  Tensor out({w.dim(0), count});
  for (std::int64_t r = 0; r < w.dim(0); ++r)
    for (std::int64_t c = 0; c < count; ++c) out.at(r, c) = w.at(r, start + c);
  return out;
}

Tensor take_rows(const Tensor& w, std::int64_t start, std::int64_t count) {
  Tensor out({count, w.dim(1)});
  std::copy_n(w.data().begin() + start * w.dim(1), count * w.dim(1), out.data().begin());
  return out;
}

/// One model column's share of an expert: the d_ff slice [j*F/m, (j+1)*F/m).
struct SliceState {
  DenseFfnCache<float> cache;
  Tensor w_in;
  Tensor w_out;
};

Tensor slice_forward(const Tensor& rows, const ExpertWeights<float>& w, int j, int m, double rate,
                     const RngStream& drop_rng, Mode mode, const std::vector<std::int64_t>& row_ids, SliceState& st) {
  const std::int64_t f = w.w_in.dim(1);
  const std::int64_t fs = f / m;
  st.w_in = m == 1 ? w.w_in : take_columns(w.w_in, j * fs, fs);
  st.w_out = m == 1 ? w.w_out : take_rows(w.w_out, j * fs, fs);
  st.cache.x = rows;
  st.cache.pre = ops::matmul(rows, st.w_in);
  st.cache.act = ops::relu(st.cache.pre);
  st.cache.mask = Tensor();
  if (mode == Mode::train && rate > 0.0) {
    // the mask is drawn over the full d_ff width so every slice agrees with
    // the single-core layer
    const Tensor full = dropout_scale<float>(rows.dim(0), f, rate, drop_rng, &row_ids);
    st.cache.mask = m == 1 ? full : take_columns(full, j * fs, fs);
    st.cache.act = ops::mul(st.cache.act, st.cache.mask);
  }
  return ops::matmul(st.cache.act, st.w_out);
}

void place_columns(Tensor& dst, const Tensor& src, std::int64_t start) {
  for (std::int64_t r = 0; r < src.dim(0); ++r)
    for (std::int64_t c = 0; c < src.dim(1); ++c) dst.at(r, start + c) = src.at(r, c);
}

void place_rows(Tensor& dst, const Tensor& src, std::int64_t start) {
  std::copy(src.data().begin(), src.data().end(), dst.data().begin() + start * dst.dim(1));
}

float combine_gate(float g, bool selective) { return selective ? bf16::round(g) : g; }

/// Row r of a [.., C, d]-shaped buffer block, viewed as a flat row index.
std::span<float> buffer_row(Tensor& t, std::int64_t r, std::int64_t d) {
  return t.data().subspan(static_cast<std::size_t>(r * d), static_cast<std::size_t>(d));
}

MeshAxis partial_axis(int n, int m) {
  if (n > 1 && m > 1) return MeshAxis::both;
  if (n > 1) return MeshAxis::data;
  if (m > 1) return MeshAxis::model;
  return MeshAxis::none;
}

void push(std::vector<CommRecord>& ledger, const CommRecord& r) {
  if (r.elements > 0) ledger.push_back(r);
}

}  // namespace

ShardedRun run_sharded_switch_layer(const Tensor& x, const SwitchLayerParams<float>& params, const MeshLayout& mesh,
                                    const RouterConfig& config, const RngStream& rng, Mode mode, const Tensor* dy) {
  params.validate();
  require_rank(x, 2, "run_sharded_switch_layer");
  if (params.form != ExpertForm::ffn) throw InvalidArgument("run_sharded_switch_layer: experts must be FFNs");
  const int E = params.num_experts();
  if (config.num_experts != E || mesh.num_experts != E)
    throw InvalidArgument("run_sharded_switch_layer: expert count mismatch (params " + std::to_string(E) + ", config " +
                          std::to_string(config.num_experts) + ", mesh " + std::to_string(mesh.num_experts) + ")");
  if (config.routing_groups != 1)
    throw InvalidArgument("run_sharded_switch_layer: routing groups follow the mesh; pass routing_groups=1");
  const int n = mesh.n, m = mesh.m;
  const std::int64_t B = x.dim(0), d = x.dim(1), F = params.experts[0].w_in.dim(1);
  if (d != params.d_model()) throw InvalidArgument("run_sharded_switch_layer: input width mismatch");
  if (B % n != 0)
    throw InvalidArgument("run_sharded_switch_layer: B=" + std::to_string(B) + " not divisible by n=" + std::to_string(n));
  if (F % m != 0)
    throw InvalidArgument("run_sharded_switch_layer: d_ff=" + std::to_string(F) + " not divisible by m=" +
                          std::to_string(m));
  if (dy && dy->shape() != x.shape())
    throw InvalidArgument("run_sharded_switch_layer: upstream gradient " + shape_str(dy->shape()) + " vs input " +
                          shape_str(x.shape()));
  const std::int64_t S = B / n;
  const bool selective = config.selective_precision;
  const int width = selective ? 2 : 4;
  const std::int64_t fs = F / m;
  const RngStream router_rng = rng.derive("router");
  const RngStream drop_rng = rng.derive("expert_dropout").derive("ffn_dropout");
  const double drop_rate = params.expert_dropout_rate;

  ShardedRun run;
  auto& ledger = run.ledger;

  // Every core of data row i holds the same tokens and routes them
  // identically, so routing is evaluated once per row.
  const ShardedTensor xs = shard(x, n, m, 0, -1);
  std::vector<RouteResult<float>> routes;
  for (int i = 0; i < n; ++i) {
    RouteOptions<float> ro;
    ro.token_offset = i * S;
    routes.push_back(route(xs.block(i, 0), params.router, config, router_rng, mode, ro));
  }
  const int C = routes[0].plan.expert_capacity;

  // slot_token[(i * E + e) * C + c]: global token in that slot, or -1
  std::vector<std::int64_t> slot_token(static_cast<std::size_t>(n * E * C), -1);
  for (int i = 0; i < n; ++i) {
    const auto& plan = routes[static_cast<std::size_t>(i)].plan;
    for (std::int64_t t = 0; t < S; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      if (plan.dropped[ti]) continue;
      slot_token[static_cast<std::size_t>((i * E + plan.expert_index[ti]) * C + plan.position_in_expert[ti])] = i * S + t;
    }
  }

  // Dispatch: logical [n, E, C, d], split over data on axis 0.
  ShardedTensor disp{{n, E, C, d}, n, m, 0, -1, MeshAxis::none, {}};
  for (int i = 0; i < n; ++i) {
    Tensor blk({1, E, C, d});
    for (std::int64_t s = 0; s < E * C; ++s) {
      const std::int64_t tok = slot_token[static_cast<std::size_t>(i * E * C + s)];
      if (tok < 0) continue;
      const auto src = x.row(tok);
      std::copy(src.begin(), src.end(), buffer_row(blk, s, d).begin());
    }
    if (selective) blk = quantize_bf16(blk);
    for (int j = 0; j < m; ++j) disp.blocks.push_back(blk);
  }

  // Per core, per expert handled there: the d_ff slice state.
  std::vector<std::vector<SliceState>> slices(static_cast<std::size_t>(n * m));
  // Combine-side expert outputs per data row: [E * C, d] rows (full sums).
  std::vector<Tensor> expert_out(static_cast<std::size_t>(n));
  // Partial outputs per core when d_ff is split without expert sharding.
  std::vector<Tensor> partial_out(static_cast<std::size_t>(n * m));

  if (mesh.experts_sharded()) {
    const int epc = E / n;
    auto [held, rec] = all_to_all(disp, 1, Pass::forward, width, "dispatch");
    push(ledger, rec);
    // held.block(i, j): [n, epc, C, d]
    ShardedTensor outs{{n, E, C, d}, n, m, 1, -1, m > 1 ? MeshAxis::model : MeshAxis::none, {}};
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        Tensor& in = held.block(i, j);
        Tensor ob({n, epc, C, d});
        auto& sl = slices[static_cast<std::size_t>(i * m + j)];
        sl.resize(static_cast<std::size_t>(epc));
        for (int le = 0; le < epc; ++le) {
          const int e = i * epc + le;
          Tensor rows({n * C, d});
          std::vector<std::int64_t> ids(static_cast<std::size_t>(n * C));
          for (int g = 0; g < n; ++g)
            for (int c = 0; c < C; ++c) {
              const std::int64_t r = g * C + c;
              const auto src = buffer_row(in, (g * epc + le) * C + c, d);
              std::copy(src.begin(), src.end(), rows.row(r).begin());
              ids[static_cast<std::size_t>(r)] = slot_token[static_cast<std::size_t>((g * E + e) * C + c)];
            }
          const Tensor y = slice_forward(rows, params.experts[static_cast<std::size_t>(e)], j, m, drop_rate, drop_rng,
                                         mode, ids, sl[static_cast<std::size_t>(le)]);
          for (int g = 0; g < n; ++g)
            for (int c = 0; c < C; ++c) {
              const auto src = y.row(g * C + c);
              std::copy(src.begin(), src.end(), buffer_row(ob, (g * epc + le) * C + c, d).begin());
            }
        }
        outs.blocks.push_back(std::move(ob));
      }
    if (m > 1) {
      auto [reduced, r2] = all_reduce(outs, MeshAxis::model, Pass::forward, 4, "expert_output");
      push(ledger, r2);
      outs = std::move(reduced);
    }
    if (selective)
      for (auto& b : outs.blocks) b = quantize_bf16(b);
    auto [back, r3] = all_to_all(outs, 0, Pass::forward, width, "combine");
    push(ledger, r3);
    for (int i = 0; i < n; ++i) expert_out[static_cast<std::size_t>(i)] = back.block(i, 0).reshaped({E * C, d});
  } else {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const Tensor& in = disp.block(i, j);
        Tensor ob({E * C, d});
        auto& sl = slices[static_cast<std::size_t>(i * m + j)];
        sl.resize(static_cast<std::size_t>(E));
        for (int e = 0; e < E; ++e) {
          Tensor rows({C, d});
          std::copy_n(in.data().begin() + e * C * d, C * d, rows.data().begin());
          std::vector<std::int64_t> ids(slot_token.begin() + (i * E + e) * C, slot_token.begin() + (i * E + e + 1) * C);
          const Tensor y = slice_forward(rows, params.experts[static_cast<std::size_t>(e)], j, m, drop_rate, drop_rng,
                                         mode, ids, sl[static_cast<std::size_t>(e)]);
          std::copy(y.data().begin(), y.data().end(), ob.data().begin() + e * C * d);
        }
        if (selective) ob = quantize_bf16(ob);
        if (m == 1) expert_out[static_cast<std::size_t>(i)] = std::move(ob);
        else partial_out[static_cast<std::size_t>(i * m + j)] = std::move(ob);
      }
  }

  // Combine. With a split d_ff and unsharded experts the gated partial
  // outputs are summed by an all-reduce of [B/n, d].
  Tensor y({B, d});
  auto combine_rows = [&](const Tensor& outs_rows, int i, Tensor& dst, std::int64_t row0) {
    const auto& plan = routes[static_cast<std::size_t>(i)].plan;
    for (std::int64_t t = 0; t < S; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      if (plan.dropped[ti]) continue;
      const float g = combine_gate(plan.gate[ti], selective);
      const auto o = outs_rows.row(plan.expert_index[ti] * C + plan.position_in_expert[ti]);
      auto yr = dst.row(row0 + t);
      for (std::int64_t k = 0; k < d; ++k) yr[static_cast<std::size_t>(k)] += g * o[static_cast<std::size_t>(k)];
    }
  };
  if (!mesh.experts_sharded() && m > 1) {
    ShardedTensor yp{{B, d}, n, m, 0, -1, MeshAxis::model, {}};
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        Tensor blk({S, d});
        combine_rows(partial_out[static_cast<std::size_t>(i * m + j)], i, blk, 0);
        yp.blocks.push_back(std::move(blk));
      }
    auto [reduced, rec] = all_reduce(yp, MeshAxis::model, Pass::forward, 4, "output");
    push(ledger, rec);
    y = unshard(reduced);
  } else {
    for (int i = 0; i < n; ++i) combine_rows(expert_out[static_cast<std::size_t>(i)], i, y, i * S);
  }

  auto& out = run.out;
  out.passthrough.assign(static_cast<std::size_t>(B), 0);
  std::int64_t dropped = 0;
  out.stats.f.assign(static_cast<std::size_t>(E), 0.0f);
  out.stats.P.assign(static_cast<std::size_t>(E), 0.0f);
  float aux = 0.0f;
  for (int i = 0; i < n; ++i) {
    const auto& r = routes[static_cast<std::size_t>(i)];
    for (std::int64_t t = 0; t < S; ++t) {
      if (!r.plan.dropped[static_cast<std::size_t>(t)]) continue;
      const auto src = x.row(i * S + t);
      std::copy(src.begin(), src.end(), y.row(i * S + t).begin());
      out.passthrough[static_cast<std::size_t>(i * S + t)] = 1;
      ++dropped;
    }
    // auxiliary loss and statistics are averaged on the host
    aux += r.stats.aux_loss;
    for (int e = 0; e < E; ++e) {
      out.stats.f[static_cast<std::size_t>(e)] += r.stats.f[static_cast<std::size_t>(e)] / static_cast<float>(n);
      out.stats.P[static_cast<std::size_t>(e)] += r.stats.P[static_cast<std::size_t>(e)] / static_cast<float>(n);
    }
  }
  out.aux_loss = aux / static_cast<float>(n);
  out.stats.aux_loss = out.aux_loss;
  out.dropped_fraction = static_cast<double>(dropped) / static_cast<double>(B);
  out.y = std::move(y);
  if (!dy) return run;

  // ---- backward ----
  run.has_grads = true;
  auto& grads = run.grads;
  grads.dx = Tensor({B, d});
  grads.d_router = Tensor(params.router.shape());
  for (const auto& e : params.experts) grads.d_experts.push_back({Tensor(e.w_in.shape()), Tensor(e.w_out.shape())});
  const float aux_weight = 1.0f / static_cast<float>(n);

  ShardedTensor d_router{params.router.shape(), n, m, -1, -1, partial_axis(n, m), {}};

  if (mesh.experts_sharded()) {
    const int epc = E / n;
    std::vector<Tensor> d_probs(static_cast<std::size_t>(n));
    ShardedTensor dbuf{{n, E, C, d}, n, m, 0, -1, MeshAxis::none, {}};
    for (int i = 0; i < n; ++i) {
      const auto& plan = routes[static_cast<std::size_t>(i)].plan;
      d_probs[static_cast<std::size_t>(i)] = Tensor({S, E});
      Tensor blk({1, E, C, d});
      for (std::int64_t t = 0; t < S; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        if (plan.dropped[ti]) continue;
        const std::int64_t slot = plan.expert_index[ti] * C + plan.position_in_expert[ti];
        const float g = combine_gate(plan.gate[ti], selective);
        const auto dyr = dy->row(i * S + t);
        const auto o = expert_out[static_cast<std::size_t>(i)].row(slot);
        auto dst = buffer_row(blk, slot, d);
        float dg = 0.0f;
        for (std::int64_t k = 0; k < d; ++k) {
          dst[static_cast<std::size_t>(k)] = g * dyr[static_cast<std::size_t>(k)];
          dg += dyr[static_cast<std::size_t>(k)] * o[static_cast<std::size_t>(k)];
        }
        d_probs[static_cast<std::size_t>(i)].at(t, plan.expert_index[ti]) += dg;
      }
      if (selective) blk = quantize_bf16(blk);
      for (int j = 0; j < m; ++j) dbuf.blocks.push_back(blk);
    }
    auto [held, r1] = all_to_all(dbuf, 1, Pass::backward, width, "dispatch_grad");
    push(ledger, r1);
    ShardedTensor dxb{{n, E, C, d}, n, m, 1, -1, m > 1 ? MeshAxis::model : MeshAxis::none, {}};
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        Tensor& in = held.block(i, j);
        Tensor ob({n, epc, C, d});
        const auto& sl = slices[static_cast<std::size_t>(i * m + j)];
        for (int le = 0; le < epc; ++le) {
          const int e = i * epc + le;
          Tensor rows({n * C, d});
          for (int g = 0; g < n; ++g)
            for (int c = 0; c < C; ++c) {
              const auto src = buffer_row(in, (g * epc + le) * C + c, d);
              std::copy(src.begin(), src.end(), rows.row(g * C + c).begin());
            }
          const auto& st = sl[static_cast<std::size_t>(le)];
          auto eg = dense_ffn_backward(st.cache, st.w_in, st.w_out, rows);
          place_columns(grads.d_experts[static_cast<std::size_t>(e)].w_in, eg.dw_in, j * fs);
          place_rows(grads.d_experts[static_cast<std::size_t>(e)].w_out, eg.dw_out, j * fs);
          for (int g = 0; g < n; ++g)
            for (int c = 0; c < C; ++c) {
              const auto src = eg.dx.row(g * C + c);
              std::copy(src.begin(), src.end(), buffer_row(ob, (g * epc + le) * C + c, d).begin());
            }
        }
        dxb.blocks.push_back(std::move(ob));
      }
    if (m > 1) {
      auto [reduced, r2] = all_reduce(dxb, MeshAxis::model, Pass::backward, 4, "expert_input_grad");
      push(ledger, r2);
      dxb = std::move(reduced);
    }
    if (selective)
      for (auto& b : dxb.blocks) b = quantize_bf16(b);
    auto [back, r3] = all_to_all(dxb, 0, Pass::backward, width, "combine_grad");
    push(ledger, r3);
    for (int i = 0; i < n; ++i) {
      const auto& r = routes[static_cast<std::size_t>(i)];
      const Tensor rows = back.block(i, 0).reshaped({E * C, d});
      for (std::int64_t t = 0; t < S; ++t) {
        const auto ti = static_cast<std::size_t>(t);
        const auto src = r.plan.dropped[ti] ? dy->row(i * S + t)
                                            : rows.row(r.plan.expert_index[ti] * C + r.plan.position_in_expert[ti]);
        auto dst = grads.dx.row(i * S + t);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      Tensor& dp = d_probs[static_cast<std::size_t>(i)];
      const auto lb = load_balance_loss(r.plan.router_probs, r.expert_mask, config.alpha, 1);
      for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += aux_weight * lb.grad_probs[k];
      const auto rg = router_backward(r, params.router, dp);
      for (std::int64_t t = 0; t < S; ++t) {
        auto dst = grads.dx.row(i * S + t);
        const auto src = rg.dx.row(t);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
      // every model column computes the same router gradient
      for (int j = 0; j < m; ++j) d_router.blocks.push_back(rg.d_router);
    }
    d_router.partial = n > 1 ? MeshAxis::data : MeshAxis::none;
  } else {
    ShardedTensor dxs{{B, d}, n, m, 0, -1, m > 1 ? MeshAxis::model : MeshAxis::none, {}};
    std::vector<ShardedTensor> dw_in, dw_out;
    for (int e = 0; e < E; ++e) {
      dw_in.push_back({{d, F}, n, m, -1, 1, n > 1 ? MeshAxis::data : MeshAxis::none, {}});
      dw_out.push_back({{F, d}, n, m, -1, 0, n > 1 ? MeshAxis::data : MeshAxis::none, {}});
    }
    for (int i = 0; i < n; ++i) {
      const auto& r = routes[static_cast<std::size_t>(i)];
      const auto& plan = r.plan;
      for (int j = 0; j < m; ++j) {
        const Tensor& outs_rows =
            m == 1 ? expert_out[static_cast<std::size_t>(i)] : partial_out[static_cast<std::size_t>(i * m + j)];
        Tensor dp({S, E});
        Tensor dxi({S, d});
        const auto& sl = slices[static_cast<std::size_t>(i * m + j)];
        for (int e = 0; e < E; ++e) {
          Tensor rows({C, d});
          for (int c = 0; c < C; ++c) {
            const std::int64_t tok = slot_token[static_cast<std::size_t>((i * E + e) * C + c)];
            if (tok < 0) continue;
            const std::int64_t t = tok - i * S;
            const float g = combine_gate(plan.gate[static_cast<std::size_t>(t)], selective);
            const auto dyr = dy->row(tok);
            const auto o = outs_rows.row(e * C + c);
            auto dst = rows.row(c);
            float dg = 0.0f;
            for (std::int64_t k = 0; k < d; ++k) {
              dst[static_cast<std::size_t>(k)] = g * dyr[static_cast<std::size_t>(k)];
              dg += dyr[static_cast<std::size_t>(k)] * o[static_cast<std::size_t>(k)];
            }
            dp.at(t, e) += dg;
          }
          const auto& st = sl[static_cast<std::size_t>(e)];
          auto eg = dense_ffn_backward(st.cache, st.w_in, st.w_out, rows);
          dw_in[static_cast<std::size_t>(e)].blocks.push_back(std::move(eg.dw_in));
          dw_out[static_cast<std::size_t>(e)].blocks.push_back(std::move(eg.dw_out));
          for (int c = 0; c < C; ++c) {
            const std::int64_t tok = slot_token[static_cast<std::size_t>((i * E + e) * C + c)];
            if (tok < 0) continue;
            auto dst = dxi.row(tok - i * S);
            const auto src = eg.dx.row(c);
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
          }
        }
        // residual and auxiliary terms enter once per data row
        if (j == 0) {
          for (std::int64_t t = 0; t < S; ++t) {
            if (!plan.dropped[static_cast<std::size_t>(t)]) continue;
            auto dst = dxi.row(t);
            const auto src = dy->row(i * S + t);
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
          }
          const auto lb = load_balance_loss(plan.router_probs, r.expert_mask, config.alpha, 1);
          for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += aux_weight * lb.grad_probs[k];
        }
        const auto rg = router_backward(r, params.router, dp);
        for (std::size_t k = 0; k < dxi.size(); ++k) dxi[k] += rg.dx[k];
        dxs.blocks.push_back(std::move(dxi));
        d_router.blocks.push_back(rg.d_router);
      }
    }
    if (m > 1) {
      auto [reduced, rec] = all_reduce(dxs, MeshAxis::model, Pass::backward, 4, "input_grad");
      push(ledger, rec);
      dxs = std::move(reduced);
    }
    grads.dx = unshard(dxs);
    for (int e = 0; e < E; ++e) {
      for (auto* w : {&dw_in[static_cast<std::size_t>(e)], &dw_out[static_cast<std::size_t>(e)]}) {
        if (w->partial != MeshAxis::none) {
          auto [reduced, rec] = all_reduce(*w, w->partial, Pass::backward, 4, "expert_grad");
          push(ledger, rec);
          *w = std::move(reduced);
        }
      }
      grads.d_experts[static_cast<std::size_t>(e)] = {unshard(dw_in[static_cast<std::size_t>(e)]),
                                                      unshard(dw_out[static_cast<std::size_t>(e)])};
    }
  }
  if (d_router.partial != MeshAxis::none) {
    auto [reduced, rec] = all_reduce(d_router, d_router.partial, Pass::backward, 4, "router_grad");
    push(ledger, rec);
    d_router = std::move(reduced);
  }
  grads.d_router = unshard(d_router);
  return run;
}

// ---- analytic accounting ------------------------------------------------------------

std::vector<CommCostRow> comm_cost_report(const MeshLayout& mesh, std::int64_t batch_tokens, std::int64_t d_model,
                                          std::int64_t d_ff, int E, int C, Precision precision) {
  if (batch_tokens % mesh.n != 0) throw InvalidArgument("comm_cost_report: B not divisible by n");
  const std::int64_t n = mesh.n, m = mesh.m, N = n * m;
  const std::int64_t S = batch_tokens / n;
  const std::int64_t width = precision == Precision::bf16 ? 2 : 4;
  const std::int64_t buffer = static_cast<std::int64_t>(E) * C * d_model;
  const std::int64_t router = d_model * E;
  const std::int64_t experts = static_cast<std::int64_t>(E) * 2 * d_model * d_ff;

  std::int64_t a2a = 0, ar_fwd = 0, ar_bwd = 0;
  switch (mesh.strategy) {
    case Strategy::data:
      if (n > 1) ar_bwd = (router + experts) * 4;
      break;
    case Strategy::model:
      if (m > 1) {
        ar_fwd = S * d_model * 4;
        ar_bwd = S * d_model * 4 + router * 4;
      }
      break;
    case Strategy::data_model:
      if (m > 1) {
        ar_fwd = S * d_model * 4;
        ar_bwd += S * d_model * 4;
      }
      if (N > 1) ar_bwd += router * 4;
      if (n > 1) ar_bwd += experts / m * 4;
      break;
    case Strategy::expert_data:
    case Strategy::expert_model_data:
      if (n > 1) {
        a2a = 2 * buffer * width;
        ar_bwd += router * 4;
      }
      if (m > 1) {
        ar_fwd = buffer * 4;
        ar_bwd += buffer * 4;
      }
      break;
  }
  const std::string name = to_string(mesh.strategy);
  auto row = [&](CollectiveOp op, Pass pass, std::int64_t bytes) {
    return CommCostRow{name, mesh.n, mesh.m, E, C, op, pass, bytes};
  };
  return {row(CollectiveOp::all_to_all, Pass::forward, a2a), row(CollectiveOp::all_reduce, Pass::forward, ar_fwd),
          row(CollectiveOp::all_to_all, Pass::backward, a2a), row(CollectiveOp::all_reduce, Pass::backward, ar_bwd)};
}

std::vector<CommCostRow> summarize_ledger(const MeshLayout& mesh, int C, const std::vector<CommRecord>& ledger) {
  const std::string name = to_string(mesh.strategy);
  std::vector<CommCostRow> rows;
  for (Pass p : {Pass::forward, Pass::backward})
    for (CollectiveOp op : {CollectiveOp::all_to_all, CollectiveOp::all_reduce})
      rows.push_back({name, mesh.n, mesh.m, mesh.num_experts, C, op, p, 0});
  // order as in comm_cost_report: (a2a, ar) forward then backward
  for (const auto& r : ledger) {
    const std::size_t k = (r.pass == Pass::forward ? 0 : 2) + (r.op == CollectiveOp::all_to_all ? 0 : 1);
    rows[k].bytes += r.bytes();
  }
  return rows;
}

void write_comm_csv(std::ostream& os, const std::vector<CommCostRow>& rows, bool header) {
  if (header) os << kCommCsvHeader << '\n';
  for (const auto& r : rows)
    os << r.strategy << ',' << r.n << ',' << r.m << ',' << r.E << ',' << r.C << ',' << to_string(r.op) << ','
       << to_string(r.pass) << ',' << r.bytes << '\n';
}

}  // namespace switchsim
