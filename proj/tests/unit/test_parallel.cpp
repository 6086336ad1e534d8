// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "switchsim/layers.hpp"
#include "switchsim/parallel.hpp"
#include "test_helpers.hpp"

namespace ss = switchsim;
namespace st = switchsim::testing;
using ss::Strategy;
using ss::Tensor;

namespace {

ss::SwitchLayerParams<float> make_params(std::int64_t d, std::int64_t d_ff, int n, std::uint64_t seed) {
  ss::RngStream rng(seed);
  auto p = ss::init_switch_params(d, d_ff, n, 1.0, rng);
  p.dropout_rate = 0.0;
  p.expert_dropout_rate = 0.1;
  return p;
}

ss::RouterConfig router_config(int n, double cf) {
  ss::RouterConfig c;
  c.num_experts = n;
  c.capacity_factor = cf;
  c.policy.kind = ss::PolicyKind::input_jitter;
  return c;
}

struct Case {
  Strategy strategy;
  int n, m, E;
};

const std::vector<Case>& cases() {
  static const std::vector<Case> c{
      {Strategy::data, 1, 1, 2},          {Strategy::data, 2, 1, 4},
      {Strategy::data, 4, 1, 2},          {Strategy::model, 1, 2, 2},
      {Strategy::model, 1, 4, 3},         {Strategy::data_model, 2, 2, 4},
      {Strategy::data_model, 4, 2, 2},    {Strategy::expert_data, 2, 1, 2},
      {Strategy::expert_data, 4, 1, 4},   {Strategy::expert_model_data, 2, 2, 2},
      {Strategy::expert_model_data, 4, 2, 4},
  };
  return c;
}

std::string name(const Case& c) {
  return ss::to_string(c.strategy) + " n=" + std::to_string(c.n) + " m=" + std::to_string(c.m) +
         " E=" + std::to_string(c.E);
}

double max_rel(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - b[i]) / std::max({1.0, std::abs(double(a[i])), std::abs(double(b[i]))}));
  return m;
}

}  // namespace

TEST(Mesh, Construction) {
  EXPECT_EQ(ss::make_mesh(4, 1, Strategy::data, 1).cores(), 4);
  EXPECT_EQ(ss::make_mesh(1, 4, Strategy::model, 1).cores(), 4);
  const auto m = ss::make_mesh(4, 2, Strategy::expert_model_data, 4);
  EXPECT_EQ(m.cores(), 8);
  EXPECT_EQ(m.experts_per_core(), 1);
  EXPECT_THROW(ss::make_mesh(4, 1, Strategy::expert_data, 2), ss::InvalidArgument);
  EXPECT_THROW(ss::make_mesh(2, 1, Strategy::expert_data, 3, true), ss::InvalidArgument);
  EXPECT_EQ(ss::make_mesh(2, 1, Strategy::expert_data, 4, true).experts_per_core(), 2);
  EXPECT_THROW(ss::make_mesh(0, 1, Strategy::data, 1), ss::InvalidArgument);
  EXPECT_THROW(ss::make_mesh(2, 2, Strategy::model, 1), ss::InvalidArgument);
  EXPECT_THROW(ss::make_mesh(2, 2, Strategy::data, 1), ss::InvalidArgument);
  EXPECT_EQ(ss::parse_strategy("expert+model+data"), Strategy::expert_model_data);
  EXPECT_THROW(ss::parse_strategy("pipeline"), ss::InvalidArgument);
}

TEST(Collectives, AllReduceSumsPartials) {
  ss::ShardedTensor t{{2}, 2, 1, -1, -1, ss::MeshAxis::data, {Tensor({2}, {1, 2}), Tensor({2}, {3, 4})}};
  const auto [out, rec] = ss::all_reduce(t, ss::MeshAxis::data, ss::Pass::forward);
  for (const auto& b : out.blocks) EXPECT_TRUE(ss::bit_equal(b, Tensor({2}, {4, 6})));
  EXPECT_EQ(rec.bytes(), 8);
  EXPECT_EQ(out.partial, ss::MeshAxis::none);
  EXPECT_THROW(ss::all_reduce(t, ss::MeshAxis::model, ss::Pass::forward), ss::InvalidArgument);
  ss::ShardedTensor split = ss::shard(Tensor({4}, {1, 2, 3, 4}), 2, 1, 0, -1);
  split.partial = ss::MeshAxis::data;
  EXPECT_THROW(ss::all_reduce(split, ss::MeshAxis::data, ss::Pass::forward), ss::InvalidArgument);
}

TEST(Collectives, AllReduceSingleCoreMovesNothing) {
  ss::ShardedTensor t{{3}, 1, 1, -1, -1, ss::MeshAxis::data, {Tensor({3}, {1, 2, 3})}};
  const auto [out, rec] = ss::all_reduce(t, ss::MeshAxis::data, ss::Pass::forward);
  EXPECT_TRUE(ss::bit_equal(out.blocks[0], t.blocks[0]));
  EXPECT_EQ(rec.bytes(), 0);
}

TEST(Collectives, AllReduceActivationVolume) {
  // [B/n, d] per core on the model axis: B=64, n=4, d=8 with m=2
  const Tensor x = st::random_tensor({4, 2, 16, 8}, 1);
  ss::ShardedTensor t = ss::shard(x, 4, 2, 0, 1);
  ss::ShardedTensor p{{64, 8}, 4, 2, 0, -1, ss::MeshAxis::model, {}};
  for (const auto& b : t.blocks) p.blocks.push_back(b.reshaped({16, 8}));
  const auto [out, rec] = ss::all_reduce(p, ss::MeshAxis::model, ss::Pass::forward);
  EXPECT_EQ(rec.bytes(), 512);
  EXPECT_EQ(rec.group, 2);
}

TEST(Collectives, AllToAll) {
  // n = E = 1: identity
  const Tensor one = st::random_tensor({1, 1, 3, 2}, 2);
  const auto [same, r0] = ss::all_to_all(ss::shard(one, 1, 1, 0, -1), 1, ss::Pass::forward);
  EXPECT_TRUE(ss::bit_equal(ss::unshard(same), one));
  EXPECT_EQ(r0.bytes(), 0);

  // n = E = 2, C = 1, d = 2 in bf16: 8 bytes per core
  const Tensor buf = st::random_tensor({2, 2, 1, 2}, 3);
  const auto src = ss::shard(buf, 2, 1, 0, -1);
  const auto [moved, rec] = ss::all_to_all(src, 1, ss::Pass::forward, 2);
  EXPECT_EQ(rec.bytes(), 8);
  EXPECT_TRUE(ss::bit_equal(ss::unshard(moved), buf));
  // core 1 now holds expert 1's slots from both data rows
  EXPECT_EQ(moved.blocks[1][0], buf[2]);
  EXPECT_EQ(moved.blocks[1][3], buf[7]);
  const auto [back, rec2] = ss::all_to_all(moved, 0, ss::Pass::forward, 2);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_TRUE(ss::bit_equal(back.blocks[c], src.blocks[c]));
  EXPECT_EQ(rec2.bytes(), 8);
  EXPECT_THROW(ss::all_to_all(ss::shard(st::random_tensor({2, 3, 1, 2}, 4), 2, 1, 0, -1), 1, ss::Pass::forward),
               ss::InvalidArgument);
}

TEST(Sharding, RoundTripOverRandomShapes) {
  const ss::RngStream s(9);
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(s.uniform_at(trial * 8) * 4);
    const int m = 1 + static_cast<int>(s.uniform_at(trial * 8 + 1) * 3);
    const int rank = 1 + static_cast<int>(s.uniform_at(trial * 8 + 2) * 4);
    const int da = static_cast<int>(s.uniform_at(trial * 8 + 3) * (rank + 1)) - 1;
    int ma = static_cast<int>(s.uniform_at(trial * 8 + 4) * (rank + 1)) - 1;
    if (ma == da) ma = -1;
    ss::Shape shape;
    for (int a = 0; a < rank; ++a) {
      std::int64_t ext = 1 + static_cast<std::int64_t>(s.uniform_at(trial * 8 + 5 + static_cast<std::uint64_t>(a) * 1000) * 3);
      if (a == da) ext *= n;
      if (a == ma) ext *= m;
      shape.push_back(ext);
    }
    const Tensor t = st::random_tensor(shape, trial);
    const auto sh = ss::shard(t, n, m, da, ma);
    ASSERT_EQ(static_cast<int>(sh.blocks.size()), n * m);
    ASSERT_TRUE(ss::bit_equal(ss::unshard(sh), t)) << "trial " << trial;
  }
  EXPECT_THROW(ss::shard(Tensor({3, 2}), 2, 1, 0, -1), ss::InvalidArgument);
}

TEST(ShardedLayer, SingleCoreBitIdentical) {
  const auto p = make_params(8, 16, 2, 10);
  const Tensor x = st::random_tensor({16, 8}, 11);
  const auto cfg = router_config(2, 1.0);
  const ss::RngStream rng(12);
  const auto ref = ss::switch_ffn(x, p, cfg, rng, ss::Mode::train);
  for (Strategy s : ss::all_strategies()) {
    const int E = (s == Strategy::expert_data || s == Strategy::expert_model_data) ? 1 : 2;
    const auto pp = E == 2 ? p : make_params(8, 16, 1, 10);
    auto c = cfg;
    c.num_experts = E;
    const auto run = ss::run_sharded_switch_layer(x, pp, ss::make_mesh(1, 1, s, E), c, rng);
    const auto want = E == 2 ? ref : ss::switch_ffn(x, pp, c, rng, ss::Mode::train);
    EXPECT_TRUE(ss::bit_equal(run.out.y, want.y)) << ss::to_string(s);
    EXPECT_EQ(run.out.aux_loss, want.aux_loss);
    EXPECT_TRUE(run.ledger.empty());
  }
}

TEST(ShardedLayer, EightTokensTwoExperts) {
  const auto p = make_params(4, 8, 2, 13);
  const Tensor x = st::random_tensor({8, 4}, 14);
  const auto cfg = router_config(2, 1.0);
  const ss::RngStream rng(15);
  const auto mesh = ss::make_mesh(2, 1, Strategy::expert_data, 2);
  const auto run = ss::run_sharded_switch_layer(x, p, mesh, cfg, rng);
  const auto ref = ss::switch_ffn(x, p, ss::reference_config(mesh, cfg), rng, ss::Mode::train);
  EXPECT_LT(ss::max_abs_diff(run.out.y, ref.y), 1e-6);
  int fwd_a2a = 0;
  for (const auto& r : run.ledger)
    if (r.op == ss::CollectiveOp::all_to_all && r.pass == ss::Pass::forward) {
      ++fwd_a2a;
      // [E, C, d] per core with C = ceil(4 / 2) = 2
      EXPECT_EQ(r.elements, 2 * 2 * 4);
    }
  EXPECT_EQ(fwd_a2a, 2);
}

TEST(ShardedLayer, AllStrategiesMatchReference) {
  for (const auto& c : cases())
    for (bool selective : {false, true}) {
      if (selective && c.m > 1) continue;
      const auto p = make_params(8, 16, c.E, 20 + static_cast<std::uint64_t>(c.E));
      const Tensor x = st::random_tensor({32, 8}, 21, 2.0);
      auto cfg = router_config(c.E, 1.0);
      cfg.selective_precision = selective;
      cfg.ntlb_stages = c.E > 2 ? 1 : 0;
      const ss::RngStream rng(22);
      const auto mesh = ss::make_mesh(c.n, c.m, c.strategy, c.E);
      const Tensor dy = st::random_tensor({32, 8}, 23);
      const auto run = ss::run_sharded_switch_layer(x, p, mesh, cfg, rng, ss::Mode::train, &dy);
      const auto ref = ss::switch_ffn_forward(x, p, ss::reference_config(mesh, cfg), rng, ss::Mode::train);
      const std::string label = name(c) + (selective ? " selective" : "");
      if (c.m == 1) {
        EXPECT_TRUE(ss::bit_equal(run.out.y, ref.out.y)) << label;
      }
      EXPECT_LT(ss::max_abs_diff(run.out.y, ref.out.y), 1e-6) << label;
      EXPECT_NEAR(run.out.aux_loss, ref.out.aux_loss, 1e-7) << label;
      EXPECT_DOUBLE_EQ(run.out.dropped_fraction, ref.out.dropped_fraction) << label;

      ASSERT_TRUE(run.has_grads);
      const auto g = ss::switch_ffn_backward(ref.cache, p, dy, 1.0f);
      // gradient all-to-alls travel in bf16 under selective precision
      const double tol = selective && mesh.experts_sharded() && c.n > 1 ? 3e-2 : 1e-5;
      EXPECT_LT(max_rel(run.grads.dx, g.dx), tol) << label;
      EXPECT_LT(max_rel(run.grads.d_router, g.d_router), tol) << label;
      for (int e = 0; e < c.E; ++e) {
        EXPECT_LT(max_rel(run.grads.d_experts[static_cast<std::size_t>(e)].w_in, g.d_experts[static_cast<std::size_t>(e)].w_in), tol)
            << label << " expert " << e;
        EXPECT_LT(max_rel(run.grads.d_experts[static_cast<std::size_t>(e)].w_out, g.d_experts[static_cast<std::size_t>(e)].w_out), tol)
            << label << " expert " << e;
      }
    }
}

TEST(ShardedLayer, LedgerMatchesAnalyticReport) {
  for (const auto& c : cases())
    for (bool selective : {false, true}) {
      const auto p = make_params(8, 16, c.E, 30);
      const Tensor x = st::random_tensor({32, 8}, 31);
      auto cfg = router_config(c.E, 1.25);
      cfg.selective_precision = selective;
      const auto mesh = ss::make_mesh(c.n, c.m, c.strategy, c.E);
      const Tensor dy = st::random_tensor({32, 8}, 32);
      const auto run = ss::run_sharded_switch_layer(x, p, mesh, cfg, ss::RngStream(33), ss::Mode::train, &dy);
      const int C = ss::expert_capacity(32 / c.n, c.E, 1.25);
      const auto report =
          ss::comm_cost_report(mesh, 32, 8, 16, c.E, C, selective ? ss::Precision::bf16 : ss::Precision::full);
      EXPECT_EQ(ss::summarize_ledger(mesh, C, run.ledger), report) << name(c);
      for (const auto& r : run.ledger) EXPECT_GT(r.elements, 0);
    }
}

TEST(ShardedLayer, Validation) {
  const auto p = make_params(8, 16, 2, 40);
  const auto cfg = router_config(2, 1.0);
  EXPECT_THROW(ss::run_sharded_switch_layer(st::random_tensor({30, 8}, 1), p, ss::make_mesh(4, 1, Strategy::data, 2),
                                            cfg, ss::RngStream(1)),
               ss::InvalidArgument);
  EXPECT_THROW(ss::run_sharded_switch_layer(st::random_tensor({32, 8}, 1), p,
                                            ss::make_mesh(1, 3, Strategy::model, 2), cfg, ss::RngStream(1)),
               ss::InvalidArgument);
  auto grouped = cfg;
  grouped.routing_groups = 2;
  EXPECT_THROW(ss::run_sharded_switch_layer(st::random_tensor({32, 8}, 1), p, ss::make_mesh(1, 1, Strategy::data, 2),
                                            grouped, ss::RngStream(1)),
               ss::InvalidArgument);
}

TEST(CommReport, KnownVolumes) {
  const auto find = [](const std::vector<ss::CommCostRow>& rows, ss::CollectiveOp op, ss::Pass pass) {
    for (const auto& r : rows)
      if (r.op == op && r.pass == pass) return r.bytes;
    return std::int64_t{-1};
  };
  const auto data = ss::comm_cost_report(ss::make_mesh(4, 1, Strategy::data, 2), 64, 8, 16, 2, 8, ss::Precision::full);
  EXPECT_EQ(find(data, ss::CollectiveOp::all_reduce, ss::Pass::forward), 0);
  EXPECT_EQ(find(data, ss::CollectiveOp::all_to_all, ss::Pass::forward), 0);
  // gradients of router (8*2) and experts (2 * 2*8*16) in binary32
  EXPECT_EQ(find(data, ss::CollectiveOp::all_reduce, ss::Pass::backward), (16 + 512) * 4);

  const auto model = ss::comm_cost_report(ss::make_mesh(1, 2, Strategy::model, 1), 8, 4, 8, 1, 8, ss::Precision::full);
  EXPECT_EQ(find(model, ss::CollectiveOp::all_reduce, ss::Pass::forward), 128);

  const auto ed = ss::comm_cost_report(ss::make_mesh(2, 1, Strategy::expert_data, 2), 16, 4, 8, 2, 4, ss::Precision::bf16);
  // dispatch and return all-to-all, 64 bytes each
  EXPECT_EQ(find(ed, ss::CollectiveOp::all_to_all, ss::Pass::forward), 2 * 64);
}

TEST(CommReport, CsvLayout) {
  std::ostringstream os;
  ss::write_comm_csv(os, ss::comm_cost_report(ss::make_mesh(2, 1, Strategy::expert_data, 2), 16, 4, 8, 2, 4,
                                               ss::Precision::bf16));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "strategy,n,m,E,C,op,pass,bytes");
  std::getline(is, line);
  EXPECT_EQ(line, "expert+data,2,1,2,4,all_to_all,forward,128");
  int rows = 1;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 4);
}
