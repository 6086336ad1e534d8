// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "switchsim/errors.hpp"
#include "switchsim/trainer.hpp"
#include "test_helpers.hpp"

namespace ss = switchsim;
using ss::testing::random_tensor;

namespace {

ss::ModelConfig tiny_model() {
  ss::ModelConfig m;
  m.vocab = 16;
  m.d_model = 8;
  m.d_ff = 12;
  m.layers = 2;
  m.heads = 2;
  m.seq_len = 8;
  m.num_experts = 3;
  return m;
}

ss::TrainConfig tiny_train() {
  ss::TrainConfig t;
  t.batch_sequences = 4;
  t.eval_sequences = 8;
  t.clusters = 2;
  return t;
}

}  // namespace

// ---- corpus ----------------------------------------------------------------------

TEST(Corpus, SingleClusterBigramFrequenciesMatchTable) {
  const ss::RngStream rng(5);
  const auto task = ss::make_bigram_task(64, 1, false, rng.derive("tables"));
  const int width = task.ranges[0].second - task.ranges[0].first;
  const auto data = ss::gen_synthetic_corpus(task, 16, 62500, rng.derive("sequences"));
  std::vector<double> counts(static_cast<std::size_t>(width * width), 0.0), rows(static_cast<std::size_t>(width), 0.0);
  std::int64_t tokens = 0;
  for (const auto& s : data) {
    tokens += static_cast<std::int64_t>(s.tokens.size());
    for (std::size_t i = 1; i < s.tokens.size(); ++i) {
      counts[static_cast<std::size_t>(s.tokens[i - 1] * width + s.tokens[i])] += 1;
      rows[static_cast<std::size_t>(s.tokens[i - 1])] += 1;
    }
  }
  EXPECT_EQ(tokens, 1000000);
  double worst = 0.0;
  for (int i = 0; i < width; ++i)
    for (int j = 0; j < width; ++j)
      worst = std::max(worst, std::abs(counts[static_cast<std::size_t>(i * width + j)] / rows[static_cast<std::size_t>(i)] -
                                       task.tables[0].at(i, j)));
  EXPECT_LT(worst, 0.02);
}

TEST(Corpus, EmptyAndDeterministic) {
  const ss::RngStream rng(1);
  EXPECT_TRUE(ss::gen_synthetic_corpus(64, 4, 16, 0, rng).empty());
  const auto a = ss::gen_synthetic_corpus(64, 4, 16, 10, rng);
  const auto b = ss::gen_synthetic_corpus(64, 4, 16, 10, rng);
  ASSERT_EQ(a.size(), 10u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
}

TEST(Corpus, DisjointRangesStayInsideTheirCluster) {
  const auto task = ss::make_bigram_task(64, 4, true, ss::RngStream(2));
  ASSERT_EQ(task.ranges.size(), 4u);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(task.ranges[static_cast<std::size_t>(c)].first, c * 15);
    EXPECT_EQ(task.ranges[static_cast<std::size_t>(c)].second, (c + 1) * 15);
  }
  const auto data = ss::gen_synthetic_corpus(task, 16, 200, ss::RngStream(3));
  for (const auto& s : data)
    for (int t : s.tokens) {
      EXPECT_GE(t, task.ranges[static_cast<std::size_t>(s.cluster)].first);
      EXPECT_LT(t, task.ranges[static_cast<std::size_t>(s.cluster)].second);
      EXPECT_LT(t, 63);
    }
}

TEST(Corpus, RejectsBadArguments) {
  EXPECT_THROW(ss::make_bigram_task(2, 1, false, ss::RngStream(1)), ss::InvalidArgument);
  EXPECT_THROW(ss::make_bigram_task(64, 17, false, ss::RngStream(1)), ss::InvalidArgument);
}

// ---- masking ---------------------------------------------------------------------

TEST(Masking, CountsAndUntouchedPositions) {
  std::vector<int> seq(100);
  for (int i = 0; i < 100; ++i) seq[static_cast<std::size_t>(i)] = i % 50;
  const auto m = ss::mask_tokens(seq, 0.15, 63, ss::RngStream(4));
  ASSERT_EQ(m.positions.size(), 15u);
  EXPECT_TRUE(std::is_sorted(m.positions.begin(), m.positions.end()));
  std::vector<bool> masked(100, false);
  for (std::size_t k = 0; k < m.positions.size(); ++k) {
    const auto p = static_cast<std::size_t>(m.positions[k]);
    masked[p] = true;
    EXPECT_EQ(m.input[p], 63);
    EXPECT_EQ(m.targets[k], seq[p]);
  }
  for (std::size_t i = 0; i < 100; ++i)
    if (!masked[i]) EXPECT_EQ(m.input[i], seq[i]);
}

TEST(Masking, TinyRateStillMasksOne) {
  const auto m = ss::mask_tokens({1, 2, 3, 4}, 1e-6, 9, ss::RngStream(1));
  EXPECT_EQ(m.positions.size(), 1u);
}

TEST(Masking, RejectsEmptyAndBadRate) {
  EXPECT_THROW(ss::mask_tokens({}, 0.15, 0, ss::RngStream(1)), ss::InvalidArgument);
  EXPECT_THROW(ss::mask_tokens({1, 2}, 0.0, 0, ss::RngStream(1)), ss::InvalidArgument);
  EXPECT_THROW(ss::mask_tokens({1, 2}, 1.0, 0, ss::RngStream(1)), ss::InvalidArgument);
}

// ---- losses ----------------------------------------------------------------------

TEST(Losses, UniformLogitsGiveLogV) {
  const ss::Tensor logits({2, 4});
  EXPECT_NEAR(ss::neg_log_perplexity(logits, {0, 3}), -std::log(4.0), 1e-6);
  EXPECT_NEAR(ss::cross_entropy(logits, {1, 2}).loss, std::log(4.0), 1e-6);
}

TEST(Losses, NegLogPerplexityMatchesProductOracle) {
  const auto logits = random_tensor<double>({3, 5}, 8, 2.0);
  const std::vector<int> targets = {4, 0, 2};
  double prod = 1.0;
  for (int r = 0; r < 3; ++r) {
    double z = 0.0;
    for (int j = 0; j < 5; ++j) z += std::exp(logits.at(r, j));
    prod *= std::exp(logits.at(r, targets[static_cast<std::size_t>(r)])) / z;
  }
  EXPECT_NEAR(ss::neg_log_perplexity(logits, targets), std::log(prod) / 3.0, 1e-12);
}

TEST(Losses, DistillReducesToCrossEntropy) {
  const auto s = random_tensor<double>({4, 6}, 1, 2.0);
  const auto t = random_tensor<double>({4, 6}, 2, 2.0);
  const std::vector<int> y = {0, 5, 2, 2};
  const auto ce = ss::cross_entropy(s, y);
  const auto hard = ss::distill_loss(s, t, y, 1.0);
  EXPECT_DOUBLE_EQ(hard.loss, ce.loss);
  // a teacher that is (numerically) one-hot on the targets
  ss::TensorD onehot({4, 6});
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < 6; ++j) onehot.at(r, j) = j == y[static_cast<std::size_t>(r)] ? 200.0 : -200.0;
  const auto soft = ss::distill_loss(s, onehot, y, 0.75);
  EXPECT_NEAR(soft.loss, ce.loss, 1e-12);
  for (std::size_t i = 0; i < ce.grad.size(); ++i) EXPECT_NEAR(soft.grad[i], ce.grad[i], 1e-12);
}

TEST(Losses, DistillGradientMatchesFiniteDifferences) {
  auto s = random_tensor<double>({3, 5}, 3, 1.5);
  const auto t = random_tensor<double>({3, 5}, 4, 1.5);
  const std::vector<int> y = {1, 4, 0};
  const auto g = ss::distill_loss(s, t, y, 0.75).grad;
  const double h = 1e-3;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double keep = s[i];
    s[i] = keep + h;
    const double up = ss::distill_loss(s, t, y, 0.75).loss;
    s[i] = keep - h;
    const double dn = ss::distill_loss(s, t, y, 0.75).loss;
    s[i] = keep;
    const double fd = (up - dn) / (2 * h);
    EXPECT_LE(std::abs(fd - g[i]), 1e-4 * std::max({std::abs(fd), std::abs(g[i]), 1e-8})) << i;
  }
}

TEST(Losses, RejectsBadTargets) {
  const ss::Tensor logits({2, 4});
  EXPECT_THROW(ss::cross_entropy(logits, {0}), ss::InvalidArgument);
  EXPECT_THROW(ss::cross_entropy(logits, {0, 4}), ss::InvalidArgument);
  EXPECT_THROW(ss::distill_loss(logits, logits, {0, 1}, 1.5), ss::InvalidArgument);
}

// ---- model -----------------------------------------------------------------------

TEST(Model, ExpertPlacementAndNames) {
  ss::ModelConfig m = tiny_model();
  m.layers = 4;
  m.attention = ss::AttentionKind::switch_attention;
  const auto model = ss::init_model(m, ss::RngStream(1));
  EXPECT_FALSE(model.expert_ffn_at(0));
  EXPECT_TRUE(model.expert_ffn_at(1));
  EXPECT_TRUE(model.switch_attention_at(3));
  EXPECT_EQ(m.num_routed_layers(), 4);
  std::vector<std::string> names;
  for (const auto& [n, t] : model.named_params()) names.push_back(n);
  EXPECT_EQ(names.front(), "embedding");
  EXPECT_NE(std::find(names.begin(), names.end(), "block1.moe.expert2.w_out"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "block1.query.router"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "block0.ffn.w_in"), names.end());
  EXPECT_EQ(std::find(names.begin(), names.end(), "block1.attn.w_q"), names.end());

  m.attention_expert_form = ss::ExpertForm::ffn;
  m.attention_route_kv = true;
  EXPECT_EQ(m.num_routed_layers(), 8);
  names.clear();
  for (const auto& [n, t] : ss::init_model(m, ss::RngStream(1)).named_params()) names.push_back(n);
  EXPECT_NE(std::find(names.begin(), names.end(), "block1.value.expert1.w_out"), names.end());
  EXPECT_EQ(std::find(names.begin(), names.end(), "block1.attn.w_k"), names.end());
  EXPECT_NE(std::find(names.begin(), names.end(), "block0.attn.w_k"), names.end());
}

TEST(Model, ConfigValidation) {
  ss::ModelConfig m = tiny_model();
  m.heads = 3;
  EXPECT_THROW(m.validate(), ss::InvalidArgument);
  m = tiny_model();
  m.num_experts = 0;
  EXPECT_THROW(m.validate(), ss::InvalidArgument);
  EXPECT_THROW(ss::parse_ffn_kind("sparse"), ss::InvalidArgument);
  EXPECT_EQ(ss::parse_train_mode("distill"), ss::TrainMode::distill);
  m = tiny_model();
  m.attention_route_kv = true;
  EXPECT_THROW(m.validate(), ss::InvalidArgument);
  EXPECT_EQ(ss::parse_expert_form("ffn"), ss::ExpertForm::ffn);
  EXPECT_THROW(ss::parse_expert_form("conv"), ss::InvalidArgument);
}

namespace {

// Central differences over every 7th entry of each parameter whose name
// starts with `only` (all parameters when empty).
void expect_backward_matches_finite_differences(ss::ModelConfig m, double atol = 2e-3, const std::string& only = "") {
  m.dropout = 0.0;
  m.expert_dropout = 0.0;
  m.init_scale = 1.0;
  ss::RouterConfig r;
  r.policy.kind = ss::PolicyKind::argmax;
  r.capacity_factor = 4.0;
  r.num_experts = m.num_experts;
  ss::ToyModel model = ss::init_model(m, ss::RngStream(6));
  const auto task = ss::make_bigram_task(m.vocab, 2, true, ss::RngStream(1));
  const auto batch = ss::make_batch(ss::gen_synthetic_corpus(task, m.seq_len, 3, ss::RngStream(2)), 0.3, 15,
                                    ss::RngStream(3));
  const ss::RngStream rng(4);
  auto loss = [&](const ss::ToyModel& mm) {
    const auto f = ss::model_forward(mm, r, batch, rng, ss::Mode::train);
    return double(ss::cross_entropy(f.logits, batch.targets).loss) + f.aux_loss;
  };
  ss::ModelCache cache;
  const auto fwd = ss::model_forward(model, r, batch, rng, ss::Mode::train, &cache);
  const auto grads = ss::model_backward(model, cache, ss::cross_entropy(fwd.logits, batch.targets).grad);
  auto params = model.named_params();
  const auto gparams = grads.named_params();
  const double h = 1e-2;
  int checked = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].first.rfind(only, 0) != 0) continue;
    ss::Tensor& t = *params[p].second;
    for (std::size_t i = 0; i < t.size(); i += 7) {
      const float keep = t[i];
      t[i] = keep + static_cast<float>(h);
      const double up = loss(model);
      t[i] = keep - static_cast<float>(h);
      const double dn = loss(model);
      t[i] = keep;
      const double fd = (up - dn) / (2 * h), an = (*gparams[p].second)[i];
      EXPECT_NEAR(an, fd, atol + 2e-2 * std::abs(fd)) << params[p].first << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 20);
}

}  // namespace

TEST(Model, BackwardMatchesFiniteDifferences) { expect_backward_matches_finite_differences(tiny_model()); }

TEST(Model, RoutedAttentionBackwardMatchesFiniteDifferences) {
  ss::ModelConfig m = tiny_model();
  m.attention = ss::AttentionKind::switch_attention;
  m.attention_expert_form = ss::ExpertForm::ffn;
  m.attention_route_kv = true;
  // One expert per router: perturbations cannot flip a routing decision, so
  // this checks the wiring of the routed projections into the model.
  m.num_experts = 1;
  expect_backward_matches_finite_differences(m);
  // key gradients are small; check them on a tighter scale
  expect_backward_matches_finite_differences(m, 1e-4, "block1.key");
}

// ---- training --------------------------------------------------------------------

TEST(Training, TotalLossIsCrossEntropyPlusAux) {
  ss::Trainer tr(tiny_model(), {}, tiny_train(), 3);
  const auto rows = tr.run(5);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& row : rows) {
    EXPECT_DOUBLE_EQ(row.loss, row.cross_entropy + row.aux_loss);
    EXPECT_GT(row.aux_loss, 0.0);
    double s = 0.0;
    for (double v : row.f) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  ss::TrainConfig t = tiny_train();
  t.lr = 0.0;
  ss::Trainer tr(tiny_model(), {}, t, 3);
  const ss::ToyModel before = tr.model();
  tr.run(3);
  const auto a = before.named_params();
  const auto b = tr.model().named_params();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->storage(), b[i].second->storage()) << a[i].first;
}

TEST(Training, DeterministicForSeed) {
  ss::Trainer a(tiny_model(), {}, tiny_train(), 11), b(tiny_model(), {}, tiny_train(), 11), c(tiny_model(), {}, tiny_train(), 12);
  const auto ra = a.run(4), rb = b.run(4), rc = c.run(4);
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i].loss, rb[i].loss);
  EXPECT_NE(ra.back().loss, rc.back().loss);
}

TEST(Training, SingleExpertSwitchMatchesDenseCrossEntropy) {
  ss::ModelConfig sw = tiny_model();
  sw.num_experts = 1;
  const ss::ModelConfig dense = ss::dense_config(sw);
  ss::Trainer a(sw, {}, tiny_train(), 21), b(dense, {}, tiny_train(), 21);
  for (int s = 0; s < 20; ++s) {
    const auto ra = a.step(), rb = b.step();
    EXPECT_EQ(ra.cross_entropy, rb.cross_entropy) << s;
  }
}

TEST(Training, RestoreContinuesExactly) {
  ss::Trainer a(tiny_model(), {}, tiny_train(), 4);
  a.run(3);
  ss::Trainer b(tiny_model(), {}, tiny_train(), 4);
  b.restore(a.current_step(), a.model(), a.optimizer());
  EXPECT_EQ(a.step().loss, b.step().loss);
}

TEST(Training, TrainConfigValidation) {
  ss::TrainConfig t;
  t.mask_rate = 0.0;
  EXPECT_THROW(t.validate(64), ss::InvalidArgument);
  t = {};
  t.sentinel = 64;
  EXPECT_THROW(t.validate(64), ss::InvalidArgument);
  EXPECT_EQ(ss::TrainConfig{}.resolved_sentinel(64), 63);
}

TEST(Training, MetricsRowFormat) {
  EXPECT_EQ(ss::metrics_csv_header(2),
            "schema_version,step,loss,cross_entropy,aux_loss,neg_log_perplexity,dropped_fraction,f_0,f_1");
  ss::MetricRow row;
  row.step = 7;
  row.loss = 1.5;
  row.cross_entropy = 1.25;
  row.aux_loss = 0.25;
  row.neg_log_perplexity = -1.25;
  row.f = {0.5, 0.5};
  std::ostringstream os;
  ss::write_metric_row(os, row, 2);
  EXPECT_EQ(os.str(), "1,7,1.5,1.25,0.25,-1.25,0,0.5,0.5\n");
}

// ---- distillation ----------------------------------------------------------------

TEST(Distill, StudentCopiesNonExpertWeights) {
  const ss::ModelConfig m = tiny_model();
  const auto teacher = ss::init_model(m, ss::RngStream(1));
  const auto fresh = ss::init_model(ss::dense_config(m), ss::RngStream(2));
  const auto student = ss::init_student_from_teacher(teacher, fresh);
  EXPECT_EQ(student.embedding.storage(), teacher.embedding.storage());
  EXPECT_EQ(student.output.storage(), teacher.output.storage());
  EXPECT_EQ(student.blocks[0].w_in.storage(), teacher.blocks[0].w_in.storage());
  EXPECT_EQ(student.blocks[1].attn.w_k.storage(), teacher.blocks[1].attn.w_k.storage());
  // expert position keeps the student's own FFN
  EXPECT_EQ(student.blocks[1].w_in.storage(), fresh.blocks[1].w_in.storage());
}

TEST(Distill, DenseTeacherWithoutExpertsCopiesEverything) {
  const ss::ModelConfig m = ss::dense_config(tiny_model());
  const auto teacher = ss::init_model(m, ss::RngStream(1));
  const auto student = ss::init_student_from_teacher(teacher, ss::init_model(m, ss::RngStream(2)));
  const auto a = teacher.named_params();
  const auto b = student.named_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->storage(), b[i].second->storage()) << a[i].first;
}

TEST(Distill, ShapeMismatchNamesTheLayer) {
  const ss::ModelConfig m = tiny_model();
  ss::ModelConfig other = ss::dense_config(m);
  other.d_ff = 20;
  const auto teacher = ss::init_model(m, ss::RngStream(1));
  try {
    ss::init_student_from_teacher(teacher, ss::init_model(other, ss::RngStream(2)));
    FAIL() << "expected a shape error";
  } catch (const ss::InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("block0.ffn.w_in"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ss::init_student_from_teacher(teacher, ss::init_model(m, ss::RngStream(2))), ss::InvalidArgument);
}

TEST(Distill, TrainerUsesMixedLoss) {
  const ss::ModelConfig m = tiny_model();
  ss::Trainer teacher(m, {}, tiny_train(), 1);
  teacher.run(3);
  ss::TrainConfig t = tiny_train();
  t.mode = ss::TrainMode::distill;
  ss::Trainer s1(ss::dense_config(m), {}, t, 2), s2(ss::dense_config(m), {}, t, 2);
  s1.set_teacher(&teacher.model());
  const auto with = s1.step(), without = s2.step();
  EXPECT_NE(with.cross_entropy, without.cross_entropy);
  EXPECT_EQ(with.aux_loss, 0.0);
}

TEST(Training, LossFallsAcrossTwentyStepWindows) {
  // One seed reaches its floor near step 140 and then wobbles by ~0.005, so
  // the window means are also averaged over three seeds.
  std::vector<double> windows(10, 0.0);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    ss::Trainer tr(ss::ModelConfig{}, {}, ss::TrainConfig{}, seed);
    const auto rows = tr.run(200);
    for (std::size_t w = 0; w < 10; ++w)
      for (std::size_t i = 0; i < 20; ++i) windows[w] += rows[w * 20 + i].loss / 60.0;
  }
  for (std::size_t w = 1; w < windows.size(); ++w) EXPECT_LT(windows[w], windows[w - 1]) << "window " << w;
}
