#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tabret/train.hpp"

namespace tabret {
namespace {

using testing::gradient_cases;
using testing::random_matrix;

// Direct evaluation of -log(exp(s_g) / sum_j exp(s_j)) in long double.
double naive_loss(const Matrix& s, const std::vector<std::size_t>& gold,
                  const std::vector<std::vector<std::size_t>>& excluded) {
  long double total = 0.0L;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    long double denom = 0.0L;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const auto& ex = excluded.empty() ? std::vector<std::size_t>{} : excluded[static_cast<std::size_t>(i)];
      if (std::find(ex.begin(), ex.end(), static_cast<std::size_t>(j)) != ex.end()) continue;
      denom += std::exp(static_cast<long double>(s(i, j)));
    }
    const long double num = std::exp(static_cast<long double>(s(i, static_cast<Eigen::Index>(gold[i]))));
    total += -std::log(num / denom);
  }
  return static_cast<double>(total / static_cast<long double>(s.rows()));
}

TEST(ContrastiveLoss, SingleCandidateIsZero) {
  Matrix s(1, 1);
  s << 3.7;
  const std::vector<std::size_t> gold = {0};
  EXPECT_DOUBLE_EQ(contrastive_loss(s, gold), 0.0);
}

TEST(ContrastiveLoss, TwoEqualScoresGiveLogTwo) {
  Matrix s(1, 2);
  s << 0.4, 0.4;
  const std::vector<std::size_t> gold = {1};
  EXPECT_NEAR(contrastive_loss(s, gold), std::log(2.0), 1e-15);
}

TEST(ContrastiveLoss, MatchesDirectSoftmax) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rows = static_cast<Eigen::Index>(1 + rng.below(5));
    const auto cols = static_cast<Eigen::Index>(1 + rng.below(7));
    const Matrix s = random_matrix(rng, rows, cols, 3.0);
    std::vector<std::size_t> gold;
    std::vector<std::vector<std::size_t>> excluded;
    for (Eigen::Index i = 0; i < rows; ++i) {
      gold.push_back(rng.below(static_cast<std::size_t>(cols)));
      std::vector<std::size_t> ex;
      for (std::size_t j = 0; j < static_cast<std::size_t>(cols); ++j) {
        if (j != gold.back() && rng.below(4) == 0) ex.push_back(j);
      }
      excluded.push_back(ex);
    }
    EXPECT_NEAR(contrastive_loss(s, gold), naive_loss(s, gold, {}), 1e-12);
    EXPECT_NEAR(contrastive_loss(s, gold, excluded), naive_loss(s, gold, excluded), 1e-12);
  }
}

TEST(ContrastiveLoss, StableForLargeScores) {
  Matrix s(1, 3);
  s << 1000.0, 999.0, -1000.0;
  const std::vector<std::size_t> gold = {0};
  EXPECT_NEAR(contrastive_loss(s, gold), std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(ContrastiveLoss, InvariantUnderCandidatePermutation) {
  Rng rng(5);
  const Matrix s = random_matrix(rng, 3, 5, 2.0);
  const std::vector<std::size_t> gold = {0, 3, 1};
  const std::vector<std::size_t> perm = {4, 2, 0, 1, 3};  // new column j holds old column perm[j]
  Matrix t(3, 5);
  std::vector<std::size_t> where(5);
  for (std::size_t j = 0; j < 5; ++j) {
    t.col(static_cast<Eigen::Index>(j)) = s.col(static_cast<Eigen::Index>(perm[j]));
    where[perm[j]] = j;
  }
  std::vector<std::size_t> moved;
  for (auto g : gold) moved.push_back(where[g]);
  EXPECT_NEAR(contrastive_loss(s, gold), contrastive_loss(t, moved), 1e-14);
}

TEST(ContrastiveLoss, GradientMatchesDifferences) {
  Rng rng(3);
  Matrix s = random_matrix(rng, 3, 4, 1.5);
  const std::vector<std::size_t> gold = {2, 0, 3};
  const std::vector<std::vector<std::size_t>> excluded = {{1}, {}, {0, 2}};
  const Matrix g = contrastive_loss_grad(s, gold, excluded);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double saved = s(i, j);
      s(i, j) = saved + h;
      const double up = contrastive_loss(s, gold, excluded);
      s(i, j) = saved - h;
      const double down = contrastive_loss(s, gold, excluded);
      s(i, j) = saved;
      EXPECT_NEAR(g(i, j), (up - down) / (2 * h), 1e-8);
    }
  }
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_EQ(g(2, 0), 0.0);
}

TEST(ContrastiveLoss, RejectsBadInputs) {
  Matrix s(1, 2);
  s << 0.0, std::nan("");
  const std::vector<std::size_t> gold = {0};
  EXPECT_THROW(contrastive_loss(s, gold), NumericError);
  s << 0.0, 1.0;
  const std::vector<std::size_t> out_of_range = {2};
  EXPECT_THROW(contrastive_loss(s, out_of_range), ValidationError);
  EXPECT_THROW(contrastive_loss(s, gold, {{0}}), ValidationError);
}

TEST(Backward, MatchesFiniteDifferences) {
  std::set<std::string> covered;
  for (const auto& c : gradient_cases(1)) {
    const auto report = testing::gradient_check(c);
    EXPECT_LT(report.max_rel_error, 1e-4) << c.label << " worst slot " << report.worst;
    EXPECT_GT(report.entries, 0u) << c.label;
    covered.insert(report.slots.begin(), report.slots.end());
  }
  for (const char* slot : {"seeds", "question_pool.u", "question_pool.b", "table_pool.u", "table_pool.b",
                           "projection", "vocab"}) {
    EXPECT_TRUE(covered.contains(slot)) << slot;
  }
}

TEST(Backward, LossEqualsForwardLoss) {
  for (const auto& c : gradient_cases(2)) {
    const Batch batch = c.batch();
    const Encoder encoder(c.params);
    const double forward = contrastive_loss(batch_scores(batch, encoder), c.gold, c.excluded);
    EXPECT_NEAR(backward(batch, c.params, c.trainable).first, forward, 1e-12) << c.label;
  }
}

TEST(Backward, ThreadCountDoesNotChangeGradients) {
  for (const auto& c : gradient_cases(3)) {
    const Batch batch = c.batch();
    const auto [l1, g1] = backward(batch, c.params, c.trainable, nullptr, 1);
    const auto [l3, g3] = backward(batch, c.params, c.trainable, nullptr, 3);
    EXPECT_EQ(l1, l3);
    EXPECT_TRUE(g1.seeds == g3.seeds) << c.label;
    EXPECT_TRUE(g1.projection == g3.projection) << c.label;
    EXPECT_TRUE(g1.vocab == g3.vocab) << c.label;
    EXPECT_TRUE(g1.table_u == g3.table_u) << c.label;
  }
}

TEST(Backward, OnlyTrainableClassesGetGradients) {
  auto cases = gradient_cases(4);
  for (auto& c : cases) {
    Trainable frozen{false, false, false, false};
    const auto [loss, g] = backward(c.batch(), c.params, frozen);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_EQ(g.seeds.size(), 0);
    EXPECT_EQ(g.question_u.size(), 0);
    EXPECT_EQ(g.table_u.size(), 0);
    EXPECT_EQ(g.projection.size(), 0);
    EXPECT_EQ(g.vocab.size(), 0);

    Trainable seeds_only{true, false, false, false};
    const auto [l2, g2] = backward(c.batch(), c.params, seeds_only);
    EXPECT_EQ(g2.seeds.size() > 0, c.params.uses_seeds()) << c.label;
    EXPECT_EQ(g2.projection.size(), 0);
  }
}

TEST(Backward, IdenticalCandidatesGiveZeroGradient) {
  // A single question scored against two copies of its gold table: the
  // softmax is uniform regardless of parameters, so every gradient vanishes.
  ModelConfig config;
  config.embedder.dim = 8;
  config.num_seeds = 3;
  config.projection_dim = 4;
  config.init_seed = 9;
  ModelParams params = ModelParams::initialize(config);
  DistinctTable t{"a", {"team", "city"}, {{"lions", "paris"}}, {"a"}};
  const LinearizedTable lin = linearize_table(t, Tokenizer{});
  const std::vector<LinearizedEntry> tables = {{"a", lin}, {"b", lin}};
  Batch batch;
  batch.questions.push_back(prepare_question("q", "which team plays in paris", false));
  batch.candidates = {&tables[0], &tables[1]};
  batch.gold = {0};
  batch.excluded = {{}};
  const auto [loss, g] = backward(batch, params);
  EXPECT_NEAR(loss, std::log(2.0), 1e-12);
  EXPECT_LE(g.max_abs(), 1e-15);
}

TEST(Backward, ExcludedGoldDoesNotEnterTheNormalizer) {
  auto c = gradient_cases(5).front();
  ASSERT_GE(c.tables.size(), 3u);
  c.excluded.assign(c.questions.size(), {});
  const double open = backward(c.batch(), c.params, c.trainable).first;
  for (std::size_t i = 0; i < c.questions.size(); ++i) c.excluded[i] = {(c.gold[i] + 1) % c.tables.size()};
  const double masked = backward(c.batch(), c.params, c.trainable).first;
  EXPECT_LT(masked, open);
}

TEST(Backward, NonFiniteParametersAreReported) {
  auto c = gradient_cases(6)[1];
  c.params.seed_bank.seeds(0, 0) = std::numeric_limits<double>::infinity();
  try {
    backward(c.batch(), c.params, c.trainable);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_FALSE(std::string(e.what()).empty());
  }
}

TEST(BatchBuilder, CandidatesAreTheBatchGoldsWithoutNegatives) {
  const Tokenizer tok;
  std::vector<LinearizedEntry> tables;
  for (const char* id : {"a", "b", "c", "d"}) {
    tables.push_back({id, linearize_table(DistinctTable{id, {"team"}, {{id}}, {id}}, tok)});
  }
  const BatchBuilder builder(tables);
  const std::vector<TokenizedQuestion> qs = {prepare_question("q1", "x", false),
                                             prepare_question("q2", "y", false),
                                             prepare_question("q3", "z", false)};
  const std::vector<std::vector<std::string>> golds = {{"c"}, {"a", "c"}, {"c"}};
  const Batch b = builder.build(qs, golds);
  ASSERT_EQ(b.candidates.size(), 2u);
  EXPECT_EQ(b.candidates[0]->id, "c");
  EXPECT_EQ(b.candidates[1]->id, "a");
  EXPECT_EQ(b.gold, (std::vector<std::size_t>{0, 1, 0}));
  EXPECT_EQ(b.excluded, (std::vector<std::vector<std::size_t>>{{}, {0}, {}}));

  const std::vector<std::vector<std::string>> negatives = {{"d"}, {"c"}, {"b", "d"}};
  const Batch hn = builder.build(qs, golds, negatives);
  ASSERT_EQ(hn.candidates.size(), 4u);
  EXPECT_EQ(hn.candidates[2]->id, "d");
  EXPECT_EQ(hn.candidates[3]->id, "b");

  const std::vector<std::vector<std::string>> unknown = {{"zz"}, {"a"}, {"a"}};
  EXPECT_THROW(builder.build(qs, unknown), ValidationError);
}

ModelParams scalar_params(double x) {
  ModelParams p;
  p.seed_bank.seeds = Matrix::Constant(1, 1, x);
  return p;
}

TEST(Adam, ZeroGradientOnlyDecaysDecayedBlocks) {
  ModelConfig config;
  config.embedder.dim = 4;
  config.projection_dim = 3;
  config.init_seed = 2;
  ModelParams params = ModelParams::initialize(config);
  const ModelParams before = params;
  Gradients g = Gradients::zeros(params, Trainable{});
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.weight_decay = 0.5;
  tc.warmup_ratio = 0.0;
  AdamState state;
  adam_step(params, g, tc, state, 1, 10);
  EXPECT_TRUE(params.seed_bank.seeds == before.seed_bank.seeds);
  const Matrix expected = before.projection.w * (1.0 - 0.1 * 0.5);
  EXPECT_LE((params.projection.w - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Adam, FirstStepMovesByTheLearningRate) {
  ModelParams p = scalar_params(0.0);
  Gradients g;
  g.seeds = Matrix::Constant(1, 1, -3.2);
  TrainConfig tc;
  tc.learning_rate = 0.01;
  tc.warmup_ratio = 0.0;
  AdamState state;
  adam_step(p, g, tc, state, 1, 100);
  EXPECT_NEAR(p.seed_bank.seeds(0, 0), 0.01, 1e-10);
}

TEST(Adam, MinimizesAQuadratic) {
  ModelParams p = scalar_params(1.0);
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.warmup_ratio = 0.0;
  AdamState state;
  for (std::size_t t = 1; t <= 100; ++t) {
    Gradients g;
    g.seeds = Matrix::Constant(1, 1, 2.0 * p.seed_bank.seeds(0, 0));
    adam_step(p, g, tc, state, t, 100);
  }
  EXPECT_LT(std::abs(p.seed_bank.seeds(0, 0)), 0.2);
}

TEST(Adam, WarmupIsLinear) {
  TrainConfig tc;
  tc.learning_rate = 1.0;
  tc.warmup_ratio = 0.1;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(tc, 1, 100), 0.1);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(tc, 5, 100), 0.5);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(tc, 10, 100), 1.0);
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(tc, 11, 100), 1.0);
  tc.warmup_ratio = 0.0;
  EXPECT_DOUBLE_EQ(scheduled_learning_rate(tc, 1, 100), 1.0);
}

TEST(TrainConfig, RejectsOutOfRangeSettings) {
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = ok;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = ok;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = ok;
  bad.warmup_ratio = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = ok;
  bad.hard_negatives.enabled = true;
  bad.hard_negatives.per_question = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
}

struct MiningFixture {
  Corpus corpus;
  ModelParams params;
  std::vector<TokenizedQuestion> questions;
  std::vector<std::vector<std::string>> golds;
};

MiningFixture mining_fixture() {
  MiningFixture f;
  std::vector<RawTable> raw = {
      {"t1", std::nullopt, {"team", "city"}, {{"lions", "paris"}}, {}},
      {"t2", std::nullopt, {"team", "stadium"}, {{"lions", "arena"}}, {}},
      {"t3", std::nullopt, {"film", "year"}, {{"heat", "1995"}}, {}},
      {"t4", std::nullopt, {"album", "label"}, {{"blue", "verve"}}, {}},
  };
  f.corpus = merge_same_header(raw);
  ModelConfig config;
  config.embedder.dim = 32;
  config.mode = Mode::Explicit;
  config.init_seed = 4;
  f.params = ModelParams::initialize(config);
  f.questions = {prepare_question("q1", "which team is from paris", true)};
  f.golds = {{"t1"}};
  return f;
}

TEST(HardNegatives, PicksTheClosestNonGoldTables) {
  const auto f = mining_fixture();
  const Encoder encoder(f.params);
  const Index index = build_index(f.corpus, encoder, 1);
  const auto mined = mine_hard_negatives(encoder, index, f.questions, f.golds, 1);
  ASSERT_EQ(mined.size(), 1u);
  ASSERT_EQ(mined[0].size(), 1u);
  // The next-ranked table after the gold in the full ranking.
  const auto ranking = brute_force_retrieve(encoder.encode_question(f.questions[0]).q, index);
  std::string expected;
  for (const auto& r : ranking) {
    if (r.distinct_id != "t1") {
      expected = r.distinct_id;
      break;
    }
  }
  EXPECT_EQ(mined[0][0], expected);
  EXPECT_EQ(mined[0][0], "t2");
}

TEST(HardNegatives, NeverReturnsGoldsAndIsDeterministic) {
  const auto f = mining_fixture();
  const Encoder encoder(f.params);
  const Index index = build_index(f.corpus, encoder, 1);
  const std::vector<std::vector<std::string>> all_gold = {{"t1", "t2"}};
  const auto a = mine_hard_negatives(encoder, index, f.questions, all_gold, 3);
  const auto b = mine_hard_negatives(encoder, index, f.questions, all_gold, 3, 2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a[0].size(), 2u);
  for (const auto& id : a[0]) EXPECT_TRUE(id != "t1" && id != "t2");
  const std::vector<std::vector<std::string>> everything = {{"t1", "t2", "t3", "t4"}};
  EXPECT_TRUE(mine_hard_negatives(encoder, index, f.questions, everything, 2)[0].empty());
}

testing::PreparedBenchmark small_benchmark(std::uint64_t seed) {
  SyntheticConfig sc;
  sc.seed = seed;
  sc.n_tables = 40;
  sc.vocab_size = 400;
  return testing::prepared_benchmark(sc);
}

ModelConfig small_model() {
  ModelConfig mc;
  mc.embedder.dim = 16;
  mc.embedder.seed = 7;
  mc.num_seeds = 3;
  mc.projection_dim = 16;
  mc.init_seed = 7;
  return mc;
}

TrainConfig small_train(std::size_t epochs) {
  TrainConfig tc;
  tc.learning_rate = 5e-2;
  tc.batch_size = 16;
  tc.max_epochs = epochs;
  tc.rng_seed = 1;
  return tc;
}

TEST(Train, ZeroEpochsReturnsTheInitialModel) {
  const auto b = small_benchmark(1);
  const ModelParams initial = ModelParams::initialize(small_model());
  const auto r = train(b.corpus, b.train, b.dev, small_train(0), initial);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.history[0].epoch, 0u);
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_TRUE(r.params.seed_bank.seeds == initial.seed_bank.seeds);
  EXPECT_TRUE(r.params.projection.w == initial.projection.w);
}

TEST(Train, KeepsTheBestDevEpochAndIsDeterministic) {
  const auto b = small_benchmark(2);
  const ModelParams initial = ModelParams::initialize(small_model());
  const auto r1 = train(b.corpus, b.train, b.dev, small_train(6), initial);
  const auto r2 = train(b.corpus, b.train, b.dev, small_train(6), initial);
  ASSERT_EQ(r1.history.size(), 7u);
  double best = 0.0;
  std::size_t best_epoch = 0;
  for (const auto& e : r1.history) {
    EXPECT_TRUE(std::isfinite(e.loss));
    if (e.dev_recall_at_1 >= best) {
      best = e.dev_recall_at_1;
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r1.best_epoch, best_epoch);
  const Encoder encoder(r1.params);
  EXPECT_DOUBLE_EQ(dev_recall_at_1(encoder, b.corpus, b.dev), best);
  EXPECT_LT(r1.history.back().loss, r1.history.front().loss);

  ASSERT_EQ(r2.history.size(), r1.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    EXPECT_EQ(r1.history[i].loss, r2.history[i].loss);
    EXPECT_EQ(r1.history[i].dev_recall_at_1, r2.history[i].dev_recall_at_1);
  }
  EXPECT_TRUE(r1.params.projection.w == r2.params.projection.w);
}

TEST(Train, PatienceFollowsTheStoppingRule) {
  const auto b = small_benchmark(3);
  auto tc = small_train(12);
  tc.patience = 1;
  const auto r = train(b.corpus, b.train, b.dev, tc, ModelParams::initialize(small_model()));
  // Replay the rule over the recorded history: stop at the first epoch that
  // fails to match or beat the best so far.
  double best = r.history.front().dev_recall_at_1;
  std::size_t expected_length = r.history.size();
  for (std::size_t e = 1; e < r.history.size(); ++e) {
    if (r.history[e].dev_recall_at_1 >= best) {
      best = r.history[e].dev_recall_at_1;
    } else {
      expected_length = e + 1;
      break;
    }
  }
  EXPECT_EQ(r.history.size(), expected_length);
  if (r.history.size() < 13u) EXPECT_LT(r.history.back().dev_recall_at_1, best);
}

TEST(Train, HardNegativeRunsAreDeterministic) {
  const auto b = small_benchmark(4);
  auto tc = small_train(3);
  tc.hard_negatives.enabled = true;
  tc.hard_negatives.remine_every = 2;
  const ModelParams initial = ModelParams::initialize(small_model());
  const auto r1 = train(b.corpus, b.train, b.dev, tc, initial);
  const auto r2 = train(b.corpus, b.train, b.dev, tc, initial);
  EXPECT_TRUE(r1.params.projection.w == r2.params.projection.w);
  EXPECT_EQ(r1.history.size(), 4u);
}

TEST(Train, UnknownGoldIsRejected) {
  auto b = small_benchmark(5);
  b.train.front().gold_table_ids = {"no-such-table"};
  EXPECT_THROW(train(b.corpus, b.train, b.dev, small_train(1), ModelParams::initialize(small_model())),
               ValidationError);
}

TEST(Train, VocabIsAttachedForVocabEmbedders) {
  const auto b = small_benchmark(6);
  auto mc = small_model();
  mc.embedder.kind = EmbedderKind::Vocab;
  const auto r = train(b.corpus, b.train, b.dev, small_train(1), ModelParams::initialize(mc));
  ASSERT_TRUE(r.params.vocab.has_value());
  EXPECT_TRUE(r.params.vocab->find(b.corpus.tables.front().headers.front()).has_value());
}

TEST(Train, HistoryIsJsonLines) {
  std::ostringstream out;
  write_history({{0, 1.5, 0.25}, {1, 1.0, 0.5}}, out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_NE(line.find("\"format\":\"tabret.history/1\""), std::string::npos);
    EXPECT_NE(line.find("\"dev_recall@1\""), std::string::npos);
    ++n;
  }
  EXPECT_EQ(n, 2u);
}

}  // namespace
}  // namespace tabret
