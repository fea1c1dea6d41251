#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace tabret::testing {
namespace {

constexpr std::string_view kHeaderPool[] = {"team", "city", "year", "score", "club name", "points",
                                            "rank", "player", "Team", " city ", "venue", "date"};
constexpr std::string_view kWordPool[] = {"team", "city", "score", "year", "club", "river", "film", "song",
                                          "actor", "nation", "album", "coach"};
constexpr std::string_view kFunctionWords[] = {"the", "of", "which", "in", "on"};

std::string pick(Rng& rng, std::span<const std::string_view> pool) {
  return std::string(pool[rng.below(pool.size())]);
}

std::string phrase(Rng& rng, std::size_t max_words) {
  std::string out;
  const std::size_t n = 1 + rng.below(max_words);
  for (std::size_t i = 0; i < n; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += pick(rng, kWordPool);
  }
  return out;
}

struct Slot {
  std::string name;
  double* param;
  double analytic;
};

std::vector<Slot> slots_of(ModelParams& p, const Gradients& g) {
  std::vector<Slot> out;
  auto add = [&](const std::string& name, double* param, const double* grad, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) out.push_back({name, param + i, grad[i]});
  };
  add("seeds", p.seed_bank.seeds.data(), g.seeds.data(), g.seeds.size());
  if (g.question_u.size() > 0) {
    add("question_pool.u", p.question_pool.u.data(), g.question_u.data(), g.question_u.size());
    add("question_pool.b", &p.question_pool.b, &g.question_b, 1);
  }
  if (g.table_u.size() > 0) {
    add("table_pool.u", p.table_pool.u.data(), g.table_u.data(), g.table_u.size());
    add("table_pool.b", &p.table_pool.b, &g.table_b, 1);
  }
  add("projection", p.projection.w.data(), g.projection.data(), g.projection.size());
  if (p.vocab) add("vocab", p.vocab->vectors().data(), g.vocab.data(), g.vocab.size());
  return out;
}

double batch_loss(const ModelParams& params, const GradCase& c, const Batch& batch) {
  const Encoder encoder(params);
  return contrastive_loss(batch_scores(batch, encoder), c.gold, c.excluded);
}

void update_gap(double top, double value, double& gap) {
  const double diff = top - value;
  if (diff > 1e-12) gap = std::min(gap, diff);
}

double max_gap_of(const Matrix& m) {
  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double top = m.row(i).maxCoeff();
    for (Eigen::Index j = 0; j < m.cols(); ++j) update_gap(top, m(i, j), gap);
  }
  return gap;
}

double pooled_max_gap(const SideEncoding& enc, const PoolingSpec& pooling) {
  double gap = std::numeric_limits<double>::infinity();
  if (pooling.kind != PoolingKind::Max) return gap;
  for (const auto& g : enc.groups) {
    if (g.op != GroupOp::Pooled) continue;
    const Matrix rows = enc.context.middleRows(static_cast<Eigen::Index>(g.span.start),
                                               static_cast<Eigen::Index>(g.span.size()));
    gap = std::min(gap, max_gap_of(rows.transpose()));
  }
  return gap;
}

struct CaseShape {
  std::string label;
  Mode mode;
  std::size_t n;
  std::size_t d;
  PoolingKind qpool;
  PoolingKind tpool;
  std::size_t proj;
  bool vocab;
  std::size_t window;
  double alpha;
  Ablation ablation;
  bool ties;
  std::size_t tables;
};

GradCase build_case(const CaseShape& s, Rng& rng) {
  GradCase c;
  c.label = s.label;
  c.structural_ties = s.ties;
  ModelConfig config;
  config.embedder.kind = s.vocab ? EmbedderKind::Vocab : EmbedderKind::Hashed;
  config.embedder.dim = s.d;
  config.embedder.seed = rng.next();
  config.embedder.context_window = s.window;
  config.embedder.context_alpha = s.alpha;
  config.mode = s.mode;
  config.ablation = s.ablation;
  config.num_seeds = s.n;
  config.question_pooling = s.qpool;
  config.table_pooling = s.tpool;
  config.projection_dim = s.proj;
  config.init_seed = rng.next();
  c.params = ModelParams::initialize(config);

  // Attentive scorers start at zero; move them off the symmetric point.
  const auto d = static_cast<Eigen::Index>(s.d);
  if (s.qpool == PoolingKind::Attentive) {
    c.params.question_pool.u = random_matrix(rng, d, 1, 1.5).col(0);
    c.params.question_pool.b = rng.normal();
  }
  if (s.tpool == PoolingKind::Attentive) {
    c.params.table_pool.u = random_matrix(rng, d, 1, 1.5).col(0);
    c.params.table_pool.b = rng.normal();
  }
  if (c.params.uses_seeds()) c.params.seed_bank.seeds = random_matrix(rng, c.params.seed_bank.seeds.rows(), d, 1.5);

  const Tokenizer tokenizer;
  for (std::size_t t = 0; t < s.tables; ++t) {
    DistinctTable table;
    table.distinct_id = "t" + std::to_string(t);
    const std::size_t cols = 2 + rng.below(2);
    for (std::size_t j = 0; j < cols; ++j) table.headers.push_back(phrase(rng, 2));
    if (s.ties) table.headers.push_back(table.headers.front());
    const std::size_t rows = 1 + rng.below(2);
    for (std::size_t r = 0; r < rows; ++r) {
      Row row;
      for (std::size_t j = 0; j < table.headers.size(); ++j) row.push_back(phrase(rng, 2));
      if (s.ties) row.back() = row.front();
      table.rows.push_back(std::move(row));
    }
    c.tables.push_back({table.distinct_id, linearize_table(table, tokenizer)});
  }
  if (s.ties) c.tables.push_back({"t_copy", c.tables.front().table});

  const std::size_t nq = 2 + rng.below(2);
  for (std::size_t q = 0; q < nq; ++q) {
    std::string text;
    const std::size_t len = 3 + rng.below(4);
    for (std::size_t l = 0; l < len; ++l) {
      if (!text.empty()) text.push_back(' ');
      text += rng.below(3) == 0 ? pick(rng, kFunctionWords) : pick(rng, kWordPool);
    }
    c.questions.push_back(prepare_question("q" + std::to_string(q), text, s.mode == Mode::Explicit));
    c.gold.push_back(rng.below(c.tables.size()));
    std::vector<std::size_t> ex;
    if (c.tables.size() > 2 && rng.below(3) == 0) {
      const std::size_t e = (c.gold.back() + 1) % c.tables.size();
      ex.push_back(e);
    }
    c.excluded.push_back(ex);
  }

  if (s.vocab) {
    std::vector<std::string> tokens;
    for (const auto& t : c.tables) {
      for (const auto& tok : t.table.tokens) tokens.push_back(tok.text);
    }
    for (const auto& q : c.questions) {
      for (const auto& tok : q.tokens) tokens.push_back(tok.text);
    }
    attach_vocab(c.params, tokens);
  }
  return c;
}

}  // namespace

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

RawTable random_raw_table(Rng& rng, const std::string& id, std::size_t max_columns, std::size_t max_rows) {
  RawTable t;
  t.id = id;
  const std::size_t cols = 1 + rng.below(max_columns);
  for (std::size_t j = 0; j < cols; ++j) t.headers.push_back(pick(rng, kHeaderPool));
  const std::size_t rows = rng.below(max_rows + 1);
  for (std::size_t r = 0; r < rows; ++r) {
    Row row;
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t kind = rng.below(6);
      if (kind == 0) {
        row.push_back("");
      } else if (kind == 1) {
        row.push_back(std::to_string(rng.below(2000)));
      } else {
        row.push_back(phrase(rng, 3));
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

PreparedBenchmark prepared_benchmark(const SyntheticConfig& config) {
  SyntheticBenchmark b = generate_synthetic_benchmark(config);
  IngestOptions options;
  options.seed = config.seed;
  return {prepare_corpus(b.tables, options), std::move(b.train), std::move(b.dev), std::move(b.test)};
}

Batch GradCase::batch() const {
  Batch b;
  b.questions = questions;
  for (const auto& t : tables) b.candidates.push_back(&t);
  b.gold = gold;
  b.excluded = excluded;
  return b;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradReport gradient_check(const GradCase& c, double step) {
  const Batch batch = c.batch();
  const auto [loss, grads] = backward(batch, c.params, c.trainable);
  (void)loss;
  ModelParams probe = c.params;
  GradReport report;
  for (const Slot& slot : slots_of(probe, grads)) {
    const double saved = *slot.param;
    *slot.param = saved + step;
    const double up = batch_loss(probe, c, batch);
    *slot.param = saved - step;
    const double down = batch_loss(probe, c, batch);
    *slot.param = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double rel = relative_error(slot.analytic, numeric);
    ++report.entries;
    if (rel > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = rel;
      report.worst = slot.name;
    }
    if (std::find(report.slots.begin(), report.slots.end(), slot.name) == report.slots.end()) {
      report.slots.push_back(slot.name);
    }
  }
  return report;
}

double min_positive_gap(const GradCase& c) {
  const Encoder encoder(c.params);
  double gap = std::numeric_limits<double>::infinity();
  std::vector<SideEncoding> tables;
  for (const auto& t : c.tables) {
    tables.push_back(encoder.forward_table(t.id, t.table));
    gap = std::min(gap, pooled_max_gap(tables.back(), c.params.table_pool));
  }
  for (const auto& q : c.questions) {
    const SideEncoding qe = encoder.forward_question(q);
    gap = std::min(gap, pooled_max_gap(qe, c.params.question_pool));
    for (const auto& te : tables) gap = std::min(gap, max_gap_of(qe.projected * te.projected.transpose()));
  }
  return gap;
}

std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  using PK = PoolingKind;
  const std::vector<CaseShape> shapes = {
      {"implicit n1 d4 mean", Mode::Implicit, 1, 4, PK::Mean, PK::Mean, 0, true, 0, 0.0, Ablation::Full, false, 3},
      {"implicit n3 d4 table-max projected", Mode::Implicit, 3, 4, PK::Mean, PK::Max, 2, true, 0, 0.0,
       Ablation::Full, false, 3},
      {"implicit n3 d8 table-attentive projected context", Mode::Implicit, 3, 8, PK::Mean, PK::Attentive, 4,
       true, 1, 0.3, Ablation::Full, false, 4},
      {"explicit d4 attentive both roles", Mode::Explicit, 1, 4, PK::Attentive, PK::Attentive, 0, true, 0, 0.0,
       Ablation::Full, false, 3},
      {"explicit d8 question-max projected context", Mode::Explicit, 1, 8, PK::Max, PK::Mean, 4, true, 2, 0.5,
       Ablation::Full, false, 2},
      {"implicit n1 d8 hashed table-attentive projected", Mode::Implicit, 1, 8, PK::Mean, PK::Attentive, 4,
       false, 0, 0.0, Ablation::Full, false, 4},
      {"implicit n3 d4 exact max ties", Mode::Implicit, 3, 4, PK::Mean, PK::Mean, 0, true, 0, 0.0,
       Ablation::Full, true, 2},
      {"explicit d4 table-max exact ties projected", Mode::Explicit, 1, 4, PK::Mean, PK::Max, 2, true, 0, 0.0,
       Ablation::Full, true, 2},
      {"implicit n3 d8 values only attentive projected", Mode::Implicit, 3, 8, PK::Mean, PK::Attentive, 4, true,
       0, 0.0, Ablation::NoS2Head, false, 3},
      {"explicit d8 sequence question table-attentive context", Mode::Explicit, 1, 8, PK::Mean, PK::Attentive,
       0, true, 1, 0.2, Ablation::NoS1, false, 3},
      {"implicit n1 d4 headers only table-max", Mode::Implicit, 1, 4, PK::Mean, PK::Max, 0, true, 0, 0.0,
       Ablation::NoS2Value, false, 4},
      {"implicit n3 d8 full projection context", Mode::Implicit, 3, 8, PK::Attentive, PK::Attentive, 8, true, 1,
       0.4, Ablation::Full, false, 4},
  };
  Rng rng(mix64(seed) ^ 0x67726164ULL);
  std::vector<GradCase> out;
  out.reserve(shapes.size());
  for (const auto& shape : shapes) {
    for (int attempt = 0;; ++attempt) {
      GradCase c = build_case(shape, rng);
      if (min_positive_gap(c) >= 1e-3) {
        out.push_back(std::move(c));
        break;
      }
      if (attempt > 200) throw Error("could not draw a tie-free configuration for " + shape.label);
    }
  }
  return out;
}

}  // namespace tabret::testing
