#include "tabret/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace tabret {
namespace {

using nlohmann::json;

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEpsilon = 1e-8;

void require_finite(const Matrix& m, std::string_view stage) {
  if (!m.allFinite()) throw NumericError("non-finite value in " + std::string(stage));
}

bool is_excluded(const std::vector<std::vector<std::size_t>>& excluded, std::size_t row,
                 std::size_t col) {
  if (row >= excluded.size()) return false;
  const auto& e = excluded[row];
  return std::find(e.begin(), e.end(), col) != e.end();
}

void check_loss_inputs(const Matrix& scores, std::span<const std::size_t> gold,
                       const std::vector<std::vector<std::size_t>>& excluded) {
  if (static_cast<std::size_t>(scores.rows()) != gold.size()) {
    throw ValidationError("one gold index per score row is required");
  }
  if (scores.rows() == 0) throw ValidationError("contrastive loss over an empty batch");
  if (!scores.allFinite()) throw NumericError("non-finite batch scores");
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= static_cast<std::size_t>(scores.cols())) {
      throw ValidationError("gold index out of range");
    }
    if (is_excluded(excluded, i, gold[i])) throw ValidationError("gold candidate is excluded");
  }
}

/// Row-wise log-sum-exp over allowed columns.
double row_logsumexp(const Matrix& scores, std::size_t i,
                     const std::vector<std::vector<std::size_t>>& excluded) {
  const auto row = static_cast<Eigen::Index>(i);
  double top = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    if (!is_excluded(excluded, i, static_cast<std::size_t>(j))) top = std::max(top, scores(row, j));
  }
  double sum = 0.0;
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    if (!is_excluded(excluded, i, static_cast<std::size_t>(j))) sum += std::exp(scores(row, j) - top);
  }
  return top + std::log(sum);
}

/// Gradient contributions of one question or table encoding. Vocab rows are
/// kept sparse so that per-item results stay small.
struct SideGrad {
  Matrix seeds;
  Vector u;
  double b = 0.0;
  Matrix projection;
  std::vector<std::pair<std::size_t, Vector>> vocab;
};

struct Need {
  bool seeds = false;
  bool attentive = false;
  bool projection = false;
  bool vocab = false;
};

Need needs(const ModelParams& params, const Trainable& trainable) {
  Need n;
  n.seeds = trainable.seeds && params.uses_seeds();
  n.attentive = trainable.attentive;
  n.projection = trainable.projection && params.projection.enabled;
  n.vocab = trainable.vocab && params.vocab && params.config.embedder.kind == EmbedderKind::Vocab;
  return n;
}

Matrix contextualize_backward(const Matrix& upstream, std::size_t window, double alpha) {
  const auto length = static_cast<std::size_t>(upstream.rows());
  if (window == 0 || alpha == 0.0 || length <= 1) return upstream;
  Matrix out = (1.0 - alpha) * upstream;
  for (std::size_t l = 0; l < length; ++l) {
    const std::size_t lo = l > window ? l - window : 0;
    const std::size_t hi = std::min(length - 1, l + window);
    const double share = alpha / static_cast<double>(hi - lo + 1);
    for (std::size_t k = lo; k <= hi; ++k) {
      out.row(static_cast<Eigen::Index>(k)) += share * upstream.row(static_cast<Eigen::Index>(l));
    }
  }
  return out;
}

SideGrad side_backward(const SideEncoding& enc, const Matrix& dprojected, const ModelParams& params,
                       const PoolingSpec& pooling, const Need& need) {
  SideGrad out;
  const Eigen::Index d = enc.context.cols();
  Matrix dreps;
  if (params.projection.enabled) {
    if (need.projection) out.projection = enc.reps.transpose() * dprojected;
    dreps = dprojected * params.projection.w.transpose();
  } else {
    dreps = dprojected;
  }
  require_finite(dreps, "projection backward");

  const bool attentive = pooling.kind == PoolingKind::Attentive;
  if (need.seeds) out.seeds = Matrix::Zero(params.seed_bank.seeds.rows(), d);
  if (need.attentive && attentive) out.u = Vector::Zero(d);

  Matrix dcontext = Matrix::Zero(enc.context.rows(), d);
  for (std::size_t g = 0; g < enc.groups.size(); ++g) {
    const PoolGroup& group = enc.groups[g];
    const GroupTrace& trace = enc.traces[g];
    if (trace.fixed) continue;
    const auto start = static_cast<Eigen::Index>(group.span.start);
    const auto p = static_cast<Eigen::Index>(group.span.size());
    const auto rows = enc.context.middleRows(start, p);
    const Vector dout = dreps.row(static_cast<Eigen::Index>(g)).transpose();
    auto drows = dcontext.middleRows(start, p);

    const bool seed = group.op == GroupOp::Seed;
    const PoolingKind kind = group.op == GroupOp::Pooled ? pooling.kind : PoolingKind::Mean;
    if (seed || kind == PoolingKind::Attentive) {
      // out = sum_l w_l h_l with w = softmax(h_l . dir + b)
      const Vector& w = trace.weights;
      const Vector dir = seed ? Vector(params.seed_bank.seeds.row(static_cast<Eigen::Index>(group.seed)).transpose())
                              : pooling.u;
      const Vector dw = rows * dout;
      const double s = w.dot(dw);
      const Vector dz = (w.array() * (dw.array() - s)).matrix();
      if (seed && need.seeds) {
        out.seeds.row(static_cast<Eigen::Index>(group.seed)) += (rows.transpose() * dz).transpose();
      } else if (!seed && need.attentive) {
        out.u += rows.transpose() * dz;
        out.b += dz.sum();
      }
      if (need.vocab) drows += w * dout.transpose() + dz * dir.transpose();
    } else if (kind == PoolingKind::Max) {
      if (need.vocab) {
        for (Eigen::Index c = 0; c < d; ++c) {
          drows(trace.argmax[static_cast<std::size_t>(c)], c) += dout(c);
        }
      }
    } else if (need.vocab) {
      drows.rowwise() += dout.transpose() / static_cast<double>(p);
    }
  }
  require_finite(dcontext, "pooling backward");

  if (need.vocab) {
    const auto& e = params.config.embedder;
    const Matrix draw = contextualize_backward(dcontext, e.context_window, e.context_alpha);
    require_finite(draw, "contextualize backward");
    for (std::size_t l = 0; l < enc.vocab_rows.size(); ++l) {
      if (enc.vocab_rows[l]) out.vocab.emplace_back(*enc.vocab_rows[l], draw.row(static_cast<Eigen::Index>(l)).transpose());
    }
  }
  return out;
}

void accumulate(Gradients& grads, const SideGrad& side, bool question_role) {
  if (grads.seeds.size() > 0 && side.seeds.size() > 0) grads.seeds += side.seeds;
  if (side.u.size() > 0) {
    Vector& u = question_role ? grads.question_u : grads.table_u;
    double& b = question_role ? grads.question_b : grads.table_b;
    if (u.size() > 0) {
      u += side.u;
      b += side.b;
    }
  }
  if (grads.projection.size() > 0 && side.projection.size() > 0) grads.projection += side.projection;
  if (grads.vocab.size() > 0) {
    for (const auto& [row, g] : side.vocab) grads.vocab.row(static_cast<Eigen::Index>(row)) += g.transpose();
  }
}

/// Parameter storage paired with its gradient slot, in a fixed order.
struct ParamBlock {
  double* param;
  const double* grad;
  std::size_t size;
  bool decay;
};

std::vector<ParamBlock> param_blocks(ModelParams& p, const Gradients& g) {
  std::vector<ParamBlock> blocks;
  auto add = [&](double* param, const double* grad, Eigen::Index n, Eigen::Index expected, bool decay,
                 std::string_view name) {
    if (n == 0) return;
    if (n != expected) throw ValidationError("gradient shape mismatch for " + std::string(name));
    blocks.push_back({param, grad, static_cast<std::size_t>(n), decay});
  };
  add(p.seed_bank.seeds.data(), g.seeds.data(), g.seeds.size(), p.seed_bank.seeds.size(), false, "seeds");
  if (g.question_u.size() > 0) {
    add(p.question_pool.u.data(), g.question_u.data(), g.question_u.size(), p.question_pool.u.size(), false,
        "question_pool.u");
    add(&p.question_pool.b, &g.question_b, 1, 1, false, "question_pool.b");
  }
  if (g.table_u.size() > 0) {
    add(p.table_pool.u.data(), g.table_u.data(), g.table_u.size(), p.table_pool.u.size(), false,
        "table_pool.u");
    add(&p.table_pool.b, &g.table_b, 1, 1, false, "table_pool.b");
  }
  add(p.projection.w.data(), g.projection.data(), g.projection.size(), p.projection.w.size(), true,
      "projection");
  if (g.vocab.size() > 0) {
    if (!p.vocab) throw ValidationError("vocab gradient without a vocab table");
    add(p.vocab->vectors().data(), g.vocab.data(), g.vocab.size(), p.vocab->vectors().size(), true, "vocab");
  }
  return blocks;
}

struct Example {
  TokenizedQuestion question;
  std::vector<std::string> golds;  ///< distinct ids, sorted
};

std::vector<Example> prepare_examples(const Encoder& encoder, std::span<const QuestionRecord> records,
                                      const TableMapping& mapping) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Example e{encoder.prepare_question(r.id, r.question), resolve_golds(r, mapping)};
    if (e.golds.empty()) throw ValidationError("question '" + r.id + "' has no gold table");
    out.push_back(std::move(e));
  }
  return out;
}

/// Dev candidate pool: the gold tables of the dev questions.
struct DevPool {
  std::vector<LinearizedEntry> tables;
  std::vector<Example> questions;
};

DevPool make_dev_pool(const Encoder& encoder, const Corpus& corpus, std::span<const QuestionRecord> dev) {
  DevPool pool;
  pool.questions = prepare_examples(encoder, dev, corpus.mapping);
  std::vector<std::string> ids;
  for (const auto& q : pool.questions) ids.insert(ids.end(), q.golds.begin(), q.golds.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const Tokenizer tokenizer;
  for (const auto& id : ids) {
    const DistinctTable* t = corpus.find(id);
    if (t == nullptr) throw ValidationError("dev gold table '" + id + "' is not in the corpus");
    pool.tables.push_back({id, linearize_table(*t, tokenizer)});
  }
  return pool;
}

double pool_recall(const Encoder& encoder, const DevPool& pool, std::size_t threads) {
  if (pool.questions.empty()) return 0.0;
  const Index index = build_index(pool.tables, encoder, threads);
  std::vector<char> hit(pool.questions.size(), 0);
  parallel_for(pool.questions.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto top = retrieve_topk(pool.questions[i].question, index, 1, encoder);
      const auto& g = pool.questions[i].golds;
      hit[i] = !top.empty() && std::binary_search(g.begin(), g.end(), top.front().distinct_id);
    }
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) /
         static_cast<double>(pool.questions.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning rate must be positive");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ValidationError("weight decay must be non-negative");
  }
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ValidationError("warmup ratio must lie in [0, 1)");
  if (batch_size == 0) throw ValidationError("batch size must be at least 1");
  if (max_epochs > 150) throw ValidationError("at most 150 epochs are supported");
  if (hard_negatives.enabled && (hard_negatives.per_question == 0 || hard_negatives.remine_every == 0)) {
    throw ValidationError("hard negatives need per_question >= 1 and remine_every >= 1");
  }
}

Gradients Gradients::zeros(const ModelParams& params, const Trainable& trainable) {
  const Need n = needs(params, trainable);
  Gradients g;
  if (n.seeds) g.seeds = Matrix::Zero(params.seed_bank.seeds.rows(), params.seed_bank.seeds.cols());
  if (n.attentive && params.question_pool.kind == PoolingKind::Attentive) {
    g.question_u = Vector::Zero(params.question_pool.u.size());
  }
  if (n.attentive && params.table_pool.kind == PoolingKind::Attentive) {
    g.table_u = Vector::Zero(params.table_pool.u.size());
  }
  if (n.projection) g.projection = Matrix::Zero(params.projection.w.rows(), params.projection.w.cols());
  if (n.vocab) g.vocab = Matrix::Zero(params.vocab->vectors().rows(), params.vocab->vectors().cols());
  return g;
}

void Gradients::add(const Gradients& o) {
  auto sum = [](auto& a, const auto& b) {
    if (a.size() == 0) {
      a = b;
    } else if (b.size() > 0) {
      a += b;
    }
  };
  sum(seeds, o.seeds);
  sum(question_u, o.question_u);
  sum(table_u, o.table_u);
  sum(projection, o.projection);
  sum(vocab, o.vocab);
  question_b += o.question_b;
  table_b += o.table_b;
}

bool Gradients::all_finite() const {
  return seeds.allFinite() && question_u.allFinite() && table_u.allFinite() && projection.allFinite() &&
         vocab.allFinite() && std::isfinite(question_b) && std::isfinite(table_b);
}

double Gradients::max_abs() const {
  double m = std::max(std::abs(question_b), std::abs(table_b));
  auto upd = [&](const auto& x) {
    if (x.size() > 0) m = std::max(m, x.cwiseAbs().maxCoeff());
  };
  upd(seeds);
  upd(question_u);
  upd(table_u);
  upd(projection);
  upd(vocab);
  return m;
}

BatchBuilder::BatchBuilder(std::span<const LinearizedEntry> tables) : tables_(tables) {
  for (std::size_t i = 0; i < tables_.size(); ++i) {
    if (!index_.emplace(tables_[i].id, i).second) {
      throw ValidationError("duplicate table id '" + tables_[i].id + "'");
    }
  }
}

Batch BatchBuilder::build(std::span<const TokenizedQuestion> questions,
                          std::span<const std::vector<std::string>> golds,
                          std::span<const std::vector<std::string>> negatives) const {
  if (golds.size() != questions.size()) throw ValidationError("one gold list per question is required");
  if (!negatives.empty() && negatives.size() != questions.size()) {
    throw ValidationError("one negative list per question is required");
  }
  Batch batch;
  std::unordered_map<std::size_t, std::size_t> column;
  auto lookup = [&](const std::string& id) {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError("table '" + id + "' is not in the corpus");
    return it->second;
  };
  auto add = [&](const std::string& id) {
    const std::size_t t = lookup(id);
    auto [it, inserted] = column.emplace(t, batch.candidates.size());
    if (inserted) batch.candidates.push_back(&tables_[t]);
    return it->second;
  };
  for (std::size_t k = 0; k < questions.size(); ++k) {
    if (golds[k].empty()) throw ValidationError("question '" + questions[k].id + "' has no gold table");
    batch.questions.push_back(questions[k]);
    batch.gold.push_back(add(*std::min_element(golds[k].begin(), golds[k].end())));
  }
  for (const auto& list : negatives) {
    for (const auto& id : list) add(id);
  }
  for (std::size_t k = 0; k < questions.size(); ++k) {
    std::vector<std::size_t> ex;
    for (const auto& g : golds[k]) {
      const auto it = column.find(lookup(g));
      if (it != column.end() && it->second != batch.gold[k]) ex.push_back(it->second);
    }
    std::sort(ex.begin(), ex.end());
    ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
    batch.excluded.push_back(std::move(ex));
  }
  return batch;
}

double contrastive_loss(const Matrix& scores, std::span<const std::size_t> gold,
                        const std::vector<std::vector<std::size_t>>& excluded) {
  check_loss_inputs(scores, gold, excluded);
  double total = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    total += row_logsumexp(scores, i, excluded) -
             scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(gold[i]));
  }
  return total / static_cast<double>(gold.size());
}

Matrix contrastive_loss_grad(const Matrix& scores, std::span<const std::size_t> gold,
                             const std::vector<std::vector<std::size_t>>& excluded) {
  check_loss_inputs(scores, gold, excluded);
  Matrix grad = Matrix::Zero(scores.rows(), scores.cols());
  const double scale = 1.0 / static_cast<double>(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const double lse = row_logsumexp(scores, i, excluded);
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (is_excluded(excluded, i, static_cast<std::size_t>(j))) continue;
      grad(row, j) = std::exp(scores(row, j) - lse) * scale;
    }
    grad(row, static_cast<Eigen::Index>(gold[i])) -= scale;
  }
  return grad;
}

Matrix batch_scores(const Batch& batch, const Encoder& encoder) {
  std::vector<Matrix> q;
  std::vector<Matrix> c;
  for (const auto& question : batch.questions) q.push_back(encoder.encode_question(question).q);
  for (const auto* entry : batch.candidates) c.push_back(encoder.encode_table(entry->id, entry->table).c);
  Matrix s(static_cast<Eigen::Index>(q.size()), static_cast<Eigen::Index>(c.size()));
  for (std::size_t i = 0; i < q.size(); ++i) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = score_pair(q[i], c[j]).score;
    }
  }
  return s;
}

std::pair<double, Gradients> backward(const Batch& batch, const ModelParams& params,
                                      const Trainable& trainable, const ExternalEmbeddings* external,
                                      std::size_t threads) {
  if (batch.gold.size() != batch.questions.size()) {
    throw ValidationError("batch needs one gold candidate per question");
  }
  const Encoder encoder(params, external);
  const std::size_t nq = batch.questions.size();
  const std::size_t nt = batch.candidates.size();

  std::vector<SideEncoding> qenc(nq);
  std::vector<SideEncoding> tenc(nt);
  parallel_for(nq, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) qenc[i] = encoder.forward_question(batch.questions[i]);
  });
  parallel_for(nt, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) {
      tenc[j] = encoder.forward_table(batch.candidates[j]->id, batch.candidates[j]->table);
    }
  });

  Matrix scores(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(nt));
  std::vector<std::vector<Eigen::Index>> argmax(nq * nt);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nt; ++j) {
      PairScore ps = score_pair(qenc[i].projected, tenc[j].projected);
      scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = ps.score;
      argmax[i * nt + j] = std::move(ps.argmax);
    }
  }
  const double loss = contrastive_loss(scores, batch.gold, batch.excluded);
  const Matrix dscores = contrastive_loss_grad(scores, batch.gold, batch.excluded);
  require_finite(dscores, "loss backward");

  // Maxsim: each question row passes its gradient to the first maximizing slot.
  std::vector<Matrix> dq(nq);
  std::vector<Matrix> dt(nt);
  for (std::size_t i = 0; i < nq; ++i) dq[i] = Matrix::Zero(qenc[i].projected.rows(), qenc[i].projected.cols());
  for (std::size_t j = 0; j < nt; ++j) dt[j] = Matrix::Zero(tenc[j].projected.rows(), tenc[j].projected.cols());
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nt; ++j) {
      const double g = dscores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (g == 0.0) continue;
      const auto& am = argmax[i * nt + j];
      for (Eigen::Index r = 0; r < dq[i].rows(); ++r) {
        const Eigen::Index a = am[static_cast<std::size_t>(r)];
        dq[i].row(r) += g * tenc[j].projected.row(a);
        dt[j].row(a) += g * qenc[i].projected.row(r);
      }
    }
  }

  const Need need = needs(params, trainable);
  std::vector<SideGrad> qgrad(nq);
  std::vector<SideGrad> tgrad(nt);
  parallel_for(nq, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) qgrad[i] = side_backward(qenc[i], dq[i], params, params.question_pool, need);
  });
  parallel_for(nt, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j) tgrad[j] = side_backward(tenc[j], dt[j], params, params.table_pool, need);
  });

  Gradients grads = Gradients::zeros(params, trainable);
  for (const auto& g : qgrad) accumulate(grads, g, true);
  for (const auto& g : tgrad) accumulate(grads, g, false);
  if (!grads.all_finite()) throw NumericError("non-finite value in parameter gradients");
  return {loss, std::move(grads)};
}

double scheduled_learning_rate(const TrainConfig& config, std::size_t t, std::size_t total_steps) {
  const auto warm = static_cast<std::size_t>(
      std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));
  if (warm > 0 && t <= warm) {
    return config.learning_rate * static_cast<double>(t) / static_cast<double>(warm);
  }
  return config.learning_rate;
}

void adam_step(ModelParams& params, const Gradients& grads, const TrainConfig& config, AdamState& state,
               std::size_t t, std::size_t total_steps) {
  if (t == 0) throw ValidationError("Adam steps are numbered from 1");
  const auto blocks = param_blocks(params, grads);
  if (state.m.empty()) {
    for (const auto& b : blocks) {
      state.m.push_back(Vector::Zero(static_cast<Eigen::Index>(b.size)));
      state.v.push_back(Vector::Zero(static_cast<Eigen::Index>(b.size)));
    }
  }
  if (state.m.size() != blocks.size()) throw ValidationError("Adam state does not match the gradients");
  const double lr = scheduled_learning_rate(config, t, total_steps);
  const double td = static_cast<double>(t);
  const double c1 = 1.0 - std::pow(kBeta1, td);
  const double c2 = 1.0 - std::pow(kBeta2, td);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const ParamBlock& b = blocks[k];
    if (static_cast<std::size_t>(state.m[k].size()) != b.size) {
      throw ValidationError("Adam state does not match the gradients");
    }
    double* m = state.m[k].data();
    double* v = state.v[k].data();
    for (std::size_t i = 0; i < b.size; ++i) {
      const double g = b.grad[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      const double step = (m[i] / c1) / (std::sqrt(v[i] / c2) + kEpsilon);
      const double decay = b.decay ? config.weight_decay * b.param[i] : 0.0;
      b.param[i] -= lr * (step + decay);
    }
  }
}

std::vector<std::vector<std::string>> mine_hard_negatives(
    const Encoder& encoder, const Index& index, std::span<const TokenizedQuestion> questions,
    std::span<const std::vector<std::string>> gold_ids, std::size_t per_question, std::size_t threads) {
  if (gold_ids.size() != questions.size()) throw ValidationError("one gold list per question is required");
  check_compatible(index, encoder);
  std::vector<std::vector<std::string>> out(questions.size());
  if (per_question == 0 || index.empty()) return out;
  parallel_for(questions.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto& golds = gold_ids[i];
      const auto q = encoder.encode_question(questions[i]).q;
      for (const auto& r : retrieve_topk(q, index, per_question + golds.size())) {
        if (std::find(golds.begin(), golds.end(), r.distinct_id) != golds.end()) continue;
        out[i].push_back(r.distinct_id);
        if (out[i].size() == per_question) break;
      }
    }
  });
  return out;
}

void prepare_vocab(ModelParams& params, const Corpus& corpus, std::span<const QuestionRecord> questions) {
  if (params.config.embedder.kind != EmbedderKind::Vocab || params.vocab) return;
  std::vector<std::string> tokens;
  const Tokenizer tokenizer;
  for (const auto& t : corpus.tables) {
    for (const auto& h : t.headers) {
      for (auto& tok : tokenizer.tokenize_lenient(h)) tokens.push_back(std::move(tok.text));
    }
    for (const auto& row : t.rows) {
      for (const auto& cell : row) {
        for (auto& tok : tokenizer.tokenize_lenient(cell)) tokens.push_back(std::move(tok.text));
      }
    }
  }
  for (const auto& q : questions) {
    for (auto& tok : tokenizer.tokenize_lenient(q.question)) tokens.push_back(std::move(tok.text));
  }
  attach_vocab(params, std::move(tokens));
}

double dev_recall_at_1(const Encoder& encoder, const Corpus& corpus, std::span<const QuestionRecord> dev,
                       std::size_t threads) {
  return pool_recall(encoder, make_dev_pool(encoder, corpus, dev), threads);
}

TrainResult train(const Corpus& corpus, std::span<const QuestionRecord> train_questions,
                  std::span<const QuestionRecord> dev_questions, const TrainConfig& config,
                  ModelParams initial, const ExternalEmbeddings* external, const EpochCallback& on_epoch) {
  config.validate();
  TrainResult result;
  ModelParams params = std::move(initial);
  if (config.max_epochs > 0) prepare_vocab(params, corpus, train_questions);

  const std::vector<LinearizedEntry> tables = linearize_corpus(corpus);
  const BatchBuilder builder(tables);

  std::vector<Example> examples;
  DevPool dev;
  {
    const Encoder encoder(params, external);
    examples = prepare_examples(encoder, train_questions, corpus.mapping);
    dev = make_dev_pool(encoder, corpus, dev_questions);
  }
  for (const auto& ex : examples) {
    for (const auto& g : ex.golds) {
      if (!builder.contains(g)) throw ValidationError("gold table '" + g + "' is not in the corpus");
    }
  }

  const std::size_t n = examples.size();
  const std::size_t bs = config.batch_size;
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * config.max_epochs;
  std::vector<std::vector<std::string>> negatives(n);

  auto make_batch = [&](std::span<const std::size_t> members) {
    std::vector<TokenizedQuestion> qs;
    std::vector<std::vector<std::string>> gs;
    std::vector<std::vector<std::string>> ns;
    for (std::size_t q : members) {
      qs.push_back(examples[q].question);
      gs.push_back(examples[q].golds);
      ns.push_back(negatives[q]);
    }
    return builder.build(qs, gs, ns);
  };

  auto record = [&](EpochRecord r) {
    result.history.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  {
    const Encoder encoder(params, external);
    double loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto members = std::span<const std::size_t>(order).subspan(s * bs, std::min(bs, n - s * bs));
      const Batch batch = make_batch(members);
      loss += contrastive_loss(batch_scores(batch, encoder), batch.gold, batch.excluded);
    }
    record({0, steps_per_epoch > 0 ? loss / static_cast<double>(steps_per_epoch) : 0.0,
            pool_recall(encoder, dev, config.threads)});
  }
  if (config.max_epochs == 0) {
    result.params = std::move(params);
    return result;
  }

  result.params = params;
  double best = result.history.front().dev_recall_at_1;
  std::size_t since_best = 0;
  Rng rng(mix64(config.rng_seed) ^ 0x747261696eULL);
  AdamState adam;
  std::size_t t = 0;
  std::vector<TokenizedQuestion> mining_questions;
  std::vector<std::vector<std::string>> mining_golds;
  for (const auto& ex : examples) {
    mining_questions.push_back(ex.question);
    mining_golds.push_back(ex.golds);
  }

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto& hn = config.hard_negatives;
    if (hn.enabled && (epoch - 1) % hn.remine_every == 0) {
      const Encoder encoder(params, external);
      const Index index = build_index(tables, encoder, config.threads);
      negatives = mine_hard_negatives(encoder, index, mining_questions, mining_golds, hn.per_question,
                                      config.threads);
    }
    rng.shuffle(order);
    double loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto members = std::span<const std::size_t>(order).subspan(s * bs, std::min(bs, n - s * bs));
      const Batch batch = make_batch(members);
      auto [batch_loss, grads] = backward(batch, params, config.trainable, external, config.threads);
      adam_step(params, grads, config, adam, ++t, total_steps);
      loss += batch_loss;
    }
    const Encoder encoder(params, external);
    const double recall = pool_recall(encoder, dev, config.threads);
    record({epoch, steps_per_epoch > 0 ? loss / static_cast<double>(steps_per_epoch) : 0.0, recall});
    if (recall >= best) {
      best = recall;
      result.params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (config.patience > 0 && ++since_best >= config.patience) {
      break;
    }
  }
  return result;
}

void write_history(const std::vector<EpochRecord>& history, std::ostream& out) {
  for (const auto& r : history) {
    out << json{{"format", kHistoryFormat},
                {"epoch", r.epoch},
                {"loss", r.loss},
                {"dev_recall@1", r.dev_recall_at_1}}
               .dump()
        << '\n';
  }
}

}  // namespace tabret
