#include "tabret/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace tabret {
namespace {

using nlohmann::json;

double nearest_rank(const std::vector<double>& sorted, double pct) {
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

json report_json(const EvalReport& report) {
  json recall = json::object();
  for (const auto& [k, v] : report.recall) recall["recall@" + std::to_string(k)] = v;
  return json{{"ks", report.ks}, {"question_count", report.question_count}, {"recall", recall}};
}

}  // namespace

std::vector<std::size_t> parse_ks(std::string_view text) {
  std::vector<std::size_t> ks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string item(text.substr(pos, comma - pos));
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ValidationError("bad K list '" + std::string(text) + "'");
    }
    const std::size_t k = std::stoul(item);
    if (k == 0) throw ValidationError("K must be at least 1");
    ks.push_back(k);
    pos = comma + 1;
  }
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

EvalReport recall_at_k(std::span<const Ranking> rankings, std::span<const QuestionRecord> questions,
                       const TableMapping& mapping, std::span<const std::size_t> ks) {
  EvalReport report;
  report.ks.assign(ks.begin(), ks.end());
  std::sort(report.ks.begin(), report.ks.end());
  report.ks.erase(std::unique(report.ks.begin(), report.ks.end()), report.ks.end());
  if (!report.ks.empty() && report.ks.front() == 0) throw ValidationError("K must be at least 1");
  report.question_count = questions.size();

  std::unordered_map<std::string, const Ranking*> by_id;
  for (const auto& r : rankings) by_id.emplace(r.question_id, &r);
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : report.ks) hits[k] = 0;
  for (const auto& q : questions) {
    const auto golds = resolve_golds(q, mapping);
    const auto it = by_id.find(q.id);
    if (it == by_id.end()) throw ValidationError("no ranking for question '" + q.id + "'");
    const auto& ranking = it->second->ranking;
    std::optional<std::size_t> first_hit;
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      if (std::binary_search(golds.begin(), golds.end(), ranking[r].distinct_id)) {
        first_hit = r;
        break;
      }
    }
    for (std::size_t k : report.ks) {
      if (first_hit && *first_hit < k) ++hits[k];
    }
  }
  for (std::size_t k : report.ks) {
    report.recall[k] = questions.empty() ? 0.0
                                         : static_cast<double>(hits[k]) / static_cast<double>(questions.size());
  }
  return report;
}

std::vector<Ranking> rank_questions(const Encoder& encoder, const Index& index,
                                    std::span<const QuestionRecord> questions, std::size_t k,
                                    std::size_t threads) {
  check_compatible(index, encoder);
  std::vector<Ranking> out(questions.size());
  parallel_for(questions.size(), threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto q = encoder.prepare_question(questions[i].id, questions[i].question);
      out[i] = {questions[i].id, retrieve_topk(q, index, k, encoder)};
    }
  });
  return out;
}

EvalReport evaluate(const Encoder& encoder, const Index& index, std::span<const QuestionRecord> questions,
                    const TableMapping& mapping, std::span<const std::size_t> ks, std::size_t threads) {
  if (ks.empty()) throw ValidationError("at least one K is required");
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  const auto rankings = rank_questions(encoder, index, questions, kmax, threads);
  return recall_at_k(rankings, questions, mapping, ks);
}

LatencyReport latency_bench(const Encoder& encoder, const Index& index,
                            std::span<const TokenizedQuestion> questions, std::size_t k, std::size_t warmup,
                            std::size_t repeats, std::size_t threads) {
  if (repeats == 0) throw ValidationError("latency benchmark needs at least one repeat");
  if (questions.empty()) throw ValidationError("latency benchmark needs at least one question");
  check_compatible(index, encoder);
  LatencyReport report;
  report.corpus_size = index.size();
  report.question_count = questions.size();
  report.warmup = warmup;
  report.repeats = repeats;
  report.threads = std::max<std::size_t>(1, threads);

  double sink = 0.0;
  auto run = [&](const TokenizedQuestion& q) {
    const auto top = retrieve_topk(encoder.encode_question(q).q, index, k, report.threads);
    if (!top.empty()) sink += top.front().score;
  };
  for (std::size_t w = 0; w < warmup; ++w) {
    for (const auto& q : questions) run(q);
  }
  std::vector<double> samples;
  samples.reserve(questions.size() * repeats);
  for (std::size_t r = 0; r < repeats; ++r) {
    for (const auto& q : questions) {
      const auto start = std::chrono::steady_clock::now();
      run(q);
      const auto stop = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
  }
  if (!std::isfinite(sink)) throw NumericError("non-finite score during latency benchmark");
  double total = 0.0;
  for (double s : samples) total += s;
  report.mean_ms = total / static_cast<double>(samples.size());
  std::sort(samples.begin(), samples.end());
  report.p50_ms = nearest_rank(samples, 50.0);
  report.p95_ms = nearest_rank(samples, 95.0);
  return report;
}

CoherenceMatrices coherence_matrices(const Encoder& encoder, const TokenizedQuestion& question,
                                     const std::string& table_id, const LinearizedTable& table) {
  if (!encoder.params().uses_seeds()) {
    throw ValidationError("coherence matrices need an implicit model with seeds");
  }
  const QuestionReprs q = encoder.encode_question(question);
  const TableReprs c = encoder.encode_table(table_id, table);
  CoherenceMatrices out;
  out.i2q = q.attention;
  const PairScore ps = score_pair(q, c);
  out.i2t.resize(ps.matrix.rows(), ps.matrix.cols());
  for (Eigen::Index i = 0; i < ps.matrix.rows(); ++i) {
    out.i2t.row(i) = softmax(ps.matrix.row(i).transpose()).transpose();
  }
  out.question_tokens = token_texts(question.tokens);
  for (const auto& k : c.kinds) out.table_slots.push_back(slot_name(k));
  return out;
}

std::vector<AblationResult> run_ablations(const Corpus& corpus, std::span<const QuestionRecord> train_questions,
                                          std::span<const QuestionRecord> dev_questions,
                                          std::span<const QuestionRecord> test_questions,
                                          std::span<const Ablation> modes, const ModelConfig& base,
                                          const TrainConfig& train_config, std::span<const std::size_t> ks,
                                          const ExternalEmbeddings* external) {
  std::vector<AblationResult> out;
  for (Ablation mode : modes) {
    ModelConfig config = base;
    config.ablation = mode;
    TrainResult trained = train(corpus, train_questions, dev_questions, train_config,
                                ModelParams::initialize(config), external);
    const Encoder encoder(trained.params, external);
    const Index index = build_index(corpus, encoder, train_config.threads);
    out.push_back({mode, evaluate(encoder, index, test_questions, corpus.mapping, ks, train_config.threads),
                   trained.best_epoch});
  }
  return out;
}

std::string to_json(const EvalReport& report) {
  json j = report_json(report);
  j["format"] = kEvalFormat;
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    r.ks = j.at("ks").get<std::vector<std::size_t>>();
    r.question_count = j.at("question_count").get<std::size_t>();
    for (std::size_t k : r.ks) r.recall[k] = j.at("recall").at("recall@" + std::to_string(k)).get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string to_json(const LatencyReport& r) {
  return json{{"format", kLatencyFormat},
              {"mean_ms", r.mean_ms},
              {"p50_ms", r.p50_ms},
              {"p95_ms", r.p95_ms},
              {"corpus_size", r.corpus_size},
              {"question_count", r.question_count},
              {"warmup", r.warmup},
              {"repeats", r.repeats},
              {"threads", r.threads}}
             .dump(2) +
         "\n";
}

std::string to_json(const CoherenceMatrices& m) {
  return json{{"format", kCoherenceFormat},
              {"question_tokens", m.question_tokens},
              {"table_slots", m.table_slots},
              {"i2q", matrix_json(m.i2q)},
              {"i2t", matrix_json(m.i2t)}}
             .dump(2) +
         "\n";
}

std::string to_json(std::span<const AblationResult> results) {
  json list = json::array();
  for (const auto& r : results) {
    json j = report_json(r.report);
    j["ablation"] = to_string(r.ablation);
    j["best_epoch"] = r.best_epoch;
    list.push_back(j);
  }
  return json{{"format", kAblationFormat}, {"results", list}}.dump(2) + "\n";
}

}  // namespace tabret
