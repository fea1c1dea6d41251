#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tabret/corpus.hpp"
#include "tabret/io.hpp"
#include "tabret/model.hpp"
#include "tabret/score.hpp"
#include "tabret/train.hpp"

namespace tabret {

struct EvalReport {
  std::vector<std::size_t> ks;           ///< ascending, unique
  std::map<std::size_t, double> recall;  ///< K -> fraction of questions hit
  std::size_t question_count = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Parses "1,5,20" into sorted unique positive Ks.
std::vector<std::size_t> parse_ks(std::string_view text);

/// A question is a hit at K iff one of its mapped gold ids is in its top K.
/// Rankings are matched to questions by id.
EvalReport recall_at_k(std::span<const Ranking> rankings, std::span<const QuestionRecord> questions,
                       const TableMapping& mapping, std::span<const std::size_t> ks);

/// Top-k ranking per question, in question order.
std::vector<Ranking> rank_questions(const Encoder& encoder, const Index& index,
                                    std::span<const QuestionRecord> questions, std::size_t k,
                                    std::size_t threads = 1);

EvalReport evaluate(const Encoder& encoder, const Index& index, std::span<const QuestionRecord> questions,
                    const TableMapping& mapping, std::span<const std::size_t> ks, std::size_t threads = 1);

struct LatencyReport {
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t corpus_size = 0;
  std::size_t question_count = 0;
  std::size_t warmup = 0;
  std::size_t repeats = 0;
  std::size_t threads = 1;
};

/// Wall-clock time of question encoding + scoring + top-k, per question and
/// repeat; warmup passes are not timed.
LatencyReport latency_bench(const Encoder& encoder, const Index& index,
                            std::span<const TokenizedQuestion> questions, std::size_t k,
                            std::size_t warmup, std::size_t repeats, std::size_t threads = 1);

struct CoherenceMatrices {
  Matrix i2q;  ///< seeds x question tokens
  Matrix i2t;  ///< seeds x table slots
  std::vector<std::string> question_tokens;
  std::vector<std::string> table_slots;
};

/// I2Q holds the seed attention weights, I2T a row softmax of the
/// fine-grained scores. Throws ValidationError unless the model uses seeds.
CoherenceMatrices coherence_matrices(const Encoder& encoder, const TokenizedQuestion& question,
                                     const std::string& table_id, const LinearizedTable& table);

struct AblationResult {
  Ablation ablation = Ablation::Full;
  EvalReport report;
  std::size_t best_epoch = 0;
};

/// Trains and evaluates each ablation with identical data and seeds. The
/// report covers `test` ranked against the full corpus.
std::vector<AblationResult> run_ablations(const Corpus& corpus, std::span<const QuestionRecord> train_questions,
                                          std::span<const QuestionRecord> dev_questions,
                                          std::span<const QuestionRecord> test_questions,
                                          std::span<const Ablation> modes, const ModelConfig& base,
                                          const TrainConfig& train_config, std::span<const std::size_t> ks,
                                          const ExternalEmbeddings* external = nullptr);

constexpr std::string_view kEvalFormat = "tabret.eval/1";
constexpr std::string_view kLatencyFormat = "tabret.latency/1";
constexpr std::string_view kCoherenceFormat = "tabret.coherence/1";
constexpr std::string_view kAblationFormat = "tabret.ablation/1";

std::string to_json(const EvalReport& report);
std::string to_json(const LatencyReport& report);
std::string to_json(const CoherenceMatrices& matrices);
std::string to_json(std::span<const AblationResult> results);
EvalReport eval_report_from_json(std::string_view text);

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t n_tables = 500;
  std::size_t columns_per_table = 4;
  std::size_t vocab_size = 2000;
  std::size_t questions_per_table = 2;
  std::size_t distractor_tokens = 3;
  std::size_t rows_per_table = 3;
  std::size_t header_mentions = 2;  ///< gold header words per question
  std::size_t value_mentions = 1;   ///< gold first-row words per question
  double train_fraction = 0.7;
  double dev_fraction = 0.15;
};

struct SyntheticBenchmark {
  std::vector<RawTable> tables;
  std::vector<QuestionRecord> train;
  std::vector<QuestionRecord> dev;
  std::vector<QuestionRecord> test;
};

/// Pseudo-word tables and lexical-overlap questions; deterministic per seed.
SyntheticBenchmark generate_synthetic_benchmark(const SyntheticConfig& config);

/// Pseudo-words that tag as nouns, distinct, in generation order.
std::vector<std::string> synthetic_vocabulary(std::size_t size, std::uint64_t seed);

}  // namespace tabret
