#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/corpus.hpp"
#include "tabret/io.hpp"
#include "tabret/model.hpp"
#include "tabret/score.hpp"

namespace tabret {

/// Which parameter classes receive updates. Classes the model does not have
/// (e.g. seeds in explicit mode) are skipped regardless.
struct Trainable {
  bool seeds = true;
  bool attentive = true;  ///< (u, b) of both pooling roles
  bool projection = true;
  bool vocab = true;

  friend bool operator==(const Trainable&, const Trainable&) = default;
};

struct HardNegativeConfig {
  bool enabled = false;
  std::size_t per_question = 1;
  std::size_t remine_every = 5;  ///< epochs
};

struct TrainConfig {
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  double warmup_ratio = 0.05;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 20;
  std::size_t patience = 0;  ///< epochs without dev improvement before stopping; 0 = never
  HardNegativeConfig hard_negatives;
  Trainable trainable;
  std::uint64_t rng_seed = 0;
  std::size_t threads = 1;

  /// Throws ValidationError for out-of-range settings.
  void validate() const;
};

/// Gradients mirroring ModelParams. A slot is empty (size 0) when the
/// parameter is absent or not trainable.
struct Gradients {
  Matrix seeds;
  Vector question_u;
  double question_b = 0.0;
  Vector table_u;
  double table_b = 0.0;
  Matrix projection;
  Matrix vocab;

  static Gradients zeros(const ModelParams& params, const Trainable& trainable);
  void add(const Gradients& other);
  bool all_finite() const;
  double max_abs() const;
};

/// Questions with their gold candidate columns. Candidates hold references
/// into a stable table store.
struct Batch {
  std::vector<TokenizedQuestion> questions;
  std::vector<const LinearizedEntry*> candidates;
  std::vector<std::size_t> gold;  ///< candidate column per question
  /// Candidates excluded from a question's softmax (its other gold tables).
  std::vector<std::vector<std::size_t>> excluded;
};

/// Builds batches over a fixed table store. Candidates are the primary
/// (smallest) gold of each question in order of first appearance, followed
/// by the questions' negatives; a question's other golds are excluded from
/// its softmax.
class BatchBuilder {
 public:
  explicit BatchBuilder(std::span<const LinearizedEntry> tables);

  Batch build(std::span<const TokenizedQuestion> questions,
              std::span<const std::vector<std::string>> golds,
              std::span<const std::vector<std::string>> negatives = {}) const;

  bool contains(const std::string& id) const { return index_.contains(id); }

 private:
  std::span<const LinearizedEntry> tables_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Mean over rows of -log softmax(scores row)[gold]. Excluded columns do not
/// enter the normalizer. Throws NumericError on non-finite scores.
double contrastive_loss(const Matrix& scores, std::span<const std::size_t> gold,
                        const std::vector<std::vector<std::size_t>>& excluded = {});

/// dLoss/dScores for the loss above.
Matrix contrastive_loss_grad(const Matrix& scores, std::span<const std::size_t> gold,
                             const std::vector<std::vector<std::size_t>>& excluded = {});

/// Maxsim score matrix of a batch (questions x candidates).
Matrix batch_scores(const Batch& batch, const Encoder& encoder);

/// Loss and exact reverse-mode gradients of every trainable parameter.
/// Throws NumericError naming the stage where a non-finite value appeared.
std::pair<double, Gradients> backward(const Batch& batch, const ModelParams& params,
                                      const Trainable& trainable = {},
                                      const ExternalEmbeddings* external = nullptr,
                                      std::size_t threads = 1);

/// First and second moments per parameter block.
struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
};

/// Learning rate at step t (1-based) under linear warmup.
double scheduled_learning_rate(const TrainConfig& config, std::size_t t, std::size_t total_steps);

/// One Adam update with bias correction and decoupled weight decay on the
/// projection and vocab rows.
void adam_step(ModelParams& params, const Gradients& grads, const TrainConfig& config,
               AdamState& state, std::size_t t, std::size_t total_steps);

/// Top-h tables per question excluding its gold ids, aligned with `questions`.
std::vector<std::vector<std::string>> mine_hard_negatives(
    const Encoder& encoder, const Index& index, std::span<const TokenizedQuestion> questions,
    std::span<const std::vector<std::string>> gold_ids, std::size_t per_question,
    std::size_t threads = 1);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double dev_recall_at_1 = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

constexpr std::string_view kHistoryFormat = "tabret.history/1";

/// Adds a vocab table covering the corpus and `questions` tokens when the
/// embedder kind is vocab and none is attached yet.
void prepare_vocab(ModelParams& params, const Corpus& corpus,
                   std::span<const QuestionRecord> questions);

/// Dev recall@1 against the pool of dev gold tables.
double dev_recall_at_1(const Encoder& encoder, const Corpus& corpus,
                       std::span<const QuestionRecord> dev, std::size_t threads = 1);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from `initial`, keeping the parameters of the epoch with the best
/// dev recall@1 (ties go to the later epoch). Epoch 0 is the initial model.
TrainResult train(const Corpus& corpus, std::span<const QuestionRecord> train_questions,
                  std::span<const QuestionRecord> dev_questions, const TrainConfig& config,
                  ModelParams initial, const ExternalEmbeddings* external = nullptr,
                  const EpochCallback& on_epoch = {});

void write_history(const std::vector<EpochRecord>& history, std::ostream& out);

}  // namespace tabret
