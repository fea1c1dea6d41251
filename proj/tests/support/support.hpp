#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/corpus.hpp"
#include "tabret/eval.hpp"
#include "tabret/model.hpp"
#include "tabret/score.hpp"
#include "tabret/train.hpp"

namespace tabret::testing {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0);

/// Random table whose headers and cells come from a small word pool, so
/// header collisions (and therefore merges) happen. Cells may be empty.
RawTable random_raw_table(Rng& rng, const std::string& id, std::size_t max_columns = 4,
                          std::size_t max_rows = 8);

struct PreparedBenchmark {
  Corpus corpus;
  std::vector<QuestionRecord> train;
  std::vector<QuestionRecord> dev;
  std::vector<QuestionRecord> test;
};

/// Synthetic benchmark run through ingestion with default options.
PreparedBenchmark prepared_benchmark(const SyntheticConfig& config);

/// A small batch with its own table storage plus the parameters to check.
struct GradCase {
  std::string label;
  ModelParams params;
  Trainable trainable;
  std::vector<LinearizedEntry> tables;
  std::vector<TokenizedQuestion> questions;
  std::vector<std::size_t> gold;
  std::vector<std::vector<std::size_t>> excluded;
  bool structural_ties = false;

  /// Batch over this case's storage; invalidated if the case moves.
  Batch batch() const;
};

struct GradReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::string worst;               ///< parameter slot of the largest error
  std::vector<std::string> slots;  ///< parameter classes that were checked
};

/// |a - n| / max(|a|, |n|, floor) with the floor guarding exact zeros.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Analytic gradients against central differences of the batch loss.
GradReport gradient_check(const GradCase& c, double step = 1e-4);

/// Smallest positive gap between a max and a runner-up anywhere in the
/// forward pass (maxsim rows and max-pooled dimensions). Differences below
/// 1e-12 count as exact ties and are ignored.
double min_positive_gap(const GradCase& c);

/// A fixed list of small configurations covering seeds, attentive pooling in
/// both roles, projection, vocab rows, contextualization, ablations and exact
/// max ties. Random draws are retried until no near-tie below 1e-3 remains.
std::vector<GradCase> gradient_cases(std::uint64_t seed);

}  // namespace tabret::testing
