#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/corpus.hpp"
#include "tabret/model.hpp"
#include "tabret/repr.hpp"
#include "tabret/textproc.hpp"

namespace tabret {

using ScoreMatrix = Matrix;

struct PairScore {
  double score = 0.0;
  ScoreMatrix matrix;                ///< w_ij = q_i . c_j
  std::vector<Eigen::Index> argmax;  ///< first maximizing j per row i
};

/// Sum over question rows of the best dot product with any table row.
/// Throws ValidationError on a dimension mismatch or an empty table side.
PairScore score_pair(const Matrix& q, const Matrix& c);
PairScore score_pair(const QuestionReprs& q, const TableReprs& c);

struct ScoredTable {
  std::string distinct_id;
  double score = 0.0;

  friend bool operator==(const ScoredTable&, const ScoredTable&) = default;
};

struct LinearizedEntry {
  std::string id;
  LinearizedTable table;
};

/// Linearizes every table of the corpus, ordered by distinct id.
std::vector<LinearizedEntry> linearize_corpus(const Corpus& corpus, const Tokenizer& tokenizer = {});

/// Immutable flat store of table representations (float32, row-major) keyed
/// by distinct id, ordered by id.
class Index {
 public:
  struct Entry {
    std::string id;
    std::size_t offset = 0;  ///< first row in the flat buffer
    std::size_t rows = 0;
    std::vector<SlotKind> kinds;
  };

  Index() = default;
  Index(std::size_t dim, std::string fingerprint, std::string description);

  /// Ids must arrive in strictly ascending order.
  void add(std::string id, const TableReprs& reprs);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return dim_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::span<const float> rows(std::size_t entry) const;
  const std::string& fingerprint() const { return fingerprint_; }
  const std::string& fingerprint_description() const { return description_; }

  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static Index read(std::istream& in, std::string_view source = "<stream>");
  static Index load(const std::filesystem::path& path);

 private:
  std::size_t dim_ = 0;
  std::string fingerprint_;
  std::string description_;
  std::vector<Entry> entries_;
  std::vector<float> data_;
};

constexpr std::string_view kIndexFormat = "tabret.index/1";

Index build_index(std::span<const LinearizedEntry> tables, const Encoder& encoder,
                  std::size_t threads = default_thread_count());
Index build_index(const Corpus& corpus, const Encoder& encoder,
                  std::size_t threads = default_thread_count());

/// Maxsim score of question rows against one flat block of table rows.
double maxsim(const Matrix& q, std::span<const float> rows, std::size_t dim);

/// Top-K by score descending, ties by id ascending. Returns everything when
/// the index holds fewer than K tables.
std::vector<ScoredTable> retrieve_topk(const Matrix& question_reprs, const Index& index,
                                       std::size_t k, std::size_t threads = 1);

/// Encodes the question and ranks it. Throws FingerprintError when the index
/// was built by a model with different table-side settings.
std::vector<ScoredTable> retrieve_topk(const TokenizedQuestion& question, const Index& index,
                                       std::size_t k, const Encoder& encoder,
                                       std::size_t threads = 1);

/// Reference ranking: plain double loop over every table, full sort.
std::vector<ScoredTable> brute_force_retrieve(const Matrix& question_reprs, const Index& index);
std::vector<ScoredTable> brute_force_retrieve(const TokenizedQuestion& question,
                                              const Index& index, const Encoder& encoder);

void check_compatible(const Index& index, const Encoder& encoder);

std::string slot_name(const SlotKind& slot);
SlotKind parse_slot_name(std::string_view name);

}  // namespace tabret
