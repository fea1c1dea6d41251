#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tabret {

class Tokenizer;

using Row = std::vector<std::string>;

/// One table record as it appears in a tables JSONL file.
struct RawTable {
  std::string id;
  std::optional<std::string> title;
  std::vector<std::string> headers;
  std::vector<Row> rows;
  /// Original ids folded into this record by an earlier merge. Empty means
  /// the record stands for itself.
  std::vector<std::string> source_ids;

  friend bool operator==(const RawTable&, const RawTable&) = default;
};

struct DistinctTable {
  std::string distinct_id;
  std::vector<std::string> headers;
  std::vector<Row> rows;
  std::vector<std::string> source_ids;  ///< sorted, unique

  friend bool operator==(const DistinctTable&, const DistinctTable&) = default;
};

struct TableMapping {
  std::map<std::string, std::string> entries;  ///< original id -> distinct id

  /// Throws ValidationError for an unknown original id.
  const std::string& resolve(const std::string& original_id) const;
  bool contains(const std::string& original_id) const { return entries.contains(original_id); }
};

struct Corpus {
  std::vector<DistinctTable> tables;
  TableMapping mapping;

  const DistinctTable* find(std::string_view distinct_id) const;
};

/// Checks the RawTable invariants; throws ValidationError naming the table.
void validate_table(const RawTable& table);

/// Reads one table per line. Blank lines are skipped. Throws IoError when the
/// file cannot be read and ValidationError (with line number) on bad records.
std::vector<RawTable> load_corpus(const std::filesystem::path& path);
std::vector<RawTable> parse_corpus(std::istream& in, std::string_view source = "<stream>");

/// Lowercased, whitespace-trimmed, order-sensitive header key.
std::string header_key(const std::vector<std::string>& headers);

/// Merges tables whose header keys are equal. The first table of a group
/// names the distinct table and supplies its headers; rows are concatenated
/// in input order with exact duplicates dropped.
Corpus merge_same_header(const std::vector<RawTable>& tables);

/// Keeps at most max_rows rows, drawn uniformly without replacement and kept
/// in their original relative order.
DistinctTable sample_rows(const DistinctTable& table, std::size_t max_rows, std::uint64_t seed);

/// Token count of the linearized table.
std::size_t linearized_length(const DistinctTable& table, const Tokenizer& tokenizer);

/// Drops trailing rows until the linearization fits token_budget. Throws
/// ValidationError if headers plus the first row already exceed it.
DistinctTable trim_to_budget(const DistinctTable& table, std::size_t token_budget,
                             const Tokenizer& tokenizer);

struct IngestOptions {
  std::size_t max_rows = 5;
  std::size_t token_budget = 0;  ///< 0 disables trimming
  std::uint64_t seed = 0;
};

/// load -> merge -> sample -> trim. Sampling seeds are derived per distinct
/// id so the result does not depend on table order.
Corpus prepare_corpus(const std::vector<RawTable>& tables, const IngestOptions& options);

RawTable to_raw(const DistinctTable& table);

constexpr std::string_view kCorpusFormat = "tabret.corpus/1";
constexpr std::string_view kMappingFormat = "tabret.mapping/1";

void write_corpus(const Corpus& corpus, std::ostream& out);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
void write_tables(const std::vector<RawTable>& tables, std::ostream& out);
void write_mapping(const TableMapping& mapping, std::ostream& out);
void write_mapping(const TableMapping& mapping, const std::filesystem::path& path);
TableMapping load_mapping(const std::filesystem::path& path);

/// Loads a corpus JSONL written by write_corpus (or raw tables) and rebuilds
/// the distinct corpus with its mapping.
Corpus load_distinct_corpus(const std::filesystem::path& path);

}  // namespace tabret
