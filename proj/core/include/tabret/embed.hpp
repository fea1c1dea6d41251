#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/textproc.hpp"

namespace tabret {

/// Row l holds the embedding of token l.
using EmbeddingMatrix = Matrix;

enum class EmbedderKind { Hashed, Vocab, External };

std::string_view to_string(EmbedderKind kind);
EmbedderKind parse_embedder_kind(std::string_view name);

struct EmbedderConfig {
  EmbedderKind kind = EmbedderKind::Hashed;
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  std::size_t context_window = 0;
  double context_alpha = 0.0;

  friend bool operator==(const EmbedderConfig&, const EmbedderConfig&) = default;
};

/// Fixed pseudo-random vector for a token: the (text, seed) hash seeds a
/// generator that draws `dim` standard normals scaled by 1/sqrt(dim).
Vector hashed_vector(std::string_view text, std::size_t dim, std::uint64_t seed);

EmbeddingMatrix embed_hashed(std::span<const Token> tokens, std::size_t dim, std::uint64_t seed);

/// h'_l = (1 - alpha) h_l + alpha * mean(h_{l-w} .. h_{l+w}), window clipped
/// to the sequence.
EmbeddingMatrix contextualize(const EmbeddingMatrix& matrix, std::size_t window, double alpha);

/// Trainable token table, initialized row by row from hashed_vector so that
/// untouched rows agree with the hashed embedder.
class VocabTable {
 public:
  VocabTable() = default;
  VocabTable(std::vector<std::string> tokens, std::size_t dim, std::uint64_t seed);
  VocabTable(std::vector<std::string> tokens, Matrix vectors);

  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors_.cols()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const Matrix& vectors() const { return vectors_; }
  Matrix& vectors() { return vectors_; }

 private:
  void build_lookup();

  std::vector<std::string> tokens_;  ///< sorted, unique
  Matrix vectors_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

struct ExternalRecord {
  std::string id;
  std::vector<std::string> tokens;
  EmbeddingMatrix vectors;
  /// Optional whole-sequence vector used by the sequence ablations.
  std::optional<Vector> sequence_vector;
};

/// Checks that the record's tokens equal `expected` 1:1 and returns its
/// vectors. Throws ValidationError naming the first divergent index.
EmbeddingMatrix aligned_vectors(const ExternalRecord& record, std::span<const Token> expected);

/// Reads the first record of an embeddings JSONL file and aligns it.
EmbeddingMatrix load_external_embeddings(const std::filesystem::path& path,
                                         std::span<const Token> expected_tokens);

std::vector<ExternalRecord> read_external_records(std::istream& in, std::string_view source);
void write_external_record(const ExternalRecord& record, std::ostream& out);

/// Id-keyed store of externally produced encoder outputs.
class ExternalEmbeddings {
 public:
  static ExternalEmbeddings load(const std::filesystem::path& path);
  void add(ExternalRecord record);

  /// Throws ValidationError if the id is unknown.
  const ExternalRecord& get(const std::string& id) const;
  bool contains(const std::string& id) const { return records_.contains(id); }
  std::size_t size() const { return records_.size(); }

 private:
  std::map<std::string, ExternalRecord> records_;
};

/// Produces token matrices for a question or table according to the config.
/// Vocab lookups fall back to the hashed vector for unseen tokens.
class Embedder {
 public:
  Embedder(EmbedderConfig config, const VocabTable* vocab = nullptr,
           const ExternalEmbeddings* external = nullptr);

  /// Raw (pre-context) embeddings; `id` keys the external store.
  EmbeddingMatrix raw(const std::string& id, std::span<const Token> tokens) const;
  EmbeddingMatrix embed(const std::string& id, std::span<const Token> tokens) const;

  /// Vocab row per token, or nullopt when the row is not trainable.
  std::vector<std::optional<std::size_t>> vocab_rows(std::span<const Token> tokens) const;

  const EmbedderConfig& config() const { return config_; }
  const ExternalEmbeddings* external() const { return external_; }

 private:
  EmbedderConfig config_;
  const VocabTable* vocab_;
  const ExternalEmbeddings* external_;
};

}  // namespace tabret
