#include "tabret/embed.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace tabret {

using nlohmann::json;

std::string_view to_string(EmbedderKind kind) {
  switch (kind) {
    case EmbedderKind::Hashed: return "hashed";
    case EmbedderKind::Vocab: return "vocab";
    case EmbedderKind::External: return "external";
  }
  return "hashed";
}

EmbedderKind parse_embedder_kind(std::string_view name) {
  if (name == "hashed") return EmbedderKind::Hashed;
  if (name == "vocab") return EmbedderKind::Vocab;
  if (name == "external") return EmbedderKind::External;
  throw ValidationError("unknown embedder kind '" + std::string(name) + "'");
}

Vector hashed_vector(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw ValidationError("embedding dimension must be at least 2");
  Rng rng(hash64(text, seed));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  Vector v(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal() * scale;
  return v;
}

EmbeddingMatrix embed_hashed(std::span<const Token> tokens, std::size_t dim, std::uint64_t seed) {
  EmbeddingMatrix out(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t l = 0; l < tokens.size(); ++l) {
    out.row(static_cast<Eigen::Index>(l)) = hashed_vector(tokens[l].text, dim, seed).transpose();
  }
  return out;
}

EmbeddingMatrix contextualize(const EmbeddingMatrix& matrix, std::size_t window, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw ValidationError("context alpha must lie in [0, 1)");
  }
  const auto length = static_cast<std::size_t>(matrix.rows());
  if (window == 0 || alpha == 0.0 || length <= 1) return matrix;
  EmbeddingMatrix out(matrix.rows(), matrix.cols());
  for (std::size_t l = 0; l < length; ++l) {
    const std::size_t lo = l > window ? l - window : 0;
    const std::size_t hi = std::min(length - 1, l + window);
    const auto count = static_cast<Eigen::Index>(hi - lo + 1);
    const auto row = static_cast<Eigen::Index>(l);
    out.row(row) = (1.0 - alpha) * matrix.row(row) +
                   (alpha / static_cast<double>(count)) *
                       matrix.middleRows(static_cast<Eigen::Index>(lo), count).colwise().sum();
  }
  return out;
}

VocabTable::VocabTable(std::vector<std::string> tokens, std::size_t dim, std::uint64_t seed)
    : tokens_(std::move(tokens)) {
  std::sort(tokens_.begin(), tokens_.end());
  tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
  vectors_.resize(static_cast<Eigen::Index>(tokens_.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    vectors_.row(static_cast<Eigen::Index>(i)) = hashed_vector(tokens_[i], dim, seed).transpose();
  }
  build_lookup();
}

VocabTable::VocabTable(std::vector<std::string> tokens, Matrix vectors)
    : tokens_(std::move(tokens)), vectors_(std::move(vectors)) {
  if (static_cast<Eigen::Index>(tokens_.size()) != vectors_.rows()) {
    throw ValidationError("vocab token count does not match its vector rows");
  }
  if (!std::is_sorted(tokens_.begin(), tokens_.end()) ||
      std::adjacent_find(tokens_.begin(), tokens_.end()) != tokens_.end()) {
    throw ValidationError("vocab tokens must be sorted and unique");
  }
  build_lookup();
}

void VocabTable::build_lookup() {
  lookup_.clear();
  lookup_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) lookup_.emplace(tokens_[i], i);
}

std::optional<std::size_t> VocabTable::find(std::string_view token) const {
  auto it = lookup_.find(std::string(token));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

EmbeddingMatrix aligned_vectors(const ExternalRecord& record, std::span<const Token> expected) {
  const std::size_t common = std::min(record.tokens.size(), expected.size());
  for (std::size_t i = 0; i < common; ++i) {
    if (record.tokens[i] != expected[i].text) {
      throw ValidationError("external embeddings for '" + record.id +
                            "' diverge from the tokenization at index " + std::to_string(i) +
                            " ('" + record.tokens[i] + "' vs '" + expected[i].text + "')");
    }
  }
  if (record.tokens.size() != expected.size()) {
    throw ValidationError("external embeddings for '" + record.id +
                          "' diverge from the tokenization at index " + std::to_string(common) +
                          " (" + std::to_string(record.tokens.size()) + " vectors for " +
                          std::to_string(expected.size()) + " tokens)");
  }
  return record.vectors;
}

std::vector<ExternalRecord> read_external_records(std::istream& in, std::string_view source) {
  std::vector<ExternalRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    json doc;
    try {
      doc = json::parse(line);
      ExternalRecord record;
      record.id = doc.at("id").get<std::string>();
      record.tokens = doc.at("tokens").get<std::vector<std::string>>();
      const auto dim = doc.at("dim").get<std::size_t>();
      const auto& vectors = doc.at("vectors");
      if (!vectors.is_array() || vectors.size() != record.tokens.size()) {
        throw ValidationError(where + ": record '" + record.id + "' has " +
                              std::to_string(vectors.is_array() ? vectors.size() : 0) +
                              " vectors for " + std::to_string(record.tokens.size()) + " tokens");
      }
      record.vectors.resize(static_cast<Eigen::Index>(vectors.size()),
                            static_cast<Eigen::Index>(dim));
      for (std::size_t r = 0; r < vectors.size(); ++r) {
        const auto& row = vectors[r];
        if (!row.is_array() || row.size() != dim) {
          throw ValidationError(where + ": record '" + record.id + "' vector " +
                                std::to_string(r) + " does not have dimension " +
                                std::to_string(dim));
        }
        for (std::size_t c = 0; c < dim; ++c) {
          record.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              row[c].get<double>();
        }
      }
      if (auto seq = doc.find("sequence_vector"); seq != doc.end() && !seq->is_null()) {
        if (!seq->is_array() || seq->size() != dim) {
          throw ValidationError(where + ": 'sequence_vector' does not have dimension " +
                                std::to_string(dim));
        }
        Vector v(static_cast<Eigen::Index>(dim));
        for (std::size_t c = 0; c < dim; ++c) v[static_cast<Eigen::Index>(c)] = (*seq)[c].get<double>();
        record.sequence_vector = std::move(v);
      }
      records.push_back(std::move(record));
    } catch (const json::exception& e) {
      throw ValidationError(where + ": malformed embeddings record (" + e.what() + ")");
    }
  }
  return records;
}

void write_external_record(const ExternalRecord& record, std::ostream& out) {
  json vectors = json::array();
  for (Eigen::Index r = 0; r < record.vectors.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < record.vectors.cols(); ++c) row.push_back(record.vectors(r, c));
    vectors.push_back(std::move(row));
  }
  json doc{{"id", record.id},
           {"tokens", record.tokens},
           {"dim", record.vectors.cols()},
           {"vectors", std::move(vectors)}};
  if (record.sequence_vector) {
    doc["sequence_vector"] =
        std::vector<double>(record.sequence_vector->data(),
                            record.sequence_vector->data() + record.sequence_vector->size());
  }
  out << doc.dump() << '\n';
}

EmbeddingMatrix load_external_embeddings(const std::filesystem::path& path,
                                         std::span<const Token> expected_tokens) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  auto records = read_external_records(in, path.string());
  if (records.empty()) throw ValidationError(path.string() + ": no embedding records");
  return aligned_vectors(records.front(), expected_tokens);
}

ExternalEmbeddings ExternalEmbeddings::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  ExternalEmbeddings store;
  for (auto& record : read_external_records(in, path.string())) store.add(std::move(record));
  return store;
}

void ExternalEmbeddings::add(ExternalRecord record) {
  std::string id = record.id;
  if (!records_.emplace(id, std::move(record)).second) {
    throw ValidationError("duplicate external embedding id '" + id + "'");
  }
}

const ExternalRecord& ExternalEmbeddings::get(const std::string& id) const {
  auto it = records_.find(id);
  if (it == records_.end()) throw ValidationError("no external embeddings for '" + id + "'");
  return it->second;
}

Embedder::Embedder(EmbedderConfig config, const VocabTable* vocab,
                   const ExternalEmbeddings* external)
    : config_(config), vocab_(vocab), external_(external) {
  if (config_.kind == EmbedderKind::External && external_ == nullptr) {
    throw ValidationError("external embedder requires an embeddings store");
  }
  if (vocab_ != nullptr && config_.kind == EmbedderKind::Vocab && vocab_->size() > 0 &&
      vocab_->dim() != config_.dim) {
    throw ValidationError("vocab dimension does not match the embedder dimension");
  }
}

EmbeddingMatrix Embedder::raw(const std::string& id, std::span<const Token> tokens) const {
  switch (config_.kind) {
    case EmbedderKind::Hashed:
      return embed_hashed(tokens, config_.dim, config_.seed);
    case EmbedderKind::Vocab: {
      EmbeddingMatrix out(static_cast<Eigen::Index>(tokens.size()),
                          static_cast<Eigen::Index>(config_.dim));
      for (std::size_t l = 0; l < tokens.size(); ++l) {
        const auto row = static_cast<Eigen::Index>(l);
        std::optional<std::size_t> hit = vocab_ ? vocab_->find(tokens[l].text) : std::nullopt;
        if (hit) {
          out.row(row) = vocab_->vectors().row(static_cast<Eigen::Index>(*hit));
        } else {
          out.row(row) = hashed_vector(tokens[l].text, config_.dim, config_.seed).transpose();
        }
      }
      return out;
    }
    case EmbedderKind::External: {
      EmbeddingMatrix out = aligned_vectors(external_->get(id), tokens);
      if (static_cast<std::size_t>(out.cols()) != config_.dim) {
        throw ValidationError("external embeddings for '" + id + "' have dimension " +
                              std::to_string(out.cols()) + ", expected " +
                              std::to_string(config_.dim));
      }
      return out;
    }
  }
  throw ValidationError("unknown embedder kind");
}

EmbeddingMatrix Embedder::embed(const std::string& id, std::span<const Token> tokens) const {
  return contextualize(raw(id, tokens), config_.context_window, config_.context_alpha);
}

std::vector<std::optional<std::size_t>> Embedder::vocab_rows(std::span<const Token> tokens) const {
  std::vector<std::optional<std::size_t>> rows(tokens.size());
  if (config_.kind != EmbedderKind::Vocab || vocab_ == nullptr) return rows;
  for (std::size_t l = 0; l < tokens.size(); ++l) rows[l] = vocab_->find(tokens[l].text);
  return rows;
}

}  // namespace tabret
