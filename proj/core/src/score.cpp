#include "tabret/score.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

namespace tabret {
namespace {

using nlohmann::json;

constexpr char kIndexMagic[8] = {'T', 'A', 'B', 'R', 'E', 'T', 'I', 'X'};

// Dot products of B question rows with one table row. Eight independent
// accumulators per question row give a fixed summation order for a given dim
// and enough independent chains for the compiler to vectorize; each float is
// widened once for all B rows.
using Lanes = double __attribute__((vector_size(32)));

template <std::size_t B>
[[gnu::always_inline]] inline void block_dots(const double* const* q, const float* c, std::size_t d,
                                              double* out) {
  Lanes lo[B] = {};
  Lanes hi[B] = {};
  std::size_t k = 0;
  for (; k + 8 <= d; k += 8) {
    const Lanes c_lo = {c[k], c[k + 1], c[k + 2], c[k + 3]};
    const Lanes c_hi = {c[k + 4], c[k + 5], c[k + 6], c[k + 7]};
    for (std::size_t r = 0; r < B; ++r) {
      Lanes q_lo;
      Lanes q_hi;
      std::memcpy(&q_lo, q[r] + k, sizeof q_lo);
      std::memcpy(&q_hi, q[r] + k + 4, sizeof q_hi);
      lo[r] += q_lo * c_lo;
      hi[r] += q_hi * c_hi;
    }
  }
  for (std::size_t r = 0; r < B; ++r) {
    double s = ((lo[r][0] + lo[r][1]) + (lo[r][2] + lo[r][3])) + ((hi[r][0] + hi[r][1]) + (hi[r][2] + hi[r][3]));
    for (std::size_t t = k; t < d; ++t) s += q[r][t] * static_cast<double>(c[t]);
    out[r] = s;
  }
}

template <std::size_t B>
[[gnu::always_inline]] inline double block_maxsim(const double* const* q, const float* rows, std::size_t k,
                                                  std::size_t d) {
  double best[B];
  double dots[B];
  for (std::size_t r = 0; r < B; ++r) best[r] = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    // About one table ahead; a prefetch past the buffer end never faults.
    const std::uintptr_t next = reinterpret_cast<std::uintptr_t>(rows + j * d) + 8 * d * sizeof(float);
    for (std::size_t t = 0; t < d * sizeof(float); t += 64) {
      __builtin_prefetch(reinterpret_cast<const void*>(next + t));
    }
    block_dots<B>(q, rows + j * d, d, dots);
    for (std::size_t r = 0; r < B; ++r) best[r] = std::max(best[r], dots[r]);
  }
  double total = 0.0;
  for (std::size_t r = 0; r < B; ++r) total += best[r];
  return total;
}

// No FMA in either clone, so both produce identical bits.
[[gnu::target_clones("avx2", "default")]] double maxsim_kernel(const double* q, std::size_t n,
                                                               const float* rows, std::size_t k,
                                                               std::size_t d) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; i += 4) {
    const double* block[4] = {q + i * d, q + std::min(i + 1, n - 1) * d, q + std::min(i + 2, n - 1) * d,
                              q + std::min(i + 3, n - 1) * d};
    switch (std::min<std::size_t>(4, n - i)) {
      case 1: total += block_maxsim<1>(block, rows, k, d); break;
      case 2: total += block_maxsim<2>(block, rows, k, d); break;
      case 3: total += block_maxsim<3>(block, rows, k, d); break;
      default: total += block_maxsim<4>(block, rows, k, d); break;
    }
  }
  return total;
}

bool ranks_before(double score_a, std::size_t a, double score_b, std::size_t b) {
  if (score_a != score_b) return score_a > score_b;
  return a < b;
}

template <class Error>
[[noreturn]] void rethrow_for_table(const std::string& id, const Error& e) {
  throw Error("table '" + id + "': " + e.what());
}

}  // namespace

PairScore score_pair(const Matrix& q, const Matrix& c) {
  if (c.rows() == 0) throw ValidationError("cannot score against a table with no representations");
  if (q.rows() == 0) throw ValidationError("cannot score a question with no representations");
  if (q.cols() != c.cols()) {
    throw ValidationError("question dimension " + std::to_string(q.cols()) +
                          " does not match table dimension " + std::to_string(c.cols()));
  }
  PairScore out;
  out.matrix = q * c.transpose();
  if (!out.matrix.allFinite()) throw NumericError("non-finite fine-grained score");
  out.argmax.resize(static_cast<std::size_t>(q.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < c.rows(); ++j) {
      if (out.matrix(i, j) > out.matrix(i, best)) best = j;
    }
    out.argmax[static_cast<std::size_t>(i)] = best;
    out.score += out.matrix(i, best);
  }
  return out;
}

PairScore score_pair(const QuestionReprs& q, const TableReprs& c) { return score_pair(q.q, c.c); }

std::vector<LinearizedEntry> linearize_corpus(const Corpus& corpus, const Tokenizer& tokenizer) {
  std::vector<LinearizedEntry> out;
  out.reserve(corpus.tables.size());
  for (const auto& t : corpus.tables) out.push_back({t.distinct_id, linearize_table(t, tokenizer)});
  std::sort(out.begin(), out.end(),
            [](const LinearizedEntry& a, const LinearizedEntry& b) { return a.id < b.id; });
  return out;
}

Index::Index(std::size_t dim, std::string fingerprint, std::string description)
    : dim_(dim), fingerprint_(std::move(fingerprint)), description_(std::move(description)) {}

void Index::add(std::string id, const TableReprs& reprs) {
  if (!entries_.empty() && !(entries_.back().id < id)) {
    throw ValidationError("index ids must be unique and ascending ('" + id + "')");
  }
  if (static_cast<std::size_t>(reprs.c.cols()) != dim_) {
    throw ValidationError("table '" + id + "' representations have the wrong dimension");
  }
  if (reprs.c.rows() == 0) throw ValidationError("table '" + id + "' has no representations");
  Entry entry{std::move(id), data_.size() / std::max<std::size_t>(dim_, 1),
              static_cast<std::size_t>(reprs.c.rows()), reprs.kinds};
  data_.reserve(data_.size() + static_cast<std::size_t>(reprs.c.size()));
  for (Eigen::Index i = 0; i < reprs.c.size(); ++i) {
    data_.push_back(static_cast<float>(reprs.c.data()[i]));
  }
  entries_.push_back(std::move(entry));
}

std::span<const float> Index::rows(std::size_t entry) const {
  const Entry& e = entries_.at(entry);
  return {data_.data() + e.offset * dim_, e.rows * dim_};
}

void Index::write(std::ostream& out) const {
  json entries = json::array();
  for (const auto& e : entries_) {
    std::vector<std::string> kinds;
    kinds.reserve(e.kinds.size());
    for (const auto& k : e.kinds) kinds.push_back(slot_name(k));
    entries.push_back({{"id", e.id}, {"rows", e.rows}, {"kinds", kinds}});
  }
  json header{{"format", kIndexFormat},
              {"dim", dim_},
              {"fingerprint", fingerprint_},
              {"fingerprint_description", description_},
              {"entries", entries}};
  const std::string text = header.dump();
  out.write(kIndexMagic, sizeof(kIndexMagic));
  const std::uint64_t size = text.size();
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(data_.data()),
            static_cast<std::streamsize>(data_.size() * sizeof(float)));
}

void Index::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write(out);
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

Index Index::read(std::istream& in, std::string_view source) {
  const std::string where(source);
  char magic[sizeof(kIndexMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) {
    throw ValidationError(where + ": not a tabret index");
  }
  std::uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  if (!in) throw ValidationError(where + ": truncated index header");
  Index index;
  std::size_t total_rows = 0;
  try {
    const json header = json::parse(text);
    if (header.at("format").get<std::string>() != kIndexFormat) {
      throw ValidationError(where + ": unsupported index format");
    }
    index.dim_ = header.at("dim").get<std::size_t>();
    index.fingerprint_ = header.at("fingerprint").get<std::string>();
    index.description_ = header.at("fingerprint_description").get<std::string>();
    for (const auto& e : header.at("entries")) {
      Entry entry;
      entry.id = e.at("id").get<std::string>();
      entry.rows = e.at("rows").get<std::size_t>();
      entry.offset = total_rows;
      for (const auto& k : e.at("kinds")) entry.kinds.push_back(parse_slot_name(k.get<std::string>()));
      if (entry.kinds.size() != entry.rows) {
        throw ValidationError(where + ": entry '" + entry.id + "' kinds do not match its rows");
      }
      total_rows += entry.rows;
      index.entries_.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw ValidationError(where + ": malformed index header (" + e.what() + ")");
  }
  index.data_.resize(total_rows * index.dim_);
  in.read(reinterpret_cast<char*>(index.data_.data()),
          static_cast<std::streamsize>(index.data_.size() * sizeof(float)));
  if (!in) throw ValidationError(where + ": truncated index data");
  return index;
}

Index Index::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return read(in, path.string());
}

Index build_index(std::span<const LinearizedEntry> tables, const Encoder& encoder,
                  std::size_t threads) {
  Index index(encoder.params().output_dim(), encoder.fingerprint(),
              encoder.fingerprint_description());
  std::vector<std::size_t> order(tables.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return tables[a].id < tables[b].id; });

  std::vector<TableReprs> reprs(tables.size());
  parallel_for(tables.size(), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& entry = tables[order[i]];
      try {
        reprs[i] = encoder.encode_table(entry.id, entry.table);
      } catch (const NumericError& e) {
        rethrow_for_table(entry.id, e);
      } catch (const ValidationError& e) {
        rethrow_for_table(entry.id, e);
      }
    }
  });
  for (std::size_t i = 0; i < order.size(); ++i) index.add(tables[order[i]].id, reprs[i]);
  return index;
}

Index build_index(const Corpus& corpus, const Encoder& encoder, std::size_t threads) {
  const auto tables = linearize_corpus(corpus);
  return build_index(tables, encoder, threads);
}

double maxsim(const Matrix& q, std::span<const float> rows, std::size_t dim) {
  return maxsim_kernel(q.data(), static_cast<std::size_t>(q.rows()), rows.data(), rows.size() / dim, dim);
}

std::vector<ScoredTable> retrieve_topk(const Matrix& question_reprs, const Index& index,
                                       std::size_t k, std::size_t threads) {
  if (k == 0) throw ValidationError("K must be at least 1");
  if (index.empty()) return {};
  if (static_cast<std::size_t>(question_reprs.cols()) != index.dim()) {
    throw ValidationError("question dimension " + std::to_string(question_reprs.cols()) +
                          " does not match index dimension " + std::to_string(index.dim()));
  }
  const std::size_t n = index.size();
  std::vector<double> scores(n);
  parallel_for(n, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t e = begin; e < end; ++e) scores[e] = maxsim(question_reprs, index.rows(e), index.dim());
  });
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t top = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](std::size_t a, std::size_t b) { return ranks_before(scores[a], a, scores[b], b); });
  std::vector<ScoredTable> out;
  out.reserve(top);
  for (std::size_t r = 0; r < top; ++r) out.push_back({index.entries()[order[r]].id, scores[order[r]]});
  return out;
}

void check_compatible(const Index& index, const Encoder& encoder) {
  if (index.fingerprint() != encoder.fingerprint()) {
    throw FingerprintError("index fingerprint " + index.fingerprint() +
                           " does not match the model fingerprint " + encoder.fingerprint());
  }
}

std::vector<ScoredTable> retrieve_topk(const TokenizedQuestion& question, const Index& index,
                                       std::size_t k, const Encoder& encoder, std::size_t threads) {
  check_compatible(index, encoder);
  return retrieve_topk(encoder.encode_question(question).q, index, k, threads);
}

std::vector<ScoredTable> brute_force_retrieve(const Matrix& question_reprs, const Index& index) {
  const std::size_t d = index.dim();
  if (!index.empty() && static_cast<std::size_t>(question_reprs.cols()) != d) {
    throw ValidationError("question dimension does not match index dimension");
  }
  std::vector<double> scores(index.size(), 0.0);
  for (std::size_t e = 0; e < index.size(); ++e) {
    const auto rows = index.rows(e);
    const std::size_t k = rows.size() / d;
    for (Eigen::Index i = 0; i < question_reprs.rows(); ++i) {
      std::optional<double> best;
      for (std::size_t j = 0; j < k; ++j) {
        double w = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          w += question_reprs(i, static_cast<Eigen::Index>(c)) * static_cast<double>(rows[j * d + c]);
        }
        if (!best || w > *best) best = w;
      }
      scores[e] += *best;
    }
  }
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ranks_before(scores[a], a, scores[b], b); });
  std::vector<ScoredTable> out;
  out.reserve(order.size());
  for (std::size_t e : order) out.push_back({index.entries()[e].id, scores[e]});
  return out;
}

std::vector<ScoredTable> brute_force_retrieve(const TokenizedQuestion& question,
                                              const Index& index, const Encoder& encoder) {
  check_compatible(index, encoder);
  return brute_force_retrieve(encoder.encode_question(question).q, index);
}

std::string slot_name(const SlotKind& slot) {
  switch (slot.kind) {
    case SlotKind::Kind::Header: return "header:" + std::to_string(slot.column);
    case SlotKind::Kind::Value: return "value:" + std::to_string(slot.column);
    case SlotKind::Kind::Sequence: return "sequence";
  }
  return "sequence";
}

SlotKind parse_slot_name(std::string_view name) {
  if (name == "sequence") return {SlotKind::Kind::Sequence, 0};
  const auto colon = name.find(':');
  if (colon == std::string_view::npos) throw ValidationError("bad slot name '" + std::string(name) + "'");
  const auto kind = name.substr(0, colon);
  const std::size_t column = std::stoul(std::string(name.substr(colon + 1)));
  if (kind == "header") return {SlotKind::Kind::Header, column};
  if (kind == "value") return {SlotKind::Kind::Value, column};
  throw ValidationError("bad slot name '" + std::string(name) + "'");
}

}  // namespace tabret
