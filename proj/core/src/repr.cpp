#include "tabret/repr.hpp"

#include <cmath>
#include <string>

namespace tabret {
namespace {

void check_span(const TokenSpan& span, Eigen::Index length) {
  if (!span.valid_for(static_cast<std::size_t>(length))) {
    throw ValidationError("token span [" + std::to_string(span.start) + ", " +
                          std::to_string(span.end) + ") is invalid for " +
                          std::to_string(length) + " tokens");
  }
}

auto rows_of(const Matrix& emb, const TokenSpan& span) {
  return emb.middleRows(static_cast<Eigen::Index>(span.start),
                        static_cast<Eigen::Index>(span.size()));
}

}  // namespace

std::string_view to_string(PoolingKind kind) {
  switch (kind) {
    case PoolingKind::Mean: return "mean";
    case PoolingKind::Max: return "max";
    case PoolingKind::Attentive: return "attentive";
  }
  return "mean";
}

PoolingKind parse_pooling_kind(std::string_view name) {
  if (name == "mean") return PoolingKind::Mean;
  if (name == "max") return PoolingKind::Max;
  if (name == "attentive") return PoolingKind::Attentive;
  throw ValidationError("unknown pooling kind '" + std::string(name) + "'");
}

Vector softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  Vector w = (logits.array() - top).exp();
  return w / w.sum();
}

Vector attention_weights(const MatrixRef& rows, const Vector& direction, double bias) {
  if (rows.cols() != direction.size()) {
    throw ValidationError("attention direction has dimension " + std::to_string(direction.size()) +
                          ", rows have " + std::to_string(rows.cols()));
  }
  Vector logits = rows * direction;
  logits.array() += bias;
  return softmax(logits);
}

Vector pool(const MatrixRef& rows, const PoolingSpec& spec) {
  if (rows.rows() == 0) throw ValidationError("cannot pool an empty group of rows");
  switch (spec.kind) {
    case PoolingKind::Mean:
      return rows.colwise().mean().transpose();
    case PoolingKind::Max:
      return rows.colwise().maxCoeff().transpose();
    case PoolingKind::Attentive: {
      const Vector w = attention_weights(rows, spec.u, spec.b);
      return rows.transpose() * w;
    }
  }
  throw ValidationError("unknown pooling kind");
}

QuestionReprs explicit_question_reprs(const Matrix& emb, std::span<const TokenSpan> np_spans,
                                      const PoolingSpec& spec) {
  if (np_spans.empty()) throw ValidationError("explicit representations need at least one span");
  QuestionReprs out;
  out.mode = QuestionReprMode::Explicit;
  out.q.resize(static_cast<Eigen::Index>(np_spans.size()), emb.cols());
  for (std::size_t i = 0; i < np_spans.size(); ++i) {
    check_span(np_spans[i], emb.rows());
    out.q.row(static_cast<Eigen::Index>(i)) = pool(rows_of(emb, np_spans[i]), spec).transpose();
  }
  return out;
}

QuestionReprs implicit_question_reprs(const Matrix& emb, const SeedBank& bank) {
  if (bank.size() == 0) throw ValidationError("seed bank is empty");
  if (bank.dim() != static_cast<std::size_t>(emb.cols())) {
    throw ValidationError("seed dimension " + std::to_string(bank.dim()) +
                          " does not match embedding dimension " + std::to_string(emb.cols()));
  }
  if (emb.rows() == 0) throw ValidationError("cannot attend over an empty question");
  QuestionReprs out;
  out.mode = QuestionReprMode::Implicit;
  out.q.resize(bank.seeds.rows(), emb.cols());
  out.attention.resize(bank.seeds.rows(), emb.rows());
  for (Eigen::Index i = 0; i < bank.seeds.rows(); ++i) {
    const Vector w = attention_weights(emb, bank.seeds.row(i).transpose());
    out.attention.row(i) = w.transpose();
    out.q.row(i) = (emb.transpose() * w).transpose();
  }
  return out;
}

TableReprs structural_table_reprs(const Matrix& emb, const LinearizedTable& lin,
                                  const PoolingSpec& spec) {
  TableReprs out;
  out.columns = lin.columns();
  std::vector<Vector> rows;
  for (std::size_t j = 0; j < lin.columns(); ++j) {
    check_span(lin.header_spans[j], emb.rows());
    rows.push_back(pool(rows_of(emb, lin.header_spans[j]), spec));
    out.kinds.push_back({SlotKind::Kind::Header, j});
    if (lin.value_spans[j]) {
      check_span(*lin.value_spans[j], emb.rows());
      rows.push_back(pool(rows_of(emb, *lin.value_spans[j]), spec));
      out.kinds.push_back({SlotKind::Kind::Value, j});
    }
  }
  out.c.resize(static_cast<Eigen::Index>(rows.size()), emb.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.c.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  }
  return out;
}

Matrix sequence_repr(const Matrix& emb) {
  if (emb.rows() == 0) throw ValidationError("cannot build a sequence vector from no tokens");
  return emb.colwise().mean();
}

Matrix project(const Matrix& reprs, const Projection& proj) {
  if (!proj.enabled) return reprs;
  if (reprs.cols() != proj.w.rows()) {
    throw ValidationError("projection expects dimension " + std::to_string(proj.w.rows()) +
                          ", got " + std::to_string(reprs.cols()));
  }
  return reprs * proj.w;
}

}  // namespace tabret
