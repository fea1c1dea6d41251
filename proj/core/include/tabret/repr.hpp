#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/textproc.hpp"

namespace tabret {

using MatrixRef = Eigen::Ref<const Matrix>;

enum class PoolingKind { Mean, Max, Attentive };

std::string_view to_string(PoolingKind kind);
PoolingKind parse_pooling_kind(std::string_view name);

/// Pooling over a group of token rows. The attentive variant scores each row
/// with a linear layer (u . v_l + b) and returns the softmax-weighted sum.
struct PoolingSpec {
  PoolingKind kind = PoolingKind::Mean;
  Vector u;        ///< attentive only
  double b = 0.0;  ///< attentive only

  static PoolingSpec mean() { return {}; }
  static PoolingSpec max() { return {PoolingKind::Max, {}, 0.0}; }
  static PoolingSpec attentive(Vector u, double b) {
    return {PoolingKind::Attentive, std::move(u), b};
  }
};

/// Learned seeds a_i for implicit question representations (rows).
struct SeedBank {
  Matrix seeds;

  std::size_t size() const { return static_cast<std::size_t>(seeds.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(seeds.cols()); }
};

enum class QuestionReprMode { Explicit, Implicit, Sequence };

struct QuestionReprs {
  Matrix q;  ///< one row per syntactical representation
  QuestionReprMode mode = QuestionReprMode::Explicit;
  /// Implicit mode: row i holds the softmax weights of seed i over tokens.
  Matrix attention;
};

struct SlotKind {
  enum class Kind { Header, Value, Sequence };
  Kind kind = Kind::Header;
  std::size_t column = 0;

  friend bool operator==(const SlotKind&, const SlotKind&) = default;
};

struct TableReprs {
  Matrix c;                     ///< one row per structural slot
  std::vector<SlotKind> kinds;  ///< aligned with the rows of c
  std::size_t columns = 0;
};

/// Row-vector map x -> x W applied to every representation.
struct Projection {
  Matrix w;  ///< d x d'
  bool enabled = false;

  std::size_t input_dim() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(w.cols()); }
};

/// Max-shifted softmax.
Vector softmax(const Vector& logits);

/// softmax over l of (direction . rows_l + bias).
Vector attention_weights(const MatrixRef& rows, const Vector& direction, double bias = 0.0);

/// Pools a p x d block into a d-vector. Throws ValidationError for p = 0.
Vector pool(const MatrixRef& rows, const PoolingSpec& spec);

QuestionReprs explicit_question_reprs(const Matrix& emb, std::span<const TokenSpan> np_spans,
                                      const PoolingSpec& spec);

QuestionReprs implicit_question_reprs(const Matrix& emb, const SeedBank& bank);

TableReprs structural_table_reprs(const Matrix& emb, const LinearizedTable& lin,
                                  const PoolingSpec& spec);

/// 1 x d mean of all token rows; stands in for a [CLS] vector.
Matrix sequence_repr(const Matrix& emb);

Matrix project(const Matrix& reprs, const Projection& proj);

}  // namespace tabret
