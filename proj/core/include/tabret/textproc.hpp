#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tabret {

struct DistinctTable;

struct Token {
  std::string text;        ///< lowercased surface form
  std::size_t begin = 0;   ///< byte offset into the source, inclusive
  std::size_t end = 0;     ///< byte offset into the source, exclusive
  bool capitalized = false;  ///< first source byte was an uppercase letter

  friend bool operator==(const Token&, const Token&) = default;
};

/// Half-open token index range [start, end).
struct TokenSpan {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
  bool valid_for(std::size_t length) const { return start < end && end <= length; }

  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

enum class Tag { Det, Adj, Noun, Propn, Num, Verb, Prep, Other };

std::string_view to_string(Tag tag);

struct TaggedToken {
  Token token;
  Tag tag = Tag::Other;
};

/// Column-major linearization of a table. No separator tokens are emitted;
/// column structure lives entirely in the span maps.
struct LinearizedTable {
  std::vector<Token> tokens;
  std::vector<TokenSpan> header_spans;
  /// Span of the first row's cell, per column. Empty optional when the table
  /// has no rows or that cell produced no tokens.
  std::vector<std::optional<TokenSpan>> value_spans;

  std::size_t columns() const { return header_spans.size(); }
};

struct TokenizedQuestion {
  std::string id;
  std::vector<Token> tokens;
  std::optional<std::vector<TokenSpan>> np_spans;
};

/// Lowercasing word/punctuation tokenizer.
///
/// Whitespace separates tokens; every ASCII punctuation byte is a token of its
/// own, except '.' and ',' sitting between two digits, which stay inside the
/// number ("1,000.5"). Bytes >= 0x80 are treated as word characters.
class Tokenizer {
 public:
  /// Throws ValidationError on empty or whitespace-only text.
  std::vector<Token> tokenize(std::string_view text) const;

  /// Like tokenize() but returns an empty list for blank text. Offsets are
  /// shifted by `offset`.
  std::vector<Token> tokenize_lenient(std::string_view text, std::size_t offset = 0) const;

  std::size_t count(std::string_view text) const;
};

std::vector<Token> tokenize(std::string_view text);

std::vector<TaggedToken> pos_tag(std::span<const Token> tokens);

/// Greedy chunking with NP := DET? ADJ* (NOUN|PROPN|NUM)+. When nothing
/// matches, a single span covering the whole input is returned.
std::vector<TokenSpan> extract_noun_phrases(std::span<const TaggedToken> tagged);

/// Throws ValidationError for zero columns or a blank header.
LinearizedTable linearize_table(const DistinctTable& table, const Tokenizer& tokenizer);

/// Tokenizes a question and, when `parse` is set, attaches noun-phrase spans.
TokenizedQuestion prepare_question(std::string id, std::string_view text, bool parse,
                                   const Tokenizer& tokenizer = Tokenizer{});

std::vector<std::string> token_texts(std::span<const Token> tokens);

}  // namespace tabret
