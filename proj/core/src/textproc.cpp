#include "tabret/textproc.hpp"

#include <array>
#include <unordered_map>

#include "tabret/common.hpp"
#include "tabret/corpus.hpp"

namespace tabret {
namespace {

bool is_space(unsigned char c) { return c <= 0x20 || c == 0x7f; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_upper(unsigned char c) { return c >= 'A' && c <= 'Z'; }
bool is_alnum(unsigned char c) {
  return is_digit(c) || is_upper(c) || (c >= 'a' && c <= 'z');
}
bool is_punct(unsigned char c) { return c > 0x20 && c < 0x7f && !is_alnum(c); }
bool is_word(unsigned char c) { return is_alnum(c) || c >= 0x80; }

char lower(unsigned char c) { return static_cast<char>(is_upper(c) ? c + ('a' - 'A') : c); }

void tokenize_into(std::string_view text, std::size_t offset, std::vector<Token>& out) {
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto at = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  while (i < n) {
    const unsigned char c = at(i);
    if (is_space(c)) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    if (is_punct(c)) {
      ++i;
    } else {
      while (i < n) {
        const unsigned char cur = at(i);
        if (is_word(cur)) {
          ++i;
        } else if ((cur == '.' || cur == ',') && i > start && is_digit(at(i - 1)) &&
                   i + 1 < n && is_digit(at(i + 1))) {
          ++i;
        } else {
          break;
        }
      }
    }
    Token token;
    token.text.reserve(i - start);
    for (std::size_t k = start; k < i; ++k) token.text.push_back(lower(at(k)));
    token.begin = offset + start;
    token.end = offset + i;
    token.capitalized = is_upper(c);
    out.push_back(std::move(token));
  }
}

using Lexicon = std::unordered_map<std::string_view, Tag>;

const Lexicon& closed_class_lexicon() {
  static const Lexicon lexicon = [] {
    Lexicon lex;
    for (std::string_view w : {"the", "a", "an", "this", "that", "these", "those", "each",
                               "every", "some", "any", "all", "no", "its", "his", "her",
                               "their", "our", "my", "your", "another", "either", "neither"}) {
      lex.emplace(w, Tag::Det);
    }
    for (std::string_view w :
         {"on", "in", "at", "of", "for", "with", "by", "from", "to", "into", "onto",
          "during", "before", "after", "between", "about", "against", "under", "over",
          "through", "than", "as", "per", "via", "without", "within", "since", "until",
          "like", "near", "among", "across", "behind", "beyond", "above", "below", "upon",
          "toward", "towards", "around", "along", "off", "out", "up", "down"}) {
      lex.emplace(w, Tag::Prep);
    }
    for (std::string_view w :
         {"is", "are", "was", "were", "be", "been", "am", "do", "does", "did", "has",
          "have", "had", "will", "would", "can", "could", "shall", "should", "may", "might",
          "must", "get", "gets", "got", "play", "plays", "won", "win", "wins", "make",
          "makes", "made", "take", "takes", "took", "give", "gave", "go", "goes", "went",
          "say", "said", "see", "saw", "lost", "lose", "scored", "held", "hold", "came",
          "come", "run", "runs", "ran", "became", "become", "know", "knew", "tell", "told", "find", "found"}) {
      lex.emplace(w, Tag::Verb);
    }
    for (std::string_view w :
         {"new", "old", "big", "small", "high", "low", "long", "short", "total", "average",
          "other", "same", "many", "much", "more", "most", "less", "least", "few", "several",
          "good", "great", "first", "last", "next", "previous", "final", "only", "top",
          "best", "worst", "main", "current", "former", "late", "early"}) {
      lex.emplace(w, Tag::Adj);
    }
    for (std::string_view w : {"one",    "two",   "three",   "four",    "five",    "six",
                               "seven",  "eight", "nine",    "ten",     "eleven",  "twelve",
                               "twenty", "fifty", "hundred", "thousand", "million", "billion"}) {
      lex.emplace(w, Tag::Num);
    }
    for (std::string_view w :
         {"which", "what", "who", "whom", "whose", "when", "where", "why", "how", "it",
          "he", "she", "they", "we", "i", "you", "them", "him", "us", "me", "and", "or",
          "but", "nor", "if", "then", "not", "there", "here", "so", "also", "very", "too"}) {
      lex.emplace(w, Tag::Other);
    }
    return lex;
  }();
  return lexicon;
}

bool is_numeric(std::string_view text) {
  if (text.empty() || !is_digit(static_cast<unsigned char>(text.front()))) return false;
  for (unsigned char c : text) {
    if (!is_digit(c) && c != '.' && c != ',') return false;
  }
  return true;
}

bool all_punct(std::string_view text) {
  for (unsigned char c : text) {
    if (!is_punct(c)) return false;
  }
  return true;
}

bool ends_with(std::string_view text, std::string_view suffix) {
  return text.size() > suffix.size() + 2 && text.substr(text.size() - suffix.size()) == suffix;
}

Tag suffix_tag(std::string_view text) {
  static constexpr std::array<std::string_view, 2> verb_suffixes{"ing", "ed"};
  static constexpr std::array<std::string_view, 8> adj_suffixes{"ous", "ful",  "est", "less",
                                                                "ish", "ive", "able", "ible"};
  for (auto s : verb_suffixes) {
    if (ends_with(text, s)) return Tag::Verb;
  }
  for (auto s : adj_suffixes) {
    if (ends_with(text, s)) return Tag::Adj;
  }
  return Tag::Other;
}

bool noun_like(Tag tag) { return tag == Tag::Noun || tag == Tag::Propn || tag == Tag::Num; }

}  // namespace

std::string_view to_string(Tag tag) {
  switch (tag) {
    case Tag::Det: return "DET";
    case Tag::Adj: return "ADJ";
    case Tag::Noun: return "NOUN";
    case Tag::Propn: return "PROPN";
    case Tag::Num: return "NUM";
    case Tag::Verb: return "VERB";
    case Tag::Prep: return "PREP";
    case Tag::Other: return "OTHER";
  }
  return "OTHER";
}

std::vector<Token> Tokenizer::tokenize(std::string_view text) const {
  auto tokens = tokenize_lenient(text);
  if (tokens.empty()) throw ValidationError("cannot tokenize empty or whitespace-only text");
  return tokens;
}

std::vector<Token> Tokenizer::tokenize_lenient(std::string_view text, std::size_t offset) const {
  std::vector<Token> out;
  tokenize_into(text, offset, out);
  return out;
}

std::size_t Tokenizer::count(std::string_view text) const {
  return tokenize_lenient(text).size();
}

std::vector<Token> tokenize(std::string_view text) { return Tokenizer{}.tokenize(text); }

std::vector<TaggedToken> pos_tag(std::span<const Token> tokens) {
  const auto& lexicon = closed_class_lexicon();
  std::vector<TaggedToken> tagged;
  tagged.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token& token = tokens[i];
    Tag tag = Tag::Noun;
    if (all_punct(token.text)) {
      tag = Tag::Other;
    } else if (auto it = lexicon.find(token.text); it != lexicon.end()) {
      tag = it->second;
    } else if (is_numeric(token.text)) {
      tag = Tag::Num;
    } else if (Tag by_suffix = suffix_tag(token.text); by_suffix != Tag::Other) {
      tag = by_suffix;
    } else if (token.capitalized && i > 0) {
      // Sentence-initial capitals carry no signal.
      tag = Tag::Propn;
    }
    tagged.push_back({token, tag});
  }
  return tagged;
}

std::vector<TokenSpan> extract_noun_phrases(std::span<const TaggedToken> tagged) {
  std::vector<TokenSpan> spans;
  const std::size_t n = tagged.size();
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    if (tagged[j].tag == Tag::Det) ++j;
    while (j < n && tagged[j].tag == Tag::Adj) ++j;
    std::size_t k = j;
    while (k < n && noun_like(tagged[k].tag)) ++k;
    if (k > j) {
      spans.push_back({i, k});
      i = k;
    } else {
      ++i;
    }
  }
  if (spans.empty() && n > 0) spans.push_back({0, n});
  return spans;
}

LinearizedTable linearize_table(const DistinctTable& table, const Tokenizer& /*tokenizer*/) {
  if (table.headers.empty()) {
    throw ValidationError("table '" + table.distinct_id + "' has no columns");
  }
  LinearizedTable lin;
  lin.header_spans.reserve(table.headers.size());
  lin.value_spans.reserve(table.headers.size());
  // Offsets address the virtual string of all pieces joined by single spaces.
  std::size_t offset = 0;
  auto append = [&](std::string_view piece) {
    const std::size_t start = lin.tokens.size();
    tokenize_into(piece, offset, lin.tokens);
    offset += piece.size() + 1;
    return TokenSpan{start, lin.tokens.size()};
  };
  for (std::size_t col = 0; col < table.headers.size(); ++col) {
    const TokenSpan header = append(table.headers[col]);
    if (header.size() == 0) {
      throw ValidationError("table '" + table.distinct_id + "' has an empty header at column " +
                            std::to_string(col));
    }
    lin.header_spans.push_back(header);
    std::optional<TokenSpan> first_value;
    for (std::size_t row = 0; row < table.rows.size(); ++row) {
      const TokenSpan cell = append(table.rows[row][col]);
      if (row == 0 && cell.size() > 0) first_value = cell;
    }
    lin.value_spans.push_back(first_value);
  }
  return lin;
}

TokenizedQuestion prepare_question(std::string id, std::string_view text, bool parse,
                                   const Tokenizer& tokenizer) {
  TokenizedQuestion q;
  q.id = std::move(id);
  q.tokens = tokenizer.tokenize(text);
  if (parse) q.np_spans = extract_noun_phrases(pos_tag(q.tokens));
  return q;
}

std::vector<std::string> token_texts(std::span<const Token> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.text);
  return out;
}

}  // namespace tabret
