#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "tabret/eval.hpp"
#include "tabret/textproc.hpp"

namespace tabret {
namespace {

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aiou";
constexpr std::array<std::string_view, 10> kDistractors = {"which", "the", "on",  "of",  "in",
                                                          "what",  "is",  "for", "with", "at"};

std::string numbered(char prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%0*zu", prefix, width, i);
  return buf;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

}  // namespace

std::vector<std::string> synthetic_vocabulary(std::size_t size, std::uint64_t seed) {
  Rng rng(mix64(seed) ^ 0x766f636162ULL);
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  const std::size_t capacity = 1000000;
  std::size_t attempts = 0;
  while (words.size() < size) {
    if (++attempts > capacity) throw ValidationError("cannot draw that many distinct pseudo-words");
    const std::size_t syllables = 2 + rng.below(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w.push_back(kConsonants[rng.below(kConsonants.size())]);
      w.push_back(kVowels[rng.below(kVowels.size())]);
    }
    if (seen.contains(w)) continue;
    Token t{w, 0, w.size(), false};
    if (pos_tag(std::span<const Token>(&t, 1)).front().tag != Tag::Noun) continue;
    seen.insert(w);
    words.push_back(std::move(w));
  }
  return words;
}

SyntheticBenchmark generate_synthetic_benchmark(const SyntheticConfig& c) {
  if (c.n_tables < 2) throw ValidationError("the synthetic benchmark needs at least two tables");
  if (c.columns_per_table == 0) throw ValidationError("tables need at least one column");
  if (c.vocab_size < 2) throw ValidationError("vocabulary needs at least two words");
  if (c.header_mentions + c.value_mentions == 0) {
    throw ValidationError("questions need at least one gold mention");
  }
  if (c.header_mentions > c.columns_per_table ||
      (c.rows_per_table > 0 ? c.value_mentions > c.columns_per_table : c.value_mentions > 0)) {
    throw ValidationError("more gold mentions requested than the table provides");
  }
  if (!(c.train_fraction >= 0 && c.dev_fraction >= 0 && c.train_fraction + c.dev_fraction <= 1.0)) {
    throw ValidationError("split fractions must be non-negative and sum to at most 1");
  }

  const auto vocab = synthetic_vocabulary(c.vocab_size, c.seed);
  Rng rng(mix64(c.seed) ^ 0x73796e7468ULL);
  auto word = [&] { return vocab[rng.below(vocab.size())]; };

  SyntheticBenchmark out;
  std::vector<QuestionRecord> questions;
  for (std::size_t t = 0; t < c.n_tables; ++t) {
    RawTable table;
    table.id = numbered('t', t, 5);
    for (std::size_t j = 0; j < c.columns_per_table; ++j) table.headers.push_back(word());
    for (std::size_t r = 0; r < c.rows_per_table; ++r) {
      Row row;
      for (std::size_t j = 0; j < c.columns_per_table; ++j) row.push_back(word());
      table.rows.push_back(std::move(row));
    }

    for (std::size_t k = 0; k < c.questions_per_table; ++k) {
      std::vector<std::size_t> columns(c.columns_per_table);
      for (std::size_t j = 0; j < columns.size(); ++j) columns[j] = j;
      std::vector<std::string> words;
      rng.shuffle(columns);
      for (std::size_t h = 0; h < c.header_mentions; ++h) words.push_back(table.headers[columns[h]]);
      rng.shuffle(columns);
      for (std::size_t v = 0; v < c.value_mentions; ++v) words.push_back(table.rows.front()[columns[v]]);
      rng.shuffle(words);
      for (std::size_t d = 0; d < c.distractor_tokens; ++d) {
        const auto pos = static_cast<std::ptrdiff_t>(rng.below(words.size() + 1));
        words.insert(words.begin() + pos, std::string(kDistractors[rng.below(kDistractors.size())]));
      }
      questions.push_back({numbered('q', questions.size(), 6), join(words), {table.id}});
    }
    out.tables.push_back(std::move(table));
  }

  std::vector<std::size_t> order(questions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n = static_cast<double>(questions.size());
  const auto n_train = static_cast<std::size_t>(std::floor(c.train_fraction * n));
  const auto n_dev = static_cast<std::size_t>(std::floor(c.dev_fraction * n));
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> dev(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), order.end());
  for (auto* split : {&train, &dev, &test}) std::sort(split->begin(), split->end());
  for (std::size_t i : train) out.train.push_back(questions[i]);
  for (std::size_t i : dev) out.dev.push_back(questions[i]);
  for (std::size_t i : test) out.test.push_back(questions[i]);
  return out;
}

}  // namespace tabret
