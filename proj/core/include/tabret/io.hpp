#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "tabret/corpus.hpp"
#include "tabret/score.hpp"

namespace tabret {

/// A question with gold labels given as ORIGINAL table ids.
struct QuestionRecord {
  std::string id;
  std::string question;
  std::vector<std::string> gold_table_ids;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

constexpr std::string_view kQuestionsFormat = "tabret.questions/1";
constexpr std::string_view kRankingsFormat = "tabret.rankings/1";

std::vector<QuestionRecord> parse_questions(std::istream& in, std::string_view source = "<stream>");
std::vector<QuestionRecord> load_questions(const std::filesystem::path& path);
void write_questions(const std::vector<QuestionRecord>& questions, std::ostream& out);
void write_questions(const std::vector<QuestionRecord>& questions, const std::filesystem::path& path);

/// Distinct gold ids of a question, resolved through the mapping, sorted.
std::vector<std::string> resolve_golds(const QuestionRecord& question, const TableMapping& mapping);

struct Ranking {
  std::string question_id;
  std::vector<ScoredTable> ranking;

  friend bool operator==(const Ranking&, const Ranking&) = default;
};

void write_ranking(const Ranking& ranking, std::ostream& out);
std::vector<Ranking> parse_rankings(std::istream& in, std::string_view source = "<stream>");
std::vector<Ranking> load_rankings(const std::filesystem::path& path);

/// Writes text to a file, replacing it. Throws IoError.
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace tabret
