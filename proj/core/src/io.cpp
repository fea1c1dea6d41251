#include "tabret/io.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tabret {
namespace {

using nlohmann::json;

bool blank(const std::string& line) { return line.find_first_not_of(" \t\r\n") == std::string::npos; }

template <class Parse>
void for_each_record(std::istream& in, std::string_view source, Parse&& parse) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    try {
      parse(json::parse(line), where);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failure on " + std::string(source));
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

std::vector<QuestionRecord> parse_questions(std::istream& in, std::string_view source) {
  std::vector<QuestionRecord> out;
  for_each_record(in, source, [&](const json& j, const std::string& where) {
    QuestionRecord q;
    q.id = j.at("id").get<std::string>();
    q.question = j.at("question").get<std::string>();
    q.gold_table_ids = j.value("gold_table_ids", std::vector<std::string>{});
    if (q.id.empty()) throw ValidationError(where + ": question with empty id");
    out.push_back(std::move(q));
  });
  return out;
}

std::vector<QuestionRecord> load_questions(const std::filesystem::path& path) {
  auto in = open_in(path);
  return parse_questions(in, path.string());
}

void write_questions(const std::vector<QuestionRecord>& questions, std::ostream& out) {
  for (const auto& q : questions) {
    out << json{{"format", kQuestionsFormat},
                {"id", q.id},
                {"question", q.question},
                {"gold_table_ids", q.gold_table_ids}}
               .dump()
        << '\n';
  }
}

void write_questions(const std::vector<QuestionRecord>& questions, const std::filesystem::path& path) {
  std::ostringstream buffer;
  write_questions(questions, buffer);
  write_text_file(path, buffer.str());
}

std::vector<std::string> resolve_golds(const QuestionRecord& question, const TableMapping& mapping) {
  std::vector<std::string> out;
  out.reserve(question.gold_table_ids.size());
  for (const auto& g : question.gold_table_ids) {
    try {
      out.push_back(mapping.resolve(g));
    } catch (const ValidationError& e) {
      throw ValidationError("question '" + question.id + "': " + e.what());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void write_ranking(const Ranking& ranking, std::ostream& out) {
  json list = json::array();
  for (const auto& r : ranking.ranking) list.push_back({{"table_id", r.distinct_id}, {"score", r.score}});
  out << json{{"format", kRankingsFormat}, {"question_id", ranking.question_id}, {"ranking", list}}.dump()
      << '\n';
}

std::vector<Ranking> parse_rankings(std::istream& in, std::string_view source) {
  std::vector<Ranking> out;
  for_each_record(in, source, [&](const json& j, const std::string&) {
    Ranking r;
    r.question_id = j.at("question_id").get<std::string>();
    for (const auto& e : j.at("ranking")) {
      r.ranking.push_back({e.at("table_id").get<std::string>(), e.at("score").get<double>()});
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<Ranking> load_rankings(const std::filesystem::path& path) {
  auto in = open_in(path);
  return parse_rankings(in, path.string());
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return buffer.str();
}

}  // namespace tabret
