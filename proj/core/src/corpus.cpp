#include "tabret/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "tabret/common.hpp"
#include "tabret/textproc.hpp"

namespace tabret {
namespace {

using nlohmann::json;

std::string cell_to_string(const json& cell, std::string_view where) {
  if (cell.is_string()) return cell.get<std::string>();
  if (cell.is_number()) return cell.dump();
  if (cell.is_null()) return {};
  throw ValidationError(std::string(where) + ": cell must be a string or number");
}

std::vector<std::string> string_list(const json& value, std::string_view field,
                                     std::string_view where) {
  if (!value.is_array()) {
    throw ValidationError(std::string(where) + ": '" + std::string(field) + "' must be an array");
  }
  std::vector<std::string> out;
  out.reserve(value.size());
  for (const auto& item : value) out.push_back(cell_to_string(item, where));
  return out;
}

RawTable parse_record(const json& record, std::string_view where) {
  if (!record.is_object()) throw ValidationError(std::string(where) + ": record is not an object");
  RawTable table;
  const auto id = record.find("id");
  if (id == record.end() || !id->is_string()) {
    throw ValidationError(std::string(where) + ": missing string field 'id'");
  }
  table.id = id->get<std::string>();
  const std::string context = std::string(where) + " (table '" + table.id + "')";
  if (auto title = record.find("title"); title != record.end() && !title->is_null()) {
    if (!title->is_string()) throw ValidationError(context + ": 'title' must be a string");
    table.title = title->get<std::string>();
  }
  const auto headers = record.find("headers");
  if (headers == record.end()) throw ValidationError(context + ": missing field 'headers'");
  table.headers = string_list(*headers, "headers", context);
  if (auto rows = record.find("rows"); rows != record.end()) {
    if (!rows->is_array()) throw ValidationError(context + ": 'rows' must be an array");
    table.rows.reserve(rows->size());
    for (const auto& row : *rows) table.rows.push_back(string_list(row, "rows", context));
  }
  if (auto sources = record.find("source_ids"); sources != record.end()) {
    table.source_ids = string_list(*sources, "source_ids", context);
  }
  return table;
}

json record_json(const DistinctTable& table) {
  return json{{"format", kCorpusFormat},
              {"id", table.distinct_id},
              {"headers", table.headers},
              {"rows", table.rows},
              {"source_ids", table.source_ids}};
}

std::string trim_lower(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (b < e && space(s[b])) ++b;
  while (e > b && space(s[e - 1])) --e;
  std::string out(s.substr(b, e - b));
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c + ('a' - 'A'));
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

const std::string& TableMapping::resolve(const std::string& original_id) const {
  auto it = entries.find(original_id);
  if (it == entries.end()) {
    throw ValidationError("gold table id '" + original_id + "' is not in the table mapping");
  }
  return it->second;
}

const DistinctTable* Corpus::find(std::string_view distinct_id) const {
  for (const auto& t : tables) {
    if (t.distinct_id == distinct_id) return &t;
  }
  return nullptr;
}

void validate_table(const RawTable& table) {
  if (table.id.empty()) throw ValidationError("table with empty id");
  if (table.headers.empty()) {
    throw ValidationError("table '" + table.id + "' has no headers");
  }
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    if (table.rows[r].size() != table.headers.size()) {
      throw ValidationError("table '" + table.id + "' row " + std::to_string(r) + " has " +
                            std::to_string(table.rows[r].size()) + " cells but " +
                            std::to_string(table.headers.size()) + " headers");
    }
  }
}

std::vector<RawTable> parse_corpus(std::istream& in, std::string_view source) {
  std::vector<RawTable> tables;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    RawTable table = parse_record(record, where);
    try {
      validate_table(table);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    tables.push_back(std::move(table));
  }
  if (in.bad()) throw IoError("read failure on " + std::string(source));
  return tables;
}

std::vector<RawTable> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return parse_corpus(in, path.string());
}

std::string header_key(const std::vector<std::string>& headers) {
  std::string key;
  for (const auto& h : headers) {
    key += trim_lower(h);
    key.push_back('\x1f');
  }
  return key;
}

Corpus merge_same_header(const std::vector<RawTable>& tables) {
  Corpus corpus;
  std::unordered_map<std::string, std::size_t> group_of_key;
  std::vector<std::set<Row>> seen_rows;
  std::unordered_set<std::string> seen_ids;
  std::unordered_set<std::string> distinct_ids;

  for (const auto& table : tables) {
    validate_table(table);
    std::vector<std::string> ids = table.source_ids;
    if (ids.empty()) ids.push_back(table.id);
    for (const auto& id : ids) {
      if (!seen_ids.insert(id).second) throw ValidationError("duplicate table id '" + id + "'");
    }

    const std::string key = header_key(table.headers);
    auto [it, inserted] = group_of_key.try_emplace(key, corpus.tables.size());
    if (inserted) {
      if (!distinct_ids.insert(table.id).second) {
        throw ValidationError("duplicate table id '" + table.id + "'");
      }
      corpus.tables.push_back({table.id, table.headers, {}, {}});
      seen_rows.emplace_back();
    }
    DistinctTable& target = corpus.tables[it->second];
    auto& rows_seen = seen_rows[it->second];
    for (const auto& row : table.rows) {
      if (rows_seen.insert(row).second) target.rows.push_back(row);
    }
    for (auto& id : ids) {
      corpus.mapping.entries.emplace(id, target.distinct_id);
      target.source_ids.push_back(std::move(id));
    }
  }
  for (auto& t : corpus.tables) std::sort(t.source_ids.begin(), t.source_ids.end());
  return corpus;
}

DistinctTable sample_rows(const DistinctTable& table, std::size_t max_rows, std::uint64_t seed) {
  if (max_rows == 0) throw ValidationError("max_rows must be at least 1");
  const std::size_t n = table.rows.size();
  if (n <= max_rows) return table;

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < max_rows; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  order.resize(max_rows);
  std::sort(order.begin(), order.end());

  DistinctTable out{table.distinct_id, table.headers, {}, table.source_ids};
  out.rows.reserve(max_rows);
  for (std::size_t idx : order) out.rows.push_back(table.rows[idx]);
  return out;
}

std::size_t linearized_length(const DistinctTable& table, const Tokenizer& tokenizer) {
  std::size_t total = 0;
  for (const auto& h : table.headers) total += tokenizer.count(h);
  for (const auto& row : table.rows) {
    for (const auto& cell : row) total += tokenizer.count(cell);
  }
  return total;
}

DistinctTable trim_to_budget(const DistinctTable& table, std::size_t token_budget,
                             const Tokenizer& tokenizer) {
  std::size_t header_tokens = 0;
  for (const auto& h : table.headers) header_tokens += tokenizer.count(h);
  std::vector<std::size_t> row_tokens;
  row_tokens.reserve(table.rows.size());
  std::size_t total = header_tokens;
  for (const auto& row : table.rows) {
    std::size_t count = 0;
    for (const auto& cell : row) count += tokenizer.count(cell);
    row_tokens.push_back(count);
    total += count;
  }
  if (total <= token_budget) return table;

  const std::size_t minimum = header_tokens + (row_tokens.empty() ? 0 : row_tokens.front());
  if (minimum > token_budget) {
    throw ValidationError("table '" + table.distinct_id + "' needs " + std::to_string(minimum) +
                          " tokens for headers and first row, budget is " +
                          std::to_string(token_budget));
  }
  DistinctTable out = table;
  while (total > token_budget && out.rows.size() > 1) {
    total -= row_tokens[out.rows.size() - 1];
    out.rows.pop_back();
  }
  return out;
}

Corpus prepare_corpus(const std::vector<RawTable>& tables, const IngestOptions& options) {
  Corpus corpus = merge_same_header(tables);
  const Tokenizer tokenizer;
  for (auto& table : corpus.tables) {
    const std::uint64_t seed = mix64(options.seed ^ hash64(table.distinct_id));
    table = sample_rows(table, options.max_rows, seed);
    if (options.token_budget > 0) table = trim_to_budget(table, options.token_budget, tokenizer);
  }
  return corpus;
}

RawTable to_raw(const DistinctTable& table) {
  return RawTable{table.distinct_id, std::nullopt, table.headers, table.rows, table.source_ids};
}

void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& table : corpus.tables) out << record_json(table).dump() << '\n';
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_corpus(corpus, out);
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

void write_tables(const std::vector<RawTable>& tables, std::ostream& out) {
  for (const auto& t : tables) {
    json record{{"id", t.id}, {"headers", t.headers}, {"rows", t.rows}};
    if (t.title) record["title"] = *t.title;
    if (!t.source_ids.empty()) record["source_ids"] = t.source_ids;
    out << record.dump() << '\n';
  }
}

void write_mapping(const TableMapping& mapping, std::ostream& out) {
  json doc{{"format", kMappingFormat}, {"original_to_distinct", mapping.entries}};
  out << doc.dump(2) << '\n';
}

void write_mapping(const TableMapping& mapping, const std::filesystem::path& path) {
  auto out = open_out(path);
  write_mapping(mapping, out);
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

TableMapping load_mapping(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed mapping JSON (" + e.what() + ")");
  }
  const auto entries = doc.find("original_to_distinct");
  if (entries == doc.end() || !entries->is_object()) {
    throw ValidationError(path.string() + ": missing object 'original_to_distinct'");
  }
  TableMapping mapping;
  for (const auto& [k, v] : entries->items()) {
    if (!v.is_string()) throw ValidationError(path.string() + ": mapping values must be strings");
    mapping.entries.emplace(k, v.get<std::string>());
  }
  return mapping;
}

Corpus load_distinct_corpus(const std::filesystem::path& path) {
  return merge_same_header(load_corpus(path));
}

}  // namespace tabret
