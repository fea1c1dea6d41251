#include "tabret/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace tabret {
namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary artifacts are written as little-endian float32");

constexpr char kCheckpointMagic[8] = {'T', 'A', 'B', 'R', 'E', 'T', 'C', 'K'};

void check_finite(const Matrix& m, std::string_view stage, const std::string& id) {
  if (!m.allFinite()) {
    throw NumericError("non-finite value at stage '" + std::string(stage) + "' for '" + id + "'");
  }
}

std::uint64_t hash_floats(const double* data, std::size_t n, std::uint64_t seed) {
  std::string bytes(n * sizeof(float), '\0');
  for (std::size_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(data[i]);
    std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
  }
  return hash64(bytes, seed);
}

json embedder_json(const EmbedderConfig& e) {
  return json{{"kind", to_string(e.kind)},
              {"dim", e.dim},
              {"seed", e.seed},
              {"context_window", e.context_window},
              {"context_alpha", e.context_alpha}};
}

json config_to_json(const ModelConfig& c) {
  return json{{"embedder", embedder_json(c.embedder)},
              {"mode", to_string(c.mode)},
              {"ablation", to_string(c.ablation)},
              {"num_seeds", c.num_seeds},
              {"question_pooling", to_string(c.question_pooling)},
              {"table_pooling", to_string(c.table_pooling)},
              {"projection_dim", c.projection_dim},
              {"init_seed", c.init_seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  const auto& e = j.at("embedder");
  c.embedder.kind = parse_embedder_kind(e.at("kind").get<std::string>());
  c.embedder.dim = e.at("dim").get<std::size_t>();
  c.embedder.seed = e.at("seed").get<std::uint64_t>();
  c.embedder.context_window = e.at("context_window").get<std::size_t>();
  c.embedder.context_alpha = e.at("context_alpha").get<double>();
  c.mode = parse_mode(j.at("mode").get<std::string>());
  c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  c.num_seeds = j.at("num_seeds").get<std::size_t>();
  c.question_pooling = parse_pooling_kind(j.at("question_pooling").get<std::string>());
  c.table_pooling = parse_pooling_kind(j.at("table_pooling").get<std::string>());
  c.projection_dim = j.at("projection_dim").get<std::size_t>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

std::string_view table_path(Ablation a) {
  switch (a) {
    case Ablation::NoS2:
    case Ablation::NoS1S2: return "sequence";
    case Ablation::NoS2Head: return "values";
    case Ablation::NoS2Value: return "headers";
    default: return "structural";
  }
}

/// Named views over parameter storage, in checkpoint order.
struct Block {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
};

std::vector<Block> blocks_of(ModelParams& p) {
  std::vector<Block> blocks;
  if (p.seed_bank.seeds.size() > 0) {
    blocks.push_back({"seeds", p.seed_bank.seeds.data(), p.seed_bank.seeds.rows(),
                      p.seed_bank.seeds.cols()});
  }
  if (p.question_pool.kind == PoolingKind::Attentive) {
    blocks.push_back({"question_pool.u", p.question_pool.u.data(), 1, p.question_pool.u.size()});
    blocks.push_back({"question_pool.b", &p.question_pool.b, 1, 1});
  }
  if (p.table_pool.kind == PoolingKind::Attentive) {
    blocks.push_back({"table_pool.u", p.table_pool.u.data(), 1, p.table_pool.u.size()});
    blocks.push_back({"table_pool.b", &p.table_pool.b, 1, 1});
  }
  if (p.projection.enabled) {
    blocks.push_back({"projection.w", p.projection.w.data(), p.projection.w.rows(),
                      p.projection.w.cols()});
  }
  if (p.vocab) {
    blocks.push_back({"vocab", p.vocab->vectors().data(), p.vocab->vectors().rows(),
                      p.vocab->vectors().cols()});
  }
  return blocks;
}

}  // namespace

std::string_view to_string(Mode mode) { return mode == Mode::Explicit ? "explicit" : "implicit"; }

std::string_view to_string(Ablation ablation) {
  switch (ablation) {
    case Ablation::Full: return "full";
    case Ablation::NoS1: return "no_S1";
    case Ablation::NoS2: return "no_S2";
    case Ablation::NoS2Head: return "no_S2_head";
    case Ablation::NoS2Value: return "no_S2_value";
    case Ablation::NoS1S2: return "no_S1_S2";
  }
  return "full";
}

Mode parse_mode(std::string_view name) {
  if (name == "explicit") return Mode::Explicit;
  if (name == "implicit") return Mode::Implicit;
  throw ValidationError("unknown mode '" + std::string(name) + "'");
}

Ablation parse_ablation(std::string_view name) {
  for (Ablation a : {Ablation::Full, Ablation::NoS1, Ablation::NoS2, Ablation::NoS2Head,
                     Ablation::NoS2Value, Ablation::NoS1S2}) {
    if (name == to_string(a)) return a;
  }
  throw ValidationError("unknown ablation '" + std::string(name) + "'");
}

bool uses_syntactic(Ablation a) { return a != Ablation::NoS1 && a != Ablation::NoS1S2; }
bool uses_structural(Ablation a) { return a != Ablation::NoS2 && a != Ablation::NoS1S2; }

ModelParams ModelParams::initialize(const ModelConfig& config) {
  const std::size_t d = config.embedder.dim;
  if (d < 2) throw ValidationError("embedding dimension must be at least 2");
  if (config.mode == Mode::Implicit && config.num_seeds == 0) {
    throw ValidationError("implicit mode needs at least one seed");
  }
  if (config.projection_dim > d) {
    throw ValidationError("projection dimension must not exceed the embedding dimension");
  }
  ModelParams p;
  p.config = config;
  const auto dd = static_cast<Eigen::Index>(d);

  if (config.mode == Mode::Implicit && uses_syntactic(config.ablation)) {
    Rng rng(mix64(config.init_seed) + 1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    p.seed_bank.seeds.resize(static_cast<Eigen::Index>(config.num_seeds), dd);
    for (Eigen::Index i = 0; i < p.seed_bank.seeds.size(); ++i) {
      p.seed_bank.seeds.data()[i] = rng.normal() * scale;
    }
  }
  p.question_pool.kind = config.question_pooling;
  if (config.question_pooling == PoolingKind::Attentive) p.question_pool.u = Vector::Zero(dd);
  p.table_pool.kind = config.table_pooling;
  if (config.table_pooling == PoolingKind::Attentive) p.table_pool.u = Vector::Zero(dd);

  if (config.projection_dim > 0) {
    Rng rng(mix64(config.init_seed) + 2);
    const auto out = static_cast<Eigen::Index>(config.projection_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.projection_dim));
    p.projection.enabled = true;
    p.projection.w.resize(dd, out);
    for (Eigen::Index i = 0; i < p.projection.w.size(); ++i) {
      p.projection.w.data()[i] = rng.normal() * scale;
    }
  }
  return p;
}

std::size_t ModelParams::output_dim() const {
  return projection.enabled ? projection.output_dim() : dim();
}

bool ModelParams::uses_seeds() const {
  return config.mode == Mode::Implicit && uses_syntactic(config.ablation);
}

void attach_vocab(ModelParams& params, std::vector<std::string> tokens) {
  params.vocab.emplace(std::move(tokens), params.dim(), params.config.embedder.seed);
}

std::vector<PoolGroup> question_groups(const ModelParams& params, const TokenizedQuestion& question) {
  const std::size_t length = question.tokens.size();
  if (length == 0) throw ValidationError("question '" + question.id + "' has no tokens");
  const TokenSpan all{0, length};
  std::vector<PoolGroup> groups;
  if (!uses_syntactic(params.config.ablation)) {
    groups.push_back({GroupOp::Sequence, all, 0, {SlotKind::Kind::Sequence, 0}});
  } else if (params.config.mode == Mode::Implicit) {
    for (std::size_t i = 0; i < params.seed_bank.size(); ++i) {
      groups.push_back({GroupOp::Seed, all, i, {SlotKind::Kind::Sequence, 0}});
    }
  } else {
    const auto spans = question.np_spans ? *question.np_spans
                                         : extract_noun_phrases(pos_tag(question.tokens));
    for (const auto& span : spans) {
      if (!span.valid_for(length)) {
        throw ValidationError("question '" + question.id + "' has an invalid phrase span");
      }
      groups.push_back({GroupOp::Pooled, span, 0, {SlotKind::Kind::Sequence, 0}});
    }
  }
  return groups;
}

std::vector<PoolGroup> table_groups(const ModelParams& params, const LinearizedTable& table) {
  const std::size_t length = table.tokens.size();
  std::vector<PoolGroup> groups;
  const Ablation a = params.config.ablation;
  if (!uses_structural(a)) {
    groups.push_back({GroupOp::Sequence, {0, length}, 0, {SlotKind::Kind::Sequence, 0}});
    return groups;
  }
  for (std::size_t j = 0; j < table.columns(); ++j) {
    if (a != Ablation::NoS2Head) {
      groups.push_back({GroupOp::Pooled, table.header_spans[j], 0, {SlotKind::Kind::Header, j}});
    }
    if (a != Ablation::NoS2Value && table.value_spans[j]) {
      groups.push_back({GroupOp::Pooled, *table.value_spans[j], 0, {SlotKind::Kind::Value, j}});
    }
  }
  if (groups.empty()) {
    // Value-only variant on a table without values.
    groups.push_back({GroupOp::Sequence, {0, length}, 0, {SlotKind::Kind::Sequence, 0}});
  }
  return groups;
}

Encoder::Encoder(const ModelParams& params, const ExternalEmbeddings* external)
    : params_(params),
      embedder_(params.config.embedder, params.vocab ? &*params.vocab : nullptr, external),
      fingerprint_description_(tabret::fingerprint_description(params)),
      fingerprint_(fingerprint_digest(fingerprint_description_)) {
  if (params.uses_seeds() && params.seed_bank.dim() != params.dim()) {
    throw ValidationError("seed bank dimension does not match the embedder");
  }
}

bool Encoder::needs_noun_phrases() const {
  return params_.config.mode == Mode::Explicit && uses_syntactic(params_.config.ablation);
}

TokenizedQuestion Encoder::prepare_question(std::string id, std::string_view text) const {
  return tabret::prepare_question(std::move(id), text, needs_noun_phrases());
}

SideEncoding Encoder::forward(const std::string& id, std::span<const Token> tokens,
                              std::vector<PoolGroup> groups, const PoolingSpec& pooling) const {
  SideEncoding enc;
  enc.raw = embedder_.raw(id, tokens);
  check_finite(enc.raw, "embedding", id);
  const auto& ecfg = params_.config.embedder;
  enc.context = contextualize(enc.raw, ecfg.context_window, ecfg.context_alpha);
  check_finite(enc.context, "contextualize", id);
  enc.vocab_rows = embedder_.vocab_rows(tokens);

  const ExternalRecord* record =
      ecfg.kind == EmbedderKind::External ? &embedder_.external()->get(id) : nullptr;

  const Eigen::Index d = enc.context.cols();
  enc.reps.resize(static_cast<Eigen::Index>(groups.size()), d);
  enc.traces.resize(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const PoolGroup& group = groups[g];
    GroupTrace& trace = enc.traces[g];
    auto out = enc.reps.row(static_cast<Eigen::Index>(g));
    if (group.op == GroupOp::Sequence && record && record->sequence_vector) {
      out = record->sequence_vector->transpose();
      trace.fixed = true;
      continue;
    }
    if (!group.span.valid_for(tokens.size())) {
      throw ValidationError("invalid token span for '" + id + "'");
    }
    const auto rows = enc.context.middleRows(static_cast<Eigen::Index>(group.span.start),
                                             static_cast<Eigen::Index>(group.span.size()));
    const PoolingKind kind = group.op == GroupOp::Pooled ? pooling.kind : PoolingKind::Mean;
    if (group.op == GroupOp::Seed) {
      trace.weights = attention_weights(rows, params_.seed_bank.seeds.row(
                                                  static_cast<Eigen::Index>(group.seed)).transpose());
      out = (rows.transpose() * trace.weights).transpose();
    } else if (kind == PoolingKind::Max) {
      trace.argmax.assign(static_cast<std::size_t>(d), 0);
      for (Eigen::Index c = 0; c < d; ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < rows.rows(); ++r) {
          if (rows(r, c) > rows(best, c)) best = r;
        }
        trace.argmax[static_cast<std::size_t>(c)] = best;
        out(c) = rows(best, c);
      }
    } else if (kind == PoolingKind::Attentive) {
      trace.weights = attention_weights(rows, pooling.u, pooling.b);
      out = (rows.transpose() * trace.weights).transpose();
    } else {
      out = rows.colwise().mean();
    }
  }
  check_finite(enc.reps, "representation", id);
  enc.projected = project(enc.reps, params_.projection);
  check_finite(enc.projected, "projection", id);
  enc.groups = std::move(groups);
  return enc;
}

SideEncoding Encoder::forward_question(const TokenizedQuestion& question) const {
  return forward(question.id, question.tokens, question_groups(params_, question),
                 params_.question_pool);
}

SideEncoding Encoder::forward_table(const std::string& id, const LinearizedTable& table) const {
  if (table.tokens.empty()) throw ValidationError("table '" + id + "' has no tokens");
  return forward(id, table.tokens, table_groups(params_, table), params_.table_pool);
}

QuestionReprs Encoder::encode_question(const TokenizedQuestion& question) const {
  SideEncoding enc = forward_question(question);
  QuestionReprs out;
  out.q = std::move(enc.projected);
  if (!uses_syntactic(params_.config.ablation)) {
    out.mode = QuestionReprMode::Sequence;
  } else if (params_.config.mode == Mode::Implicit) {
    out.mode = QuestionReprMode::Implicit;
    out.attention.resize(static_cast<Eigen::Index>(enc.traces.size()),
                         static_cast<Eigen::Index>(question.tokens.size()));
    for (std::size_t i = 0; i < enc.traces.size(); ++i) {
      out.attention.row(static_cast<Eigen::Index>(i)) = enc.traces[i].weights.transpose();
    }
  } else {
    out.mode = QuestionReprMode::Explicit;
  }
  return out;
}

TableReprs Encoder::encode_table(const std::string& id, const LinearizedTable& table) const {
  SideEncoding enc = forward_table(id, table);
  TableReprs out;
  out.c = std::move(enc.projected);
  out.columns = table.columns();
  out.kinds.reserve(enc.groups.size());
  for (const auto& g : enc.groups) out.kinds.push_back(g.slot);
  return out;
}

std::string fingerprint_description(const ModelParams& params) {
  const auto& c = params.config;
  json fp{{"embedder", embedder_json(c.embedder)},
          {"table_path", table_path(c.ablation)},
          {"table_pooling", to_string(c.table_pooling)},
          {"output_dim", params.output_dim()}};
  if (params.table_pool.kind == PoolingKind::Attentive) {
    const std::uint64_t h =
        hash_floats(params.table_pool.u.data(), static_cast<std::size_t>(params.table_pool.u.size()),
                    hash_floats(&params.table_pool.b, 1, 0));
    fp["table_pool_params"] = to_hex(h);
  }
  json proj{{"enabled", params.projection.enabled}};
  if (params.projection.enabled) {
    proj["dim"] = params.projection.output_dim();
    proj["hash"] = to_hex(hash_floats(params.projection.w.data(),
                                      static_cast<std::size_t>(params.projection.w.size()), 0));
  }
  fp["projection"] = proj;
  if (c.embedder.kind == EmbedderKind::Vocab) {
    if (params.vocab) {
      std::uint64_t h = 0;
      for (const auto& t : params.vocab->tokens()) h = hash64(t, h);
      h = hash_floats(params.vocab->vectors().data(),
                      static_cast<std::size_t>(params.vocab->vectors().size()), h);
      fp["vocab"] = to_hex(h);
    } else {
      fp["vocab"] = "none";
    }
  }
  return fp.dump();
}

std::string fingerprint_digest(const std::string& description) {
  return to_hex(hash64(description, 0x7461627265747631ULL));
}

std::string model_config_json(const ModelConfig& config) { return config_to_json(config).dump(); }

ModelParams round_to_float(const ModelParams& params) {
  ModelParams out = params;
  for (auto& block : blocks_of(out)) {
    for (Eigen::Index i = 0; i < block.rows * block.cols; ++i) {
      block.data[i] = static_cast<double>(static_cast<float>(block.data[i]));
    }
  }
  return out;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  ModelParams copy = params;
  auto blocks = blocks_of(copy);
  json table = json::array();
  for (const auto& b : blocks) table.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  json header{{"format", kCheckpointFormat},
              {"config", config_to_json(params.config)},
              {"dims",
               {{"dim", params.dim()},
                {"output_dim", params.output_dim()},
                {"num_seeds", params.seed_bank.size()}}},
              {"blocks", table}};
  if (params.vocab) header["vocab_tokens"] = params.vocab->tokens();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t size = text.size();
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<float> buffer;
  for (const auto& b : blocks) {
    buffer.resize(static_cast<std::size_t>(b.rows * b.cols));
    for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = static_cast<float>(b.data[i]);
    out.write(reinterpret_cast<const char*>(buffer.data()),
              static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[sizeof(kCheckpointMagic)] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw ValidationError(path.string() + ": not a tabret checkpoint");
  }
  std::uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  std::string text(size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(size));
  if (!in) throw ValidationError(path.string() + ": truncated checkpoint header");

  ModelParams params;
  json header;
  try {
    header = json::parse(text);
    if (header.at("format").get<std::string>() != kCheckpointFormat) {
      throw ValidationError(path.string() + ": unsupported checkpoint format");
    }
    params = ModelParams::initialize(config_from_json(header.at("config")));
    if (header.contains("vocab_tokens")) {
      auto tokens = header.at("vocab_tokens").get<std::vector<std::string>>();
      Matrix vectors(static_cast<Eigen::Index>(tokens.size()),
                     static_cast<Eigen::Index>(params.dim()));
      params.vocab.emplace(std::move(tokens), std::move(vectors));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed checkpoint header (" + e.what() + ")");
  }

  auto blocks = blocks_of(params);
  const auto& table = header.at("blocks");
  if (table.size() != blocks.size()) {
    throw ValidationError(path.string() + ": checkpoint block table does not match its config");
  }
  std::vector<float> buffer;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    if (table[i].at("name").get<std::string>() != b.name ||
        table[i].at("rows").get<Eigen::Index>() != b.rows ||
        table[i].at("cols").get<Eigen::Index>() != b.cols) {
      throw ValidationError(path.string() + ": unexpected block '" +
                            table[i].at("name").get<std::string>() + "'");
    }
    buffer.resize(static_cast<std::size_t>(b.rows * b.cols));
    in.read(reinterpret_cast<char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    if (!in) throw ValidationError(path.string() + ": truncated block '" + b.name + "'");
    for (std::size_t k = 0; k < buffer.size(); ++k) b.data[k] = buffer[k];
  }
  return params;
}

}  // namespace tabret
