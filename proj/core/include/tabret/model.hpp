#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tabret/common.hpp"
#include "tabret/embed.hpp"
#include "tabret/repr.hpp"
#include "tabret/textproc.hpp"

namespace tabret {

enum class Mode { Explicit, Implicit };

/// Representation paths of the ablation study. The S1 variants replace the
/// syntactical question side by a sequence vector; the S2 variants change
/// the structural table side.
enum class Ablation { Full, NoS1, NoS2, NoS2Head, NoS2Value, NoS1S2 };

std::string_view to_string(Mode mode);
std::string_view to_string(Ablation ablation);
Mode parse_mode(std::string_view name);
Ablation parse_ablation(std::string_view name);

bool uses_syntactic(Ablation ablation);
bool uses_structural(Ablation ablation);

struct ModelConfig {
  EmbedderConfig embedder;
  Mode mode = Mode::Implicit;
  Ablation ablation = Ablation::Full;
  std::size_t num_seeds = 3;
  PoolingKind question_pooling = PoolingKind::Mean;
  PoolingKind table_pooling = PoolingKind::Mean;
  std::size_t projection_dim = 0;  ///< 0 disables the projection
  std::uint64_t init_seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ModelParams {
  ModelConfig config;
  SeedBank seed_bank;  ///< empty unless the model attends with seeds
  PoolingSpec question_pool;
  PoolingSpec table_pool;
  Projection projection;
  std::optional<VocabTable> vocab;

  /// Deterministic initialization from config.init_seed. Seeds and the
  /// projection are N(0, 1) scaled by 1/sqrt(d) and 1/sqrt(d') respectively;
  /// attentive scorers start at zero, which makes them exact mean pooling.
  static ModelParams initialize(const ModelConfig& config);

  std::size_t dim() const { return config.embedder.dim; }
  std::size_t output_dim() const;
  bool uses_seeds() const;
};

/// Builds a vocab table over `tokens` and attaches it to the params.
void attach_vocab(ModelParams& params, std::vector<std::string> tokens);

enum class GroupOp {
  Mean,      ///< arithmetic mean over the span
  Pooled,    ///< the role's PoolingSpec over the span
  Seed,      ///< seed attention over the span
  Sequence,  ///< whole-sequence vector (external record's if provided, else mean)
};

/// One output representation row: which tokens feed it and how.
struct PoolGroup {
  GroupOp op = GroupOp::Mean;
  TokenSpan span;
  std::size_t seed = 0;
  SlotKind slot;
};

/// Per-group values needed by the reverse pass.
struct GroupTrace {
  Vector weights;                        ///< softmax weights (Pooled attentive, Seed)
  std::vector<Eigen::Index> argmax;      ///< per-dimension row (Pooled max)
  bool fixed = false;                    ///< external sequence vector, no upstream path
};

/// Forward pass of one question or table through embed -> context -> pool
/// -> project, keeping intermediates.
struct SideEncoding {
  Matrix raw;
  Matrix context;
  std::vector<std::optional<std::size_t>> vocab_rows;
  std::vector<PoolGroup> groups;
  std::vector<GroupTrace> traces;
  Matrix reps;       ///< before projection
  Matrix projected;  ///< rows entering the score
};

std::vector<PoolGroup> question_groups(const ModelParams& params, const TokenizedQuestion& question);
std::vector<PoolGroup> table_groups(const ModelParams& params, const LinearizedTable& table);

/// Read-only view of a model for encoding. The params must outlive it.
class Encoder {
 public:
  explicit Encoder(const ModelParams& params, const ExternalEmbeddings* external = nullptr);

  /// Tokenizes (and chunks when explicit syntactical reprs are in use).
  TokenizedQuestion prepare_question(std::string id, std::string_view text) const;
  bool needs_noun_phrases() const;

  SideEncoding forward_question(const TokenizedQuestion& question) const;
  SideEncoding forward_table(const std::string& id, const LinearizedTable& table) const;

  /// Projected representations.
  QuestionReprs encode_question(const TokenizedQuestion& question) const;
  TableReprs encode_table(const std::string& id, const LinearizedTable& table) const;

  const ModelParams& params() const { return params_; }
  const ExternalEmbeddings* external() const { return embedder_.external(); }

  /// Digest over everything that shapes table representations.
  const std::string& fingerprint() const { return fingerprint_; }
  const std::string& fingerprint_description() const { return fingerprint_description_; }

 private:
  SideEncoding forward(const std::string& id, std::span<const Token> tokens,
                       std::vector<PoolGroup> groups, const PoolingSpec& pooling) const;

  const ModelParams& params_;
  Embedder embedder_;
  std::string fingerprint_description_;
  std::string fingerprint_;
};

/// Canonical JSON description of the table-side pipeline.
std::string fingerprint_description(const ModelParams& params);
std::string fingerprint_digest(const std::string& description);

constexpr std::string_view kCheckpointFormat = "tabret.checkpoint/1";

/// Binary checkpoint: magic, JSON header (config, dims, block table), then
/// row-major float32 parameter blocks.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Parameters rounded through float32, i.e. what a checkpoint round trip yields.
ModelParams round_to_float(const ModelParams& params);

std::string model_config_json(const ModelConfig& config);

}  // namespace tabret
