#include "tabret_cli/commands.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tabret/corpus.hpp"
#include "tabret/eval.hpp"
#include "tabret/io.hpp"
#include "tabret/model.hpp"
#include "tabret/score.hpp"
#include "tabret/train.hpp"

namespace tabret::cli {
namespace {

namespace fs = std::filesystem;

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = default_thread_count();
  std::string log_level;
};

/// Flags that shape a freshly initialized model.
struct Pipeline {
  std::string mode = "implicit";
  std::string ablation = "full";
  std::string pooling;
  std::string question_pooling = "mean";
  std::string table_pooling = "mean";
  std::string embedder = "hashed";
  std::size_t n = 3;
  std::size_t dim = 64;
  std::size_t context_window = 0;
  double context_alpha = 0.0;
  std::size_t projection_dim = 0;
  std::vector<CLI::Option*> options;

  bool any_set() const {
    for (const auto* o : options) {
      if (o->count() > 0) return true;
    }
    return false;
  }

  ModelConfig config(std::uint64_t seed) const {
    ModelConfig c;
    c.embedder.kind = parse_embedder_kind(embedder);
    c.embedder.dim = dim;
    c.embedder.seed = seed;
    c.embedder.context_window = context_window;
    c.embedder.context_alpha = context_alpha;
    c.mode = parse_mode(mode);
    c.ablation = parse_ablation(ablation);
    c.num_seeds = n;
    c.question_pooling = parse_pooling_kind(pooling.empty() ? question_pooling : pooling);
    c.table_pooling = parse_pooling_kind(pooling.empty() ? table_pooling : pooling);
    c.projection_dim = projection_dim;
    c.init_seed = seed;
    return c;
  }
};

void add_pipeline(CLI::App* app, Pipeline& p) {
  auto& o = p.options;
  o.push_back(app->add_option("--mode", p.mode, "explicit | implicit")->capture_default_str());
  o.push_back(app->add_option("--ablation", p.ablation,
                              "full | no_S1 | no_S2 | no_S2_head | no_S2_value | no_S1_S2")
                  ->capture_default_str());
  o.push_back(app->add_option("--pooling", p.pooling, "mean | max | attentive, both roles"));
  o.push_back(app->add_option("--question-pooling", p.question_pooling)->capture_default_str());
  o.push_back(app->add_option("--table-pooling", p.table_pooling)->capture_default_str());
  o.push_back(app->add_option("--embedder", p.embedder, "hashed | vocab | external")->capture_default_str());
  o.push_back(app->add_option("--n", p.n, "number of implicit seeds")->capture_default_str());
  o.push_back(app->add_option("--dim", p.dim, "embedding dimension")->capture_default_str());
  o.push_back(app->add_option("--context-window", p.context_window)->capture_default_str());
  o.push_back(app->add_option("--context-alpha", p.context_alpha)->capture_default_str());
  o.push_back(app->add_option("--projection-dim", p.projection_dim, "0 disables the projection")
                  ->capture_default_str());
}

struct ModelSource {
  std::string checkpoint;
  std::string external;
};

void add_model_source(CLI::App* app, ModelSource& m) {
  app->add_option("--checkpoint", m.checkpoint, "trained model; excludes the pipeline flags");
  app->add_option("--external", m.external, "external embeddings JSONL (embedder = external)");
}

struct Model {
  ModelParams params;
  std::optional<ExternalEmbeddings> external;

  const ExternalEmbeddings* ext() const { return external ? &*external : nullptr; }
};

Model resolve_model(const ModelSource& src, const Pipeline& p, std::uint64_t seed) {
  Model m;
  if (!src.checkpoint.empty()) {
    if (p.any_set()) throw ValidationError("pipeline flags cannot be combined with --checkpoint");
    m.params = load_checkpoint(src.checkpoint);
  } else {
    m.params = ModelParams::initialize(p.config(seed));
  }
  if (m.params.config.embedder.kind == EmbedderKind::External) {
    if (src.external.empty()) throw ValidationError("the external embedder needs --external");
    m.external = ExternalEmbeddings::load(src.external);
  }
  return m;
}

struct TrainFlags {
  TrainConfig config;
  std::string freeze;
};

void add_train_flags(CLI::App* app, TrainFlags& t) {
  auto& c = t.config;
  app->add_option("--lr", c.learning_rate, "base learning rate")->capture_default_str();
  app->add_option("--weight-decay", c.weight_decay)->capture_default_str();
  app->add_option("--warmup-ratio", c.warmup_ratio)->capture_default_str();
  app->add_option("--batch-size", c.batch_size)->capture_default_str();
  app->add_option("--epochs", c.max_epochs, "maximum epochs (<= 150)")->capture_default_str();
  app->add_option("--patience", c.patience, "stop after this many epochs without dev gain; 0 = off")
      ->capture_default_str();
  app->add_flag("--hard-negatives", c.hard_negatives.enabled, "mine hard negatives");
  app->add_option("--negatives-per-question", c.hard_negatives.per_question)->capture_default_str();
  app->add_option("--remine-every", c.hard_negatives.remine_every, "epochs between mining passes")
      ->capture_default_str();
  app->add_option("--freeze", t.freeze, "comma list of seeds,attentive,projection,vocab");
}

TrainConfig finish_train_config(TrainFlags t, const Globals& g) {
  TrainConfig c = t.config;
  c.rng_seed = g.seed;
  c.threads = g.threads;
  std::stringstream list(t.freeze);
  std::string item;
  while (std::getline(list, item, ',')) {
    if (item.empty()) continue;
    if (item == "seeds") {
      c.trainable.seeds = false;
    } else if (item == "attentive") {
      c.trainable.attentive = false;
    } else if (item == "projection") {
      c.trainable.projection = false;
    } else if (item == "vocab") {
      c.trainable.vocab = false;
    } else {
      throw ValidationError("unknown parameter class '" + item + "' in --freeze");
    }
  }
  c.validate();
  return c;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_text_file(path, text);
  }
}

spdlog::level::level_enum parse_level(const std::string& name) {
  const auto level = spdlog::level::from_str(name);
  if (level == spdlog::level::off && name != "off") {
    throw ValidationError("unknown log level '" + name + "'");
  }
  return level;
}

void setup_logging(const std::string& flag) {
  auto logger = spdlog::get("tabret");
  if (!logger) {
    logger = spdlog::stderr_color_mt("tabret");
    logger->set_pattern("[%l] %v");
  }
  spdlog::set_default_logger(logger);
  std::string level = flag;
  if (level.empty()) {
    const char* env = std::getenv("TABRET_LOG_LEVEL");
    level = env != nullptr ? env : "info";
  }
  spdlog::set_level(parse_level(level));
}

std::vector<Ablation> parse_ablation_list(const std::string& text) {
  std::vector<Ablation> out;
  std::stringstream list(text);
  std::string item;
  while (std::getline(list, item, ',')) {
    if (!item.empty()) out.push_back(parse_ablation(item));
  }
  if (out.empty()) throw ValidationError("no ablations selected");
  return out;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Table retrieval with syntactical question and structural table representations"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "TOML/INI file with flag defaults (flags take precedence)");

  Globals g;
  app.add_option("--seed", g.seed, "controls every random choice")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (env TABRET_THREADS)")->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off (env TABRET_LOG_LEVEL)");

  std::map<CLI::App*, std::function<void()>> actions;

  // synth
  SyntheticConfig synth;
  std::string synth_dir;
  {
    auto* s = app.add_subcommand("synth", "generate a synthetic benchmark");
    s->add_option("--out-dir", synth_dir, "directory for tables.jsonl and the question splits")->required();
    s->add_option("--tables", synth.n_tables)->capture_default_str();
    s->add_option("--columns", synth.columns_per_table)->capture_default_str();
    s->add_option("--vocab", synth.vocab_size)->capture_default_str();
    s->add_option("--questions-per-table", synth.questions_per_table)->capture_default_str();
    s->add_option("--distractors", synth.distractor_tokens)->capture_default_str();
    s->add_option("--rows", synth.rows_per_table)->capture_default_str();
    s->add_option("--header-mentions", synth.header_mentions)->capture_default_str();
    s->add_option("--value-mentions", synth.value_mentions)->capture_default_str();
    actions[s] = [&] {
      synth.seed = g.seed;
      const auto bench = generate_synthetic_benchmark(synth);
      fs::create_directories(synth_dir);
      const fs::path dir(synth_dir);
      {
        auto out = open_out((dir / "tables.jsonl").string());
        write_tables(bench.tables, out);
        if (!out) throw IoError("write failure on tables.jsonl");
      }
      write_questions(bench.train, dir / "train.jsonl");
      write_questions(bench.dev, dir / "dev.jsonl");
      write_questions(bench.test, dir / "test.jsonl");
      std::cout << "tables " << bench.tables.size() << ", questions train " << bench.train.size() << " dev "
                << bench.dev.size() << " test " << bench.test.size() << "\n";
    };
  }

  // ingest
  std::string ingest_in, ingest_out, ingest_mapping;
  IngestOptions ingest;
  {
    auto* s = app.add_subcommand("ingest", "merge, sample and trim a raw tables file");
    s->add_option("--input", ingest_in, "raw tables JSONL")->required();
    s->add_option("--out", ingest_out, "distinct corpus JSONL")->required();
    s->add_option("--mapping", ingest_mapping, "mapping JSON (default: <out>.mapping.json)");
    s->add_option("--max-rows", ingest.max_rows)->capture_default_str();
    s->add_option("--token-budget", ingest.token_budget, "0 disables trimming")->capture_default_str();
    actions[s] = [&] {
      ingest.seed = g.seed;
      const auto raw = load_corpus(ingest_in);
      const Corpus corpus = prepare_corpus(raw, ingest);
      write_corpus(corpus, fs::path(ingest_out));
      write_mapping(corpus.mapping, fs::path(ingest_mapping.empty() ? ingest_out + ".mapping.json" : ingest_mapping));
      std::cout << "raw tables " << raw.size() << ", distinct tables " << corpus.tables.size() << ", mapped ids "
                << corpus.mapping.entries.size() << "\n";
    };
  }

  // build-index
  Pipeline index_pipe;
  ModelSource index_model;
  std::string index_corpus, index_out;
  {
    auto* s = app.add_subcommand("build-index", "encode every table of a corpus");
    s->add_option("--corpus", index_corpus)->required();
    s->add_option("--out", index_out)->required();
    add_model_source(s, index_model);
    add_pipeline(s, index_pipe);
    actions[s] = [&] {
      const Model m = resolve_model(index_model, index_pipe, g.seed);
      const Corpus corpus = load_distinct_corpus(index_corpus);
      const Encoder encoder(m.params, m.ext());
      const Index index = build_index(corpus, encoder, g.threads);
      index.save(index_out);
      std::cout << "indexed " << index.size() << " tables, fingerprint " << index.fingerprint() << "\n";
    };
  }

  // retrieve
  Pipeline retrieve_pipe;
  ModelSource retrieve_model;
  std::string retrieve_index, retrieve_questions, retrieve_out;
  std::string retrieve_k = "20";
  {
    auto* s = app.add_subcommand("retrieve", "rank index tables for each question");
    s->add_option("--index", retrieve_index)->required();
    s->add_option("--questions", retrieve_questions)->required();
    s->add_option("--out", retrieve_out, "rankings JSONL (default stdout)");
    s->add_option("--k", retrieve_k, "tables per question (largest of a comma list)")->capture_default_str();
    add_model_source(s, retrieve_model);
    add_pipeline(s, retrieve_pipe);
    actions[s] = [&] {
      const Model m = resolve_model(retrieve_model, retrieve_pipe, g.seed);
      const Index index = Index::load(retrieve_index);
      const Encoder encoder(m.params, m.ext());
      check_compatible(index, encoder);
      const auto questions = load_questions(retrieve_questions);
      std::ostringstream text;
      for (const auto& r : rank_questions(encoder, index, questions, parse_ks(retrieve_k).back(), g.threads)) write_ranking(r, text);
      emit(retrieve_out, text.str());
    };
  }

  // train
  Pipeline train_pipe;
  TrainFlags train_flags;
  std::string train_corpus, train_q, dev_q, train_out, train_history, train_external;
  {
    auto* s = app.add_subcommand("train", "contrastive training with dev early stopping");
    s->add_option("--corpus", train_corpus)->required();
    s->add_option("--train", train_q, "training questions JSONL")->required();
    s->add_option("--dev", dev_q, "dev questions JSONL")->required();
    s->add_option("--out", train_out, "checkpoint path")->required();
    s->add_option("--history", train_history, "history JSONL");
    s->add_option("--external", train_external, "external embeddings JSONL");
    add_pipeline(s, train_pipe);
    add_train_flags(s, train_flags);
    actions[s] = [&] {
      const Model m = resolve_model({"", train_external}, train_pipe, g.seed);
      const TrainConfig config = finish_train_config(train_flags, g);
      const Corpus corpus = load_distinct_corpus(train_corpus);
      const auto train_set = load_questions(train_q);
      const auto dev_set = load_questions(dev_q);
      const TrainResult result = train(corpus, train_set, dev_set, config, m.params, m.ext(), [](const EpochRecord& r) {
        spdlog::info("epoch {} loss {:.6f} dev recall@1 {:.4f}", r.epoch, r.loss, r.dev_recall_at_1);
      });
      save_checkpoint(result.params, train_out);
      if (!train_history.empty()) {
        std::ostringstream text;
        write_history(result.history, text);
        write_text_file(train_history, text.str());
      }
      std::cout << "best epoch " << result.best_epoch << ", dev recall@1 "
                << result.history[result.best_epoch].dev_recall_at_1 << "\n";
    };
  }

  // eval
  Pipeline eval_pipe;
  ModelSource eval_model;
  std::string eval_questions, eval_index, eval_corpus, eval_mapping, eval_ks = "1,5,20", eval_out, eval_rankings;
  {
    auto* s = app.add_subcommand("eval", "recall@K over a question set");
    s->add_option("--questions", eval_questions)->required();
    s->add_option("--index", eval_index, "prebuilt index");
    s->add_option("--corpus", eval_corpus, "corpus to index (and to resolve gold ids)");
    s->add_option("--mapping", eval_mapping, "original -> distinct mapping JSON");
    s->add_option("--k", eval_ks, "comma list of K")->capture_default_str();
    s->add_option("--out", eval_out, "report JSON (default stdout)");
    s->add_option("--rankings", eval_rankings, "also write the rankings JSONL");
    add_model_source(s, eval_model);
    add_pipeline(s, eval_pipe);
    actions[s] = [&] {
      const auto ks = parse_ks(eval_ks);
      const Model m = resolve_model(eval_model, eval_pipe, g.seed);
      const Encoder encoder(m.params, m.ext());
      std::optional<Corpus> corpus;
      if (!eval_corpus.empty()) corpus = load_distinct_corpus(eval_corpus);
      TableMapping mapping;
      if (!eval_mapping.empty()) {
        mapping = load_mapping(eval_mapping);
      } else if (corpus) {
        mapping = corpus->mapping;
      } else {
        throw ValidationError("eval needs --corpus or --mapping to resolve gold ids");
      }
      Index index;
      if (!eval_index.empty()) {
        index = Index::load(eval_index);
      } else if (corpus) {
        index = build_index(*corpus, encoder, g.threads);
      } else {
        throw ValidationError("eval needs --index or --corpus");
      }
      check_compatible(index, encoder);
      const auto questions = load_questions(eval_questions);
      const auto rankings = rank_questions(encoder, index, questions, ks.back(), g.threads);
      if (!eval_rankings.empty()) {
        std::ostringstream text;
        for (const auto& r : rankings) write_ranking(r, text);
        write_text_file(eval_rankings, text.str());
      }
      emit(eval_out, to_json(recall_at_k(rankings, questions, mapping, ks)));
    };
  }

  // bench
  Pipeline bench_pipe;
  ModelSource bench_model;
  std::string bench_index, bench_corpus, bench_questions, bench_out;
  std::size_t bench_warmup = 2, bench_repeats = 5, bench_threads = 1;
  std::string bench_k = "20";
  {
    auto* s = app.add_subcommand("bench", "per-question retrieval latency");
    s->add_option("--index", bench_index);
    s->add_option("--corpus", bench_corpus, "corpus to index when no --index is given");
    s->add_option("--questions", bench_questions)->required();
    s->add_option("--warmup", bench_warmup)->capture_default_str();
    s->add_option("--repeats", bench_repeats)->capture_default_str();
    s->add_option("--k", bench_k, "top-K of the timed query")->capture_default_str();
    s->add_option("--scoring-threads", bench_threads, "threads inside one query")->capture_default_str();
    s->add_option("--out", bench_out, "latency JSON (default stdout)");
    add_model_source(s, bench_model);
    add_pipeline(s, bench_pipe);
    actions[s] = [&] {
      const Model m = resolve_model(bench_model, bench_pipe, g.seed);
      const Encoder encoder(m.params, m.ext());
      Index index;
      if (!bench_index.empty()) {
        index = Index::load(bench_index);
      } else if (!bench_corpus.empty()) {
        index = build_index(load_distinct_corpus(bench_corpus), encoder, g.threads);
      } else {
        throw ValidationError("bench needs --index or --corpus");
      }
      std::vector<TokenizedQuestion> questions;
      for (const auto& q : load_questions(bench_questions)) questions.push_back(encoder.prepare_question(q.id, q.question));
      emit(bench_out, to_json(latency_bench(encoder, index, questions, parse_ks(bench_k).back(), bench_warmup, bench_repeats, bench_threads)));
    };
  }

  // explain
  Pipeline explain_pipe;
  ModelSource explain_model;
  std::string explain_corpus, explain_table, explain_question, explain_qid = "question", explain_out;
  {
    auto* s = app.add_subcommand("explain", "coherence matrices of one question and table");
    s->add_option("--corpus", explain_corpus)->required();
    s->add_option("--table", explain_table, "distinct table id")->required();
    s->add_option("--question", explain_question, "question text")->required();
    s->add_option("--question-id", explain_qid, "id keying external embeddings")->capture_default_str();
    s->add_option("--out", explain_out, "coherence JSON (default stdout)");
    add_model_source(s, explain_model);
    add_pipeline(s, explain_pipe);
    actions[s] = [&] {
      const Model m = resolve_model(explain_model, explain_pipe, g.seed);
      const Encoder encoder(m.params, m.ext());
      const Corpus corpus = load_distinct_corpus(explain_corpus);
      const DistinctTable* table = corpus.find(explain_table);
      if (table == nullptr) throw ValidationError("table '" + explain_table + "' is not in the corpus");
      const auto q = encoder.prepare_question(explain_qid, explain_question);
      emit(explain_out, to_json(coherence_matrices(encoder, q, table->distinct_id, linearize_table(*table, Tokenizer{}))));
    };
  }

  // ablate
  Pipeline ablate_pipe;
  TrainFlags ablate_flags;
  std::string ab_corpus, ab_train, ab_dev, ab_test, ab_list = "full,no_S1,no_S2,no_S2_head,no_S2_value,no_S1_S2",
                                                   ab_ks = "1,5,20", ab_out, ab_external;
  {
    auto* s = app.add_subcommand("ablate", "train and evaluate representation ablations");
    s->add_option("--corpus", ab_corpus)->required();
    s->add_option("--train", ab_train)->required();
    s->add_option("--dev", ab_dev)->required();
    s->add_option("--test", ab_test)->required();
    s->add_option("--ablations", ab_list)->capture_default_str();
    s->add_option("--k", ab_ks)->capture_default_str();
    s->add_option("--out", ab_out, "ablation JSON (default stdout)");
    s->add_option("--external", ab_external);
    add_pipeline(s, ablate_pipe);
    add_train_flags(s, ablate_flags);
    actions[s] = [&] {
      const auto modes = parse_ablation_list(ab_list);
      const auto ks = parse_ks(ab_ks);
      const TrainConfig config = finish_train_config(ablate_flags, g);
      const ModelConfig base = ablate_pipe.config(g.seed);
      std::optional<ExternalEmbeddings> ext;
      if (base.embedder.kind == EmbedderKind::External) {
        if (ab_external.empty()) throw ValidationError("the external embedder needs --external");
        ext = ExternalEmbeddings::load(ab_external);
      }
      const Corpus corpus = load_distinct_corpus(ab_corpus);
      const auto results = run_ablations(corpus, load_questions(ab_train), load_questions(ab_dev),
                                         load_questions(ab_test), modes, base, config, ks, ext ? &*ext : nullptr);
      emit(ab_out, to_json(results));
    };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidationFailure;
  }

  try {
    setup_logging(g.log_level);
    if (g.threads == 0) throw ValidationError("--threads must be at least 1");
    for (auto* sub : app.get_subcommands()) actions.at(sub)();
  } catch (const FingerprintError& e) {
    spdlog::error("{}", e.what());
    return kFingerprintMismatch;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kValidationFailure;
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumericFailure;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kIoFailure;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kIoFailure;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kValidationFailure;
  }
  return kOk;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace tabret::cli
