#include <benchmark/benchmark.h>

#include "tabret/eval.hpp"
#include "tabret/train.hpp"

namespace {

using namespace tabret;

void BM_BackwardBatch(benchmark::State& state) {
  SyntheticConfig sc;
  sc.seed = 2;
  sc.n_tables = 64;
  const auto bench = generate_synthetic_benchmark(sc);
  const Corpus corpus = prepare_corpus(bench.tables, {});
  const auto tables = linearize_corpus(corpus);
  ModelConfig mc;
  mc.projection_dim = 64;
  const ModelParams params = ModelParams::initialize(mc);
  const Encoder encoder(params);
  const auto batch_size = static_cast<std::size_t>(state.range(0));
  std::vector<TokenizedQuestion> questions;
  std::vector<std::vector<std::string>> golds;
  for (std::size_t i = 0; i < batch_size && i < bench.train.size(); ++i) {
    questions.push_back(encoder.prepare_question(bench.train[i].id, bench.train[i].question));
    golds.push_back(resolve_golds(bench.train[i], corpus.mapping));
  }
  const BatchBuilder builder(tables);
  const Batch batch = builder.build(questions, golds);
  for (auto _ : state) benchmark::DoNotOptimize(backward(batch, params));
}
BENCHMARK(BM_BackwardBatch)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace
