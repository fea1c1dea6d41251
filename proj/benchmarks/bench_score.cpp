#include <benchmark/benchmark.h>

#include <map>

#include "tabret/eval.hpp"
#include "tabret/model.hpp"
#include "tabret/score.hpp"

namespace {

using namespace tabret;

struct Setup {
  Corpus corpus;
  ModelParams params;
  Index index;
  TokenizedQuestion question;
};

const Setup& setup(std::size_t tables, std::size_t dim) {
  static std::map<std::pair<std::size_t, std::size_t>, Setup> cache;
  auto it = cache.find({tables, dim});
  if (it != cache.end()) return it->second;
  SyntheticConfig sc;
  sc.seed = 1;
  sc.n_tables = tables;
  const auto bench = generate_synthetic_benchmark(sc);
  Setup s;
  s.corpus = prepare_corpus(bench.tables, {});
  ModelConfig mc;
  mc.embedder.dim = dim;
  s.params = ModelParams::initialize(mc);
  const Encoder encoder(s.params);
  s.index = build_index(s.corpus, encoder);
  s.question = encoder.prepare_question(bench.test.front().id, bench.test.front().question);
  return cache.emplace(std::pair{tables, dim}, std::move(s)).first->second;
}

void BM_RetrieveTopK(benchmark::State& state) {
  const auto& s = setup(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)));
  const Encoder encoder(s.params);
  for (auto _ : state) {
    benchmark::DoNotOptimize(retrieve_topk(s.question, s.index, 10, encoder));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s.index.size()));
}
BENCHMARK(BM_RetrieveTopK)->Args({1000, 64})->Args({10000, 256})->Unit(benchmark::kMillisecond);

void BM_Maxsim(benchmark::State& state) {
  const auto& s = setup(1000, 256);
  const Encoder encoder(s.params);
  const Matrix q = encoder.encode_question(s.question).q;
  for (auto _ : state) {
    double total = 0.0;
    for (std::size_t e = 0; e < s.index.size(); ++e) total += maxsim(q, s.index.rows(e), s.index.dim());
    benchmark::DoNotOptimize(total);
  }
}
BENCHMARK(BM_Maxsim)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
