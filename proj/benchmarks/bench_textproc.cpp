#include <benchmark/benchmark.h>

#include "tabret/corpus.hpp"
#include "tabret/textproc.hpp"

namespace {

using namespace tabret;

constexpr std::string_view kQuestion = "which famous team played its home games in the old stadium on the river";

void BM_Tokenize(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(tokenize(kQuestion));
}
BENCHMARK(BM_Tokenize);

void BM_PrepareQuestionWithChunking(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(prepare_question("q", kQuestion, true));
}
BENCHMARK(BM_PrepareQuestionWithChunking);

void BM_LinearizeTable(benchmark::State& state) {
  DistinctTable t{"t", {"team", "home city", "stadium", "founded"}, {}, {"t"}};
  for (int r = 0; r < 5; ++r) t.rows.push_back({"lions", "paris", "parc des princes", "1970"});
  const Tokenizer tok;
  for (auto _ : state) benchmark::DoNotOptimize(linearize_table(t, tok));
}
BENCHMARK(BM_LinearizeTable);

}  // namespace
