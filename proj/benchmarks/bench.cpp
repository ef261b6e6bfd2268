#include <random>
#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "omop_mcp/athena.hpp"
#include "omop_mcp/eval.hpp"
#include "omop_mcp/mcp_server.hpp"
#include "omop_mcp/preferences.hpp"

using namespace omop_mcp;

namespace {

std::vector<Concept> vocabulary(std::size_t n) {
    static const char* heads[] = {"pain", "fracture", "infection", "glucose", "tablet",
                                  "ultrasound", "lesion", "cyst", "panel", "injection"};
    static const char* sites[] = {"chest", "renal", "hepatic", "femoral", "cardiac",
                                  "serum", "oral", "lumbar"};
    static const char* domains[] = {"Condition", "Drug", "Measurement", "Procedure"};
    static const char* vocabs[] = {"SNOMED", "RxNorm", "LOINC", "CPT4", "ICD10CM"};
    std::mt19937 rng(1);
    std::vector<Concept> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(Concept{static_cast<ConceptId>(100000 + i),
                              std::string(sites[rng() % 8]) + " " + heads[rng() % 10] + " " +
                                  std::to_string(i),
                              domains[i % 4], vocabs[rng() % 5], "Clinical Finding",
                              rng() % 3 ? StandardFlag::Standard : StandardFlag::NonStandard,
                              rng() % 10 ? Validity::Valid : Validity::Invalid});
    }
    return out;
}

void BM_FixtureSearch(benchmark::State& state) {
    FixtureBackend backend(vocabulary(static_cast<std::size_t>(state.range(0))));
    SearchFilters f;
    for (auto _ : state) benchmark::DoNotOptimize(backend.search("chest pain", f));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_FixtureSearch)->Arg(1000)->Arg(10000)->Arg(50000);

void BM_CachedStoreSearch(benchmark::State& state) {
    VocabularyStore store(std::make_shared<FixtureBackend>(vocabulary(10000)));
    store.search_concepts("renal cyst");
    for (auto _ : state) benchmark::DoNotOptimize(store.search_concepts("renal cyst"));
}
BENCHMARK(BM_CachedStoreSearch);

void BM_RankCandidates(benchmark::State& state) {
    auto candidates = vocabulary(static_cast<std::size_t>(state.range(0)));
    const auto profile = resolve_profile(std::string("Measurement"), std::string("prefer LOINC"));
    for (auto _ : state) benchmark::DoNotOptimize(rank_candidates(candidates, profile, "serum glucose"));
}
BENCHMARK(BM_RankCandidates)->Arg(20)->Arg(100);

void BM_WilcoxonExact(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937 rng(3);
    std::vector<double> a(n);
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng() % 3;
        b[i] = rng() % 3 + (i % 2 ? 0.5 : 0.0);
    }
    for (auto _ : state) benchmark::DoNotOptimize(wilcoxon_signed_rank(a, b));
}
BENCHMARK(BM_WilcoxonExact)->Arg(12)->Arg(25);

void BM_WilcoxonNormal(benchmark::State& state) {
    std::mt19937 rng(4);
    std::vector<double> a(150);
    std::vector<double> b(150);
    for (std::size_t i = 0; i < 150; ++i) {
        a[i] = rng() % 3;
        b[i] = rng() % 3;
    }
    for (auto _ : state) benchmark::DoNotOptimize(wilcoxon_signed_rank(a, b));
}
BENCHMARK(BM_WilcoxonNormal);

void BM_McpToolCall(benchmark::State& state) {
    VocabularyStore store(std::make_shared<FixtureBackend>(vocabulary(10000)));
    McpServer server(store, register_default_resources());
    const std::string frame =
        R"({"jsonrpc":"2.0","id":1,"method":"tools/call","params":{"name":"search_athena","arguments":{"keyword":"hepatic lesion"}}})";
    for (auto _ : state) benchmark::DoNotOptimize(server.handle_line(frame));
}
BENCHMARK(BM_McpToolCall);

}  // namespace

BENCHMARK_MAIN();
