// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance                    run all criteria
//   acceptance --write-golden     rewrite the masked MCP golden transcript

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "omop_mcp/agent.hpp"
#include "omop_mcp/eval.hpp"
#include "omop_mcp/mcp_server.hpp"
#include "test_support.hpp"

using namespace omop_mcp;
namespace t = omop_mcp::testing;
using namespace std::chrono_literals;

namespace {

struct Failed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw Failed(what);
}

struct Criterion {
    int number;
    std::string title;
    double budget_seconds;  // 0 means no runtime bound
    std::function<std::string()> body;
};

// ---------------------------------------------------------------------------
// 1. Guard soundness
// ---------------------------------------------------------------------------

std::string grounding_soundness() {
    const auto concepts = t::synthetic_concepts(500);
    auto store = t::store_of(concepts);
    std::set<std::pair<ConceptId, std::string>> truth;
    for (const auto& c : concepts) truth.emplace(c.concept_id, normalize_name(c.concept_name));

    std::mt19937 rng(2024);
    const auto pick = [&]() -> const Concept& { return concepts[rng() % concepts.size()]; };
    std::size_t accepts = 0;
    std::size_t false_accepts = 0;
    std::size_t false_rejects = 0;
    const std::size_t cases = 3000;
    for (std::size_t i = 0; i < cases; ++i) {
        const auto& base = pick();
        MappingResult r = mapping_from_concept(base, "fuzz");
        switch (rng() % 7) {
            case 0: break;
            case 1: {  // case and spacing variants keep the normalized name
                std::string n;
                for (const char ch : r.concept_name) {
                    n += static_cast<char>(rng() % 2 ? std::toupper(static_cast<unsigned char>(ch))
                                                     : std::tolower(static_cast<unsigned char>(ch)));
                    if (ch == ' ' && rng() % 3 == 0) n += "  ";
                }
                r.concept_name = "  " + n + "\t";
                break;
            }
            case 2: r.concept_name = pick().concept_name; break;
            case 3: r.concept_id = static_cast<ConceptId>(1 + rng() % 5000000); break;
            case 4: r.concept_id = pick().concept_id; break;
            case 5: r.concept_name.pop_back(); break;
            default: r.concept_id = static_cast<ConceptId>(rng() % 3) - 1; break;
        }
        const bool expected = truth.count({r.concept_id, normalize_name(r.concept_name)}) == 1;
        const auto verdict = verify_mapping(r, store, "fuzz");
        const bool accepted = std::holds_alternative<VerifiedMapping>(verdict);
        accepts += accepted ? 1 : 0;
        if (accepted && !expected) ++false_accepts;
        if (!accepted && expected) ++false_rejects;
    }
    require(false_accepts == 0 && false_rejects == 0,
            std::to_string(false_accepts) + " false accepts, " + std::to_string(false_rejects) +
                " false rejects");
    return std::to_string(cases) + " fuzzed results, " + std::to_string(accepts) +
           " accepted, 0 false accepts, 0 false rejects";
}

// ---------------------------------------------------------------------------
// 2. 48-term medication run and the no-tool ablation through the CLI
// ---------------------------------------------------------------------------

struct CliRun {
    int code;
    std::string out;
    std::string err;
};

CliRun cli_run(const std::vector<std::string>& args) {
    std::istringstream in;
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(args, in, out, err);
    return {code, out.str(), err.str()};
}

std::string medication_runs() {
    t::TempDir dir;
    const auto fixture = dir.file("meds.jsonl").string();
    const auto terms = dir.file("terms.tsv").string();
    const auto grounded = dir.file("grounded.json").string();
    const auto ablation = dir.file("ablation.json").string();
    const auto scripts = t::medication_scripts();
    t::write_concepts(fixture, t::medication_concepts());
    t::write_text(terms, t::terms_file_text(scripts));
    t::write_text(grounded, t::transcript_json(t::cooperative_steps(scripts)).dump());
    t::write_text(ablation, t::transcript_json(t::ablation_steps(scripts, 5)).dump());

    const auto with_tools = cli_run({"map", terms, "--fixture", fixture, "--mock", grounded});
    require(with_tools.code == 0, "grounded run exited " + std::to_string(with_tools.code));
    require(with_tools.err.find("retrieval success 100.0% (48/48)") != std::string::npos,
            "grounded summary: " + with_tools.err);

    const auto no_tools =
        cli_run({"map", terms, "--fixture", fixture, "--mock", ablation, "--no-tools"});
    require(no_tools.code == 0, "ablation run exited " + std::to_string(no_tools.code));
    for (const char* needle : {"retrieval success 0.0% (0/48)", "non_existent_id 10.4% (5)",
                               "name_mismatch 89.6% (43)"}) {
        require(no_tools.err.find(needle) != std::string::npos,
                std::string("ablation summary lacks \"") + needle + "\": " + no_tools.err);
    }
    return "tools 100.0% (48/48); no tools 0.0% success, 10.4% non-existent id, 89.6% name mismatch";
}

// ---------------------------------------------------------------------------
// 3. CP end to end
// ---------------------------------------------------------------------------

std::string chest_pain_example() {
    auto store = t::chest_pain_store();
    const auto fixture_entry = t::chest_pain_concepts().front();
    ScriptedMock mock(
        {t::keyword_tool_step("CP", "chest pain"),
         t::answer_step(t::selection_marker("CP"),
                        mapping_from_concept(fixture_entry,
                                             "CP in an emergency presentation abbreviates chest "
                                             "pain; 77670 is the standard SNOMED finding.",
                                             "chest pain"))});
    MappingRequest req;
    req.source_term = "CP";
    req.target_table = "condition_occurrence";
    const auto outcome = map_term(req, mock, store);
    const auto* m = std::get_if<AuditedMapping>(&outcome);
    require(m != nullptr, "CP did not map: " + (std::holds_alternative<RetrievalFailure>(outcome)
                                                    ? std::get<RetrievalFailure>(outcome).detail
                                                    : std::string()));
    const auto& r = m->verified.result;
    require(r.concept_id == 77670, "concept_id " + std::to_string(r.concept_id));
    require(r.inferred_keyword == "chest pain", "inferred keyword " + r.inferred_keyword);
    require(!r.reasoning.empty(), "empty reasoning");
    require(m->verified.authenticated_concept == fixture_entry, "authenticated concept differs");
    require(m->verified.authenticated_concept.concept_name == "Chest pain", "authenticated name");
    return "concept ID 77670 for \"chest pain\" (attempts " + std::to_string(m->attempts) + ")";
}

// ---------------------------------------------------------------------------
// 4. Relevance aggregates
// ---------------------------------------------------------------------------

std::vector<RelevanceScore> from_histogram(std::size_t zeros, std::size_t ones, std::size_t twos) {
    std::vector<RelevanceScore> s;
    s.insert(s.end(), zeros, 0);
    s.insert(s.end(), ones, 1);
    s.insert(s.end(), twos, 2);
    return s;
}

std::string relevance_aggregates() {
    const auto system = from_histogram(12, 31, 99);
    auto human = from_histogram(35, 16, 91);
    const auto sys_mean = format_fixed(mean_score(system), 2);
    const auto hum_mean = format_fixed(mean_score(human), 2);
    require(sys_mean == "1.61", "system mean " + sys_mean);
    require(hum_mean == "1.39", "human mean " + hum_mean);

    // Every pairing of the two histograms must reproduce the marginals.
    std::mt19937 rng(142);
    std::shuffle(human.begin(), human.end(), rng);
    const auto m = agreement_matrix(system, human);
    const auto rows = m.system_marginals();
    const auto cols = m.human_marginals();
    const double n = static_cast<double>(m.total());
    const std::vector<std::pair<std::string, std::string>> shares{
        {format_percent(rows[0] / n), "8.5%"},
        {format_percent(rows[2] / n), "69.7%"},
        {format_percent(cols[0] / n), "24.6%"},
        {format_percent(cols[2] / n), "64.1%"}};
    for (const auto& [got, want] : shares) require(got == want, "marginal " + got + " != " + want);
    return "means " + sys_mean + " vs " + hum_mean + "; marginals 8.5% 69.7% 24.6% 64.1%";
}

// ---------------------------------------------------------------------------
// 5. Signed-rank test against the enumeration oracle
// ---------------------------------------------------------------------------

std::string wilcoxon_oracle() {
    std::mt19937 rng(5150);
    std::size_t compared = 0;
    double worst_exact = 0.0;
    while (compared < 200) {
        const std::size_t n = 1 + rng() % 12;
        const unsigned levels = 2 + rng() % 6;  // small ranges force ties and zeros
        std::vector<double> a(n);
        std::vector<double> b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = static_cast<double>(rng() % levels);
            b[i] = static_cast<double>(rng() % levels);
        }
        const auto oracle = t::brute_force_wilcoxon(a, b);
        if (oracle.n == 0) continue;
        const auto w = wilcoxon_signed_rank(a, b);
        require(w.exact, "exact path not taken at n=" + std::to_string(n));
        require(w.n_pairs == oracle.n, "n_pairs differs");
        const double diff = std::fabs(w.p_value - oracle.p_two_sided);
        worst_exact = std::max(worst_exact, diff);
        require(diff <= 1e-9, "p " + std::to_string(w.p_value) + " vs oracle " +
                                  std::to_string(oracle.p_two_sided));
        ++compared;
    }

    double worst_approx = 0.0;
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> a(20);
        std::vector<double> b(20);
        for (std::size_t k = 0; k < 20; ++k) {
            a[k] = u(rng);
            b[k] = u(rng) + (i % 5) * 0.4;  // vary the effect so p spans its range
        }
        const auto exact = wilcoxon_signed_rank(a, b);
        const auto approx = wilcoxon_signed_rank_normal(a, b);
        require(exact.exact && !approx.exact, "wrong code path at n=20");
        worst_approx = std::max(worst_approx, std::fabs(exact.p_value - approx.p_value));
    }
    require(worst_approx <= 0.02, "normal vs exact differs by " + std::to_string(worst_approx));

    const std::vector<double> same{1, 2, 3, 2};
    bool degenerate = false;
    try {
        wilcoxon_signed_rank(same, same);
    } catch (const DegenerateInput&) {
        degenerate = true;
    }
    require(degenerate, "all-zero differences did not raise DegenerateInput");

    std::ostringstream os;
    os << "200 exact cases (max |dp| " << worst_exact << "), 50 n=20 cases (max |dp| "
       << format_fixed(worst_approx, 4) << "), DegenerateInput raised";
    return os.str();
}

// ---------------------------------------------------------------------------
// 6. MCP stdio session against the golden transcript
// ---------------------------------------------------------------------------

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

std::vector<json> run_mcp_session() {
    auto store = t::chest_pain_store();
    McpServer server(store, register_default_resources());
    std::istringstream in(t::read_text(t::data_dir() / "mcp_session.requests.jsonl"));
    std::ostringstream out;
    server.serve(in, out);
    std::vector<json> responses;
    for (const auto& line : lines_of(out.str())) responses.push_back(mask_timing_fields(json::parse(line)));
    return responses;
}

std::string mcp_session() {
    const auto responses = run_mcp_session();
    const auto golden_lines = lines_of(t::read_text(t::data_dir() / "mcp_session.golden.jsonl"));
    require(responses.size() == golden_lines.size(),
            std::to_string(responses.size()) + " responses, golden has " +
                std::to_string(golden_lines.size()));
    for (std::size_t i = 0; i < responses.size(); ++i) {
        require(responses[i] == json::parse(golden_lines[i]),
                "response " + std::to_string(i + 1) + " differs from golden: " + responses[i].dump());
    }

    // Structural checks independent of the golden text.
    const auto by_id = [&](const json& id) -> const json& {
        for (const auto& r : responses) {
            if (r.at("id") == id) return r;
        }
        throw Failed("no response with id " + id.dump());
    };
    const auto& init = by_id(1);
    require(init.at("result").at("capabilities").contains("tools") &&
                init.at("result").at("capabilities").contains("resources"),
            "capabilities missing");
    require(by_id(2).at("result").at("tools").size() == 2, "tools/list size");
    require(!by_id(3).at("result").at("resources").empty(), "resources/list empty");
    require(by_id(4).at("result").at("contents")[0].at("uri") == "omop://vocabulary-preferences",
            "resources/read uri");
    const auto payload =
        json::parse(by_id(5).at("result").at("content")[0].at("text").get<std::string>());
    require(payload.at("candidates")[0].at("concept_id") == 77670, "77670 not first candidate");
    const auto& malformed = by_id(nullptr);
    require(malformed.at("error").at("code") == rpc_error::kParseError, "malformed frame code");
    require(by_id(6).at("error").at("code") == rpc_error::kMethodNotFound, "unknown method code");
    return std::to_string(responses.size()) +
           " responses match the masked golden transcript; -32700 and -32601 observed";
}

int write_golden() {
    std::ostringstream os;
    for (const auto& r : run_mcp_session()) os << r.dump() << '\n';
    t::write_text(t::data_dir() / "mcp_session.golden.jsonl", os.str());
    std::cout << os.str();
    return 0;
}

// ---------------------------------------------------------------------------
// 7. Determinism across parallelism
// ---------------------------------------------------------------------------

std::vector<std::string> outcome_sequence(const std::vector<BatchItem>& items) {
    std::vector<std::string> seq;
    for (const auto& item : items) {
        std::ostringstream os;
        os << item.request.source_term << '|';
        if (const auto* m = std::get_if<AuditedMapping>(&item.outcome)) {
            os << "success|" << m->verified.result.concept_id << '|' << m->attempts << '|'
               << m->candidates_considered.size();
        } else if (const auto* f = std::get_if<RetrievalFailure>(&item.outcome)) {
            os << to_string(f->kind) << '|' << f->detail;
        } else {
            os << "error|" << std::get<InfrastructureError>(item.outcome).message;
        }
        seq.push_back(os.str());
    }
    return seq;
}

std::string determinism() {
    const auto concepts = t::synthetic_concepts(600);
    const auto batch = t::mixed_batch(concepts);
    std::vector<MappingRequest> requests;
    for (const auto& s : batch.scripts) {
        MappingRequest r;
        r.source_term = s.term;
        r.target_table = s.table;
        requests.push_back(r);
    }
    std::vector<std::vector<std::string>> runs;
    for (const int p : {1, 4}) {
        auto store = t::store_of(concepts);
        ScriptedMock mock(batch.steps);
        const auto items = map_batch(requests, mock, store, p);
        for (std::size_t i = 0; i < items.size(); ++i) {
            const auto c = classify(items[i]);
            require(c.has_value() && *c == batch.expected[i],
                    "parallelism " + std::to_string(p) + " term " + std::to_string(i + 1) +
                        " unexpected outcome");
        }
        runs.push_back(outcome_sequence(items));
    }
    require(runs[0] == runs[1], "outcome sequences differ between parallelism 1 and 4");
    const auto successes = std::count(batch.expected.begin(), batch.expected.end(), OutcomeClass::Success);
    return std::to_string(requests.size()) + " terms, identical sequences at parallelism 1 and 4 (" +
           std::to_string(successes) + " successes)";
}

// ---------------------------------------------------------------------------
// 8. Upstream rate limit
// ---------------------------------------------------------------------------

class RecordingRemote final : public VocabularyBackend {
public:
    explicit RecordingRemote(std::shared_ptr<Clock> clock) : clock_(std::move(clock)) {}
    CandidateSet search(const std::string& query, const SearchFilters& filters) override {
        times.push_back(clock_->now());
        CandidateSet out;
        out.query = query;
        out.page = filters.page;
        out.page_size = filters.page_size;
        return out;
    }
    std::optional<Concept> get(ConceptId) override {
        times.push_back(clock_->now());
        return std::nullopt;
    }
    bool is_remote() const override { return true; }
    std::vector<Clock::TimePoint> times;

private:
    std::shared_ptr<Clock> clock_;
};

std::string rate_limit() {
    const char* previous = std::getenv("ATHENA_RATE_LIMIT_RPS");
    const std::string saved = previous ? previous : "";
    ::setenv("ATHENA_RATE_LIMIT_RPS", "5", 1);
    StoreConfig cfg;
    try {
        cfg = StoreConfig::from_env();
    } catch (...) {
        previous ? ::setenv("ATHENA_RATE_LIMIT_RPS", saved.c_str(), 1) : ::unsetenv("ATHENA_RATE_LIMIT_RPS");
        throw;
    }
    previous ? ::setenv("ATHENA_RATE_LIMIT_RPS", saved.c_str(), 1) : ::unsetenv("ATHENA_RATE_LIMIT_RPS");
    require(cfg.rate_limit_rps == 5.0, "ATHENA_RATE_LIMIT_RPS not applied");
    cfg.fixture_path.reset();

    auto clock = std::make_shared<ManualClock>();
    clock->advance(417ms);
    auto backend = std::make_shared<RecordingRemote>(clock);
    VocabularyStore store(backend, cfg, clock);
    for (int i = 0; i < 100; ++i) {
        if (i % 4 == 3) {
            store.get_concept(1000 + i);
        } else {
            store.search_concepts("burst query " + std::to_string(i));
        }
    }
    const auto& times = backend->times;
    require(times.size() == 100, std::to_string(times.size()) + " upstream calls, expected 100");
    std::size_t busiest = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        std::size_t in_window = 0;
        for (std::size_t j = i; j < times.size() && times[j] - times[i] < 1s; ++j) ++in_window;
        busiest = std::max(busiest, in_window);
    }
    require(busiest <= 5, "a one-second window saw " + std::to_string(busiest) + " calls");
    const double span = std::chrono::duration<double>(times.back() - times.front()).count();
    return "100 upstream calls over " + format_fixed(span, 1) + " s of injected time; busiest window " +
           std::to_string(busiest) + " calls";
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1 && std::string(argv[1]) == "--write-golden") return write_golden();

    const std::vector<Criterion> criteria{
        {1, "grounding soundness", 5.0, grounding_soundness},
        {2, "48-term retrieval and no-tool ablation", 10.0, medication_runs},
        {3, "CP maps to 77670", 1.0, chest_pain_example},
        {4, "relevance aggregates", 0.0, relevance_aggregates},
        {5, "signed-rank oracle", 30.0, wilcoxon_oracle},
        {6, "MCP stdio session", 2.0, mcp_session},
        {7, "determinism across parallelism", 20.0, determinism},
        {8, "upstream rate limit", 0.0, rate_limit},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = true;
        try {
            detail = c.body();
        } catch (const std::exception& e) {
            ok = false;
            detail = e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::string timing = format_fixed(secs, 3) + " s";
        if (c.budget_seconds > 0) {
            timing += " (limit " + format_fixed(c.budget_seconds, 0) + " s)";
            if (ok && secs >= c.budget_seconds) {
                ok = false;
                detail += "; over the time limit";
            }
        }
        std::cout << (ok ? "PASS" : "FAIL") << " criterion " << c.number << ": " << c.title << " | "
                  << detail << " | " << timing << std::endl;
        failures += ok ? 0 : 1;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
