#include "omop_mcp/agent.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include "omop_mcp/mcp_server.hpp"

namespace omop_mcp {

namespace {

using Conversation = std::vector<ChatMessage>;

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string json_quoted(std::string_view s) { return json(std::string(s)).dump(); }

std::string output_schema_example(std::string_view athena_web_base) {
    std::ostringstream os;
    os << "{\"concept_id\": <integer>, "
          "\"concept_name\": \"<name exactly as returned by the tool>\", "
          "\"domain_id\": \"<domain id>\", "
          "\"class\": \"<concept class>\", "
          "\"validity\": \"Valid | Invalid\", "
          "\"domain\": \"<domain>\", "
          "\"vocabulary\": \"<vocabulary id>\", "
          "\"concept_url\": \""
       << athena_web_base
       << "/search-terms/terms/<concept_id>\", "
          "\"reasoning\": \"<keyword inference and selection rationale>\", "
          "\"inferred_keyword\": \"<keyword you searched for>\"}";
    return os.str();
}

// Keyword from a step-1 reply: tool-call argument, JSON "keyword", or the
// first non-empty line of plain text.
std::string keyword_from_reply(const LlmReply& reply) {
    if (reply.tool_call) {
        if (reply.tool_call->name != "search_athena") return {};
        const auto it = reply.tool_call->arguments.find("keyword");
        if (it == reply.tool_call->arguments.end() || !it->is_string()) return {};
        return trim(it->get<std::string>());
    }
    const auto text = trim(reply.text);
    if (text.empty()) return {};
    const auto open = text.find('{');
    const auto close = text.rfind('}');
    if (open != std::string::npos && close != std::string::npos && close > open) {
        const auto j = json::parse(text.substr(open, close - open + 1), nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("keyword")) {
            return j.at("keyword").is_string() ? trim(j.at("keyword").get<std::string>())
                                               : std::string();
        }
    }
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        auto t = trim(line);
        while (!t.empty() && (t.front() == '"' || t.front() == '\'')) t.erase(0, 1);
        while (!t.empty() && (t.back() == '"' || t.back() == '\'' || t.back() == '.')) t.pop_back();
        t = trim(t);
        if (!t.empty()) return t;
    }
    return {};
}

struct KeywordStep {
    std::string keyword;
};

// Runs step 1 on `conversation`, leaving it ready for the selection prompt.
KeywordStep run_keyword_step(const MappingRequest& request, LlmPort& llm,
                             const AgentConfig& config, Conversation& conversation) {
    const auto tools = VocabularyTools::descriptors();
    conversation.push_back({Role::User, keyword_prompt(request), std::nullopt, {}});
    for (int attempt = 1; attempt <= config.max_attempts; ++attempt) {
        const auto reply = llm.send(conversation, tools);
        auto keyword = keyword_from_reply(reply);
        if (reply.tool_call) {
            conversation.push_back({Role::Assistant, reply.text, reply.tool_call, {}});
            conversation.push_back(
                {Role::Tool,
                 keyword.empty()
                     ? std::string("Tool call not executed: call search_athena with a keyword.")
                     : "search_athena(" + json_quoted(keyword) +
                           ") executed; the ranked candidates follow in the next message.",
                 std::nullopt, reply.tool_call->id});
        } else {
            conversation.push_back({Role::Assistant, reply.text, std::nullopt, {}});
        }
        if (!keyword.empty()) return KeywordStep{std::move(keyword)};
        if (attempt < config.max_attempts) {
            conversation.push_back(
                {Role::User,
                 "The inferred keyword for " + json_quoted(request.source_term) +
                     " was empty. Call search_athena with a non-empty keyword.",
                 std::nullopt, {}});
        }
    }
    throw EmptyInference("model returned no keyword for " + json_quoted(request.source_term));
}

bool declined(const std::string& text) {
    if (text.find(kNoMatchToken) == std::string::npos) return false;
    try {
        parse_mapping_output(text);
        return false;
    } catch (const ParseError&) {
        return true;
    }
}

void add_unique(std::vector<Concept>& into, const std::vector<Concept>& more) {
    for (const auto& c : more) {
        const bool present = std::any_of(into.begin(), into.end(), [&](const Concept& x) {
            return x.concept_id == c.concept_id;
        });
        if (!present) into.push_back(c);
    }
}

// Replaces descriptive fields with the vocabulary's own values once the
// id/name pair has been authenticated.
void ground_fields(MappingResult& m, const Concept& c, std::string_view athena_web_base) {
    m.concept_name = c.concept_name;
    m.domain_id = c.domain_id;
    m.domain = c.domain_id;
    m.concept_class = c.concept_class;
    m.validity = std::string(to_string(c.validity));
    m.vocabulary = c.vocabulary_id;
    m.concept_url = concept_url(c.concept_id, athena_web_base);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string feedback_prompt(const MappingRequest& request, const std::string& detail) {
    return "Your previous answer for source term " + json_quoted(request.source_term) +
           " was rejected: " + detail +
           "\nChoose a concept_id from the candidates above, copy its concept_name exactly, "
           "and reply with the JSON object only (or " +
           std::string(kNoMatchToken) + " if none fits).";
}

MapOutcome map_term_without_tools(const MappingRequest& request, LlmPort& llm,
                                  VocabularyStore& store, const AgentConfig& config,
                                  std::chrono::steady_clock::time_point start) {
    Conversation conversation{
        {Role::System, build_system_prompt(request.profile, config.resources), std::nullopt, {}},
        {Role::User, memory_only_prompt(request), std::nullopt, {}}};
    const auto reply = llm.send(conversation, {});
    if (reply.tool_call) {
        return RetrievalFailure{FailureKind::NoMappingFound, request.source_term,
                                "tool call requested while tools are disabled"};
    }
    if (declined(reply.text)) {
        return RetrievalFailure{FailureKind::NoMappingFound, request.source_term,
                                "model declined to map the term"};
    }
    MappingResult result;
    try {
        result = parse_mapping_output(reply.text);
    } catch (const ParseError& e) {
        return RetrievalFailure{FailureKind::NoMappingFound, request.source_term,
                                std::string("unparseable answer: ") + e.what()};
    }
    auto verdict = verify_mapping(result, store, request.source_term);
    if (auto* failure = std::get_if<RetrievalFailure>(&verdict)) return *failure;
    auto& verified = std::get<VerifiedMapping>(verdict);
    return AuditedMapping{request, std::move(verified), {}, 1, seconds_since(start)};
}

}  // namespace

AgentConfig AgentConfig::from_env() {
    AgentConfig cfg;
    if (const char* v = std::getenv("OMOP_MCP_MAX_ATTEMPTS"); v != nullptr && *v != '\0') {
        char* end = nullptr;
        const long n = std::strtol(v, &end, 10);
        if (*end != '\0' || n < 1 || n > 100) {
            throw std::invalid_argument("OMOP_MCP_MAX_ATTEMPTS must be an integer in [1, 100]");
        }
        cfg.max_attempts = static_cast<int>(n);
    }
    return cfg;
}

std::string build_system_prompt(const PreferenceProfile& profile,
                                const std::vector<std::string>& resources) {
    std::ostringstream os;
    os << "You map clinical source terms to concepts in the OMOP standardized vocabularies.\n\n"
          "Work in three phases:\n"
          "1. Interpret the user input. Infer the medical term, the target OMOP table and field, "
          "and any context requirement. Expand abbreviations and correct typos using the "
          "clinical context and the table specification.\n"
          "2. Call the search_athena tool with the inferred keyword to retrieve candidate "
          "concepts from the OHDSI Athena vocabulary service.\n"
          "3. Choose the single best candidate based on semantic fit, OMOP best practices and "
          "the user's requirements.\n\n"
          "Rules:\n"
          "- "
       << kNoInventionRule
       << "\n"
          "- Answer with exactly one JSON object and nothing else, using these fields:\n  "
       << output_schema_example(kDefaultAthenaWebBase)
       << "\n"
          "- If no candidate is appropriate, answer "
       << kNoMatchToken
       << " instead of guessing.\n"
          "- Vocabulary preferences:\n"
       << render_preferences(profile)
       << "- Reasoning: explain how you inferred the search keyword from the input and why "
          "the selected concept fits better than the other candidates.\n";
    if (!resources.empty()) {
        os << "\nReference material:\n";
        for (const auto& r : resources) os << '\n' << r << '\n';
    }
    return os.str();
}

std::string keyword_prompt(const MappingRequest& request) {
    std::ostringstream os;
    os << "Step 1 of 2: keyword inference.\n"
       << "Source term: " << json_quoted(request.source_term) << '\n';
    if (request.target_table) os << "Target OMOP table: " << *request.target_table << '\n';
    if (request.target_field) os << "Target field: " << *request.target_field << '\n';
    if (request.context) os << "Clinical context: " << *request.context << '\n';
    if (request.profile.user_override) {
        os << "User instruction: " << *request.profile.user_override << '\n';
    }
    os << "Interpret the source term in its clinical context and call search_athena with the "
          "inferred keyword. Without tool calling, reply with JSON "
          "{\"keyword\": \"<inferred keyword>\", \"reasoning\": \"<why>\"}.";
    return os.str();
}

std::string candidate_table(const std::vector<Concept>& concepts) {
    std::ostringstream os;
    os << "concept_id | concept_name | domain | vocabulary | class | standard | validity\n";
    for (const auto& c : concepts) {
        os << c.concept_id << " | " << c.concept_name << " | " << c.domain_id << " | "
           << c.vocabulary_id << " | " << c.concept_class << " | " << to_code(c.standard)
           << " | " << to_code(c.validity) << '\n';
    }
    return os.str();
}

std::string selection_prompt(const MappingRequest& request, const std::string& keyword,
                             const std::vector<Concept>& ranked, std::size_t total_available) {
    std::ostringstream os;
    os << "Step 2 of 2: concept selection for source term " << json_quoted(request.source_term)
       << " (inferred keyword: " << json_quoted(keyword) << ").\n";
    if (ranked.empty()) {
        os << "search_athena returned no candidates.\n";
    } else {
        os << "search_athena returned " << total_available << " candidates; the top "
           << ranked.size() << " ranked by vocabulary preference are:\n"
           << candidate_table(ranked);
    }
    os << "Select the best candidate and answer with the JSON object only, or "
       << kNoMatchToken << " if none is appropriate.";
    return os.str();
}

std::string memory_only_prompt(const MappingRequest& request) {
    std::ostringstream os;
    os << "Source term: " << json_quoted(request.source_term) << '\n';
    if (request.target_table) os << "Target OMOP table: " << *request.target_table << '\n';
    if (request.target_field) os << "Target field: " << *request.target_field << '\n';
    if (request.context) os << "Clinical context: " << *request.context << '\n';
    os << "Tool access is unavailable for this request. Answer with the JSON object only, or "
       << kNoMatchToken << " if you cannot map the term.";
    return os.str();
}

void validate(const MappingRequest& request) {
    if (trim(request.source_term).empty()) {
        throw std::invalid_argument("source_term is empty");
    }
}

MappingRequest with_domain_hint(MappingRequest request) {
    if (!request.profile.target_domain) {
        if (request.target_table) request.profile.target_domain = domain_for_table(*request.target_table);
        if (!request.profile.target_domain && request.target_field) {
            request.profile.target_domain = domain_for_table(*request.target_field);
        }
    }
    return request;
}

std::string infer_keyword(const MappingRequest& request, LlmPort& llm, const AgentConfig& config) {
    validate(request);
    Conversation conversation{
        {Role::System, build_system_prompt(request.profile, config.resources), std::nullopt, {}}};
    return run_keyword_step(request, llm, config, conversation).keyword;
}

MapOutcome map_term(const MappingRequest& raw_request, LlmPort& llm, VocabularyStore& store,
                    const AgentConfig& config) {
    validate(raw_request);
    const auto request = with_domain_hint(raw_request);
    const auto start = std::chrono::steady_clock::now();
    if (!config.tools_enabled) return map_term_without_tools(request, llm, store, config, start);

    Conversation conversation{
        {Role::System, build_system_prompt(request.profile, config.resources), std::nullopt, {}}};

    std::string keyword;
    try {
        keyword = run_keyword_step(request, llm, config, conversation).keyword;
    } catch (const EmptyInference&) {
        keyword = trim(request.source_term);
    }

    SearchFilters filters;
    filters.page_size = static_cast<int>(std::clamp<std::size_t>(config.max_candidates, 1, 100));
    auto found = store.search_concepts(keyword, filters);
    if (found.candidates.empty() && normalize_name(keyword) != normalize_name(request.source_term)) {
        found = store.search_concepts(request.source_term, filters);
    }
    auto ranked = rank_candidates(found.candidates, request.profile, keyword);
    if (ranked.size() > config.max_candidates) ranked.resize(config.max_candidates);

    std::vector<Concept> considered = ranked;
    conversation.push_back(
        {Role::User, selection_prompt(request, keyword, ranked, found.total_available),
         std::nullopt, {}});

    VocabularyTools tools(store);
    const auto tool_specs = VocabularyTools::descriptors();
    std::string last_detail = "no answer";
    for (int attempt = 1; attempt <= config.max_attempts; ++attempt) {
        LlmReply reply = llm.send(conversation, tool_specs);
        int rounds = 0;
        while (reply.tool_call && rounds < config.max_tool_rounds) {
            conversation.push_back({Role::Assistant, reply.text, reply.tool_call, {}});
            std::string tool_text;
            try {
                auto result = tools.call(reply.tool_call->name, reply.tool_call->arguments);
                add_unique(considered, result.concepts);
                tool_text = std::move(result.text);
            } catch (const ToolArgumentError& e) {
                tool_text = json{{"error", e.what()}}.dump();
            }
            conversation.push_back({Role::Tool, tool_text, std::nullopt, reply.tool_call->id});
            ++rounds;
            reply = llm.send(conversation, tool_specs);
        }

        if (reply.tool_call) {
            last_detail = "too many tool calls without an answer";
            conversation.push_back({Role::Assistant, reply.text, reply.tool_call, {}});
            conversation.push_back({Role::Tool, "Tool call limit reached; answer now.",
                                    std::nullopt, reply.tool_call->id});
        } else {
            conversation.push_back({Role::Assistant, reply.text, std::nullopt, {}});
            if (declined(reply.text)) {
                return RetrievalFailure{FailureKind::NoMappingFound, request.source_term,
                                        "model declined to map the term"};
            }
            try {
                auto result = parse_mapping_output(reply.text);
                result.concept_url = concept_url(result.concept_id, config.athena_web_base);
                if (result.inferred_keyword.empty()) result.inferred_keyword = keyword;

                auto verdict = verify_mapping(result, store, request.source_term);
                if (auto* failure = std::get_if<RetrievalFailure>(&verdict)) {
                    last_detail = failure->detail;
                } else {
                    auto& verified = std::get<VerifiedMapping>(verdict);
                    const bool retrieved =
                        std::any_of(considered.begin(), considered.end(), [&](const Concept& c) {
                            return c.concept_id == verified.authenticated_concept.concept_id;
                        });
                    if (retrieved) {
                        ground_fields(verified.result, verified.authenticated_concept,
                                      config.athena_web_base);
                        return AuditedMapping{request, std::move(verified), std::move(considered),
                                              attempt, seconds_since(start)};
                    }
                    last_detail = "concept_id " + std::to_string(result.concept_id) +
                                  " was not among the retrieved candidates";
                }
            } catch (const ParseError& e) {
                last_detail = std::string("answer could not be parsed: ") + e.what();
            }
        }
        if (attempt < config.max_attempts) {
            conversation.push_back(
                {Role::User, feedback_prompt(request, last_detail), std::nullopt, {}});
        }
    }
    return RetrievalFailure{FailureKind::NoMappingFound, request.source_term,
                            "no verified mapping after " + std::to_string(config.max_attempts) +
                                " attempts; last problem: " + last_detail};
}

std::vector<BatchItem> map_batch(const std::vector<MappingRequest>& requests, LlmPort& llm,
                                 VocabularyStore& store, int parallelism,
                                 const AgentConfig& config) {
    if (parallelism < 1) throw std::invalid_argument("parallelism must be >= 1");
    std::vector<BatchItem> items(requests.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= requests.size()) return;
            auto& item = items[i];
            item.request = requests[i];
            const auto start = std::chrono::steady_clock::now();
            try {
                auto outcome = map_term(requests[i], llm, store, config);
                if (auto* m = std::get_if<AuditedMapping>(&outcome)) {
                    item.outcome = std::move(*m);
                } else {
                    item.outcome = std::get<RetrievalFailure>(std::move(outcome));
                }
            } catch (const std::exception& e) {
                item.outcome = InfrastructureError{e.what()};
            }
            item.elapsed_seconds = seconds_since(start);
        }
    };

    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(parallelism),
                                               std::max<std::size_t>(requests.size(), 1));
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return items;
}

std::optional<OutcomeClass> classify(const BatchItem& item) {
    if (std::holds_alternative<AuditedMapping>(item.outcome)) return OutcomeClass::Success;
    if (const auto* f = std::get_if<RetrievalFailure>(&item.outcome)) {
        return to_outcome_class(f->kind);
    }
    return std::nullopt;
}

}  // namespace omop_mcp
