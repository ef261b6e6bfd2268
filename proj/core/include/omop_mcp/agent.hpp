#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "omop_mcp/athena.hpp"
#include "omop_mcp/grounding.hpp"
#include "omop_mcp/llm.hpp"
#include "omop_mcp/preferences.hpp"

namespace omop_mcp {

struct MappingRequest {
    std::string source_term;
    std::optional<std::string> target_table;
    std::optional<std::string> target_field;
    std::optional<std::string> context;
    PreferenceProfile profile;
};

/// A verified mapping plus the audit trail that produced it.
struct AuditedMapping {
    MappingRequest request;
    VerifiedMapping verified;
    /// Every concept the model was shown, in presentation order.
    std::vector<Concept> candidates_considered;
    int attempts = 1;
    double elapsed_seconds = 0.0;
};

using MapOutcome = std::variant<AuditedMapping, RetrievalFailure>;

/// Infrastructure failure (model or vocabulary service down, script
/// mismatch); distinct from a retrieval failure.
struct InfrastructureError {
    std::string message;
};

struct BatchItem {
    MappingRequest request;
    std::variant<AuditedMapping, RetrievalFailure, InfrastructureError> outcome;
    double elapsed_seconds = 0.0;
};

class EmptyInference : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AgentConfig {
    int max_attempts = 3;
    std::size_t max_candidates = 20;
    /// Tool calls the model may make inside one selection attempt.
    int max_tool_rounds = 4;
    /// false reproduces the no-tool ablation: the model answers from memory
    /// and the guard only classifies what it says.
    bool tools_enabled = true;
    std::vector<std::string> resources;
    std::string athena_web_base{kDefaultAthenaWebBase};

    /// Applies OMOP_MCP_MAX_ATTEMPTS when set.
    static AgentConfig from_env();
};

inline constexpr std::string_view kNoMatchToken = "NO_MATCH";
inline constexpr std::string_view kNoInventionRule =
    "Never invent or recall a concept_id from memory. Every concept_id you report must "
    "appear in a search_athena or get_concept_details result from this conversation.";

std::string build_system_prompt(const PreferenceProfile& profile,
                                const std::vector<std::string>& resources);

/// Step-1 user message for a request.
std::string keyword_prompt(const MappingRequest& request);

/// Step-2 user message presenting ranked candidates.
std::string selection_prompt(const MappingRequest& request, const std::string& keyword,
                             const std::vector<Concept>& ranked, std::size_t total_available);

/// Message sent when the model answers without tool access (ablation).
std::string memory_only_prompt(const MappingRequest& request);

/// Compact "id | name | vocabulary | class | standard | validity" table.
std::string candidate_table(const std::vector<Concept>& concepts);

/// Throws std::invalid_argument for an empty source term.
void validate(const MappingRequest& request);

/// Resolves the profile's target domain from the table hint when unset.
MappingRequest with_domain_hint(MappingRequest request);

std::string infer_keyword(const MappingRequest& request, LlmPort& llm,
                          const AgentConfig& config = {});

MapOutcome map_term(const MappingRequest& request, LlmPort& llm, VocabularyStore& store,
                    const AgentConfig& config = {});

/// Output order equals input order for any parallelism.
std::vector<BatchItem> map_batch(const std::vector<MappingRequest>& requests, LlmPort& llm,
                                 VocabularyStore& store, int parallelism,
                                 const AgentConfig& config = {});

/// nullopt for infrastructure errors, which are not retrieval outcomes.
std::optional<OutcomeClass> classify(const BatchItem& item);

}  // namespace omop_mcp
