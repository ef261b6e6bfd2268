#pragma once

#include <chrono>
#include <string>
#include <variant>

#include "omop_mcp/athena.hpp"
#include "omop_mcp/vocabulary.hpp"

namespace omop_mcp {

/// A mapping whose id exists in the vocabulary and whose name matches it
/// under normalize_name().
struct VerifiedMapping {
    MappingResult result;
    Concept authenticated_concept;
    std::chrono::system_clock::time_point verified_at;
};

struct RetrievalFailure {
    FailureKind kind = FailureKind::NoMappingFound;
    std::string term;
    std::string detail;
};

/// The agent declined to produce any mapping.
struct NoAnswer {
    std::string term;
};

using VerifyOutcome = std::variant<VerifiedMapping, RetrievalFailure>;
using TermOutcome = std::variant<VerifiedMapping, RetrievalFailure, NoAnswer>;

/// Binary retrieval outcome plus the failure category when it failed.
enum class OutcomeClass { Success, NoMappingFound, NonExistentConceptId, ConceptIdNameMismatch };

OutcomeClass to_outcome_class(FailureKind kind);
std::string_view to_string(OutcomeClass c);  // success | no_mapping_found | ...
std::optional<OutcomeClass> outcome_class_from_string(std::string_view s);

/// Checks `result` against the store. Lookup errors (UpstreamUnavailable)
/// propagate; verification never passes silently.
VerifyOutcome verify_mapping(const MappingResult& result, VocabularyStore& store,
                             const std::string& term = {});

OutcomeClass classify_outcome(const TermOutcome& outcome);

}  // namespace omop_mcp
