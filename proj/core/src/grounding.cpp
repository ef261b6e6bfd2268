#include "omop_mcp/grounding.hpp"

namespace omop_mcp {

OutcomeClass to_outcome_class(FailureKind kind) {
    switch (kind) {
        case FailureKind::NoMappingFound: return OutcomeClass::NoMappingFound;
        case FailureKind::NonExistentConceptId: return OutcomeClass::NonExistentConceptId;
        case FailureKind::ConceptIdNameMismatch: return OutcomeClass::ConceptIdNameMismatch;
    }
    return OutcomeClass::NoMappingFound;
}

std::string_view to_string(OutcomeClass c) {
    switch (c) {
        case OutcomeClass::Success: return "success";
        case OutcomeClass::NoMappingFound: return "no_mapping_found";
        case OutcomeClass::NonExistentConceptId: return "non_existent_id";
        case OutcomeClass::ConceptIdNameMismatch: return "name_mismatch";
    }
    return "no_mapping_found";
}

std::optional<OutcomeClass> outcome_class_from_string(std::string_view s) {
    for (const auto c : {OutcomeClass::Success, OutcomeClass::NoMappingFound,
                         OutcomeClass::NonExistentConceptId, OutcomeClass::ConceptIdNameMismatch}) {
        if (to_string(c) == s) return c;
    }
    return std::nullopt;
}

VerifyOutcome verify_mapping(const MappingResult& result, VocabularyStore& store,
                             const std::string& term) {
    if (result.concept_id < 1) {
        return RetrievalFailure{FailureKind::NonExistentConceptId, term,
                                "concept_id " + std::to_string(result.concept_id) +
                                    " is not a valid OMOP identifier"};
    }
    const auto found = store.get_concept(result.concept_id);
    if (!found) {
        return RetrievalFailure{FailureKind::NonExistentConceptId, term,
                                "concept_id " + std::to_string(result.concept_id) +
                                    " does not exist in the vocabulary"};
    }
    if (normalize_name(result.concept_name) != normalize_name(found->concept_name)) {
        return RetrievalFailure{FailureKind::ConceptIdNameMismatch, term,
                                "concept_id " + std::to_string(result.concept_id) + " is \"" +
                                    found->concept_name + "\", not \"" + result.concept_name +
                                    "\""};
    }
    return VerifiedMapping{result, *found, std::chrono::system_clock::now()};
}

OutcomeClass classify_outcome(const TermOutcome& outcome) {
    struct Visitor {
        OutcomeClass operator()(const VerifiedMapping&) const { return OutcomeClass::Success; }
        OutcomeClass operator()(const NoAnswer&) const { return OutcomeClass::NoMappingFound; }
        OutcomeClass operator()(const RetrievalFailure& f) const {
            return to_outcome_class(f.kind);
        }
    };
    return std::visit(Visitor{}, outcome);
}

}  // namespace omop_mcp
