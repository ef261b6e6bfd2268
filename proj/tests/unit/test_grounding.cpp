#include <doctest.h>

#include <random>

#include "omop_mcp/grounding.hpp"
#include "test_support.hpp"

using namespace omop_mcp;
namespace t = omop_mcp::testing;

namespace {

MappingResult answer(ConceptId id, std::string name) {
    MappingResult m;
    m.concept_id = id;
    m.concept_name = std::move(name);
    m.reasoning = "test";
    return m;
}

/// Backend whose lookups always fail, standing in for an unreachable service.
class DownBackend final : public VocabularyBackend {
public:
    CandidateSet search(const std::string&, const SearchFilters&) override {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable, "down");
    }
    std::optional<Concept> get(ConceptId) override {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable, "down");
    }
    bool is_remote() const override { return false; }
};

}  // namespace

TEST_CASE("verify_mapping accepts the chest pain pair") {
    auto store = t::chest_pain_store();
    const auto outcome = verify_mapping(answer(77670, "Chest pain"), store, "CP");
    REQUIRE(std::holds_alternative<VerifiedMapping>(outcome));
    const auto& v = std::get<VerifiedMapping>(outcome);
    CHECK(v.authenticated_concept.concept_id == 77670);
    CHECK(v.result.concept_name == "Chest pain");
    CHECK(v.verified_at.time_since_epoch().count() != 0);
    CHECK(std::holds_alternative<VerifiedMapping>(
        verify_mapping(answer(77670, "  CHEST  pain\n"), store)));
}

TEST_CASE("verify_mapping failure kinds") {
    auto store = t::chest_pain_store();
    const auto absent = verify_mapping(answer(424242424, "Chest pain"), store, "CP");
    REQUIRE(std::holds_alternative<RetrievalFailure>(absent));
    CHECK(std::get<RetrievalFailure>(absent).kind == FailureKind::NonExistentConceptId);
    CHECK(std::get<RetrievalFailure>(absent).term == "CP");

    const auto mismatch = verify_mapping(answer(77670, "Myocardial infarction"), store, "CP");
    REQUIRE(std::holds_alternative<RetrievalFailure>(mismatch));
    const auto& f = std::get<RetrievalFailure>(mismatch);
    CHECK(f.kind == FailureKind::ConceptIdNameMismatch);
    CHECK(f.detail.find("Myocardial infarction") != std::string::npos);
    CHECK(f.detail.find("Chest pain") != std::string::npos);

    // Ids below 1 cannot exist.
    const auto zero = verify_mapping(answer(0, "Chest pain"), store);
    REQUIRE(std::holds_alternative<RetrievalFailure>(zero));
    CHECK(std::get<RetrievalFailure>(zero).kind == FailureKind::NonExistentConceptId);
}

TEST_CASE("verify_mapping never mutates its input") {
    auto store = t::chest_pain_store();
    const auto in = answer(77670, " chest PAIN ");
    const auto copy = in;
    const auto outcome = verify_mapping(in, store);
    CHECK(in == copy);
    CHECK(std::get<VerifiedMapping>(outcome).result == copy);
}

TEST_CASE("lookup failures propagate") {
    VocabularyStore store(std::make_shared<DownBackend>());
    CHECK_THROWS_AS(verify_mapping(answer(77670, "Chest pain"), store), GatewayError);
}

TEST_CASE("no false rejections across a synthetic vocabulary") {
    const auto concepts = t::synthetic_concepts(500);
    auto store = t::store_of(concepts);
    for (const auto& c : concepts) {
        CHECK(std::holds_alternative<VerifiedMapping>(
            verify_mapping(mapping_from_concept(c, "exact"), store)));
    }
}

TEST_CASE("classify_outcome is total") {
    auto store = t::chest_pain_store();
    const auto ok = verify_mapping(answer(77670, "Chest pain"), store);
    CHECK(classify_outcome(std::get<VerifiedMapping>(ok)) == OutcomeClass::Success);
    CHECK(classify_outcome(NoAnswer{"x"}) == OutcomeClass::NoMappingFound);
    CHECK(classify_outcome(RetrievalFailure{FailureKind::ConceptIdNameMismatch, "x", ""}) ==
          OutcomeClass::ConceptIdNameMismatch);
    CHECK(classify_outcome(RetrievalFailure{FailureKind::NonExistentConceptId, "x", ""}) ==
          OutcomeClass::NonExistentConceptId);
    CHECK(classify_outcome(RetrievalFailure{FailureKind::NoMappingFound, "x", ""}) ==
          OutcomeClass::NoMappingFound);
}

TEST_CASE("outcome class strings round trip") {
    for (const auto c : {OutcomeClass::Success, OutcomeClass::NoMappingFound,
                         OutcomeClass::NonExistentConceptId, OutcomeClass::ConceptIdNameMismatch}) {
        CHECK(outcome_class_from_string(to_string(c)) == c);
    }
    CHECK(to_string(OutcomeClass::NonExistentConceptId) == "non_existent_id");
    CHECK(to_string(OutcomeClass::ConceptIdNameMismatch) == "name_mismatch");
    CHECK_FALSE(outcome_class_from_string("maybe").has_value());
}

TEST_CASE("random corruptions are rejected with the right kind") {
    const auto concepts = t::synthetic_concepts(300, 99);
    auto store = t::store_of(concepts);
    std::mt19937 rng(5);
    for (int i = 0; i < 600; ++i) {
        const auto& c = concepts[rng() % concepts.size()];
        auto m = mapping_from_concept(c, "fuzz");
        if (i % 2 == 0) {
            m.concept_id = 900000000 + static_cast<ConceptId>(rng() % 1000000);
            const auto out = verify_mapping(m, store);
            REQUIRE(std::holds_alternative<RetrievalFailure>(out));
            CHECK(std::get<RetrievalFailure>(out).kind == FailureKind::NonExistentConceptId);
        } else {
            m.concept_name += i % 3 ? "s" : " extra";
            const auto out = verify_mapping(m, store);
            REQUIRE(std::holds_alternative<RetrievalFailure>(out));
            CHECK(std::get<RetrievalFailure>(out).kind == FailureKind::ConceptIdNameMismatch);
        }
    }
}
