#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace omop_mcp {

using json = nlohmann::json;
using ConceptId = std::int64_t;

inline constexpr std::string_view kDefaultAthenaWebBase = "https://athena.ohdsi.org";

enum class StandardFlag { Standard, NonStandard, Classification };
enum class Validity { Valid, Invalid };

/// One OMOP vocabulary entry.
struct Concept {
    ConceptId concept_id = 0;
    std::string concept_name;
    std::string domain_id;
    std::string vocabulary_id;
    std::string concept_class;
    StandardFlag standard = StandardFlag::NonStandard;
    Validity validity = Validity::Valid;

    bool operator==(const Concept&) const = default;
};

/// Structured answer produced by the selection step, before verification.
///
/// Field names on the wire are fixed: concept_id, concept_name, domain_id,
/// class, validity, domain, vocabulary, concept_url, reasoning,
/// inferred_keyword.
struct MappingResult {
    ConceptId concept_id = 0;
    std::string concept_name;
    std::string domain_id;
    std::string concept_class;
    std::string validity;
    std::string domain;
    std::string vocabulary;
    std::string concept_url;
    std::string reasoning;
    std::string inferred_keyword;

    bool operator==(const MappingResult&) const = default;
};

struct CandidateSet {
    std::string query;
    std::vector<Concept> candidates;
    std::size_t total_available = 0;
    int page = 1;
    int page_size = 20;

    bool operator==(const CandidateSet&) const = default;
};

enum class FailureKind { NoMappingFound, NonExistentConceptId, ConceptIdNameMismatch };

class InvalidId : public std::invalid_argument {
public:
    explicit InvalidId(ConceptId id);
    ConceptId id() const noexcept { return id_; }

private:
    ConceptId id_;
};

class ParseError : public std::runtime_error {
public:
    enum class Kind { MissingField, MalformedJson, NonIntegerConceptId };

    ParseError(Kind kind, std::string field, const std::string& message);

    Kind kind() const noexcept { return kind_; }
    /// Offending field name; empty for MalformedJson.
    const std::string& field() const noexcept { return field_; }

private:
    Kind kind_;
    std::string field_;
};

// Enum <-> text. The short codes are the fixture-file encoding.
std::string_view to_string(StandardFlag s);
std::string_view to_string(Validity v);
std::string_view to_string(FailureKind k);
std::string_view to_code(StandardFlag s);  // "S" | "N" | "C"
std::string_view to_code(Validity v);      // "V" | "I"
std::optional<StandardFlag> standard_from_code(std::string_view code);
std::optional<Validity> validity_from_code(std::string_view code);

/// Case-folds, trims, and collapses internal whitespace runs to one space.
std::string normalize_name(std::string_view name);

std::string concept_url(ConceptId concept_id,
                        std::string_view athena_web_base = kDefaultAthenaWebBase);

/// Builds the exact MappingResult a faithful model would emit for `c`.
MappingResult mapping_from_concept(const Concept& c, std::string reasoning,
                                   std::string inferred_keyword = {},
                                   std::string_view athena_web_base = kDefaultAthenaWebBase);

json to_json(const MappingResult& m);
std::string serialize(const MappingResult& m);

/// Parses the model's final message. Accepts bare JSON, JSON inside a fenced
/// code block, or a JSON object embedded in prose. Unknown fields are ignored.
MappingResult parse_mapping_output(std::string_view raw);

json to_json(const Concept& c);      // fixture-line encoding
Concept concept_from_json(const json& j);

void validate(const Concept& c);

}  // namespace omop_mcp
