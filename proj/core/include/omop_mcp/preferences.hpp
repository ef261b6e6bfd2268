#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omop_mcp/vocabulary.hpp"

namespace omop_mcp {

std::map<std::string, std::vector<std::string>> default_domain_vocabularies();

/// Vocabulary preferences applied when ordering candidates. Defaults follow
/// OMOP conventions; a runtime instruction can override them.
struct PreferenceProfile {
    bool prefer_standard = true;
    bool prefer_valid = true;
    std::map<std::string, std::vector<std::string>> domain_vocab_defaults =
        default_domain_vocabularies();
    std::optional<std::string> target_domain;
    /// Verbatim runtime instruction, e.g. "favor LOINC codes for lab results".
    std::optional<std::string> user_override;
    /// Vocabulary ids recognised in user_override, in order of mention.
    std::vector<std::string> override_vocabularies;

    /// Effective order for a candidate in `domain`: overrides first, then
    /// the domain defaults.
    std::vector<std::string> vocabulary_order(const std::string& domain) const;

    bool operator==(const PreferenceProfile&) const = default;
};

/// Known vocabulary ids recognised in overrides, with common aliases
/// ("CPT" -> "CPT4", "ICD-9" -> "ICD9CM").
std::vector<std::string> parse_vocabulary_mentions(const std::string& text);

PreferenceProfile resolve_profile(const std::optional<std::string>& target_domain,
                                  const std::optional<std::string>& override_text,
                                  const PreferenceProfile& base = {});

/// Stable pre-ranking presented to the selection step: standard, valid,
/// preferred vocabulary, exact name match, then ascending concept_id.
std::vector<Concept> rank_candidates(const std::vector<Concept>& candidates,
                                     const PreferenceProfile& profile, const std::string& query);

/// OMOP domain written by a CDM table or concept field, e.g.
/// "measurement" or "condition_concept_id".
std::optional<std::string> domain_for_table(std::string_view table_or_field);

/// Human-readable preference rules for prompts and MCP resources.
std::string render_preferences(const PreferenceProfile& profile);

/// Config file keys: prefer_standard, prefer_valid, domain_vocab_defaults.
json to_json(const PreferenceProfile& profile);
PreferenceProfile profile_from_json(const json& j);
PreferenceProfile load_profile(const std::string& path);

}  // namespace omop_mcp
