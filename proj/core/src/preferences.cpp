#include "omop_mcp/preferences.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <limits>
#include <sstream>
#include <tuple>

namespace omop_mcp {

namespace {

struct Alias {
    std::string_view text;  // lower case
    std::string_view vocabulary_id;
};

// Longest aliases first so "rxnorm extension" wins over "rxnorm".
constexpr std::array kAliases{
    Alias{"rxnorm extension", "RxNorm Extension"},
    Alias{"icd-10-pcs", "ICD10PCS"},
    Alias{"icd-9-proc", "ICD9Proc"},
    Alias{"icd-10-cm", "ICD10CM"},
    Alias{"icd-9-cm", "ICD9CM"},
    Alias{"snomed ct", "SNOMED"},
    Alias{"icd10pcs", "ICD10PCS"},
    Alias{"icd9proc", "ICD9Proc"},
    Alias{"icd10cm", "ICD10CM"},
    Alias{"icd-10", "ICD10CM"},
    Alias{"icd9cm", "ICD9CM"},
    Alias{"snomed", "SNOMED"},
    Alias{"rxnorm", "RxNorm"},
    Alias{"meddra", "MedDRA"},
    Alias{"icd10", "ICD10CM"},
    Alias{"icd-9", "ICD9CM"},
    Alias{"loinc", "LOINC"},
    Alias{"hcpcs", "HCPCS"},
    Alias{"cpt-4", "CPT4"},
    Alias{"icd9", "ICD9CM"},
    Alias{"cpt4", "CPT4"},
    Alias{"ucum", "UCUM"},
    Alias{"cpt", "CPT4"},
    Alias{"ndc", "NDC"},
    Alias{"atc", "ATC"},
    Alias{"cvx", "CVX"},
};

bool is_word_char(char ch) {
    const auto u = static_cast<unsigned char>(ch);
    return u >= 0x80 || std::isalnum(u);
}

bool contains_any(const std::string& haystack, std::initializer_list<std::string_view> needles) {
    return std::any_of(needles.begin(), needles.end(), [&](std::string_view n) {
        return haystack.find(n) != std::string::npos;
    });
}

const std::vector<std::string>* defaults_for(
    const std::map<std::string, std::vector<std::string>>& defaults, const std::string& domain) {
    const auto key = normalize_name(domain);
    for (const auto& [name, vocabs] : defaults) {
        if (normalize_name(name) == key) return &vocabs;
    }
    return nullptr;
}

}  // namespace

std::map<std::string, std::vector<std::string>> default_domain_vocabularies() {
    return {
        {"Condition", {"SNOMED"}},
        {"Drug", {"RxNorm", "RxNorm Extension"}},
        {"Measurement", {"LOINC"}},
        {"Procedure", {"SNOMED", "CPT4"}},
    };
}

std::vector<std::string> PreferenceProfile::vocabulary_order(const std::string& domain) const {
    std::vector<std::string> order = override_vocabularies;
    const auto& effective = target_domain ? *target_domain : domain;
    if (const auto* defaults = defaults_for(domain_vocab_defaults, effective)) {
        for (const auto& v : *defaults) {
            if (std::find(order.begin(), order.end(), v) == order.end()) order.push_back(v);
        }
    }
    return order;
}

std::vector<std::string> parse_vocabulary_mentions(const std::string& text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::vector<std::string> found;
    std::size_t i = 0;
    while (i < lower.size()) {
        if (i > 0 && is_word_char(lower[i - 1])) {
            ++i;
            continue;
        }
        bool matched = false;
        for (const auto& alias : kAliases) {
            if (lower.compare(i, alias.text.size(), alias.text) != 0) continue;
            const auto end = i + alias.text.size();
            if (end < lower.size() && is_word_char(lower[end])) continue;
            const std::string id(alias.vocabulary_id);
            if (std::find(found.begin(), found.end(), id) == found.end()) found.push_back(id);
            i = end;
            matched = true;
            break;
        }
        if (!matched) ++i;
    }
    return found;
}

PreferenceProfile resolve_profile(const std::optional<std::string>& target_domain,
                                  const std::optional<std::string>& override_text,
                                  const PreferenceProfile& base) {
    PreferenceProfile profile = base;
    profile.target_domain = target_domain;
    profile.user_override.reset();
    profile.override_vocabularies.clear();
    if (override_text && !normalize_name(*override_text).empty()) {
        profile.user_override = *override_text;
        profile.override_vocabularies = parse_vocabulary_mentions(*override_text);
        const auto lowered = normalize_name(*override_text);
        if (contains_any(lowered, {"non-standard", "nonstandard", "non standard"})) {
            profile.prefer_standard = false;
        }
        if (contains_any(lowered, {"allow invalid", "include invalid", "invalid concepts are ok",
                                   "invalid concepts are fine"})) {
            profile.prefer_valid = false;
        }
    }
    return profile;
}

std::vector<Concept> rank_candidates(const std::vector<Concept>& candidates,
                                     const PreferenceProfile& profile, const std::string& query) {
    const auto q = normalize_name(query);
    constexpr auto kUnlisted = std::numeric_limits<std::size_t>::max();

    using Key = std::tuple<int, int, std::size_t, int, ConceptId>;
    auto key_of = [&](const Concept& c) -> Key {
        const int standard =
            profile.prefer_standard && c.standard != StandardFlag::Standard ? 1 : 0;
        const int valid = profile.prefer_valid && c.validity != Validity::Valid ? 1 : 0;
        std::size_t vocab_rank = kUnlisted;
        const auto order = profile.vocabulary_order(c.domain_id);
        const auto vocab = normalize_name(c.vocabulary_id);
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (normalize_name(order[i]) == vocab) {
                vocab_rank = i;
                break;
            }
        }
        const int exact = normalize_name(c.concept_name) == q ? 0 : 1;
        return {standard, valid, vocab_rank, exact, c.concept_id};
    };

    std::vector<std::pair<Key, Concept>> keyed;
    keyed.reserve(candidates.size());
    for (const auto& c : candidates) keyed.emplace_back(key_of(c), c);
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    std::vector<Concept> out;
    out.reserve(keyed.size());
    for (auto& [key, c] : keyed) out.push_back(std::move(c));
    return out;
}

std::optional<std::string> domain_for_table(std::string_view table_or_field) {
    static constexpr std::array<std::pair<std::string_view, std::string_view>, 8> kPrefixes{{
        {"condition", "Condition"},
        {"drug", "Drug"},
        {"measurement", "Measurement"},
        {"procedure", "Procedure"},
        {"observation", "Observation"},
        {"device", "Device"},
        {"visit", "Visit"},
        {"specimen", "Specimen"},
    }};
    const auto t = normalize_name(table_or_field);
    for (const auto& [prefix, domain] : kPrefixes) {
        if (t.rfind(prefix, 0) == 0) return std::string(domain);
    }
    return std::nullopt;
}

std::string render_preferences(const PreferenceProfile& profile) {
    std::ostringstream os;
    if (profile.prefer_standard) {
        os << "- Prefer Standard concepts over non-standard or classification concepts.\n";
    } else {
        os << "- Non-standard concepts are acceptable for this request.\n";
    }
    if (profile.prefer_valid) {
        os << "- Prefer valid concepts; avoid concepts with an invalid reason.\n";
    } else {
        os << "- Invalid (deprecated) concepts are acceptable for this request.\n";
    }
    os << "- Preferred vocabularies by domain:\n";
    for (const auto& [domain, vocabs] : profile.domain_vocab_defaults) {
        os << "  - " << domain << ": ";
        for (std::size_t i = 0; i < vocabs.size(); ++i) os << (i ? ", " : "") << vocabs[i];
        os << '\n';
    }
    if (profile.target_domain) os << "- Target domain: " << *profile.target_domain << '\n';
    if (profile.user_override) {
        os << "- User instruction (takes precedence over the defaults above): "
           << *profile.user_override << '\n';
        if (!profile.override_vocabularies.empty()) {
            os << "- Vocabularies requested by the user, in priority order: ";
            for (std::size_t i = 0; i < profile.override_vocabularies.size(); ++i) {
                os << (i ? ", " : "") << profile.override_vocabularies[i];
            }
            os << '\n';
        }
    }
    return os.str();
}

json to_json(const PreferenceProfile& profile) {
    return json{{"prefer_standard", profile.prefer_standard},
                {"prefer_valid", profile.prefer_valid},
                {"domain_vocab_defaults", profile.domain_vocab_defaults}};
}

PreferenceProfile profile_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("preference config must be a JSON object");
    PreferenceProfile p;
    if (const auto it = j.find("prefer_standard"); it != j.end()) {
        if (!it->is_boolean()) throw std::invalid_argument("prefer_standard must be a boolean");
        p.prefer_standard = it->get<bool>();
    }
    if (const auto it = j.find("prefer_valid"); it != j.end()) {
        if (!it->is_boolean()) throw std::invalid_argument("prefer_valid must be a boolean");
        p.prefer_valid = it->get<bool>();
    }
    if (const auto it = j.find("domain_vocab_defaults"); it != j.end()) {
        if (!it->is_object()) {
            throw std::invalid_argument("domain_vocab_defaults must be an object");
        }
        for (const auto& [domain, list] : it->items()) {
            if (!list.is_array() ||
                !std::all_of(list.begin(), list.end(), [](const json& v) { return v.is_string(); })) {
                throw std::invalid_argument("domain_vocab_defaults." + domain +
                                            " must be a list of vocabulary ids");
            }
            p.domain_vocab_defaults[domain] = list.get<std::vector<std::string>>();
        }
    }
    return p;
}

PreferenceProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open preference config " + path);
    const auto j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw std::invalid_argument("preference config is not valid JSON");
    return profile_from_json(j);
}

}  // namespace omop_mcp
