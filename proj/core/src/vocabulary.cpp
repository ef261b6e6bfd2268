#include "omop_mcp/vocabulary.hpp"

#include <array>
#include <charconv>

namespace omop_mcp {

namespace {

// ---------------------------------------------------------------------------
// UTF-8 helpers
// ---------------------------------------------------------------------------

constexpr char32_t kInvalid = 0xFFFFFFFF;

// Decodes one code point starting at `i`; advances `i`. Malformed sequences
// yield kInvalid and consume one byte so the raw byte can be copied through.
char32_t decode_utf8(std::string_view s, std::size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) {
        ++i;
        return b0;
    }
    int len = 0;
    char32_t cp = 0;
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        ++i;
        return kInvalid;
    }
    if (i + len > s.size()) {
        ++i;
        return kInvalid;
    }
    for (int k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) {
            ++i;
            return kInvalid;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    i += len;
    return cp;
}

void encode_utf8(char32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

bool is_space(char32_t cp) {
    switch (cp) {
        case ' ': case '\t': case '\n': case '\v': case '\f': case '\r':
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

// Case folding for Latin, Greek and Cyrillic. Multi-character folds (sharp s)
// are written directly by the caller.
char32_t fold(char32_t cp) {
    if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
    if (cp < 0x80) return cp;
    if (cp == 0xB5) return 0x3BC;
    if ((cp >= 0xC0 && cp <= 0xDE) && cp != 0xD7) return cp + 0x20;
    if (cp >= 0x100 && cp <= 0x17F) {
        if (cp == 0x130) return 'i';
        if (cp == 0x178) return 0xFF;
        if (cp == 0x17F) return 's';
        const bool even_upper = (cp <= 0x12F) || (cp >= 0x132 && cp <= 0x137) ||
                                (cp >= 0x14A && cp <= 0x177);
        const bool odd_upper = (cp >= 0x139 && cp <= 0x148) || (cp >= 0x179 && cp <= 0x17E);
        if (even_upper && cp % 2 == 0) return cp + 1;
        if (odd_upper && cp % 2 == 1) return cp + 1;
        return cp;
    }
    if (cp == 0x386) return 0x3AC;
    if (cp >= 0x388 && cp <= 0x38A) return cp + 37;
    if (cp == 0x38C) return 0x3CC;
    if (cp == 0x38E || cp == 0x38F) return cp + 63;
    if ((cp >= 0x391 && cp <= 0x3A1) || (cp >= 0x3A3 && cp <= 0x3AB)) return cp + 0x20;
    if (cp == 0x3C2) return 0x3C3;
    if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;
    if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;
    if (((cp >= 0x460 && cp <= 0x481) || (cp >= 0x48A && cp <= 0x4BF)) && cp % 2 == 0)
        return cp + 1;
    return cp;
}

std::string trim_copy(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

// Pulls the JSON payload out of a chat reply: fenced block first, then the
// outermost brace pair, then the whole text.
std::optional<json> extract_json_object(std::string_view raw) {
    std::vector<std::string> attempts;
    const auto fence = raw.find("```");
    if (fence != std::string_view::npos) {
        auto body_start = raw.find('\n', fence);
        if (body_start != std::string_view::npos) {
            ++body_start;
            const auto close = raw.find("```", body_start);
            const auto body = raw.substr(body_start, close == std::string_view::npos
                                                         ? std::string_view::npos
                                                         : close - body_start);
            attempts.emplace_back(body);
        }
    }
    attempts.emplace_back(raw);
    const auto open = raw.find('{');
    const auto last = raw.rfind('}');
    if (open != std::string_view::npos && last != std::string_view::npos && last > open) {
        attempts.emplace_back(raw.substr(open, last - open + 1));
    }
    for (const auto& text : attempts) {
        auto parsed = json::parse(text, nullptr, /*allow_exceptions=*/false);
        if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    }
    return std::nullopt;
}

std::optional<ConceptId> integer_id(const json& v) {
    if (v.is_number_integer()) return v.get<ConceptId>();
    if (v.is_string()) {
        const auto s = trim_copy(v.get_ref<const std::string&>());
        ConceptId id = 0;
        const auto* first = s.data();
        const auto* last = s.data() + s.size();
        auto [ptr, ec] = std::from_chars(first, last, id);
        if (ec == std::errc{} && ptr == last && !s.empty()) return id;
    }
    return std::nullopt;
}

std::string required_text(const json& obj, const char* field) {
    const auto it = obj.find(field);
    if (it == obj.end() || it->is_null()) {
        throw ParseError(ParseError::Kind::MissingField, field,
                         std::string("missing field \"") + field + "\"");
    }
    if (it->is_string()) return it->get<std::string>();
    return it->dump();
}

}  // namespace

InvalidId::InvalidId(ConceptId id)
    : std::invalid_argument("concept_id must be >= 1, got " + std::to_string(id)), id_(id) {}

ParseError::ParseError(Kind kind, std::string field, const std::string& message)
    : std::runtime_error(message), kind_(kind), field_(std::move(field)) {}

std::string_view to_string(StandardFlag s) {
    switch (s) {
        case StandardFlag::Standard: return "Standard";
        case StandardFlag::NonStandard: return "Non-standard";
        case StandardFlag::Classification: return "Classification";
    }
    return "Non-standard";
}

std::string_view to_string(Validity v) { return v == Validity::Valid ? "Valid" : "Invalid"; }

std::string_view to_string(FailureKind k) {
    switch (k) {
        case FailureKind::NoMappingFound: return "no_mapping_found";
        case FailureKind::NonExistentConceptId: return "non_existent_id";
        case FailureKind::ConceptIdNameMismatch: return "name_mismatch";
    }
    return "no_mapping_found";
}

std::string_view to_code(StandardFlag s) {
    switch (s) {
        case StandardFlag::Standard: return "S";
        case StandardFlag::NonStandard: return "N";
        case StandardFlag::Classification: return "C";
    }
    return "N";
}

std::string_view to_code(Validity v) { return v == Validity::Valid ? "V" : "I"; }

std::optional<StandardFlag> standard_from_code(std::string_view code) {
    if (code == "S") return StandardFlag::Standard;
    if (code == "N") return StandardFlag::NonStandard;
    if (code == "C") return StandardFlag::Classification;
    return std::nullopt;
}

std::optional<Validity> validity_from_code(std::string_view code) {
    if (code == "V") return Validity::Valid;
    if (code == "I") return Validity::Invalid;
    return std::nullopt;
}

std::string normalize_name(std::string_view name) {
    std::string out;
    out.reserve(name.size());
    bool pending_space = false;
    std::size_t i = 0;
    while (i < name.size()) {
        const std::size_t start = i;
        const char32_t cp = decode_utf8(name, i);
        if (cp != kInvalid && is_space(cp)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        if (cp == kInvalid) {
            out.append(name.substr(start, i - start));
        } else if (cp == 0xDF || cp == 0x1E9E) {
            out.append("ss");
        } else {
            encode_utf8(fold(cp), out);
        }
    }
    return out;
}

std::string concept_url(ConceptId concept_id, std::string_view athena_web_base) {
    if (concept_id < 1) throw InvalidId(concept_id);
    std::string base(athena_web_base);
    while (!base.empty() && base.back() == '/') base.pop_back();
    return base + "/search-terms/terms/" + std::to_string(concept_id);
}

MappingResult mapping_from_concept(const Concept& c, std::string reasoning,
                                   std::string inferred_keyword,
                                   std::string_view athena_web_base) {
    MappingResult m;
    m.concept_id = c.concept_id;
    m.concept_name = c.concept_name;
    m.domain_id = c.domain_id;
    m.domain = c.domain_id;
    m.concept_class = c.concept_class;
    m.validity = std::string(to_string(c.validity));
    m.vocabulary = c.vocabulary_id;
    m.concept_url = concept_url(c.concept_id, athena_web_base);
    m.reasoning = std::move(reasoning);
    m.inferred_keyword = std::move(inferred_keyword);
    return m;
}

json to_json(const MappingResult& m) {
    return json{{"concept_id", m.concept_id},   {"concept_name", m.concept_name},
                {"domain_id", m.domain_id},     {"class", m.concept_class},
                {"validity", m.validity},       {"domain", m.domain},
                {"vocabulary", m.vocabulary},   {"concept_url", m.concept_url},
                {"reasoning", m.reasoning},     {"inferred_keyword", m.inferred_keyword}};
}

std::string serialize(const MappingResult& m) { return to_json(m).dump(); }

MappingResult parse_mapping_output(std::string_view raw) {
    if (trim_copy(raw).empty()) {
        throw ParseError(ParseError::Kind::MalformedJson, {}, "empty model output");
    }
    const auto obj = extract_json_object(raw);
    if (!obj) {
        throw ParseError(ParseError::Kind::MalformedJson, {}, "no JSON object in model output");
    }

    MappingResult m;
    const auto id_it = obj->find("concept_id");
    if (id_it == obj->end()) {
        throw ParseError(ParseError::Kind::MissingField, "concept_id",
                         "missing field \"concept_id\"");
    }
    const auto id = integer_id(*id_it);
    if (!id || *id < 1) {
        throw ParseError(ParseError::Kind::NonIntegerConceptId, "concept_id",
                         "concept_id must be a positive integer, got " + id_it->dump());
    }
    m.concept_id = *id;
    m.concept_name = required_text(*obj, "concept_name");
    m.domain_id = required_text(*obj, "domain_id");
    m.concept_class = required_text(*obj, "class");
    m.validity = required_text(*obj, "validity");
    m.domain = required_text(*obj, "domain");
    m.vocabulary = required_text(*obj, "vocabulary");
    m.concept_url = required_text(*obj, "concept_url");
    m.reasoning = required_text(*obj, "reasoning");
    if (trim_copy(m.reasoning).empty()) {
        throw ParseError(ParseError::Kind::MissingField, "reasoning", "reasoning is empty");
    }
    if (const auto kw = obj->find("inferred_keyword"); kw != obj->end() && kw->is_string()) {
        m.inferred_keyword = kw->get<std::string>();
    }
    return m;
}

json to_json(const Concept& c) {
    return json{{"concept_id", c.concept_id},       {"concept_name", c.concept_name},
                {"domain_id", c.domain_id},         {"vocabulary_id", c.vocabulary_id},
                {"concept_class", c.concept_class}, {"standard", to_code(c.standard)},
                {"validity", to_code(c.validity)}};
}

Concept concept_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("concept record must be a JSON object");
    auto text = [&](const char* key) -> std::string {
        const auto it = j.find(key);
        if (it == j.end() || !it->is_string()) {
            throw std::invalid_argument(std::string("field \"") + key + "\" must be a string");
        }
        return it->get<std::string>();
    };
    const auto id_it = j.find("concept_id");
    if (id_it == j.end() || !id_it->is_number_integer()) {
        throw std::invalid_argument("field \"concept_id\" must be an integer");
    }
    Concept c;
    c.concept_id = id_it->get<ConceptId>();
    c.concept_name = text("concept_name");
    c.domain_id = text("domain_id");
    c.vocabulary_id = text("vocabulary_id");
    c.concept_class = text("concept_class");
    const auto standard = standard_from_code(text("standard"));
    if (!standard) throw std::invalid_argument("field \"standard\" must be one of S, N, C");
    c.standard = *standard;
    const auto validity = validity_from_code(text("validity"));
    if (!validity) throw std::invalid_argument("field \"validity\" must be one of V, I");
    c.validity = *validity;
    validate(c);
    return c;
}

void validate(const Concept& c) {
    if (c.concept_id < 1) throw InvalidId(c.concept_id);
    if (normalize_name(c.concept_name).empty()) {
        throw std::invalid_argument("concept " + std::to_string(c.concept_id) +
                                    " has an empty concept_name");
    }
}

}  // namespace omop_mcp
