#include "omop_mcp/mcp_server.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <ostream>
#include <set>

namespace omop_mcp {

namespace {

constexpr std::array kSupportedProtocolVersions{"2024-11-05", "2025-03-26", "2025-06-18"};

std::string dump_line(const json& j) {
    return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

json error_response(const json& id, int code, const std::string& message,
                    const json& data = nullptr) {
    json err{{"code", code}, {"message", message}};
    if (!data.is_null()) err["data"] = data;
    return json{{"jsonrpc", "2.0"}, {"id", id}, {"error", std::move(err)}};
}

class RpcError : public std::runtime_error {
public:
    RpcError(int code, const std::string& message, json data = nullptr)
        : std::runtime_error(message), code_(code), data_(std::move(data)) {}
    int code() const noexcept { return code_; }
    const json& data() const noexcept { return data_; }

private:
    int code_;
    json data_;
};

bool valid_id(const json& id) { return id.is_string() || id.is_number() || id.is_null(); }

const json& object_params(const json& params) {
    if (!params.is_object()) throw RpcError(rpc_error::kInvalidParams, "params must be an object");
    return params;
}

std::string tables_resource() {
    return R"(OMOP CDM tables and concept fields by domain

| Domain      | Table                | Concept field            | Source value field       |
|-------------|----------------------|--------------------------|--------------------------|
| Condition   | condition_occurrence | condition_concept_id     | condition_source_value   |
| Drug        | drug_exposure        | drug_concept_id          | drug_source_value        |
| Measurement | measurement          | measurement_concept_id   | measurement_source_value |
| Procedure   | procedure_occurrence | procedure_concept_id     | procedure_source_value   |
| Observation | observation          | observation_concept_id   | observation_source_value |
| Device      | device_exposure      | device_concept_id        | device_source_value      |
| Visit       | visit_occurrence     | visit_concept_id         | visit_source_value       |
| Specimen    | specimen             | specimen_concept_id      | specimen_source_value    |

Other concept fields:
- measurement.unit_concept_id and observation.unit_concept_id take UCUM units (domain Unit).
- measurement.value_as_concept_id takes answers from the Meas Value domain.
- drug_exposure.route_concept_id takes concepts from the Route domain.
- *_type_concept_id fields record provenance (domain Type Concept).
- *_source_concept_id fields may hold non-standard source concepts; *_concept_id fields hold standard concepts.
)";
}

std::string best_practices_resource() {
    return R"(Concept mapping guidance

1. Interpret the source term before searching: expand abbreviations, correct obvious typos and use the target table and field to pick the domain (for example "CP" recorded in condition_occurrence is chest pain).
2. Search with the interpreted keyword. If nothing relevant comes back, try a synonym or the raw source text.
3. Map *_concept_id fields to Standard, valid concepts from the domain that matches the target table.
4. Prefer the most specific concept that does not add information absent from the source term.
5. Report only concept ids returned by the vocabulary tools, and copy concept_name exactly as returned.
6. When no candidate is acceptable, say so instead of guessing.
7. Follow explicit user instructions on vocabularies (for example legacy ICD9CM or CPT4 mapping) even when they differ from the defaults.
)";
}

}  // namespace

// ---------------------------------------------------------------------------
// Tools
// ---------------------------------------------------------------------------

std::vector<ToolDescriptor> VocabularyTools::descriptors() {
    return {
        ToolDescriptor{
            "search_athena",
            "Search the OHDSI Athena vocabulary for concepts matching a keyword. Returns "
            "candidate concepts with id, name, domain, vocabulary, class, standard flag "
            "(S/N/C) and validity (V/I).",
            json::parse(R"({
              "type": "object",
              "properties": {
                "keyword": {"type": "string", "description": "Interpreted medical term to search for"},
                "domain": {"type": "string", "description": "Restrict to one OMOP domain, e.g. Condition"},
                "vocabulary": {
                  "anyOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}],
                  "description": "Restrict to one or more vocabulary ids, e.g. LOINC"
                },
                "standard_only": {"type": "boolean", "description": "Only return Standard concepts"},
                "page_size": {"type": "integer", "minimum": 1, "maximum": 100},
                "page": {"type": "integer", "minimum": 1}
              },
              "required": ["keyword"]
            })")},
        ToolDescriptor{"get_concept_details",
                       "Look up one OMOP concept by concept_id.",
                       json::parse(R"({
              "type": "object",
              "properties": {
                "concept_id": {"type": "integer", "minimum": 1}
              },
              "required": ["concept_id"]
            })")},
    };
}

json candidate_rows(const std::vector<Concept>& concepts) {
    json rows = json::array();
    for (const auto& c : concepts) rows.push_back(to_json(c));
    return rows;
}

ToolResult VocabularyTools::call(const std::string& name, const json& arguments) {
    if (!arguments.is_object()) throw ToolArgumentError("tool arguments must be an object");

    if (name == "search_athena") {
        const auto kw = arguments.find("keyword");
        if (kw == arguments.end() || !kw->is_string() || normalize_name(kw->get<std::string>()).empty()) {
            throw ToolArgumentError("search_athena requires a non-empty string \"keyword\"");
        }
        SearchFilters filters;
        if (const auto it = arguments.find("domain"); it != arguments.end() && !it->is_null()) {
            if (!it->is_string()) throw ToolArgumentError("\"domain\" must be a string");
            filters.domain = it->get<std::string>();
        }
        if (const auto it = arguments.find("vocabulary"); it != arguments.end() && !it->is_null()) {
            if (it->is_string()) {
                filters.vocabulary.push_back(it->get<std::string>());
            } else if (it->is_array() && std::all_of(it->begin(), it->end(),
                                                     [](const json& v) { return v.is_string(); })) {
                filters.vocabulary = it->get<std::vector<std::string>>();
            } else {
                throw ToolArgumentError("\"vocabulary\" must be a string or list of strings");
            }
        }
        if (const auto it = arguments.find("standard_only"); it != arguments.end() && !it->is_null()) {
            if (!it->is_boolean()) throw ToolArgumentError("\"standard_only\" must be a boolean");
            filters.standard_only = it->get<bool>();
        }
        for (const auto& [key, field] : {std::pair{"page_size", &filters.page_size},
                                         std::pair{"page", &filters.page}}) {
            if (const auto it = arguments.find(key); it != arguments.end() && !it->is_null()) {
                if (!it->is_number_integer()) {
                    throw ToolArgumentError(std::string("\"") + key + "\" must be an integer");
                }
                *field = it->get<int>();
            }
        }
        try {
            validate(filters);
        } catch (const GatewayError& e) {
            throw ToolArgumentError(e.what());
        }

        try {
            const auto set = store_.search_concepts(kw->get<std::string>(), filters);
            const json payload{{"query", set.query},
                               {"total_available", set.total_available},
                               {"page", set.page},
                               {"page_size", set.page_size},
                               {"candidates", candidate_rows(set.candidates)}};
            return ToolResult{dump_line(payload), false, set.candidates};
        } catch (const GatewayError& e) {
            if (e.kind() == GatewayError::Kind::InvalidQuery) throw ToolArgumentError(e.what());
            return ToolResult{dump_line(json{{"error", e.what()}}), true, {}};
        }
    }

    if (name == "get_concept_details") {
        const auto it = arguments.find("concept_id");
        if (it == arguments.end() || !it->is_number_integer() || it->get<ConceptId>() < 1) {
            throw ToolArgumentError("get_concept_details requires an integer \"concept_id\" >= 1");
        }
        const auto id = it->get<ConceptId>();
        try {
            const auto found = store_.get_concept(id);
            if (!found) {
                return ToolResult{dump_line(json{{"found", false}, {"concept_id", id}}), true, {}};
            }
            const json payload{{"found", true},
                               {"concept", to_json(*found)},
                               {"concept_url", concept_url(id)}};
            return ToolResult{dump_line(payload), false, {*found}};
        } catch (const GatewayError& e) {
            return ToolResult{dump_line(json{{"error", e.what()}}), true, {}};
        }
    }

    throw ToolArgumentError("unknown tool: " + name);
}

// ---------------------------------------------------------------------------
// Resources
// ---------------------------------------------------------------------------

std::vector<ResourceDescriptor> register_default_resources(const PreferenceProfile& profile) {
    return {
        ResourceDescriptor{"omop://tables", "OMOP CDM table and field reference", "text/markdown",
                           tables_resource()},
        ResourceDescriptor{"omop://vocabulary-preferences", "Vocabulary preferences by domain",
                           "text/markdown",
                           "Vocabulary preferences\n\n" + render_preferences(profile)},
        ResourceDescriptor{"omop://best-practices", "OMOP concept mapping best practices",
                           "text/markdown", best_practices_resource()},
    };
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

McpServer::McpServer(VocabularyStore& store, std::vector<ResourceDescriptor> resources,
                     ServerInfo info)
    : tools_(store), resources_(std::move(resources)), info_(std::move(info)) {
    std::set<std::string> uris;
    for (const auto& r : resources_) {
        if (!uris.insert(r.uri).second) {
            throw std::invalid_argument("duplicate resource uri " + r.uri);
        }
    }
}

std::optional<std::string> McpServer::handle_line(std::string_view line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) return std::nullopt;
    const auto message = json::parse(line, nullptr, false);
    if (message.is_discarded()) {
        return dump_line(error_response(nullptr, rpc_error::kParseError, "Parse error"));
    }
    auto response = handle_message(message);
    if (!response) return std::nullopt;
    return dump_line(*response);
}

std::optional<json> McpServer::handle_message(const json& message) {
    if (!message.is_object()) {
        return error_response(nullptr, rpc_error::kInvalidRequest, "Invalid Request");
    }
    const bool has_id = message.contains("id");
    const json id = has_id ? message.at("id") : json(nullptr);
    if (has_id && !valid_id(id)) {
        return error_response(nullptr, rpc_error::kInvalidRequest, "Invalid Request",
                              "id must be a string, number or null");
    }
    const auto method = message.find("method");
    if (method == message.end()) {
        // A response from the client (to a request we never send) needs no reply.
        if (message.contains("result") || message.contains("error")) return std::nullopt;
        return error_response(id, rpc_error::kInvalidRequest, "Invalid Request",
                              "missing method");
    }
    if (message.value("jsonrpc", json()) != "2.0" || !method->is_string()) {
        if (!has_id) return std::nullopt;
        return error_response(id, rpc_error::kInvalidRequest, "Invalid Request");
    }
    const json params = message.value("params", json::object());
    if (!params.is_object() && !params.is_array()) {
        if (!has_id) return std::nullopt;
        return error_response(id, rpc_error::kInvalidParams, "params must be an object or array");
    }

    const auto& name = method->get_ref<const std::string&>();
    if (!has_id) {
        if (name == "notifications/initialized") initialized_ = true;
        return std::nullopt;
    }
    try {
        // Evaluated before the braced list: GCC 11 leaks already-built list
        // elements when a later initializer throws.
        auto result = dispatch(name, params);
        return json{{"jsonrpc", "2.0"}, {"id", id}, {"result", std::move(result)}};
    } catch (const RpcError& e) {
        return error_response(id, e.code(), e.what(), e.data());
    } catch (const std::exception& e) {
        return error_response(id, rpc_error::kInternalError, "Internal error", e.what());
    }
}

json McpServer::dispatch(const std::string& method, const json& params) {
    if (method == "initialize") {
        const auto& p = object_params(params);
        std::string version(kProtocolVersion);
        if (const auto it = p.find("protocolVersion"); it != p.end() && it->is_string()) {
            const auto requested = it->get<std::string>();
            if (std::find(kSupportedProtocolVersions.begin(), kSupportedProtocolVersions.end(),
                          requested) != kSupportedProtocolVersions.end()) {
                version = requested;
            }
        }
        return json{
            {"protocolVersion", version},
            {"capabilities",
             {{"tools", {{"listChanged", false}}},
              {"resources", {{"subscribe", false}, {"listChanged", false}}}}},
            {"serverInfo", {{"name", info_.name}, {"version", info_.version}}},
            {"instructions",
             "Interpret the source term, call search_athena with the inferred keyword, then "
             "choose one returned concept. Read omop://vocabulary-preferences and "
             "omop://best-practices before selecting."}};
    }
    if (method == "ping") return json::object();

    if (method == "tools/list") {
        json tools = json::array();
        for (const auto& t : VocabularyTools::descriptors()) {
            tools.push_back(
                {{"name", t.name}, {"description", t.description}, {"inputSchema", t.input_schema}});
        }
        return json{{"tools", std::move(tools)}};
    }
    if (method == "tools/call") {
        const auto& p = object_params(params);
        const auto name = p.find("name");
        if (name == p.end() || !name->is_string()) {
            throw RpcError(rpc_error::kInvalidParams, "tools/call requires a string \"name\"");
        }
        const json args = p.value("arguments", json::object());
        try {
            const auto result = tools_.call(name->get<std::string>(), args);
            return json{{"content", json::array({{{"type", "text"}, {"text", result.text}}})},
                        {"isError", result.is_error}};
        } catch (const ToolArgumentError& e) {
            throw RpcError(rpc_error::kInvalidParams, e.what());
        }
    }
    if (method == "resources/list") {
        json list = json::array();
        for (const auto& r : resources_) {
            list.push_back({{"uri", r.uri}, {"name", r.name}, {"mimeType", r.mime_type}});
        }
        return json{{"resources", std::move(list)}};
    }
    if (method == "resources/read") {
        const auto& p = object_params(params);
        const auto uri = p.find("uri");
        if (uri == p.end() || !uri->is_string()) {
            throw RpcError(rpc_error::kInvalidParams, "resources/read requires a string \"uri\"");
        }
        for (const auto& r : resources_) {
            if (r.uri == uri->get_ref<const std::string&>()) {
                return json{{"contents", json::array({{{"uri", r.uri},
                                                       {"mimeType", r.mime_type},
                                                       {"text", r.content}}})}};
            }
        }
        throw RpcError(rpc_error::kResourceNotFound, "Resource not found", json{{"uri", *uri}});
    }
    throw RpcError(rpc_error::kMethodNotFound, "Method not found", json{{"method", method}});
}

bool McpServer::serve(std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (auto response = handle_line(line)) {
            out << *response << '\n';
            out.flush();
            if (!out) return false;
        }
    }
    return true;
}

json mask_timing_fields(json j) {
    if (j.is_object()) {
        for (auto& [key, value] : j.items()) {
            const bool timing = key.rfind("elapsed", 0) == 0 || key == "timestamp" ||
                                (key.size() > 3 && key.compare(key.size() - 3, 3, "_at") == 0);
            value = timing ? json("<masked>") : mask_timing_fields(std::move(value));
        }
    } else if (j.is_array()) {
        for (auto& value : j) value = mask_timing_fields(std::move(value));
    }
    return j;
}

}  // namespace omop_mcp
