#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "omop_mcp/athena.hpp"
#include "omop_mcp/llm.hpp"
#include "omop_mcp/preferences.hpp"

namespace omop_mcp {

struct ResourceDescriptor {
    std::string uri;
    std::string name;
    std::string mime_type;
    std::string content;
};

/// Standard JSON-RPC 2.0 error codes plus the MCP resource-not-found code.
namespace rpc_error {
inline constexpr int kParseError = -32700;
inline constexpr int kInvalidRequest = -32600;
inline constexpr int kMethodNotFound = -32601;
inline constexpr int kInvalidParams = -32602;
inline constexpr int kInternalError = -32603;
inline constexpr int kResourceNotFound = -32002;
}  // namespace rpc_error

/// Bad arguments or an unknown tool name.
class ToolArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ToolResult {
    std::string text;
    bool is_error = false;
    /// Concepts carried by the result, in payload order.
    std::vector<Concept> concepts;
};

/// search_athena and get_concept_details over one store. Shared by the MCP
/// server and the in-process agent loop.
class VocabularyTools {
public:
    explicit VocabularyTools(VocabularyStore& store) : store_(store) {}

    static std::vector<ToolDescriptor> descriptors();

    /// Throws ToolArgumentError for unknown tools or invalid arguments.
    /// Upstream failures come back as is_error results.
    ToolResult call(const std::string& name, const json& arguments);

private:
    VocabularyStore& store_;
};

/// Compact candidate rows (id, name, domain, vocabulary, class, standard, validity).
json candidate_rows(const std::vector<Concept>& concepts);

/// omop://tables, omop://vocabulary-preferences, omop://best-practices.
std::vector<ResourceDescriptor> register_default_resources(const PreferenceProfile& profile = {});

struct ServerInfo {
    std::string name = "omop-mcp";
    std::string version = "1.0.0";
};

inline constexpr std::string_view kProtocolVersion = "2025-06-18";

/// MCP over newline-delimited JSON-RPC 2.0. Requests are handled in order.
class McpServer {
public:
    McpServer(VocabularyStore& store, std::vector<ResourceDescriptor> resources,
              ServerInfo info = {});

    /// Handles one frame. Returns the serialized response, or nullopt for
    /// notifications and blank lines.
    std::optional<std::string> handle_line(std::string_view line);

    /// Same as handle_line on a parsed message.
    std::optional<json> handle_message(const json& message);

    /// Reads frames until EOF. Returns false if the output stream failed.
    bool serve(std::istream& in, std::ostream& out);

    bool initialized() const noexcept { return initialized_; }

private:
    json dispatch(const std::string& method, const json& params);

    VocabularyTools tools_;
    std::vector<ResourceDescriptor> resources_;
    ServerInfo info_;
    bool initialized_ = false;
};

/// Replaces timing-like fields ("elapsed*", "*_at", "timestamp") with a
/// fixed marker so transcripts can be compared against golden files.
json mask_timing_fields(json j);

}  // namespace omop_mcp
