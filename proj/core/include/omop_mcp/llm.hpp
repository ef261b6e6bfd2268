#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "omop_mcp/vocabulary.hpp"

namespace omop_mcp {

/// Tool offered to the model; the MCP server advertises the same descriptors.
struct ToolDescriptor {
    std::string name;
    std::string description;
    json input_schema;
};

enum class Role { System, User, Assistant, Tool };
std::string_view to_string(Role r);

struct ToolCall {
    std::string id;
    std::string name;
    json arguments = json::object();
};

struct ChatMessage {
    Role role = Role::User;
    std::string content;
    std::optional<ToolCall> tool_call;  // assistant turns that invoked a tool
    std::string tool_call_id;           // tool turns
};

struct LlmReply {
    std::string text;
    std::optional<ToolCall> tool_call;
};

class LlmUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised by ScriptedMock when a prompt has no matching scripted step.
class MockMismatch : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Chat model boundary. Implementations must tolerate concurrent send().
class LlmPort {
public:
    virtual ~LlmPort() = default;
    virtual LlmReply send(const std::vector<ChatMessage>& messages,
                          const std::vector<ToolDescriptor>& tools) = 0;
};

/// Deterministic scripted model.
///
/// Each step answers the first prompt whose latest message contains
/// `expect_substring`. Steps are consumed in transcript order among those
/// that match, so interleaved concurrent conversations get the same answers
/// as a sequential run as long as each conversation's prompts are
/// distinguishable. A prompt with no unconsumed matching step throws
/// MockMismatch.
class ScriptedMock final : public LlmPort {
public:
    struct Step {
        std::string expect_substring;
        LlmReply respond;
    };

    explicit ScriptedMock(std::vector<Step> steps);
    ScriptedMock(ScriptedMock&& other) noexcept;
    ScriptedMock& operator=(ScriptedMock&&) = delete;

    /// Transcript format: [{"expect_substring": "...", "respond": "text" |
    /// {"tool_call": {"name": "...", "arguments": {...}}}}, ...]
    static ScriptedMock from_json(const json& transcript);
    static ScriptedMock load(const std::filesystem::path& path);

    LlmReply send(const std::vector<ChatMessage>& messages,
                  const std::vector<ToolDescriptor>& tools) override;

    std::size_t remaining() const;
    std::size_t calls() const;

private:
    std::vector<Step> steps_;
    std::vector<bool> consumed_;
    std::size_t calls_ = 0;
    mutable std::mutex mu_;
};

json to_json(const ScriptedMock::Step& step);

struct ChatEndpointConfig {
    std::string base_url;  // e.g. https://api.openai.com/v1
    std::string api_key;
    std::string model;
    double temperature = 0.0;
    int attempts = 3;
    int timeout_seconds = 120;

    /// Reads LLM_API_BASE, LLM_API_KEY, LLM_MODEL.
    static ChatEndpointConfig from_env();
};

/// OpenAI-style chat-completions client with function calling.
class ChatCompletionsClient final : public LlmPort {
public:
    explicit ChatCompletionsClient(ChatEndpointConfig config);

    LlmReply send(const std::vector<ChatMessage>& messages,
                  const std::vector<ToolDescriptor>& tools) override;

    static json request_body(const ChatEndpointConfig& config,
                             const std::vector<ChatMessage>& messages,
                             const std::vector<ToolDescriptor>& tools);
    static LlmReply parse_response(const json& body);

private:
    ChatEndpointConfig config_;
};

}  // namespace omop_mcp
