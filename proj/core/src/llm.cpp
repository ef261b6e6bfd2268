#include "omop_mcp/llm.hpp"

#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>

namespace omop_mcp {

namespace {

LlmReply reply_from_json(const json& respond) {
    if (respond.is_string()) return LlmReply{respond.get<std::string>(), std::nullopt};
    if (respond.is_object() && respond.contains("tool_call")) {
        const auto& tc = respond.at("tool_call");
        if (!tc.is_object() || !tc.contains("name") || !tc.at("name").is_string()) {
            throw std::invalid_argument("tool_call needs a string \"name\"");
        }
        ToolCall call;
        call.name = tc.at("name").get<std::string>();
        call.id = tc.value("id", "call_" + call.name);
        call.arguments = tc.value("arguments", json::object());
        if (!call.arguments.is_object()) {
            throw std::invalid_argument("tool_call arguments must be an object");
        }
        return LlmReply{respond.value("text", ""), std::move(call)};
    }
    throw std::invalid_argument("respond must be a string or {\"tool_call\": {...}}");
}

std::optional<std::string> env(const char* name) {
    if (const char* v = std::getenv(name); v != nullptr && *v != '\0') return std::string(v);
    return std::nullopt;
}

}  // namespace

std::string_view to_string(Role r) {
    switch (r) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
        case Role::Tool: return "tool";
    }
    return "user";
}

// ---------------------------------------------------------------------------
// ScriptedMock
// ---------------------------------------------------------------------------

ScriptedMock::ScriptedMock(std::vector<Step> steps)
    : steps_(std::move(steps)), consumed_(steps_.size(), false) {}

ScriptedMock::ScriptedMock(ScriptedMock&& other) noexcept {
    std::lock_guard lock(other.mu_);
    steps_ = std::move(other.steps_);
    consumed_ = std::move(other.consumed_);
    calls_ = other.calls_;
}

ScriptedMock ScriptedMock::from_json(const json& transcript) {
    if (!transcript.is_array()) throw std::invalid_argument("mock transcript must be a JSON list");
    std::vector<Step> steps;
    steps.reserve(transcript.size());
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const auto& s = transcript[i];
        try {
            if (!s.is_object() || !s.contains("expect_substring") ||
                !s.at("expect_substring").is_string() || !s.contains("respond")) {
                throw std::invalid_argument("needs \"expect_substring\" and \"respond\"");
            }
            steps.push_back(
                Step{s.at("expect_substring").get<std::string>(), reply_from_json(s.at("respond"))});
        } catch (const std::exception& e) {
            throw std::invalid_argument("mock step " + std::to_string(i) + ": " + e.what());
        }
    }
    return ScriptedMock(std::move(steps));
}

ScriptedMock ScriptedMock::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mock transcript " + path.string());
    const auto j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw std::invalid_argument("mock transcript " + path.string() + " is not valid JSON");
    }
    return from_json(j);
}

LlmReply ScriptedMock::send(const std::vector<ChatMessage>& messages,
                            const std::vector<ToolDescriptor>& /*tools*/) {
    if (messages.empty()) throw MockMismatch("mock received an empty conversation");
    const auto& latest = messages.back().content;
    std::lock_guard lock(mu_);
    ++calls_;
    for (std::size_t i = 0; i < steps_.size(); ++i) {
        if (consumed_[i]) continue;
        if (latest.find(steps_[i].expect_substring) == std::string::npos) continue;
        consumed_[i] = true;
        return steps_[i].respond;
    }
    auto excerpt = latest.substr(0, 200);
    throw MockMismatch("no scripted response matches prompt: " + excerpt);
}

std::size_t ScriptedMock::remaining() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const bool c : consumed_) n += c ? 0 : 1;
    return n;
}

std::size_t ScriptedMock::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

json to_json(const ScriptedMock::Step& step) {
    json respond;
    if (step.respond.tool_call) {
        respond = json{{"tool_call",
                        {{"id", step.respond.tool_call->id},
                         {"name", step.respond.tool_call->name},
                         {"arguments", step.respond.tool_call->arguments}}}};
        if (!step.respond.text.empty()) respond["text"] = step.respond.text;
    } else {
        respond = step.respond.text;
    }
    return json{{"expect_substring", step.expect_substring}, {"respond", respond}};
}

// ---------------------------------------------------------------------------
// Live chat-completions endpoint
// ---------------------------------------------------------------------------

ChatEndpointConfig ChatEndpointConfig::from_env() {
    ChatEndpointConfig cfg;
    cfg.base_url = env("LLM_API_BASE").value_or("https://api.openai.com/v1");
    cfg.api_key = env("LLM_API_KEY").value_or("");
    cfg.model = env("LLM_MODEL").value_or("");
    return cfg;
}

ChatCompletionsClient::ChatCompletionsClient(ChatEndpointConfig config)
    : config_(std::move(config)) {
    while (!config_.base_url.empty() && config_.base_url.back() == '/') config_.base_url.pop_back();
    if (config_.base_url.empty()) throw std::invalid_argument("LLM base URL is empty");
    if (config_.model.empty()) throw std::invalid_argument("LLM model name is empty");
}

json ChatCompletionsClient::request_body(const ChatEndpointConfig& config,
                                         const std::vector<ChatMessage>& messages,
                                         const std::vector<ToolDescriptor>& tools) {
    json msgs = json::array();
    for (const auto& m : messages) {
        json out{{"role", to_string(m.role)}};
        if (m.role == Role::Assistant && m.tool_call) {
            out["content"] = m.content.empty() ? json(nullptr) : json(m.content);
            out["tool_calls"] = json::array({{{"id", m.tool_call->id},
                                              {"type", "function"},
                                              {"function",
                                               {{"name", m.tool_call->name},
                                                {"arguments", m.tool_call->arguments.dump()}}}}});
        } else {
            out["content"] = m.content;
        }
        if (m.role == Role::Tool) out["tool_call_id"] = m.tool_call_id;
        msgs.push_back(std::move(out));
    }
    json body{{"model", config.model}, {"messages", std::move(msgs)},
              {"temperature", config.temperature}};
    if (!tools.empty()) {
        json specs = json::array();
        for (const auto& t : tools) {
            specs.push_back({{"type", "function"},
                             {"function",
                              {{"name", t.name},
                               {"description", t.description},
                               {"parameters", t.input_schema}}}});
        }
        body["tools"] = std::move(specs);
    }
    return body;
}

LlmReply ChatCompletionsClient::parse_response(const json& body) {
    if (!body.is_object() || !body.contains("choices") || !body.at("choices").is_array() ||
        body.at("choices").empty()) {
        throw LlmUnavailable("chat response has no choices");
    }
    const auto& message = body.at("choices").at(0).value("message", json::object());
    LlmReply reply;
    if (const auto it = message.find("content"); it != message.end() && it->is_string()) {
        reply.text = it->get<std::string>();
    }
    if (const auto it = message.find("tool_calls");
        it != message.end() && it->is_array() && !it->empty()) {
        const auto& tc = it->at(0);
        const auto& fn = tc.value("function", json::object());
        ToolCall call;
        call.id = tc.value("id", "");
        call.name = fn.value("name", "");
        const auto raw_args = fn.value("arguments", json("{}"));
        if (raw_args.is_string()) {
            auto parsed = json::parse(raw_args.get<std::string>(), nullptr, false);
            call.arguments = parsed.is_object() ? parsed : json::object();
        } else if (raw_args.is_object()) {
            call.arguments = raw_args;
        }
        reply.tool_call = std::move(call);
    }
    return reply;
}

LlmReply ChatCompletionsClient::send(const std::vector<ChatMessage>& messages,
                                     const std::vector<ToolDescriptor>& tools) {
    std::string origin = config_.base_url;
    std::string prefix;
    if (const auto scheme = origin.find("://"); scheme != std::string::npos) {
        if (const auto slash = origin.find('/', scheme + 3); slash != std::string::npos) {
            prefix = origin.substr(slash);
            origin = origin.substr(0, slash);
        }
    }
    httplib::Client client(origin);
    client.set_connection_timeout(10);
    client.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers{{"Accept", "application/json"}};
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
        headers.emplace("api-key", config_.api_key);
    }
    const auto body = request_body(config_, messages, tools).dump();

    std::string last_error;
    auto backoff = std::chrono::milliseconds(500);
    for (int attempt = 1; attempt <= config_.attempts; ++attempt) {
        auto res = client.Post(prefix + "/chat/completions", headers, body, "application/json");
        if (res && res->status == 200) {
            const auto parsed = json::parse(res->body, nullptr, false);
            if (parsed.is_discarded()) throw LlmUnavailable("chat endpoint returned malformed JSON");
            return parse_response(parsed);
        }
        if (res && res->status < 500 && res->status != 429) {
            throw LlmUnavailable("chat endpoint returned HTTP " + std::to_string(res->status) +
                                 ": " + res->body.substr(0, 300));
        }
        last_error = res ? "HTTP " + std::to_string(res->status)
                         : "transport error: " + httplib::to_string(res.error());
        if (attempt < config_.attempts) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
    }
    throw LlmUnavailable("chat endpoint unavailable after " + std::to_string(config_.attempts) +
                         " attempts (" + last_error + ")");
}

}  // namespace omop_mcp
