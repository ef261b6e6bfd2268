#include <doctest.h>

#include <random>
#include <set>
#include <sstream>

#include "omop_mcp/mcp_server.hpp"
#include "test_support.hpp"

using namespace omop_mcp;
namespace t = omop_mcp::testing;

namespace {

json call(McpServer& server, const json& request) {
    const auto line = server.handle_line(request.dump());
    REQUIRE(line.has_value());
    CHECK(line->find('\n') == std::string::npos);
    return json::parse(*line);
}

json request(int id, const std::string& method, json params = json::object()) {
    return json{{"jsonrpc", "2.0"}, {"id", id}, {"method", method}, {"params", std::move(params)}};
}

int error_code(const json& response) { return response.at("error").at("code").get<int>(); }

}  // namespace

TEST_CASE("initialize advertises tools and resources") {
    auto store = t::chest_pain_store();
    McpServer server(store, register_default_resources());
    const auto r = call(server, request(1, "initialize",
                                        {{"protocolVersion", "2024-11-05"},
                                         {"capabilities", json::object()},
                                         {"clientInfo", {{"name", "test"}, {"version", "0"}}}}));
    CHECK(r.at("jsonrpc") == "2.0");
    CHECK(r.at("id") == 1);
    const auto& res = r.at("result");
    CHECK(res.at("protocolVersion") == "2024-11-05");
    CHECK(res.at("capabilities").contains("tools"));
    CHECK(res.at("capabilities").contains("resources"));
    CHECK(res.at("serverInfo").at("name") == "omop-mcp");

    const auto unknown_version = call(server, request(2, "initialize", {{"protocolVersion", "1999-01-01"}}));
    CHECK(unknown_version.at("result").at("protocolVersion") == std::string(kProtocolVersion));

    CHECK_FALSE(server.initialized());
    CHECK_FALSE(server.handle_line(R"({"jsonrpc":"2.0","method":"notifications/initialized"})"));
    CHECK(server.initialized());
}

TEST_CASE("tools/list and tools/call") {
    auto store = t::chest_pain_store();
    McpServer server(store, register_default_resources());
    const auto list = call(server, request(3, "tools/list"));
    std::set<std::string> names;
    for (const auto& tool : list.at("result").at("tools")) {
        names.insert(tool.at("name").get<std::string>());
        CHECK(tool.at("inputSchema").at("type") == "object");
        CHECK_FALSE(tool.at("description").get<std::string>().empty());
    }
    CHECK(names == std::set<std::string>{"search_athena", "get_concept_details"});

    const auto search = call(server, request(4, "tools/call",
                                             {{"name", "search_athena"},
                                              {"arguments", {{"keyword", "chest pain"}}}}));
    const auto& content = search.at("result").at("content");
    REQUIRE(content.size() == 1);
    CHECK(content[0].at("type") == "text");
    const auto payload = json::parse(content[0].at("text").get<std::string>());
    CHECK(payload.at("candidates")[0].at("concept_id") == 77670);
    CHECK(search.at("result").at("isError") == false);

    const auto details = call(server, request(5, "tools/call",
                                              {{"name", "get_concept_details"},
                                               {"arguments", {{"concept_id", 77670}}}}));
    const auto d = json::parse(details.at("result").at("content")[0].at("text").get<std::string>());
    CHECK(d.at("found") == true);
    CHECK(d.at("concept").at("concept_name") == "Chest pain");

    const auto absent = call(server, request(6, "tools/call",
                                             {{"name", "get_concept_details"},
                                              {"arguments", {{"concept_id", 999999999}}}}));
    CHECK(absent.at("result").at("isError") == true);

    CHECK(error_code(call(server, request(7, "tools/call", {{"name", "drop_tables"}}))) ==
          rpc_error::kInvalidParams);
    CHECK(error_code(call(server, request(8, "tools/call",
                                          {{"name", "search_athena"}, {"arguments", json::object()}}))) ==
          rpc_error::kInvalidParams);
    CHECK(error_code(call(server, request(9, "tools/call",
                                          {{"name", "search_athena"},
                                           {"arguments", {{"keyword", "pain"}, {"page_size", 500}}}}))) ==
          rpc_error::kInvalidParams);
}

TEST_CASE("search_athena is equivalent to a direct store search") {
    auto store = t::store_of(t::synthetic_concepts(500));
    VocabularyTools tools(store);
    for (const std::string q : {"renal", "acute hepatic lesion", "cyst", "zzz"}) {
        for (const bool standard : {false, true}) {
            SearchFilters f;
            f.standard_only = standard;
            f.page_size = 15;
            const auto direct = store.search_concepts(q, f);
            const auto via = tools.call("search_athena",
                                        {{"keyword", q}, {"standard_only", standard}, {"page_size", 15}});
            CHECK(via.concepts == direct.candidates);
            const auto payload = json::parse(via.text);
            CHECK(payload.at("total_available") == direct.total_available);
            CHECK(payload.at("candidates") == candidate_rows(direct.candidates));
        }
    }
    const auto filtered = tools.call("search_athena", {{"keyword", "renal"},
                                                        {"vocabulary", json::array({"LOINC"})},
                                                        {"domain", "Measurement"}});
    for (const auto& c : filtered.concepts) {
        CHECK(c.vocabulary_id == "LOINC");
        CHECK(c.domain_id == "Measurement");
    }
}

TEST_CASE("resources") {
    auto store = t::chest_pain_store();
    const auto resources = register_default_resources();
    REQUIRE(resources.size() >= 3);
    std::set<std::string> uris;
    for (const auto& r : resources) uris.insert(r.uri);
    CHECK(uris.size() == resources.size());
    CHECK(uris.count("omop://tables"));
    CHECK(uris.count("omop://vocabulary-preferences"));
    CHECK(uris.count("omop://best-practices"));

    McpServer server(store, resources);
    const auto list = call(server, request(1, "resources/list"));
    CHECK(list.at("result").at("resources").size() == resources.size());
    const auto prefs = call(server, request(2, "resources/read", {{"uri", "omop://vocabulary-preferences"}}));
    const auto text = prefs.at("result").at("contents")[0].at("text").get<std::string>();
    CHECK(text.find("SNOMED") != std::string::npos);
    CHECK(text.find("LOINC") != std::string::npos);
    CHECK(error_code(call(server, request(3, "resources/read", {{"uri", "omop://nonexistent"}}))) ==
          rpc_error::kResourceNotFound);
    CHECK(error_code(call(server, request(4, "resources/read"))) == rpc_error::kInvalidParams);

    CHECK_THROWS_AS(McpServer(store, {resources[0], resources[0]}), std::invalid_argument);
}

TEST_CASE("json-rpc error handling") {
    auto store = t::chest_pain_store();
    McpServer server(store, register_default_resources());

    auto parse = json::parse(*server.handle_line("{not json"));
    CHECK(error_code(parse) == rpc_error::kParseError);
    CHECK(parse.at("id").is_null());

    CHECK(error_code(call(server, request(10, "prompts/list"))) == rpc_error::kMethodNotFound);
    CHECK(call(server, request(10, "prompts/list")).at("id") == 10);
    CHECK(error_code(call(server, json{{"jsonrpc", "2.0"}, {"id", 11}})) == rpc_error::kInvalidRequest);
    CHECK(error_code(call(server, json{{"jsonrpc", "1.0"}, {"id", 12}, {"method", "ping"}})) ==
          rpc_error::kInvalidRequest);
    CHECK(error_code(call(server, json{{"jsonrpc", "2.0"}, {"id", json::object()}, {"method", "ping"}})) ==
          rpc_error::kInvalidRequest);
    CHECK(error_code(call(server, json::array({request(1, "ping")}))) == rpc_error::kInvalidRequest);
    CHECK(error_code(call(server, json{{"jsonrpc", "2.0"}, {"id", 13}, {"method", "ping"}, {"params", 5}})) ==
          rpc_error::kInvalidParams);

    const auto ping = call(server, json{{"jsonrpc", "2.0"}, {"id", "abc"}, {"method", "ping"}});
    CHECK(ping.at("id") == "abc");
    CHECK(ping.at("result") == json::object());

    CHECK_FALSE(server.handle_line(""));
    CHECK_FALSE(server.handle_line("   \r\n"));
    CHECK_FALSE(server.handle_line(R"({"jsonrpc":"2.0","method":"tools/list"})"));
    CHECK_FALSE(server.handle_line(R"({"jsonrpc":"2.0","id":3,"result":{}})"));
}

TEST_CASE("protocol fuzz: every request answered once with its id and a standard code") {
    auto store = t::chest_pain_store();
    McpServer server(store, register_default_resources());
    const std::vector<std::string> methods{"initialize", "ping", "tools/list", "tools/call",
                                           "resources/list", "resources/read", "nope", ""};
    const std::set<int> codes{rpc_error::kParseError, rpc_error::kInvalidRequest,
                              rpc_error::kMethodNotFound, rpc_error::kInvalidParams,
                              rpc_error::kInternalError, rpc_error::kResourceNotFound};
    std::mt19937 rng(17);
    for (int i = 0; i < 1500; ++i) {
        json msg{{"jsonrpc", "2.0"}, {"id", i}, {"method", methods[rng() % methods.size()]}};
        switch (rng() % 6) {
            case 0: msg["params"] = {{"name", "search_athena"}, {"arguments", {{"keyword", "pain"}}}}; break;
            case 1: msg["params"] = {{"uri", rng() % 2 ? "omop://tables" : "omop://x"}}; break;
            case 2: msg["params"] = json::array({1, 2}); break;
            case 3: msg["params"] = {{"name", "get_concept_details"},
                                     {"arguments", {{"concept_id", static_cast<int>(rng() % 100000000)}}}};
                    break;
            case 4: msg["params"] = "bad"; break;
            default: break;
        }
        std::string line = msg.dump();
        const bool corrupt = rng() % 7 == 0;
        if (corrupt) line.insert(rng() % line.size(), rng() % 2 ? "{" : "\"");
        const auto out = server.handle_line(line);
        if (!out) {
            // Only corruption that turned the frame into something without an id is silent.
            CHECK(corrupt);
            continue;
        }
        const auto r = json::parse(*out);
        CHECK(r.at("jsonrpc") == "2.0");
        CHECK(r.contains("result") != r.contains("error"));
        if (r.contains("error")) {
            CHECK(codes.count(error_code(r)) == 1);
        }
        if (!corrupt) CHECK(r.at("id") == i);
    }
}

TEST_CASE("serve streams newline-delimited frames and sessions are isolated") {
    auto store = t::chest_pain_store();
    std::istringstream in(request(1, "initialize").dump() + "\n" +
                          R"({"jsonrpc":"2.0","method":"notifications/initialized"})" "\n" +
                          request(2, "tools/list").dump() + "\n");
    std::ostringstream out;
    McpServer first(store, register_default_resources());
    CHECK(first.serve(in, out));
    CHECK(first.initialized());
    std::istringstream lines(out.str());
    std::string line;
    std::vector<json> responses;
    while (std::getline(lines, line)) responses.push_back(json::parse(line));
    REQUIRE(responses.size() == 2);
    CHECK(responses[0].at("id") == 1);
    CHECK(responses[1].at("id") == 2);

    McpServer second(store, register_default_resources());
    CHECK_FALSE(second.initialized());
}

TEST_CASE("mask_timing_fields") {
    const auto masked = mask_timing_fields(json::parse(
        R"({"elapsed_seconds":1.5,"verified_at":"x","timestamp":3,"a":[{"elapsed":2,"keep":1}],"format":"y"})"));
    CHECK(masked.at("elapsed_seconds") == "<masked>");
    CHECK(masked.at("verified_at") == "<masked>");
    CHECK(masked.at("timestamp") == "<masked>");
    CHECK(masked.at("a")[0].at("elapsed") == "<masked>");
    CHECK(masked.at("a")[0].at("keep") == 1);
    CHECK(masked.at("format") == "y");
}
