#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "omop_mcp/agent.hpp"
#include "omop_mcp/athena.hpp"
#include "omop_mcp/eval.hpp"
#include "omop_mcp/mcp_server.hpp"

namespace omop_mcp::cli {

namespace {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BackendOptions {
    std::string fixture;
    std::string athena_url;
    std::string preferences;
};

struct MapOptions {
    std::string terms_file;
    std::string mock;
    std::string llm_model;
    int parallelism = 1;
    std::string out;
    std::string format = "jsonl";
    std::string records;
    std::string override_text;
    int max_attempts = 0;
    bool no_tools = false;
};

struct EvalOptions {
    std::string input;
    std::string report;
    bool json_only = false;
};

std::optional<std::string> env(const char* name) {
    if (const char* v = std::getenv(name); v != nullptr && *v != '\0') return std::string(v);
    return std::nullopt;
}

void add_backend_flags(CLI::App& cmd, BackendOptions& opts) {
    auto* fixture = cmd.add_option("--fixture", opts.fixture,
                                   "Newline-delimited JSON concept snapshot (offline backend)");
    auto* url = cmd.add_option("--athena-url", opts.athena_url, "Athena base URL (live backend)");
    fixture->excludes(url);
    cmd.add_option("--preferences", opts.preferences,
                   "JSON file with prefer_standard, prefer_valid, domain_vocab_defaults");
}

StoreConfig resolve_store_config(const BackendOptions& opts) {
    StoreConfig cfg;
    try {
        cfg = StoreConfig::from_env();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!opts.fixture.empty()) {
        cfg.fixture_path = opts.fixture;
    } else if (!opts.athena_url.empty()) {
        cfg.fixture_path.reset();
        cfg.athena_base_url = opts.athena_url;
    } else if (!cfg.fixture_path && !env("ATHENA_BASE_URL")) {
        throw ConfigError(
            "no vocabulary backend: pass --fixture or --athena-url, or set OMOP_MCP_FIXTURE or "
            "ATHENA_BASE_URL");
    }
    return cfg;
}

VocabularyStore open_store(const StoreConfig& cfg) {
    try {
        return VocabularyStore::open(cfg);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("cannot open vocabulary backend: ") + e.what());
    }
}

PreferenceProfile resolve_profile_file(const BackendOptions& opts) {
    if (opts.preferences.empty()) return {};
    try {
        return load_profile(opts.preferences);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

std::vector<std::string> resource_texts(const std::vector<ResourceDescriptor>& resources) {
    std::vector<std::string> texts;
    for (const auto& r : resources) texts.push_back("[" + r.uri + "]\n" + r.content);
    return texts;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (const char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + '"';
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> parts;
    std::string cur;
    for (const char ch : line) {
        if (ch == '\t') {
            parts.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    parts.push_back(std::move(cur));
    return parts;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<MappingRequest> read_terms(const std::string& path, const PreferenceProfile& profile,
                                       const std::optional<std::string>& override_text) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open terms file " + path);
    std::vector<MappingRequest> requests;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto parts = split_tabs(line);
        if (trim(parts[0]).empty()) continue;
        MappingRequest r;
        r.source_term = trim(parts[0]);
        if (parts.size() > 1 && !trim(parts[1]).empty()) r.target_table = trim(parts[1]);
        if (parts.size() > 2 && !trim(parts[2]).empty()) r.target_field = trim(parts[2]);
        if (parts.size() > 3 && !trim(parts[3]).empty()) r.context = trim(parts[3]);
        r.profile = resolve_profile(std::nullopt, override_text, profile);
        requests.push_back(std::move(r));
    }
    return requests;
}

std::string status_of(const BatchItem& item) {
    const auto c = classify(item);
    return c ? std::string(to_string(*c)) : std::string("error");
}

json row_json(std::size_t index, const BatchItem& item) {
    json row{{"index", index}, {"term", item.request.source_term}};
    if (item.request.target_table) row["target_table"] = *item.request.target_table;
    if (item.request.target_field) row["target_field"] = *item.request.target_field;
    row["status"] = status_of(item);
    if (const auto* m = std::get_if<AuditedMapping>(&item.outcome)) {
        const auto fields = to_json(m->verified.result);
        for (const auto& [k, v] : fields.items()) row[k] = v;
        row["attempts"] = m->attempts;
        row["candidates_considered"] = m->candidates_considered.size();
    } else if (const auto* f = std::get_if<RetrievalFailure>(&item.outcome)) {
        row["detail"] = f->detail;
    } else {
        row["detail"] = std::get<InfrastructureError>(item.outcome).message;
    }
    row["elapsed_seconds"] = item.elapsed_seconds;
    return row;
}

const std::vector<std::string> kCsvColumns{
    "index",  "term",        "status",           "concept_id", "concept_name", "domain_id",
    "class",  "validity",    "domain",           "vocabulary", "concept_url",  "inferred_keyword",
    "reasoning", "attempts", "detail",           "elapsed_seconds"};

void write_csv_row(std::ostream& out, const json& row) {
    for (std::size_t i = 0; i < kCsvColumns.size(); ++i) {
        if (i) out << ',';
        const auto it = row.find(kCsvColumns[i]);
        if (it == row.end() || it->is_null()) continue;
        out << csv_escape(it->is_string() ? it->get<std::string>() : it->dump());
    }
    out << '\n';
}

std::string map_summary(const std::vector<BatchItem>& items) {
    std::vector<EvalRecord> records;
    std::size_t errors = 0;
    for (const auto& item : items) {
        const auto c = classify(item);
        if (!c) {
            ++errors;
            continue;
        }
        records.push_back(EvalRecord{item.request.source_term, *c, std::nullopt, item.elapsed_seconds});
    }
    std::ostringstream os;
    if (records.empty()) {
        os << "retrieval success n/a (0 terms)";
    } else {
        const auto successes = std::count_if(records.begin(), records.end(), [](const auto& r) {
            return r.outcome == OutcomeClass::Success;
        });
        os << "retrieval success " << format_percent(retrieval_success_rate(records)) << " ("
           << successes << '/' << records.size() << ")";
        for (const auto& [kind, share] : failure_distribution(records)) {
            os << "; " << to_string(kind) << ' ' << format_percent(share.fraction) << " ("
               << share.count << ')';
        }
        const auto t = timing_summary(records);
        os << "; time per term " << format_fixed(t.mean, 2) << " ± " << format_fixed(t.sem, 2)
           << " s";
    }
    if (errors) os << "; infrastructure errors " << errors;
    return os.str();
}

int cmd_serve(const BackendOptions& opts, std::istream& in, std::ostream& out, std::ostream& err) {
    const auto cfg = resolve_store_config(opts);
    auto store = open_store(cfg);
    McpServer server(store, register_default_resources(resolve_profile_file(opts)));
    err << "omop-mcp: serving MCP on stdio ("
        << (cfg.fixture_path ? "fixture " + cfg.fixture_path->string()
                             : "Athena " + cfg.athena_base_url)
        << ")\n";
    return server.serve(in, out) ? kExitOk : kExitFailure;
}

int cmd_map(const BackendOptions& backend, const MapOptions& opts, std::ostream& out,
            std::ostream& err) {
    if (opts.parallelism < 1) throw ConfigError("--parallelism must be >= 1");
    if (opts.format != "jsonl" && opts.format != "csv") {
        throw ConfigError("--format must be jsonl or csv");
    }
    const auto cfg = resolve_store_config(backend);
    const auto profile = resolve_profile_file(backend);

    std::unique_ptr<LlmPort> llm;
    const auto model = !opts.llm_model.empty() ? std::optional(opts.llm_model) : env("LLM_MODEL");
    if (!opts.mock.empty() && !opts.llm_model.empty()) {
        throw ConfigError("choose one of --mock and --llm-model");
    }
    try {
        if (!opts.mock.empty()) {
            llm = std::make_unique<ScriptedMock>(ScriptedMock::load(opts.mock));
        } else if (model) {
            auto chat = ChatEndpointConfig::from_env();
            chat.model = *model;
            llm = std::make_unique<ChatCompletionsClient>(chat);
        } else {
            throw ConfigError("no language model: pass --mock or --llm-model, or set LLM_MODEL");
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }

    AgentConfig agent;
    try {
        agent = AgentConfig::from_env();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (opts.max_attempts > 0) agent.max_attempts = opts.max_attempts;
    agent.tools_enabled = !opts.no_tools;
    agent.resources = resource_texts(register_default_resources(profile));

    const auto requests = read_terms(
        opts.terms_file, profile,
        opts.override_text.empty() ? std::nullopt : std::optional(opts.override_text));
    auto store = open_store(cfg);
    const auto items = map_batch(requests, *llm, store, opts.parallelism, agent);

    std::ofstream file;
    std::ostream* sink = &out;
    if (!opts.out.empty()) {
        file.open(opts.out);
        if (!file) throw ConfigError("cannot write " + opts.out);
        sink = &file;
    }
    if (opts.format == "csv") {
        for (std::size_t i = 0; i < kCsvColumns.size(); ++i) *sink << (i ? "," : "") << kCsvColumns[i];
        *sink << '\n';
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto row = row_json(i + 1, items[i]);
        if (opts.format == "csv") {
            write_csv_row(*sink, row);
        } else {
            *sink << row.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
        }
    }
    sink->flush();

    if (!opts.records.empty()) {
        std::ofstream rec(opts.records);
        if (!rec) throw ConfigError("cannot write " + opts.records);
        rec << "term,outcome,relevance,elapsed_seconds\n";
        for (const auto& item : items) {
            if (const auto c = classify(item)) {
                rec << csv_escape(item.request.source_term) << ',' << to_string(*c) << ",,"
                    << format_fixed(item.elapsed_seconds, 6) << '\n';
            }
        }
    }

    (opts.out.empty() ? err : out) << map_summary(items) << '\n';

    const bool infra_error = std::any_of(items.begin(), items.end(), [](const BatchItem& item) {
        return std::holds_alternative<InfrastructureError>(item.outcome);
    });
    if (infra_error) {
        for (const auto& item : items) {
            if (const auto* e = std::get_if<InfrastructureError>(&item.outcome)) {
                err << "omop-mcp: " << item.request.source_term << ": " << e->message << '\n';
            }
        }
        return kExitFailure;
    }
    return kExitOk;
}

int cmd_eval(const EvalOptions& opts, std::ostream& out, std::ostream& err) {
    std::ifstream in(opts.input);
    if (!in) throw ConfigError("cannot open " + opts.input);
    std::string header;
    std::getline(in, header);
    json report;
    std::string summary;
    try {
        const auto kind = detect_csv_kind(header);
        in.clear();
        in.seekg(0);
        if (kind == CsvKind::Records) {
            const auto records = read_records_csv(in);
            report = records_report(records);
            summary = render_records_summary(report);
        } else {
            const auto pairs = read_paired_csv(in);
            report = paired_report(pairs);
            summary = render_paired_summary(report);
        }
    } catch (const CsvSchemaError& e) {
        err << "omop-mcp: " << opts.input << ": " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << "omop-mcp: " << opts.input << ": " << e.what() << '\n';
        return kExitUsage;
    }
    if (!opts.report.empty()) {
        std::ofstream rep(opts.report);
        if (!rep) throw ConfigError("cannot write " + opts.report);
        rep << report.dump(2) << '\n';
    }
    if (opts.json_only) {
        out << report.dump(2) << '\n';
    } else {
        out << summary;
    }
    return kExitOk;
}

int cmd_fixture_validate(const std::string& path, std::ostream& out) {
    if (!std::filesystem::exists(path)) throw ConfigError("no such fixture " + path);
    const auto report = validate_fixture(path);
    for (const auto& issue : report.issues) {
        out << path << ":" << issue.line << ": " << issue.message << '\n';
    }
    out << report.concepts.size() << " concepts, " << report.issues.size() << " errors\n";
    return report.issues.empty() ? kExitOk : kExitFailure;
}

int cmd_fixture_stats(const std::string& path, std::ostream& out) {
    if (!std::filesystem::exists(path)) throw ConfigError("no such fixture " + path);
    const auto report = validate_fixture(path);
    std::map<std::string, std::size_t> domains;
    std::map<std::string, std::size_t> vocabularies;
    std::size_t standard = 0;
    std::size_t valid = 0;
    for (const auto& c : report.concepts) {
        ++domains[c.domain_id];
        ++vocabularies[c.vocabulary_id];
        standard += c.standard == StandardFlag::Standard ? 1 : 0;
        valid += c.validity == Validity::Valid ? 1 : 0;
    }
    out << report.concepts.size() << " concepts (" << standard << " standard, " << valid
        << " valid)\n";
    out << "by domain:\n";
    for (const auto& [d, n] : domains) out << "  " << d << ": " << n << '\n';
    out << "by vocabulary:\n";
    for (const auto& [v, n] : vocabularies) out << "  " << v << ": " << n << '\n';
    if (!report.issues.empty()) out << report.issues.size() << " lines skipped with errors\n";
    return report.issues.empty() ? kExitOk : kExitFailure;
}

}  // namespace

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err) {
    CLI::App app{"OMOP concept mapping over the Model Context Protocol", "omop-mcp"};
    app.require_subcommand(1);

    BackendOptions serve_backend;
    auto* serve = app.add_subcommand("serve", "Run the MCP server on stdin/stdout");
    add_backend_flags(*serve, serve_backend);

    BackendOptions map_backend;
    MapOptions map_opts;
    auto* map = app.add_subcommand("map", "Map a file of source terms to OMOP concepts");
    map->add_option("terms", map_opts.terms_file,
                    "UTF-8 file, one term per line (optional tab-separated table, field, context)")
        ->required();
    add_backend_flags(*map, map_backend);
    auto* mock = map->add_option("--mock", map_opts.mock, "Scripted mock transcript (JSON)");
    auto* model = map->add_option("--llm-model", map_opts.llm_model,
                                  "Live chat model (uses LLM_API_BASE, LLM_API_KEY)");
    mock->excludes(model);
    map->add_option("--parallelism", map_opts.parallelism, "Concurrent term mappings")
        ->default_val(1);
    map->add_option("--out", map_opts.out, "Output file (default stdout)");
    map->add_option("--format", map_opts.format, "jsonl or csv")->default_val("jsonl");
    map->add_option("--records", map_opts.records,
                    "Also write an evaluation records CSV for `omop-mcp eval`");
    map->add_option("--override", map_opts.override_text,
                    "Runtime vocabulary instruction, e.g. \"favor LOINC codes for lab results\"");
    map->add_option("--max-attempts", map_opts.max_attempts,
                    "Selection attempts per term (default 3 or OMOP_MCP_MAX_ATTEMPTS)");
    map->add_flag("--no-tools", map_opts.no_tools,
                  "Ablation: the model answers without vocabulary tools; the guard classifies");

    EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "Evaluate a records or paired-score CSV");
    eval->add_option("input", eval_opts.input,
                     "CSV with header term,outcome,relevance,elapsed_seconds or "
                     "term,system_score,human_score")
        ->required();
    eval->add_option("--report", eval_opts.report, "Write the JSON report to this file");
    eval->add_flag("--json", eval_opts.json_only, "Print the JSON report instead of the table");

    std::string fixture_path;
    auto* fixture = app.add_subcommand("fixture", "Inspect a fixture file");
    fixture->require_subcommand(1);
    auto* validate_cmd = fixture->add_subcommand("validate", "Report line-level errors");
    validate_cmd->add_option("path", fixture_path)->required();
    auto* stats_cmd = fixture->add_subcommand("stats", "Concept counts per domain and vocabulary");
    stats_cmd->add_option("path", fixture_path)->required();

    std::vector<std::string> argv_store{"omop-mcp"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*serve) return cmd_serve(serve_backend, in, out, err);
        if (*map) return cmd_map(map_backend, map_opts, out, err);
        if (*eval) return cmd_eval(eval_opts, out, err);
        if (*validate_cmd) return cmd_fixture_validate(fixture_path, out);
        if (*stats_cmd) return cmd_fixture_stats(fixture_path, out);
    } catch (const ConfigError& e) {
        err << "omop-mcp: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "omop-mcp: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace omop_mcp::cli
