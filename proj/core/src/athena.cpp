#include "omop_mcp/athena.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace omop_mcp {

namespace {

std::vector<std::string> tokenize(std::string_view normalized) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char ch : normalized) {
        const auto u = static_cast<unsigned char>(ch);
        if (u >= 0x80 || std::isalnum(u)) {
            current.push_back(ch);
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    return tokens;
}

std::string require_query(const std::string& query) {
    auto q = normalize_name(query);
    if (q.empty()) throw GatewayError(GatewayError::Kind::InvalidQuery, "query is empty");
    return q;
}

std::optional<std::string> env(const char* name) {
    if (const char* v = std::getenv(name); v != nullptr && *v != '\0') return std::string(v);
    return std::nullopt;
}

std::string url_encode(std::string_view s) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (const char ch : s) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u) || ch == '-' || ch == '_' || ch == '.' || ch == '~') {
            out.push_back(ch);
        } else {
            out.push_back('%');
            out.push_back(kHex[u >> 4]);
            out.push_back(kHex[u & 0xF]);
        }
    }
    return out;
}

std::string string_field(const json& j, std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
        if (const auto it = j.find(key); it != j.end() && it->is_string()) {
            return it->get<std::string>();
        }
    }
    return {};
}

}  // namespace

void validate(const SearchFilters& f) {
    if (f.page < 1) {
        throw GatewayError(GatewayError::Kind::InvalidQuery, "page must be >= 1");
    }
    if (f.page_size < 1 || f.page_size > 100) {
        throw GatewayError(GatewayError::Kind::InvalidQuery, "page_size must be in [1, 100]");
    }
}

std::string search_key(const std::string& query, const SearchFilters& filters) {
    std::vector<std::string> vocabs;
    for (const auto& v : filters.vocabulary) vocabs.push_back(normalize_name(v));
    std::sort(vocabs.begin(), vocabs.end());
    vocabs.erase(std::unique(vocabs.begin(), vocabs.end()), vocabs.end());

    std::string key = normalize_name(query);
    key += '\x1f';
    key += filters.domain ? normalize_name(*filters.domain) : std::string("\x1e");
    key += '\x1f';
    for (const auto& v : vocabs) {
        key += v;
        key += '\x1d';
    }
    key += '\x1f';
    key += filters.standard_only ? '1' : '0';
    key += '\x1f' + std::to_string(filters.page) + '\x1f' + std::to_string(filters.page_size);
    return key;
}

// ---------------------------------------------------------------------------
// Clocks and rate limiting
// ---------------------------------------------------------------------------

Clock::TimePoint SteadyClock::now() {
    return std::chrono::time_point_cast<Duration>(std::chrono::steady_clock::now());
}

void SteadyClock::sleep_for(Duration d) {
    if (d > Duration::zero()) std::this_thread::sleep_for(d);
}

Clock::TimePoint ManualClock::now() {
    std::lock_guard lock(mu_);
    return now_;
}

void ManualClock::sleep_for(Duration d) { advance(d); }

void ManualClock::advance(Duration d) {
    std::lock_guard lock(mu_);
    if (d > Duration::zero()) now_ += d;
}

std::shared_ptr<Clock> system_clock() {
    static auto clock = std::make_shared<SteadyClock>();
    return clock;
}

RateLimiter::RateLimiter(double max_per_second, std::shared_ptr<Clock> clock)
    : rate_(max_per_second),
      burst_(static_cast<std::size_t>(std::max(1.0, std::floor(max_per_second)))),
      clock_(std::move(clock)) {
    if (!(max_per_second > 0)) throw std::invalid_argument("rate limit must be positive");
}

void RateLimiter::acquire(bool wait) {
    // A window shorter than one second would let a fractional rate exceed
    // floor(rate) calls inside some one-second span.
    const auto window = std::chrono::duration_cast<Clock::Duration>(
        std::chrono::duration<double>(std::max(1.0, static_cast<double>(burst_) / rate_)));
    std::lock_guard lock(mu_);
    for (;;) {
        const auto now = clock_->now();
        while (!recent_.empty() && now - recent_.front() >= window) recent_.pop_front();
        if (recent_.size() < burst_) {
            recent_.push_back(now);
            return;
        }
        if (!wait) {
            throw GatewayError(GatewayError::Kind::RateLimited, "Athena request budget exhausted");
        }
        clock_->sleep_for(recent_.front() + window - now);
    }
}

// ---------------------------------------------------------------------------
// Fixture backend
// ---------------------------------------------------------------------------

FixtureBackend::FixtureBackend(std::vector<Concept> concepts) : concepts_(std::move(concepts)) {
    indexed_.reserve(concepts_.size());
    for (std::size_t i = 0; i < concepts_.size(); ++i) {
        const auto& c = concepts_[i];
        if (!by_id_.emplace(c.concept_id, i).second) throw DuplicateConceptId(c.concept_id, i + 1);
        auto normalized = normalize_name(c.concept_name);
        auto tokens = tokenize(normalized);
        indexed_.push_back(Indexed{c, std::move(normalized), std::move(tokens)});
    }
}

CandidateSet FixtureBackend::search(const std::string& query, const SearchFilters& filters) {
    const auto q = require_query(query);
    validate(filters);
    const auto q_tokens = tokenize(q);

    const auto domain = filters.domain ? std::optional(normalize_name(*filters.domain))
                                       : std::nullopt;
    std::set<std::string> vocabs;
    for (const auto& v : filters.vocabulary) vocabs.insert(normalize_name(v));

    struct Hit {
        int tier;
        std::size_t overlap;
        const Indexed* entry;
    };
    std::vector<Hit> hits;
    for (const auto& entry : indexed_) {
        const auto& c = entry.entry;
        if (domain && normalize_name(c.domain_id) != *domain) continue;
        if (!vocabs.empty() && !vocabs.count(normalize_name(c.vocabulary_id))) continue;
        if (filters.standard_only && c.standard != StandardFlag::Standard) continue;

        if (entry.normalized == q) {
            hits.push_back({0, 0, &entry});
        } else if (entry.normalized.find(q) != std::string::npos) {
            hits.push_back({1, 0, &entry});
        } else {
            std::size_t overlap = 0;
            for (const auto& t : q_tokens) {
                if (std::binary_search(entry.tokens.begin(), entry.tokens.end(), t)) ++overlap;
            }
            if (overlap > 0) hits.push_back({2, overlap, &entry});
        }
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.tier != b.tier) return a.tier < b.tier;
        if (a.overlap != b.overlap) return a.overlap > b.overlap;
        return a.entry->entry.concept_id < b.entry->entry.concept_id;
    });

    CandidateSet out;
    out.query = query;
    out.page = filters.page;
    out.page_size = filters.page_size;
    out.total_available = hits.size();
    const auto begin = static_cast<std::size_t>(filters.page - 1) *
                       static_cast<std::size_t>(filters.page_size);
    for (std::size_t i = begin; i < hits.size() && i < begin + filters.page_size; ++i) {
        out.candidates.push_back(hits[i].entry->entry);
    }
    return out;
}

std::optional<Concept> FixtureBackend::get(ConceptId id) {
    if (id < 1) throw InvalidId(id);
    const auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return concepts_[it->second];
}

// ---------------------------------------------------------------------------
// Live Athena backend
// ---------------------------------------------------------------------------

LiveHttpBackend::LiveHttpBackend(std::string base_url, RetryPolicy retry,
                                 std::shared_ptr<Clock> clock)
    : base_url_(std::move(base_url)), retry_(retry), clock_(std::move(clock)) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    if (base_url_.empty()) throw std::invalid_argument("Athena base URL is empty");
}

LiveHttpBackend::Response LiveHttpBackend::get_with_retry(const std::string& path) {
    // Split "scheme://host[:port][/prefix]" so a path prefix survives.
    std::string origin = base_url_;
    std::string prefix;
    if (const auto scheme = base_url_.find("://"); scheme != std::string::npos) {
        if (const auto slash = base_url_.find('/', scheme + 3); slash != std::string::npos) {
            origin = base_url_.substr(0, slash);
            prefix = base_url_.substr(slash);
        }
    }

    httplib::Client client(origin);
    client.set_connection_timeout(10);
    client.set_read_timeout(30);
    client.set_follow_location(true);
    const httplib::Headers headers{{"Accept", "application/json"},
                                   {"User-Agent", "omop-mcp/1.0"}};

    auto backoff = std::chrono::duration_cast<Clock::Duration>(retry_.initial_backoff);
    std::string last_error;
    for (int attempt = 1; attempt <= retry_.attempts; ++attempt) {
        auto res = client.Get(prefix + path, headers);
        if (res && res->status < 500) return Response{res->status, res->body};
        last_error = res ? "HTTP " + std::to_string(res->status)
                         : "transport error: " + httplib::to_string(res.error());
        if (attempt < retry_.attempts) {
            clock_->sleep_for(backoff);
            backoff *= 2;
        }
    }
    throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                       "Athena request " + path + " failed after " +
                           std::to_string(retry_.attempts) + " attempts (" + last_error + ")");
}

Concept LiveHttpBackend::concept_from_athena(const json& j) {
    Concept c;
    const auto id = j.contains("id") ? j.at("id") : j.value("concept_id", json());
    if (!id.is_number_integer()) throw std::invalid_argument("Athena concept without integer id");
    c.concept_id = id.get<ConceptId>();
    c.concept_name = string_field(j, {"name", "concept_name"});
    c.domain_id = string_field(j, {"domain", "domainId", "domain_id"});
    c.vocabulary_id = string_field(j, {"vocabulary", "vocabularyId", "vocabulary_id"});
    c.concept_class = string_field(j, {"className", "conceptClassId", "concept_class_id"});

    const auto standard = string_field(j, {"standardConcept", "standard_concept"});
    if (standard == "Standard" || standard == "S") {
        c.standard = StandardFlag::Standard;
    } else if (standard == "Classification" || standard == "C") {
        c.standard = StandardFlag::Classification;
    } else {
        c.standard = StandardFlag::NonStandard;
    }
    // Athena reports "Valid" or an invalid-reason code; absent/null means valid.
    const auto invalid = string_field(j, {"invalidReason", "invalid_reason"});
    c.validity = (invalid.empty() || invalid == "Valid") ? Validity::Valid : Validity::Invalid;
    return c;
}

CandidateSet LiveHttpBackend::search(const std::string& query, const SearchFilters& filters) {
    require_query(query);
    validate(filters);
    std::string path = "/api/v1/concepts?query=" + url_encode(query) +
                       "&page=" + std::to_string(filters.page) +
                       "&pageSize=" + std::to_string(filters.page_size);
    if (filters.domain) path += "&domain=" + url_encode(*filters.domain);
    for (const auto& v : filters.vocabulary) path += "&vocabulary=" + url_encode(v);
    if (filters.standard_only) path += "&standardConcept=Standard";

    const auto res = get_with_retry(path);
    if (res.status != 200) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                           "Athena search returned HTTP " + std::to_string(res.status));
    }
    const auto body = json::parse(res.body, nullptr, false);
    if (body.is_discarded()) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                           "Athena search returned malformed JSON");
    }
    const json* list = &body;
    if (body.is_object()) {
        const auto it = body.find("content");
        if (it == body.end()) {
            throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                               "Athena search response has no content list");
        }
        list = &*it;
    }
    if (!list->is_array()) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                           "Athena search content is not a list");
    }

    CandidateSet out;
    out.query = query;
    out.page = filters.page;
    out.page_size = filters.page_size;
    for (const auto& item : *list) {
        if (out.candidates.size() == static_cast<std::size_t>(filters.page_size)) break;
        try {
            out.candidates.push_back(concept_from_athena(item));
        } catch (const std::invalid_argument&) {
            continue;
        }
    }
    out.total_available = out.candidates.size();
    if (body.is_object()) {
        if (const auto it = body.find("totalElements"); it != body.end() && it->is_number()) {
            out.total_available = std::max(out.total_available, it->get<std::size_t>());
        }
    }
    return out;
}

std::optional<Concept> LiveHttpBackend::get(ConceptId id) {
    if (id < 1) throw InvalidId(id);
    const auto res = get_with_retry("/api/v1/concepts/" + std::to_string(id));
    if (res.status == 404) return std::nullopt;
    if (res.status != 200) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                           "Athena concept lookup returned HTTP " + std::to_string(res.status));
    }
    const auto body = json::parse(res.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable,
                           "Athena concept lookup returned malformed JSON");
    }
    try {
        return concept_from_athena(body);
    } catch (const std::invalid_argument& e) {
        throw GatewayError(GatewayError::Kind::UpstreamUnavailable, e.what());
    }
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

StoreConfig StoreConfig::from_env() {
    StoreConfig cfg;
    if (auto v = env("ATHENA_BASE_URL")) cfg.athena_base_url = *v;
    if (auto v = env("ATHENA_RATE_LIMIT_RPS")) {
        char* end = nullptr;
        cfg.rate_limit_rps = std::strtod(v->c_str(), &end);
        if (end == v->c_str() || *end != '\0' || cfg.rate_limit_rps < 0) {
            throw std::invalid_argument("ATHENA_RATE_LIMIT_RPS must be a nonnegative number");
        }
    }
    if (auto v = env("ATHENA_CACHE_TTL_SECS")) {
        char* end = nullptr;
        const long long secs = std::strtoll(v->c_str(), &end, 10);
        if (end == v->c_str() || *end != '\0' || secs < 0) {
            throw std::invalid_argument("ATHENA_CACHE_TTL_SECS must be a nonnegative integer");
        }
        cfg.cache_ttl = std::chrono::seconds(secs);
    }
    if (auto v = env("OMOP_MCP_FIXTURE")) cfg.fixture_path = *v;
    return cfg;
}

VocabularyStore::VocabularyStore(std::shared_ptr<VocabularyBackend> backend, StoreConfig config,
                                 std::shared_ptr<Clock> clock)
    : backend_(std::move(backend)),
      config_(std::move(config)),
      clock_(std::move(clock)),
      backend_calls_(std::make_shared<std::atomic<std::size_t>>(0)) {
    if (!backend_) throw std::invalid_argument("vocabulary store needs a backend");
    if (backend_->is_remote() && config_.rate_limit_rps > 0) {
        limiter_ = std::make_shared<RateLimiter>(config_.rate_limit_rps, clock_);
    }
    const auto ttl = std::chrono::duration_cast<Clock::Duration>(config_.cache_ttl);
    search_cache_ =
        std::make_shared<TtlLruCache<CandidateSet>>(config_.cache_capacity, ttl, clock_);
    concept_cache_ =
        std::make_shared<TtlLruCache<std::optional<Concept>>>(config_.cache_capacity, ttl, clock_);
}

VocabularyStore VocabularyStore::open(const StoreConfig& config) {
    if (config.fixture_path) return load_fixture(*config.fixture_path, config);
    return VocabularyStore(std::make_shared<LiveHttpBackend>(config.athena_base_url), config);
}

void VocabularyStore::before_backend_call() {
    if (limiter_) limiter_->acquire(config_.wait_for_rate_limit);
    backend_calls_->fetch_add(1, std::memory_order_relaxed);
}

CandidateSet VocabularyStore::search_concepts(const std::string& query,
                                              const SearchFilters& filters) {
    if (normalize_name(query).empty()) {
        throw GatewayError(GatewayError::Kind::InvalidQuery, "query is empty");
    }
    validate(filters);
    const auto key = search_key(query, filters);
    if (auto hit = search_cache_->get(key)) {
        hit->query = query;
        return *hit;
    }
    before_backend_call();
    auto result = backend_->search(query, filters);
    search_cache_->put(key, result);
    return result;
}

std::optional<Concept> VocabularyStore::get_concept(ConceptId id) {
    if (id < 1) throw InvalidId(id);
    const auto key = std::to_string(id);
    if (auto hit = concept_cache_->get(key)) return *hit;
    before_backend_call();
    auto result = backend_->get(id);
    concept_cache_->put(key, result);
    return result;
}

std::size_t VocabularyStore::backend_calls() const noexcept {
    return backend_calls_->load(std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Fixture files
// ---------------------------------------------------------------------------

namespace {

template <typename OnConcept, typename OnIssue>
std::size_t scan_fixture(std::istream& in, OnConcept on_concept, OnIssue on_issue) {
    std::set<ConceptId> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const auto j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            on_issue(FixtureIssue{line_no, "malformed JSON", std::nullopt});
            continue;
        }
        Concept c;
        try {
            c = concept_from_json(j);
        } catch (const std::exception& e) {
            on_issue(FixtureIssue{line_no, e.what(), std::nullopt});
            continue;
        }
        if (!seen.insert(c.concept_id).second) {
            on_issue(FixtureIssue{line_no, "duplicate concept_id " + std::to_string(c.concept_id),
                                  c.concept_id});
            continue;
        }
        on_concept(std::move(c));
    }
    return line_no;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open fixture " + path.string());
    return in;
}

}  // namespace

FixtureReport validate_fixture(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    FixtureReport report;
    report.lines = scan_fixture(
        in, [&](Concept c) { report.concepts.push_back(std::move(c)); },
        [&](FixtureIssue issue) { report.issues.push_back(std::move(issue)); });
    return report;
}

std::vector<Concept> parse_fixture(std::istream& in) {
    std::vector<Concept> concepts;
    scan_fixture(
        in, [&](Concept c) { concepts.push_back(std::move(c)); },
        [](const FixtureIssue& issue) {
            if (issue.duplicate_id) throw DuplicateConceptId(*issue.duplicate_id, issue.line);
            throw FixtureParseError(issue.line, issue.message);
        });
    return concepts;
}

std::vector<Concept> read_fixture(const std::filesystem::path& path) {
    auto in = open_or_throw(path);
    return parse_fixture(in);
}

VocabularyStore load_fixture(const std::filesystem::path& path, StoreConfig config) {
    config.fixture_path = path;
    return VocabularyStore(std::make_shared<FixtureBackend>(read_fixture(path)), config);
}

void write_fixture(std::ostream& out, const std::vector<Concept>& concepts) {
    for (const auto& c : concepts) out << to_json(c).dump() << '\n';
}

}  // namespace omop_mcp
