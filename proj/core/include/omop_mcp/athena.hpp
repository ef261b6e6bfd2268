#pragma once

#include <chrono>
#include <deque>
#include <filesystem>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "omop_mcp/vocabulary.hpp"

namespace omop_mcp {

struct SearchFilters {
    std::optional<std::string> domain;
    std::vector<std::string> vocabulary;
    bool standard_only = false;
    int page = 1;
    int page_size = 20;

    bool operator==(const SearchFilters&) const = default;
};

/// Throws GatewayError{InvalidQuery} when page/page_size are out of range.
void validate(const SearchFilters& f);

class GatewayError : public std::runtime_error {
public:
    enum class Kind { InvalidQuery, UpstreamUnavailable, RateLimited };
    GatewayError(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

class FixtureParseError : public std::runtime_error {
public:
    FixtureParseError(std::size_t line, const std::string& message)
        : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DuplicateConceptId : public std::runtime_error {
public:
    DuplicateConceptId(ConceptId id, std::size_t line)
        : std::runtime_error("line " + std::to_string(line) + ": duplicate concept_id " +
                             std::to_string(id)),
          id_(id), line_(line) {}
    ConceptId id() const noexcept { return id_; }
    std::size_t line() const noexcept { return line_; }

private:
    ConceptId id_;
    std::size_t line_;
};

// ---------------------------------------------------------------------------
// Time
// ---------------------------------------------------------------------------

/// Monotonic time source. Tests inject a manual clock whose sleep advances time.
class Clock {
public:
    using Duration = std::chrono::nanoseconds;
    using TimePoint = std::chrono::time_point<std::chrono::steady_clock, Duration>;

    virtual ~Clock() = default;
    virtual TimePoint now() = 0;
    virtual void sleep_for(Duration d) = 0;
};

class SteadyClock final : public Clock {
public:
    TimePoint now() override;
    void sleep_for(Duration d) override;
};

class ManualClock final : public Clock {
public:
    TimePoint now() override;
    void sleep_for(Duration d) override;
    void advance(Duration d);

private:
    std::mutex mu_;
    TimePoint now_{};
};

std::shared_ptr<Clock> system_clock();

/// Sliding-log limiter: at most floor(max_per_second) acquisitions inside
/// any one-second window (one per 1/max_per_second seconds below 1 rps).
class RateLimiter {
public:
    RateLimiter(double max_per_second, std::shared_ptr<Clock> clock);

    /// Blocks (via the clock) until a slot is free. With wait=false throws
    /// GatewayError{RateLimited} instead of blocking.
    void acquire(bool wait = true);

    double rate() const noexcept { return rate_; }

private:
    double rate_;
    std::size_t burst_;
    std::shared_ptr<Clock> clock_;
    std::mutex mu_;
    std::deque<Clock::TimePoint> recent_;
};

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class VocabularyBackend {
public:
    virtual ~VocabularyBackend() = default;
    virtual CandidateSet search(const std::string& query, const SearchFilters& filters) = 0;
    virtual std::optional<Concept> get(ConceptId id) = 0;
    /// Remote backends go through the rate limiter; local ones do not.
    virtual bool is_remote() const = 0;
};

/// In-memory snapshot of concept records with deterministic ranking:
/// exact normalized-name match, then substring match, then token overlap
/// (descending), ties by ascending concept_id.
class FixtureBackend final : public VocabularyBackend {
public:
    explicit FixtureBackend(std::vector<Concept> concepts);

    CandidateSet search(const std::string& query, const SearchFilters& filters) override;
    std::optional<Concept> get(ConceptId id) override;
    bool is_remote() const override { return false; }

    const std::vector<Concept>& concepts() const noexcept { return concepts_; }

private:
    struct Indexed {
        Concept entry;
        std::string normalized;
        std::vector<std::string> tokens;
    };
    std::vector<Concept> concepts_;
    std::vector<Indexed> indexed_;
    std::unordered_map<ConceptId, std::size_t> by_id_;
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{250};
};

/// Athena REST adapter: GET {base}/api/v1/concepts and {base}/api/v1/concepts/{id}.
class LiveHttpBackend final : public VocabularyBackend {
public:
    LiveHttpBackend(std::string base_url, RetryPolicy retry = {},
                    std::shared_ptr<Clock> clock = system_clock());

    CandidateSet search(const std::string& query, const SearchFilters& filters) override;
    std::optional<Concept> get(ConceptId id) override;
    bool is_remote() const override { return true; }

    const std::string& base_url() const noexcept { return base_url_; }

    /// Maps one element of the search response's concept list.
    static Concept concept_from_athena(const json& j);

private:
    struct Response {
        int status = 0;
        std::string body;
    };
    Response get_with_retry(const std::string& path);

    std::string base_url_;
    RetryPolicy retry_;
    std::shared_ptr<Clock> clock_;
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// LRU map with per-entry TTL. Thread-safe.
template <typename Value>
class TtlLruCache {
public:
    TtlLruCache(std::size_t capacity, Clock::Duration ttl, std::shared_ptr<Clock> clock)
        : capacity_(capacity), ttl_(ttl), clock_(std::move(clock)) {}

    std::optional<Value> get(const std::string& key) {
        std::lock_guard lock(mu_);
        const auto it = index_.find(key);
        if (it == index_.end()) return std::nullopt;
        if (clock_->now() - it->second->inserted >= ttl_) {
            order_.erase(it->second);
            index_.erase(it);
            return std::nullopt;
        }
        order_.splice(order_.begin(), order_, it->second);
        return it->second->value;
    }

    void put(const std::string& key, Value value) {
        if (capacity_ == 0 || ttl_ <= Clock::Duration::zero()) return;
        std::lock_guard lock(mu_);
        if (const auto it = index_.find(key); it != index_.end()) {
            order_.erase(it->second);
            index_.erase(it);
        }
        order_.push_front(Entry{key, std::move(value), clock_->now()});
        index_[key] = order_.begin();
        while (order_.size() > capacity_) {
            index_.erase(order_.back().key);
            order_.pop_back();
        }
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return order_.size();
    }

private:
    struct Entry {
        std::string key;
        Value value;
        Clock::TimePoint inserted;
    };
    std::size_t capacity_;
    Clock::Duration ttl_;
    std::shared_ptr<Clock> clock_;
    mutable std::mutex mu_;
    std::list<Entry> order_;
    std::unordered_map<std::string, typename std::list<Entry>::iterator> index_;
};

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

struct StoreConfig {
    std::string athena_base_url = "https://athena.ohdsi.org";
    double rate_limit_rps = 5.0;
    std::chrono::seconds cache_ttl{86400};
    std::size_t cache_capacity = 10000;
    std::optional<std::filesystem::path> fixture_path;
    /// When false, a saturated rate limiter raises RateLimited instead of waiting.
    bool wait_for_rate_limit = true;

    /// Reads ATHENA_BASE_URL, ATHENA_RATE_LIMIT_RPS, ATHENA_CACHE_TTL_SECS, OMOP_MCP_FIXTURE.
    static StoreConfig from_env();
};

/// Backend plus response cache and upstream rate limiting. Safe for
/// concurrent readers.
class VocabularyStore {
public:
    VocabularyStore(std::shared_ptr<VocabularyBackend> backend, StoreConfig config = {},
                    std::shared_ptr<Clock> clock = system_clock());

    /// Fixture store when config.fixture_path is set, live Athena otherwise.
    static VocabularyStore open(const StoreConfig& config);

    CandidateSet search_concepts(const std::string& query, const SearchFilters& filters = {});

    /// nullopt means NotFound. Throws InvalidId for ids < 1.
    std::optional<Concept> get_concept(ConceptId id);

    /// Number of calls that reached the backend (cache misses).
    std::size_t backend_calls() const noexcept;
    bool is_remote() const { return backend_->is_remote(); }
    const StoreConfig& config() const noexcept { return config_; }
    VocabularyBackend& backend() noexcept { return *backend_; }

private:
    void before_backend_call();

    std::shared_ptr<VocabularyBackend> backend_;
    StoreConfig config_;
    std::shared_ptr<Clock> clock_;
    std::shared_ptr<RateLimiter> limiter_;
    std::shared_ptr<TtlLruCache<CandidateSet>> search_cache_;
    std::shared_ptr<TtlLruCache<std::optional<Concept>>> concept_cache_;
    std::shared_ptr<std::atomic<std::size_t>> backend_calls_;
};

struct FixtureIssue {
    std::size_t line = 0;
    std::string message;
    std::optional<ConceptId> duplicate_id;
};

struct FixtureReport {
    std::vector<Concept> concepts;
    std::vector<FixtureIssue> issues;
    std::size_t lines = 0;
};

/// Reads every line and collects all problems instead of stopping at the first.
FixtureReport validate_fixture(const std::filesystem::path& path);

/// Parses a newline-delimited JSON concept file. Blank lines are skipped.
/// Throws FixtureParseError or DuplicateConceptId on the first bad line.
std::vector<Concept> read_fixture(const std::filesystem::path& path);
std::vector<Concept> parse_fixture(std::istream& in);

VocabularyStore load_fixture(const std::filesystem::path& path, StoreConfig config = {});

void write_fixture(std::ostream& out, const std::vector<Concept>& concepts);

/// Canonical cache key for (query, filters).
std::string search_key(const std::string& query, const SearchFilters& filters);

}  // namespace omop_mcp
