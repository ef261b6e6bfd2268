#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omop_mcp/grounding.hpp"

namespace omop_mcp {

/// Relevance: 0 completely wrong, 1 reasonable/usable, 2 optimal.
using RelevanceScore = int;

struct EvalRecord {
    std::string term;
    OutcomeClass outcome = OutcomeClass::Success;
    std::optional<RelevanceScore> relevance;
    double elapsed_seconds = 0.0;
};

/// Throws std::invalid_argument if relevance is set on a failure, is
/// outside 0..2, or elapsed is negative.
void validate(const EvalRecord& r);

struct WilcoxonResult {
    std::size_t n_pairs = 0;      // after dropping zero differences
    double w_plus = 0.0;
    double w_minus = 0.0;
    double w_statistic = 0.0;     // min(w_plus, w_minus)
    double z_value = 0.0;         // signed; positive when a tends to exceed b
    double p_value = 1.0;         // two-sided
    bool exact = false;
    double effect_r_z = 0.0;      // z / sqrt(n_pairs)
    double effect_r_rb = 0.0;     // (w_plus - w_minus) / (w_plus + w_minus)
};

class DegenerateInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class LengthMismatch : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct AgreementMatrix {
    /// counts[system][human]
    std::array<std::array<std::size_t, 3>, 3> counts{};

    std::size_t total() const;
    std::array<std::size_t, 3> system_marginals() const;  // row sums
    std::array<std::size_t, 3> human_marginals() const;   // column sums
    bool operator==(const AgreementMatrix&) const = default;
};

struct FailureShare {
    std::size_t count = 0;
    double fraction = 0.0;
};

struct TimingSummary {
    double mean = 0.0;
    double sem = 0.0;
};

/// Largest n for which the exact null distribution is enumerated.
inline constexpr std::size_t kExactWilcoxonMaxN = 25;

double retrieval_success_rate(std::span<const EvalRecord> records);
std::map<FailureKind, FailureShare> failure_distribution(std::span<const EvalRecord> records);
double mean_relevance(std::span<const EvalRecord> records);
double mean_score(std::span<const RelevanceScore> scores);

/// Two-sided signed-rank test on differences a - b. Zero differences are
/// dropped; ties get average ranks. Exact for n <= kExactWilcoxonMaxN,
/// otherwise a tie-corrected normal approximation with continuity correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

/// Same, forcing the normal approximation regardless of n.
WilcoxonResult wilcoxon_signed_rank_normal(std::span<const double> a, std::span<const double> b);

AgreementMatrix agreement_matrix(std::span<const RelevanceScore> system,
                                 std::span<const RelevanceScore> human);

TimingSummary timing_summary(std::span<const double> elapsed_seconds);
TimingSummary timing_summary(std::span<const EvalRecord> records);

/// Best relevance among one term's alternative mappings.
RelevanceScore highest_of_multiple(std::span<const RelevanceScore> scores);

/// "94.7%": one decimal place.
std::string format_percent(double fraction);
/// Fixed decimals, e.g. format_fixed(1.6127, 2) == "1.61".
std::string format_fixed(double value, int decimals);

// ---------------------------------------------------------------------------
// CSV inputs and reports
// ---------------------------------------------------------------------------

struct PairedScore {
    std::string term;
    RelevanceScore system = 0;
    RelevanceScore human = 0;
};

class CsvSchemaError : public std::runtime_error {
public:
    CsvSchemaError(std::size_t row, const std::string& message)
        : std::runtime_error(row == 0 ? message : "row " + std::to_string(row) + ": " + message),
          row_(row) {}
    /// 1-based data row (header is row 0).
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

enum class CsvKind { Records, Paired };

/// Splits one CSV line, honouring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

/// Detects the schema from the header: term,outcome,relevance,elapsed_seconds
/// or term,system_score,human_score.
CsvKind detect_csv_kind(const std::string& header_line);

std::vector<EvalRecord> read_records_csv(std::istream& in);
std::vector<PairedScore> read_paired_csv(std::istream& in);

json records_report(std::span<const EvalRecord> records);
json paired_report(std::span<const PairedScore> pairs);
std::string render_records_summary(const json& report);
std::string render_paired_summary(const json& report);

}  // namespace omop_mcp
