#include "omop_mcp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <sstream>

namespace omop_mcp {

namespace {

void require_score(RelevanceScore s) {
    if (s < 0 || s > 2) {
        throw std::invalid_argument("relevance score must be 0, 1 or 2, got " + std::to_string(s));
    }
}

struct SignedRanks {
    std::vector<double> ranks;  // average ranks of |d|
    std::vector<bool> positive;
    double tie_term = 0.0;      // sum over tie groups of t^3 - t
};

SignedRanks rank_differences(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw LengthMismatch("paired samples differ in length: " + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()));
    }
    if (a.empty()) throw DegenerateInput("no pairs");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (!std::isfinite(d)) throw std::invalid_argument("non-finite difference in pair");
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty()) throw DegenerateInput("all paired differences are zero");

    std::vector<std::size_t> order(diffs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::fabs(diffs[x]) < std::fabs(diffs[y]);
    });

    SignedRanks out;
    out.ranks.resize(diffs.size());
    out.positive.resize(diffs.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() &&
               std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) {
            ++j;
        }
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) out.ranks[order[k]] = avg;
        const double t = static_cast<double>(j - i + 1);
        out.tie_term += t * t * t - t;
        i = j + 1;
    }
    for (std::size_t k = 0; k < diffs.size(); ++k) out.positive[k] = diffs[k] > 0;
    return out;
}

double normal_z(double w_plus, std::size_t n, double tie_term) {
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) return 0.0;
    const double diff = w_plus - mean;
    const double corrected = std::max(0.0, std::fabs(diff) - 0.5);
    return std::copysign(corrected / std::sqrt(var), diff);
}

// Two-sided exact p from the null distribution of W+ over all 2^n sign
// assignments; ranks are doubled so tied half-ranks stay integral.
double exact_p(const SignedRanks& sr, double w_plus) {
    std::vector<int> doubled;
    int total = 0;
    for (const double r : sr.ranks) {
        doubled.push_back(static_cast<int>(std::lround(2.0 * r)));
        total += doubled.back();
    }
    std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
    counts[0] = 1.0;
    int reach = 0;
    for (const int r : doubled) {
        for (int s = reach; s >= 0; --s) {
            if (counts[s] != 0.0) counts[s + r] += counts[s];
        }
        reach += r;
    }
    const int observed = static_cast<int>(std::lround(2.0 * w_plus));
    const double all = std::ldexp(1.0, static_cast<int>(sr.ranks.size()));
    double lower = 0.0;
    double upper = 0.0;
    for (int s = 0; s <= total; ++s) {
        if (s <= observed) lower += counts[s];
        if (s >= observed) upper += counts[s];
    }
    return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

WilcoxonResult signed_rank(std::span<const double> a, std::span<const double> b,
                           bool allow_exact) {
    const auto sr = rank_differences(a, b);
    WilcoxonResult r;
    r.n_pairs = sr.ranks.size();
    for (std::size_t i = 0; i < sr.ranks.size(); ++i) {
        (sr.positive[i] ? r.w_plus : r.w_minus) += sr.ranks[i];
    }
    r.w_statistic = std::min(r.w_plus, r.w_minus);
    r.z_value = normal_z(r.w_plus, r.n_pairs, sr.tie_term);
    r.exact = allow_exact && r.n_pairs <= kExactWilcoxonMaxN;
    if (r.exact) {
        r.p_value = exact_p(sr, r.w_plus);
    } else {
        r.p_value = std::min(1.0, std::erfc(std::fabs(r.z_value) / std::sqrt(2.0)));
    }
    r.effect_r_z = r.z_value / std::sqrt(static_cast<double>(r.n_pairs));
    r.effect_r_rb = (r.w_plus - r.w_minus) / (r.w_plus + r.w_minus);
    return r;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> header_fields(const std::string& line) {
    auto fields = split_csv_line(line);
    for (auto& f : fields) f = trim(f);
    if (!fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) fields[0].erase(0, 3);
    return fields;
}

const std::vector<std::string> kRecordsHeader{"term", "outcome", "relevance", "elapsed_seconds"};
const std::vector<std::string> kPairedHeader{"term", "system_score", "human_score"};

RelevanceScore parse_score(const std::string& text, std::size_t row, const char* column) {
    const auto t = trim(text);
    if (t.size() != 1 || t[0] < '0' || t[0] > '2') {
        throw CsvSchemaError(row, std::string(column) + " must be 0, 1 or 2, got \"" + t + "\"");
    }
    return t[0] - '0';
}

template <typename RowFn>
void read_rows(std::istream& in, const std::vector<std::string>& expected_header, RowFn on_row) {
    std::string line;
    if (!std::getline(in, line) || header_fields(line) != expected_header) {
        std::string want;
        for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
        throw CsvSchemaError(0, "header must be " + want);
    }
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        ++row;
        const auto fields = split_csv_line(line);
        if (fields.size() != expected_header.size()) {
            throw CsvSchemaError(row, "expected " + std::to_string(expected_header.size()) +
                                          " columns, got " + std::to_string(fields.size()));
        }
        on_row(row, fields);
    }
}

json histogram_json(const std::array<std::size_t, 3>& h, std::size_t n) {
    json percents = json::array();
    for (const auto c : h) {
        percents.push_back(n ? format_percent(static_cast<double>(c) / static_cast<double>(n))
                             : std::string("n/a"));
    }
    return json{{"counts", h}, {"percent", percents}};
}

}  // namespace

void validate(const EvalRecord& r) {
    if (r.relevance) {
        if (r.outcome != OutcomeClass::Success) {
            throw std::invalid_argument("relevance is only defined for successful retrievals");
        }
        require_score(*r.relevance);
    }
    if (!(r.elapsed_seconds >= 0.0)) throw std::invalid_argument("elapsed_seconds must be >= 0");
}

std::size_t AgreementMatrix::total() const {
    std::size_t t = 0;
    for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), std::size_t{0});
    return t;
}

std::array<std::size_t, 3> AgreementMatrix::system_marginals() const {
    std::array<std::size_t, 3> m{};
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) m[i] += counts[i][j];
    }
    return m;
}

std::array<std::size_t, 3> AgreementMatrix::human_marginals() const {
    std::array<std::size_t, 3> m{};
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) m[j] += counts[i][j];
    }
    return m;
}

double retrieval_success_rate(std::span<const EvalRecord> records) {
    if (records.empty()) throw std::invalid_argument("retrieval success rate of an empty run");
    const auto ok = std::count_if(records.begin(), records.end(), [](const EvalRecord& r) {
        return r.outcome == OutcomeClass::Success;
    });
    return static_cast<double>(ok) / static_cast<double>(records.size());
}

std::map<FailureKind, FailureShare> failure_distribution(std::span<const EvalRecord> records) {
    std::map<FailureKind, FailureShare> out{{FailureKind::NoMappingFound, {}},
                                            {FailureKind::NonExistentConceptId, {}},
                                            {FailureKind::ConceptIdNameMismatch, {}}};
    for (const auto& r : records) {
        switch (r.outcome) {
            case OutcomeClass::Success: break;
            case OutcomeClass::NoMappingFound: ++out[FailureKind::NoMappingFound].count; break;
            case OutcomeClass::NonExistentConceptId:
                ++out[FailureKind::NonExistentConceptId].count;
                break;
            case OutcomeClass::ConceptIdNameMismatch:
                ++out[FailureKind::ConceptIdNameMismatch].count;
                break;
        }
    }
    if (!records.empty()) {
        for (auto& [kind, share] : out) {
            share.fraction = static_cast<double>(share.count) / static_cast<double>(records.size());
        }
    }
    return out;
}

double mean_relevance(std::span<const EvalRecord> records) {
    std::vector<RelevanceScore> scores;
    for (const auto& r : records) {
        if (r.relevance) scores.push_back(*r.relevance);
    }
    if (scores.empty()) throw std::invalid_argument("no records carry a relevance score");
    return mean_score(scores);
}

double mean_score(std::span<const RelevanceScore> scores) {
    if (scores.empty()) throw std::invalid_argument("mean of no scores");
    long sum = 0;
    for (const auto s : scores) {
        require_score(s);
        sum += s;
    }
    return static_cast<double>(sum) / static_cast<double>(scores.size());
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
    return signed_rank(a, b, true);
}

WilcoxonResult wilcoxon_signed_rank_normal(std::span<const double> a, std::span<const double> b) {
    return signed_rank(a, b, false);
}

AgreementMatrix agreement_matrix(std::span<const RelevanceScore> system,
                                 std::span<const RelevanceScore> human) {
    if (system.size() != human.size()) {
        throw LengthMismatch("system and human score lists differ in length");
    }
    AgreementMatrix m;
    for (std::size_t i = 0; i < system.size(); ++i) {
        require_score(system[i]);
        require_score(human[i]);
        ++m.counts[system[i]][human[i]];
    }
    return m;
}

TimingSummary timing_summary(std::span<const double> elapsed) {
    if (elapsed.empty()) throw std::invalid_argument("timing summary of an empty run");
    const double n = static_cast<double>(elapsed.size());
    const double mean = std::accumulate(elapsed.begin(), elapsed.end(), 0.0) / n;
    if (elapsed.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (const double x : elapsed) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    return {mean, sd / std::sqrt(n)};
}

TimingSummary timing_summary(std::span<const EvalRecord> records) {
    std::vector<double> elapsed;
    elapsed.reserve(records.size());
    for (const auto& r : records) elapsed.push_back(r.elapsed_seconds);
    return timing_summary(elapsed);
}

RelevanceScore highest_of_multiple(std::span<const RelevanceScore> scores) {
    if (scores.empty()) throw std::invalid_argument("term has no scored mappings");
    for (const auto s : scores) require_score(s);
    return *std::max_element(scores.begin(), scores.end());
}

std::string format_fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    return buf;
}

std::string format_percent(double fraction) { return format_fixed(100.0 * fraction, 1) + "%"; }

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur.push_back('"');
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r' || i + 1 != line.size()) {
            cur.push_back(ch);
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

CsvKind detect_csv_kind(const std::string& header_line) {
    const auto fields = header_fields(header_line);
    if (fields == kRecordsHeader) return CsvKind::Records;
    if (fields == kPairedHeader) return CsvKind::Paired;
    throw CsvSchemaError(0, "unrecognised header; expected term,outcome,relevance,elapsed_seconds "
                            "or term,system_score,human_score");
}

std::vector<EvalRecord> read_records_csv(std::istream& in) {
    std::vector<EvalRecord> records;
    read_rows(in, kRecordsHeader, [&](std::size_t row, const std::vector<std::string>& f) {
        EvalRecord r;
        r.term = f[0];
        const auto outcome = outcome_class_from_string(trim(f[1]));
        if (!outcome) throw CsvSchemaError(row, "unknown outcome \"" + trim(f[1]) + "\"");
        r.outcome = *outcome;
        if (!trim(f[2]).empty()) {
            if (r.outcome != OutcomeClass::Success) {
                throw CsvSchemaError(row, "relevance must be blank unless outcome is success");
            }
            r.relevance = parse_score(f[2], row, "relevance");
        }
        const auto t = trim(f[3]);
        char* end = nullptr;
        r.elapsed_seconds = std::strtod(t.c_str(), &end);
        if (t.empty() || *end != '\0' || !(r.elapsed_seconds >= 0.0)) {
            throw CsvSchemaError(row, "elapsed_seconds must be a nonnegative number");
        }
        records.push_back(std::move(r));
    });
    return records;
}

std::vector<PairedScore> read_paired_csv(std::istream& in) {
    std::vector<PairedScore> pairs;
    read_rows(in, kPairedHeader, [&](std::size_t row, const std::vector<std::string>& f) {
        pairs.push_back(PairedScore{f[0], parse_score(f[1], row, "system_score"),
                                    parse_score(f[2], row, "human_score")});
    });
    return pairs;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

json records_report(std::span<const EvalRecord> records) {
    json report{{"kind", "records"}, {"n", records.size()}};
    const auto successes = std::count_if(records.begin(), records.end(), [](const EvalRecord& r) {
        return r.outcome == OutcomeClass::Success;
    });
    report["successes"] = successes;
    if (records.empty()) {
        report["retrieval_success_rate"] = nullptr;
        report["retrieval_success"] = "n/a";
    } else {
        const double rate = retrieval_success_rate(records);
        report["retrieval_success_rate"] = rate;
        report["retrieval_success"] = format_percent(rate);
    }
    json failures = json::object();
    for (const auto& [kind, share] : failure_distribution(records)) {
        failures[std::string(to_string(kind))] = {
            {"count", share.count},
            {"fraction", share.fraction},
            {"percent", records.empty() ? std::string("n/a") : format_percent(share.fraction)}};
    }
    report["failure_distribution"] = failures;

    std::array<std::size_t, 3> hist{};
    std::size_t scored = 0;
    for (const auto& r : records) {
        if (r.relevance) {
            ++hist[static_cast<std::size_t>(*r.relevance)];
            ++scored;
        }
    }
    if (scored > 0) {
        const double m = mean_relevance(records);
        report["relevance"] = {{"n", scored},
                               {"mean", m},
                               {"mean_rendered", format_fixed(m, 2)},
                               {"histogram", histogram_json(hist, scored)}};
    } else {
        report["relevance"] = nullptr;
    }
    if (!records.empty()) {
        const auto t = timing_summary(records);
        report["timing"] = {{"mean_seconds", t.mean},
                            {"sem_seconds", t.sem},
                            {"rendered", format_fixed(t.mean, 2) + " ± " + format_fixed(t.sem, 2) + " s"}};
    } else {
        report["timing"] = nullptr;
    }
    return report;
}

json paired_report(std::span<const PairedScore> pairs) {
    std::vector<RelevanceScore> system;
    std::vector<RelevanceScore> human;
    for (const auto& p : pairs) {
        system.push_back(p.system);
        human.push_back(p.human);
    }
    json report{{"kind", "paired"}, {"n", pairs.size()}};
    const auto m = agreement_matrix(system, human);
    report["agreement_matrix"] = m.counts;
    for (const auto& [name, scores, marg] :
         {std::tuple{"system", &system, m.system_marginals()},
          std::tuple{"human", &human, m.human_marginals()}}) {
        json side{{"histogram", histogram_json(marg, pairs.size())}};
        if (!scores->empty()) {
            const double mean = mean_score(*scores);
            side["mean"] = mean;
            side["mean_rendered"] = format_fixed(mean, 2);
        } else {
            side["mean"] = nullptr;
        }
        report[name] = side;
    }

    std::vector<double> a(system.begin(), system.end());
    std::vector<double> b(human.begin(), human.end());
    try {
        const auto w = wilcoxon_signed_rank(a, b);
        report["wilcoxon"] = {{"n_pairs", w.n_pairs},       {"w_plus", w.w_plus},
                              {"w_minus", w.w_minus},       {"w_statistic", w.w_statistic},
                              {"z_value", w.z_value},       {"p_value", w.p_value},
                              {"method", w.exact ? "exact" : "normal"},
                              {"effect_r_z", w.effect_r_z}, {"effect_r_rb", w.effect_r_rb}};
    } catch (const std::invalid_argument& e) {
        report["wilcoxon"] = {{"error", e.what()}};
    }
    return report;
}

std::string render_records_summary(const json& report) {
    std::ostringstream os;
    os << "terms                 " << report.at("n").get<std::size_t>() << '\n'
       << "retrieval success     " << report.at("retrieval_success").get<std::string>() << " ("
       << report.at("successes").get<std::size_t>() << '/' << report.at("n").get<std::size_t>()
       << ")\n";
    for (const auto& [kind, share] : report.at("failure_distribution").items()) {
        char label[32];
        std::snprintf(label, sizeof label, "%-22s", kind.c_str());
        os << label << share.at("percent").get<std::string>() << " ("
           << share.at("count").get<std::size_t>() << ")\n";
    }
    if (!report.at("relevance").is_null()) {
        os << "mean relevance        " << report.at("relevance").at("mean_rendered").get<std::string>()
           << '\n';
    }
    if (!report.at("timing").is_null()) {
        os << "time per term         " << report.at("timing").at("rendered").get<std::string>()
           << '\n';
    }
    return os.str();
}

std::string render_paired_summary(const json& report) {
    std::ostringstream os;
    const auto n = report.at("n").get<std::size_t>();
    os << "pairs                 " << n << '\n';
    for (const char* side : {"system", "human"}) {
        const auto& s = report.at(side);
        os << side << (std::string_view(side) == "system" ? "                " : "                 ")
           << "mean " << (s.at("mean").is_null() ? "n/a" : s.at("mean_rendered").get<std::string>());
        const auto& counts = s.at("histogram").at("counts");
        const auto& pct = s.at("histogram").at("percent");
        for (std::size_t k = 0; k < 3; ++k) {
            os << "  score" << k << ' ' << pct.at(k).get<std::string>() << " ("
               << counts.at(k).get<std::size_t>() << ')';
        }
        os << '\n';
    }
    os << "agreement (rows system 0-2, cols human 0-2)\n";
    for (const auto& row : report.at("agreement_matrix")) {
        os << "  ";
        for (const auto& c : row) {
            char cell[16];
            std::snprintf(cell, sizeof cell, "%6zu", c.get<std::size_t>());
            os << cell;
        }
        os << '\n';
    }
    const auto& w = report.at("wilcoxon");
    if (w.contains("error")) {
        os << "wilcoxon              " << w.at("error").get<std::string>() << '\n';
    } else {
        os << "wilcoxon (" << w.at("method").get<std::string>() << ")      W="
           << format_fixed(w.at("w_statistic").get<double>(), 1)
           << " z=" << format_fixed(w.at("z_value").get<double>(), 3)
           << " p=" << format_fixed(w.at("p_value").get<double>(), 4)
           << " r(z/sqrt n)=" << format_fixed(w.at("effect_r_z").get<double>(), 3)
           << " r(rank-biserial)=" << format_fixed(w.at("effect_r_rb").get<double>(), 3) << '\n';
    }
    return os.str();
}

}  // namespace omop_mcp
