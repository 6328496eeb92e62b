#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "reasonrank/corpus.hpp"
#include "reasonrank/errors.hpp"

namespace reasonrank {

namespace detail {

/// Regularized incomplete beta function I_x(a, b), evaluated with the
/// Lentz continued fraction. Converges to ~1e-15 for the arguments the
/// t-distribution produces; callers rely on 1e-9 or better.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;

    double qab = a + b;
    double qap = a + 1.0;
    double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double reg_incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - std::exp(std::lgamma(a + b) - std::lgamma(b) - std::lgamma(a) +
                          b * std::log(1.0 - x) + a * std::log(x)) *
                     betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
inline double student_t_two_tailed_p(double t, double df) {
    if (std::isinf(t)) return 0.0;
    double x = df / (df + t * t);
    return detail::reg_incomplete_beta(df / 2.0, 0.5, x);
}

struct TTestResult {
    double t = 0.0;
    std::size_t df = 0;
    double p = 1.0;
    bool significant_at_05 = false;
};

/// Paired t-test on aligned per-query values. Degenerate cases: all
/// differences zero -> (t=0, p=1); zero variance with nonzero mean ->
/// (t=+-inf, p=0).
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ValidationError("paired t-test requires aligned samples");
    std::size_t n = a.size();
    if (n < 2) throw ValidationError("paired t-test requires at least 2 samples");

    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    double var = ss / static_cast<double>(n - 1);

    TTestResult result;
    result.df = n - 1;
    if (var == 0.0) {
        if (mean == 0.0) {
            result.t = 0.0;
            result.p = 1.0;
        } else {
            result.t = mean > 0 ? std::numeric_limits<double>::infinity()
                                : -std::numeric_limits<double>::infinity();
            result.p = 0.0;
        }
    } else {
        result.t = mean / std::sqrt(var / static_cast<double>(n));
        result.p = student_t_two_tailed_p(result.t, static_cast<double>(result.df));
    }
    result.significant_at_05 = result.p < 0.05;
    return result;
}

inline nlohmann::json t_test_json(const TTestResult& r) {
    nlohmann::json j;
    j["t"] = std::isinf(r.t) ? nlohmann::json(r.t > 0 ? "inf" : "-inf") : nlohmann::json(r.t);
    j["df"] = r.df;
    j["p"] = r.p;
    j["significant_at_05"] = r.significant_at_05;
    return j;
}

/// NDCG@k with exponential gain (2^rel - 1) and log2(i+1) discount.
/// IDCG sorts the query's judged grades descending. Unjudged documents
/// count as grade 0; a query with no positive grade scores 0.
inline double ndcg_at_k(const std::vector<std::string>& ranking, const Qrels& qrels,
                        const std::string& query_id, std::size_t k) {
    if (k < 1) throw ValidationError("ndcg cutoff k must be >= 1");
    {
        std::unordered_set<std::string> seen;
        for (const auto& d : ranking) {
            if (!seen.insert(d).second)
                throw ValidationError("duplicate doc " + d + " in ranking for query " + query_id);
        }
    }

    const auto* judged = qrels.judged(query_id);
    if (judged == nullptr) return 0.0;

    std::vector<int> ideal;
    ideal.reserve(judged->size());
    for (const auto& [doc, grade] : *judged) ideal.push_back(grade);
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    if (ideal.empty() || ideal.front() <= 0) return 0.0;

    auto gain = [](int grade) { return std::exp2(static_cast<double>(grade)) - 1.0; };

    double dcg = 0.0;
    for (std::size_t i = 0; i < ranking.size() && i < k; ++i) {
        dcg += gain(qrels.grade(query_id, ranking[i])) / std::log2(static_cast<double>(i) + 2.0);
    }
    double idcg = 0.0;
    for (std::size_t i = 0; i < ideal.size() && i < k; ++i) {
        idcg += gain(ideal[i]) / std::log2(static_cast<double>(i) + 2.0);
    }
    return dcg / idcg;
}

/// Sentence BLEU over tokens: modified n-gram precisions for n=1..max_n,
/// add-1 smoothing for n >= 2, geometric mean, brevity penalty
/// min(1, e^{1-r/c}). An empty candidate scores 0.
inline double bleu(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference, int max_n = 4) {
    if (reference.empty()) throw ValidationError("bleu requires a non-empty reference");
    if (candidate.empty()) return 0.0;

    auto ngram_counts = [](const std::vector<std::string>& tokens, int n) {
        std::map<std::vector<std::string>, int> counts;
        if (static_cast<int>(tokens.size()) >= n) {
            for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
                counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)] += 1;
            }
        }
        return counts;
    };

    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        auto cand_counts = ngram_counts(candidate, n);
        auto ref_counts = ngram_counts(reference, n);
        long long matches = 0;
        long long total = 0;
        for (const auto& [gram, count] : cand_counts) {
            auto it = ref_counts.find(gram);
            int clip = it == ref_counts.end() ? 0 : it->second;
            matches += std::min(count, clip);
            total += count;
        }
        double precision;
        if (n == 1) {
            if (matches == 0) return 0.0;
            precision = static_cast<double>(matches) / static_cast<double>(total);
        } else {
            precision = static_cast<double>(matches + 1) / static_cast<double>(total + 1);
        }
        log_sum += std::log(precision);
    }
    double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(reference.size()) /
                                                 static_cast<double>(candidate.size())));
    return bp * std::exp(log_sum / max_n);
}

/// ROUGE-L F1 on tokens: P = LCS/|candidate|, R = LCS/|reference|,
/// F = 2PR/(P+R). An empty candidate scores 0.
inline double rouge_l(const std::vector<std::string>& candidate,
                      const std::vector<std::string>& reference) {
    if (reference.empty()) throw ValidationError("rouge_l requires a non-empty reference");
    if (candidate.empty()) return 0.0;

    std::size_t m = candidate.size();
    std::size_t n = reference.size();
    std::vector<std::size_t> prev(n + 1, 0), curr(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            if (candidate[i - 1] == reference[j - 1]) {
                curr[j] = prev[j - 1] + 1;
            } else {
                curr[j] = std::max(prev[j], curr[j - 1]);
            }
        }
        std::swap(prev, curr);
    }
    double lcs = static_cast<double>(prev[n]);
    if (lcs == 0.0) return 0.0;
    double p = lcs / static_cast<double>(m);
    double r = lcs / static_cast<double>(n);
    return 2.0 * p * r / (p + r);
}

/// Per-query metric values plus their arithmetic mean.
struct MetricReport {
    std::string name;
    std::size_t k = 0;  // cutoff, 0 when not applicable
    std::vector<std::pair<std::string, double>> per_query;
    double mean = 0.0;
};

inline MetricReport make_report(std::string name, std::size_t k,
                                std::vector<std::pair<std::string, double>> per_query) {
    MetricReport report;
    report.name = std::move(name);
    report.k = k;
    report.per_query = std::move(per_query);
    double sum = 0.0;
    for (const auto& [qid, v] : report.per_query) sum += v;
    report.mean = report.per_query.empty() ? 0.0 : sum / static_cast<double>(report.per_query.size());
    return report;
}

/// Percent with 2 decimals, the precision used in result tables.
inline std::string format_percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
    return buf;
}

inline void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << "query_id,value\n";
    for (const auto& [qid, v] : report.per_query) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        out << qid << ',' << buf << '\n';
    }
}

inline nlohmann::json report_summary_json(const MetricReport& report) {
    nlohmann::json j;
    j["metric"] = report.name;
    if (report.k > 0) j["k"] = report.k;
    j["queries"] = report.per_query.size();
    j["mean"] = report.mean;
    j["mean_percent"] = format_percent(report.mean);
    return j;
}

}  // namespace reasonrank
