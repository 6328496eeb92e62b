#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "reasonrank/bm25.hpp"
#include "reasonrank/errors.hpp"
#include "reasonrank/prompt.hpp"

namespace reasonrank {

/// Defects observed in one teacher response, before repair.
struct RankingDefects {
    std::vector<int> duplicates;    // one entry per extra occurrence
    std::vector<int> missing;       // expected ids never mentioned
    std::vector<int> out_of_range;  // ids outside the expected set
    bool retried_parse = false;

    bool clean() const { return duplicates.empty() && missing.empty() && out_of_range.empty(); }
};

/// Parsed teacher output: ranked identifiers plus per-identifier reasons.
/// The order is kept as emitted (defects and all); repair_order produces
/// the usable permutation.
struct ReasonedRanking {
    std::string query_id;
    std::vector<int> order;
    std::map<int, std::string> direct_reasons;
    std::map<int, std::string> listwise_reasons;
    std::vector<std::string> keywords;
    RankingDefects defects;
};

/// Extracts the first parseable JSON value from free-form model output.
/// Tolerates leading/trailing prose and fenced code blocks: every balanced
/// {...} or [...] candidate is tried in order until one parses.
inline std::optional<nlohmann::json> extract_first_json(const std::string& text) {
    {
        nlohmann::json whole = nlohmann::json::parse(text, nullptr, false);
        if (!whole.is_discarded()) return whole;
    }
    for (std::size_t start = 0; start < text.size(); ++start) {
        char open = text[start];
        if (open != '{' && open != '[') continue;
        char close = open == '{' ? '}' : ']';
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            char c = text[i];
            if (escaped) {
                escaped = false;
                continue;
            }
            if (c == '\\') {
                escaped = in_string;
                continue;
            }
            if (c == '"') {
                in_string = !in_string;
                continue;
            }
            if (in_string) continue;
            if (c == open) ++depth;
            if (c == close) {
                --depth;
                if (depth == 0) {
                    nlohmann::json candidate =
                        nlohmann::json::parse(text.substr(start, i - start + 1), nullptr, false);
                    if (!candidate.is_discarded()) return candidate;
                    break;  // unbalanced inner syntax; resume scanning after `start`
                }
            }
        }
    }
    return std::nullopt;
}

namespace detail {

/// Accepts 3, "3", "[3]", "passage 3" — anything with exactly one digit run.
inline std::optional<int> coerce_identifier(const nlohmann::json& v) {
    if (v.is_number_integer()) return v.get<int>();
    if (v.is_number_float()) {
        double d = v.get<double>();
        if (d == std::floor(d)) return static_cast<int>(d);
        return std::nullopt;
    }
    if (v.is_string()) {
        const std::string& s = v.get<std::string>();
        std::string digits;
        bool in_run = false;
        int runs = 0;
        for (char c : s) {
            if (std::isdigit(static_cast<unsigned char>(c))) {
                if (!in_run) {
                    ++runs;
                    in_run = true;
                }
                digits.push_back(c);
            } else {
                in_run = false;
            }
        }
        if (runs != 1 || digits.empty() || digits.size() > 9) return std::nullopt;
        return std::stoi(digits);
    }
    return std::nullopt;
}

inline std::string reason_text(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

}  // namespace detail

/// Parses one teacher response against the window's expected identifier
/// set. Never fails on semantically bad orders; only unrecoverable syntax
/// (no JSON value at all) throws ResponseParseError.
///
/// Accepted schema: a JSON object with a "ranking" array (identifiers as
/// numbers or strings) plus optional "reasons" and "keywords"; a bare
/// array is treated as the ranking. A "reasons" entry may be a string
/// (direct reason) or an object with "direct"/"listwise" keys. Unknown
/// keys are ignored.
inline ReasonedRanking parse_ranking_response(const std::string& text,
                                              const std::vector<int>& expected_ids,
                                              const std::string& query_id = {}) {
    auto value = extract_first_json(text);
    if (!value.has_value())
        throw ResponseParseError("no JSON value found in response" +
                                 (query_id.empty() ? "" : " for query " + query_id));

    ReasonedRanking result;
    result.query_id = query_id;

    const nlohmann::json& j = *value;
    const nlohmann::json* ranking = nullptr;
    if (j.is_array()) {
        ranking = &j;
    } else if (j.is_object() && j.contains("ranking") && j.at("ranking").is_array()) {
        ranking = &j.at("ranking");
    }

    std::set<int> expected(expected_ids.begin(), expected_ids.end());
    std::set<int> seen;
    if (ranking != nullptr) {
        for (const auto& item : *ranking) {
            auto id = detail::coerce_identifier(item);
            if (!id.has_value()) continue;
            if (expected.find(*id) == expected.end()) {
                result.defects.out_of_range.push_back(*id);
                continue;
            }
            if (!seen.insert(*id).second) result.defects.duplicates.push_back(*id);
            result.order.push_back(*id);
        }
    }
    for (int id : expected_ids) {
        if (seen.find(id) == seen.end()) result.defects.missing.push_back(id);
    }

    if (j.is_object()) {
        if (j.contains("reasons") && j.at("reasons").is_object()) {
            for (const auto& [key, v] : j.at("reasons").items()) {
                auto id = detail::coerce_identifier(nlohmann::json(key));
                if (!id.has_value()) continue;
                if (v.is_object()) {
                    if (v.contains("direct")) result.direct_reasons[*id] = detail::reason_text(v.at("direct"));
                    if (v.contains("listwise"))
                        result.listwise_reasons[*id] = detail::reason_text(v.at("listwise"));
                } else {
                    result.direct_reasons[*id] = detail::reason_text(v);
                }
            }
        }
        if (j.contains("keywords")) {
            const auto& kw = j.at("keywords");
            if (kw.is_array()) {
                for (const auto& item : kw) {
                    if (item.is_string()) result.keywords.push_back(item.get<std::string>());
                }
            } else if (kw.is_object()) {
                for (const auto& [key, v] : kw.items()) {
                    if (v.is_string()) {
                        result.keywords.push_back(v.get<std::string>());
                    } else if (v.is_array()) {
                        for (const auto& item : v) {
                            if (item.is_string()) result.keywords.push_back(item.get<std::string>());
                        }
                    }
                }
            }
        }
    }

    // reason keys exist for every ranked identifier, empty when not provided
    for (int id : result.order) {
        result.direct_reasons.emplace(id, "");
        result.listwise_reasons.emplace(id, "");
    }
    return result;
}

/// Conservative repair: de-duplicate keeping the first occurrence, drop
/// out-of-range ids, append missing ids in fallback (first-stage) order.
/// The result is always a permutation of expected_ids.
inline std::vector<int> repair_order(const std::vector<int>& order,
                                     const std::vector<int>& expected_ids,
                                     const std::vector<int>& fallback_order) {
    std::set<int> expected(expected_ids.begin(), expected_ids.end());
    std::vector<int> repaired;
    repaired.reserve(expected_ids.size());
    std::set<int> used;
    for (int id : order) {
        if (expected.find(id) == expected.end()) continue;
        if (used.insert(id).second) repaired.push_back(id);
    }
    for (int id : fallback_order) {
        if (expected.find(id) == expected.end()) continue;
        if (used.insert(id).second) repaired.push_back(id);
    }
    // fallback may itself be defective; cover any ids it missed
    for (int id : expected_ids) {
        if (used.insert(id).second) repaired.push_back(id);
    }
    return repaired;
}

/// One window's repaired permutation, positioned in the full list.
struct WindowRanking {
    WindowSpan span;
    std::vector<int> order;  // permutation of 1..span.size
};

/// Applies each window's permutation to the working list in emission
/// order (back-to-front). Identifier i in a window addresses working-list
/// position span.offset + i - 1 at apply time, which is how a later
/// (front) window can promote a document an earlier window pulled into
/// the overlap. Scores are reassigned as descending ranks.
inline RankedList merge_windows(const std::vector<WindowRanking>& window_rankings,
                                const RankedList& first_stage) {
    std::vector<std::string> working;
    working.reserve(first_stage.entries.size());
    for (const auto& e : first_stage.entries) working.push_back(e.doc_id);

    for (const auto& wr : window_rankings) {
        if (wr.span.offset + wr.span.size > working.size())
            throw ValidationError("window [" + std::to_string(wr.span.offset) + ", +" +
                                  std::to_string(wr.span.size) + ") exceeds list of size " +
                                  std::to_string(working.size()));
        if (wr.order.size() != wr.span.size)
            throw ValidationError("window ranking size " + std::to_string(wr.order.size()) +
                                  " does not match window size " + std::to_string(wr.span.size));
        std::set<int> ids(wr.order.begin(), wr.order.end());
        if (ids.size() != wr.order.size() || *ids.begin() < 1 ||
            *ids.rbegin() > static_cast<int>(wr.span.size))
            throw ValidationError("window ranking is not a permutation of 1.." +
                                  std::to_string(wr.span.size));
        std::vector<std::string> slice(wr.span.size);
        for (std::size_t i = 0; i < wr.span.size; ++i) {
            slice[i] = working[wr.span.offset + static_cast<std::size_t>(wr.order[i]) - 1];
        }
        std::copy(slice.begin(), slice.end(), working.begin() + static_cast<std::ptrdiff_t>(wr.span.offset));
    }

    RankedList merged;
    merged.query_id = first_stage.query_id;
    merged.entries.reserve(working.size());
    std::size_t n = working.size();
    for (std::size_t i = 0; i < n; ++i) {
        merged.entries.push_back({working[i], static_cast<double>(n - i)});
    }
    return merged;
}

/// Aggregate defect rates over a batch of queries. Duplicates are counted
/// per occurrence, missing documents per affected query.
struct BehaviorStats {
    std::size_t query_count = 0;
    std::size_t duplicate_occurrences = 0;
    std::size_t queries_with_missing = 0;
    std::size_t missing_documents = 0;
    std::size_t out_of_range_occurrences = 0;
    double duplicate_rate_percent = 0.0;
    double missing_rate_percent = 0.0;

    /// Integer-percent rounding used in reports.
    static long rounded(double percent) { return std::lround(percent); }
};

inline BehaviorStats analyze_behavior(const std::vector<RankingDefects>& batch) {
    if (batch.empty()) throw ValidationError("behavior analysis requires a non-empty batch");
    BehaviorStats stats;
    stats.query_count = batch.size();
    for (const auto& d : batch) {
        stats.duplicate_occurrences += d.duplicates.size();
        stats.missing_documents += d.missing.size();
        stats.out_of_range_occurrences += d.out_of_range.size();
        if (!d.missing.empty()) ++stats.queries_with_missing;
    }
    stats.duplicate_rate_percent =
        100.0 * static_cast<double>(stats.duplicate_occurrences) / static_cast<double>(stats.query_count);
    stats.missing_rate_percent =
        100.0 * static_cast<double>(stats.queries_with_missing) / static_cast<double>(stats.query_count);
    return stats;
}

inline nlohmann::json behavior_report_json(const BehaviorStats& stats) {
    nlohmann::json j;
    j["query_count"] = stats.query_count;
    j["repetition"] = {{"duplicate_identifier_occurrences", stats.duplicate_occurrences},
                       {"rate_percent", BehaviorStats::rounded(stats.duplicate_rate_percent)},
                       {"rate_percent_exact", stats.duplicate_rate_percent}};
    j["missing_documents"] = {{"queries_affected", stats.queries_with_missing},
                              {"documents_missing", stats.missing_documents},
                              {"rate_percent", BehaviorStats::rounded(stats.missing_rate_percent)},
                              {"rate_percent_exact", stats.missing_rate_percent}};
    j["out_of_range_occurrences"] = stats.out_of_range_occurrences;
    return j;
}

}  // namespace reasonrank
