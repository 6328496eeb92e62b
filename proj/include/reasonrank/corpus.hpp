#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "reasonrank/errors.hpp"

namespace reasonrank {

/// A corpus passage. doc_id is unique within a corpus; text is non-empty.
struct Document {
    std::string doc_id;
    std::string text;
    std::string title;  // optional, empty when absent
};

/// A search topic.
struct Query {
    std::string query_id;
    std::string text;
};

class Corpus {
public:
    void add(Document doc) {
        if (doc.doc_id.empty()) throw ValidationError("document with empty doc_id");
        if (doc.text.empty()) throw ValidationError("document " + doc.doc_id + " with empty text");
        auto [it, inserted] = by_id_.emplace(doc.doc_id, docs_.size());
        if (!inserted) throw ValidationError("duplicate doc_id " + doc.doc_id);
        docs_.push_back(std::move(doc));
    }

    std::size_t size() const { return docs_.size(); }
    bool empty() const { return docs_.empty(); }
    const Document& at(std::size_t i) const { return docs_.at(i); }
    const std::vector<Document>& docs() const { return docs_; }

    const Document* find(const std::string& doc_id) const {
        auto it = by_id_.find(doc_id);
        return it == by_id_.end() ? nullptr : &docs_[it->second];
    }

    std::optional<std::size_t> ordinal(const std::string& doc_id) const {
        auto it = by_id_.find(doc_id);
        if (it == by_id_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::vector<Document> docs_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

/// Graded relevance judgments, keyed (query_id, doc_id). Grades are
/// non-negative and capped at 15 so exponential NDCG gains cannot overflow.
class Qrels {
public:
    static constexpr int kMaxGrade = 15;

    void set(const std::string& query_id, const std::string& doc_id, int grade) {
        if (grade < 0) throw ValidationError("negative relevance grade for " + query_id + "/" + doc_id);
        if (grade > kMaxGrade)
            throw ValidationError("relevance grade " + std::to_string(grade) + " above cap " +
                                  std::to_string(kMaxGrade) + " for " + query_id + "/" + doc_id);
        judgments_[query_id][doc_id] = grade;
    }

    /// Grade for (query, doc); unjudged pairs count as 0.
    int grade(const std::string& query_id, const std::string& doc_id) const {
        auto qit = judgments_.find(query_id);
        if (qit == judgments_.end()) return 0;
        auto dit = qit->second.find(doc_id);
        return dit == qit->second.end() ? 0 : dit->second;
    }

    /// All judged (doc_id, grade) pairs for a query; nullptr when unjudged.
    const std::map<std::string, int>* judged(const std::string& query_id) const {
        auto it = judgments_.find(query_id);
        return it == judgments_.end() ? nullptr : &it->second;
    }

    std::size_t query_count() const { return judgments_.size(); }
    const std::map<std::string, std::map<std::string, int>>& all() const { return judgments_; }

private:
    std::map<std::string, std::map<std::string, int>> judgments_;
};

/// One line of a TREC run file: `qid Q0 docid rank score tag`.
struct RunEntry {
    std::string query_id;
    std::string doc_id;
    int rank = 0;  // 1-based
    double score = 0.0;
    std::string tag;

    bool operator==(const RunEntry& other) const {
        return query_id == other.query_id && doc_id == other.doc_id && rank == other.rank &&
               score == other.score && tag == other.tag;
    }
};

namespace detail {

inline bool blank_line(const std::string& line) {
    return line.find_first_not_of(" \t\r\n") == std::string::npos;
}

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

inline int parse_int(const std::string& s, const char* what, std::size_t line_no) {
    std::size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(s, &pos);
    } catch (const std::exception&) {
        throw ValidationError(std::string("non-integer ") + what + " '" + s + "' (line " +
                              std::to_string(line_no) + ")");
    }
    if (pos != s.size())
        throw ValidationError(std::string("non-integer ") + what + " '" + s + "' (line " +
                              std::to_string(line_no) + ")");
    return v;
}

inline double parse_double(const std::string& s, const char* what, std::size_t line_no) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ValidationError(std::string("bad ") + what + " '" + s + "' (line " +
                              std::to_string(line_no) + ")");
    }
    if (pos != s.size())
        throw ValidationError(std::string("bad ") + what + " '" + s + "' (line " +
                              std::to_string(line_no) + ")");
    return v;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    return in;
}

}  // namespace detail

/// Loads a JSONL corpus: one object per non-blank line with keys
/// "doc_id", "text" and optional "title". Order-preserving.
inline Corpus load_corpus(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::blank_line(line)) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw ValidationError("malformed JSON (line " + std::to_string(line_no) + ") in " +
                                  path.string());
        if (!j.contains("doc_id") || !j.contains("text"))
            throw ValidationError("missing doc_id/text (line " + std::to_string(line_no) + ") in " +
                                  path.string());
        Document doc;
        doc.doc_id = j.at("doc_id").get<std::string>();
        doc.text = j.at("text").get<std::string>();
        if (j.contains("title")) doc.title = j.at("title").get<std::string>();
        if (corpus.find(doc.doc_id) != nullptr)
            throw ValidationError("duplicate doc_id " + doc.doc_id + " (line " +
                                  std::to_string(line_no) + ")");
        corpus.add(std::move(doc));
    }
    return corpus;
}

/// Loads queries from tab-separated lines: `query_id<TAB>text`.
inline std::vector<Query> load_queries(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    std::vector<Query> queries;
    std::unordered_map<std::string, std::size_t> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::blank_line(line)) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
            throw ValidationError("expected 'query_id<TAB>text' (line " + std::to_string(line_no) +
                                  ") in " + path.string());
        Query q{line.substr(0, tab), line.substr(tab + 1)};
        if (!seen.emplace(q.query_id, line_no).second)
            throw ValidationError("duplicate query_id " + q.query_id + " (line " +
                                  std::to_string(line_no) + ")");
        queries.push_back(std::move(q));
    }
    return queries;
}

/// Loads TREC qrels: `qid 0 docid grade` per line.
inline Qrels load_qrels(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    Qrels qrels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::blank_line(line)) continue;
        auto fields = detail::split_ws(line);
        if (fields.size() != 4)
            throw ValidationError("expected 'qid 0 docid grade' (line " + std::to_string(line_no) +
                                  ") in " + path.string());
        int grade = detail::parse_int(fields[3], "grade", line_no);
        if (grade < 0)
            throw ValidationError("negative grade (line " + std::to_string(line_no) + ") in " +
                                  path.string());
        try {
            qrels.set(fields[0], fields[2], grade);
        } catch (const ValidationError& e) {
            throw ValidationError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
        }
    }
    return qrels;
}

/// Fixed 6-decimal score notation so run files round-trip bit-exactly.
inline std::string format_run_score(double score) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", score);
    return buf;
}

/// Loads a TREC run: `qid Q0 docid rank score tag`. Validates per-query
/// rank contiguity (1..n, no duplicates) and non-increasing scores.
inline std::vector<RunEntry> load_run(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    std::vector<RunEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::blank_line(line)) continue;
        auto fields = detail::split_ws(line);
        if (fields.size() != 6)
            throw ValidationError("expected 'qid Q0 docid rank score tag' (line " +
                                  std::to_string(line_no) + ") in " + path.string());
        RunEntry e;
        e.query_id = fields[0];
        e.doc_id = fields[2];
        e.rank = detail::parse_int(fields[3], "rank", line_no);
        if (e.rank < 1)
            throw ValidationError("rank " + std::to_string(e.rank) + " is not 1-based (line " +
                                  std::to_string(line_no) + ") in " + path.string());
        e.score = detail::parse_double(fields[4], "score", line_no);
        e.tag = fields[5];
        entries.push_back(std::move(e));
    }

    std::map<std::string, std::vector<const RunEntry*>> per_query;
    for (const auto& e : entries) per_query[e.query_id].push_back(&e);
    for (auto& [qid, group] : per_query) {
        std::vector<const RunEntry*> sorted = group;
        std::sort(sorted.begin(), sorted.end(),
                  [](const RunEntry* a, const RunEntry* b) { return a->rank < b->rank; });
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i]->rank != static_cast<int>(i) + 1)
                throw ValidationError("ranks for query " + qid + " are not contiguous 1.." +
                                      std::to_string(sorted.size()));
            if (i > 0 && sorted[i]->score > sorted[i - 1]->score)
                throw ValidationError("scores increase with rank for query " + qid);
        }
    }
    return entries;
}

inline void write_run(const std::vector<RunEntry>& entries, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    for (const auto& e : entries) {
        out << e.query_id << " Q0 " << e.doc_id << ' ' << e.rank << ' '
            << format_run_score(e.score) << ' ' << e.tag << '\n';
    }
}

}  // namespace reasonrank
