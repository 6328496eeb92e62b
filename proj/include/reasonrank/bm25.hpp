#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "reasonrank/corpus.hpp"
#include "reasonrank/errors.hpp"

namespace reasonrank {

/// Lowercases and splits on non-alphanumeric runs; empty tokens dropped.
/// ASCII-oriented: bytes outside [0-9A-Za-z] are separators, so non-Latin
/// scripts pass through as single runs of their alphanumeric bytes.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

struct Posting {
    std::uint32_t doc = 0;  // document ordinal
    std::uint32_t tf = 0;

    bool operator==(const Posting&) const = default;
};

struct Bm25Params {
    double k1 = 0.9;
    double b = 0.4;
};

/// Candidate list for one query; scores non-increasing, doc_ids unique.
struct ScoredDoc {
    std::string doc_id;
    double score = 0.0;
};

struct RankedList {
    std::string query_id;
    std::vector<ScoredDoc> entries;
};

class InvertedIndex {
public:
    static InvertedIndex build(const Corpus& corpus) {
        if (corpus.empty()) throw ValidationError("cannot build index from empty corpus");
        InvertedIndex index;
        index.doc_ids_.reserve(corpus.size());
        index.doc_lengths_.reserve(corpus.size());
        std::uint64_t total_len = 0;
        for (std::size_t ord = 0; ord < corpus.size(); ++ord) {
            const Document& doc = corpus.at(ord);
            auto tokens = tokenize(doc.text);
            index.doc_ids_.push_back(doc.doc_id);
            index.doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
            total_len += tokens.size();
            std::map<std::string, std::uint32_t> counts;
            for (auto& t : tokens) ++counts[t];
            for (auto& [term, tf] : counts) {
                // docs are visited in ordinal order, so postings stay sorted
                index.postings_[term].push_back(Posting{static_cast<std::uint32_t>(ord), tf});
            }
        }
        index.avgdl_ = static_cast<double>(total_len) / static_cast<double>(corpus.size());
        return index;
    }

    std::size_t doc_count() const { return doc_ids_.size(); }
    double avgdl() const { return avgdl_; }
    std::uint32_t doc_length(std::uint32_t ord) const { return doc_lengths_.at(ord); }
    const std::string& doc_id(std::uint32_t ord) const { return doc_ids_.at(ord); }

    const std::vector<Posting>* postings(const std::string& term) const {
        auto it = postings_.find(term);
        return it == postings_.end() ? nullptr : &it->second;
    }

    std::size_t document_frequency(const std::string& term) const {
        auto it = postings_.find(term);
        return it == postings_.end() ? 0 : it->second.size();
    }

    std::size_t term_count() const { return postings_.size(); }

    std::uint64_t total_postings() const {
        std::uint64_t n = 0;
        for (const auto& [term, plist] : postings_) n += plist.size();
        return n;
    }

    std::uint32_t term_frequency(const std::string& term, std::uint32_t ord) const {
        const auto* plist = postings(term);
        if (plist == nullptr) return 0;
        auto it = std::lower_bound(plist->begin(), plist->end(), ord,
                                   [](const Posting& p, std::uint32_t d) { return p.doc < d; });
        return (it != plist->end() && it->doc == ord) ? it->tf : 0;
    }

    /// IDF(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); always >= 0.
    double idf(const std::string& term) const {
        double df = static_cast<double>(document_frequency(term));
        double n = static_cast<double>(doc_count());
        return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    }

    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(const std::filesystem::path& path);

    const std::map<std::string, std::vector<Posting>>& all_postings() const { return postings_; }

private:
    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<std::string> doc_ids_;
    std::vector<std::uint32_t> doc_lengths_;
    double avgdl_ = 0.0;
};

/// Okapi BM25 over the stored statistics:
///   score = sum_t IDF(t) * tf*(k1+1) / (tf + k1*(1-b+b*len/avgdl))
/// Query terms absent from the document (or index) contribute 0.
inline double bm25_score(const InvertedIndex& index, const std::vector<std::string>& query_tokens,
                         std::uint32_t doc, const Bm25Params& params = {}) {
    if (doc >= index.doc_count()) throw ValidationError("doc ordinal out of range");
    double len_norm = params.k1 * (1.0 - params.b +
                                   params.b * index.doc_length(doc) / index.avgdl());
    double score = 0.0;
    for (const auto& term : query_tokens) {
        double tf = static_cast<double>(index.term_frequency(term, doc));
        if (tf == 0.0) continue;
        score += index.idf(term) * tf * (params.k1 + 1.0) / (tf + len_norm);
    }
    return score;
}

/// Top-k retrieval, term-at-a-time. Only documents with positive score are
/// returned; ties broken by doc_id ascending.
inline RankedList retrieve_top_k(const InvertedIndex& index, const Query& query, std::size_t k,
                                 const Bm25Params& params = {}) {
    if (k < 1) throw ValidationError("k must be >= 1");
    auto query_tokens = tokenize(query.text);
    std::vector<double> acc(index.doc_count(), 0.0);
    std::vector<bool> touched(index.doc_count(), false);
    for (const auto& term : query_tokens) {
        const auto* plist = index.postings(term);
        if (plist == nullptr) continue;
        double idf = index.idf(term);
        for (const auto& p : *plist) {
            double len_norm = params.k1 * (1.0 - params.b +
                                           params.b * index.doc_length(p.doc) / index.avgdl());
            double tf = static_cast<double>(p.tf);
            acc[p.doc] += idf * tf * (params.k1 + 1.0) / (tf + len_norm);
            touched[p.doc] = true;
        }
    }

    std::vector<std::uint32_t> candidates;
    for (std::uint32_t d = 0; d < acc.size(); ++d) {
        if (touched[d] && acc[d] > 0.0) candidates.push_back(d);
    }
    std::sort(candidates.begin(), candidates.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (acc[a] != acc[b]) return acc[a] > acc[b];
        return index.doc_id(a) < index.doc_id(b);
    });
    if (candidates.size() > k) candidates.resize(k);

    RankedList out;
    out.query_id = query.query_id;
    out.entries.reserve(candidates.size());
    for (auto d : candidates) out.entries.push_back({index.doc_id(d), acc[d]});
    return out;
}

// --- on-disk index format: magic "RRIX1", little-endian fixed-width fields

namespace detail {

inline void write_u32(std::ofstream& out, std::uint32_t v) {
    char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>(v >> (8 * i));
    out.write(buf, 4);
}

inline void write_u64(std::ofstream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>(v >> (8 * i));
    out.write(buf, 8);
}

inline void write_str(std::ofstream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::ifstream& in) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw ValidationError("truncated index file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::ifstream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (!in) throw ValidationError("truncated index file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}

inline std::string read_str(std::ifstream& in) {
    auto len = read_u32(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw ValidationError("truncated index file");
    return s;
}

}  // namespace detail

inline void InvertedIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out.write("RRIX1", 5);
    detail::write_u64(out, doc_ids_.size());
    for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
        detail::write_str(out, doc_ids_[i]);
        detail::write_u32(out, doc_lengths_[i]);
    }
    detail::write_u64(out, postings_.size());
    for (const auto& [term, plist] : postings_) {
        detail::write_str(out, term);
        detail::write_u32(out, static_cast<std::uint32_t>(plist.size()));
        for (const auto& p : plist) {
            detail::write_u32(out, p.doc);
            detail::write_u32(out, p.tf);
        }
    }
}

inline InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, "RRIX1", 5) != 0)
        throw ValidationError(path.string() + " is not a versioned index file (bad magic)");
    InvertedIndex index;
    auto ndocs = detail::read_u64(in);
    std::uint64_t total_len = 0;
    for (std::uint64_t i = 0; i < ndocs; ++i) {
        index.doc_ids_.push_back(detail::read_str(in));
        index.doc_lengths_.push_back(detail::read_u32(in));
        total_len += index.doc_lengths_.back();
    }
    auto nterms = detail::read_u64(in);
    for (std::uint64_t i = 0; i < nterms; ++i) {
        auto term = detail::read_str(in);
        auto count = detail::read_u32(in);
        auto& plist = index.postings_[term];
        plist.reserve(count);
        for (std::uint32_t j = 0; j < count; ++j) {
            auto doc = detail::read_u32(in);
            auto tf = detail::read_u32(in);
            if (doc >= ndocs) throw ValidationError("posting ordinal out of range in " + path.string());
            plist.push_back(Posting{doc, tf});
        }
    }
    index.avgdl_ = ndocs == 0 ? 0.0 : static_cast<double>(total_len) / static_cast<double>(ndocs);
    return index;
}

}  // namespace reasonrank
