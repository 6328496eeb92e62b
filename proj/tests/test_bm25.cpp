#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "reasonrank/bm25.hpp"
#include "test_util.hpp"

using namespace reasonrank;

namespace {

Corpus make_corpus(const std::vector<std::pair<std::string, std::string>>& docs) {
    Corpus corpus;
    for (const auto& [id, text] : docs) corpus.add(Document{id, text, ""});
    return corpus;
}

/// Brute-force oracle: score every document and sort.
std::vector<std::pair<std::string, double>> exhaustive_ranking(const InvertedIndex& index,
                                                               const std::string& query_text,
                                                               const Bm25Params& params = {}) {
    auto tokens = tokenize(query_text);
    std::vector<std::pair<std::string, double>> scored;
    for (std::uint32_t d = 0; d < index.doc_count(); ++d) {
        double s = bm25_score(index, tokens, d, params);
        if (s > 0.0) scored.emplace_back(index.doc_id(d), s);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return scored;
}

Corpus random_corpus(std::mt19937_64& rng, std::size_t n_docs, std::size_t vocab,
                     std::size_t max_len) {
    Corpus corpus;
    for (std::size_t d = 0; d < n_docs; ++d) {
        std::size_t len = 1 + rng() % max_len;
        std::string text;
        for (std::size_t i = 0; i < len; ++i) {
            if (!text.empty()) text.push_back(' ');
            text += "w" + std::to_string(rng() % vocab);
        }
        corpus.add(Document{"d" + std::to_string(d), text, ""});
    }
    return corpus;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on non-alphanumeric runs") {
    CHECK(tokenize("The CAT's hat.") == std::vector<std::string>{"the", "cat", "s", "hat"});
    CHECK(tokenize("") == std::vector<std::string>{});
    CHECK(tokenize("COVID-19 spread") == std::vector<std::string>{"covid", "19", "spread"});
}

TEST_CASE("build_index matches hand counts") {
    Corpus corpus = make_corpus({{"d1", "a b"}, {"d2", "b c"}});
    InvertedIndex index = InvertedIndex::build(corpus);
    CHECK(index.document_frequency("a") == 1);
    CHECK(index.document_frequency("b") == 2);
    CHECK(index.document_frequency("c") == 1);
    CHECK(index.avgdl() == 2.0);
    CHECK(index.doc_count() == 2);
}

TEST_CASE("single-doc corpus has avgdl equal to its length") {
    Corpus corpus = make_corpus({{"solo", "one two three four"}});
    InvertedIndex index = InvertedIndex::build(corpus);
    CHECK(index.avgdl() == 4.0);
}

TEST_CASE("build_index rejects an empty corpus") {
    Corpus corpus;
    CHECK_THROWS_AS(InvertedIndex::build(corpus), ValidationError);
}

TEST_CASE("index postings count matches a naive scan over 1000 synthetic docs") {
    std::mt19937_64 rng(11);
    Corpus corpus = random_corpus(rng, 1000, 80, 30);
    InvertedIndex index = InvertedIndex::build(corpus);

    // oracle: count distinct (term, doc) pairs by scanning every document
    std::uint64_t expected = 0;
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        std::set<std::string> distinct;
        for (auto& t : tokenize(corpus.at(d).text)) distinct.insert(t);
        expected += distinct.size();
    }
    CHECK(index.total_postings() == expected);

    double total_len = 0;
    for (std::uint32_t d = 0; d < index.doc_count(); ++d) total_len += index.doc_length(d);
    CHECK(index.avgdl() == Catch::Approx(total_len / 1000.0).epsilon(1e-12));
}

TEST_CASE("bm25_score hand-checked values") {
    Corpus corpus = make_corpus({{"d1", "a b"}, {"d2", "b c"}});
    InvertedIndex index = InvertedIndex::build(corpus);

    SECTION("absent query term contributes zero") {
        CHECK(bm25_score(index, {"zzz"}, 0) == 0.0);
        double with = bm25_score(index, {"a"}, 0);
        double with_extra = bm25_score(index, {"a", "zzz"}, 0);
        CHECK(with == with_extra);
    }
    SECTION("symmetric docs score equally for the shared term") {
        CHECK(bm25_score(index, {"b"}, 0) == Catch::Approx(bm25_score(index, {"b"}, 1)));
    }
    SECTION("query [a] on d1 equals ln 2") {
        CHECK(bm25_score(index, {"a"}, 0) == Catch::Approx(std::log(2.0)).margin(1e-12));
    }
}

TEST_CASE("bm25 score is non-decreasing in term frequency") {
    // same length docs, increasing tf of the query term
    Corpus corpus = make_corpus({{"d1", "x f1 f2 f3"},
                                 {"d2", "x x f1 f2"},
                                 {"d3", "x x x f1"},
                                 {"d4", "x x x x"}});
    InvertedIndex index = InvertedIndex::build(corpus);
    double prev = -1.0;
    for (std::uint32_t d = 0; d < 4; ++d) {
        double s = bm25_score(index, {"x"}, d);
        CHECK(s >= prev);
        prev = s;
    }
}

TEST_CASE("retrieve_top_k clamps k and drops zero scores") {
    Corpus corpus = make_corpus({{"d1", "apple pie"}, {"d2", "apple tart"}, {"d3", "banana"}});
    InvertedIndex index = InvertedIndex::build(corpus);

    RankedList all = retrieve_top_k(index, Query{"q", "apple"}, 100);
    CHECK(all.entries.size() == 2);

    RankedList none = retrieve_top_k(index, Query{"q", "unseen words only"}, 10);
    CHECK(none.entries.empty());
}

TEST_CASE("retrieve_top_k matches the exhaustive oracle on a 50-doc corpus") {
    std::mt19937_64 rng(3);
    Corpus corpus = random_corpus(rng, 50, 25, 12);
    InvertedIndex index = InvertedIndex::build(corpus);
    std::string query_text = "w1 w2 w3";

    auto oracle = exhaustive_ranking(index, query_text);
    RankedList got = retrieve_top_k(index, Query{"q", query_text}, 10);
    REQUIRE(got.entries.size() == std::min<std::size_t>(10, oracle.size()));
    for (std::size_t i = 0; i < got.entries.size(); ++i) {
        CAPTURE(i);
        CHECK(got.entries[i].doc_id == oracle[i].first);
        CHECK(got.entries[i].score == Catch::Approx(oracle[i].second).margin(1e-12));
    }
}

TEST_CASE("retrieve_top_k is a prefix of the exhaustive ranking on random corpora") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t n = 5 + rng() % 196;
        Corpus corpus = random_corpus(rng, n, 18, 10);
        InvertedIndex index = InvertedIndex::build(corpus);
        std::string query_text = "w0 w3 w7 w11";
        auto oracle = exhaustive_ranking(index, query_text);
        std::size_t k = 1 + rng() % 12;
        RankedList got = retrieve_top_k(index, Query{"q", query_text}, k);

        REQUIRE(got.entries.size() == std::min(k, oracle.size()));
        std::set<std::string> seen;
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < got.entries.size(); ++i) {
            CHECK(got.entries[i].doc_id == oracle[i].first);
            CHECK(seen.insert(got.entries[i].doc_id).second);  // no duplicates
            CHECK(got.entries[i].score <= prev);               // sorted
            prev = got.entries[i].score;
        }
    }
}

TEST_CASE("index round-trips through the RRIX1 binary format") {
    std::mt19937_64 rng(21);
    Corpus corpus = random_corpus(rng, 40, 30, 15);
    InvertedIndex index = InvertedIndex::build(corpus);

    testutil::TempDir tmp("index");
    index.save(tmp.file("x.rrix"));
    InvertedIndex loaded = InvertedIndex::load(tmp.file("x.rrix"));

    CHECK(loaded.doc_count() == index.doc_count());
    CHECK(loaded.avgdl() == index.avgdl());
    CHECK(loaded.total_postings() == index.total_postings());
    CHECK(loaded.all_postings() == index.all_postings());
    for (std::uint32_t d = 0; d < index.doc_count(); ++d) {
        CHECK(loaded.doc_id(d) == index.doc_id(d));
        CHECK(loaded.doc_length(d) == index.doc_length(d));
    }

    testutil::write_file(tmp.file("bad.rrix"), "NOTMAGIC....");
    CHECK_THROWS_WITH(InvertedIndex::load(tmp.file("bad.rrix")),
                      Catch::Matchers::ContainsSubstring("magic"));
}
