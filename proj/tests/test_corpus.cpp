#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "reasonrank/corpus.hpp"
#include "test_util.hpp"

using namespace reasonrank;

TEST_CASE("load_corpus reads JSONL in order") {
    testutil::TempDir tmp("corpus");
    testutil::write_file(tmp.file("c.jsonl"),
                         R"({"doc_id": "d1", "text": "alpha"})"
                         "\n"
                         R"({"doc_id": "d2", "text": "beta", "title": "B"})"
                         "\n"
                         R"({"doc_id": "d3", "text": "gamma"})"
                         "\n");
    Corpus corpus = load_corpus(tmp.file("c.jsonl"));
    REQUIRE(corpus.size() == 3);
    CHECK(corpus.at(0).doc_id == "d1");
    CHECK(corpus.at(1).doc_id == "d2");
    CHECK(corpus.at(1).title == "B");
    CHECK(corpus.at(2).doc_id == "d3");
    CHECK(corpus.find("d2") != nullptr);
    CHECK(corpus.ordinal("d3") == 2);
}

TEST_CASE("load_corpus accepts an empty file") {
    testutil::TempDir tmp("corpus");
    testutil::write_file(tmp.file("empty.jsonl"), "");
    Corpus corpus = load_corpus(tmp.file("empty.jsonl"));
    CHECK(corpus.size() == 0);
}

TEST_CASE("load_corpus reports duplicate doc_id with line number") {
    testutil::TempDir tmp("corpus");
    testutil::write_file(tmp.file("dup.jsonl"),
                         R"({"doc_id": "d1", "text": "a"})"
                         "\n"
                         R"({"doc_id": "d2", "text": "b"})"
                         "\n"
                         R"({"doc_id": "d3", "text": "c"})"
                         "\n"
                         R"({"doc_id": "d1", "text": "d"})"
                         "\n");
    CHECK_THROWS_WITH(load_corpus(tmp.file("dup.jsonl")),
                      Catch::Matchers::ContainsSubstring("duplicate doc_id d1 (line 4)"));
}

TEST_CASE("load_corpus reports malformed lines with line number") {
    testutil::TempDir tmp("corpus");
    testutil::write_file(tmp.file("bad.jsonl"),
                         R"({"doc_id": "d1", "text": "a"})"
                         "\n"
                         "{not json\n");
    CHECK_THROWS_WITH(load_corpus(tmp.file("bad.jsonl")),
                      Catch::Matchers::ContainsSubstring("line 2"));
}

TEST_CASE("load_qrels parses TREC lines and validates grades") {
    testutil::TempDir tmp("qrels");
    testutil::write_file(tmp.file("q.txt"), "q1 0 d9 2\nq1 0 d3 0\nq2 0 d9 3\n");
    Qrels qrels = load_qrels(tmp.file("q.txt"));
    CHECK(qrels.grade("q1", "d9") == 2);
    CHECK(qrels.grade("q1", "d3") == 0);
    CHECK(qrels.grade("q2", "d9") == 3);
    CHECK(qrels.grade("q2", "unjudged") == 0);

    testutil::write_file(tmp.file("neg.txt"), "q1 0 d9 -1\n");
    CHECK_THROWS_AS(load_qrels(tmp.file("neg.txt")), ValidationError);

    testutil::write_file(tmp.file("nonint.txt"), "q1 0 d9 high\n");
    CHECK_THROWS_WITH(load_qrels(tmp.file("nonint.txt")),
                      Catch::Matchers::ContainsSubstring("line 1"));

    testutil::write_file(tmp.file("cap.txt"), "q1 0 d9 16\n");
    CHECK_THROWS_WITH(load_qrels(tmp.file("cap.txt")),
                      Catch::Matchers::ContainsSubstring("cap"));
}

TEST_CASE("run files round-trip bit-exactly") {
    testutil::TempDir tmp("run");
    std::mt19937_64 rng(7);
    std::vector<RunEntry> entries;
    for (int q = 1; q <= 10; ++q) {
        int n = 1 + static_cast<int>(rng() % 10);
        std::int64_t micros = 10'000'000;  // scores on the exact 1e-6 grid
        for (int r = 1; r <= n; ++r) {
            micros -= static_cast<std::int64_t>(rng() % 100000);
            entries.push_back(RunEntry{"q" + std::to_string(q), "d" + std::to_string(r), r,
                                       static_cast<double>(micros) / 1e6, "tag1"});
        }
    }
    REQUIRE(entries.size() >= 10);
    write_run(entries, tmp.file("a.run"));
    auto loaded = load_run(tmp.file("a.run"));
    REQUIRE(loaded.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        CAPTURE(i);
        CHECK(loaded[i] == entries[i]);
    }
    // writing the loaded entries again reproduces the same bytes
    write_run(loaded, tmp.file("b.run"));
    CHECK(testutil::read_file(tmp.file("a.run")) == testutil::read_file(tmp.file("b.run")));
}

TEST_CASE("load_run rejects rank 0 and broken invariants") {
    testutil::TempDir tmp("run");
    testutil::write_file(tmp.file("rank0.run"), "q1 Q0 d1 0 1.000000 tag\n");
    CHECK_THROWS_WITH(load_run(tmp.file("rank0.run")),
                      Catch::Matchers::ContainsSubstring("1-based"));

    testutil::write_file(tmp.file("gap.run"),
                         "q1 Q0 d1 1 2.000000 tag\nq1 Q0 d2 3 1.000000 tag\n");
    CHECK_THROWS_WITH(load_run(tmp.file("gap.run")),
                      Catch::Matchers::ContainsSubstring("contiguous"));

    testutil::write_file(tmp.file("inc.run"),
                         "q1 Q0 d1 1 1.000000 tag\nq1 Q0 d2 2 2.000000 tag\n");
    CHECK_THROWS_WITH(load_run(tmp.file("inc.run")),
                      Catch::Matchers::ContainsSubstring("increase"));

    testutil::write_file(tmp.file("short.run"), "q1 Q0 d1 1 1.0\n");
    CHECK_THROWS_AS(load_run(tmp.file("short.run")), ValidationError);
}

TEST_CASE("load_queries parses tab-separated topics") {
    testutil::TempDir tmp("queries");
    testutil::write_file(tmp.file("q.tsv"), "q1\thello world\nq2\tsecond query\n");
    auto queries = load_queries(tmp.file("q.tsv"));
    REQUIRE(queries.size() == 2);
    CHECK(queries[0].query_id == "q1");
    CHECK(queries[0].text == "hello world");

    testutil::write_file(tmp.file("dup.tsv"), "q1\ta\nq1\tb\n");
    CHECK_THROWS_WITH(load_queries(tmp.file("dup.tsv")),
                      Catch::Matchers::ContainsSubstring("duplicate query_id"));
}
