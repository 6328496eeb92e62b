#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "reasonrank/prompt.hpp"
#include "test_util.hpp"

using namespace reasonrank;

namespace {

PassageWindow fixture_window() {
    PassageWindow w;
    w.query_id = "q42";
    w.offset = 0;
    w.passages = {
        {1, "dA", "Rain forms when cloud droplets merge until they are heavy enough to fall."},
        {2, "dB", "Deserts receive little rainfall because descending air dries out."},
        {3, "dC", "A rain gauge measures accumulated precipitation over a day."},
    };
    return w;
}

Query fixture_query() { return Query{"q42", "what makes rain fall"}; }

}  // namespace

TEST_CASE("basic mode carries only the basic and return blocks") {
    auto templates = PromptTemplates::load(testutil::templates_dir());
    std::string prompt = build_prompt(fixture_query(), fixture_window(), PromptMode::Basic, templates);

    CHECK(prompt.find("I will provide you with 3 passages") != std::string::npos);
    CHECK(prompt.find("Search Query: what makes rain fall.") != std::string::npos);
    CHECK(prompt.find("Rank the 3 passages above") != std::string::npos);
    CHECK(prompt.find("[1] Rain forms") != std::string::npos);
    CHECK(prompt.find("read every passage one-by-one") == std::string::npos);   // explicit block
    CHECK(prompt.find("A listwise reason involves comparing") == std::string::npos);  // comparison
    CHECK(prompt.find("{num}") == std::string::npos);
    CHECK(prompt.find("{query}") == std::string::npos);
}

TEST_CASE("combined mode carries all four blocks in order") {
    auto templates = PromptTemplates::load(testutil::templates_dir());
    std::string prompt =
        build_prompt(fixture_query(), fixture_window(), PromptMode::Combined, templates);

    auto basic_at = prompt.find("I will provide you with 3 passages");
    auto passages_at = prompt.find("[1] Rain forms");
    auto explicit_at = prompt.find("read every passage one-by-one");
    auto comparison_at = prompt.find("A listwise reason involves comparing");
    auto return_at = prompt.find("Search Query:");
    REQUIRE(basic_at != std::string::npos);
    REQUIRE(passages_at != std::string::npos);
    REQUIRE(explicit_at != std::string::npos);
    REQUIRE(comparison_at != std::string::npos);
    REQUIRE(return_at != std::string::npos);
    CHECK(basic_at < passages_at);
    CHECK(passages_at < explicit_at);
    CHECK(explicit_at < comparison_at);
    CHECK(comparison_at < return_at);
}

TEST_CASE("prompt construction is deterministic") {
    auto templates = PromptTemplates::load(testutil::templates_dir());
    auto a = build_prompt(fixture_query(), fixture_window(), PromptMode::Combined, templates);
    auto b = build_prompt(fixture_query(), fixture_window(), PromptMode::Combined, templates);
    CHECK(a == b);
}

TEST_CASE("prompts match the golden files byte for byte") {
    auto templates = PromptTemplates::load(testutil::templates_dir());
    for (PromptMode mode :
         {PromptMode::Basic, PromptMode::Explicit, PromptMode::Comparison, PromptMode::Combined}) {
        std::string prompt = build_prompt(fixture_query(), fixture_window(), mode, templates);
        auto golden_path = testutil::golden_dir() / ("prompt_" + to_string(mode) + ".txt");
        CAPTURE(to_string(mode));
        REQUIRE(std::filesystem::exists(golden_path));
        CHECK(prompt == testutil::read_file(golden_path));
    }
}

TEST_CASE("empty window or query is rejected") {
    auto templates = PromptTemplates::load(testutil::templates_dir());
    PassageWindow empty;
    empty.query_id = "q";
    CHECK_THROWS_AS(build_prompt(fixture_query(), empty, PromptMode::Basic, templates),
                    ValidationError);
    CHECK_THROWS_AS(build_prompt(Query{"q", ""}, fixture_window(), PromptMode::Basic, templates),
                    ValidationError);
}

TEST_CASE("window spans cover the list back-to-front") {
    SECTION("whole list in one window") {
        auto spans = window_spans(10, 10, 10);
        REQUIRE(spans.size() == 1);
        CHECK(spans[0] == WindowSpan{0, 10});
    }
    SECTION("30 docs, window 20, stride 10") {
        auto spans = window_spans(30, 20, 10);
        REQUIRE(spans.size() == 2);
        CHECK(spans[0] == WindowSpan{10, 20});
        CHECK(spans[1] == WindowSpan{0, 20});
    }
    SECTION("short list clamps to a single window") {
        auto spans = window_spans(5, 20, 10);
        REQUIRE(spans.size() == 1);
        CHECK(spans[0] == WindowSpan{0, 5});
    }
    SECTION("empty list yields no windows") {
        CHECK(window_spans(0, 20, 10).empty());
    }
    SECTION("invalid parameters are rejected") {
        CHECK_THROWS_AS(window_spans(10, 1, 1), ValidationError);
        CHECK_THROWS_AS(window_spans(10, 10, 0), ValidationError);
        CHECK_THROWS_AS(window_spans(10, 10, 11), ValidationError);
    }
    SECTION("every position is covered for random shapes") {
        std::mt19937_64 rng(31);
        for (int trial = 0; trial < 50; ++trial) {
            std::size_t n = rng() % 60;
            std::size_t w = 2 + rng() % 25;
            std::size_t s = 1 + rng() % w;
            auto spans = window_spans(n, w, s);
            std::set<std::size_t> covered;
            for (auto& sp : spans) {
                CHECK(sp.size <= w);
                CHECK(sp.offset + sp.size <= n);
                for (std::size_t i = 0; i < sp.size; ++i) covered.insert(sp.offset + i);
            }
            CHECK(covered.size() == n);
        }
    }
}

TEST_CASE("window_passages numbers passages and truncates text") {
    Corpus corpus;
    corpus.add({"dA", "one two three four five six", ""});
    corpus.add({"dB", "lots   of\nwhitespace   here", ""});
    corpus.add({"dC", "short", ""});
    RankedList ranked{"q1", {{"dA", 3.0}, {"dB", 2.0}, {"dC", 1.0}}};

    auto windows = window_passages(ranked, corpus, 2, 1, 4);
    REQUIRE(windows.size() == 2);
    CHECK(windows[0].offset == 1);
    CHECK(windows[1].offset == 0);
    CHECK(windows[1].passages[0].identifier == 1);
    CHECK(windows[1].passages[0].doc_id == "dA");
    CHECK(windows[1].passages[0].text == "one two three four");  // truncated to 4 tokens
    CHECK(windows[0].passages[0].text == "lots of whitespace here");  // whitespace collapsed

    // union of windows covers the input set
    std::set<std::string> seen;
    for (auto& w : windows)
        for (auto& p : w.passages) seen.insert(p.doc_id);
    CHECK(seen == std::set<std::string>{"dA", "dB", "dC"});
}
