#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "reasonrank/bm25.hpp"
#include "reasonrank/corpus.hpp"
#include "reasonrank/errors.hpp"

namespace reasonrank {

/// Which instruction blocks the teacher prompt carries. Combined stacks
/// basic + explicit + comparison + return-type, in that order.
enum class PromptMode { Basic, Explicit, Comparison, Combined };

inline std::string to_string(PromptMode mode) {
    switch (mode) {
        case PromptMode::Basic: return "basic";
        case PromptMode::Explicit: return "explicit";
        case PromptMode::Comparison: return "comparison";
        case PromptMode::Combined: return "combined";
    }
    return "basic";
}

inline PromptMode prompt_mode_from_string(std::string_view s) {
    if (s == "basic") return PromptMode::Basic;
    if (s == "explicit") return PromptMode::Explicit;
    if (s == "comparison") return PromptMode::Comparison;
    if (s == "combined") return PromptMode::Combined;
    throw ValidationError("unknown prompt mode '" + std::string(s) +
                          "' (expected basic|explicit|comparison|combined)");
}

struct WindowPassage {
    int identifier = 0;  // 1-based within the window
    std::string doc_id;
    std::string text;
};

/// A contiguous slice of a candidate list, numbered 1..size for prompting.
struct PassageWindow {
    std::string query_id;
    std::size_t offset = 0;  // start position in the full list
    std::vector<WindowPassage> passages;

    std::vector<int> expected_ids() const {
        std::vector<int> ids;
        ids.reserve(passages.size());
        for (const auto& p : passages) ids.push_back(p.identifier);
        return ids;
    }
};

/// Prompt blocks are external text resources with {num} and {query}
/// placeholders, loaded verbatim (trailing newline trimmed).
class PromptTemplates {
public:
    std::string basic;
    std::string explicit_block;
    std::string comparison;
    std::string return_type;

    static PromptTemplates load(const std::filesystem::path& dir) {
        PromptTemplates t;
        t.basic = read_block(dir / "basic.txt");
        t.explicit_block = read_block(dir / "explicit.txt");
        t.comparison = read_block(dir / "comparison.txt");
        t.return_type = read_block(dir / "return_type.txt");
        return t;
    }

private:
    static std::string read_block(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValidationError("cannot open prompt template " + path.string());
        std::ostringstream buf;
        buf << in.rdbuf();
        std::string s = buf.str();
        while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
        return s;
    }
};

namespace detail {

inline std::string replace_all(std::string text, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
    return text;
}

}  // namespace detail

/// Collapses whitespace runs to single spaces and keeps at most `budget`
/// tokens, so passages render as one "[i] text" line.
inline std::string truncate_passage(std::string_view text, std::size_t budget) {
    std::istringstream in{std::string(text)};
    std::string token;
    std::string out;
    std::size_t count = 0;
    while (count < budget && in >> token) {
        if (!out.empty()) out.push_back(' ');
        out += token;
        ++count;
    }
    return out;
}

/// Renders the prompt for one window. Pure function of its inputs; the
/// blocks included depend on the mode, passages sit between the basic
/// block and the reasoning blocks.
inline std::string build_prompt(const Query& query, const PassageWindow& window, PromptMode mode,
                                const PromptTemplates& templates) {
    if (window.passages.empty()) throw ValidationError("cannot build a prompt for an empty window");
    if (query.text.empty()) throw ValidationError("cannot build a prompt for an empty query");

    std::string num = std::to_string(window.passages.size());
    std::vector<std::string> blocks;
    blocks.push_back(detail::replace_all(templates.basic, "{num}", num));

    std::string passages;
    for (const auto& p : window.passages) {
        if (!passages.empty()) passages.push_back('\n');
        passages += "[" + std::to_string(p.identifier) + "] " + p.text;
    }
    blocks.push_back(std::move(passages));

    if (mode == PromptMode::Explicit || mode == PromptMode::Combined) {
        blocks.push_back(templates.explicit_block);
    }
    if (mode == PromptMode::Comparison || mode == PromptMode::Combined) {
        blocks.push_back(templates.comparison);
    }
    std::string ret = detail::replace_all(templates.return_type, "{num}", num);
    ret = detail::replace_all(ret, "{query}", query.text);
    blocks.push_back(std::move(ret));

    std::string prompt;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (i > 0) prompt += "\n\n";
        prompt += blocks[i];
    }
    prompt.push_back('\n');
    return prompt;
}

struct WindowSpan {
    std::size_t offset = 0;
    std::size_t size = 0;

    bool operator==(const WindowSpan&) const = default;
};

/// Sliding-window plan over a list of n candidates, emitted back-to-front
/// so later (front) windows can promote documents surfaced by earlier
/// (tail) ones. Consecutive windows overlap by window_size - stride.
inline std::vector<WindowSpan> window_spans(std::size_t n, std::size_t window_size,
                                            std::size_t stride) {
    if (window_size < 2) throw ValidationError("window size must be >= 2");
    if (stride < 1 || stride > window_size)
        throw ValidationError("stride must be in [1, window_size]");
    std::vector<WindowSpan> spans;
    if (n == 0) return spans;
    if (n <= window_size) {
        spans.push_back({0, n});
        return spans;
    }
    std::size_t hi = n;
    while (true) {
        std::size_t lo = hi >= window_size ? hi - window_size : 0;
        spans.push_back({lo, hi - lo});
        if (lo == 0) break;
        hi -= stride;
    }
    return spans;
}

/// Builds the window's numbered passages from a (doc_id -> text) source.
template <typename TextLookup>
PassageWindow make_window(const std::string& query_id, const std::vector<std::string>& doc_ids,
                          WindowSpan span, TextLookup&& text_of, std::size_t truncate_budget) {
    PassageWindow window;
    window.query_id = query_id;
    window.offset = span.offset;
    window.passages.reserve(span.size);
    for (std::size_t i = 0; i < span.size; ++i) {
        const std::string& doc_id = doc_ids.at(span.offset + i);
        window.passages.push_back(WindowPassage{static_cast<int>(i) + 1, doc_id,
                                                truncate_passage(text_of(doc_id), truncate_budget)});
    }
    return window;
}

/// Decomposes a first-stage candidate list into prompt windows
/// (back-to-front). Every input document appears in at least one window.
inline std::vector<PassageWindow> window_passages(const RankedList& ranked, const Corpus& corpus,
                                                  std::size_t window_size, std::size_t stride,
                                                  std::size_t truncate_budget = 120) {
    std::vector<std::string> doc_ids;
    doc_ids.reserve(ranked.entries.size());
    for (const auto& e : ranked.entries) doc_ids.push_back(e.doc_id);

    auto text_of = [&corpus](const std::string& doc_id) -> const std::string& {
        const Document* doc = corpus.find(doc_id);
        if (doc == nullptr) throw ValidationError("ranked list references unknown doc " + doc_id);
        return doc->text;
    };

    std::vector<PassageWindow> windows;
    for (const auto& span : window_spans(doc_ids.size(), window_size, stride)) {
        windows.push_back(make_window(ranked.query_id, doc_ids, span, text_of, truncate_budget));
    }
    return windows;
}

}  // namespace reasonrank
