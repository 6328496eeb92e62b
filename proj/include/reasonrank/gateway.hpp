#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "reasonrank/bm25.hpp"
#include "reasonrank/detail/sha256.hpp"
#include "reasonrank/errors.hpp"

namespace reasonrank {

/// One chat completion to request from the teacher endpoint.
struct CompletionRequest {
    std::string model;
    std::string prompt;
    double temperature = 1.0;
    double top_p = 0.9;
    int max_tokens = 2048;
};

/// Session token/cost ledger. cost is the exact linear combination under
/// the configured pricing; rounding happens only in reports.
struct UsageRecord {
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
    std::int64_t requests = 0;
    double cost = 0.0;

    void add(const UsageRecord& other) {
        input_tokens += other.input_tokens;
        output_tokens += other.output_tokens;
        requests += other.requests;
        cost += other.cost;
    }
};

/// Per-1K-token rates in USD.
struct Pricing {
    double input_per_1k = 0.03;
    double output_per_1k = 0.06;
};

inline double raw_cost(std::int64_t input_tokens, std::int64_t output_tokens, const Pricing& pricing) {
    if (input_tokens < 0 || output_tokens < 0)
        throw ValidationError("token counts must be non-negative");
    return pricing.input_per_1k * static_cast<double>(input_tokens) / 1000.0 +
           pricing.output_per_1k * static_cast<double>(output_tokens) / 1000.0;
}

/// Cost estimate rounded to 3 decimals (cents-of-a-dollar reporting).
inline double estimate_cost(std::int64_t input_tokens, std::int64_t output_tokens,
                            const Pricing& pricing) {
    return std::round(raw_cost(input_tokens, output_tokens, pricing) * 1000.0) / 1000.0;
}

/// Budgeting tokenizer: words and punctuation marks scaled by 1.3, rounded
/// up. Billed counts from the provider override these estimates.
inline std::int64_t approx_token_count(std::string_view text) {
    std::int64_t units = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            if (!in_word) {
                ++units;
                in_word = true;
            }
        } else {
            in_word = false;
            if (!std::isspace(c)) ++units;  // punctuation counts as a unit
        }
    }
    return static_cast<std::int64_t>(std::ceil(static_cast<double>(units) * 1.3));
}

/// Stable content hash of (model, prompt, temperature, top_p); the cache
/// address of a request.
inline std::string cache_key(const CompletionRequest& request) {
    char t[32], p[32];
    std::snprintf(t, sizeof(t), "%.17g", request.temperature);
    std::snprintf(p, sizeof(p), "%.17g", request.top_p);
    std::string canonical;
    canonical.reserve(request.prompt.size() + 64);
    canonical += request.model;
    canonical += '\n';
    canonical += t;
    canonical += '\n';
    canonical += p;
    canonical += '\n';
    canonical += request.prompt;
    return detail::sha256_hex(canonical);
}

struct TransportResponse {
    int status = 0;
    std::string body;
};

/// Sends one serialized chat-completion request and returns the raw HTTP
/// result. Implementations throw GatewayError on connection failure.
class Transport {
public:
    virtual ~Transport() = default;
    virtual TransportResponse send(const std::string& request_body) = 0;
};

/// Replays a fixed sequence of responses; the unit-test and CI transport.
class ScriptedTransport : public Transport {
public:
    explicit ScriptedTransport(std::vector<TransportResponse> script) : script_(std::move(script)) {}

    /// Script file: one JSON object per line, {"status": int, "body": string|object}.
    static std::unique_ptr<ScriptedTransport> from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open gateway script " + path.string());
        std::vector<TransportResponse> script;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("status"))
                throw ValidationError("bad script entry (line " + std::to_string(line_no) + ") in " +
                                      path.string());
            TransportResponse r;
            r.status = j.at("status").get<int>();
            if (j.contains("body")) {
                r.body = j.at("body").is_string() ? j.at("body").get<std::string>()
                                                  : j.at("body").dump();
            }
            script.push_back(std::move(r));
        }
        return std::make_unique<ScriptedTransport>(std::move(script));
    }

    TransportResponse send(const std::string&) override {
        std::lock_guard lock(mutex_);
        if (next_ >= script_.size()) throw GatewayError("scripted transport exhausted");
        return script_[next_++];
    }

private:
    std::vector<TransportResponse> script_;
    std::size_t next_ = 0;
    std::mutex mutex_;
};

/// Deterministic stand-in teacher for offline runs. Reads the prompt out
/// of the request, scores each "[i] text" passage by lexical overlap with
/// the search query, and answers with a well-formed ranking JSON.
class MockTeacherTransport : public Transport {
public:
    enum class Policy { Overlap, Identity, Reverse };

    explicit MockTeacherTransport(Policy policy = Policy::Overlap) : policy_(policy) {}

    static Policy policy_from_string(std::string_view s) {
        if (s == "overlap") return Policy::Overlap;
        if (s == "identity") return Policy::Identity;
        if (s == "reverse") return Policy::Reverse;
        throw ValidationError("unknown mock policy '" + std::string(s) +
                              "' (expected overlap|identity|reverse)");
    }

    TransportResponse send(const std::string& request_body) override {
        nlohmann::json req = nlohmann::json::parse(request_body, nullptr, false);
        if (req.is_discarded()) throw GatewayError("mock transport received malformed request");
        std::string prompt;
        if (req.contains("messages") && req.at("messages").is_array() && !req.at("messages").empty()) {
            prompt = req.at("messages").front().value("content", "");
        }

        std::vector<std::pair<int, std::string>> passages;
        std::string query_text;
        std::istringstream lines(prompt);
        std::string line;
        while (std::getline(lines, line)) {
            if (line.size() > 2 && line[0] == '[') {
                auto close = line.find(']');
                if (close != std::string::npos && close + 2 <= line.size()) {
                    std::string num = line.substr(1, close - 1);
                    if (!num.empty() &&
                        num.find_first_not_of("0123456789") == std::string::npos) {
                        std::string text = close + 2 <= line.size() ? line.substr(close + 2) : "";
                        passages.emplace_back(std::stoi(num), text);
                    }
                }
            } else if (line.rfind("Search Query: ", 0) == 0) {
                query_text = line.substr(14);
                if (!query_text.empty() && query_text.back() == '.') query_text.pop_back();
            }
        }

        std::vector<int> order;
        std::map<int, int> overlap;
        auto query_tokens = tokenize(query_text);
        std::set<std::string> query_set(query_tokens.begin(), query_tokens.end());
        for (const auto& [id, text] : passages) {
            std::set<std::string> seen;
            int count = 0;
            for (const auto& tok : tokenize(text)) {
                if (query_set.count(tok) && seen.insert(tok).second) ++count;
            }
            overlap[id] = count;
            order.push_back(id);
        }
        switch (policy_) {
            case Policy::Identity:
                break;
            case Policy::Reverse:
                std::reverse(order.begin(), order.end());
                break;
            case Policy::Overlap:
                std::stable_sort(order.begin(), order.end(),
                                 [&](int a, int b) { return overlap[a] > overlap[b]; });
                break;
        }

        nlohmann::json reasons = nlohmann::json::object();
        nlohmann::json keywords = nlohmann::json::array();
        for (const auto& tok : query_set) keywords.push_back(tok);
        for (int id : order) {
            reasons[std::to_string(id)] = {
                {"direct", "Passage " + std::to_string(id) + " mentions " +
                               std::to_string(overlap[id]) + " query terms."},
                {"listwise", "Ranked by shared query terms relative to the other passages."}};
        }
        nlohmann::json content = {{"ranking", order}, {"reasons", reasons}, {"keywords", keywords}};

        std::string content_text = content.dump();
        nlohmann::json body = {
            {"choices", nlohmann::json::array({nlohmann::json{
                            {"message", {{"role", "assistant"}, {"content", content_text}}}}})},
            {"usage",
             {{"prompt_tokens", approx_token_count(prompt)},
              {"completion_tokens", approx_token_count(content_text)}}}};
        return {200, body.dump()};
    }

private:
    Policy policy_;
};

struct GatewayConfig {
    std::filesystem::path cache_dir;
    Pricing pricing;
    int max_retries = 3;       // retries after the first attempt
    int backoff_base_ms = 100; // doubles per retry
    bool cache_only = false;
    int max_concurrency = 4;
};

/// Chat-completion client with a content-addressed response cache. With a
/// warm cache an entire run replays without touching the transport.
class TeacherGateway {
public:
    struct Completion {
        std::string text;
        std::int64_t input_tokens = 0;
        std::int64_t output_tokens = 0;
        bool from_cache = false;
    };

    TeacherGateway(GatewayConfig config, std::unique_ptr<Transport> transport)
        : config_(std::move(config)),
          transport_(std::move(transport)),
          in_flight_(config_.max_concurrency > 0 ? config_.max_concurrency : 1) {
        if (!config_.cache_dir.empty()) std::filesystem::create_directories(config_.cache_dir);
    }

    /// bypass_cache skips the cache read (the entry is rewritten from the
    /// fresh response); cache-only mode ignores it.
    Completion complete(const CompletionRequest& request, bool bypass_cache = false) {
        if (request.temperature < 0.0) throw ValidationError("temperature must be >= 0");
        if (request.top_p <= 0.0 || request.top_p > 1.0)
            throw ValidationError("top_p must be in (0, 1]");

        std::string key = cache_key(request);
        if (!bypass_cache || config_.cache_only) {
            if (auto cached = read_cache(key)) {
                std::lock_guard lock(mutex_);
                ++cache_hits_;
                return *cached;
            }
        }
        if (config_.cache_only || transport_ == nullptr)
            throw GatewayError("offline cache miss for request " + key.substr(0, 12));

        nlohmann::json body = {
            {"model", request.model},
            {"messages", nlohmann::json::array(
                             {nlohmann::json{{"role", "user"}, {"content", request.prompt}}})},
            {"temperature", request.temperature},
            {"top_p", request.top_p},
            {"max_tokens", request.max_tokens}};
        std::string body_text = body.dump();

        TransportResponse response;
        std::string last_error;
        bool ok = false;
        int attempts = 0;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                auto delay = std::chrono::milliseconds(
                    static_cast<std::int64_t>(config_.backoff_base_ms) * (1LL << (attempt - 1)));
                std::this_thread::sleep_for(delay);
            }
            ++attempts;
            {
                std::lock_guard lock(mutex_);
                ++transport_requests_;
                ++usage_.requests;
            }
            try {
                in_flight_.acquire();
                response = transport_->send(body_text);
                in_flight_.release();
            } catch (const std::exception& e) {
                in_flight_.release();
                last_error = e.what();
                continue;
            }
            if (response.status == 200) {
                ok = true;
                break;
            }
            last_error = "HTTP " + std::to_string(response.status);
            if (response.status != 429 && response.status < 500) {
                throw GatewayError("teacher endpoint rejected request: " + last_error);
            }
        }
        if (!ok)
            throw GatewayError("transport failed after " + std::to_string(attempts) +
                               " attempts: " + last_error);

        Completion completion = parse_response(request, response.body);
        write_cache(key, request, completion);
        {
            std::lock_guard lock(mutex_);
            usage_.input_tokens += completion.input_tokens;
            usage_.output_tokens += completion.output_tokens;
            usage_.cost += raw_cost(completion.input_tokens, completion.output_tokens, config_.pricing);
        }
        return completion;
    }

    UsageRecord usage() const {
        std::lock_guard lock(mutex_);
        return usage_;
    }

    std::int64_t transport_requests() const {
        std::lock_guard lock(mutex_);
        return transport_requests_;
    }

    std::int64_t cache_hits() const {
        std::lock_guard lock(mutex_);
        return cache_hits_;
    }

    const Pricing& pricing() const { return config_.pricing; }

private:
    std::optional<Completion> read_cache(const std::string& key) const {
        if (config_.cache_dir.empty()) return std::nullopt;
        auto path = cache_path(key);
        std::ifstream in(path);
        if (!in) return std::nullopt;
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.contains("response")) return std::nullopt;
        const auto& r = j.at("response");
        Completion c;
        c.text = r.value("text", "");
        c.input_tokens = r.value("input_tokens", std::int64_t{0});
        c.output_tokens = r.value("output_tokens", std::int64_t{0});
        c.from_cache = true;
        return c;
    }

    void write_cache(const std::string& key, const CompletionRequest& request,
                     const Completion& completion) {
        if (config_.cache_dir.empty()) return;
        auto path = cache_path(key);
        std::filesystem::create_directories(path.parent_path());
        nlohmann::json j = {{"request",
                             {{"model", request.model},
                              {"prompt", request.prompt},
                              {"temperature", request.temperature},
                              {"top_p", request.top_p},
                              {"max_tokens", request.max_tokens}}},
                            {"response",
                             {{"text", completion.text},
                              {"input_tokens", completion.input_tokens},
                              {"output_tokens", completion.output_tokens}}}};
        std::lock_guard lock(cache_write_mutex_);
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            if (!out) throw GatewayError("cannot write cache file " + tmp.string());
            out << j.dump(2) << '\n';
        }
        std::filesystem::rename(tmp, path);
    }

    std::filesystem::path cache_path(const std::string& key) const {
        return config_.cache_dir / key.substr(0, 2) / (key + ".json");
    }

    Completion parse_response(const CompletionRequest& request, const std::string& body) const {
        nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded()) throw GatewayError("teacher endpoint returned malformed JSON");
        Completion c;
        if (j.contains("choices") && j.at("choices").is_array() && !j.at("choices").empty()) {
            const auto& choice = j.at("choices").front();
            if (choice.contains("message")) {
                c.text = choice.at("message").value("content", "");
            } else {
                c.text = choice.value("text", "");
            }
        } else {
            throw GatewayError("teacher response carries no choices");
        }
        if (j.contains("usage")) {
            c.input_tokens = j.at("usage").value("prompt_tokens", std::int64_t{-1});
            c.output_tokens = j.at("usage").value("completion_tokens", std::int64_t{-1});
        } else {
            c.input_tokens = -1;
            c.output_tokens = -1;
        }
        // estimates fill in when the provider reports no usage
        if (c.input_tokens < 0) c.input_tokens = approx_token_count(request.prompt);
        if (c.output_tokens < 0) c.output_tokens = approx_token_count(c.text);
        return c;
    }

    GatewayConfig config_;
    std::unique_ptr<Transport> transport_;
    std::counting_semaphore<1024> in_flight_;
    mutable std::mutex mutex_;
    std::mutex cache_write_mutex_;
    UsageRecord usage_;
    std::int64_t transport_requests_ = 0;
    std::int64_t cache_hits_ = 0;
};

}  // namespace reasonrank
