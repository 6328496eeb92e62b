#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reasonrank/bm25.hpp"
#include "reasonrank/corpus.hpp"
#include "reasonrank/errors.hpp"
#include "reasonrank/gateway.hpp"
#include "reasonrank/http_transport.hpp"
#include "reasonrank/metrics.hpp"
#include "reasonrank/parser.hpp"
#include "reasonrank/prompt.hpp"
#include "reasonrank/student.hpp"

namespace reasonrank {

/// Per-mode average token split used for cost projections.
struct ModeProfile {
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 0;
};

/// Everything one experiment run needs, loadable from a key=value config
/// file. CLI flags override file values.
struct RunConfig {
    // inputs
    std::filesystem::path corpus_path;
    std::filesystem::path queries_path;
    std::filesystem::path qrels_path;
    std::filesystem::path templates_dir = "templates";

    // retrieval
    double k1 = 0.9;
    double b = 0.4;
    std::size_t topk = 100;

    // prompting
    PromptMode mode = PromptMode::Combined;
    std::size_t window = 20;
    std::size_t stride = 10;
    std::size_t passage_tokens = 120;

    // gateway
    std::string gateway = "mock:overlap";  // mock:<policy> | mock:@script.jsonl | http | cache-only
    std::string endpoint;
    std::string model = "gpt-4";
    double temperature = 1.0;
    double top_p = 0.9;
    int max_tokens = 2048;
    Pricing pricing;
    std::map<std::string, ModeProfile> profiles;
    int max_retries = 3;
    int backoff_ms = 100;
    int concurrency = 4;

    // training
    std::size_t epochs = 60;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::size_t train_size = 0;  // 0 = all examples
    std::string targets = "teacher";  // teacher | qrels
    std::size_t bow_dim = 64;
    std::size_t vocab_size = 2048;
    std::size_t max_reason_tokens = 32;
    std::size_t pair_cap = 50;
    std::string scorer = "linear";  // linear | hidden
    std::size_t hidden_size = 32;

    // run
    std::filesystem::path run_dir = "runs/default";
    std::uint64_t seed = 42;
    bool force = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline ModeProfile parse_profile(const std::string& value, std::size_t line_no) {
    auto comma = value.find(',');
    if (comma == std::string::npos)
        throw ValidationError("profile wants 'input_tokens,output_tokens' (line " +
                              std::to_string(line_no) + ")");
    ModeProfile p;
    p.input_tokens = std::stoll(trim(value.substr(0, comma)));
    p.output_tokens = std::stoll(trim(value.substr(comma + 1)));
    if (p.input_tokens < 0 || p.output_tokens < 0)
        throw ValidationError("profile token counts must be non-negative (line " +
                              std::to_string(line_no) + ")");
    return p;
}

}  // namespace detail

/// Applies one `key = value` setting; unknown keys are rejected so typos
/// cannot silently change an experiment.
inline void apply_config_setting(RunConfig& config, const std::string& key,
                                 const std::string& value, std::size_t line_no = 0) {
    auto where = [line_no]() {
        return line_no == 0 ? std::string{} : " (line " + std::to_string(line_no) + ")";
    };
    try {
        if (key == "corpus") config.corpus_path = value;
        else if (key == "queries") config.queries_path = value;
        else if (key == "qrels") config.qrels_path = value;
        else if (key == "templates") config.templates_dir = value;
        else if (key == "k1") config.k1 = std::stod(value);
        else if (key == "b") config.b = std::stod(value);
        else if (key == "topk") config.topk = std::stoul(value);
        else if (key == "mode") config.mode = prompt_mode_from_string(value);
        else if (key == "window") config.window = std::stoul(value);
        else if (key == "stride") config.stride = std::stoul(value);
        else if (key == "passage_tokens") config.passage_tokens = std::stoul(value);
        else if (key == "gateway") config.gateway = value;
        else if (key == "endpoint") config.endpoint = value;
        else if (key == "model") config.model = value;
        else if (key == "temperature") config.temperature = std::stod(value);
        else if (key == "top_p") config.top_p = std::stod(value);
        else if (key == "max_tokens") config.max_tokens = std::stoi(value);
        else if (key == "pricing.input_per_1k") config.pricing.input_per_1k = std::stod(value);
        else if (key == "pricing.output_per_1k") config.pricing.output_per_1k = std::stod(value);
        else if (key.rfind("profile.", 0) == 0)
            config.profiles[key.substr(8)] = detail::parse_profile(value, line_no);
        else if (key == "max_retries") config.max_retries = std::stoi(value);
        else if (key == "backoff_ms") config.backoff_ms = std::stoi(value);
        else if (key == "concurrency") config.concurrency = std::stoi(value);
        else if (key == "epochs") config.epochs = std::stoul(value);
        else if (key == "learning_rate") config.learning_rate = std::stod(value);
        else if (key == "momentum") config.momentum = std::stod(value);
        else if (key == "train_size") config.train_size = std::stoul(value);
        else if (key == "targets") {
            if (value != "teacher" && value != "qrels")
                throw ValidationError("targets must be teacher|qrels" + where());
            config.targets = value;
        }
        else if (key == "bow_dim") config.bow_dim = std::stoul(value);
        else if (key == "vocab_size") config.vocab_size = std::stoul(value);
        else if (key == "max_reason_tokens") config.max_reason_tokens = std::stoul(value);
        else if (key == "pair_cap") config.pair_cap = std::stoul(value);
        else if (key == "scorer") {
            if (value != "linear" && value != "hidden")
                throw ValidationError("scorer must be linear|hidden" + where());
            config.scorer = value;
        }
        else if (key == "hidden_size") config.hidden_size = std::stoul(value);
        else if (key == "run_dir") config.run_dir = value;
        else if (key == "seed") config.seed = std::stoull(value);
        else throw ValidationError("unknown config key '" + key + "'" + where());
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception&) {
        throw ValidationError("bad value '" + value + "' for key '" + key + "'" + where());
    }
}

/// Plain-text config: `key = value` lines, '#' comments, blank lines ok.
inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config " + path.string());
    RunConfig config;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("expected 'key = value' (line " + std::to_string(line_no) +
                                  ") in " + path.string());
        apply_config_setting(config, detail::trim(line.substr(0, eq)),
                             detail::trim(line.substr(eq + 1)), line_no);
    }
    return config;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
    nlohmann::json j;
    j["corpus"] = c.corpus_path.string();
    j["queries"] = c.queries_path.string();
    j["qrels"] = c.qrels_path.string();
    j["templates"] = c.templates_dir.string();
    j["k1"] = c.k1;
    j["b"] = c.b;
    j["topk"] = c.topk;
    j["mode"] = to_string(c.mode);
    j["window"] = c.window;
    j["stride"] = c.stride;
    j["passage_tokens"] = c.passage_tokens;
    j["gateway"] = c.gateway;
    j["endpoint"] = c.endpoint;
    j["model"] = c.model;
    j["temperature"] = c.temperature;
    j["top_p"] = c.top_p;
    j["max_tokens"] = c.max_tokens;
    j["pricing"] = {{"input_per_1k", c.pricing.input_per_1k},
                    {"output_per_1k", c.pricing.output_per_1k}};
    nlohmann::json profiles = nlohmann::json::object();
    for (const auto& [name, p] : c.profiles)
        profiles[name] = {{"input_tokens", p.input_tokens}, {"output_tokens", p.output_tokens}};
    j["profiles"] = profiles;
    j["epochs"] = c.epochs;
    j["learning_rate"] = c.learning_rate;
    j["momentum"] = c.momentum;
    j["train_size"] = c.train_size;
    j["targets"] = c.targets;
    j["bow_dim"] = c.bow_dim;
    j["vocab_size"] = c.vocab_size;
    j["max_reason_tokens"] = c.max_reason_tokens;
    j["pair_cap"] = c.pair_cap;
    j["scorer"] = c.scorer;
    j["hidden_size"] = c.hidden_size;
    j["seed"] = c.seed;
    return j;
}

/// Stage ledger for one run directory: config snapshot, completion flags,
/// content hashes of stage outputs, token/cost totals.
class RunManifest {
public:
    nlohmann::json config = nlohmann::json::object();
    std::map<std::string, nlohmann::json> stages;
    nlohmann::json usage = nlohmann::json::object();

    static RunManifest load(const std::filesystem::path& path) {
        RunManifest m;
        std::ifstream in(path);
        if (!in) return m;
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ValidationError("malformed manifest " + path.string());
        m.config = j.value("config", nlohmann::json::object());
        m.usage = j.value("usage", nlohmann::json::object());
        if (j.contains("stages")) {
            for (const auto& [name, stage] : j.at("stages").items()) m.stages[name] = stage;
        }
        return m;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json j;
        j["config"] = config;
        nlohmann::json stages_json = nlohmann::json::object();
        for (const auto& [name, stage] : stages) stages_json[name] = stage;
        j["stages"] = stages_json;
        j["usage"] = usage;
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw ValidationError("cannot write manifest " + path.string());
        out << j.dump(2) << '\n';
    }

    bool has_stage(const std::string& name) const { return stages.find(name) != stages.end(); }
};

inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot hash missing file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return detail::sha256_hex(buf.str());
}

/// Sequential orchestration of one run directory. Every command is
/// idempotent: unchanged inputs rewrite byte-identical outputs.
class Pipeline {
public:
    explicit Pipeline(RunConfig config) : config_(std::move(config)) {
        std::filesystem::create_directories(config_.run_dir);
        manifest_ = RunManifest::load(manifest_path());
        auto snapshot = run_config_json(config_);
        if (!manifest_.config.empty() && manifest_.config != snapshot && !config_.force) {
            throw ValidationError(
                "run config does not match the manifest in " + config_.run_dir.string() +
                "; rerun with --force to overwrite the run");
        }
        manifest_.config = snapshot;
    }

    const RunConfig& config() const { return config_; }

    // ---- stages ----------------------------------------------------------

    void cmd_index() {
        Corpus corpus = load_corpus(require_input(config_.corpus_path, "corpus"));
        InvertedIndex index = InvertedIndex::build(corpus);
        index.save(path("index.rrix"));
        record_stage("index", {"index.rrix"},
                     {{"documents", index.doc_count()}, {"terms", index.term_count()}});
    }

    void cmd_retrieve() {
        require_stage("index");
        InvertedIndex index = InvertedIndex::load(path("index.rrix"));
        auto queries = load_queries(require_input(config_.queries_path, "queries"));
        Bm25Params params{config_.k1, config_.b};
        std::vector<RunEntry> entries;
        for (const auto& query : queries) {
            RankedList ranked = retrieve_top_k(index, query, config_.topk, params);
            for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
                entries.push_back(RunEntry{query.query_id, ranked.entries[i].doc_id,
                                           static_cast<int>(i) + 1, ranked.entries[i].score,
                                           "bm25"});
            }
        }
        write_run(entries, path("retrieve.run"));
        record_stage("retrieve", {"retrieve.run"}, {{"queries", queries.size()}});
    }

    void cmd_teacher_rerank() {
        require_stage("retrieve");
        Corpus corpus = load_corpus(config_.corpus_path);
        auto queries = load_queries(config_.queries_path);
        auto first_stage = load_run_by_query(path("retrieve.run"));
        PromptTemplates templates = PromptTemplates::load(config_.templates_dir);
        TeacherGateway gateway = make_gateway();

        std::filesystem::create_directories(path("prompts"));
        std::filesystem::create_directories(path("responses"));

        std::vector<std::string> outputs;
        std::int64_t input_tokens = 0, output_tokens = 0, completions = 0;
        for (const auto& query : queries) {
            auto it = first_stage.find(query.query_id);
            if (it == first_stage.end() || it->second.empty()) continue;
            std::vector<std::string> working;
            for (const auto& e : it->second) working.push_back(e.doc_id);

            auto text_of = [&corpus](const std::string& doc_id) -> const std::string& {
                const Document* doc = corpus.find(doc_id);
                if (doc == nullptr)
                    throw ValidationError("retrieve.run references unknown doc " + doc_id);
                return doc->text;
            };

            auto spans = window_spans(working.size(), config_.window, config_.stride);
            for (std::size_t w = 0; w < spans.size(); ++w) {
                PassageWindow pw = make_window(query.query_id, working, spans[w], text_of,
                                               config_.passage_tokens);
                std::string prompt = build_prompt(query, pw, config_.mode, templates);
                std::string stem = query.query_id + ".w" + std::to_string(w);
                write_text(path("prompts") / (stem + ".txt"), prompt);
                outputs.push_back("prompts/" + stem + ".txt");

                CompletionRequest request{config_.model, prompt, config_.temperature,
                                          config_.top_p, config_.max_tokens};
                TeacherGateway::Completion completion = gateway.complete(request);

                auto expected = pw.expected_ids();
                std::vector<int> order;
                bool retried = false;
                try {
                    order = parse_ranking_response(completion.text, expected, query.query_id).order;
                } catch (const ResponseParseError&) {
                    retried = true;
                    completion = gateway.complete(request, /*bypass_cache=*/true);
                    try {
                        order = parse_ranking_response(completion.text, expected, query.query_id).order;
                    } catch (const ResponseParseError&) {
                        order.clear();  // repair falls back to the first-stage order
                    }
                }

                nlohmann::json record = {{"query_id", query.query_id},
                                         {"window_index", w},
                                         {"offset", spans[w].offset},
                                         {"size", spans[w].size},
                                         {"response_text", completion.text},
                                         {"input_tokens", completion.input_tokens},
                                         {"output_tokens", completion.output_tokens},
                                         {"parse_retried", retried}};
                write_text(path("responses") / (stem + ".json"), record.dump(2) + "\n");
                outputs.push_back("responses/" + stem + ".json");
                input_tokens += completion.input_tokens;
                output_tokens += completion.output_tokens;
                ++completions;

                std::vector<int> fallback(expected);
                auto repaired = repair_order(order, expected, fallback);
                apply_window(working, spans[w], repaired);
            }
        }
        manifest_.usage = {{"completions", completions},
                           {"input_tokens", input_tokens},
                           {"output_tokens", output_tokens},
                           {"cost", raw_cost(input_tokens, output_tokens, config_.pricing)}};
        // transport counts vary between cold and warm caches, so they stay
        // out of the manifest; byte-identical reruns depend on it
        record_stage("teacher_rerank", outputs, {{"completions", completions}});
        last_transport_requests_ = gateway.transport_requests();
        last_cache_hits_ = gateway.cache_hits();
    }

    void cmd_parse() {
        require_stage("teacher_rerank");
        auto queries = load_queries(config_.queries_path);
        auto first_stage = load_run_by_query(path("retrieve.run"));
        std::filesystem::create_directories(path("parsed"));

        std::vector<std::string> outputs;
        std::ostringstream defect_log;
        std::vector<RunEntry> teacher_entries;

        for (const auto& query : queries) {
            auto it = first_stage.find(query.query_id);
            if (it == first_stage.end() || it->second.empty()) continue;
            std::vector<std::string> working;
            for (const auto& e : it->second) working.push_back(e.doc_id);

            auto spans = window_spans(working.size(), config_.window, config_.stride);
            nlohmann::json windows_json = nlohmann::json::array();
            std::map<std::string, std::string> direct_by_doc, listwise_by_doc;
            std::vector<std::string> keywords;
            RankingDefects query_defects;

            for (std::size_t w = 0; w < spans.size(); ++w) {
                auto record = read_json(path("responses") /
                                        (query.query_id + ".w" + std::to_string(w) + ".json"));
                std::string text = record.value("response_text", "");
                std::vector<int> expected;
                for (std::size_t i = 1; i <= spans[w].size; ++i) expected.push_back(static_cast<int>(i));

                ReasonedRanking parsed;
                parsed.query_id = query.query_id;
                try {
                    parsed = parse_ranking_response(text, expected, query.query_id);
                } catch (const ResponseParseError&) {
                    parsed.defects.missing = expected;  // unusable response: full fallback
                    parsed.defects.retried_parse = true;
                }
                if (record.value("parse_retried", false)) parsed.defects.retried_parse = true;

                auto repaired = repair_order(parsed.order, expected, expected);

                // map window identifiers to documents as positioned right now
                for (int id : repaired) {
                    const std::string& doc = working[spans[w].offset + static_cast<std::size_t>(id) - 1];
                    auto dit = parsed.direct_reasons.find(id);
                    if (dit != parsed.direct_reasons.end() && !dit->second.empty())
                        direct_by_doc[doc] = dit->second;
                    auto lit = parsed.listwise_reasons.find(id);
                    if (lit != parsed.listwise_reasons.end() && !lit->second.empty())
                        listwise_by_doc[doc] = lit->second;
                }
                for (const auto& kw : parsed.keywords) {
                    if (std::find(keywords.begin(), keywords.end(), kw) == keywords.end())
                        keywords.push_back(kw);
                }

                nlohmann::json wj = {{"offset", spans[w].offset},
                                     {"size", spans[w].size},
                                     {"order", parsed.order},
                                     {"repaired", repaired},
                                     {"duplicates", parsed.defects.duplicates},
                                     {"missing", parsed.defects.missing},
                                     {"out_of_range", parsed.defects.out_of_range},
                                     {"retried_parse", parsed.defects.retried_parse}};
                windows_json.push_back(wj);

                for (int id : parsed.defects.duplicates)
                    defect_log << defect_row(query.query_id, "duplicate", id);
                for (int id : parsed.defects.missing)
                    defect_log << defect_row(query.query_id, "missing", id);
                for (int id : parsed.defects.out_of_range)
                    defect_log << defect_row(query.query_id, "out_of_range", id);
                query_defects.duplicates.insert(query_defects.duplicates.end(),
                                                parsed.defects.duplicates.begin(),
                                                parsed.defects.duplicates.end());
                query_defects.missing.insert(query_defects.missing.end(),
                                             parsed.defects.missing.begin(),
                                             parsed.defects.missing.end());
                query_defects.out_of_range.insert(query_defects.out_of_range.end(),
                                                  parsed.defects.out_of_range.begin(),
                                                  parsed.defects.out_of_range.end());

                apply_window(working, spans[w], repaired);
            }

            nlohmann::json qj;
            qj["query_id"] = query.query_id;
            qj["final_order"] = working;
            qj["windows"] = windows_json;
            nlohmann::json reasons = nlohmann::json::object();
            for (const auto& doc : working) {
                reasons[doc] = {{"direct", direct_by_doc.count(doc) ? direct_by_doc[doc] : ""},
                                {"listwise", listwise_by_doc.count(doc) ? listwise_by_doc[doc] : ""}};
            }
            qj["reasons"] = reasons;
            qj["keywords"] = keywords;
            write_text(path("parsed") / (query.query_id + ".json"), qj.dump(2) + "\n");
            outputs.push_back("parsed/" + query.query_id + ".json");

            for (std::size_t i = 0; i < working.size(); ++i) {
                teacher_entries.push_back(RunEntry{query.query_id, working[i],
                                                   static_cast<int>(i) + 1,
                                                   static_cast<double>(working.size() - i),
                                                   "teacher-" + to_string(config_.mode)});
            }
        }

        write_text(path("parsed") / "defects.jsonl", defect_log.str());
        outputs.push_back("parsed/defects.jsonl");
        write_run(teacher_entries, path("teacher.run"));
        outputs.push_back("teacher.run");
        record_stage("parse", outputs, {});
    }

    void cmd_train() {
        require_stage("parse");
        auto [examples, vocab] = build_examples();
        std::size_t total = examples.size();
        if (config_.train_size > 0 && config_.train_size < examples.size()) {
            examples = subsample(examples, config_.train_size);
        }

        StudentConfig student_config = make_student_config(vocab.size());
        TrainConfig train_config{config_.epochs, config_.learning_rate, config_.momentum,
                                 config_.seed};
        TrainResult result = train(examples, student_config, train_config);

        save_student(result.params, vocab, path("model.json"));
        write_loss_trace_csv(result.trace, path("train_trace.csv"));
        auto weights = result.params.mix_weights();
        record_stage("train", {"model.json", "train_trace.csv"},
                     {{"examples_total", total},
                      {"examples_used", examples.size()},
                      {"epochs", config_.epochs},
                      {"alpha", weights[0]},
                      {"beta", weights[1]},
                      {"gamma", weights[2]},
                      {"max_simplex_error", result.max_simplex_error}});
    }

    void cmd_student_rerank() {
        require_stage("train");
        auto [params, vocab] = load_student(path("model.json"));
        Corpus corpus = load_corpus(config_.corpus_path);
        auto queries = load_queries(config_.queries_path);
        auto first_stage = load_run_by_query(path("retrieve.run"));
        InvertedIndex index = InvertedIndex::load(path("index.rrix"));

        std::vector<RunEntry> entries;
        nlohmann::json reasons_json = nlohmann::json::object();
        for (const auto& query : queries) {
            auto it = first_stage.find(query.query_id);
            if (it == first_stage.end() || it->second.empty()) continue;
            DistillationExample candidates =
                make_candidates(query, it->second, corpus, index.avgdl());
            StudentRerankResult reranked = rerank_student(params, vocab, candidates);
            for (std::size_t i = 0; i < reranked.ranking.entries.size(); ++i) {
                entries.push_back(RunEntry{query.query_id, reranked.ranking.entries[i].doc_id,
                                           static_cast<int>(i) + 1,
                                           reranked.ranking.entries[i].score,
                                           "student-" + to_string(config_.mode)});
            }
            nlohmann::json per_doc = nlohmann::json::object();
            for (const auto& [doc, reason] : reranked.reasons) per_doc[doc] = reason;
            reasons_json[query.query_id] = per_doc;
        }
        write_run(entries, path("student.run"));
        write_text(path("parsed") / "student_reasons.json", reasons_json.dump(2) + "\n");
        record_stage("student_rerank", {"student.run", "parsed/student_reasons.json"}, {});
    }

    /// NDCG@{5,10} for the bm25/teacher/student runs, BLEU and ROUGE-L of
    /// student reasons against teacher reasons, and paired t-tests against
    /// the first-stage baseline (and optionally another run directory).
    void cmd_evaluate(const std::optional<std::filesystem::path>& baseline_run = std::nullopt) {
        require_stage("parse");
        require_stage("student_rerank");
        Qrels qrels = load_qrels(require_input(config_.qrels_path, "qrels"));
        auto queries = load_queries(config_.queries_path);
        std::filesystem::create_directories(path("eval"));

        std::vector<std::string> eval_qids;
        for (const auto& q : queries) {
            if (qrels.judged(q.query_id) != nullptr) eval_qids.push_back(q.query_id);
        }
        if (eval_qids.empty()) throw ValidationError("no judged queries to evaluate");

        std::map<std::string, std::filesystem::path> systems = {
            {"bm25", path("retrieve.run")},
            {"teacher", path("teacher.run")},
            {"student", path("student.run")}};

        std::vector<std::string> outputs;
        nlohmann::json summary;
        std::map<std::string, std::vector<double>> ndcg5_by_system;
        for (const auto& [system, run_path] : systems) {
            auto by_query = load_run_by_query(run_path);
            for (std::size_t k : {std::size_t{5}, std::size_t{10}}) {
                std::vector<std::pair<std::string, double>> per_query;
                for (const auto& qid : eval_qids) {
                    std::vector<std::string> ranking;
                    auto it = by_query.find(qid);
                    if (it != by_query.end()) {
                        for (const auto& e : it->second) ranking.push_back(e.doc_id);
                    }
                    per_query.emplace_back(qid, ndcg_at_k(ranking, qrels, qid, k));
                }
                auto report = make_report("ndcg@" + std::to_string(k), k, per_query);
                std::string csv_name = "ndcg" + std::to_string(k) + "_" + system + ".csv";
                write_report_csv(report, path("eval") / csv_name);
                outputs.push_back("eval/" + csv_name);
                summary["ndcg"][system]["@" + std::to_string(k)] = report_summary_json(report);
                if (k == 5) {
                    std::vector<double> values;
                    for (auto& [qid, v] : per_query) values.push_back(v);
                    ndcg5_by_system[system] = values;
                }
            }
        }

        for (const auto& system : {"teacher", "student"}) {
            auto t = paired_t_test(ndcg5_by_system[system], ndcg5_by_system["bm25"]);
            summary["t_test_ndcg5_vs_bm25"][system] = t_test_json(t);
        }

        // reason quality: student decode vs teacher reasons, tokenized
        auto teacher_reasons = load_teacher_reasons(eval_qids);
        auto student_reasons = read_json(path("parsed") / "student_reasons.json");
        std::vector<std::pair<std::string, double>> bleu_per_query, rouge_per_query;
        for (const auto& qid : eval_qids) {
            if (!student_reasons.contains(qid)) continue;
            auto tit = teacher_reasons.find(qid);
            if (tit == teacher_reasons.end()) continue;
            double bleu_sum = 0.0, rouge_sum = 0.0;
            std::size_t count = 0;
            for (const auto& [doc, reference] : tit->second) {
                if (reference.empty()) continue;
                std::string candidate = student_reasons.at(qid).value(doc, "");
                auto cand_tokens = tokenize(candidate);
                auto ref_tokens = tokenize(reference);
                if (ref_tokens.empty()) continue;
                bleu_sum += bleu(cand_tokens, ref_tokens);
                rouge_sum += rouge_l(cand_tokens, ref_tokens);
                ++count;
            }
            if (count > 0) {
                bleu_per_query.emplace_back(qid, bleu_sum / static_cast<double>(count));
                rouge_per_query.emplace_back(qid, rouge_sum / static_cast<double>(count));
            }
        }
        auto bleu_report = make_report("bleu", 0, bleu_per_query);
        auto rouge_report = make_report("rouge_l", 0, rouge_per_query);
        write_report_csv(bleu_report, path("eval") / "bleu_student.csv");
        write_report_csv(rouge_report, path("eval") / "rougel_student.csv");
        outputs.push_back("eval/bleu_student.csv");
        outputs.push_back("eval/rougel_student.csv");
        summary["reason_quality"]["bleu"] = report_summary_json(bleu_report);
        summary["reason_quality"]["rouge_l"] = report_summary_json(rouge_report);

        if (baseline_run.has_value()) {
            auto baseline_by_query = load_run_by_query(*baseline_run / "student.run");
            auto here_by_query = load_run_by_query(path("student.run"));
            std::vector<double> here, there;
            for (const auto& qid : eval_qids) {
                auto collect = [&](const std::map<std::string, std::vector<ScoredDoc>>& runs) {
                    std::vector<std::string> ranking;
                    auto it = runs.find(qid);
                    if (it != runs.end())
                        for (const auto& e : it->second) ranking.push_back(e.doc_id);
                    return ndcg_at_k(ranking, qrels, qid, 5);
                };
                here.push_back(collect(here_by_query));
                there.push_back(collect(baseline_by_query));
            }
            summary["t_test_ndcg5_vs_baseline_run"] = t_test_json(paired_t_test(here, there));
            summary["baseline_run"] = baseline_run->string();
        }

        write_text(path("eval") / "summary.json", summary.dump(2) + "\n");
        outputs.push_back("eval/summary.json");
        record_stage("evaluate", outputs, {});
    }

    void cmd_cost_report() {
        require_stage("teacher_rerank");
        std::ostringstream csv;
        csv << "kind,name,input_tokens,output_tokens,total_tokens,cost_usd\n";
        auto usage = manifest_.usage;
        std::int64_t in_tok = usage.value("input_tokens", std::int64_t{0});
        std::int64_t out_tok = usage.value("output_tokens", std::int64_t{0});
        char cost_buf[32];
        std::snprintf(cost_buf, sizeof(cost_buf), "%.3f",
                      estimate_cost(in_tok, out_tok, config_.pricing));
        csv << "session,ledger," << in_tok << ',' << out_tok << ',' << (in_tok + out_tok) << ','
            << cost_buf << '\n';
        for (const auto& [name, profile] : config_.profiles) {
            std::snprintf(cost_buf, sizeof(cost_buf), "%.3f",
                          estimate_cost(profile.input_tokens, profile.output_tokens,
                                        config_.pricing));
            csv << "profile," << name << ',' << profile.input_tokens << ','
                << profile.output_tokens << ','
                << (profile.input_tokens + profile.output_tokens) << ',' << cost_buf << '\n';
        }
        std::filesystem::create_directories(path("eval"));
        write_text(path("eval") / "cost_report.csv", csv.str());
        record_stage("cost_report", {"eval/cost_report.csv"}, {});
    }

    void cmd_behavior_report() {
        require_stage("parse");
        auto queries = load_queries(config_.queries_path);
        std::vector<RankingDefects> batch;
        for (const auto& query : queries) {
            auto p = path("parsed") / (query.query_id + ".json");
            if (!std::filesystem::exists(p)) continue;
            auto qj = read_json(p);
            RankingDefects d;
            for (const auto& wj : qj.value("windows", nlohmann::json::array())) {
                for (int id : wj.value("duplicates", std::vector<int>{})) d.duplicates.push_back(id);
                for (int id : wj.value("missing", std::vector<int>{})) d.missing.push_back(id);
                for (int id : wj.value("out_of_range", std::vector<int>{}))
                    d.out_of_range.push_back(id);
            }
            batch.push_back(std::move(d));
        }
        BehaviorStats stats = analyze_behavior(batch);
        std::filesystem::create_directories(path("eval"));
        write_text(path("eval") / "behavior.json", behavior_report_json(stats).dump(2) + "\n");
        record_stage("behavior_report", {"eval/behavior.json"}, {});
    }

    /// index -> retrieve -> teacher-rerank -> parse -> train ->
    /// student-rerank -> evaluate -> cost-report -> behavior-report.
    void run_all() {
        cmd_index();
        cmd_retrieve();
        cmd_teacher_rerank();
        cmd_parse();
        cmd_train();
        cmd_student_rerank();
        cmd_evaluate();
        cmd_cost_report();
        cmd_behavior_report();
    }

    std::int64_t last_transport_requests() const { return last_transport_requests_; }
    std::int64_t last_cache_hits() const { return last_cache_hits_; }
    const RunManifest& manifest() const { return manifest_; }

private:
    std::filesystem::path manifest_path() const { return config_.run_dir / "manifest.json"; }
    std::filesystem::path path(const std::string& rel) const { return config_.run_dir / rel; }

    static std::string defect_row(const std::string& qid, const char* type, int id) {
        nlohmann::json j = {{"query_id", qid}, {"type", type}, {"detail", id}};
        return j.dump() + "\n";
    }

    std::filesystem::path require_input(const std::filesystem::path& p, const char* what) const {
        if (p.empty() || !std::filesystem::exists(p))
            throw ValidationError(std::string(what) + " path not found: " + p.string());
        return p;
    }

    void require_stage(const std::string& name) const {
        if (!manifest_.has_stage(name))
            throw ValidationError("stage '" + name + "' has not run in " +
                                  config_.run_dir.string() + "; run it first");
    }

    void record_stage(const std::string& name, const std::vector<std::string>& outputs,
                      nlohmann::json extra) {
        nlohmann::json stage = std::move(extra);
        nlohmann::json hashes = nlohmann::json::object();
        for (const auto& rel : outputs) hashes[rel] = hash_file(path(rel));
        stage["outputs"] = hashes;
        manifest_.stages[name] = stage;
        manifest_.save(manifest_path());
    }

    static void write_text(const std::filesystem::path& p, const std::string& content) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + p.string());
        out << content;
    }

    static nlohmann::json read_json(const std::filesystem::path& p) {
        std::ifstream in(p);
        if (!in) throw ValidationError("cannot open " + p.string());
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ValidationError("malformed JSON in " + p.string());
        return j;
    }

    static void apply_window(std::vector<std::string>& working, WindowSpan span,
                             const std::vector<int>& order) {
        std::vector<std::string> slice(span.size);
        for (std::size_t i = 0; i < span.size; ++i) {
            slice[i] = working[span.offset + static_cast<std::size_t>(order[i]) - 1];
        }
        std::copy(slice.begin(), slice.end(),
                  working.begin() + static_cast<std::ptrdiff_t>(span.offset));
    }

    std::map<std::string, std::vector<ScoredDoc>> load_run_by_query(
        const std::filesystem::path& run_path) const {
        std::map<std::string, std::vector<ScoredDoc>> by_query;
        for (const auto& e : load_run(run_path)) {
            auto& v = by_query[e.query_id];
            if (static_cast<int>(v.size()) < e.rank) v.resize(static_cast<std::size_t>(e.rank));
            v[static_cast<std::size_t>(e.rank) - 1] = ScoredDoc{e.doc_id, e.score};
        }
        return by_query;
    }

    TeacherGateway make_gateway() {
        GatewayConfig gc;
        gc.cache_dir = path("cache");
        gc.pricing = config_.pricing;
        gc.max_retries = config_.max_retries;
        gc.backoff_base_ms = config_.backoff_ms;
        gc.max_concurrency = config_.concurrency;

        std::unique_ptr<Transport> transport;
        const std::string& g = config_.gateway;
        if (g == "cache-only") {
            gc.cache_only = true;
        } else if (g.rfind("mock:@", 0) == 0) {
            transport = ScriptedTransport::from_file(g.substr(6));
        } else if (g.rfind("mock:", 0) == 0) {
            transport = std::make_unique<MockTeacherTransport>(
                MockTeacherTransport::policy_from_string(g.substr(5)));
        } else if (g == "http") {
            if (config_.endpoint.empty())
                throw ValidationError("gateway=http requires an endpoint URL");
            transport = std::make_unique<HttpTransport>(config_.endpoint);
        } else {
            throw ValidationError("unknown gateway '" + g +
                                  "' (expected mock:<policy>, mock:@<script>, http, cache-only)");
        }
        return TeacherGateway(std::move(gc), std::move(transport));
    }

    StudentConfig make_student_config(std::size_t vocab_size) const {
        StudentConfig sc;
        sc.features.bow_dim = config_.bow_dim;
        sc.scorer = config_.scorer == "hidden" ? ScorerKind::Hidden : ScorerKind::Linear;
        sc.hidden_size = config_.hidden_size;
        sc.vocab_size = vocab_size;
        sc.max_reason_tokens = config_.max_reason_tokens;
        return sc;
    }

    DistillationExample make_candidates(const Query& query, const std::vector<ScoredDoc>& ranked,
                                        const Corpus& corpus, double avgdl) const {
        std::vector<std::string> doc_ids, texts;
        std::vector<double> scores;
        for (const auto& e : ranked) {
            const Document* doc = corpus.find(e.doc_id);
            if (doc == nullptr) throw ValidationError("run references unknown doc " + e.doc_id);
            doc_ids.push_back(e.doc_id);
            texts.push_back(doc->text);
            scores.push_back(e.score);
        }
        std::vector<int> identity(doc_ids.size());
        std::iota(identity.begin(), identity.end(), 0);
        std::vector<std::string> no_reasons(doc_ids.size());
        ExampleBuildConfig bc;
        bc.features.bow_dim = config_.bow_dim;
        bc.pair_cap = config_.pair_cap;
        bc.max_reason_tokens = config_.max_reason_tokens;
        GenerationVocab empty_vocab;
        return make_example(query, doc_ids, texts, scores, identity, no_reasons, empty_vocab,
                            avgdl, bc);
    }

    std::map<std::string, std::map<std::string, std::string>> load_teacher_reasons(
        const std::vector<std::string>& qids) const {
        std::map<std::string, std::map<std::string, std::string>> reasons;
        for (const auto& qid : qids) {
            auto p = path("parsed") / (qid + ".json");
            if (!std::filesystem::exists(p)) continue;
            auto qj = read_json(p);
            nlohmann::json reason_map = qj.value("reasons", nlohmann::json::object());
            for (const auto& [doc, r] : reason_map.items()) {
                std::string direct = r.value("direct", "");
                std::string listwise = r.value("listwise", "");
                std::string joined = direct;
                if (!listwise.empty()) {
                    if (!joined.empty()) joined += " ";
                    joined += listwise;
                }
                reasons[qid][doc] = joined;
            }
        }
        return reasons;
    }

    std::pair<std::vector<DistillationExample>, GenerationVocab> build_examples() const {
        Corpus corpus = load_corpus(config_.corpus_path);
        auto queries = load_queries(config_.queries_path);
        auto first_stage = load_run_by_query(path("retrieve.run"));
        InvertedIndex index = InvertedIndex::load(path("index.rrix"));
        Qrels qrels;
        bool use_qrels = config_.targets == "qrels";
        if (use_qrels) qrels = load_qrels(require_input(config_.qrels_path, "qrels"));

        // vocabulary over every teacher reason in the training pool
        std::vector<std::string> reason_texts;
        struct PerQuery {
            const Query* query;
            std::vector<std::string> doc_ids, texts, reasons;
            std::vector<double> scores;
            std::vector<int> teacher_order;
        };
        std::vector<PerQuery> rows;
        auto teacher_reasons = load_teacher_reasons([&] {
            std::vector<std::string> qids;
            for (const auto& q : queries) qids.push_back(q.query_id);
            return qids;
        }());

        for (const auto& query : queries) {
            auto it = first_stage.find(query.query_id);
            if (it == first_stage.end() || it->second.empty()) continue;
            auto p = path("parsed") / (query.query_id + ".json");
            if (!std::filesystem::exists(p)) continue;
            auto qj = read_json(p);
            auto final_order = qj.value("final_order", std::vector<std::string>{});

            PerQuery row;
            row.query = &query;
            std::map<std::string, int> index_of;
            for (const auto& e : it->second) {
                const Document* doc = corpus.find(e.doc_id);
                if (doc == nullptr) throw ValidationError("run references unknown doc " + e.doc_id);
                index_of[e.doc_id] = static_cast<int>(row.doc_ids.size());
                row.doc_ids.push_back(e.doc_id);
                row.texts.push_back(doc->text);
                row.scores.push_back(e.score);
            }
            for (const auto& doc : final_order) {
                auto oit = index_of.find(doc);
                if (oit == index_of.end())
                    throw ValidationError("parsed order references unknown doc " + doc);
                row.teacher_order.push_back(oit->second);
            }
            if (row.teacher_order.size() != row.doc_ids.size())
                throw ValidationError("parsed order for query " + query.query_id +
                                      " does not cover the candidate list");
            row.reasons.resize(row.doc_ids.size());
            auto tit = teacher_reasons.find(query.query_id);
            if (tit != teacher_reasons.end()) {
                for (std::size_t i = 0; i < row.doc_ids.size(); ++i) {
                    auto rit = tit->second.find(row.doc_ids[i]);
                    if (rit != tit->second.end()) row.reasons[i] = rit->second;
                }
            }
            for (const auto& r : row.reasons)
                if (!r.empty()) reason_texts.push_back(r);
            rows.push_back(std::move(row));
        }
        if (rows.empty()) throw ValidationError("no parsed queries available for training");

        GenerationVocab vocab = GenerationVocab::build(reason_texts, config_.vocab_size);

        ExampleBuildConfig bc;
        bc.features.bow_dim = config_.bow_dim;
        bc.pair_cap = config_.pair_cap;
        bc.max_reason_tokens = config_.max_reason_tokens;
        bc.targets_from_qrels = use_qrels;

        std::vector<DistillationExample> examples;
        for (const auto& row : rows) {
            examples.push_back(make_example(*row.query, row.doc_ids, row.texts, row.scores,
                                            row.teacher_order, row.reasons, vocab, index.avgdl(),
                                            bc, use_qrels ? &qrels : nullptr));
        }
        return {std::move(examples), std::move(vocab)};
    }

    /// Seeded priority-order subsampling: the size-k sample is always a
    /// subset of the size-(k+1) sample for the same seed.
    std::vector<DistillationExample> subsample(std::vector<DistillationExample> examples,
                                               std::size_t k) const {
        std::vector<std::pair<std::uint64_t, std::size_t>> priorities;
        priorities.reserve(examples.size());
        for (std::size_t i = 0; i < examples.size(); ++i) {
            priorities.emplace_back(
                detail::fnv1a(examples[i].query_id + "#" + std::to_string(config_.seed)), i);
        }
        std::sort(priorities.begin(), priorities.end());
        priorities.resize(k);
        std::sort(priorities.begin(), priorities.end(),
                  [](const auto& a, const auto& b) { return a.second < b.second; });
        std::vector<DistillationExample> sampled;
        sampled.reserve(k);
        for (const auto& [h, i] : priorities) sampled.push_back(std::move(examples[i]));
        return sampled;
    }

    RunConfig config_;
    RunManifest manifest_;
    std::int64_t last_transport_requests_ = -1;
    std::int64_t last_cache_hits_ = 0;
};

}  // namespace reasonrank
