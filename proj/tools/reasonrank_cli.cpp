// reasonrank command-line pipeline: index -> retrieve -> teacher-rerank ->
// parse -> train -> student-rerank -> evaluate, plus cost and behavior
// reports. Stage state lives in <run_dir>/manifest.json.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "reasonrank/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitGateway = 3;

void print_stage(const reasonrank::RunManifest& manifest, const std::string& stage) {
    auto it = manifest.stages.find(stage);
    if (it == manifest.stages.end()) return;
    std::cout << "[" << stage << "] done";
    for (const auto& [key, value] : it->second.items()) {
        if (key == "outputs") continue;
        std::cout << ' ' << key << '=' << value.dump();
    }
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reasonrank: BM25 retrieval, teacher reranking with reasons, and student distillation"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    std::vector<std::pair<std::string, std::string>> overrides;
    app.add_option("--config", config_path, "key=value run configuration file");
    app.add_flag("--force", force, "overwrite a run whose manifest config differs");

    auto add_key = [&overrides](CLI::App& cmd, const std::string& flag, const std::string& key,
                                const std::string& desc) {
        cmd.add_option_function<std::string>(
            flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); },
            desc);
    };
    add_key(app, "--corpus", "corpus", "JSONL corpus path");
    add_key(app, "--queries", "queries", "query_id<TAB>text file");
    add_key(app, "--qrels", "qrels", "TREC qrels path");
    add_key(app, "--run-dir", "run_dir", "run directory");
    add_key(app, "--templates", "templates", "prompt template directory");
    add_key(app, "--mode", "mode", "prompt mode: basic|explicit|comparison|combined");
    add_key(app, "--window", "window", "sliding window size");
    add_key(app, "--stride", "stride", "sliding window stride");
    add_key(app, "--topk", "topk", "first-stage depth");
    add_key(app, "--k1", "k1", "BM25 k1");
    add_key(app, "--b", "b", "BM25 b");
    add_key(app, "--gateway", "gateway", "mock:<policy> | mock:@<script> | http | cache-only");
    add_key(app, "--endpoint", "endpoint", "chat-completions endpoint URL");
    add_key(app, "--model", "model", "teacher model name");
    add_key(app, "--epochs", "epochs", "training epochs");
    add_key(app, "--learning-rate", "learning_rate", "SGD learning rate");
    add_key(app, "--train-size", "train_size", "subsample size (0 = all)");
    add_key(app, "--targets", "targets", "listwise targets: teacher|qrels");
    add_key(app, "--scorer", "scorer", "student scorer: linear|hidden");
    add_key(app, "--seed", "seed", "run seed");

    auto* cmd_index = app.add_subcommand("index", "build the inverted index");
    auto* cmd_retrieve = app.add_subcommand("retrieve", "first-stage BM25 retrieval");
    auto* cmd_teacher = app.add_subcommand("teacher-rerank", "prompt the teacher over sliding windows");
    auto* cmd_parse = app.add_subcommand("parse", "parse responses into rankings and reasons");
    auto* cmd_train = app.add_subcommand("train", "distill teacher outputs into the student");
    auto* cmd_student = app.add_subcommand("student-rerank", "rerank with the trained student");
    auto* cmd_evaluate = app.add_subcommand("evaluate", "NDCG/BLEU/ROUGE-L tables and t-tests");
    auto* cmd_cost = app.add_subcommand("cost-report", "token and cost ledger");
    auto* cmd_behavior = app.add_subcommand("behavior-report", "teacher output defect rates");
    auto* cmd_run = app.add_subcommand("run", "run every stage in order");

    std::string baseline_dir;
    cmd_evaluate->add_option("--baseline", baseline_dir,
                             "another run directory to t-test this run's student against");

    CLI11_PARSE(app, argc, argv);

    try {
        reasonrank::RunConfig config;
        if (!config_path.empty()) config = reasonrank::load_run_config(config_path);
        for (const auto& [key, value] : overrides) {
            reasonrank::apply_config_setting(config, key, value);
        }
        config.force = force;

        reasonrank::Pipeline pipeline(config);
        if (cmd_index->parsed()) {
            pipeline.cmd_index();
            print_stage(pipeline.manifest(), "index");
        } else if (cmd_retrieve->parsed()) {
            pipeline.cmd_retrieve();
            print_stage(pipeline.manifest(), "retrieve");
        } else if (cmd_teacher->parsed()) {
            pipeline.cmd_teacher_rerank();
            print_stage(pipeline.manifest(), "teacher_rerank");
            std::cout << "  transport_requests=" << pipeline.last_transport_requests()
                      << " cache_hits=" << pipeline.last_cache_hits() << '\n';
        } else if (cmd_parse->parsed()) {
            pipeline.cmd_parse();
            print_stage(pipeline.manifest(), "parse");
        } else if (cmd_train->parsed()) {
            pipeline.cmd_train();
            print_stage(pipeline.manifest(), "train");
        } else if (cmd_student->parsed()) {
            pipeline.cmd_student_rerank();
            print_stage(pipeline.manifest(), "student_rerank");
        } else if (cmd_evaluate->parsed()) {
            std::optional<std::filesystem::path> baseline;
            if (!baseline_dir.empty()) baseline = baseline_dir;
            pipeline.cmd_evaluate(baseline);
            print_stage(pipeline.manifest(), "evaluate");
        } else if (cmd_cost->parsed()) {
            pipeline.cmd_cost_report();
            print_stage(pipeline.manifest(), "cost_report");
        } else if (cmd_behavior->parsed()) {
            pipeline.cmd_behavior_report();
            print_stage(pipeline.manifest(), "behavior_report");
        } else if (cmd_run->parsed()) {
            pipeline.run_all();
            for (const char* stage :
                 {"index", "retrieve", "teacher_rerank", "parse", "train", "student_rerank",
                  "evaluate", "cost_report", "behavior_report"}) {
                print_stage(pipeline.manifest(), stage);
            }
        }
        return kExitOk;
    } catch (const reasonrank::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const reasonrank::GatewayError& e) {
        std::cerr << "gateway error: " << e.what() << '\n';
        return kExitGateway;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << '\n';
        return 1;
    }
}
