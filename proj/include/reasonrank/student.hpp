#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reasonrank/bm25.hpp"
#include "reasonrank/corpus.hpp"
#include "reasonrank/detail/rng.hpp"
#include "reasonrank/detail/sha256.hpp"
#include "reasonrank/errors.hpp"

namespace reasonrank {

// ---------------------------------------------------------------------------
// features

/// Per-(query, document) feature layout: BM25 score, term-overlap ratio,
/// normalized first-stage rank, document length ratio, then a hashed
/// bag-of-words projection of the document text.
struct FeatureConfig {
    std::size_t bow_dim = 64;

    std::size_t dim() const { return 4 + bow_dim; }

    std::string schema_hash() const {
        return detail::sha256_hex("features-v1:bm25,overlap,norm_rank,len_ratio,bow" +
                                  std::to_string(bow_dim));
    }
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

/// L2-normalized hashed token counts.
inline std::vector<double> hashed_bow(const std::vector<std::string>& tokens, std::size_t dim) {
    std::vector<double> v(dim, 0.0);
    if (dim == 0) return v;
    for (const auto& tok : tokens) {
        v[detail::fnv1a(tok) % dim] += 1.0;
    }
    double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm > 0.0) {
        for (auto& x : v) x /= norm;
    }
    return v;
}

inline std::vector<double> extract_features(const FeatureConfig& config,
                                            const std::vector<std::string>& query_tokens,
                                            const std::vector<std::string>& doc_tokens,
                                            double bm25_score, std::size_t first_stage_rank,
                                            std::size_t n_candidates, double avgdl) {
    std::vector<double> f;
    f.reserve(config.dim());
    f.push_back(bm25_score);

    std::set<std::string> qset(query_tokens.begin(), query_tokens.end());
    std::set<std::string> dset(doc_tokens.begin(), doc_tokens.end());
    std::size_t overlap = 0;
    for (const auto& t : qset) overlap += dset.count(t);
    f.push_back(qset.empty() ? 0.0 : static_cast<double>(overlap) / static_cast<double>(qset.size()));

    f.push_back(n_candidates == 0
                    ? 0.0
                    : static_cast<double>(n_candidates - first_stage_rank + 1) /
                          static_cast<double>(n_candidates));  // rank 1 -> 1.0

    f.push_back(avgdl > 0.0 ? static_cast<double>(doc_tokens.size()) / avgdl : 0.0);

    auto bow = hashed_bow(doc_tokens, config.bow_dim);
    f.insert(f.end(), bow.begin(), bow.end());
    return f;
}

// ---------------------------------------------------------------------------
// generation vocabulary

/// Closed vocabulary over teacher-reason tokens. Ids are dense from 0 with
/// UNK and EOS reserved.
class GenerationVocab {
public:
    static constexpr int kUnk = 0;
    static constexpr int kEos = 1;

    GenerationVocab() : id_to_token_{"<unk>", "<eos>"} { rebuild_map(); }

    explicit GenerationVocab(std::vector<std::string> tokens) {
        id_to_token_ = {"<unk>", "<eos>"};
        for (auto& t : tokens) id_to_token_.push_back(std::move(t));
        rebuild_map();
    }

    /// Keeps the `max_tokens` most frequent tokens (ties by token text).
    static GenerationVocab build(const std::vector<std::string>& reason_texts,
                                 std::size_t max_tokens = 2048) {
        std::map<std::string, std::size_t> counts;
        for (const auto& text : reason_texts) {
            for (auto& tok : tokenize(text)) ++counts[tok];
        }
        std::vector<std::pair<std::string, std::size_t>> by_freq(counts.begin(), counts.end());
        std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        if (by_freq.size() > max_tokens) by_freq.resize(max_tokens);
        std::vector<std::string> tokens;
        tokens.reserve(by_freq.size());
        for (auto& [tok, n] : by_freq) tokens.push_back(tok);
        return GenerationVocab(std::move(tokens));
    }

    std::size_t size() const { return id_to_token_.size(); }

    int id(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    /// Token ids for a reason text, truncated, EOS-terminated.
    std::vector<int> encode(const std::string& text, std::size_t max_len) const {
        std::vector<int> ids;
        auto toks = tokenize(text);
        for (const auto& t : toks) {
            if (ids.size() + 1 >= max_len) break;
            ids.push_back(id(t));
        }
        ids.push_back(kEos);
        return ids;
    }

private:
    void rebuild_map() {
        token_to_id_.clear();
        for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
            token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
        }
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// ---------------------------------------------------------------------------
// training unit

/// One query's distillation data: candidates in first-stage order with
/// features, the teacher's preferred order, derived target scores, teacher
/// reason tokens, and the strict-preference pair set.
struct DistillationExample {
    std::string query_id;
    std::vector<std::string> doc_ids;             // first-stage order
    std::vector<std::vector<double>> features;    // per candidate
    std::vector<double> query_features;           // hashed query bag-of-words
    std::vector<int> teacher_order;               // candidate indices, best first
    std::vector<double> targets;                  // z per candidate
    std::vector<std::vector<int>> reason_tokens;  // per candidate, vocab ids
    std::vector<std::pair<int, int>> pairs;       // (preferred, other) candidate indices

    std::size_t size() const { return doc_ids.size(); }
};

// ---------------------------------------------------------------------------
// parameters

enum class ScorerKind { Linear, Hidden };

struct StudentConfig {
    FeatureConfig features;
    ScorerKind scorer = ScorerKind::Linear;
    std::size_t hidden_size = 32;
    std::size_t vocab_size = 2;  // >= 2 (UNK, EOS)
    std::size_t max_reason_tokens = 32;

    std::size_t context_dim() const { return features.bow_dim + features.dim(); }
};

/// Trainable state: scorer weights, generation-head weights, and the
/// loss-mix logits. The mix weights (alpha, beta, gamma) are the softmax
/// of the logits, so they stay on the simplex by construction.
struct StudentParams {
    StudentConfig config;
    std::vector<double> scorer_w;   // Linear: [F]
    std::vector<double> hidden_w;   // Hidden: [H x F], row-major
    std::vector<double> hidden_v;   // Hidden: [H]
    std::vector<double> gen_w;      // [C x V], row-major
    std::array<double, 3> mix_logits{0.0, 0.0, 0.0};

    std::array<double, 3> mix_weights() const {
        double m = std::max({mix_logits[0], mix_logits[1], mix_logits[2]});
        std::array<double, 3> e{std::exp(mix_logits[0] - m), std::exp(mix_logits[1] - m),
                                std::exp(mix_logits[2] - m)};
        double sum = e[0] + e[1] + e[2];
        return {e[0] / sum, e[1] / sum, e[2] / sum};
    }

    static StudentParams init(const StudentConfig& config, std::uint64_t seed) {
        if (config.vocab_size < 2) throw ValidationError("vocab must hold at least UNK and EOS");
        StudentParams p;
        p.config = config;
        std::size_t f = config.features.dim();
        if (config.scorer == ScorerKind::Linear) {
            p.scorer_w.assign(f, 0.0);
        } else {
            std::mt19937_64 rng(seed);
            p.hidden_w.resize(config.hidden_size * f);
            p.hidden_v.resize(config.hidden_size);
            for (auto& w : p.hidden_w) w = detail::normal(rng, 0.0, 0.1);
            for (auto& w : p.hidden_v) w = detail::normal(rng, 0.0, 0.1);
        }
        p.gen_w.assign(config.context_dim() * config.vocab_size, 0.0);
        return p;
    }

    std::size_t flat_size() const {
        return scorer_w.size() + hidden_w.size() + hidden_v.size() + gen_w.size() + 3;
    }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(flat_size());
        flat.insert(flat.end(), scorer_w.begin(), scorer_w.end());
        flat.insert(flat.end(), hidden_w.begin(), hidden_w.end());
        flat.insert(flat.end(), hidden_v.begin(), hidden_v.end());
        flat.insert(flat.end(), gen_w.begin(), gen_w.end());
        flat.insert(flat.end(), mix_logits.begin(), mix_logits.end());
        return flat;
    }

    void unflatten(const std::vector<double>& flat) {
        if (flat.size() != flat_size()) throw ValidationError("flat parameter size mismatch");
        auto it = flat.begin();
        auto take = [&it](std::vector<double>& dst) {
            std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
            it += static_cast<std::ptrdiff_t>(dst.size());
        };
        take(scorer_w);
        take(hidden_w);
        take(hidden_v);
        std::copy(it, it + static_cast<std::ptrdiff_t>(gen_w.size()), gen_w.begin());
        it += static_cast<std::ptrdiff_t>(gen_w.size());
        std::copy(it, it + 3, mix_logits.begin());
    }
};

/// Gradient buffer mirroring StudentParams' trainable pieces.
struct StudentGradients {
    std::vector<double> scorer_w;
    std::vector<double> hidden_w;
    std::vector<double> hidden_v;
    std::vector<double> gen_w;
    std::array<double, 3> mix_logits{0.0, 0.0, 0.0};

    static StudentGradients zeros_like(const StudentParams& p) {
        StudentGradients g;
        g.scorer_w.assign(p.scorer_w.size(), 0.0);
        g.hidden_w.assign(p.hidden_w.size(), 0.0);
        g.hidden_v.assign(p.hidden_v.size(), 0.0);
        g.gen_w.assign(p.gen_w.size(), 0.0);
        return g;
    }

    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(scorer_w.size() + hidden_w.size() + hidden_v.size() + gen_w.size() + 3);
        flat.insert(flat.end(), scorer_w.begin(), scorer_w.end());
        flat.insert(flat.end(), hidden_w.begin(), hidden_w.end());
        flat.insert(flat.end(), hidden_v.begin(), hidden_v.end());
        flat.insert(flat.end(), gen_w.begin(), gen_w.end());
        flat.insert(flat.end(), mix_logits.begin(), mix_logits.end());
        return flat;
    }
};

// ---------------------------------------------------------------------------
// scoring

/// Relevance score for one candidate: linear w.f, or the one-hidden-layer
/// variant v.tanh(W f) when configured.
inline double score_doc(const StudentParams& params, const std::vector<double>& features) {
    std::size_t f = params.config.features.dim();
    if (features.size() != f) throw ValidationError("feature dimension mismatch");
    if (params.config.scorer == ScorerKind::Linear) {
        if (params.scorer_w.size() != f) throw ValidationError("scorer weight dimension mismatch");
        double s = 0.0;
        for (std::size_t c = 0; c < f; ++c) s += params.scorer_w[c] * features[c];
        return s;
    }
    std::size_t h = params.config.hidden_size;
    if (params.hidden_w.size() != h * f || params.hidden_v.size() != h)
        throw ValidationError("hidden scorer dimension mismatch");
    double s = 0.0;
    for (std::size_t r = 0; r < h; ++r) {
        double a = 0.0;
        for (std::size_t c = 0; c < f; ++c) a += params.hidden_w[r * f + c] * features[c];
        s += params.hidden_v[r] * std::tanh(a);
    }
    return s;
}

inline std::vector<double> score_docs(const StudentParams& params,
                                      const DistillationExample& example) {
    std::vector<double> scores;
    scores.reserve(example.size());
    for (const auto& f : example.features) scores.push_back(score_doc(params, f));
    return scores;
}

// ---------------------------------------------------------------------------
// losses

/// Hinge on every known preference: sum over (i,j) of max(0, 1 - (s_i - s_j)).
inline double pairwise_loss(const std::vector<double>& scores,
                            const std::vector<std::pair<int, int>>& pairs) {
    double loss = 0.0;
    for (const auto& [i, j] : pairs) {
        if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= scores.size() ||
            static_cast<std::size_t>(j) >= scores.size())
            throw ValidationError("pair index out of range");
        loss += std::max(0.0, 1.0 - (scores[i] - scores[j]));
    }
    return loss;
}

namespace detail {

inline double log_sum_exp(const std::vector<double>& v) {
    double m = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - m);
    return m + std::log(sum);
}

}  // namespace detail

/// KL(softmax(targets) || softmax(scores)), log-sum-exp stabilized.
inline double listwise_loss(const std::vector<double>& scores, const std::vector<double>& targets) {
    if (scores.size() != targets.size() || scores.empty())
        throw ValidationError("listwise loss requires equal non-empty score/target vectors");
    for (double x : scores)
        if (!std::isfinite(x)) throw ValidationError("non-finite score in listwise loss");
    for (double x : targets)
        if (!std::isfinite(x)) throw ValidationError("non-finite target in listwise loss");
    double lse_s = detail::log_sum_exp(scores);
    double lse_z = detail::log_sum_exp(targets);
    double loss = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double log_q = targets[i] - lse_z;
        double log_p = scores[i] - lse_s;
        loss += std::exp(log_q) * (log_q - log_p);
    }
    return loss;
}

/// Generation-head logits for one candidate. The head is a bag-of-context
/// linear map: concat(query bow, doc features) -> vocab logits, identical
/// across target positions (teacher forcing supplies the targets).
inline std::vector<double> generation_logits(const StudentParams& params,
                                             const DistillationExample& example, std::size_t doc) {
    std::size_t v = params.config.vocab_size;
    std::size_t c_dim = params.config.context_dim();
    if (params.gen_w.size() != c_dim * v)
        throw ValidationError("generation head dimension mismatch");
    std::vector<double> context;
    context.reserve(c_dim);
    context.insert(context.end(), example.query_features.begin(), example.query_features.end());
    context.insert(context.end(), example.features.at(doc).begin(), example.features.at(doc).end());
    if (context.size() != c_dim) throw ValidationError("context dimension mismatch");
    std::vector<double> logits(v, 0.0);
    for (std::size_t c = 0; c < c_dim; ++c) {
        double x = context[c];
        if (x == 0.0) continue;
        const double* row = params.gen_w.data() + c * v;
        for (std::size_t t = 0; t < v; ++t) logits[t] += row[t] * x;
    }
    return logits;
}

/// Mean over candidates of the summed per-token cross-entropy between the
/// head's distribution and the teacher's reason tokens.
inline double generation_loss(const StudentParams& params, const DistillationExample& example) {
    if (example.size() == 0) throw ValidationError("generation loss over empty example");
    std::size_t v = params.config.vocab_size;
    double total = 0.0;
    for (std::size_t d = 0; d < example.size(); ++d) {
        const auto& targets = example.reason_tokens.at(d);
        if (targets.empty()) continue;
        auto logits = generation_logits(params, example, d);
        double lse = detail::log_sum_exp(logits);
        for (int y : targets) {
            if (y < 0 || static_cast<std::size_t>(y) >= v)
                throw ValidationError("reason token id " + std::to_string(y) +
                                      " outside vocab of size " + std::to_string(v));
            total += lse - logits[static_cast<std::size_t>(y)];
        }
    }
    return total / static_cast<double>(example.size());
}

struct LossBreakdown {
    double pairwise = 0.0;
    double listwise = 0.0;
    double generation = 0.0;
    double combined = 0.0;
    std::array<double, 3> weights{};  // (alpha, beta, gamma)
};

/// L = alpha*L_pairwise + beta*L_listwise + gamma*L_generation with
/// (alpha, beta, gamma) = softmax(mix_logits).
inline LossBreakdown combined_loss(const StudentParams& params,
                                   const DistillationExample& example) {
    LossBreakdown out;
    auto scores = score_docs(params, example);
    out.pairwise = pairwise_loss(scores, example.pairs);
    out.listwise = listwise_loss(scores, example.targets);
    out.generation = generation_loss(params, example);
    out.weights = params.mix_weights();
    out.combined = out.weights[0] * out.pairwise + out.weights[1] * out.listwise +
                   out.weights[2] * out.generation;
    return out;
}

/// d(pairwise)/d(scores): -1 to the preferred, +1 to the other, for every
/// pair whose margin is violated.
inline std::vector<double> pairwise_grad(const std::vector<double>& scores,
                                         const std::vector<std::pair<int, int>>& pairs,
                                         double* loss_out = nullptr) {
    std::vector<double> grad(scores.size(), 0.0);
    double loss = 0.0;
    for (const auto& [i, j] : pairs) {
        if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= scores.size() ||
            static_cast<std::size_t>(j) >= scores.size())
            throw ValidationError("pair index out of range");
        double margin = 1.0 - (scores[i] - scores[j]);
        if (margin > 0.0) {
            loss += margin;
            grad[static_cast<std::size_t>(i)] -= 1.0;
            grad[static_cast<std::size_t>(j)] += 1.0;
        }
    }
    if (loss_out != nullptr) *loss_out = loss;
    return grad;
}

/// d(listwise)/d(scores) = softmax(scores) - softmax(targets).
inline std::vector<double> listwise_grad(const std::vector<double>& scores,
                                         const std::vector<double>& targets,
                                         double* loss_out = nullptr) {
    if (scores.size() != targets.size() || scores.empty())
        throw ValidationError("listwise loss requires equal non-empty score/target vectors");
    double lse_s = detail::log_sum_exp(scores);
    double lse_z = detail::log_sum_exp(targets);
    std::vector<double> grad(scores.size(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double log_q = targets[i] - lse_z;
        double log_p = scores[i] - lse_s;
        double q = std::exp(log_q);
        double p = std::exp(log_p);
        loss += q * (log_q - log_p);
        grad[i] = p - q;
    }
    if (loss_out != nullptr) *loss_out = loss;
    return grad;
}

/// Generation loss plus d(generation)/d(gen_w), laid out like gen_w.
inline double generation_grad(const StudentParams& params, const DistillationExample& example,
                              std::vector<double>& gen_w_grad) {
    std::size_t n = example.size();
    std::size_t v = params.config.vocab_size;
    gen_w_grad.assign(params.gen_w.size(), 0.0);
    double total = 0.0;
    std::vector<double> context;
    for (std::size_t d = 0; d < n; ++d) {
        const auto& targets = example.reason_tokens.at(d);
        if (targets.empty()) continue;
        auto logits = generation_logits(params, example, d);
        double lse = detail::log_sum_exp(logits);
        std::vector<double> count(v, 0.0);
        for (int y : targets) {
            if (y < 0 || static_cast<std::size_t>(y) >= v)
                throw ValidationError("reason token id " + std::to_string(y) +
                                      " outside vocab of size " + std::to_string(v));
            total += lse - logits[static_cast<std::size_t>(y)];
            count[static_cast<std::size_t>(y)] += 1.0;
        }
        double t_count = static_cast<double>(targets.size());
        context.clear();
        context.insert(context.end(), example.query_features.begin(), example.query_features.end());
        context.insert(context.end(), example.features[d].begin(), example.features[d].end());
        double scale = 1.0 / static_cast<double>(n);
        for (std::size_t t = 0; t < v; ++t) {
            double dlogit = t_count * std::exp(logits[t] - lse) - count[t];
            if (dlogit == 0.0) continue;
            double delta = scale * dlogit;
            for (std::size_t c = 0; c < context.size(); ++c) {
                gen_w_grad[c * v + t] += delta * context[c];
            }
        }
    }
    return total / static_cast<double>(n);
}

/// Accumulates d(loss)/d(scores) into the scorer parameter gradients.
inline void scorer_backprop(const StudentParams& params, const DistillationExample& example,
                            const std::vector<double>& score_grad, StudentGradients& grads) {
    std::size_t f_dim = params.config.features.dim();
    if (params.config.scorer == ScorerKind::Linear) {
        for (std::size_t i = 0; i < example.size(); ++i) {
            double g = score_grad[i];
            if (g == 0.0) continue;
            const auto& feat = example.features[i];
            for (std::size_t c = 0; c < f_dim; ++c) grads.scorer_w[c] += g * feat[c];
        }
        return;
    }
    std::size_t h = params.config.hidden_size;
    for (std::size_t i = 0; i < example.size(); ++i) {
        double g = score_grad[i];
        if (g == 0.0) continue;
        const auto& feat = example.features[i];
        for (std::size_t r = 0; r < h; ++r) {
            double a = 0.0;
            for (std::size_t c = 0; c < f_dim; ++c) a += params.hidden_w[r * f_dim + c] * feat[c];
            double t = std::tanh(a);
            grads.hidden_v[r] += g * t;
            double back = g * params.hidden_v[r] * (1.0 - t * t);
            for (std::size_t c = 0; c < f_dim; ++c) grads.hidden_w[r * f_dim + c] += back * feat[c];
        }
    }
}

/// Analytic gradient of the combined objective with respect to the scorer
/// weights, the generation head, and the mix logits
/// (d/d(lambda_k) = alpha_k (L_k - L)).
inline LossBreakdown combined_grad(const StudentParams& params, const DistillationExample& example,
                                   StudentGradients& grads) {
    grads = StudentGradients::zeros_like(params);
    std::size_t n = example.size();

    LossBreakdown out;
    out.weights = params.mix_weights();
    const auto [alpha, beta, gamma] = out.weights;

    auto scores = score_docs(params, example);
    auto g_pw = pairwise_grad(scores, example.pairs, &out.pairwise);
    auto g_lw = listwise_grad(scores, example.targets, &out.listwise);

    std::vector<double> score_grad(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) score_grad[i] = alpha * g_pw[i] + beta * g_lw[i];
    scorer_backprop(params, example, score_grad, grads);

    std::vector<double> gen_grad;
    out.generation = generation_grad(params, example, gen_grad);
    for (std::size_t i = 0; i < gen_grad.size(); ++i) grads.gen_w[i] = gamma * gen_grad[i];

    out.combined = alpha * out.pairwise + beta * out.listwise + gamma * out.generation;

    std::array<double, 3> parts{out.pairwise, out.listwise, out.generation};
    for (std::size_t k = 0; k < 3; ++k) {
        grads.mix_logits[k] = out.weights[k] * (parts[k] - out.combined);
    }
    return out;
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
    std::size_t epochs = 200;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 42;
};

struct EpochStats {
    std::size_t epoch = 0;
    double pairwise = 0.0;
    double listwise = 0.0;
    double generation = 0.0;
    std::array<double, 3> weights{};
};

struct TrainResult {
    StudentParams params;
    std::vector<EpochStats> trace;
    double max_simplex_error = 0.0;  // max |alpha+beta+gamma - 1| seen at any step
};

/// Plain SGD with momentum over per-example analytic gradients. Fully
/// deterministic for a given (examples, config, seed): the shuffle and
/// every update are reproduced bit-for-bit.
inline TrainResult train(const std::vector<DistillationExample>& examples,
                         const StudentConfig& student_config, const TrainConfig& train_config) {
    if (examples.empty()) throw ValidationError("training requires at least one example");

    TrainResult result;
    result.params = StudentParams::init(student_config, train_config.seed);

    std::vector<double> flat = result.params.flatten();
    std::vector<double> velocity(flat.size(), 0.0);
    std::mt19937_64 rng(train_config.seed);

    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    StudentGradients grads;
    for (std::size_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
        detail::shuffle(order, rng);
        double sum_pw = 0.0, sum_lw = 0.0, sum_gen = 0.0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto& example = examples[order[k]];
            LossBreakdown loss = combined_grad(result.params, example, grads);
            if (!std::isfinite(loss.combined))
                throw ValidationError("non-finite loss at epoch " + std::to_string(epoch) +
                                      ", example index " + std::to_string(order[k]));
            sum_pw += loss.pairwise;
            sum_lw += loss.listwise;
            sum_gen += loss.generation;

            std::vector<double> grad_flat = grads.flatten();
            for (std::size_t i = 0; i < flat.size(); ++i) {
                velocity[i] = train_config.momentum * velocity[i] -
                              train_config.learning_rate * grad_flat[i];
                flat[i] += velocity[i];
            }
            result.params.unflatten(flat);

            auto w = result.params.mix_weights();
            double simplex_error = std::fabs(w[0] + w[1] + w[2] - 1.0);
            result.max_simplex_error = std::max(result.max_simplex_error, simplex_error);
        }
        double n = static_cast<double>(examples.size());
        result.trace.push_back(EpochStats{epoch, sum_pw / n, sum_lw / n, sum_gen / n,
                                          result.params.mix_weights()});
    }
    return result;
}

// ---------------------------------------------------------------------------
// inference

struct StudentRerankResult {
    RankedList ranking;
    std::map<std::string, std::string> reasons;  // doc_id -> decoded reason
};

/// Sorts candidates by student score (ties keep first-stage order) and
/// greedily decodes a reason per document from the generation head.
inline StudentRerankResult rerank_student(const StudentParams& params, const GenerationVocab& vocab,
                                          const DistillationExample& candidates) {
    if (vocab.size() != params.config.vocab_size)
        throw ValidationError("vocab size does not match generation head");
    auto scores = score_docs(params, candidates);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    StudentRerankResult result;
    result.ranking.query_id = candidates.query_id;
    result.ranking.entries.reserve(order.size());
    for (auto i : order) result.ranking.entries.push_back({candidates.doc_ids[i], scores[i]});

    for (std::size_t d = 0; d < candidates.size(); ++d) {
        auto logits = generation_logits(params, candidates, d);
        std::string reason;
        for (std::size_t step = 0; step < params.config.max_reason_tokens; ++step) {
            std::size_t best = 0;
            for (std::size_t t = 1; t < logits.size(); ++t) {
                if (logits[t] > logits[best]) best = t;
            }
            if (static_cast<int>(best) == GenerationVocab::kEos) break;
            if (!reason.empty()) reason.push_back(' ');
            reason += vocab.token(static_cast<int>(best));
        }
        result.reasons[candidates.doc_ids[d]] = reason;
    }
    return result;
}

// ---------------------------------------------------------------------------
// example construction

struct ExampleBuildConfig {
    FeatureConfig features;
    std::size_t pair_cap = 50;
    std::size_t max_reason_tokens = 32;
    bool targets_from_qrels = false;
};

/// Derives target scores, the capped preference-pair set, and encoded
/// reason tokens for one query's candidates.
///
/// Targets default to linear decay over the teacher order,
/// z_i = (n - rank_i)/n; with targets_from_qrels they are the relevance
/// grades instead. Pairs are every strict preference, capped by
/// closest-rank priority.
inline DistillationExample make_example(
    const Query& query, const std::vector<std::string>& candidate_doc_ids,
    const std::vector<std::string>& candidate_texts, const std::vector<double>& first_stage_scores,
    const std::vector<int>& teacher_order, const std::vector<std::string>& teacher_reasons,
    const GenerationVocab& vocab, double avgdl, const ExampleBuildConfig& config,
    const Qrels* qrels = nullptr) {
    std::size_t n = candidate_doc_ids.size();
    if (candidate_texts.size() != n || first_stage_scores.size() != n ||
        teacher_order.size() != n || teacher_reasons.size() != n)
        throw ValidationError("candidate arrays must have equal length");
    if (config.targets_from_qrels && qrels == nullptr)
        throw ValidationError("qrels targets requested but no qrels provided");

    DistillationExample ex;
    ex.query_id = query.query_id;
    ex.doc_ids = candidate_doc_ids;

    auto query_tokens = tokenize(query.text);
    ex.query_features = hashed_bow(query_tokens, config.features.bow_dim);

    for (std::size_t i = 0; i < n; ++i) {
        auto doc_tokens = tokenize(candidate_texts[i]);
        ex.features.push_back(extract_features(config.features, query_tokens, doc_tokens,
                                               first_stage_scores[i], i + 1, n, avgdl));
        ex.reason_tokens.push_back(vocab.encode(teacher_reasons[i], config.max_reason_tokens));
    }

    // rank of each candidate under the teacher (1-based)
    std::vector<std::size_t> rank_of(n, 0);
    {
        std::vector<bool> seen(n, false);
        for (std::size_t r = 0; r < teacher_order.size(); ++r) {
            int idx = teacher_order[r];
            if (idx < 0 || static_cast<std::size_t>(idx) >= n || seen[static_cast<std::size_t>(idx)])
                throw ValidationError("teacher order is not a permutation of the candidates");
            seen[static_cast<std::size_t>(idx)] = true;
            rank_of[static_cast<std::size_t>(idx)] = r + 1;
        }
    }
    ex.teacher_order = teacher_order;

    ex.targets.resize(n);
    if (config.targets_from_qrels) {
        for (std::size_t i = 0; i < n; ++i) {
            ex.targets[i] = static_cast<double>(qrels->grade(query.query_id, candidate_doc_ids[i]));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            ex.targets[i] = static_cast<double>(n - rank_of[i]) / static_cast<double>(n);
        }
    }

    // strict preferences, closest ranks first
    struct PairCandidate {
        double gap;
        std::size_t first_rank;
        int i;
        int j;
    };
    std::vector<PairCandidate> all_pairs;
    if (config.targets_from_qrels) {
        for (std::size_t a = 0; a < n; ++a) {
            for (std::size_t b = 0; b < n; ++b) {
                if (ex.targets[a] > ex.targets[b]) {
                    all_pairs.push_back({ex.targets[a] - ex.targets[b],
                                         std::min(rank_of[a], rank_of[b]), static_cast<int>(a),
                                         static_cast<int>(b)});
                }
            }
        }
    } else {
        for (std::size_t ra = 1; ra <= n; ++ra) {
            for (std::size_t rb = ra + 1; rb <= n; ++rb) {
                all_pairs.push_back({static_cast<double>(rb - ra), ra,
                                     teacher_order[ra - 1], teacher_order[rb - 1]});
            }
        }
    }
    std::sort(all_pairs.begin(), all_pairs.end(), [](const PairCandidate& a, const PairCandidate& b) {
        if (a.gap != b.gap) return a.gap < b.gap;
        if (a.first_rank != b.first_rank) return a.first_rank < b.first_rank;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    for (const auto& p : all_pairs) {
        if (ex.pairs.size() >= config.pair_cap) break;
        ex.pairs.emplace_back(p.i, p.j);
    }
    return ex;
}

// ---------------------------------------------------------------------------
// persistence

inline void save_student(const StudentParams& params, const GenerationVocab& vocab,
                         const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["feature_schema"] = params.config.features.schema_hash();
    j["bow_dim"] = params.config.features.bow_dim;
    j["scorer"] = params.config.scorer == ScorerKind::Linear ? "linear" : "hidden";
    j["hidden_size"] = params.config.hidden_size;
    j["vocab_size"] = params.config.vocab_size;
    j["max_reason_tokens"] = params.config.max_reason_tokens;
    j["scorer_w"] = params.scorer_w;
    j["hidden_w"] = params.hidden_w;
    j["hidden_v"] = params.hidden_v;
    j["gen_w"] = params.gen_w;
    j["mix_logits"] = params.mix_logits;
    j["vocab"] = vocab.tokens();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline std::pair<StudentParams, GenerationVocab> load_student(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError("malformed student model file " + path.string());
    if (j.value("version", 0) != 1)
        throw ValidationError("unsupported student model version in " + path.string());

    StudentParams params;
    params.config.features.bow_dim = j.at("bow_dim").get<std::size_t>();
    if (j.value("feature_schema", "") != params.config.features.schema_hash())
        throw ValidationError("feature schema mismatch in " + path.string());
    params.config.scorer =
        j.value("scorer", "linear") == std::string("hidden") ? ScorerKind::Hidden : ScorerKind::Linear;
    params.config.hidden_size = j.at("hidden_size").get<std::size_t>();
    params.config.vocab_size = j.at("vocab_size").get<std::size_t>();
    params.config.max_reason_tokens = j.at("max_reason_tokens").get<std::size_t>();
    params.scorer_w = j.at("scorer_w").get<std::vector<double>>();
    params.hidden_w = j.at("hidden_w").get<std::vector<double>>();
    params.hidden_v = j.at("hidden_v").get<std::vector<double>>();
    params.gen_w = j.at("gen_w").get<std::vector<double>>();
    auto logits = j.at("mix_logits").get<std::vector<double>>();
    if (logits.size() != 3) throw ValidationError("mix_logits must have 3 entries");
    std::copy(logits.begin(), logits.end(), params.mix_logits.begin());

    auto tokens = j.at("vocab").get<std::vector<std::string>>();
    if (tokens.size() < 2 || tokens[0] != "<unk>" || tokens[1] != "<eos>")
        throw ValidationError("vocab must start with <unk>, <eos> in " + path.string());
    GenerationVocab vocab(std::vector<std::string>(tokens.begin() + 2, tokens.end()));
    if (vocab.size() != params.config.vocab_size)
        throw ValidationError("vocab size mismatch in " + path.string());
    return {std::move(params), std::move(vocab)};
}

inline void write_loss_trace_csv(const std::vector<EpochStats>& trace,
                                 const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << "epoch,pairwise,listwise,generation,alpha,beta,gamma\n";
    char buf[160];
    for (const auto& e : trace) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.pairwise,
                      e.listwise, e.generation, e.weights[0], e.weights[1], e.weights[2]);
        out << buf;
    }
}

}  // namespace reasonrank
