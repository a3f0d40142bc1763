#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "genir/corpus/corpus.hpp"
#include "genir/errors.hpp"
#include "genir/model/forward.hpp"
#include "genir/model/tape_forward.hpp"
#include "genir/numerics/rng.hpp"

namespace genir {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 32;
    std::size_t steps = 3000;
    std::uint64_t seed = 7;
    std::size_t ratio = 32;
    std::size_t eval_every = 500;  // 0 disables intermediate evaluation
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t grad_shards = 4;  // fixed reduction tree; independent of thread count
    std::size_t threads = 0;      // 0: hardware concurrency
    double dropout = 0.1;         // training only
    double token_dropout = 0.5;   // share of input tokens removed per training example
    std::size_t token_noise = 2;  // up to this many random word tokens inserted per example
    double ema_decay = 0.998;     // > 0: evaluate and return an exponential moving average of the weights

    void validate() const {
        if (!(learning_rate > 0) || batch_size == 0 || ratio == 0 || grad_shards == 0) {
            throw ValidationError("train config: learning_rate, batch_size, ratio and grad_shards must be positive");
        }
        if (!(dropout >= 0 && dropout < 1)) throw ValidationError("train config: dropout must lie in [0, 1)");
        if (!(token_dropout >= 0 && token_dropout < 1))
            throw ValidationError("train config: token_dropout must lie in [0, 1)");
        if (!(ema_decay >= 0 && ema_decay < 1)) throw ValidationError("train config: ema_decay must lie in [0, 1)");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
            throw ValidationError("train config: Adam moments must lie in [0, 1) and eps > 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"steps", c.steps},
         {"seed", c.seed},                   {"ratio", c.ratio},           {"eval_every", c.eval_every},
         {"beta1", c.beta1},                 {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
         {"grad_shards", c.grad_shards},     {"threads", c.threads},       {"dropout", c.dropout},
         {"token_dropout", c.token_dropout}, {"token_noise", c.token_noise},
         {"ema_decay", c.ema_decay}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.steps = j.value("steps", d.steps);
    c.seed = j.value("seed", d.seed);
    c.ratio = j.value("ratio", d.ratio);
    c.eval_every = j.value("eval_every", d.eval_every);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.grad_shards = j.value("grad_shards", d.grad_shards);
    c.threads = j.value("threads", d.threads);
    c.dropout = j.value("dropout", d.dropout);
    c.token_dropout = j.value("token_dropout", d.token_dropout);
    c.token_noise = j.value("token_noise", d.token_noise);
    c.ema_decay = j.value("ema_decay", d.ema_decay);
}

struct EvalResult {
    double hits_at_1 = 0, recall_at_5 = 0, hits_at_10 = 0, mrr = 0;
    std::vector<std::size_t> ranks;    // 1-based gold rank per query
    std::vector<std::size_t> correct;  // indices of queries with gold at rank 1
};

inline void to_json(nlohmann::json& j, const EvalResult& e) {
    j = {{"hits_at_1", e.hits_at_1}, {"recall_at_5", e.recall_at_5}, {"hits_at_10", e.hits_at_10},
         {"mrr", e.mrr},             {"n_queries", e.ranks.size()},  {"n_correct", e.correct.size()}};
}

inline EvalResult metrics_from_ranks(std::vector<std::size_t> ranks) {
    EvalResult r;
    r.ranks = std::move(ranks);
    if (r.ranks.empty()) return r;
    for (std::size_t i = 0; i < r.ranks.size(); ++i) {
        const std::size_t k = r.ranks[i];
        r.hits_at_1 += k == 1;
        r.recall_at_5 += k <= 5;
        r.hits_at_10 += k <= 10;
        r.mrr += 1.0 / static_cast<double>(k);
        if (k == 1) r.correct.push_back(i);
    }
    const double n = static_cast<double>(r.ranks.size());
    r.hits_at_1 /= n;
    r.recall_at_5 /= n;
    r.hits_at_10 /= n;
    r.mrr /= n;
    return r;
}

template <class T>
EvalResult evaluate(const ModelParams<T>& p, std::span<const Example> queries, const Hooks<T>* hooks = nullptr) {
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    std::vector<std::size_t> ranks;
    ranks.reserve(queries.size());
    for (const Example& q : queries) {
        if (!v.is_docid(q.target)) throw ValidationError("evaluate: gold target is not a document identifier");
        const auto l = forward(p, q.input, hooks);
        ranks.push_back(gold_rank<T>(l, v, q.target));
    }
    return metrics_from_ranks(std::move(ranks));
}

/// Cross-entropy of one example, computed on a fresh tape.
template <class T>
T example_loss(const ModelParams<T>& p, const Example& e) {
    if (e.target >= p.config.d_vocab()) throw ValidationError("loss: target outside vocabulary");
    auto sink = ModelParams<T>::zeros(p.config);
    Tape<T> t;
    TapeModel<T> m(t, p, sink);
    return t.scalar(m.loss(e.input, e.target));
}

template <class T>
class Adam {
public:
    Adam(const ModelParams<T>& like, const TrainConfig& c)
        : m_(ModelParams<T>::zeros(like.config)), v_(ModelParams<T>::zeros(like.config)), cfg_(c) {}

    /// p -= lr * m_hat / (sqrt(v_hat) + eps)
    void step(ModelParams<T>& p, const ModelParams<T>& g) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(cfg_.learning_rate / bc1);
        const T inv_bc2 = static_cast<T>(1.0 / bc2);
        const T eps = static_cast<T>(cfg_.adam_eps);
        std::vector<Tensor<T>*> ps, ms, vs;
        std::vector<const Tensor<T>*> gs;
        p.visit([&](const std::string&, Tensor<T>& x) { ps.push_back(&x); });
        m_.visit([&](const std::string&, Tensor<T>& x) { ms.push_back(&x); });
        v_.visit([&](const std::string&, Tensor<T>& x) { vs.push_back(&x); });
        g.visit([&](const std::string&, const Tensor<T>& x) { gs.push_back(&x); });
        for (std::size_t k = 0; k < ps.size(); ++k) {
            T* w = ps[k]->flat().data();
            T* m = ms[k]->flat().data();
            T* v = vs[k]->flat().data();
            const T* gr = gs[k]->flat().data();
            const std::size_t n = ps[k]->size();
            for (std::size_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + (T{1} - b1) * gr[i];
                v[i] = b2 * v[i] + (T{1} - b2) * gr[i] * gr[i];
                w[i] -= lr * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
            }
        }
    }

    std::size_t steps_taken() const noexcept { return t_; }

private:
    ModelParams<T> m_, v_;
    TrainConfig cfg_;
    std::size_t t_ = 0;
};

struct LossPoint {
    std::size_t step;
    double loss;
};

struct EvalPoint {
    std::size_t step;
    EvalResult validation;
};

template <class T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<LossPoint> losses;
    std::vector<EvalPoint> evals;
};

template <class T>
struct TrainCallbacks {
    std::function<void(std::size_t step, double loss)> on_step;
    std::function<void(std::size_t step, const ModelParams<T>&, const EvalResult&)> on_eval;
};

namespace detail {

template <class T>
void add_into(ModelParams<T>& dst, const ModelParams<T>& src) {
    std::vector<const Tensor<T>*> s;
    src.visit([&](const std::string&, const Tensor<T>& x) { s.push_back(&x); });
    std::size_t i = 0;
    dst.visit([&](const std::string&, Tensor<T>& x) { x += *s[i++]; });
}

template <class T>
void scale_into(ModelParams<T>& p, T s) {
    p.visit([&](const std::string&, Tensor<T>& x) { x *= s; });
}

// avg <- d * avg + (1 - d) * x
template <class T>
void ema_into(ModelParams<T>& avg, const ModelParams<T>& x, T d) {
    std::vector<const Tensor<T>*> s;
    x.visit([&](const std::string&, const Tensor<T>& t) { s.push_back(&t); });
    std::size_t i = 0;
    avg.visit([&](const std::string&, Tensor<T>& a) {
        const Tensor<T>& b = *s[i++];
        for (std::size_t k = 0; k < a.size(); ++k) a[k] = d * a[k] + (T{1} - d) * b[k];
    });
}

template <class T>
bool all_finite(const ModelParams<T>& p) {
    bool ok = true;
    p.visit([&](const std::string&, const Tensor<T>& x) { ok = ok && x.all_finite(); });
    return ok;
}

}  // namespace detail

/// Mean cross-entropy gradient over `batch`. Examples are split into a fixed number of
/// contiguous shards whose partial sums are reduced in shard order, so the result does
/// not depend on how many threads run the shards. Example i draws its dropout masks from
/// derive_seed(drop_seed, i).
template <class T>
double batch_gradient(const ModelParams<T>& p, std::span<const Example* const> batch, ModelParams<T>& grad,
                      std::size_t n_shards, std::size_t n_threads, T dropout = T{0}, std::uint64_t drop_seed = 0) {
    n_shards = std::max<std::size_t>(1, std::min(n_shards, batch.size()));
    std::vector<ModelParams<T>> partial;
    partial.reserve(n_shards);
    for (std::size_t s = 0; s < n_shards; ++s) partial.push_back(ModelParams<T>::zeros(p.config));
    std::vector<double> losses(batch.size(), 0.0);
    auto run_shard = [&](std::size_t s) {
        const std::size_t lo = s * batch.size() / n_shards, hi = (s + 1) * batch.size() / n_shards;
        for (std::size_t i = lo; i < hi; ++i) {
            Tape<T> t;
            TapeModel<T> m(t, p, partial[s]);
            m.set_dropout(dropout, derive_seed(drop_seed, i));
            const auto l = m.loss(batch[i]->input, batch[i]->target);
            losses[i] = static_cast<double>(t.scalar(l));
            t.backward(l);
        }
    };
    if (n_threads <= 1) {
        for (std::size_t s = 0; s < n_shards; ++s) run_shard(s);
    } else {
        std::vector<std::jthread> pool;
        std::atomic<std::size_t> next{0};
        for (std::size_t k = 0; k < std::min(n_threads, n_shards); ++k) {
            pool.emplace_back([&] {
                for (std::size_t s; (s = next.fetch_add(1)) < n_shards;) run_shard(s);
            });
        }
    }
    grad = std::move(partial[0]);
    for (std::size_t s = 1; s < n_shards; ++s) detail::add_into(grad, partial[s]);
    detail::scale_into(grad, T{1} / static_cast<T>(batch.size()));
    double total = 0;
    for (double l : losses) total += l;
    return total / static_cast<double>(batch.size());
}

/// Removes each token with probability `rate`. One random token survives if all would go.
inline void drop_tokens(std::vector<TokenId>& tokens, double rate, std::uint64_t seed) {
    if (tokens.empty() || rate <= 0) return;
    Rng rng(seed);
    std::vector<TokenId> kept;
    kept.reserve(tokens.size());
    for (TokenId t : tokens)
        if (rng.uniform() >= rate) kept.push_back(t);
    if (kept.empty()) kept.push_back(tokens[rng.index(tokens.size())]);
    tokens = std::move(kept);
}

/// Inserts between 0 and `max_noise` uniformly drawn word tokens at random positions,
/// never growing the input past `max_len`.
inline void insert_noise_tokens(std::vector<TokenId>& tokens, std::size_t max_noise, const Vocabulary& v,
                                std::uint64_t seed, std::size_t max_len) {
    Rng rng(seed);
    std::size_t k = rng.index(max_noise + 1);
    k = std::min(k, max_len > tokens.size() ? max_len - tokens.size() : 0);
    for (std::size_t j = 0; j < k; ++j) {
        const TokenId w = v.word(rng.index(v.word_count()));
        tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(rng.index(tokens.size() + 1)), w);
    }
}

/// Multitask training over the indexing/retrieval stream. The stream is rebuilt with a
/// fresh shuffle each time it is exhausted. Throws DivergenceError on a non-finite loss.
template <class T>
TrainResult<T> train(const ModelParams<T>& init, const Corpus& corpus, std::span<const Example> queries,
                     const TrainConfig& cfg, std::span<const Example> validation = {},
                     const TrainCallbacks<T>& cb = {}) {
    cfg.validate();
    TrainResult<T> res{init, {}, {}};
    if (cfg.steps == 0) return res;
    const std::size_t threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
    // With averaging, res.params holds the average and `live` the optimised weights.
    std::optional<ModelParams<T>> live_store;
    if (cfg.ema_decay > 0) live_store = init;
    ModelParams<T>& live = live_store ? *live_store : res.params;
    Adam<T> opt(live, cfg);
    std::size_t epoch = 0, pos = 0;
    ExampleSet set = build_examples(corpus, queries, cfg.ratio, derive_seed(cfg.seed, epoch));
    if (set.stream.empty()) throw ValidationError("train: empty example stream");
    ModelParams<T> grad = ModelParams<T>::zeros(init.config);
    std::vector<Example> batch_store;
    std::vector<const Example*> batch;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        batch_store.clear();
        while (batch_store.size() < cfg.batch_size) {
            if (pos == set.stream.size()) {
                set = build_examples(corpus, queries, cfg.ratio, derive_seed(cfg.seed, ++epoch));
                pos = 0;
            }
            batch_store.push_back(set.stream[pos++]);
        }
        for (std::size_t i = 0; i < batch_store.size(); ++i) {
            const std::uint64_t s = derive_seed(derive_seed(cfg.seed ^ 0x70CD, step), i);
            if (cfg.token_dropout > 0) drop_tokens(batch_store[i].input, cfg.token_dropout, s);
            if (cfg.token_noise > 0)
                insert_noise_tokens(batch_store[i].input, cfg.token_noise, corpus.vocab, derive_seed(s, 1),
                                    init.config.max_query_len);
        }
        batch.clear();
        for (const Example& e : batch_store) batch.push_back(&e);
        const double loss = batch_gradient<T>(live, batch, grad, cfg.grad_shards, threads,
                                              static_cast<T>(cfg.dropout), derive_seed(cfg.seed ^ 0xD80F, step));
        if (!std::isfinite(loss)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " +
                                  std::to_string(loss));
        }
        opt.step(live, grad);
        if (!detail::all_finite(live)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + ": non-finite parameters");
        }
        if (live_store) {
            const double warm = (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step));
            detail::ema_into(res.params, live, static_cast<T>(std::min(cfg.ema_decay, warm)));
        }
        res.losses.push_back({step, loss});
        if (cb.on_step) cb.on_step(step, loss);
        const bool cadence = cfg.eval_every && (step % cfg.eval_every == 0 || step == cfg.steps);
        if (cadence && !validation.empty()) {
            EvalResult e = evaluate(res.params, validation);
            if (cb.on_eval) cb.on_eval(step, res.params, e);
            res.evals.push_back({step, std::move(e)});
        }
    }
    return res;
}

}  // namespace genir
