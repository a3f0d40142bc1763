#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "genir/corpus/corpus.hpp"
#include "genir/errors.hpp"
#include "genir/experiments/parallel.hpp"
#include "genir/instrument/patching.hpp"
#include "genir/model/forward.hpp"
#include "genir/training/train.hpp"

namespace genir {

/// Queries whose gold document the clean model ranks first.
template <class T>
std::vector<Example> correct_queries(const ModelParams<T>& p, std::span<const Example> queries) {
    const EvalResult e = evaluate(p, queries);
    std::vector<Example> out;
    for (std::size_t i : e.correct) out.push_back(queries[i]);
    return out;
}

/// Metrics when every query is answered by `retrieve(tokens) -> logits`.
template <class F>
EvalResult evaluate_with(std::span<const Example> queries, const Vocabulary& v, F&& retrieve) {
    std::vector<std::size_t> ranks;
    ranks.reserve(queries.size());
    for (const Example& q : queries) {
        const auto logits = retrieve(std::span<const TokenId>(q.input));
        using V = typename std::decay_t<decltype(logits)>::value_type;
        ranks.push_back(gold_rank<V>(logits, v, q.target));
    }
    return metrics_from_ranks(std::move(ranks));
}

// ---------------------------------------------------------------- encoder swap

template <class T>
struct ReducedModel {
    ModelParams<T> params;
    std::vector<TokenId> held_out;  // documents absent from its training data
};

struct HybridResult {
    std::vector<TokenId> held_out;
    EvalResult hybrid;           // reduced encoder + full decoder on held-out test queries
    EvalResult full;             // the full model on the same queries
    EvalResult reduced;          // the reduced model alone
    std::size_t docs_at_rank1 = 0;  // held-out documents whose first test query ranks gold first
};

struct SwapReport {
    std::vector<HybridResult> hybrids;
    EvalResult random_encoder;  // random-init encoder + full decoder, all held-out queries pooled
    EvalResult self_swap;       // full encoder + full decoder, same pool
    std::string stand_in;       // declares what replaces a pre-trained encoder at this scale
};

/// Test queries of the given documents, in corpus query order.
inline std::vector<Example> queries_for(std::span<const Example> queries, std::span<const TokenId> docs, Split split) {
    std::vector<Example> out;
    for (const Example& e : queries)
        if (e.split == split && std::find(docs.begin(), docs.end(), e.target) != docs.end()) out.push_back(e);
    return out;
}

template <class T>
std::vector<T> hybrid_logits(const ModelParams<T>& encoder_from, const ModelParams<T>& decoder_from,
                             std::span<const TokenId> tokens) {
    return decode(decoder_from, encode(encoder_from, tokens));
}

template <class T>
SwapReport run_encoder_swap(const ModelParams<T>& full, std::span<const ReducedModel<T>> reduced,
                            std::span<const Example> queries, std::uint64_t seed) {
    const ModelConfig& c = full.config;
    const Vocabulary v(c.n_words, c.n_docids);
    SwapReport rep;
    rep.stand_in = "randomly initialised encoder of identical shape (no pre-trained checkpoint at this scale)";
    std::vector<Example> pooled;
    for (const ReducedModel<T>& r : reduced) {
        if (!(r.params.config == c)) throw ValidationError("encoder swap: reduced model config differs from the full model");
        HybridResult h;
        h.held_out = r.held_out;
        const auto qs = queries_for(queries, r.held_out, Split::test);
        if (qs.empty()) throw ValidationError("encoder swap: no test queries for the held-out documents");
        pooled.insert(pooled.end(), qs.begin(), qs.end());
        auto hyb = [&](std::span<const TokenId> t) { return hybrid_logits(r.params, full, t); };
        h.hybrid = evaluate_with(qs, v, hyb);
        h.full = evaluate(full, std::span<const Example>(qs));
        h.reduced = evaluate(r.params, std::span<const Example>(qs));
        for (TokenId d : r.held_out) {
            const TokenId one[] = {d};
            const auto first = queries_for(qs, one, Split::test);
            if (first.empty()) continue;
            h.docs_at_rank1 += gold_rank<T>(hyb(first.front().input), v, d) == 1;
        }
        rep.hybrids.push_back(std::move(h));
    }
    const auto random_enc = ModelParams<T>::init(c, derive_seed(seed, 0xE0C));
    rep.random_encoder =
        evaluate_with(pooled, v, [&](std::span<const TokenId> t) { return hybrid_logits(random_enc, full, t); });
    rep.self_swap = evaluate_with(pooled, v, [&](std::span<const TokenId> t) { return hybrid_logits(full, full, t); });
    return rep;
}

// ---------------------------------------------------------------- stage patching

inline constexpr std::array<PatchMode, 3> kGridModes{PatchMode::zero, PatchMode::mean, PatchMode::donor};

/// Displaced fraction per [mode][kind][stage].
struct PatchGrid {
    std::array<std::array<std::array<double, 3>, 3>, 3> displaced{};
    StagePartition stages;
    std::size_t n_correct = 0;
    std::string donor_stand_in;

    double at(PatchMode m, Kind k, std::size_t stage) const {
        std::size_t mi = 0;
        while (kGridModes[mi] != m) ++mi;
        return displaced[mi][static_cast<std::size_t>(k)][stage];
    }
};

inline PatchPlan stage_plan(const StagePartition& sp, Kind k, std::size_t stage, PatchMode m) {
    PatchPlan p;
    p.entries.push_back({Site::decoder, sp.layers(stage), k, m, {}});
    return p;
}

template <class T>
PatchGrid run_stage_patching(const ModelParams<T>& p, std::span<const Example> correct, const MeanStore<T>& means,
                             const ModelParams<T>& donor, const StagePartition& sp, std::string donor_stand_in = {},
                             std::size_t threads = 1) {
    if (correct.empty()) throw ValidationError("stage patching: no correct queries");
    sp.validate(p.config.n_dec_layers);
    PatchGrid g;
    g.stages = sp;
    g.n_correct = correct.size();
    g.donor_stand_in = std::move(donor_stand_in);
    parallel_for(27, threads, [&](std::size_t cell) {
        const std::size_t mi = cell / 9, k = cell / 3 % 3, s = cell % 3;
        g.displaced[mi][k][s] =
            patch_metric(p, correct, stage_plan(sp, kAllKinds[k], s, kGridModes[mi]), &means, &donor).fraction_displaced;
    });
    return g;
}

struct ReducedEval {
    EvalResult clean, patched;
    double rel_hits_at_1 = 1, rel_recall_at_5 = 1, rel_hits_at_10 = 1;
    std::size_t patched_components = 0, total_components = 0;
};

template <class T>
EvalResult evaluate_patched(const ModelParams<T>& p, std::span<const Example> queries, const PatchPlan& plan,
                            const std::type_identity_t<MeanStore<T>>* means = nullptr,
                            const std::type_identity_t<ModelParams<T>>* donor = nullptr) {
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    return evaluate_with(queries, v,
                         [&](std::span<const TokenId> t) { return patched_decode(p, t, plan, means, donor).logits; });
}

template <class T>
ReducedEval run_reduced_model_eval(const ModelParams<T>& p, const PatchPlan& plan, std::span<const Example> test,
                                   const std::type_identity_t<MeanStore<T>>* means) {
    ReducedEval r;
    r.clean = evaluate(p, test);
    r.patched = evaluate_patched(p, test, plan, means);
    auto rel = [](double a, double b) { return b > 0 ? a / b : (a == b ? 1.0 : 0.0); };
    r.rel_hits_at_1 = rel(r.patched.hits_at_1, r.clean.hits_at_1);
    r.rel_recall_at_5 = rel(r.patched.recall_at_5, r.clean.recall_at_5);
    r.rel_hits_at_10 = rel(r.patched.hits_at_10, r.clean.hits_at_10);
    r.patched_components = plan.component_count(p.config);
    r.total_components = 3 * p.config.n_dec_layers;
    return r;
}

}  // namespace genir
