#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "genir/corpus/vocabulary.hpp"
#include "genir/errors.hpp"
#include "genir/model/forward.hpp"

namespace genir {

/// W_U . sqrt(d) . ReLU(r), the same arithmetic as the output head.
template <class T>
std::vector<T> logit_lens(const ModelParams<T>& p, std::span<const T> r) {
    return unembed<T>(p, r);
}

/// 1-based average ranks under descending logits; tied tokens share the mean of their positions.
template <class T>
std::vector<double> average_ranks(std::span<const T> logits) {
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    std::vector<double> rank(logits.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && logits[order[j + 1]] == logits[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

/// 1-based rank of `token` in the whole vocabulary; ties go to the lower id.
template <class T>
std::size_t vocab_rank(std::span<const T> logits, TokenId token) {
    const T g = logits[token];
    std::size_t rank = 1;
    for (TokenId t = 0; t < logits.size(); ++t)
        if (logits[t] > g || (logits[t] == g && t < token)) ++rank;
    return rank;
}

/// The k highest-scoring tokens; ties go to the lower id. k is clamped to d_V.
template <class T>
std::vector<TokenId> top_tokens(std::span<const T> logits, std::size_t k) {
    std::vector<TokenId> ids(logits.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](TokenId a, TokenId b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    });
    ids.resize(k);
    return ids;
}

struct LensStat {
    double gold_rank = 0;        // in the full vocabulary
    double gold_docid_rank = 0;  // among document identifiers
    double docid_mean_rank = 0;
    double other_mean_rank = 0;
};

template <class T>
LensStat lens_stat(std::span<const T> logits, const Vocabulary& v, TokenId gold) {
    const auto avg = average_ranks(logits);
    LensStat s;
    s.gold_rank = static_cast<double>(vocab_rank(logits, gold));
    s.gold_docid_rank = static_cast<double>(gold_rank(logits, v, gold));
    double dsum = 0, osum = 0;
    for (TokenId t = 0; t < v.size(); ++t) (v.is_docid(t) ? dsum : osum) += avg[t];
    s.docid_mean_rank = dsum / static_cast<double>(v.docid_count());
    s.other_mean_rank = osum / static_cast<double>(v.size() - v.docid_count());
    return s;
}

enum class LensTarget { residual, mlp, cross_attention };
inline constexpr std::array<LensTarget, 3> kLensTargets{LensTarget::residual, LensTarget::mlp, LensTarget::cross_attention};

inline const char* lens_target_name(LensTarget t) {
    switch (t) {
        case LensTarget::residual: return "residual";
        case LensTarget::mlp: return "mlp";
        case LensTarget::cross_attention: return "cross_attention";
    }
    return "?";
}

struct LensReport {
    // [layer][target], averaged over traces
    std::vector<std::array<LensStat, 3>> layers;
    std::size_t n_traces = 0;

    const LensStat& at(std::size_t layer, LensTarget t) const { return layers.at(layer)[static_cast<std::size_t>(t)]; }
};

/// Lens statistics after every decoder layer for the residual, the MLP output and the
/// cross-attention output; `golds[i]` is the relevant document of `traces[i]`.
template <class T>
LensReport rank_development(const ModelParams<T>& p, std::span<const Trace<T>> traces, std::span<const TokenId> golds) {
    if (traces.size() != golds.size()) throw ValidationError("rank_development: one gold docid per trace");
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    LensReport rep;
    rep.n_traces = traces.size();
    rep.layers.assign(p.config.n_dec_layers, {});
    for (std::size_t q = 0; q < traces.size(); ++q) {
        for (std::size_t l = 0; l < traces[q].layers.size(); ++l) {
            const auto& L = traces[q].layers[l];
            const std::array<const std::vector<T>*, 3> vecs{&L.r_end, &L.mlp_out, &L.cross_out};
            for (std::size_t t = 0; t < 3; ++t) {
                const auto logits = logit_lens<T>(p, *vecs[t]);
                const LensStat s = lens_stat<T>(logits, v, golds[q]);
                LensStat& acc = rep.layers[l][t];
                acc.gold_rank += s.gold_rank;
                acc.gold_docid_rank += s.gold_docid_rank;
                acc.docid_mean_rank += s.docid_mean_rank;
                acc.other_mean_rank += s.other_mean_rank;
            }
        }
    }
    if (!traces.empty()) {
        const double n = static_cast<double>(traces.size());
        for (auto& layer : rep.layers)
            for (LensStat& s : layer) {
                s.gold_rank /= n;
                s.gold_docid_rank /= n;
                s.docid_mean_rank /= n;
                s.other_mean_rank /= n;
            }
    }
    return rep;
}

/// Logits of a residual rebuilt only from the chosen component kinds across all decoder
/// layers (optionally plus the start-token embedding).
template <class T>
std::vector<T> component_only_logits(const ModelParams<T>& p, const Trace<T>& t, std::span<const Kind> kinds,
                                     bool include_embedding = false) {
    if (kinds.empty()) throw ValidationError("component_only_logits: empty component subset");
    std::vector<T> r(t.r0.size(), T{0});
    if (include_embedding) r = t.r0;
    for (const auto& L : t.layers)
        for (Kind k : kinds) {
            const auto& c = L.c_out(k);
            for (std::size_t i = 0; i < r.size(); ++i) r[i] += c[i];
        }
    return logit_lens<T>(p, r);
}

/// W_O restricted to head h's columns applied to that head's output: the head's own
/// write into the residual stream.
template <class T>
std::vector<T> head_contribution(const AttentionWeights<T>& w, std::size_t n_heads, std::size_t h,
                                 std::span<const T> head_out) {
    const std::size_t d = w.wo.rows(), dh = d / n_heads;
    if (head_out.size() != dh || h >= n_heads) throw ShapeError("head_contribution: bad head");
    std::vector<T> out(d, T{0});
    for (std::size_t i = 0; i < d; ++i) {
        const auto row = w.wo.row(i).subspan(h * dh, dh);
        T s{0};
        for (std::size_t j = 0; j < dh; ++j) s += row[j] * head_out[j];
        out[i] = s;
    }
    return out;
}

struct HeadTokenDump {
    std::size_t layer = 0, head = 0;
    std::vector<TokenId> top;  // from the lens of the query-averaged head contribution
};

struct TokenStats {
    std::vector<std::size_t> ks;
    std::vector<double> docid_fraction;  // mean over (layer, head, query) for each K
    double base_rate = 0;                // |docids| / d_V
    std::size_t pairs = 0;               // (layer, head, query) triples
    double below_base_share = 0;         // share of triples whose top-ks[0] fraction < base_rate
    std::vector<HeadTokenDump> dumps;
};

/// Share of document identifiers among the top-K lens tokens of every cross-attention
/// head output in `layers`, and the top-5 tokens of each head.
template <class T>
TokenStats crossattn_token_stats(const ModelParams<T>& p, std::span<const Trace<T>> traces,
                                 std::span<const std::size_t> layers, std::span<const std::size_t> ks) {
    const ModelConfig& c = p.config;
    const Vocabulary v(c.n_words, c.n_docids);
    TokenStats st;
    for (std::size_t k : ks) st.ks.push_back(std::min<std::size_t>(k, v.size()));
    if (st.ks.empty()) throw ValidationError("crossattn_token_stats: no K given");
    st.docid_fraction.assign(st.ks.size(), 0.0);
    st.base_rate = static_cast<double>(v.docid_count()) / static_cast<double>(v.size());
    const std::size_t kmax = *std::max_element(st.ks.begin(), st.ks.end());
    std::size_t below = 0;
    for (std::size_t l : layers) {
        if (l >= c.n_dec_layers) throw ValidationError("crossattn_token_stats: layer out of range");
        const auto& w = p.decoder[l].cross_attn;
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            std::vector<T> mean(c.d_model, T{0});
            for (const Trace<T>& t : traces) {
                const auto contrib = head_contribution<T>(w, c.n_heads, h, t.layers.at(l).heads.at(h).output);
                for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += contrib[i];
                const auto top = top_tokens<T>(logit_lens<T>(p, contrib), kmax);
                for (std::size_t ki = 0; ki < st.ks.size(); ++ki) {
                    const auto n = std::count_if(top.begin(), top.begin() + static_cast<std::ptrdiff_t>(st.ks[ki]),
                                                 [&](TokenId x) { return v.is_docid(x); });
                    const double frac = static_cast<double>(n) / static_cast<double>(st.ks[ki]);
                    st.docid_fraction[ki] += frac;
                    if (ki == 0 && frac < st.base_rate) ++below;
                }
                ++st.pairs;
            }
            if (!traces.empty()) {
                for (T& x : mean) x /= static_cast<T>(traces.size());
                st.dumps.push_back({l, h, top_tokens<T>(logit_lens<T>(p, mean), 5)});
            }
        }
    }
    if (st.pairs) {
        for (double& f : st.docid_fraction) f /= static_cast<double>(st.pairs);
        st.below_base_share = static_cast<double>(below) / static_cast<double>(st.pairs);
    }
    return st;
}

}  // namespace genir
