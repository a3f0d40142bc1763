#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "genir/errors.hpp"
#include "genir/model/forward.hpp"

namespace genir {

/// An upstream contributor to the residual stream: a component or the start-token embedding.
struct Source {
    std::optional<ComponentId> component;  // empty for the embedding pseudo-source

    bool is_embedding() const { return !component.has_value(); }
    std::string str() const { return component ? component->str() : "embedding"; }
    bool operator==(const Source&) const = default;
};

/// Everything written into the residual before the target reads it, in forward order.
inline std::vector<Source> sources_before(const ComponentId& target) {
    if (target.site != Site::decoder || target.kind == Kind::self_attention) {
        throw ValidationError("attribution targets are decoder cross-attention or MLP components");
    }
    std::vector<Source> s{Source{}};
    for (std::size_t l = 0; l <= target.layer; ++l)
        for (Kind k : kAllKinds) {
            if (l == target.layer && static_cast<int>(k) >= static_cast<int>(target.kind)) break;
            s.push_back({ComponentId{Site::decoder, l, k}});
        }
    return s;
}

template <class T>
std::span<const T> source_vector(const Trace<T>& t, const Source& s) {
    if (s.is_embedding()) return t.r0;
    return t.layers.at(s.component->layer).c_out(s.component->kind);
}

struct AttributionScore {
    Source source;
    ComponentId target;
    std::optional<std::size_t> head;  // set for cross-attention targets
    double score = 0;
};

/// (g . c . inv_rms), the part of a normalized input that comes from source vector c.
template <class T>
std::vector<double> normalized_part(std::span<const T> c, std::span<const T> gain, T inv_rms) {
    std::vector<double> out(c.size());
    for (std::size_t i = 0; i < c.size(); ++i)
        out[i] = static_cast<double>(gain[i]) * static_cast<double>(c[i]) * static_cast<double>(inv_rms);
    return out;
}

/// terms[s][i]: the share of source s in neuron i's pre-activation at decoder layer `layer`.
/// Summing over s (embedding included) gives FF_proj_i . norm(r).
template <class T>
std::vector<std::vector<double>> mlp_source_terms(const ModelParams<T>& p, const Trace<T>& t, std::size_t layer,
                                                  std::span<const Source> sources) {
    const auto& L = p.decoder.at(layer);
    const T inv = t.layers.at(layer).mlp_inv_rms;
    const Tensor<T>& w = L.mlp.ff_proj;
    std::vector<std::vector<double>> terms;
    for (const Source& s : sources) {
        const auto x = normalized_part<T>(source_vector(t, s), L.mlp_gain.flat(), inv);
        std::vector<double> row(w.rows());
        for (std::size_t i = 0; i < w.rows(); ++i) {
            double acc = 0;
            const auto wi = w.row(i);
            for (std::size_t j = 0; j < x.size(); ++j) acc += static_cast<double>(wi[j]) * x[j];
            row[i] = acc;
        }
        terms.push_back(std::move(row));
    }
    return terms;
}

struct MlpAttribution {
    ComponentId target;
    std::size_t activated = 0;  // neurons with positive pre-activation
    std::vector<AttributionScore> scores;
    bool empty() const { return activated == 0; }
};

/// Per-source score for the MLP at `layer`: the source's pre-activation share averaged
/// over the activated neurons. No activated neurons gives an empty, flagged result.
template <class T>
MlpAttribution t_mlp(const ModelParams<T>& p, const Trace<T>& t, std::size_t layer) {
    const ComponentId target{Site::decoder, layer, Kind::mlp};
    target.validate(p.config);
    MlpAttribution out{target, 0, {}};
    const auto& pre = t.layers.at(layer).mlp_pre;
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < pre.size(); ++i)
        if (pre[i] > T{0}) active.push_back(i);
    out.activated = active.size();
    if (active.empty()) return out;
    const auto sources = sources_before(target);
    const auto terms = mlp_source_terms(p, t, layer, sources);
    for (std::size_t s = 0; s < sources.size(); ++s) {
        double acc = 0;
        for (std::size_t i : active) acc += terms[s][i];
        out.scores.push_back({sources[s], target, std::nullopt, acc / static_cast<double>(active.size())});
    }
    return out;
}

/// Index of the highest attention score; ties go to the lowest index.
template <class T>
std::size_t argmax_key(std::span<const T> scores) {
    if (scores.empty()) throw ValidationError("argmax_key: no keys");
    return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

struct CrossAttribution {
    ComponentId target;
    std::size_t head = 0;
    std::size_t argmax = 0;  // the key index î
    double similarity = 0;   // s_î as recorded in the trace
    std::vector<AttributionScore> scores;
};

/// Per-source score for one cross-attention head: (W_Q^h . norm-part(c)) . k_î.
template <class T>
CrossAttribution t_crattn(const ModelParams<T>& p, const Trace<T>& t, std::size_t layer, std::size_t head) {
    const ModelConfig& c = p.config;
    const ComponentId target{Site::decoder, layer, Kind::cross_attention};
    target.validate(c);
    if (head >= c.n_heads) throw ValidationError("t_crattn: head out of range");
    const auto& L = p.decoder[layer];
    const auto& lt = t.layers.at(layer);
    const auto& ht = lt.heads.at(head);
    const std::size_t dh = c.head_dim();
    CrossAttribution out{target, head, argmax_key<T>(ht.scores), 0, {}};
    out.similarity = static_cast<double>(ht.scores[out.argmax]);
    const auto key = ht.keys.row(out.argmax);
    for (const Source& s : sources_before(target)) {
        const auto x = normalized_part<T>(source_vector(t, s), L.cross_gain.flat(), lt.cross_inv_rms);
        double score = 0;
        for (std::size_t j = 0; j < dh; ++j) {
            const auto wq = L.cross_attn.wq.row(head * dh + j);
            double q = 0;
            for (std::size_t m = 0; m < x.size(); ++m) q += static_cast<double>(wq[m]) * x[m];
            score += q * static_cast<double>(key[j]);
        }
        out.scores.push_back({s, target, head, score});
    }
    return out;
}

/// Head-averaged raw scores for a cross-attention layer.
template <class T>
std::vector<AttributionScore> t_crattn_layer(const ModelParams<T>& p, const Trace<T>& t, std::size_t layer) {
    std::vector<AttributionScore> avg;
    for (std::size_t h = 0; h < p.config.n_heads; ++h) {
        auto r = t_crattn(p, t, layer, h);
        if (avg.empty()) {
            avg = r.scores;
            for (auto& a : avg) a.score = 0, a.head.reset();
        }
        for (std::size_t s = 0; s < avg.size(); ++s) avg[s].score += r.scores[s].score;
    }
    for (auto& a : avg) a.score /= static_cast<double>(p.config.n_heads);
    return avg;
}

/// Shares of the positive scores; non-positive scores map to 0.
inline std::vector<double> positive_proportions(std::span<const AttributionScore> scores) {
    double total = 0;
    for (const auto& s : scores) total += std::max(0.0, s.score);
    std::vector<double> out;
    for (const auto& s : scores) out.push_back(total > 0 ? std::max(0.0, s.score) / total : 0.0);
    return out;
}

struct TopSources {
    std::vector<std::size_t> top;       // source indices of the k best mean scores
    std::vector<double> mean;           // mean score per source over queries
    double consistency = 0;             // share of `top` that is in every query's own top k
};

namespace detail {

inline std::vector<std::size_t> top_k_indices(std::span<const double> v, std::size_t k) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

}  // namespace detail

/// `per_query[q][s]` is source s's score for one target on query q. k is clamped to the
/// number of sources.
inline TopSources top_source_heads(std::span<const std::vector<double>> per_query, std::size_t k) {
    TopSources out;
    if (per_query.empty()) return out;
    const std::size_t n = per_query.front().size();
    out.mean.assign(n, 0.0);
    for (const auto& q : per_query) {
        if (q.size() != n) throw ValidationError("top_source_heads: source count differs across queries");
        for (std::size_t s = 0; s < n; ++s) out.mean[s] += q[s];
    }
    for (double& m : out.mean) m /= static_cast<double>(per_query.size());
    k = std::min(k, n);
    out.top = detail::top_k_indices(out.mean, k);
    if (k == 0) return out;
    std::vector<bool> stable(n, true);
    for (const auto& q : per_query) {
        std::vector<bool> in(n, false);
        for (std::size_t s : detail::top_k_indices(q, k)) in[s] = true;
        for (std::size_t s = 0; s < n; ++s) stable[s] = stable[s] && in[s];
    }
    std::size_t kept = 0;
    for (std::size_t s : out.top) kept += stable[s];
    out.consistency = static_cast<double>(kept) / static_cast<double>(k);
    return out;
}

}  // namespace genir
