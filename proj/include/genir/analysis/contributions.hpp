#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "genir/instrument/patching.hpp"
#include "genir/model/forward.hpp"

namespace genir {

struct KindStat {
    double ratio = std::numeric_limits<double>::quiet_NaN();
    double cosine = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_ratio = 0;   // queries contributing to the ratio mean
    std::size_t n_cosine = 0;  // queries contributing to the cosine mean
};

struct LayerContribution {
    std::array<KindStat, 3> kinds;  // indexed by Kind

    const KindStat& operator[](Kind k) const { return kinds[static_cast<std::size_t>(k)]; }
    KindStat& operator[](Kind k) { return kinds[static_cast<std::size_t>(k)]; }

    /// Kind with the largest mean ratio; ties go to the earlier kind in self/cross/mlp order.
    Kind dominant() const {
        Kind best = Kind::self_attention;
        double v = -1;
        for (Kind k : kAllKinds) {
            const double r = (*this)[k].ratio;
            if (!std::isnan(r) && r > v) {
                v = r;
                best = k;
            }
        }
        return best;
    }
};

/// Per layer and kind: mean over traces of ||c_out|| / ||r_end - r_begin|| and of
/// cos(c_out, r_begin). Undefined terms (zero-norm r_delta, zero vectors) are skipped.
template <class T>
std::vector<LayerContribution> contribution_profile(std::span<const Trace<T>> traces) {
    if (traces.empty()) return {};
    const std::size_t n_layers = traces.front().layers.size();
    std::vector<LayerContribution> out(n_layers);
    std::vector<std::array<double, 3>> rsum(n_layers, {0, 0, 0}), csum(n_layers, {0, 0, 0});
    for (const Trace<T>& t : traces) {
        if (t.layers.size() != n_layers) throw ValidationError("contribution_profile: traces differ in depth");
        for (std::size_t l = 0; l < n_layers; ++l) {
            const auto& L = t.layers[l];
            std::vector<T> delta(L.r_end.size());
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = L.r_end[i] - L.r_begin[i];
            const double dn = static_cast<double>(l2_norm<T>(delta));
            for (Kind k : kAllKinds) {
                const auto ki = static_cast<std::size_t>(k);
                const auto& c = L.c_out(k);
                if (dn > 0) {
                    rsum[l][ki] += static_cast<double>(l2_norm<T>(c)) / dn;
                    ++out[l][k].n_ratio;
                }
                const double cs = static_cast<double>(cosine<T>(c, L.r_begin));
                if (!std::isnan(cs)) {
                    csum[l][ki] += cs;
                    ++out[l][k].n_cosine;
                }
            }
        }
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        for (Kind k : kAllKinds) {
            const auto ki = static_cast<std::size_t>(k);
            KindStat& s = out[l][k];
            if (s.n_ratio) s.ratio = rsum[l][ki] / static_cast<double>(s.n_ratio);
            if (s.n_cosine) s.cosine = csum[l][ki] / static_cast<double>(s.n_cosine);
        }
    }
    return out;
}

/// Stage I: longest prefix where the MLP dominates; Stage II: the following run where
/// cross-attention dominates; Stage III: the rest. When any stage would be empty the
/// layers are split as evenly as possible and the result is flagged.
inline StagePartition segment_stages(std::span<const Kind> dominance) {
    const std::size_t n = dominance.size();
    if (n < 3) throw ValidationError("segment_stages needs at least 3 decoder layers");
    std::size_t b1 = 0;
    while (b1 < n && dominance[b1] == Kind::mlp) ++b1;
    std::size_t b2 = b1;
    while (b2 < n && dominance[b2] == Kind::cross_attention) ++b2;
    if (b1 == 0 || b2 == b1 || b2 == n) {
        StagePartition sp = StagePartition::from_bounds((n + 2) / 3, (2 * n + 1) / 3, n);
        sp.fallback = true;
        return sp;
    }
    return StagePartition::from_bounds(b1, b2, n);
}

inline StagePartition segment_stages(std::span<const LayerContribution> profile) {
    std::vector<Kind> dom;
    for (const auto& l : profile) dom.push_back(l.dominant());
    return segment_stages(std::span<const Kind>(dom));
}

/// 3 kinds x 3 stages of per-stage summed outputs; cell [a][b] of the result is the mean
/// over traces of cos(sum of stage-a outputs of kind ka, sum of stage-b outputs of kind kb),
/// laid out as a 9 x 9 symmetric matrix indexed by stage * 3 + kind.
template <class T>
std::vector<std::vector<double>> cross_stage_cosine(std::span<const Trace<T>> traces, const StagePartition& sp) {
    constexpr std::size_t M = 9;
    std::vector<std::vector<double>> sum(M, std::vector<double>(M, 0.0));
    std::vector<std::vector<std::size_t>> cnt(M, std::vector<std::size_t>(M, 0));
    for (const Trace<T>& t : traces) {
        const std::size_t d = t.r0.size();
        std::vector<std::vector<double>> v(M, std::vector<double>(d, 0.0));
        for (std::size_t s = 0; s < 3; ++s)
            for (std::size_t l = sp.begin[s]; l < sp.end[s]; ++l)
                for (Kind k : kAllKinds) {
                    const auto& c = t.layers[l].c_out(k);
                    auto& acc = v[s * 3 + static_cast<std::size_t>(k)];
                    for (std::size_t i = 0; i < d; ++i) acc[i] += static_cast<double>(c[i]);
                }
        for (std::size_t a = 0; a < M; ++a)
            for (std::size_t b = 0; b < M; ++b) {
                const double c = cosine<double>(v[a], v[b]);
                if (std::isnan(c)) continue;
                sum[a][b] += c;
                ++cnt[a][b];
            }
    }
    for (std::size_t a = 0; a < M; ++a)
        for (std::size_t b = 0; b < M; ++b)
            sum[a][b] = cnt[a][b] ? sum[a][b] / static_cast<double>(cnt[a][b]) : std::numeric_limits<double>::quiet_NaN();
    return sum;
}

}  // namespace genir
