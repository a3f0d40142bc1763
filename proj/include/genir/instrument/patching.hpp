#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "genir/corpus/corpus.hpp"
#include "genir/errors.hpp"
#include "genir/model/forward.hpp"
#include "genir/model/weights_io.hpp"

namespace genir {

enum class PatchMode { zero, mean, donor, custom };

inline const char* mode_name(PatchMode m) {
    switch (m) {
        case PatchMode::zero: return "zero";
        case PatchMode::mean: return "mean";
        case PatchMode::donor: return "donor";
        case PatchMode::custom: return "custom";
    }
    return "?";
}

inline PatchMode parse_mode(const std::string& s) {
    if (s == "zero") return PatchMode::zero;
    if (s == "mean") return PatchMode::mean;
    if (s == "donor") return PatchMode::donor;
    if (s == "custom") return PatchMode::custom;
    throw ValidationError("unknown patch mode '" + s + "'");
}

struct PatchEntry {
    Site site = Site::decoder;
    std::vector<std::size_t> layers;
    Kind kind = Kind::mlp;
    PatchMode mode = PatchMode::zero;
    std::vector<double> value;  // custom mode only, length d_model
};

struct ResolvedPatch {
    PatchMode mode;
    const std::vector<double>* value;
};

/// Assignments of replacement outputs to components. Each component appears at most once.
struct PatchPlan {
    std::vector<PatchEntry> entries;

    bool empty() const noexcept { return entries.empty(); }

    bool uses(PatchMode m) const {
        return std::any_of(entries.begin(), entries.end(), [m](const PatchEntry& e) { return e.mode == m; });
    }

    /// One record per patched component; throws on duplicates, unknown components or
    /// malformed custom vectors.
    std::map<ComponentId, ResolvedPatch> resolve(const ModelConfig& c) const {
        std::map<ComponentId, ResolvedPatch> out;
        for (const PatchEntry& e : entries) {
            if (e.layers.empty()) throw ValidationError("patch entry names no layers");
            if (e.mode == PatchMode::custom && e.value.size() != c.d_model) {
                throw ValidationError("custom patch vector must have d_model entries");
            }
            for (std::size_t l : e.layers) {
                const ComponentId id{e.site, l, e.kind};
                id.validate(c);
                if (!out.emplace(id, ResolvedPatch{e.mode, &e.value}).second) {
                    throw ValidationError("component " + id.str() + " patched more than once");
                }
            }
        }
        return out;
    }

    std::size_t component_count(const ModelConfig& c) const { return resolve(c).size(); }
};

inline void to_json(nlohmann::json& j, const PatchPlan& p) {
    j = nlohmann::json::array();
    for (const PatchEntry& e : p.entries) {
        nlohmann::json x{{"site", site_name(e.site)}, {"layers", e.layers}, {"kind", kind_name(e.kind)},
                         {"mode", mode_name(e.mode)}};
        if (e.mode == PatchMode::custom) x["value"] = e.value;
        j.push_back(std::move(x));
    }
}

inline void from_json(const nlohmann::json& j, PatchPlan& p) {
    if (!j.is_array()) throw ValidationError("patch plan must be a JSON array");
    p.entries.clear();
    for (const auto& x : j) {
        try {
            PatchEntry e;
            e.site = parse_site(x.at("site").get<std::string>());
            e.layers = x.at("layers").get<std::vector<std::size_t>>();
            e.kind = parse_kind(x.at("kind").get<std::string>());
            e.mode = parse_mode(x.at("mode").get<std::string>());
            if (e.mode == PatchMode::custom) e.value = x.at("value").get<std::vector<double>>();
            p.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& err) {
            throw ValidationError(std::string("malformed patch plan entry: ") + err.what());
        }
    }
}

/// Mean component outputs over a query set. Encoder entries keep one row per position
/// (position i averaged over queries reaching it); decoder entries have one row.
template <class T>
struct MeanStore {
    struct Entry {
        Tensor<T> mean;
        std::vector<std::size_t> counts;  // per row
    };
    std::map<ComponentId, Entry> entries;

    const Entry& at(const ComponentId& id) const {
        auto it = entries.find(id);
        if (it == entries.end()) throw ValidationError("mean store has no entry for " + id.str());
        return it->second;
    }
};

/// Records every component output of one pass.
template <class T>
class RecordingHooks : public Hooks<T> {
public:
    void on_output(const ComponentId& id, Tensor<T>& c_out) const override { outputs[id] = c_out; }
    mutable std::map<ComponentId, Tensor<T>> outputs;
};

template <class T>
MeanStore<T> collect_means(const ModelParams<T>& p, std::span<const Example> queries) {
    if (queries.empty()) throw ValidationError("collect_means: empty query set");
    std::map<ComponentId, std::pair<Tensor<double>, std::vector<std::size_t>>> acc;
    for (const Example& q : queries) {
        RecordingHooks<T> rec;
        forward(p, q.input, &rec);
        for (const auto& [id, out] : rec.outputs) {
            auto& [sum, counts] = acc[id];
            if (sum.rows() < out.rows()) {
                Tensor<double> grown(out.rows(), out.cols());
                for (std::size_t r = 0; r < sum.rows(); ++r)
                    std::copy(sum.row(r).begin(), sum.row(r).end(), grown.row(r).begin());
                sum = std::move(grown);
                counts.resize(out.rows(), 0);
            }
            for (std::size_t r = 0; r < out.rows(); ++r) {
                for (std::size_t c = 0; c < out.cols(); ++c) sum(r, c) += static_cast<double>(out(r, c));
                ++counts[r];
            }
        }
    }
    MeanStore<T> store;
    for (auto& [id, sc] : acc) {
        auto& [sum, counts] = sc;
        typename MeanStore<T>::Entry e{Tensor<T>(sum.rows(), sum.cols()), counts};
        for (std::size_t r = 0; r < sum.rows(); ++r)
            for (std::size_t c = 0; c < sum.cols(); ++c) e.mean(r, c) = static_cast<T>(sum(r, c) / static_cast<double>(counts[r]));
        store.entries.emplace(id, std::move(e));
    }
    return store;
}

template <class T>
TensorBundle means_bundle(const MeanStore<T>& s) {
    TensorBundle b;
    b.meta["kind"] = "means";
    for (const auto& [id, e] : s.entries) {
        b.names.push_back(id.str() + ".mean");
        b.tensors.push_back(Tensor<float>::cast(e.mean));
        std::vector<float> counts(e.counts.begin(), e.counts.end());
        b.names.push_back(id.str() + ".count");
        b.tensors.emplace_back(1, counts.size(), std::move(counts));
    }
    return b;
}

template <class T>
MeanStore<T> means_from_bundle(const TensorBundle& b) {
    if (b.meta.value("kind", std::string()) != "means") throw ValidationError("file does not hold a mean store");
    MeanStore<T> s;
    for (std::size_t i = 0; i + 1 < b.names.size(); i += 2) {
        const std::string& n = b.names[i];
        const auto d1 = n.find('.'), d2 = n.find('.', d1 + 1), d3 = n.rfind('.');
        if (d1 == std::string::npos || d2 == std::string::npos || n.substr(d3) != ".mean") {
            throw ValidationError("malformed mean store entry '" + n + "'");
        }
        ComponentId id{parse_site(n.substr(0, d1)), std::stoul(n.substr(d1 + 1, d2 - d1 - 1)),
                       parse_kind(n.substr(d2 + 1, d3 - d2 - 1))};
        typename MeanStore<T>::Entry e{Tensor<T>::cast(b.tensors[i]), {}};
        for (float c : b.tensors[i + 1].flat()) {
            if (!(c > 0)) throw ValidationError("mean store entry with zero count");
            e.counts.push_back(static_cast<std::size_t>(c));
        }
        s.entries.emplace(id, std::move(e));
    }
    return s;
}

/// Applies a resolved plan at every hook point.
template <class T>
class PlanHooks : public Hooks<T> {
public:
    PlanHooks(const ModelConfig& c, const PatchPlan& plan, const MeanStore<T>* means,
              const std::map<ComponentId, Tensor<T>>* donor)
        : patches_(plan.resolve(c)), means_(means), donor_(donor) {
        for (const auto& [id, rp] : patches_) {
            if (rp.mode == PatchMode::mean) {
                if (!means_) throw ValidationError("plan uses mean patching but no mean store was given");
                const auto& e = means_->at(id);
                if (e.mean.cols() != c.d_model) throw ValidationError("mean store entry has wrong dimension");
            }
            if (rp.mode == PatchMode::donor && !donor_) {
                throw ValidationError("plan uses donor patching but no donor model was given");
            }
        }
    }

    void on_output(const ComponentId& id, Tensor<T>& c_out) const override {
        auto it = patches_.find(id);
        if (it == patches_.end()) return;
        const ResolvedPatch& rp = it->second;
        switch (rp.mode) {
            case PatchMode::zero: c_out.fill(T{0}); break;
            case PatchMode::mean: {
                const auto& e = means_->at(id);
                if (e.mean.rows() < c_out.rows()) {
                    throw ValidationError("mean store for " + id.str() + " does not cover position " +
                                          std::to_string(e.mean.rows()));
                }
                for (std::size_t r = 0; r < c_out.rows(); ++r)
                    std::copy(e.mean.row(r).begin(), e.mean.row(r).end(), c_out.row(r).begin());
                break;
            }
            case PatchMode::donor: {
                const Tensor<T>& d = donor_->at(id);
                if (!d.same_shape(c_out)) throw ValidationError("donor output shape differs at " + id.str());
                c_out = d;
                break;
            }
            case PatchMode::custom:
                for (std::size_t r = 0; r < c_out.rows(); ++r)
                    for (std::size_t c = 0; c < c_out.cols(); ++c) c_out(r, c) = static_cast<T>((*rp.value)[c]);
                break;
        }
    }

private:
    std::map<ComponentId, ResolvedPatch> patches_;
    const MeanStore<T>* means_;
    const std::map<ComponentId, Tensor<T>>* donor_;
};

/// Component outputs from a clean donor pass on the same query.
template <class T>
std::map<ComponentId, Tensor<T>> donor_outputs(const ModelParams<T>& donor, const ModelConfig& recipient,
                                               std::span<const TokenId> query) {
    if (!(donor.config == recipient)) throw ValidationError("donor model config differs from the patched model");
    RecordingHooks<T> rec;
    forward(donor, query, &rec);
    return std::move(rec.outputs);
}

template <class T>
Trace<T> patched_decode(const ModelParams<T>& p, std::span<const TokenId> query, const PatchPlan& plan,
                        const std::type_identity_t<MeanStore<T>>* means = nullptr,
                        const std::type_identity_t<ModelParams<T>>* donor = nullptr) {
    std::optional<std::map<ComponentId, Tensor<T>>> donated;
    if (plan.uses(PatchMode::donor)) {
        if (!donor) throw ValidationError("plan uses donor patching but no donor model was given");
        donated = donor_outputs(*donor, p.config, query);
    }
    const PlanHooks<T> hooks(p.config, plan, means, donated ? &*donated : nullptr);
    return trace_forward(p, query, &hooks);
}

struct PatchMetric {
    double fraction_displaced = 0.0;
    std::vector<std::size_t> ranks;           // post-patch gold rank per query
    std::map<std::size_t, std::size_t> histogram;  // rank -> count
};

inline void to_json(nlohmann::json& j, const PatchMetric& m) {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& [r, n] : m.histogram) h[std::to_string(r)] = n;
    j = {{"fraction_displaced", m.fraction_displaced}, {"n_queries", m.ranks.size()}, {"rank_histogram", h}};
}

/// Fraction of (clean rank-1) queries whose gold document leaves Rank 1 under `plan`.
template <class T>
PatchMetric patch_metric(const ModelParams<T>& p, std::span<const Example> correct, const PatchPlan& plan,
                         const std::type_identity_t<MeanStore<T>>* means = nullptr,
                         const std::type_identity_t<ModelParams<T>>* donor = nullptr) {
    PatchMetric m;
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    std::size_t displaced = 0;
    for (const Example& q : correct) {
        const Trace<T> t = patched_decode(p, q.input, plan, means, donor);
        const std::size_t r = gold_rank<T>(t.logits, v, q.target);
        m.ranks.push_back(r);
        ++m.histogram[r];
        displaced += r != 1;
    }
    if (!correct.empty()) m.fraction_displaced = static_cast<double>(displaced) / static_cast<double>(correct.size());
    return m;
}

/// Three contiguous decoder-layer ranges [begin, end).
struct StagePartition {
    std::size_t begin[3] = {0, 0, 0};
    std::size_t end[3] = {0, 0, 0};
    bool fallback = false;  // set when the dominance rule degenerated

    std::vector<std::size_t> layers(std::size_t stage) const {
        std::vector<std::size_t> out;
        for (std::size_t l = begin[stage]; l < end[stage]; ++l) out.push_back(l);
        return out;
    }

    void validate(std::size_t n_layers) const {
        if (begin[0] != 0 || end[2] != n_layers) throw ValidationError("stage partition must cover all decoder layers");
        for (int s = 0; s < 3; ++s) {
            if (end[s] <= begin[s]) throw ValidationError("stage partition has an empty stage");
            if (s > 0 && begin[s] != end[s - 1]) throw ValidationError("stage partition ranges must be contiguous");
        }
    }

    static StagePartition from_bounds(std::size_t b1, std::size_t b2, std::size_t n) {
        StagePartition sp;
        sp.begin[0] = 0;
        sp.end[0] = sp.begin[1] = b1;
        sp.end[1] = sp.begin[2] = b2;
        sp.end[2] = n;
        sp.validate(n);
        return sp;
    }
};

inline void to_json(nlohmann::json& j, const StagePartition& s) {
    j = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) j.push_back({{"begin", s.begin[i]}, {"end", s.end[i]}});
}

/// Zero cross-attention in Stage I, zero self-attention everywhere, mean MLP in Stages I-II.
inline PatchPlan combined_stage_plan(const StagePartition& sp, std::size_t n_layers) {
    sp.validate(n_layers);
    std::vector<std::size_t> all(n_layers), early;
    for (std::size_t l = 0; l < n_layers; ++l) all[l] = l;
    for (std::size_t l = sp.begin[0]; l < sp.end[1]; ++l) early.push_back(l);
    PatchPlan p;
    p.entries.push_back({Site::decoder, sp.layers(0), Kind::cross_attention, PatchMode::zero, {}});
    p.entries.push_back({Site::decoder, all, Kind::self_attention, PatchMode::zero, {}});
    p.entries.push_back({Site::decoder, early, Kind::mlp, PatchMode::mean, {}});
    return p;
}

inline PatchPlan load_plan(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("patch plan is not JSON: " + std::string(e.what()));
    }
    return j.get<PatchPlan>();
}

}  // namespace genir
