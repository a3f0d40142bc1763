#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "genir/analysis/attribution.hpp"
#include "genir/analysis/contributions.hpp"
#include "genir/analysis/lens.hpp"
#include "genir/corpus/jsonl.hpp"
#include "genir/experiments/parallel.hpp"
#include "genir/experiments/protocols.hpp"
#include "genir/model/weights_io.hpp"

namespace genir {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kGenirVersion = "0.1.0";

// ---------------------------------------------------------------- small utilities

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ValidationError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Shortest round-trip decimal form; "nan" for undefined values.
inline std::string fmt_num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

/// JSON has no NaN; undefined values are written as null.
inline nlohmann::json num_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

class Csv {
public:
    explicit Csv(std::vector<std::string> header) : cols_(header.size()) {
        header.insert(header.begin(), "schema_version");
        row_strings(header);
    }

    template <class... Cells>
    void row(const Cells&... cells) {
        static_assert(sizeof...(Cells) > 0);
        std::vector<std::string> r{std::to_string(kReportSchemaVersion), cell(cells)...};
        if (r.size() != cols_ + 1) throw std::logic_error("csv row width mismatch");
        row_strings(r);
    }

    const std::string& str() const { return out_; }

private:
    static std::string cell(const std::string& s) { return s; }
    static std::string cell(const char* s) { return s; }
    static std::string cell(double v) { return fmt_num(v); }
    static std::string cell(bool b) { return b ? "true" : "false"; }
    template <class I>
        requires std::is_integral_v<I>
    static std::string cell(I v) {
        return std::to_string(v);
    }

    void row_strings(const std::vector<std::string>& r) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i) out_ += ',';
            out_ += r[i];
        }
        out_ += '\n';
    }

    std::size_t cols_;
    std::string out_;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline const char* kind_short(Kind k) { return kind_name(k); }

// ---------------------------------------------------------------- manifest

struct ExperimentManifest {
    int schema_version = kReportSchemaVersion;
    std::string kind = "report";
    std::filesystem::path checkpoint, corpus, queries;
    std::optional<std::filesystem::path> donor;  // default: random-init stand-in
    std::uint64_t seed = 7;
    std::filesystem::path out;
    bool overwrite = false;
    bool wide_precision = false;
    Split analysis_split = Split::validation;  // correct queries for analyses and patch grids
    Split eval_split = Split::test;            // reduced-model evaluation
    std::vector<std::size_t> lens_ks{10, 100, 1000};
    std::size_t top_k = 5;
    std::size_t threads = 0;

    /// Paths are resolved against `base` (the manifest's directory).
    static ExperimentManifest from_json(const nlohmann::json& j, const std::filesystem::path& base) {
        ExperimentManifest m;
        auto path = [&](const char* key) -> std::filesystem::path {
            if (!j.contains(key)) throw ValidationError(std::string("manifest: missing '") + key + "'");
            std::filesystem::path p = j.at(key).get<std::string>();
            return p.is_absolute() ? p : base / p;
        };
        try {
            m.schema_version = j.value("schema_version", kReportSchemaVersion);
            if (m.schema_version != kReportSchemaVersion) throw ValidationError("manifest: unsupported schema_version");
            m.kind = j.value("kind", m.kind);
            if (m.kind != "report") throw ValidationError("manifest: kind must be 'report'");
            m.checkpoint = path("checkpoint");
            m.corpus = path("corpus");
            m.queries = path("queries");
            if (j.contains("donor")) m.donor = path("donor");
            m.out = path("out");
            m.seed = j.value("seed", m.seed);
            m.overwrite = j.value("overwrite", false);
            m.wide_precision = j.value("wide_precision", false);
            m.analysis_split = parse_split(j.value("analysis_split", std::string("validation")));
            m.eval_split = parse_split(j.value("eval_split", std::string("test")));
            m.lens_ks = j.value("lens_ks", m.lens_ks);
            m.top_k = j.value("top_k", m.top_k);
            m.threads = j.value("threads", m.threads);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("manifest: ") + e.what());
        }
        if (m.lens_ks.empty() || m.top_k == 0) throw ValidationError("manifest: lens_ks and top_k must be non-empty/positive");
        return m;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"schema_version", schema_version},
                            {"kind", kind},
                            {"checkpoint", checkpoint.string()},
                            {"corpus", corpus.string()},
                            {"queries", queries.string()},
                            {"out", out.string()},
                            {"seed", seed},
                            {"overwrite", overwrite},
                            {"wide_precision", wide_precision},
                            {"analysis_split", split_name(analysis_split)},
                            {"eval_split", split_name(eval_split)},
                            {"lens_ks", lens_ks},
                            {"top_k", top_k},
                            {"threads", threads}};
        if (donor) j["donor"] = donor->string();
        return j;
    }

    void check_inputs() const {
        for (const auto& p : {checkpoint, corpus, queries})
            if (!std::filesystem::is_regular_file(p)) throw ValidationError("manifest input does not exist: " + p.string());
        if (donor && !std::filesystem::is_regular_file(*donor))
            throw ValidationError("manifest input does not exist: " + donor->string());
        if (std::filesystem::exists(out) && !overwrite)
            throw ValidationError("output " + out.string() + " exists; set overwrite to replace it");
    }
};

inline ExperimentManifest load_manifest(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ValidationError("cannot open manifest " + p.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest is not JSON: " + std::string(e.what()));
    }
    return ExperimentManifest::from_json(j, p.parent_path());
}

// ---------------------------------------------------------------- artifacts

/// One analysis: a nested JSON document plus one or more flat CSV tables.
struct Artifact {
    std::string name;
    nlohmann::json json;
    std::vector<std::pair<std::string, std::string>> csvs;  // file name, contents
};

template <class T>
Artifact contributions_artifact(std::span<const LayerContribution> prof) {
    Artifact a{"contributions", nlohmann::json::object(), {}};
    Csv csv({"layer", "kind", "ratio", "cosine", "n_ratio", "n_cosine", "dominant"});
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < prof.size(); ++l) {
        nlohmann::json lj = {{"layer", l}, {"dominant", kind_name(prof[l].dominant())}};
        for (Kind k : kAllKinds) {
            const KindStat& s = prof[l][k];
            lj[kind_name(k)] = {{"ratio", num_json(s.ratio)}, {"cosine", num_json(s.cosine)}};
            csv.row(l, kind_name(k), s.ratio, s.cosine, s.n_ratio, s.n_cosine, prof[l].dominant() == k);
        }
        layers.push_back(lj);
    }
    a.json["layers"] = layers;
    a.csvs.push_back({"contributions.csv", csv.str()});
    return a;
}

inline Artifact stages_artifact(const StagePartition& sp, const std::vector<std::vector<double>>& cos) {
    Artifact a{"stages", nlohmann::json::object(), {}};
    a.json["partition"] = sp;
    a.json["fallback_even_split"] = sp.fallback;
    Csv part({"stage", "begin", "end", "fallback"});
    for (std::size_t s = 0; s < 3; ++s) part.row(s + 1, sp.begin[s], sp.end[s], sp.fallback);
    Csv csv({"stage_a", "kind_a", "stage_b", "kind_b", "cosine"});
    nlohmann::json m = nlohmann::json::array();
    for (std::size_t i = 0; i < 9; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < 9; ++j) {
            row.push_back(num_json(cos[i][j]));
            csv.row(i / 3 + 1, kind_name(kAllKinds[i % 3]), j / 3 + 1, kind_name(kAllKinds[j % 3]), cos[i][j]);
        }
        m.push_back(row);
    }
    a.json["cross_stage_cosine"] = {{"index", "stage * 3 + kind (self_attention, cross_attention, mlp)"}, {"matrix", m}};
    const double late_vs_early_mlp = cos[2 * 3 + 2][0 * 3 + 2];
    a.json["stage3_mlp_vs_stage1_mlp"] = num_json(late_vs_early_mlp);
    a.csvs.push_back({"stage_partition.csv", part.str()});
    a.csvs.push_back({"stage_cosine.csv", csv.str()});
    return a;
}

inline nlohmann::json eval_json(const EvalResult& e) { return e; }

inline Artifact patching_artifact(const PatchGrid& g, const ReducedEval& r) {
    Artifact a{"patching", nlohmann::json::object(), {}};
    Csv grid({"kind", "mode", "stage_1", "stage_2", "stage_3"});
    nlohmann::json gj = nlohmann::json::array();
    for (Kind k : kAllKinds)
        for (PatchMode m : kGridModes) {
            grid.row(kind_name(k), mode_name(m), 100 * g.at(m, k, 0), 100 * g.at(m, k, 1), 100 * g.at(m, k, 2));
            gj.push_back({{"kind", kind_name(k)},
                          {"mode", mode_name(m)},
                          {"percent_displaced", {100 * g.at(m, k, 0), 100 * g.at(m, k, 1), 100 * g.at(m, k, 2)}}});
        }
    a.json["grid"] = gj;
    a.json["stages"] = g.stages;
    a.json["n_correct"] = g.n_correct;
    a.json["donor"] = g.donor_stand_in;
    Csv red({"setting", "hits_at_1", "recall_at_5", "hits_at_10", "mrr", "patched_components", "total_components"});
    red.row("clean", r.clean.hits_at_1, r.clean.recall_at_5, r.clean.hits_at_10, r.clean.mrr, std::size_t{0},
            r.total_components);
    red.row("combined_plan", r.patched.hits_at_1, r.patched.recall_at_5, r.patched.hits_at_10, r.patched.mrr,
            r.patched_components, r.total_components);
    red.row("relative", r.rel_hits_at_1, r.rel_recall_at_5, r.rel_hits_at_10,
            r.clean.mrr > 0 ? r.patched.mrr / r.clean.mrr : 1.0, r.patched_components, r.total_components);
    a.json["reduced_model"] = {{"clean", r.clean},
                               {"combined_plan", r.patched},
                               {"relative", {{"hits_at_1", r.rel_hits_at_1},
                                             {"recall_at_5", r.rel_recall_at_5},
                                             {"hits_at_10", r.rel_hits_at_10}}},
                               {"patched_components", r.patched_components},
                               {"total_components", r.total_components}};
    a.csvs.push_back({"patch_grid.csv", grid.str()});
    a.csvs.push_back({"reduced_model.csv", red.str()});
    return a;
}

struct ComponentOnlySummary {
    std::string subset;
    double median_rank = 0;     // gold rank among document identifiers
    double share_rank1 = 0;
    double share_within10 = 0;
};

template <class T>
std::vector<ComponentOnlySummary> component_only_summary(const ModelParams<T>& p, std::span<const Trace<T>> traces,
                                                         std::span<const TokenId> golds) {
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const std::vector<std::pair<std::string, std::vector<Kind>>> subsets{
        {"mlp", {Kind::mlp}},
        {"cross_attention", {Kind::cross_attention}},
        {"self_attention", {Kind::self_attention}},
        {"all", {Kind::self_attention, Kind::cross_attention, Kind::mlp}}};
    std::vector<ComponentOnlySummary> out;
    for (const auto& [name, kinds] : subsets) {
        std::vector<double> ranks;
        for (std::size_t q = 0; q < traces.size(); ++q)
            ranks.push_back(static_cast<double>(gold_rank<T>(component_only_logits<T>(p, traces[q], kinds), v, golds[q])));
        ComponentOnlySummary s{name, median_of(ranks), 0, 0};
        for (double r : ranks) {
            s.share_rank1 += r == 1;
            s.share_within10 += r <= 10;
        }
        if (!ranks.empty()) {
            s.share_rank1 /= static_cast<double>(ranks.size());
            s.share_within10 /= static_cast<double>(ranks.size());
        }
        out.push_back(s);
    }
    return out;
}

inline Artifact lens_artifact(const LensReport& rep, std::span<const ComponentOnlySummary> comp) {
    Artifact a{"lens", nlohmann::json::object(), {}};
    Csv csv({"layer", "vector", "gold_rank", "gold_docid_rank", "docid_mean_rank", "other_mean_rank"});
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < rep.layers.size(); ++l) {
        nlohmann::json lj = {{"layer", l}};
        for (LensTarget t : kLensTargets) {
            const LensStat& s = rep.at(l, t);
            lj[lens_target_name(t)] = {{"gold_rank", s.gold_rank},
                                       {"gold_docid_rank", s.gold_docid_rank},
                                       {"docid_mean_rank", s.docid_mean_rank},
                                       {"other_mean_rank", s.other_mean_rank}};
            csv.row(l, lens_target_name(t), s.gold_rank, s.gold_docid_rank, s.docid_mean_rank, s.other_mean_rank);
        }
        layers.push_back(lj);
    }
    a.json["n_queries"] = rep.n_traces;
    a.json["rank_development"] = layers;
    Csv cc({"subset", "median_gold_docid_rank", "share_rank_1", "share_within_10"});
    nlohmann::json cj = nlohmann::json::array();
    for (const auto& s : comp) {
        cc.row(s.subset, s.median_rank, s.share_rank1, s.share_within10);
        cj.push_back({{"subset", s.subset},
                      {"median_gold_docid_rank", num_json(s.median_rank)},
                      {"share_rank_1", s.share_rank1},
                      {"share_within_10", s.share_within10}});
    }
    a.json["component_only"] = cj;
    a.csvs.push_back({"rank_development.csv", csv.str()});
    a.csvs.push_back({"component_only.csv", cc.str()});
    return a;
}

/// Attribution tables for every MLP layer and every cross-attention head, aggregated
/// over the given traces.
template <class T>
Artifact attribution_artifact(const ModelParams<T>& p, std::span<const Trace<T>> traces, std::size_t top_k) {
    Artifact a{"attribution", nlohmann::json::object(), {}};
    const ModelConfig& c = p.config;
    Csv scores({"target", "head", "source", "mean_score", "proportion"});
    Csv tops({"target", "head", "rank", "source", "mean_score", "consistency"});
    nlohmann::json targets = nlohmann::json::array();
    std::size_t n_targets = 0, n_consistent = 0;
    double sum_consistency = 0;

    auto emit = [&](const ComponentId& target, long head, const std::vector<Source>& sources,
                    const std::vector<std::vector<double>>& per_query, std::size_t skipped) {
        const TopSources ts = top_source_heads(per_query, top_k);
        std::vector<AttributionScore> mean_scores;
        for (std::size_t s = 0; s < sources.size(); ++s)
            mean_scores.push_back({sources[s], target, std::nullopt, ts.mean.empty() ? 0.0 : ts.mean[s]});
        const auto prop = positive_proportions(mean_scores);
        nlohmann::json sj = nlohmann::json::array();
        for (std::size_t s = 0; s < sources.size(); ++s) {
            scores.row(target.str(), head, sources[s].str(), mean_scores[s].score, prop[s]);
            sj.push_back({{"source", sources[s].str()}, {"mean_score", mean_scores[s].score}, {"proportion", prop[s]}});
        }
        nlohmann::json tj = nlohmann::json::array();
        for (std::size_t r = 0; r < ts.top.size(); ++r) {
            tops.row(target.str(), head, r + 1, sources[ts.top[r]].str(), ts.mean[ts.top[r]], ts.consistency);
            tj.push_back(sources[ts.top[r]].str());
        }
        if (!per_query.empty()) {
            ++n_targets;
            sum_consistency += ts.consistency;
            n_consistent += ts.consistency == 1.0;
        }
        targets.push_back({{"target", target.str()},
                           {"head", head},
                           {"n_queries", per_query.size()},
                           {"skipped_no_activation", skipped},
                           {"scores", sj},
                           {"top", tj},
                           {"consistency", ts.consistency}});
    };

    for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
        const ComponentId mlp{Site::decoder, l, Kind::mlp};
        std::vector<std::vector<double>> per_query;
        std::size_t skipped = 0;
        for (const Trace<T>& t : traces) {
            const MlpAttribution m = t_mlp(p, t, l);
            if (m.empty()) {
                ++skipped;
                continue;
            }
            std::vector<double> row;
            for (const auto& s : m.scores) row.push_back(s.score);
            per_query.push_back(std::move(row));
        }
        emit(mlp, -1, sources_before(mlp), per_query, skipped);

        const ComponentId cross{Site::decoder, l, Kind::cross_attention};
        std::vector<std::vector<double>> head_mean(traces.size());
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            std::vector<std::vector<double>> pq;
            for (std::size_t q = 0; q < traces.size(); ++q) {
                const CrossAttribution ca = t_crattn(p, traces[q], l, h);
                std::vector<double> row;
                for (const auto& s : ca.scores) row.push_back(s.score);
                if (head_mean[q].empty()) head_mean[q].assign(row.size(), 0.0);
                for (std::size_t s = 0; s < row.size(); ++s) head_mean[q][s] += row[s] / static_cast<double>(c.n_heads);
                pq.push_back(std::move(row));
            }
            emit(cross, static_cast<long>(h), sources_before(cross), pq, 0);
        }
        emit(cross, -1, sources_before(cross), traces.empty() ? std::vector<std::vector<double>>{} : head_mean, 0);
    }
    a.json["targets"] = targets;
    a.json["top_k"] = top_k;
    a.json["summary"] = {{"targets", n_targets},
                         {"mean_consistency", n_targets ? sum_consistency / static_cast<double>(n_targets) : 0.0},
                         {"share_fully_consistent",
                          n_targets ? static_cast<double>(n_consistent) / static_cast<double>(n_targets) : 0.0}};
    a.json["notes"] = {{"head", "-1 marks an MLP target or the head-averaged cross-attention table"},
                       {"proportion", "max(score, 0) / sum of positive scores for the target"}};
    a.csvs.push_back({"attribution_scores.csv", scores.str()});
    a.csvs.push_back({"attribution_top.csv", tops.str()});
    return a;
}

inline Artifact token_stats_artifact(const TokenStats& st, const Vocabulary& v, std::span<const std::size_t> layers) {
    Artifact a{"token_stats", nlohmann::json::object(), {}};
    Csv frac({"k", "docid_fraction", "base_rate", "pairs"});
    nlohmann::json fj = nlohmann::json::array();
    for (std::size_t i = 0; i < st.ks.size(); ++i) {
        frac.row(st.ks[i], st.docid_fraction[i], st.base_rate, st.pairs);
        fj.push_back({{"k", st.ks[i]}, {"docid_fraction", st.docid_fraction[i]}});
    }
    Csv dump({"layer", "head", "rank", "token", "is_docid"});
    nlohmann::json dj = nlohmann::json::array();
    for (const auto& d : st.dumps) {
        nlohmann::json toks = nlohmann::json::array();
        for (std::size_t r = 0; r < d.top.size(); ++r) {
            dump.row(d.layer, d.head, r + 1, v.symbol(d.top[r]), v.is_docid(d.top[r]));
            toks.push_back(v.symbol(d.top[r]));
        }
        dj.push_back({{"layer", d.layer}, {"head", d.head}, {"top5", toks}});
    }
    a.json["layers"] = std::vector<std::size_t>(layers.begin(), layers.end());
    a.json["fractions"] = fj;
    a.json["base_rate"] = st.base_rate;
    a.json["pairs"] = st.pairs;
    a.json["share_below_base_rate_at_first_k"] = st.below_base_share;
    a.json["top5_per_head"] = dj;
    a.csvs.push_back({"token_fraction.csv", frac.str()});
    a.csvs.push_back({"token_top5.csv", dump.str()});
    return a;
}

// ---------------------------------------------------------------- full report

/// Everything the report computes, kept in memory for callers that check thresholds.
template <class T>
struct ReportData {
    std::vector<Example> correct;
    std::vector<Trace<T>> traces;
    std::vector<LayerContribution> profile;
    StagePartition stages;
    PatchGrid grid;
    ReducedEval reduced;
    std::vector<ComponentOnlySummary> component_only;
    TokenStats tokens;
    std::vector<Artifact> artifacts;
};

struct ReportCallbacks {
    std::function<void(std::string_view stage)> on_stage;  // fired before each analysis
};

/// Runs every analysis on already-loaded inputs and returns the artifacts.
template <class T>
ReportData<T> compute_report(const ModelParams<T>& p, std::span<const Example> queries, const ModelParams<T>& donor,
                             const ExperimentManifest& m, const std::string& donor_stand_in,
                             const ReportCallbacks& cb = {}) {
    auto stage = [&](std::string_view s) {
        if (cb.on_stage) cb.on_stage(s);
    };
    const ModelConfig& c = p.config;
    const Vocabulary v(c.n_words, c.n_docids);
    ReportData<T> d;
    const auto pool = select_split(queries, m.analysis_split);
    d.correct = correct_queries(p, std::span<const Example>(pool));
    if (d.correct.empty()) throw ValidationError("report: the model answers no analysis query correctly");
    d.traces.resize(d.correct.size());
    parallel_for(d.correct.size(), m.threads, [&](std::size_t i) {
        d.traces[i] = trace_forward(p, std::span<const TokenId>(d.correct[i].input));
    });
    std::vector<TokenId> golds;
    for (const auto& q : d.correct) golds.push_back(q.target);
    const std::span<const Trace<T>> ts(d.traces);

    stage("contributions");
    d.profile = contribution_profile<T>(ts);
    d.artifacts.push_back(contributions_artifact<T>(d.profile));

    stage("stages");
    d.stages = segment_stages(std::span<const LayerContribution>(d.profile));
    d.artifacts.push_back(stages_artifact(d.stages, cross_stage_cosine<T>(ts, d.stages)));

    stage("patching");
    const MeanStore<T> means = collect_means(p, std::span<const Example>(d.correct));
    d.grid = run_stage_patching(p, d.correct, means, donor, d.stages, donor_stand_in, m.threads);
    const auto eval_q = select_split(queries, m.eval_split);
    d.reduced = run_reduced_model_eval(p, combined_stage_plan(d.stages, c.n_dec_layers), eval_q, &means);
    d.artifacts.push_back(patching_artifact(d.grid, d.reduced));

    stage("lens");
    const LensReport lens = rank_development<T>(p, ts, golds);
    d.component_only = component_only_summary<T>(p, ts, golds);
    d.artifacts.push_back(lens_artifact(lens, d.component_only));

    stage("attribution");
    d.artifacts.push_back(attribution_artifact<T>(p, ts, m.top_k));

    stage("token_stats");
    const auto stage2 = d.stages.layers(1);
    d.tokens = crossattn_token_stats<T>(p, ts, stage2, m.lens_ks);
    d.artifacts.push_back(token_stats_artifact(d.tokens, v, stage2));
    return d;
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + p.string());
    out << s;
    if (!out) throw ValidationError("write failed for " + p.string());
}

}  // namespace detail

struct ReportOutcome {
    std::filesystem::path dir;
    std::vector<std::string> files;
};

/// Loads the manifest inputs, computes every analysis and publishes the bundle with a
/// single rename. Any failure, including inputs changing mid-run, leaves no bundle behind.
template <class T>
ReportOutcome run_full_report_as(const ExperimentManifest& m, const ReportCallbacks& cb = {}) {
    m.check_inputs();
    const std::string ckpt_bytes = read_file_bytes(m.checkpoint);
    const std::uint64_t ckpt_hash = fnv1a(ckpt_bytes);
    std::istringstream ckpt_in(ckpt_bytes);
    const ModelParams<T> p = params_from_bundle<T>(read_bundle(ckpt_in));
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto queries = load_examples(m.queries, v);
    const Corpus corpus = load_corpus(m.corpus, v);
    if (corpus.size() != p.config.n_docids) throw ValidationError("report: corpus size differs from the model's docid count");
    std::string donor_desc;
    ModelParams<T> donor = ModelParams<T>::zeros(p.config);
    if (m.donor) {
        donor = load_params<T>(*m.donor);
        if (!(donor.config == p.config)) throw ValidationError("report: donor config differs from the model");
        donor_desc = "donor checkpoint " + m.donor->filename().string();
    } else {
        donor = ModelParams<T>::init(p.config, derive_seed(m.seed, 0xD0));
        donor_desc = "randomly initialised model of identical shape (stand-in for a pre-trained checkpoint)";
    }

    auto verify_inputs = [&] {
        if (!std::filesystem::is_regular_file(m.checkpoint) || fnv1a(read_file_bytes(m.checkpoint)) != ckpt_hash)
            throw ValidationError("report aborted: checkpoint changed or disappeared during the run");
    };
    ReportCallbacks wrapped;
    wrapped.on_stage = [&](std::string_view s) {
        if (cb.on_stage) cb.on_stage(s);
        verify_inputs();
    };

    const ReportData<T> data = compute_report<T>(p, queries, donor, m, donor_desc, wrapped);

    nlohmann::json meta = {{"schema_version", kReportSchemaVersion},
                           {"genir_version", kGenirVersion},
                           {"seed", m.seed},
                           {"precision", m.wide_precision ? "f64" : "f32"},
                           {"checkpoint_fnv1a64", hex64(ckpt_hash)},
                           {"corpus_fnv1a64", hex64(fnv1a(read_file_bytes(m.corpus)))},
                           {"queries_fnv1a64", hex64(fnv1a(read_file_bytes(m.queries)))},
                           {"model_config", p.config},
                           {"config_fnv1a64", hex64(fnv1a(nlohmann::json(p.config).dump()))},
                           {"analysis_split", split_name(m.analysis_split)},
                           {"eval_split", split_name(m.eval_split)},
                           {"n_correct_queries", data.correct.size()},
                           {"stand_ins",
                            {{"donor", donor_desc},
                             {"scale", "desk-scale synthetic corpus; numbers are not comparable to full-scale runs"}}}};

    const std::filesystem::path out = m.out;
    const std::filesystem::path tmp = out.parent_path() / (out.filename().string() + ".partial");
    std::filesystem::remove_all(tmp);
    std::filesystem::create_directories(tmp);
    ReportOutcome res{out, {}};
    try {
        nlohmann::json bundle = {{"schema_version", kReportSchemaVersion}, {"metadata", "metadata.json"}};
        nlohmann::json arts = nlohmann::json::array();
        for (const Artifact& a : data.artifacts) {
            const std::string jname = a.name + ".json";
            detail::write_text(tmp / jname, a.json.dump(2) + "\n");
            nlohmann::json files = {jname};
            res.files.push_back(jname);
            for (const auto& [name, body] : a.csvs) {
                detail::write_text(tmp / name, body);
                files.push_back(name);
                res.files.push_back(name);
            }
            arts.push_back({{"name", a.name}, {"files", files}});
        }
        bundle["artifacts"] = arts;
        detail::write_text(tmp / "metadata.json", meta.dump(2) + "\n");
        detail::write_text(tmp / "manifest.json", bundle.dump(2) + "\n");
        res.files.push_back("metadata.json");
        res.files.push_back("manifest.json");
        verify_inputs();
        if (std::filesystem::exists(out)) std::filesystem::remove_all(out);
        std::filesystem::rename(tmp, out);
    } catch (...) {
        std::error_code ec;
        std::filesystem::remove_all(tmp, ec);
        throw;
    }
    return res;
}

inline ReportOutcome run_full_report(const ExperimentManifest& m, const ReportCallbacks& cb = {}) {
    return m.wide_precision ? run_full_report_as<double>(m, cb) : run_full_report_as<float>(m, cb);
}

}  // namespace genir
