// genir: command-line driver for corpus generation, training and the analyses.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "genir/corpus/jsonl.hpp"
#include "genir/experiments/report.hpp"
#include "genir/experiments/run_config.hpp"

namespace fs = std::filesystem;
using namespace genir;
using nlohmann::json;

namespace {

struct Global {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    bool wide = false;
    std::size_t threads = 0;
};

struct Inputs {
    std::string model, corpus, queries, split = "validation";
};

RunConfig run_config(const Global& g) {
    RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.seed) c.train.seed = *g.seed;
    if (g.threads) c.train.threads = g.threads;
    c.sync();
    return c;
}

fs::path out_dir(const Global& g) {
    fs::path p = g.out;
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + p.string());
    out << s;
}

void write_artifact(const fs::path& dir, const Artifact& a) {
    write_file(dir / (a.name + ".json"), a.json.dump(2) + "\n");
    for (const auto& [name, body] : a.csvs) write_file(dir / name, body);
}

template <class T>
ModelParams<T> need_model(const std::string& path) {
    if (path.empty()) throw ValidationError("--model is required");
    return load_params<T>(path);
}

Dataset dataset(const RunConfig& c, const Inputs& in, const Vocabulary& v) {
    if (in.corpus.empty() != in.queries.empty())
        throw ValidationError("--corpus and --queries must be given together");
    if (in.corpus.empty()) return make_dataset(c.corpus, c.train.seed);
    return Dataset{load_corpus(in.corpus, v), load_examples(in.queries, v)};
}

std::vector<Example> need_queries(const Inputs& in, const Vocabulary& v) {
    if (in.queries.empty()) throw ValidationError("--queries is required");
    return select_split(load_examples(in.queries, v), parse_split(in.split));
}

std::vector<TokenId> parse_tokens(const std::string& s, const Vocabulary& v) {
    std::vector<TokenId> out;
    std::istringstream ss(s);
    for (std::string w; ss >> w;) out.push_back(v.require(w));
    if (out.empty()) throw ValidationError("empty query");
    return out;
}

// ---------------------------------------------------------------- subcommands

int gen_corpus(const Global& g) {
    const RunConfig c = run_config(g);
    const Dataset d = make_dataset(c.corpus, c.train.seed);
    const fs::path dir = out_dir(g);
    save_corpus(dir / "corpus.jsonl", d.corpus);
    save_examples(dir / "queries.jsonl", d.corpus.vocab, d.queries);
    write_file(dir / "config.json", json(c).dump(2) + "\n");
    std::cout << json{{"documents", d.corpus.size()},
                      {"queries", d.queries.size()},
                      {"nn_baseline_validation", nn_baseline_accuracy(d.corpus, select_split(d.queries, Split::validation))}}
                     .dump()
              << "\n";
    return 0;
}

struct TrainOpts {
    std::string holdout;
    std::optional<std::size_t> holdout_group;
    std::size_t groups = 4, group_size = 5;
};

template <class T>
int train_cmd(const Global& g, const Inputs& in, const TrainOpts& o) {
    const RunConfig c = run_config(g);
    const Vocabulary v(c.corpus.n_words, c.corpus.n_docs);
    Dataset d = dataset(c, in, v);
    std::vector<TokenId> held;
    if (!o.holdout.empty()) {
        std::string s = o.holdout;
        std::replace(s.begin(), s.end(), ',', ' ');
        held = parse_tokens(s, v);
    } else if (o.holdout_group) {
        const auto groups = holdout_groups(d.corpus, c.train.seed, o.groups, o.group_size);
        if (*o.holdout_group >= groups.size()) throw ValidationError("--holdout-group out of range");
        held = groups[*o.holdout_group];
    }
    const HeldOut h = hold_out(d.corpus, d.queries, held);
    const auto val = select_split(h.queries, Split::validation);
    const fs::path dir = out_dir(g);

    std::ofstream loss_csv(dir / "loss.csv");
    loss_csv << "step,loss,val_hits_at_1,val_recall_at_5,val_hits_at_10,val_mrr\n";
    std::vector<LossPoint> pending;
    TrainCallbacks<T> cb;
    cb.on_step = [&](std::size_t step, double loss) { pending.push_back({step, loss}); };
    cb.on_eval = [&](std::size_t step, const ModelParams<T>&, const EvalResult& e) {
        std::cerr << "step " << step << " val hits@1 " << e.hits_at_1 << "\n";
        for (const auto& p : pending) {
            loss_csv << p.step << ',' << fmt_num(p.loss);
            if (p.step == step)
                loss_csv << ',' << fmt_num(e.hits_at_1) << ',' << fmt_num(e.recall_at_5) << ','
                         << fmt_num(e.hits_at_10) << ',' << fmt_num(e.mrr);
            else
                loss_csv << ",,,,";
            loss_csv << '\n';
        }
        pending.clear();
    };
    const auto init = ModelParams<T>::init(c.model, c.train.seed);
    const TrainResult<T> r = train(init, h.corpus, h.queries, c.train, std::span<const Example>(val), cb);
    for (const auto& p : pending) loss_csv << p.step << ',' << fmt_num(p.loss) << ",,,,\n";

    TensorBundle b = params_bundle(r.params);
    json held_sym = json::array();
    for (TokenId t : held) held_sym.push_back(v.symbol(t));
    b.meta["held_out"] = held_sym;
    b.meta["train"] = c.train;
    save_bundle(dir / "model.girw", b);

    json evals = json::array();
    for (const auto& e : r.evals) evals.push_back({{"step", e.step}, {"validation", e.validation}});
    const auto test = select_split(h.queries, Split::test);
    const json summary = {{"config", c},
                          {"held_out", held_sym},
                          {"nn_baseline_validation", nn_baseline_accuracy(h.corpus, val)},
                          {"evals", evals},
                          {"final_validation", evaluate(r.params, std::span<const Example>(val))},
                          {"final_test", evaluate(r.params, std::span<const Example>(test))}};
    write_file(dir / "train.json", summary.dump(2) + "\n");
    std::cout << json{{"final_validation_hits_at_1", summary["final_validation"]["hits_at_1"]}}.dump() << "\n";
    return 0;
}

template <class T>
int eval_cmd(const Global& g, const Inputs& in) {
    const auto p = need_model<T>(in.model);
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto qs = need_queries(in, v);
    const json j = evaluate(p, std::span<const Example>(qs));
    write_file(out_dir(g) / "eval.json", j.dump(2) + "\n");
    std::cout << json{{"queries", qs.size()}, {"hits_at_1", j["hits_at_1"]}, {"mrr", j["mrr"]}}.dump() << "\n";
    return 0;
}

template <class T>
json vec_json(const std::vector<T>& v) {
    json a = json::array();
    for (T x : v) a.push_back(num_json(static_cast<double>(x)));
    return a;
}

template <class T>
int trace_cmd(const Global& g, const Inputs& in, const std::string& query) {
    const auto p = need_model<T>(in.model);
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto tokens = parse_tokens(query, v);
    const Trace<T> t = trace_forward(p, std::span<const TokenId>(tokens));
    json layers = json::array();
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        const auto& L = t.layers[l];
        layers.push_back({{"layer", l},
                          {"r_begin", vec_json(L.r_begin)},
                          {"self_attention", vec_json(L.self_out)},
                          {"cross_attention", vec_json(L.cross_out)},
                          {"mlp", vec_json(L.mlp_out)},
                          {"r_end", vec_json(L.r_end)}});
    }
    const auto top = top_tokens<T>(t.logits, 10);
    json tj = json::array();
    for (TokenId id : top) tj.push_back(v.symbol(id));
    const json j = {{"tokens", detail::tokens_json(v, tokens)}, {"r0", vec_json(t.r0)}, {"layers", layers}, {"top10", tj}};
    write_file(out_dir(g) / "trace.json", j.dump(2) + "\n");
    std::cout << json{{"top1", tj[0]}}.dump() << "\n";
    return 0;
}

template <class T>
int means_cmd(const Global& g, const Inputs& in, bool all) {
    const auto p = need_model<T>(in.model);
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    auto qs = need_queries(in, v);
    if (!all) qs = correct_queries(p, std::span<const Example>(qs));
    save_bundle(out_dir(g) / "means.girw", means_bundle(collect_means(p, std::span<const Example>(qs))));
    std::cout << json{{"queries", qs.size()}}.dump() << "\n";
    return 0;
}

template <class T>
StagePartition stages_for(const ModelParams<T>& p, std::span<const Example> correct) {
    std::vector<Trace<T>> ts;
    for (const Example& e : correct) ts.push_back(trace_forward(p, std::span<const TokenId>(e.input)));
    return segment_stages(std::span<const LayerContribution>(contribution_profile<T>(std::span<const Trace<T>>(ts))));
}

struct PatchOpts {
    std::string plan, means, donor;
    bool grid = false;
};

template <class T>
int patch_cmd(const Global& g, const Inputs& in, const PatchOpts& o) {
    const auto p = need_model<T>(in.model);
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto qs = need_queries(in, v);
    const auto correct = correct_queries(p, std::span<const Example>(qs));
    if (correct.empty()) throw ValidationError("the model answers none of the selected queries correctly");
    const MeanStore<T> means =
        o.means.empty() ? collect_means(p, std::span<const Example>(correct)) : means_from_bundle<T>(load_bundle(o.means));
    std::string donor_desc = "donor checkpoint";
    const ModelParams<T> donor = [&] {
        if (!o.donor.empty()) return load_params<T>(o.donor);
        donor_desc = "randomly initialised model of identical shape (stand-in for a pre-trained checkpoint)";
        return ModelParams<T>::init(p.config, derive_seed(run_config(g).train.seed, 0xD0));
    }();
    const fs::path dir = out_dir(g);
    if (o.grid) {
        const StagePartition sp = stages_for(p, std::span<const Example>(correct));
        const PatchGrid grid = run_stage_patching(p, correct, means, donor, sp, donor_desc, g.threads);
        const auto test = select_split(load_examples(in.queries, v), Split::test);
        const ReducedEval red = run_reduced_model_eval(p, combined_stage_plan(sp, p.config.n_dec_layers), test, &means);
        write_artifact(dir, patching_artifact(grid, red));
        std::cout << json{{"stages", sp}, {"relative_hits_at_1", red.rel_hits_at_1}}.dump() << "\n";
        return 0;
    }
    if (o.plan.empty()) throw ValidationError("patch needs --plan or --grid");
    const PatchPlan plan = load_plan(o.plan);
    const PatchMetric m = patch_metric(p, correct, plan, &means, &donor);
    const json j = {{"plan", plan},
                    {"n_correct", correct.size()},
                    {"metric", m},
                    {"patched_eval", evaluate_patched(p, std::span<const Example>(qs), plan, &means, &donor)},
                    {"donor", donor_desc}};
    write_file(dir / "patch.json", j.dump(2) + "\n");
    std::cout << json{{"fraction_displaced", m.fraction_displaced}}.dump() << "\n";
    return 0;
}

template <class T>
std::vector<Trace<T>> correct_traces(const ModelParams<T>& p, const Inputs& in, std::vector<TokenId>& golds) {
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto qs = need_queries(in, v);
    std::vector<Trace<T>> ts;
    for (const Example& e : correct_queries(p, std::span<const Example>(qs))) {
        ts.push_back(trace_forward(p, std::span<const TokenId>(e.input)));
        golds.push_back(e.target);
    }
    if (ts.empty()) throw ValidationError("the model answers none of the selected queries correctly");
    return ts;
}

template <class T>
int lens_cmd(const Global& g, const Inputs& in, const std::vector<std::size_t>& ks) {
    const auto p = need_model<T>(in.model);
    std::vector<TokenId> golds;
    const auto ts = correct_traces(p, in, golds);
    const std::span<const Trace<T>> span(ts);
    const fs::path dir = out_dir(g);
    write_artifact(dir, lens_artifact(rank_development<T>(p, span, golds), component_only_summary<T>(p, span, golds)));
    const StagePartition sp = segment_stages(std::span<const LayerContribution>(contribution_profile<T>(span)));
    const Vocabulary v(p.config.n_words, p.config.n_docids);
    const auto stage2 = sp.layers(1);
    write_artifact(dir, token_stats_artifact(crossattn_token_stats<T>(p, span, stage2, ks), v, stage2));
    std::cout << json{{"queries", ts.size()}}.dump() << "\n";
    return 0;
}

template <class T>
int contrib_cmd(const Global& g, const Inputs& in, std::size_t top_k) {
    const auto p = need_model<T>(in.model);
    std::vector<TokenId> golds;
    const auto ts = correct_traces(p, in, golds);
    const std::span<const Trace<T>> span(ts);
    const auto prof = contribution_profile<T>(span);
    const StagePartition sp = segment_stages(std::span<const LayerContribution>(prof));
    const fs::path dir = out_dir(g);
    write_artifact(dir, contributions_artifact<T>(prof));
    write_artifact(dir, stages_artifact(sp, cross_stage_cosine<T>(span, sp)));
    write_artifact(dir, attribution_artifact<T>(p, span, top_k));
    std::cout << json{{"stages", sp}}.dump() << "\n";
    return 0;
}

template <class T>
int swap_cmd(const Global& g, const Inputs& in, const std::vector<std::string>& reduced_paths) {
    const auto full = need_model<T>(in.model);
    const Vocabulary v(full.config.n_words, full.config.n_docids);
    if (in.queries.empty()) throw ValidationError("--queries is required");
    const auto qs = load_examples(in.queries, v);
    if (reduced_paths.empty()) throw ValidationError("swap needs at least one --reduced model");
    std::vector<ReducedModel<T>> reduced;
    for (const auto& path : reduced_paths) {
        const TensorBundle b = load_bundle(path);
        ReducedModel<T> r{params_from_bundle<T>(b), {}};
        for (const auto& s : b.meta.value("held_out", json::array())) r.held_out.push_back(v.require(s.get<std::string>()));
        if (r.held_out.empty()) throw ValidationError(path + " records no held-out documents");
        reduced.push_back(std::move(r));
    }
    const SwapReport rep = run_encoder_swap(full, std::span<const ReducedModel<T>>(reduced), qs, run_config(g).train.seed);
    Csv csv({"model", "held_out", "docs_at_rank_1", "hybrid_hits_at_1", "hybrid_mrr", "full_hits_at_1", "full_mrr",
             "reduced_hits_at_1", "reduced_mrr"});
    json hj = json::array();
    for (std::size_t i = 0; i < rep.hybrids.size(); ++i) {
        const HybridResult& h = rep.hybrids[i];
        csv.row(i, h.held_out.size(), h.docs_at_rank1, h.hybrid.hits_at_1, h.hybrid.mrr, h.full.hits_at_1, h.full.mrr,
                h.reduced.hits_at_1, h.reduced.mrr);
        json held = json::array();
        for (TokenId t : h.held_out) held.push_back(v.symbol(t));
        hj.push_back({{"model", reduced_paths[i]},
                      {"held_out", held},
                      {"docs_at_rank_1", h.docs_at_rank1},
                      {"hybrid", h.hybrid},
                      {"full", h.full},
                      {"reduced", h.reduced}});
    }
    csv.row("random_encoder", std::size_t{0}, std::size_t{0}, rep.random_encoder.hits_at_1, rep.random_encoder.mrr,
            rep.self_swap.hits_at_1, rep.self_swap.mrr, 0.0, 0.0);
    const fs::path dir = out_dir(g);
    write_file(dir / "swap.csv", csv.str());
    write_file(dir / "swap.json", json{{"schema_version", kReportSchemaVersion},
                                       {"hybrids", hj},
                                       {"random_encoder", rep.random_encoder},
                                       {"self_swap", rep.self_swap},
                                       {"stand_in", rep.stand_in}}
                                          .dump(2) +
                                      "\n");
    std::cout << json{{"hybrids", rep.hybrids.size()}}.dump() << "\n";
    return 0;
}

int report_cmd(const Global& g, const std::string& manifest, bool wide_set, bool seed_set) {
    ExperimentManifest m = load_manifest(manifest);
    if (wide_set) m.wide_precision = true;
    if (seed_set) m.seed = *g.seed;
    if (g.threads) m.threads = g.threads;
    const ReportOutcome r = run_full_report(m);
    std::cout << json{{"out", r.dir.string()}, {"files", r.files.size()}}.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"genir: generative retrieval models and their mechanistic analyses"};
    app.require_subcommand(1);
    Global g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Seed for corpus, initialisation and stand-ins");
    app.add_option("--config", g.config, "Run config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--out", g.out, "Output directory");
    app.add_flag("--wide-precision", g.wide, "Compute in double precision");
    app.add_option("--threads", g.threads, "Worker threads (0: all cores)");

    Inputs in;
    auto inputs = [&](CLI::App* s, bool model, bool split) {
        if (model) s->add_option("--model", in.model, "Model weights (GIRW)");
        s->add_option("--corpus", in.corpus, "Corpus JSONL");
        s->add_option("--queries", in.queries, "Queries JSONL");
        if (split) s->add_option("--split", in.split, "Query split: train, validation or test");
    };

    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus and its queries");

    TrainOpts to;
    auto* tr = app.add_subcommand("train", "Train a model");
    inputs(tr, false, false);
    tr->add_option("--holdout", to.holdout, "Comma-separated document ids left out of training");
    tr->add_option("--holdout-group", to.holdout_group, "Leave out group i of the seeded hold-out partition");
    tr->add_option("--groups", to.groups, "Number of hold-out groups");
    tr->add_option("--group-size", to.group_size, "Documents per hold-out group");

    auto* ev = app.add_subcommand("eval", "Retrieval metrics");
    inputs(ev, true, true);
    ev->get_option("--split")->default_str("test");

    std::string query;
    auto* trc = app.add_subcommand("trace", "Per-layer residual trace of one query");
    trc->add_option("--model", in.model, "Model weights (GIRW)");
    trc->add_option("--query", query, "Space-separated word symbols, e.g. \"w003 w017\"")->required();

    bool all_queries = false;
    auto* mn = app.add_subcommand("means", "Mean activation store");
    inputs(mn, true, true);
    mn->add_flag("--all", all_queries, "Average over all queries, not only correct ones");

    PatchOpts po;
    auto* pt = app.add_subcommand("patch", "Apply a patch plan, or sweep the stage grid");
    inputs(pt, true, true);
    pt->add_option("--plan", po.plan, "Patch plan (JSON)");
    pt->add_option("--means", po.means, "Mean store (GIRW); default: computed from correct queries");
    pt->add_option("--donor", po.donor, "Donor model (GIRW); default: random-init stand-in");
    pt->add_flag("--grid", po.grid, "Zero/mean/donor grid over kinds and stages plus the combined plan");

    std::vector<std::size_t> ks{10, 100, 1000};
    auto* ln = app.add_subcommand("lens", "Rank development, component-only logits and token statistics");
    inputs(ln, true, true);
    ln->add_option("--k", ks, "Top-K cut-offs for token statistics");

    std::size_t top_k = 5;
    auto* ct = app.add_subcommand("contrib", "Contribution profile, stages and attribution");
    inputs(ct, true, true);
    ct->add_option("--top-k", top_k, "Sources kept per attribution target");

    std::vector<std::string> reduced;
    auto* sw = app.add_subcommand("swap", "Encoder swap between a full and reduced models");
    inputs(sw, true, false);
    sw->add_option("--reduced", reduced, "Reduced models trained with held-out documents")->required();

    std::string manifest;
    auto* rp = app.add_subcommand("report", "Full analysis bundle from an experiment manifest");
    rp->add_option("manifest", manifest, "Experiment manifest (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (*seed_opt) g.seed = seed;
    if (ev->parsed() && ev->get_option("--split")->count() == 0) in.split = "test";

    try {
        auto dispatch = [&]<class T>() -> int {
            if (gen->parsed()) return gen_corpus(g);
            if (tr->parsed()) return train_cmd<T>(g, in, to);
            if (ev->parsed()) return eval_cmd<T>(g, in);
            if (trc->parsed()) return trace_cmd<T>(g, in, query);
            if (mn->parsed()) return means_cmd<T>(g, in, all_queries);
            if (pt->parsed()) return patch_cmd<T>(g, in, po);
            if (ln->parsed()) return lens_cmd<T>(g, in, ks);
            if (ct->parsed()) return contrib_cmd<T>(g, in, top_k);
            if (sw->parsed()) return swap_cmd<T>(g, in, reduced);
            return report_cmd(g, manifest, g.wide, static_cast<bool>(g.seed));
        };
        return g.wide ? dispatch.operator()<double>() : dispatch.operator()<float>();
    } catch (const DivergenceError& e) {
        std::cerr << "genir: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "genir: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "genir: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "genir: " << e.what() << "\n";
        return 2;
    }
}
