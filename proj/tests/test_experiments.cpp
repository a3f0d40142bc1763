#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "genir/corpus/jsonl.hpp"
#include "genir/experiments/report.hpp"
#include "genir/experiments/run_config.hpp"

using namespace genir;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(std::size_t words, std::size_t docs) {
    ModelConfig c;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 3;
    c.n_words = words;
    c.n_docids = docs;
    return c;
}

struct Fixture {
    Corpus corpus;
    std::vector<Example> queries;
    ModelParams<float> model;
};

// A few hundred steps on four documents: enough for the model to answer most queries.
const Fixture& trained() {
    static const Fixture f = [] {
        Corpus c = generate_corpus(11, 4, 40);
        auto qs = make_queries(c, 11, 10);
        TrainConfig tc;
        tc.steps = 300;
        tc.batch_size = 8;
        tc.ratio = 1;
        tc.eval_every = 0;
        tc.dropout = 0;
        tc.token_dropout = 0;
        tc.learning_rate = 3e-3;
        auto p = ModelParams<float>::init(small_model(40, 4), 11);
        return Fixture{c, qs, train(p, c, qs, tc).params};
    }();
    return f;
}

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() / ("genir_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

ExperimentManifest write_inputs(const fs::path& dir) {
    const Fixture& f = trained();
    save_params(dir / "model.girw", f.model);
    save_corpus(dir / "corpus.jsonl", f.corpus);
    save_examples(dir / "queries.jsonl", f.corpus.vocab, f.queries);
    const nlohmann::json j = {{"schema_version", 1},      {"kind", "report"},
                              {"checkpoint", "model.girw"}, {"corpus", "corpus.jsonl"},
                              {"queries", "queries.jsonl"}, {"out", "bundle"},
                              {"seed", 3},                  {"analysis_split", "train"},
                              {"eval_split", "train"},      {"threads", 2}};
    std::ofstream(dir / "manifest.json") << j.dump();
    return load_manifest(dir / "manifest.json");
}

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

}  // namespace

TEST(DropTokens, KeepsAtLeastOneAndIsSeeded) {
    std::vector<TokenId> a{2, 3, 4, 5, 6, 7, 8, 9}, b = a, c = a;
    drop_tokens(a, 0.5, 42);
    drop_tokens(b, 0.5, 42);
    EXPECT_EQ(a, b);
    EXPECT_LT(a.size(), 8u);
    for (std::uint64_t s = 0; s < 50; ++s) {
        std::vector<TokenId> t{5, 6};
        drop_tokens(t, 0.99, s);
        ASSERT_EQ(t.size(), 1u);
        EXPECT_TRUE(t[0] == 5 || t[0] == 6);
    }
    drop_tokens(c, 0.0, 1);
    EXPECT_EQ(c.size(), 8u);
}

TEST(DropTokens, RateIsValidated) {
    TrainConfig tc;
    tc.token_dropout = 1.0;
    EXPECT_THROW(tc.validate(), ValidationError);
}

TEST(HoldOut, RemovesDocumentsAndTheirQueries) {
    const Corpus c = generate_corpus(3, 10, 60);
    const auto qs = make_queries(c, 3, 5);
    const std::vector<TokenId> gone{c.docs[2].doc_id, c.docs[7].doc_id};
    const HeldOut h = hold_out(c, qs, gone);
    EXPECT_EQ(h.corpus.size(), 8u);
    EXPECT_EQ(h.corpus.vocab, c.vocab);
    for (const auto& e : h.queries) EXPECT_TRUE(e.target != gone[0] && e.target != gone[1]);
    EXPECT_EQ(h.queries.size(), qs.size() - 10);
    const std::vector<TokenId> unknown{c.vocab.word(0)};
    EXPECT_THROW(hold_out(c, qs, unknown), ValidationError);
}

TEST(HoldOut, RemainingDocumentsStillBuildATrainingStream) {
    const Corpus c = generate_corpus(3, 10, 60);
    const auto qs = make_queries(c, 3, 5);
    const std::vector<TokenId> gone{c.docs[0].doc_id, c.docs[4].doc_id};
    const HeldOut h = hold_out(c, qs, gone);
    const ExampleSet set = build_examples(h.corpus, h.queries, 4, 1);
    EXPECT_EQ(set.indexing_examples.size(), 8u);
    EXPECT_THROW(build_examples(h.corpus, qs, 4, 1), ValidationError);
}

TEST(HoldOut, GroupsAreDisjointSortedAndSeeded) {
    const Corpus c = generate_corpus(3, 30, 80);
    const auto g = holdout_groups(c, 7, 4, 5);
    ASSERT_EQ(g.size(), 4u);
    std::set<TokenId> all;
    for (const auto& grp : g) {
        EXPECT_EQ(grp.size(), 5u);
        EXPECT_TRUE(std::is_sorted(grp.begin(), grp.end()));
        all.insert(grp.begin(), grp.end());
    }
    EXPECT_EQ(all.size(), 20u);
    EXPECT_EQ(holdout_groups(c, 7, 4, 5), g);
    EXPECT_NE(holdout_groups(c, 8, 4, 5), g);
    EXPECT_THROW(holdout_groups(c, 7, 6, 5), ValidationError);
}

TEST(RunConfig, JsonRoundTripKeepsVocabularyInSync) {
    RunConfig c;
    c.corpus.n_docs = 12;
    c.corpus.n_words = 50;
    c.train.token_dropout = 0.25;
    c.sync();
    const RunConfig back = nlohmann::json(c).get<RunConfig>();
    EXPECT_EQ(back.model.n_docids, 12u);
    EXPECT_EQ(back.model.n_words, 50u);
    EXPECT_EQ(back.train.token_dropout, 0.25);
    EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
    const RunConfig d = nlohmann::json::parse(R"({"corpus": {"n_docs": 20}})").get<RunConfig>();
    EXPECT_EQ(d.model.n_docids, 20u);
}

TEST(StagePatching, SelfDonorDisplacesNothing) {
    const Fixture& f = trained();
    const auto correct = correct_queries(f.model, std::span<const Example>(f.queries));
    ASSERT_FALSE(correct.empty());
    const auto means = collect_means(f.model, std::span<const Example>(correct));
    const auto sp = StagePartition::from_bounds(1, 2, 3);
    const PatchGrid g = run_stage_patching(f.model, correct, means, f.model, sp, "self", 2);
    for (Kind k : kAllKinds)
        for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(g.at(PatchMode::donor, k, s), 0.0);
    EXPECT_EQ(g.n_correct, correct.size());
}

TEST(StagePatching, GridIsIndependentOfThreadCount) {
    const Fixture& f = trained();
    const auto correct = correct_queries(f.model, std::span<const Example>(f.queries));
    const auto means = collect_means(f.model, std::span<const Example>(correct));
    const auto donor = ModelParams<float>::init(f.model.config, 99);
    const auto sp = StagePartition::from_bounds(1, 2, 3);
    const PatchGrid a = run_stage_patching(f.model, correct, means, donor, sp, "", 1);
    const PatchGrid b = run_stage_patching(f.model, correct, means, donor, sp, "", 3);
    EXPECT_EQ(a.displaced, b.displaced);
}

TEST(ReducedModelEval, EmptyPlanIsFullyRetained) {
    const Fixture& f = trained();
    const ReducedEval r = run_reduced_model_eval(f.model, PatchPlan{}, std::span<const Example>(f.queries), nullptr);
    EXPECT_EQ(r.rel_hits_at_1, 1.0);
    EXPECT_EQ(r.rel_recall_at_5, 1.0);
    EXPECT_EQ(r.rel_hits_at_10, 1.0);
    EXPECT_EQ(r.patched_components, 0u);
    EXPECT_EQ(r.total_components, 9u);
}

TEST(EncoderSwap, SelfSwapMatchesFullModel) {
    const Fixture& f = trained();
    const std::vector<ReducedModel<float>> reduced{{f.model, {f.corpus.docs[0].doc_id, f.corpus.docs[1].doc_id}}};
    const SwapReport rep = run_encoder_swap(f.model, std::span<const ReducedModel<float>>(reduced),
                                            std::span<const Example>(f.queries), 5);
    ASSERT_EQ(rep.hybrids.size(), 1u);
    EXPECT_EQ(rep.hybrids[0].hybrid.ranks, rep.hybrids[0].full.ranks);
    EXPECT_EQ(rep.hybrids[0].reduced.ranks, rep.hybrids[0].full.ranks);
    EXPECT_EQ(rep.self_swap.ranks, rep.hybrids[0].full.ranks);
    EXPECT_FALSE(rep.stand_in.empty());
}

TEST(EncoderSwap, ConfigMismatchIsRejected) {
    const Fixture& f = trained();
    ModelConfig other = f.model.config;
    other.d_ff = 64;
    const std::vector<ReducedModel<float>> reduced{{ModelParams<float>::init(other, 1), {f.corpus.docs[0].doc_id}}};
    EXPECT_THROW(run_encoder_swap(f.model, std::span<const ReducedModel<float>>(reduced),
                                  std::span<const Example>(f.queries), 5),
                 ValidationError);
}

TEST(ReportFormat, CsvAndHashes) {
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
    Csv c({"x", "y"});
    c.row(3, 0.1);
    c.row("n", std::numeric_limits<double>::quiet_NaN());
    EXPECT_EQ(c.str(), "schema_version,x,y\n1,3,0.1\n1,n,nan\n");
    EXPECT_THROW(c.row(1), std::logic_error);
}

TEST(Manifest, PathsResolveAgainstManifestDirectory) {
    TempDir t;
    const auto m = write_inputs(t.path());
    EXPECT_EQ(m.checkpoint, t.path() / "model.girw");
    EXPECT_EQ(m.out, t.path() / "bundle");
    EXPECT_NO_THROW(m.check_inputs());
    auto missing = m;
    missing.corpus = t.path() / "nope.jsonl";
    EXPECT_THROW(missing.check_inputs(), ValidationError);
    EXPECT_THROW(ExperimentManifest::from_json({{"kind", "report"}}, t.path()), ValidationError);
    EXPECT_THROW(ExperimentManifest::from_json({{"kind", "train"}, {"checkpoint", "a"}}, t.path()), ValidationError);
}

TEST(FullReport, BundleListsSixArtifactsAndMetadata) {
    TempDir t;
    const auto m = write_inputs(t.path());
    const ReportOutcome r = run_full_report(m);
    const auto bundle = nlohmann::json::parse(slurp(m.out / "manifest.json"));
    ASSERT_EQ(bundle["artifacts"].size(), 6u);
    std::set<std::string> names;
    for (const auto& a : bundle["artifacts"]) {
        names.insert(a["name"].get<std::string>());
        for (const auto& file : a["files"]) EXPECT_TRUE(fs::exists(m.out / file.get<std::string>())) << file;
    }
    EXPECT_EQ(names, (std::set<std::string>{"contributions", "stages", "patching", "lens", "attribution", "token_stats"}));
    EXPECT_EQ(bundle["metadata"], "metadata.json");
    const auto meta = nlohmann::json::parse(slurp(m.out / "metadata.json"));
    EXPECT_EQ(meta["seed"], 3);
    EXPECT_EQ(meta["checkpoint_fnv1a64"], hex64(fnv1a(slurp(m.checkpoint))));
    EXPECT_TRUE(meta["stand_ins"].contains("donor"));
    for (const auto& f : r.files)
        if (f.ends_with(".csv")) EXPECT_EQ(slurp(m.out / f).rfind("schema_version,", 0), 0u) << f;
    EXPECT_FALSE(fs::exists(t.path() / "bundle.partial"));
}

TEST(FullReport, RerunIsByteIdenticalAndNeedsOverwrite) {
    TempDir t;
    auto m = write_inputs(t.path());
    const ReportOutcome first = run_full_report(m);
    std::map<std::string, std::string> before;
    for (const auto& f : first.files) before[f] = slurp(m.out / f);
    EXPECT_THROW(run_full_report(m), ValidationError);
    m.overwrite = true;
    m.threads = 1;
    const ReportOutcome second = run_full_report(m);
    ASSERT_EQ(second.files, first.files);
    for (const auto& f : second.files) EXPECT_EQ(slurp(m.out / f), before[f]) << f;
}

TEST(FullReport, DeletedCheckpointAbortsWithoutBundle) {
    TempDir t;
    const auto m = write_inputs(t.path());
    ReportCallbacks cb;
    cb.on_stage = [&](std::string_view stage) {
        if (stage == "lens") fs::remove(m.checkpoint);
    };
    EXPECT_THROW(run_full_report(m, cb), ValidationError);
    EXPECT_FALSE(fs::exists(m.out));
    EXPECT_FALSE(fs::exists(t.path() / "bundle.partial"));
}

TEST(FullReport, WidePrecisionRuns) {
    TempDir t;
    auto m = write_inputs(t.path());
    m.wide_precision = true;
    run_full_report(m);
    EXPECT_EQ(nlohmann::json::parse(slurp(m.out / "metadata.json"))["precision"], "f64");
}
