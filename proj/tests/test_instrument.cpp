#include <gtest/gtest.h>

#include <sstream>

#include "genir/instrument/patching.hpp"

using namespace genir;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 4;
    c.n_enc_layers = 2;
    c.n_dec_layers = 6;
    c.n_words = 20;
    c.n_docids = 10;
    return c;
}

Example q(std::vector<TokenId> t, TokenId target = 2 + 20) { return {ExampleKind::retrieve, std::move(t), target, Split::train}; }

PatchPlan all_decoder(PatchMode m) {
    PatchPlan p;
    for (Kind k : kAllKinds) p.entries.push_back({Site::decoder, {0, 1, 2, 3, 4, 5}, k, m, {}});
    return p;
}

}  // namespace

TEST(PatchPlan, JsonRoundTripAndValidation) {
    const auto j = nlohmann::json::parse(R"([{"site":"decoder","layers":[0,1],"kind":"mlp","mode":"mean"},
                                             {"site":"encoder","layers":[1],"kind":"self_attention","mode":"zero"}])");
    const auto plan = j.get<PatchPlan>();
    ASSERT_EQ(plan.entries.size(), 2u);
    EXPECT_EQ(nlohmann::json(plan), j);
    EXPECT_EQ(plan.component_count(small_config()), 3u);

    PatchPlan dup;
    dup.entries.push_back({Site::decoder, {1}, Kind::mlp, PatchMode::zero, {}});
    dup.entries.push_back({Site::decoder, {1}, Kind::mlp, PatchMode::mean, {}});
    EXPECT_THROW(dup.resolve(small_config()), ValidationError);
    PatchPlan bad_layer;
    bad_layer.entries.push_back({Site::decoder, {6}, Kind::mlp, PatchMode::zero, {}});
    EXPECT_THROW(bad_layer.resolve(small_config()), ValidationError);
    PatchPlan enc_cross;
    enc_cross.entries.push_back({Site::encoder, {0}, Kind::cross_attention, PatchMode::zero, {}});
    EXPECT_THROW(enc_cross.resolve(small_config()), ValidationError);
    EXPECT_THROW(nlohmann::json::parse(R"([{"site":"decoder","layers":[0],"kind":"mlp","mode":"blend"}])").get<PatchPlan>(),
                 ValidationError);
}

TEST(CollectMeans, SingleAndPairAverages) {
    const auto p = ModelParams<double>::init(small_config(), 1);
    const auto a = q({3, 4, 5}), b = q({6, 7});
    const auto one = collect_means(p, std::span<const Example>(&a, 1));
    RecordingHooks<double> ra, rb;
    forward(p, a.input, &ra);
    forward(p, b.input, &rb);
    for (const auto& [id, out] : ra.outputs) EXPECT_EQ(one.at(id).mean, out) << id.str();

    const std::vector<Example> both{a, b};
    const auto two = collect_means(p, both);
    const ComponentId dec{Site::decoder, 2, Kind::mlp};
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_NEAR(two.at(dec).mean[i], 0.5 * (ra.outputs[dec][i] + rb.outputs[dec][i]), 1e-12);
    }
    const ComponentId enc{Site::encoder, 1, Kind::mlp};
    EXPECT_EQ(two.at(enc).mean.rows(), 3u);
    EXPECT_EQ(two.at(enc).counts, (std::vector<std::size_t>{2, 2, 1}));
    EXPECT_NEAR(two.at(enc).mean(2, 5), ra.outputs[enc](2, 5), 1e-12);
    EXPECT_THROW(collect_means(p, std::span<const Example>()), ValidationError);
}

TEST(CollectMeans, BundleRoundTrip) {
    const auto p = ModelParams<float>::init(small_config(), 1);
    const std::vector<Example> qs{q({3, 4, 5}), q({6, 7})};
    const auto m = collect_means(p, qs);
    std::stringstream ss;
    write_bundle(ss, means_bundle(m));
    const auto back = means_from_bundle<float>(read_bundle(ss));
    ASSERT_EQ(back.entries.size(), m.entries.size());
    for (const auto& [id, e] : m.entries) {
        EXPECT_EQ(back.at(id).mean, e.mean);
        EXPECT_EQ(back.at(id).counts, e.counts);
    }
}

TEST(PatchedDecode, IdentityPlansReproduceCleanLogits) {
    const auto p = ModelParams<float>::init(small_config(), 2);
    const auto x = q({3, 9, 11, 4});
    const auto clean = forward(p, x.input);
    EXPECT_EQ(patched_decode(p, x.input, PatchPlan{}).logits, clean);

    PatchPlan mean_all = all_decoder(PatchMode::mean);
    mean_all.entries.push_back({Site::encoder, {0, 1}, Kind::self_attention, PatchMode::mean, {}});
    mean_all.entries.push_back({Site::encoder, {0, 1}, Kind::mlp, PatchMode::mean, {}});
    const auto self_mean = collect_means(p, std::span<const Example>(&x, 1));
    EXPECT_EQ(patched_decode(p, x.input, mean_all, &self_mean).logits, clean);

    PatchPlan donor_all = all_decoder(PatchMode::donor);
    donor_all.entries.push_back({Site::encoder, {0, 1}, Kind::mlp, PatchMode::donor, {}});
    EXPECT_EQ(patched_decode(p, x.input, donor_all, nullptr, &p).logits, clean);
}

TEST(PatchedDecode, FullZeroAblationLeavesEmbeddingResidual) {
    const auto p = ModelParams<double>::init(small_config(), 3);
    const auto t = patched_decode(p, std::vector<TokenId>{3, 5}, all_decoder(PatchMode::zero));
    EXPECT_EQ(t.final_residual, t.r0);
    EXPECT_EQ(t.logits, unembed<double>(p, t.r0));
}

TEST(PatchedDecode, UpstreamValuesUntouched) {
    const auto p = ModelParams<double>::init(small_config(), 4);
    const std::vector<TokenId> x{3, 5, 8};
    const auto clean = trace_forward(p, std::span<const TokenId>(x));
    PatchPlan plan;
    plan.entries.push_back({Site::decoder, {3}, Kind::cross_attention, PatchMode::zero, {}});
    const auto t = patched_decode(p, x, plan);
    EXPECT_EQ(t.encoder_out, clean.encoder_out);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(t.layers[l].r_end, clean.layers[l].r_end);
    EXPECT_EQ(t.layers[3].self_out, clean.layers[3].self_out);
    EXPECT_NE(t.layers[3].r_end, clean.layers[3].r_end);
}

TEST(PatchedDecode, CustomVectorIsWritten) {
    const auto p = ModelParams<double>::init(small_config(), 5);
    PatchPlan plan;
    std::vector<double> v(16, 0.25);
    plan.entries.push_back({Site::decoder, {1}, Kind::mlp, PatchMode::custom, v});
    const auto t = patched_decode(p, std::vector<TokenId>{3, 4}, plan);
    EXPECT_EQ(t.layers[1].mlp_out, v);
    plan.entries[0].value.pop_back();
    EXPECT_THROW(patched_decode(p, std::vector<TokenId>{3, 4}, plan), ValidationError);
}

TEST(PatchedDecode, MissingReferencesAreRejected) {
    const auto p = ModelParams<double>::init(small_config(), 5);
    EXPECT_THROW(patched_decode(p, std::vector<TokenId>{3}, all_decoder(PatchMode::mean)), ValidationError);
    EXPECT_THROW(patched_decode(p, std::vector<TokenId>{3}, all_decoder(PatchMode::donor)), ValidationError);
    ModelConfig other = small_config();
    other.d_ff = 8;
    const auto d = ModelParams<double>::init(other, 1);
    EXPECT_THROW(patched_decode(p, std::vector<TokenId>{3}, all_decoder(PatchMode::donor), nullptr, &d), ValidationError);
}

TEST(PatchMetric, EmptyPlanDisplacesNothing) {
    const auto p = ModelParams<double>::init(small_config(), 6);
    const Vocabulary v(20, 10);
    std::vector<Example> correct;
    for (TokenId a = 2; a < 12; ++a) {
        const std::vector<TokenId> in{a, TokenId(a + 5)};
        const auto l = forward(p, std::span<const TokenId>(in));
        correct.push_back(q(in, rank_documents<double>(l, v).front()));
    }
    const auto m = patch_metric(p, correct, PatchPlan{});
    EXPECT_DOUBLE_EQ(m.fraction_displaced, 0.0);
    EXPECT_EQ(m.histogram.at(1), correct.size());
}

TEST(CombinedStagePlan, SizeForTwoTwoTwo) {
    const auto sp = StagePartition::from_bounds(2, 4, 6);
    const auto plan = combined_stage_plan(sp, 6);
    const auto r = plan.resolve(small_config());
    EXPECT_EQ(r.size(), 12u);
    EXPECT_EQ(r.at({Site::decoder, 0, Kind::cross_attention}).mode, PatchMode::zero);
    EXPECT_EQ(r.count({Site::decoder, 2, Kind::cross_attention}), 0u);
    EXPECT_EQ(r.at({Site::decoder, 3, Kind::mlp}).mode, PatchMode::mean);
    EXPECT_EQ(r.count({Site::decoder, 4, Kind::mlp}), 0u);
    EXPECT_EQ(r.at({Site::decoder, 5, Kind::self_attention}).mode, PatchMode::zero);

    ModelConfig big = small_config();
    big.n_dec_layers = 24;
    // 7 cross + 24 self + 18 mlp; 23 components stay active
    EXPECT_EQ(combined_stage_plan(StagePartition::from_bounds(7, 18, 24), 24).component_count(big), 49u);
    EXPECT_THROW(StagePartition::from_bounds(0, 3, 6), ValidationError);
}
