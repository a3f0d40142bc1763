#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "genir/model/forward.hpp"
#include "genir/model/params.hpp"
#include "genir/model/tape_forward.hpp"
#include "genir/model/weights_io.hpp"
#include "genir/numerics/grad_check.hpp"

using namespace genir;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_heads = 4;
    c.n_enc_layers = 2;
    c.n_dec_layers = 3;
    c.n_words = 20;
    c.n_docids = 10;
    return c;
}

std::vector<TokenId> query(std::initializer_list<TokenId> w) { return w; }

class NoopHooks : public Hooks<double> {
public:
    void on_output(const ComponentId&, Tensor<double>&) const override {}
};

}  // namespace

TEST(Encode, SingleTokenIsDeterministic) {
    const auto p = ModelParams<double>::init(small_config(), 1);
    const auto a = encode(p, query({5}));
    ASSERT_EQ(a.rows(), 1u);
    ASSERT_EQ(a.cols(), 16u);
    EXPECT_EQ(a, encode(p, query({5})));
}

TEST(Encode, PositionsMatter) {
    const auto p = ModelParams<double>::init(small_config(), 1);
    const auto a = encode(p, query({3, 7, 9}));
    const auto b = encode(p, query({7, 3, 9}));
    EXPECT_GT(max_abs_diff(a.row_copy(0), b.row_copy(1)), 1e-6);
}

TEST(Encode, RejectsBadInput) {
    const auto p = ModelParams<double>::init(small_config(), 1);
    EXPECT_THROW(encode(p, std::vector<TokenId>{}), ValidationError);
    EXPECT_THROW(encode(p, query({3, 999})), ValidationError);
    std::vector<TokenId> long_q(33, 3);
    EXPECT_THROW(encode(p, long_q), ValidationError);
}

TEST(Encode, ZeroWeightsLeaveNormalizedEmbeddingPath) {
    ModelConfig c;
    c.d_model = 4;
    c.d_ff = 4;
    c.n_heads = 1;
    c.n_enc_layers = 2;
    c.n_dec_layers = 1;
    c.n_words = 2;
    c.n_docids = 2;
    auto p = ModelParams<double>::zeros(c);
    p.encoder_final_gain = Tensor<double>{{1, 1, 1, 1}};
    p.embedding(2, 0) = 1.0;
    p.embedding(2, 1) = 1.0;
    p.embedding(2, 2) = 3.0;
    p.embedding(2, 3) = -1.0;
    // position 0 adds (sin 0, cos 0, sin 0, cos 0) = (0, 1, 0, 1) -> x = (1, 2, 3, 0)
    // rms = sqrt((1 + 4 + 9 + 0) / 4 + 1e-6)
    const double rms = std::sqrt(14.0 / 4.0 + 1e-6);
    const auto e = encode(p, query({2}));
    EXPECT_NEAR(e(0, 0), 1.0 / rms, 1e-12);
    EXPECT_NEAR(e(0, 1), 2.0 / rms, 1e-12);
    EXPECT_NEAR(e(0, 2), 3.0 / rms, 1e-12);
    EXPECT_NEAR(e(0, 3), 0.0, 1e-12);
}

TEST(Decode, NoopHooksAreTransparent) {
    const auto p = ModelParams<double>::init(small_config(), 2);
    const auto q = query({4, 8, 15, 16});
    const NoopHooks h;
    EXPECT_EQ(forward(p, q), forward(p, q, &h));
}

TEST(Decode, ResidualStreamIsAdditive) {
    const auto p = ModelParams<double>::init(small_config(), 3);
    const auto t = trace_forward(p, query({4, 8, 15, 16}));
    std::vector<double> acc = t.r0;
    for (const auto& L : t.layers) {
        for (std::size_t i = 0; i < acc.size(); ++i) {
            EXPECT_NEAR(L.r_end[i] - L.r_begin[i] - L.self_out[i] - L.cross_out[i] - L.mlp_out[i], 0.0, 1e-12);
            acc[i] += L.self_out[i] + L.cross_out[i] + L.mlp_out[i];
        }
        for (double a : L.mlp_act) EXPECT_GE(a, 0.0);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc[i], t.final_residual[i], 1e-10);
    EXPECT_EQ(unembed<double>(p, t.final_residual), t.logits);
}

TEST(Decode, SingleKeyGetsAllWeight) {
    const auto p = ModelParams<double>::init(small_config(), 4);
    const auto t = trace_forward(p, query({9}));
    for (const auto& L : t.layers) {
        for (const auto& h : L.heads) {
            ASSERT_EQ(h.weights.size(), 1u);
            EXPECT_DOUBLE_EQ(h.weights[0], 1.0);
            for (std::size_t j = 0; j < h.output.size(); ++j) EXPECT_DOUBLE_EQ(h.output[j], h.values(0, j));
        }
    }
}

TEST(CrossAttention, MatchesLoopOracle) {
    Rng rng(8);
    const std::size_t d = 8, nh = 2, dh = 4, n = 5;
    AttentionWeights<double> w{Tensor<double>(d, d), Tensor<double>(d, d), Tensor<double>(d, d), Tensor<double>(d, d)};
    for (auto* t : {&w.wq, &w.wk, &w.wv, &w.wo})
        for (double& x : t->flat()) x = rng.normal();
    Tensor<double> r(1, d), e(n, d);
    for (double& x : r.flat()) x = rng.normal();
    for (double& x : e.flat()) x = rng.normal();
    const auto got = cross_attention(r, e, w, nh);

    std::vector<double> concat(d, 0.0);
    for (std::size_t h = 0; h < nh; ++h) {
        std::vector<double> q(dh, 0.0), s(n, 0.0);
        for (std::size_t a = 0; a < dh; ++a)
            for (std::size_t b = 0; b < d; ++b) q[a] += w.wq(h * dh + a, b) * r[b];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t a = 0; a < dh; ++a) {
                double k = 0;
                for (std::size_t b = 0; b < d; ++b) k += w.wk(h * dh + a, b) * e(i, b);
                s[i] += q[a] * k;
            }
        double z = 0;
        for (double& x : s) z += (x = std::exp(x / std::sqrt(double(dh))));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t a = 0; a < dh; ++a) {
                double v = 0;
                for (std::size_t b = 0; b < d; ++b) v += w.wv(h * dh + a, b) * e(i, b);
                concat[h * dh + a] += s[i] / z * v;
            }
    }
    for (std::size_t i = 0; i < d; ++i) {
        double o = 0;
        for (std::size_t j = 0; j < d; ++j) o += w.wo(i, j) * concat[j];
        EXPECT_NEAR(got[i], o, 1e-5);
    }
}

TEST(CrossAttention, DuplicateKeysShareWeight) {
    const auto p = ModelParams<double>::init(small_config(), 5);
    Rng rng(1);
    Tensor<double> e(3, 16), r(1, 16);
    for (double& x : e.flat()) x = rng.normal();
    for (double& x : r.flat()) x = rng.normal();
    std::copy(e.row(0).begin(), e.row(0).end(), e.row(2).begin());
    std::vector<HeadTrace<double>> heads;
    cross_attention(r, e, p.decoder[0].cross_attn, 4, &heads);
    for (const auto& h : heads) EXPECT_DOUBLE_EQ(h.weights[0], h.weights[2]);
}

TEST(Mlp, NeuronSumEqualsMatrixForm) {
    Rng rng(9);
    MlpWeights<double> w{Tensor<double>(6, 4), Tensor<double>(4, 6)};
    for (double& x : w.ff_proj.flat()) x = rng.normal();
    for (double& x : w.ff_out.flat()) x = rng.normal();
    Tensor<double> r(1, 4);
    for (double& x : r.flat()) x = rng.normal();
    const auto got = mlp(r, w);
    std::vector<double> sum(4, 0.0);
    for (std::size_t i = 0; i < 6; ++i) {
        double a = 0;
        for (std::size_t j = 0; j < 4; ++j) a += w.ff_proj(i, j) * r[j];
        a = std::max(a, 0.0);
        for (std::size_t j = 0; j < 4; ++j) sum[j] += w.ff_out(j, i) * a;
    }
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got[j], sum[j], 1e-5);
}

TEST(Mlp, OrthogonalInputAndSingleNeuron) {
    MlpWeights<double> w{Tensor<double>{{1, 0, 0}, {0, 1, 0}}, Tensor<double>{{2, 5}, {3, 7}, {4, 11}}};
    EXPECT_EQ(mlp(Tensor<double>{{0, 0, 1}}, w), Tensor<double>(1, 3));
    // only neuron 0 fires: output = FF_out column 0 * 2
    EXPECT_EQ(mlp(Tensor<double>{{2, -1, 0}}, w), (Tensor<double>{{4, 6, 8}}));
}

TEST(Unembed, ZeroScalingAndHandOracle) {
    const Tensor<double> wu{{1, 0}, {0, 1}, {1, 1}};
    EXPECT_EQ(unembed<double>(wu, std::vector<double>{0, 0}), (std::vector<double>{0, 0, 0}));
    const auto l1 = unembed<double>(wu, std::vector<double>{1.5, -2});
    const auto l2 = unembed<double>(wu, std::vector<double>{3.0, -2});
    // sqrt(2) * (1.5, 0, 1.5)
    EXPECT_NEAR(l1[0], std::sqrt(2.0) * 1.5, 1e-12);
    EXPECT_NEAR(l1[1], 0.0, 1e-12);
    EXPECT_NEAR(l1[2], std::sqrt(2.0) * 1.5, 1e-12);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(l2[i], 2 * l1[i], 1e-12);
}

TEST(RankDocuments, TieRuleAndSortOracle) {
    const Vocabulary v(3, 6);
    std::vector<double> l(v.size(), 0.0);
    l[v.docid(5)] = 2.0;
    EXPECT_EQ(rank_documents<double>(l, v).front(), v.docid(5));
    l[v.docid(2)] = 2.0;
    EXPECT_EQ(rank_documents<double>(l, v).front(), v.docid(2));
    EXPECT_EQ(gold_rank<double>(l, v, v.docid(5)), 2u);
    l[0] = 100.0;  // non-docid logits never enter the ranking
    EXPECT_EQ(gold_rank<double>(l, v, v.docid(2)), 1u);

    Rng rng(4);
    const Vocabulary big(20, 50);
    std::vector<double> r(big.size());
    for (double& x : r) x = std::round(rng.normal() * 4) / 4;  // plenty of ties
    std::vector<std::pair<double, TokenId>> oracle;
    for (TokenId t = big.first_docid(); t < big.size(); ++t) oracle.emplace_back(-r[t], t);
    std::sort(oracle.begin(), oracle.end());
    const auto got = rank_documents<double>(r, big);
    for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i], oracle[i].second);
        EXPECT_EQ(gold_rank<double>(r, big, got[i]), i + 1);
    }
}

TEST(TapeModel, LogitsMatchInference) {
    const auto p = ModelParams<float>::init(small_config(), 6);
    auto g = ModelParams<float>::zeros(p.config);
    Tape<float> t;
    TapeModel<float> m(t, p, g);
    const auto q = query({3, 12, 7, 7, 19});
    const auto l = m.logits(q);
    const auto want = forward(p, q);
    ASSERT_EQ(t.value(l).size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(t.value(l)[i], want[i]) << i;
}

TEST(TapeModel, GradientsMatchFiniteDifferences) {
    ModelConfig c = small_config();
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    auto p = ModelParams<double>::init(c, 7);
    auto g = ModelParams<double>::zeros(c);
    const auto q = query({3, 12, 7, 19});
    const TokenId target = 2 + 20 + 4;
    {
        Tape<double> t;
        TapeModel<double> m(t, p, g);
        t.backward(m.loss(q, target));
    }
    std::vector<Tensor<double>*> ps;
    std::vector<const Tensor<double>*> gs;
    p.visit([&](const std::string&, Tensor<double>& x) { ps.push_back(&x); });
    g.visit([&](const std::string&, const Tensor<double>& x) { gs.push_back(&x); });
    auto loss = [&] {
        auto sink = ModelParams<double>::zeros(c);
        Tape<double> t;
        TapeModel<double> m(t, p, sink);
        return t.scalar(m.loss(q, target));
    };
    const auto res = grad_check<double>(loss, ps, gs, 1e-6, 3);
    EXPECT_LT(res.max_relative_error, 1e-4) << "tensor " << res.worst_tensor << " index " << res.worst_index
                                            << " analytic " << res.worst_analytic << " numeric " << res.worst_numeric;
}

TEST(WeightsIo, BitExactRoundTrip) {
    const auto p = ModelParams<float>::init(small_config(), 11);
    std::stringstream ss;
    write_bundle(ss, params_bundle(p));
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "GIRW");
    const auto back = params_from_bundle<float>(read_bundle(ss));
    EXPECT_EQ(back, p);
    std::stringstream again;
    write_bundle(again, params_bundle(back));
    EXPECT_EQ(again.str(), bytes);
}

TEST(WeightsIo, RejectsCorruptFiles) {
    std::stringstream bad("NOPE....");
    EXPECT_THROW(read_bundle(bad), ValidationError);
    const auto p = ModelParams<float>::init(small_config(), 11);
    std::stringstream ss;
    write_bundle(ss, params_bundle(p));
    std::string bytes = ss.str();
    bytes.resize(bytes.size() - 10);
    std::stringstream cut(bytes);
    EXPECT_THROW(read_bundle(cut), ValidationError);
}

TEST(TapeModel, DropoutMasksAreDifferentiable) {
    ModelConfig c = small_config();
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    auto p = ModelParams<double>::init(c, 8);
    auto g = ModelParams<double>::zeros(c);
    const auto q = query({4, 9, 15});
    const TokenId target = 2 + 20 + 1;
    auto run = [&](ModelParams<double>& sink) {
        Tape<double> t;
        TapeModel<double> m(t, p, sink);
        m.set_dropout(0.3, 99);  // same seed: same masks on every pass
        const auto l = m.loss(q, target);
        const double v = t.scalar(l);
        t.backward(l);
        return v;
    };
    run(g);
    std::vector<Tensor<double>*> ps;
    std::vector<const Tensor<double>*> gs;
    p.visit([&](const std::string&, Tensor<double>& x) { ps.push_back(&x); });
    g.visit([&](const std::string&, const Tensor<double>& x) { gs.push_back(&x); });
    auto loss = [&] {
        auto sink = ModelParams<double>::zeros(c);
        return run(sink);
    };
    const auto res = grad_check<double>(loss, ps, gs, 1e-6, 3);
    EXPECT_LT(res.max_relative_error, 1e-4) << res.worst_tensor;

    auto sink = ModelParams<double>::zeros(c);
    Tape<double> t;
    TapeModel<double> m(t, p, sink);
    const auto clean = forward(p, q);
    m.set_dropout(0.3, 99);
    const auto l = m.logits(q);
    bool differs = false;
    for (std::size_t i = 0; i < clean.size(); ++i) differs = differs || t.value(l)[i] != clean[i];
    EXPECT_TRUE(differs);
    EXPECT_THROW(m.set_dropout(1.0, 1), ValidationError);
}
