#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "genir/model/config.hpp"
#include "genir/numerics/rng.hpp"
#include "genir/numerics/tensor.hpp"

namespace genir {

/// W_Q, W_K, W_V, W_O, each d_model x d_model. Rows [h*d_h, (h+1)*d_h) of W_Q, W_K and W_V
/// are head h's projections; W_O is shared and acts on the concatenated head outputs.
template <class T>
struct AttentionWeights {
    Tensor<T> wq, wk, wv, wo;
};

/// FF_proj (d_ff x d_model) and FF_out (d_model x d_ff); no biases.
template <class T>
struct MlpWeights {
    Tensor<T> ff_proj, ff_out;
};

template <class T>
struct EncoderLayerParams {
    Tensor<T> attn_gain, mlp_gain;
    AttentionWeights<T> attn;
    MlpWeights<T> mlp;
};

template <class T>
struct DecoderLayerParams {
    Tensor<T> self_gain, cross_gain, mlp_gain;
    AttentionWeights<T> self_attn;
    AttentionWeights<T> cross_attn;
    MlpWeights<T> mlp;
};

template <class T>
struct ModelParams {
    ModelConfig config;
    Tensor<T> embedding;  // d_V x d_model, shared by encoder input and the decoder start token
    std::vector<EncoderLayerParams<T>> encoder;
    Tensor<T> encoder_final_gain;
    std::vector<DecoderLayerParams<T>> decoder;
    Tensor<T> unembedding;  // W_U, d_V x d_model

    /// Calls f(name, tensor) for every tensor in a fixed canonical order.
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
        return n;
    }

    /// All-zero tensors with the shapes implied by `c`.
    static ModelParams zeros(const ModelConfig& c) {
        c.validate();
        const std::size_t d = c.d_model, f = c.d_ff, v = c.d_vocab();
        auto attn = [&] { return AttentionWeights<T>{Tensor<T>(d, d), Tensor<T>(d, d), Tensor<T>(d, d), Tensor<T>(d, d)}; };
        auto mlp = [&] { return MlpWeights<T>{Tensor<T>(f, d), Tensor<T>(d, f)}; };
        ModelParams p;
        p.config = c;
        p.embedding = Tensor<T>(v, d);
        for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
            p.encoder.push_back({Tensor<T>(1, d), Tensor<T>(1, d), attn(), mlp()});
        }
        p.encoder_final_gain = Tensor<T>(1, d);
        for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
            p.decoder.push_back({Tensor<T>(1, d), Tensor<T>(1, d), Tensor<T>(1, d), attn(), attn(), mlp()});
        }
        p.unembedding = Tensor<T>(v, d);
        return p;
    }

    /// Gaussian init: weights std 1/sqrt(fan_in), embedding std 1, W_U std 1/d_model, gains 1.
    static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
        ModelParams p = zeros(c);
        Rng rng(derive_seed(seed, 0x1A17));
        p.visit([&](const std::string& name, Tensor<T>& t) {
            if (name.ends_with("gain")) {
                t.fill(T{1});
                return;
            }
            double std = 1.0 / std::sqrt(static_cast<double>(t.cols()));
            if (name == "embedding") std = 1.0;
            if (name == "unembedding") std = 1.0 / static_cast<double>(c.d_model);
            for (T& x : t.flat()) x = static_cast<T>(rng.normal() * std);
        });
        return p;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out = ModelParams<U>::zeros(config);
        std::vector<const Tensor<T>*> src;
        visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
        std::size_t i = 0;
        out.visit([&](const std::string&, Tensor<U>& t) { t = Tensor<U>::cast(*src[i++]); });
        return out;
    }

    bool operator==(const ModelParams& o) const {
        if (!(config == o.config)) return false;
        std::vector<const Tensor<T>*> a, b;
        visit([&](const std::string&, const Tensor<T>& t) { a.push_back(&t); });
        o.visit([&](const std::string&, const Tensor<T>& t) { b.push_back(&t); });
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!(*a[i] == *b[i])) return false;
        }
        return true;
    }

private:
    template <class Self, class F>
    static void visit_impl(Self& s, F& f) {
        auto attn = [&](const std::string& pre, auto& a) {
            f(pre + ".wq", a.wq);
            f(pre + ".wk", a.wk);
            f(pre + ".wv", a.wv);
            f(pre + ".wo", a.wo);
        };
        auto mlp = [&](const std::string& pre, auto& m) {
            f(pre + ".ff_proj", m.ff_proj);
            f(pre + ".ff_out", m.ff_out);
        };
        f(std::string("embedding"), s.embedding);
        for (std::size_t l = 0; l < s.encoder.size(); ++l) {
            const std::string pre = "encoder." + std::to_string(l);
            f(pre + ".attn_gain", s.encoder[l].attn_gain);
            attn(pre + ".attn", s.encoder[l].attn);
            f(pre + ".mlp_gain", s.encoder[l].mlp_gain);
            mlp(pre + ".mlp", s.encoder[l].mlp);
        }
        f(std::string("encoder.final_gain"), s.encoder_final_gain);
        for (std::size_t l = 0; l < s.decoder.size(); ++l) {
            const std::string pre = "decoder." + std::to_string(l);
            f(pre + ".self_gain", s.decoder[l].self_gain);
            attn(pre + ".self_attn", s.decoder[l].self_attn);
            f(pre + ".cross_gain", s.decoder[l].cross_gain);
            attn(pre + ".cross_attn", s.decoder[l].cross_attn);
            f(pre + ".mlp_gain", s.decoder[l].mlp_gain);
            mlp(pre + ".mlp", s.decoder[l].mlp);
        }
        f(std::string("unembedding"), s.unembedding);
    }
};

}  // namespace genir
