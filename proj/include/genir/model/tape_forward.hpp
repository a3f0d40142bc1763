#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "genir/model/forward.hpp"
#include "genir/model/params.hpp"
#include "genir/numerics/rng.hpp"
#include "genir/numerics/tape.hpp"

namespace genir {

/// Differentiable replica of encode/decode. Parameters enter the tape as leaves over
/// `p` whose gradients accumulate into the matching tensors of `grads`.
template <class T>
class TapeModel {
public:
    using Var = typename Tape<T>::Var;

    TapeModel(Tape<T>& tape, const ModelParams<T>& p, ModelParams<T>& grads) : t_(tape), p_(p) {
        std::vector<Tensor<T>*> sinks;
        grads.visit([&](const std::string&, Tensor<T>& g) { sinks.push_back(&g); });
        std::size_t i = 0;
        p.visit([&](const std::string&, const Tensor<T>& w) { vars_.push_back(t_.parameter(w, *sinks[i++])); });
    }

    /// Training-time dropout on the encoder input and on every component output before it
    /// joins the residual stream. Rate 0 (the default) leaves the pass identical to inference.
    void set_dropout(T rate, std::uint64_t seed) {
        if (!(rate >= T{0} && rate < T{1})) throw ValidationError("dropout rate must lie in [0, 1)");
        drop_rate_ = rate;
        drop_rng_ = Rng(seed);
    }

    /// Logits (1 x d_V) for one token sequence.
    Var logits(std::span<const TokenId> tokens) {
        const ModelConfig& c = p_.config;
        detail::validate_tokens<T>(c, tokens);
        std::size_t k = 0;
        auto next = [&] { return vars_[k++]; };

        const Var embedding = next();
        std::vector<std::size_t> ids(tokens.begin(), tokens.end());
        Var x = t_.gather_rows(embedding, ids);
        x = t_.add(x, t_.constant(sinusoidal_positions<T>(tokens.size(), c.d_model, static_cast<T>(c.pe_amplitude))));
        x = drop(x);
        for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
            const Var attn_gain = next();
            const Var wq = next(), wk = next(), wv = next(), wo = next();
            const Var mlp_gain = next();
            const Var ff_proj = next(), ff_out = next();
            const Var h = t_.rms_norm(x, attn_gain);
            x = t_.add(x, drop(t_.matmul_nt(heads(h, h, wq, wk, wv), wo)));
            x = t_.add(x, drop(mlp(t_.rms_norm(x, mlp_gain), ff_proj, ff_out)));
        }
        const Var enc = t_.rms_norm(x, next());

        Var r = t_.gather_rows(embedding, {Vocabulary::kSos});
        for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
            const Var self_gain = next();
            next();  // self W_Q, W_K: a single position makes them inert
            next();
            const Var swv = next(), swo = next();
            const Var cross_gain = next();
            const Var wq = next(), wk = next(), wv = next(), wo = next();
            const Var mlp_gain = next();
            const Var ff_proj = next(), ff_out = next();
            r = t_.add(r, drop(t_.matmul_nt(t_.matmul_nt(t_.rms_norm(r, self_gain), swv), swo)));
            r = t_.add(r, drop(t_.matmul_nt(heads(t_.rms_norm(r, cross_gain), enc, wq, wk, wv), wo)));
            r = t_.add(r, drop(mlp(t_.rms_norm(r, mlp_gain), ff_proj, ff_out)));
        }
        const Var wu = next();
        const Var s = t_.scale(t_.relu(r), std::sqrt(static_cast<T>(c.d_model)));
        return t_.matmul_nt(s, wu);
    }

    Var loss(std::span<const TokenId> tokens, TokenId target) { return t_.cross_entropy(logits(tokens), target); }

private:
    Var drop(Var x) {
        if (drop_rate_ == T{0}) return x;
        const Tensor<T>& v = t_.value(x);
        Tensor<T> m(v.rows(), v.cols());
        const T keep = T{1} / (T{1} - drop_rate_);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = drop_rng_.uniform() < static_cast<double>(drop_rate_) ? T{0} : keep;
        return t_.mul_const(x, std::move(m));
    }

    Var heads(Var queries, Var keys_src, Var wq, Var wk, Var wv) {
        const std::size_t d = p_.config.d_model, nh = p_.config.n_heads, dh = d / nh;
        const T scale = T{1} / std::sqrt(static_cast<T>(dh));
        const Var q = t_.matmul_nt(queries, wq);
        const Var k = t_.matmul_nt(keys_src, wk);
        const Var v = t_.matmul_nt(keys_src, wv);
        std::vector<Var> outs;
        for (std::size_t h = 0; h < nh; ++h) {
            const Var s = t_.matmul_nt(t_.slice_cols(q, h * dh, dh), t_.slice_cols(k, h * dh, dh));
            outs.push_back(t_.matmul(t_.softmax_rows(s, scale), t_.slice_cols(v, h * dh, dh)));
        }
        return t_.concat_cols(std::move(outs));
    }

    Var mlp(Var x, Var ff_proj, Var ff_out) { return t_.matmul_nt(t_.relu(t_.matmul_nt(x, ff_proj)), ff_out); }

    Tape<T>& t_;
    const ModelParams<T>& p_;
    std::vector<Var> vars_;
    T drop_rate_{0};
    Rng drop_rng_{0};
};

}  // namespace genir
