#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "genir/corpus/vocabulary.hpp"
#include "genir/errors.hpp"
#include "genir/model/config.hpp"
#include "genir/model/params.hpp"
#include "genir/numerics/ops.hpp"
#include "genir/numerics/tensor.hpp"

namespace genir {

/// Intervention point at every component output. `c_out` holds one row per position
/// (N rows at encoder sites, one row at decoder sites) and may be overwritten before
/// it is added to the residual stream.
template <class T>
class Hooks {
public:
    virtual ~Hooks() = default;
    virtual void on_output(const ComponentId& id, Tensor<T>& c_out) const = 0;
};

template <class T>
struct HeadTrace {
    std::vector<T> query;    // W_Q r for this head, d_h
    Tensor<T> keys;          // N x d_h
    Tensor<T> values;        // N x d_h
    std::vector<T> scores;   // s_i = q . k_i
    std::vector<T> weights;  // a_i
    std::vector<T> output;   // o_h = sum_i a_i v_i
};

template <class T>
struct DecoderLayerTrace {
    std::vector<T> r_begin;
    std::vector<T> self_out, cross_out, mlp_out;
    std::vector<T> r_end;
    // 1 / rms of each component's input (the residual it reads), used by attribution
    T self_inv_rms{}, cross_inv_rms{}, mlp_inv_rms{};
    std::vector<HeadTrace<T>> heads;
    std::vector<T> mlp_pre;  // FF_proj . norm(r)
    std::vector<T> mlp_act;  // a(r) = ReLU(mlp_pre)

    const std::vector<T>& c_out(Kind k) const {
        switch (k) {
            case Kind::self_attention: return self_out;
            case Kind::cross_attention: return cross_out;
            case Kind::mlp: return mlp_out;
        }
        return mlp_out;
    }
};

template <class T>
struct Trace {
    std::vector<TokenId> tokens;
    Tensor<T> encoder_out;  // e_1..e_N, N x d_model
    std::vector<T> r0;      // decoder start-token embedding
    std::vector<DecoderLayerTrace<T>> layers;
    std::vector<T> final_residual;
    std::vector<T> logits;
};

namespace detail {

template <class T>
Tensor<T> row_tensor(std::span<const T> v) {
    return Tensor<T>(1, v.size(), std::vector<T>(v.begin(), v.end()));
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t width) {
    Tensor<T> out(x.rows(), width);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto src = x.row(r).subspan(begin, width);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

template <class T>
void validate_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw ValidationError("encode: empty query");
    if (tokens.size() > c.max_query_len) {
        throw ValidationError("encode: query longer than max_query_len (" + std::to_string(tokens.size()) + ")");
    }
    for (TokenId t : tokens) {
        if (t >= c.d_vocab()) throw ValidationError("encode: unknown token id " + std::to_string(t));
    }
}

}  // namespace detail

/// Multi-head attention of `queries` (M x d) over `keys_src` (N x d), returning the
/// concatenated head outputs (M x d) before W_O.
template <class T>
Tensor<T> attention_heads(const Tensor<T>& queries, const Tensor<T>& keys_src, const AttentionWeights<T>& w,
                          std::size_t n_heads, std::vector<HeadTrace<T>>* trace = nullptr) {
    const std::size_t d = w.wq.rows();
    const std::size_t dh = d / n_heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    const Tensor<T> q = matmul_nt(queries, w.wq);
    const Tensor<T> k = matmul_nt(keys_src, w.wk);
    const Tensor<T> v = matmul_nt(keys_src, w.wv);
    Tensor<T> concat(queries.rows(), d);
    if (trace) trace->assign(n_heads, {});
    for (std::size_t h = 0; h < n_heads; ++h) {
        const Tensor<T> qh = detail::slice_cols(q, h * dh, dh);
        Tensor<T> kh = detail::slice_cols(k, h * dh, dh);
        Tensor<T> vh = detail::slice_cols(v, h * dh, dh);
        const Tensor<T> s = matmul_nt(qh, kh);
        const Tensor<T> a = scaled_softmax(s, scale);
        const Tensor<T> o = matmul(a, vh);
        for (std::size_t r = 0; r < o.rows(); ++r) {
            std::copy(o.row(r).begin(), o.row(r).end(), concat.row(r).begin() + h * dh);
        }
        if (trace) {
            HeadTrace<T>& ht = (*trace)[h];
            ht.query.assign(qh.row(0).begin(), qh.row(0).end());
            ht.scores.assign(s.row(0).begin(), s.row(0).end());
            ht.weights.assign(a.row(0).begin(), a.row(0).end());
            ht.output.assign(o.row(0).begin(), o.row(0).end());
            ht.keys = std::move(kh);
            ht.values = std::move(vh);
        }
    }
    return concat;
}

/// Cross-attention of one decoder residual (already normalized) over e_1..e_N.
template <class T>
Tensor<T> cross_attention(const Tensor<T>& r_norm, const Tensor<T>& enc, const AttentionWeights<T>& w,
                          std::size_t n_heads, std::vector<HeadTrace<T>>* trace = nullptr) {
    return matmul_nt(attention_heads(r_norm, enc, w, n_heads, trace), w.wo);
}

/// FF_out . ReLU(FF_proj . x), row-wise.
template <class T>
Tensor<T> mlp(const Tensor<T>& x, const MlpWeights<T>& w, Tensor<T>* pre = nullptr, Tensor<T>* act = nullptr) {
    Tensor<T> h = matmul_nt(x, w.ff_proj);
    if (pre) *pre = h;
    h = relu(std::move(h));
    Tensor<T> out = matmul_nt(h, w.ff_out);
    if (act) *act = std::move(h);
    return out;
}

/// l = W_U . sqrt(d_model) . ReLU(r)
template <class T>
std::vector<T> unembed(const Tensor<T>& wu, std::span<const T> r) {
    if (r.size() != wu.cols()) throw ShapeError("unembed: residual dimension mismatch");
    Tensor<T> x(1, r.size());
    const T s = std::sqrt(static_cast<T>(r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) x[i] = relu(r[i]) * s;
    const Tensor<T> l = matmul_nt(x, wu);
    return {l.flat().begin(), l.flat().end()};
}

template <class T>
std::vector<T> unembed(const ModelParams<T>& p, std::span<const T> r) {
    return unembed<T>(p.unembedding, r);
}

/// Encoder: embeddings + sinusoidal positions, pre-norm self-attention and MLP blocks,
/// final RMS norm.
template <class T>
Tensor<T> encode(const ModelParams<T>& p, std::span<const TokenId> tokens, const Hooks<T>* hooks = nullptr) {
    const ModelConfig& c = p.config;
    detail::validate_tokens<T>(c, tokens);
    const std::size_t n = tokens.size(), d = c.d_model;
    Tensor<T> x(n, d);
    const Tensor<T> pe = sinusoidal_positions<T>(n, d, static_cast<T>(c.pe_amplitude));
    for (std::size_t i = 0; i < n; ++i) {
        const auto e = p.embedding.row(tokens[i]);
        for (std::size_t j = 0; j < d; ++j) x(i, j) = e[j] + pe(i, j);
    }
    for (std::size_t l = 0; l < p.encoder.size(); ++l) {
        const EncoderLayerParams<T>& L = p.encoder[l];
        const Tensor<T> h = rms_norm(x, L.attn_gain);
        Tensor<T> a = matmul_nt(attention_heads(h, h, L.attn, c.n_heads), L.attn.wo);
        if (hooks) hooks->on_output({Site::encoder, l, Kind::self_attention}, a);
        x += a;
        Tensor<T> m = mlp(rms_norm(x, L.mlp_gain), L.mlp);
        if (hooks) hooks->on_output({Site::encoder, l, Kind::mlp}, m);
        x += m;
    }
    return rms_norm(x, p.encoder_final_gain);
}

/// Single-position decoder from the start token. Fills `trace` when given.
template <class T>
std::vector<T> decode(const ModelParams<T>& p, const Tensor<T>& enc, const Hooks<T>* hooks = nullptr,
                      Trace<T>* trace = nullptr) {
    const ModelConfig& c = p.config;
    if (enc.cols() != c.d_model || enc.rows() == 0) throw ShapeError("decode: malformed encoder outputs");
    Tensor<T> r = p.embedding.row_copy(Vocabulary::kSos);
    if (trace) {
        trace->encoder_out = enc;
        trace->r0.assign(r.flat().begin(), r.flat().end());
        trace->layers.assign(p.decoder.size(), {});
    }
    auto flat = [](const Tensor<T>& t) { return std::vector<T>(t.flat().begin(), t.flat().end()); };
    for (std::size_t l = 0; l < p.decoder.size(); ++l) {
        const DecoderLayerParams<T>& L = p.decoder[l];
        DecoderLayerTrace<T>* lt = trace ? &trace->layers[l] : nullptr;
        if (lt) lt->r_begin = flat(r);

        // a lone position attends only to itself: softmax weight 1, output W_O W_V norm(r)
        if (lt) lt->self_inv_rms = inverse_rms<T>(r.row(0));
        const Tensor<T> hs = rms_norm(r, L.self_gain);
        Tensor<T> cs = matmul_nt(matmul_nt(hs, L.self_attn.wv), L.self_attn.wo);
        if (hooks) hooks->on_output({Site::decoder, l, Kind::self_attention}, cs);
        r += cs;

        if (lt) lt->cross_inv_rms = inverse_rms<T>(r.row(0));
        const Tensor<T> hc = rms_norm(r, L.cross_gain);
        Tensor<T> cc = cross_attention(hc, enc, L.cross_attn, c.n_heads, lt ? &lt->heads : nullptr);
        if (hooks) hooks->on_output({Site::decoder, l, Kind::cross_attention}, cc);
        r += cc;

        if (lt) lt->mlp_inv_rms = inverse_rms<T>(r.row(0));
        Tensor<T> pre, act;
        Tensor<T> cm = mlp(rms_norm(r, L.mlp_gain), L.mlp, lt ? &pre : nullptr, lt ? &act : nullptr);
        if (hooks) hooks->on_output({Site::decoder, l, Kind::mlp}, cm);
        r += cm;

        if (lt) {
            lt->self_out = flat(cs);
            lt->cross_out = flat(cc);
            lt->mlp_out = flat(cm);
            lt->mlp_pre = flat(pre);
            lt->mlp_act = flat(act);
            lt->r_end = flat(r);
        }
    }
    std::vector<T> logits = unembed<T>(p, r.row(0));
    if (trace) {
        trace->final_residual = flat(r);
        trace->logits = logits;
    }
    return logits;
}

template <class T>
std::vector<T> forward(const ModelParams<T>& p, std::span<const TokenId> tokens, const Hooks<T>* hooks = nullptr) {
    return decode(p, encode(p, tokens, hooks), hooks);
}

template <class T>
Trace<T> trace_forward(const ModelParams<T>& p, std::span<const TokenId> tokens, const Hooks<T>* hooks = nullptr) {
    Trace<T> t;
    t.tokens.assign(tokens.begin(), tokens.end());
    decode(p, encode(p, tokens, hooks), hooks, &t);
    return t;
}

/// Document identifiers by descending logit; ties go to the lower token id.
template <class T>
std::vector<TokenId> rank_documents(std::span<const T> logits, const Vocabulary& v) {
    if (logits.size() != v.size()) throw ShapeError("rank_documents: logits length differs from d_V");
    std::vector<TokenId> ids(v.docid_count());
    std::iota(ids.begin(), ids.end(), v.first_docid());
    std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
    return ids;
}

/// 1-based rank of `doc` among document identifiers under the same tie rule.
template <class T>
std::size_t gold_rank(std::span<const T> logits, const Vocabulary& v, TokenId doc) {
    if (!v.is_docid(doc)) throw ValidationError("gold_rank: not a document identifier");
    const T g = logits[doc];
    std::size_t rank = 1;
    for (TokenId t = v.first_docid(); t < v.size(); ++t) {
        if (logits[t] > g || (logits[t] == g && t < doc)) ++rank;
    }
    return rank;
}

}  // namespace genir
