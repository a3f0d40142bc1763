#pragma once

#include <compare>
#include <cstddef>
#include <string>

#include <json.hpp>

#include "genir/errors.hpp"

namespace genir {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t d_ff = 256;
    std::size_t n_heads = 4;
    std::size_t n_enc_layers = 4;
    std::size_t n_dec_layers = 6;
    std::size_t n_words = 200;
    std::size_t n_docids = 100;
    std::size_t max_query_len = 32;
    double pe_amplitude = 1.0;

    std::size_t d_vocab() const noexcept { return 2 + n_words + n_docids; }
    std::size_t head_dim() const noexcept { return d_model / n_heads; }

    void validate() const {
        if (d_model == 0 || d_ff == 0 || n_heads == 0 || n_enc_layers == 0 || n_dec_layers == 0 ||
            n_words == 0 || n_docids == 0 || max_query_len == 0) {
            throw ValidationError("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) throw ValidationError("model config: d_model must be divisible by n_heads");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_model", c.d_model},           {"d_ff", c.d_ff},
         {"n_heads", c.n_heads},           {"n_enc_layers", c.n_enc_layers},
         {"n_dec_layers", c.n_dec_layers}, {"n_words", c.n_words},
         {"n_docids", c.n_docids},         {"max_query_len", c.max_query_len},
         {"pe_amplitude", c.pe_amplitude}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
    c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
    c.n_words = j.value("n_words", d.n_words);
    c.n_docids = j.value("n_docids", d.n_docids);
    c.max_query_len = j.value("max_query_len", d.max_query_len);
    c.pe_amplitude = j.value("pe_amplitude", d.pe_amplitude);
}

enum class Site { encoder, decoder };
enum class Kind { self_attention, cross_attention, mlp };

inline constexpr Kind kAllKinds[] = {Kind::self_attention, Kind::cross_attention, Kind::mlp};

inline const char* site_name(Site s) { return s == Site::encoder ? "encoder" : "decoder"; }

inline const char* kind_name(Kind k) {
    switch (k) {
        case Kind::self_attention: return "self_attention";
        case Kind::cross_attention: return "cross_attention";
        case Kind::mlp: return "mlp";
    }
    return "?";
}

inline Site parse_site(const std::string& s) {
    if (s == "encoder") return Site::encoder;
    if (s == "decoder") return Site::decoder;
    throw ValidationError("unknown site '" + s + "'");
}

inline Kind parse_kind(const std::string& s) {
    if (s == "self_attention" || s == "self") return Kind::self_attention;
    if (s == "cross_attention" || s == "cross") return Kind::cross_attention;
    if (s == "mlp") return Kind::mlp;
    throw ValidationError("unknown component kind '" + s + "'");
}

struct ComponentId {
    Site site = Site::decoder;
    std::size_t layer = 0;
    Kind kind = Kind::mlp;

    auto operator<=>(const ComponentId&) const = default;

    void validate(const ModelConfig& c) const {
        const std::size_t n = site == Site::encoder ? c.n_enc_layers : c.n_dec_layers;
        if (layer >= n) {
            throw ValidationError(std::string("component layer ") + std::to_string(layer) + " out of range for " +
                                  site_name(site));
        }
        if (site == Site::encoder && kind == Kind::cross_attention) {
            throw ValidationError("cross_attention exists only at decoder sites");
        }
    }

    std::string str() const {
        return std::string(site_name(site)) + "." + std::to_string(layer) + "." + kind_name(kind);
    }
};

}  // namespace genir
