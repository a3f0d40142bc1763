#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "genir/errors.hpp"
#include "genir/model/params.hpp"

namespace genir {

// File layout: "GIRW" | u32 version | u64 manifest bytes | manifest JSON | f32 payload.
// All integers and floats little-endian; tensors row-major at manifest offsets (in floats).
inline constexpr char kWeightsMagic[4] = {'G', 'I', 'R', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

template <class U>
void put(std::ostream& out, U v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::istream& in) {
    U v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("weights file truncated");
    return v;
}

}  // namespace detail

/// Named f32 tensors plus free-form metadata; the unit of storage for parameters and
/// mean-activation stores alike.
struct TensorBundle {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::string> names;
    std::vector<Tensor<float>> tensors;

    const Tensor<float>& at(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) return tensors[i];
        }
        throw ValidationError("weights file has no tensor '" + name + "'");
    }
};

inline void write_bundle(std::ostream& out, const TensorBundle& b) {
    nlohmann::json manifest;
    manifest["meta"] = b.meta;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < b.names.size(); ++i) {
        const auto& t = b.tensors[i];
        manifest["tensors"].push_back({{"name", b.names[i]}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
        offset += t.size();
    }
    const std::string m = manifest.dump();
    out.write(kWeightsMagic, 4);
    detail::put<std::uint32_t>(out, kWeightsVersion);
    detail::put<std::uint64_t>(out, m.size());
    out.write(m.data(), static_cast<std::streamsize>(m.size()));
    for (const auto& t : b.tensors) {
        out.write(reinterpret_cast<const char*>(t.flat().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw ValidationError("failed writing weights");
}

inline TensorBundle read_bundle(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kWeightsMagic, 4) != 0) {
        throw ValidationError("not a GIRW weights file (bad magic)");
    }
    const auto version = detail::get<std::uint32_t>(in);
    if (version != kWeightsVersion) throw ValidationError("unsupported weights format version " + std::to_string(version));
    const auto mlen = detail::get<std::uint64_t>(in);
    if (mlen > (1ull << 30)) throw ValidationError("weights manifest implausibly large");
    std::string m(mlen, '\0');
    if (!in.read(m.data(), static_cast<std::streamsize>(mlen))) throw ValidationError("weights manifest truncated");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("weights manifest is not JSON: ") + e.what());
    }
    std::vector<float> payload;
    {
        std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (rest.size() % sizeof(float) != 0) throw ValidationError("weights payload not a whole number of floats");
        payload.resize(rest.size() / sizeof(float));
        std::memcpy(payload.data(), rest.data(), rest.size());
    }
    TensorBundle b;
    try {
        b.meta = manifest.at("meta");
        for (const auto& e : manifest.at("tensors")) {
            const auto rows = e.at("shape").at(0).get<std::size_t>();
            const auto cols = e.at("shape").at(1).get<std::size_t>();
            const auto off = e.at("offset").get<std::size_t>();
            if (off + rows * cols > payload.size()) throw ValidationError("weights tensor extends past payload");
            b.names.push_back(e.at("name").get<std::string>());
            b.tensors.emplace_back(rows, cols, std::vector<float>(payload.begin() + off, payload.begin() + off + rows * cols));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed weights manifest: ") + e.what());
    }
    return b;
}

inline void save_bundle(const std::filesystem::path& path, const TensorBundle& b) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    write_bundle(out, b);
}

inline TensorBundle load_bundle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return read_bundle(in);
}

template <class T>
TensorBundle params_bundle(const ModelParams<T>& p) {
    TensorBundle b;
    b.meta["kind"] = "model";
    b.meta["config"] = p.config;
    p.visit([&](const std::string& name, const Tensor<T>& t) {
        b.names.push_back(name);
        b.tensors.push_back(Tensor<float>::cast(t));
    });
    return b;
}

template <class T>
ModelParams<T> params_from_bundle(const TensorBundle& b) {
    if (b.meta.value("kind", std::string()) != "model") throw ValidationError("weights file does not hold a model");
    ModelConfig cfg = b.meta.at("config").get<ModelConfig>();
    ModelParams<T> p = ModelParams<T>::zeros(cfg);
    p.visit([&](const std::string& name, Tensor<T>& t) {
        const Tensor<float>& src = b.at(name);
        if (src.rows() != t.rows() || src.cols() != t.cols()) {
            throw ValidationError("weights tensor '" + name + "' has the wrong shape");
        }
        t = Tensor<T>::cast(src);
    });
    return p;
}

template <class T>
void save_params(const std::filesystem::path& path, const ModelParams<T>& p) {
    save_bundle(path, params_bundle(p));
}

template <class T>
ModelParams<T> load_params(const std::filesystem::path& path) {
    return params_from_bundle<T>(load_bundle(path));
}

}  // namespace genir
