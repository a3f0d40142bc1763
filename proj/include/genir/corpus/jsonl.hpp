#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "genir/corpus/corpus.hpp"
#include "genir/errors.hpp"

namespace genir {

namespace detail {

inline nlohmann::json tokens_json(const Vocabulary& v, std::span<const TokenId> ts) {
    nlohmann::json a = nlohmann::json::array();
    for (TokenId t : ts) a.push_back(v.symbol(t));
    return a;
}

inline std::vector<TokenId> tokens_from_json(const Vocabulary& v, const nlohmann::json& a) {
    if (!a.is_array()) throw ValidationError("expected an array of token symbols");
    std::vector<TokenId> out;
    out.reserve(a.size());
    for (const auto& s : a) {
        if (!s.is_string()) throw ValidationError("token symbols must be strings");
        out.push_back(v.require(s.get<std::string>()));
    }
    return out;
}

template <class F>
void for_each_line(std::istream& in, const std::string& what, F&& f) {
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError(what + " line " + std::to_string(n) + ": " + e.what());
        }
        try {
            f(j);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(what + " line " + std::to_string(n) + ": " + e.what());
        }
    }
}

inline std::ifstream open_in(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ValidationError("cannot open " + p.string());
    return in;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + p.string());
    return out;
}

}  // namespace detail

/// One line per document: {"doc_id":"D0042","body":["w013",...]}
inline void write_corpus_jsonl(std::ostream& out, const Corpus& c) {
    for (const Document& d : c.docs) {
        nlohmann::json j;
        j["doc_id"] = c.vocab.symbol(d.doc_id);
        j["body"] = detail::tokens_json(c.vocab, d.body);
        out << j.dump() << '\n';
    }
}

/// Reads documents back against a known vocabulary; clusters are the distinct body tokens.
inline Corpus read_corpus_jsonl(std::istream& in, const Vocabulary& vocab) {
    Corpus c{vocab, {}};
    detail::for_each_line(in, "corpus", [&](const nlohmann::json& j) {
        Document d;
        d.doc_id = vocab.require(j.at("doc_id").get<std::string>());
        if (!vocab.is_docid(d.doc_id)) throw ValidationError("doc_id is not a document identifier");
        d.body = detail::tokens_from_json(vocab, j.at("body"));
        if (d.body.empty() || d.body.size() > kMaxIndexLen) {
            throw ValidationError("document body length must be in [1, 32]");
        }
        for (TokenId t : d.body) {
            if (!vocab.is_word(t)) throw ValidationError("document body contains a non-word token");
        }
        d.cluster = d.body;
        std::sort(d.cluster.begin(), d.cluster.end());
        d.cluster.erase(std::unique(d.cluster.begin(), d.cluster.end()), d.cluster.end());
        c.docs.push_back(std::move(d));
    });
    for (std::size_t i = 0; i < c.docs.size(); ++i) {
        if (c.docs[i].doc_id != vocab.docid(i)) throw ValidationError("corpus documents must be in docid order");
    }
    return c;
}

/// {"kind":"index"|"retrieve","input":[...],"target":"D0042","split":"train"}
inline void write_examples_jsonl(std::ostream& out, const Vocabulary& v, std::span<const Example> xs) {
    for (const Example& e : xs) {
        nlohmann::json j;
        j["kind"] = e.kind == ExampleKind::index ? "index" : "retrieve";
        j["input"] = detail::tokens_json(v, e.input);
        j["target"] = v.symbol(e.target);
        j["split"] = split_name(e.split);
        out << j.dump() << '\n';
    }
}

inline std::vector<Example> read_examples_jsonl(std::istream& in, const Vocabulary& v) {
    std::vector<Example> out;
    detail::for_each_line(in, "examples", [&](const nlohmann::json& j) {
        Example e;
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "index") e.kind = ExampleKind::index;
        else if (kind == "retrieve") e.kind = ExampleKind::retrieve;
        else throw ValidationError("unknown example kind '" + kind + "'");
        e.input = detail::tokens_from_json(v, j.at("input"));
        if (e.input.empty()) throw ValidationError("example input is empty");
        e.target = v.require(j.at("target").get<std::string>());
        if (!v.is_docid(e.target)) throw ValidationError("example target is not a document identifier");
        e.split = parse_split(j.value("split", std::string("train")));
        out.push_back(std::move(e));
    });
    return out;
}

inline void save_corpus(const std::filesystem::path& p, const Corpus& c) {
    auto out = detail::open_out(p);
    write_corpus_jsonl(out, c);
}

inline Corpus load_corpus(const std::filesystem::path& p, const Vocabulary& v) {
    auto in = detail::open_in(p);
    return read_corpus_jsonl(in, v);
}

inline void save_examples(const std::filesystem::path& p, const Vocabulary& v, std::span<const Example> xs) {
    auto out = detail::open_out(p);
    write_examples_jsonl(out, v, xs);
}

inline std::vector<Example> load_examples(const std::filesystem::path& p, const Vocabulary& v) {
    auto in = detail::open_in(p);
    return read_examples_jsonl(in, v);
}

}  // namespace genir
