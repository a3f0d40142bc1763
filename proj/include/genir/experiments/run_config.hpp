#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "genir/corpus/corpus.hpp"
#include "genir/errors.hpp"
#include "genir/model/config.hpp"
#include "genir/training/train.hpp"

namespace genir {

struct CorpusConfig {
    std::size_t n_docs = 100;
    std::size_t n_words = 200;
    std::size_t queries_per_doc = 30;
    CorpusOptions options;
    QueryOptions queries;
};

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = {{"n_docs", c.n_docs},
         {"n_words", c.n_words},
         {"queries_per_doc", c.queries_per_doc},
         {"cluster_min", c.options.cluster_min},
         {"cluster_max", c.options.cluster_max},
         {"min_body_len", c.options.min_body_len},
         {"query_min_cluster_tokens", c.queries.min_cluster_tokens},
         {"query_max_cluster_tokens", c.queries.max_cluster_tokens},
         {"query_max_noise", c.queries.max_noise}};
}

inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
    const CorpusConfig d;
    c.n_docs = j.value("n_docs", d.n_docs);
    c.n_words = j.value("n_words", d.n_words);
    c.queries_per_doc = j.value("queries_per_doc", d.queries_per_doc);
    c.options.cluster_min = j.value("cluster_min", d.options.cluster_min);
    c.options.cluster_max = j.value("cluster_max", d.options.cluster_max);
    c.options.min_body_len = j.value("min_body_len", d.options.min_body_len);
    c.queries.min_cluster_tokens = j.value("query_min_cluster_tokens", d.queries.min_cluster_tokens);
    c.queries.max_cluster_tokens = j.value("query_max_cluster_tokens", d.queries.max_cluster_tokens);
    c.queries.max_noise = j.value("query_max_noise", d.queries.max_noise);
}

/// Everything needed to rebuild a run from scratch: corpus generator settings, model shape
/// and training recipe. The training seed also seeds the corpus and the initialisation.
struct RunConfig {
    CorpusConfig corpus;
    ModelConfig model;
    TrainConfig train;

    /// Keeps the model vocabulary consistent with the corpus.
    void sync() {
        model.n_words = corpus.n_words;
        model.n_docids = corpus.n_docs;
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"corpus", c.corpus}, {"model", c.model}, {"train", c.train}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c = RunConfig{};
    if (j.contains("corpus")) c.corpus = j.at("corpus").get<CorpusConfig>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    c.sync();
}

inline RunConfig load_run_config(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ValidationError("cannot open config " + p.string());
    try {
        return nlohmann::json::parse(in).get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad config " + p.string() + ": " + e.what());
    }
}

struct Dataset {
    Corpus corpus;
    std::vector<Example> queries;
};

inline Dataset make_dataset(const CorpusConfig& c, std::uint64_t seed) {
    Dataset d{generate_corpus(seed, c.n_docs, c.n_words, c.options), {}};
    d.queries = make_queries(d.corpus, seed, c.queries_per_doc, c.queries);
    return d;
}

}  // namespace genir
