#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "genir/corpus/vocabulary.hpp"
#include "genir/errors.hpp"
#include "genir/numerics/rng.hpp"

namespace genir {

inline constexpr std::size_t kMaxIndexLen = 32;

struct Document {
    TokenId doc_id = 0;
    std::vector<TokenId> body;     // length <= kMaxIndexLen
    std::vector<TokenId> cluster;  // distinct body tokens, ascending
};

struct Corpus {
    Vocabulary vocab;
    std::vector<Document> docs;

    std::size_t size() const noexcept { return docs.size(); }
    const Document* find(TokenId id) const noexcept {
        if (!vocab.is_docid(id)) return nullptr;
        const std::size_t i = vocab.docid_index(id);
        if (i < docs.size() && docs[i].doc_id == id) return &docs[i];
        for (const Document& d : docs)
            if (d.doc_id == id) return &d;
        return nullptr;
    }
    const Document& by_docid(TokenId id) const {
        if (const Document* d = find(id)) return *d;
        throw ValidationError("corpus has no document " + vocab.symbol(id));
    }
};

struct CorpusOptions {
    std::size_t cluster_min = 5;
    std::size_t cluster_max = 7;
    std::size_t min_body_len = 8;
    std::size_t attempts_per_doc = 20000;
};

/// |A ∩ B| / min(|A|, |B|) over the distinct token sets of two sorted lists.
inline double cluster_overlap(std::span<const TokenId> a, std::span<const TokenId> b) {
    std::size_t shared = 0;
    auto i = a.begin();
    auto j = b.begin();
    while (i != a.end() && j != b.end()) {
        if (*i < *j) ++i;
        else if (*j < *i) ++j;
        else { ++shared; ++i; ++j; }
    }
    const std::size_t m = std::min(a.size(), b.size());
    return m == 0 ? 0.0 : static_cast<double>(shared) / static_cast<double>(m);
}

/// Synthetic corpus: each document owns a random topic cluster of word tokens and its body
/// is a shuffled sample over that cluster containing every cluster token at least once.
/// Clusters are drawn by rejection so that any two documents share < 50% of body tokens.
inline Corpus generate_corpus(std::uint64_t seed, std::size_t n_docs, std::size_t n_word_tokens,
                              const CorpusOptions& opt = {}) {
    if (n_docs < 2) throw ValidationError("generate_corpus: n_docs must be >= 2");
    if (n_word_tokens < 20) throw ValidationError("generate_corpus: n_word_tokens must be >= 20");
    if (opt.cluster_min < 3 || opt.cluster_min > opt.cluster_max || opt.cluster_max > kMaxIndexLen) {
        throw ValidationError("generate_corpus: cluster size range must satisfy 3 <= min <= max <= 32");
    }
    if (opt.cluster_max > n_word_tokens) {
        throw ValidationError("generate_corpus: cluster size exceeds the word vocabulary");
    }
    if (n_word_tokens < n_docs) {
        throw ValidationError("generate_corpus: distinctness unsatisfiable, " +
                              std::to_string(n_word_tokens) + " word tokens for " +
                              std::to_string(n_docs) + " documents (need at least one per document)");
    }

    Corpus c{Vocabulary(n_word_tokens, n_docs), {}};
    c.docs.reserve(n_docs);
    Rng rng(seed);
    std::vector<TokenId> all_words(n_word_tokens);
    for (std::size_t i = 0; i < n_word_tokens; ++i) all_words[i] = c.vocab.word(i);

    for (std::size_t d = 0; d < n_docs; ++d) {
        std::vector<TokenId> cluster;
        bool placed = false;
        for (std::size_t attempt = 0; attempt < opt.attempts_per_doc && !placed; ++attempt) {
            const std::size_t k = rng.between(opt.cluster_min, opt.cluster_max);
            cluster = rng.sample(all_words, k);
            std::sort(cluster.begin(), cluster.end());
            placed = std::all_of(c.docs.begin(), c.docs.end(), [&](const Document& o) {
                return cluster_overlap(cluster, o.cluster) < 0.5;
            });
        }
        if (!placed) {
            throw ValidationError("generate_corpus: distinctness unsatisfiable, no admissible cluster for document " +
                                  std::to_string(d));
        }
        const std::size_t k = cluster.size();
        const std::size_t lo = std::max(opt.min_body_len, k);
        const std::size_t hi = std::min(kMaxIndexLen, std::max(lo, 2 * k));
        const std::size_t len = rng.between(lo, hi);
        std::vector<TokenId> body = cluster;
        while (body.size() < len) body.push_back(cluster[rng.index(k)]);
        rng.shuffle(body.begin(), body.end());
        c.docs.push_back(Document{c.vocab.docid(d), std::move(body), std::move(cluster)});
    }
    return c;
}

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation" || s == "val") return Split::validation;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "'");
}

enum class ExampleKind { index, retrieve };

struct Example {
    ExampleKind kind = ExampleKind::index;
    std::vector<TokenId> input;
    TokenId target = 0;
    Split split = Split::train;

    bool operator==(const Example&) const = default;
};

struct QueryOptions {
    std::size_t min_cluster_tokens = 3;
    std::size_t max_cluster_tokens = 6;
    std::size_t max_noise = 2;
    std::size_t attempts_per_query = 1000;
};

/// Retrieval queries: 3-6 cluster tokens of the target document plus up to 2 noise words.
/// Per document, the first queries go to train, then validation, then test, with
/// n_val = n_test = max(1, q / 5) when q >= 3.
inline std::vector<Example> make_queries(const Corpus& corpus, std::uint64_t seed,
                                         std::size_t n_queries_per_doc, const QueryOptions& opt = {}) {
    if (corpus.docs.empty()) throw ValidationError("make_queries: empty corpus");
    std::vector<Example> out;
    out.reserve(corpus.size() * n_queries_per_doc);
    Rng rng(derive_seed(seed, 0x51));
    const std::size_t q = n_queries_per_doc;
    const std::size_t n_held = q >= 3 ? std::max<std::size_t>(1, q / 5) : 0;
    const std::size_t n_val = q == 2 ? 1 : n_held;
    const std::size_t n_test = n_held;
    const std::size_t n_train = q - n_val - n_test;

    for (const Document& doc : corpus.docs) {
        std::vector<TokenId> outside;
        for (std::size_t w = 0; w < corpus.vocab.word_count(); ++w) {
            const TokenId t = corpus.vocab.word(w);
            if (!std::binary_search(doc.cluster.begin(), doc.cluster.end(), t)) outside.push_back(t);
        }
        std::set<std::vector<TokenId>> seen;
        const std::size_t kmax = std::min(opt.max_cluster_tokens, doc.cluster.size());
        const std::size_t kmin = std::min(opt.min_cluster_tokens, kmax);
        std::size_t misses = 0;
        std::size_t made = 0;
        while (made < q) {
            std::vector<TokenId> query = rng.sample(doc.cluster, rng.between(kmin, kmax));
            const std::size_t nn = std::min(rng.between(0, opt.max_noise), outside.size());
            for (TokenId t : rng.sample(outside, nn)) query.push_back(t);
            rng.shuffle(query.begin(), query.end());
            std::vector<TokenId> key = query;
            std::sort(key.begin(), key.end());
            if (!seen.insert(key).second) {
                if (++misses > opt.attempts_per_query * q) {
                    throw ValidationError("make_queries: cannot form " + std::to_string(q) +
                                          " distinct queries for " + corpus.vocab.symbol(doc.doc_id));
                }
                continue;
            }
            const Split s = made < n_train ? Split::train
                            : made < n_train + n_val ? Split::validation
                                                     : Split::test;
            out.push_back(Example{ExampleKind::retrieve, std::move(query), doc.doc_id, s});
            ++made;
        }
    }
    return out;
}

/// Training stream plus the components it was built from.
struct ExampleSet {
    std::vector<Example> indexing_examples;
    std::vector<Example> retrieval_examples;  // train split only
    std::size_t ratio = 1;
    std::vector<Example> stream;

    std::size_t count(ExampleKind k) const {
        return static_cast<std::size_t>(
            std::count_if(stream.begin(), stream.end(), [k](const Example& e) { return e.kind == k; }));
    }
};

inline Example indexing_example(const Document& d) {
    std::vector<TokenId> in(d.body.begin(), d.body.begin() + std::min(d.body.size(), kMaxIndexLen));
    return Example{ExampleKind::index, std::move(in), d.doc_id, Split::train};
}

/// Interleaves `ratio` indexing examples (cycling a shuffled document order) before every
/// train-split retrieval example. Without retrieval examples the stream is one pass over
/// the indexing examples.
inline ExampleSet build_examples(const Corpus& corpus, std::span<const Example> queries,
                                 std::size_t ratio, std::uint64_t seed) {
    if (ratio < 1) throw ValidationError("build_examples: ratio must be >= 1");
    ExampleSet set;
    set.ratio = ratio;
    for (const Document& d : corpus.docs) set.indexing_examples.push_back(indexing_example(d));
    for (const Example& e : queries) {
        if (e.kind != ExampleKind::retrieve) continue;
        if (!corpus.find(e.target)) {
            throw ValidationError("build_examples: retrieval target not in corpus");
        }
        if (e.split == Split::train) set.retrieval_examples.push_back(e);
    }
    Rng rng(derive_seed(seed, 0xB1));
    std::vector<std::size_t> order(set.indexing_examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::size_t> ret(set.retrieval_examples.size());
    for (std::size_t i = 0; i < ret.size(); ++i) ret[i] = i;
    rng.shuffle(ret.begin(), ret.end());

    if (ret.empty()) {
        for (std::size_t i : order) set.stream.push_back(set.indexing_examples[i]);
        return set;
    }
    set.stream.reserve(ret.size() * (ratio + 1));
    std::size_t cursor = 0;
    for (std::size_t r : ret) {
        for (std::size_t k = 0; k < ratio; ++k) {
            set.stream.push_back(set.indexing_examples[order[cursor]]);
            if (++cursor == order.size()) {
                cursor = 0;
                rng.shuffle(order.begin(), order.end());
            }
        }
        set.stream.push_back(set.retrieval_examples[r]);
    }
    return set;
}

inline std::vector<Example> select_split(std::span<const Example> queries, Split s) {
    std::vector<Example> out;
    for (const Example& e : queries) {
        if (e.kind == ExampleKind::retrieve && e.split == s) out.push_back(e);
    }
    return out;
}

/// Bag-of-words nearest neighbour: score |q ∩ cluster| / sqrt(|cluster|), ties to the lower id.
inline TokenId nearest_document(const Corpus& corpus, std::span<const TokenId> query) {
    std::vector<TokenId> q(query.begin(), query.end());
    std::sort(q.begin(), q.end());
    q.erase(std::unique(q.begin(), q.end()), q.end());
    double best = -1.0;
    TokenId arg = corpus.docs.front().doc_id;
    for (const Document& d : corpus.docs) {
        std::size_t shared = 0;
        for (TokenId t : q) shared += std::binary_search(d.cluster.begin(), d.cluster.end(), t);
        const double s = static_cast<double>(shared) / std::sqrt(static_cast<double>(d.cluster.size()));
        if (s > best) {
            best = s;
            arg = d.doc_id;
        }
    }
    return arg;
}

inline double nn_baseline_accuracy(const Corpus& corpus, std::span<const Example> queries) {
    if (queries.empty()) return 1.0;
    std::size_t hit = 0;
    for (const Example& e : queries) hit += nearest_document(corpus, e.input) == e.target;
    return static_cast<double>(hit) / static_cast<double>(queries.size());
}

struct HeldOut {
    Corpus corpus;                  // remaining documents
    std::vector<Example> queries;   // queries of the remaining documents
};

/// Drops documents (and every query targeting them) so a model can be trained without them.
inline HeldOut hold_out(const Corpus& corpus, std::span<const Example> queries, std::span<const TokenId> removed) {
    auto gone = [&](TokenId t) { return std::find(removed.begin(), removed.end(), t) != removed.end(); };
    for (TokenId t : removed) corpus.by_docid(t);
    HeldOut h{Corpus{corpus.vocab, {}}, {}};
    for (const Document& d : corpus.docs)
        if (!gone(d.doc_id)) h.corpus.docs.push_back(d);
    if (h.corpus.docs.empty()) throw ValidationError("hold_out: no documents left");
    for (const Example& e : queries)
        if (!gone(e.target)) h.queries.push_back(e);
    return h;
}

/// `groups` disjoint sets of `size` documents each, drawn without replacement.
inline std::vector<std::vector<TokenId>> holdout_groups(const Corpus& corpus, std::uint64_t seed, std::size_t groups,
                                                        std::size_t size) {
    if (groups * size >= corpus.size()) throw ValidationError("holdout_groups: not enough documents");
    std::vector<TokenId> ids;
    for (const Document& d : corpus.docs) ids.push_back(d.doc_id);
    Rng rng(derive_seed(seed, 0x4E1D));
    const auto picked = rng.sample(ids, groups * size);
    std::vector<std::vector<TokenId>> out(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        out[g].assign(picked.begin() + static_cast<std::ptrdiff_t>(g * size),
                      picked.begin() + static_cast<std::ptrdiff_t>((g + 1) * size));
        std::sort(out[g].begin(), out[g].end());
    }
    return out;
}

}  // namespace genir
