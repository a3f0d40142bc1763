#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "genir/corpus/corpus.hpp"
#include "genir/corpus/jsonl.hpp"

using namespace genir;

namespace {

std::string dump(const Corpus& c) {
    std::ostringstream os;
    write_corpus_jsonl(os, c);
    return os.str();
}

// Brute-force share of distinct tokens, independent of cluster_overlap.
double body_overlap(const Document& a, const Document& b) {
    std::set<TokenId> sa(a.body.begin(), a.body.end()), sb(b.body.begin(), b.body.end());
    std::size_t shared = 0;
    for (TokenId t : sa) shared += sb.count(t);
    return static_cast<double>(shared) / static_cast<double>(std::min(sa.size(), sb.size()));
}

}  // namespace

TEST(Vocabulary, PartitionIsSound) {
    const Vocabulary v(200, 100);
    EXPECT_EQ(v.size(), 302u);
    std::size_t words = 0, docids = 0, special = 0;
    for (TokenId t = 0; t < v.size(); ++t) {
        const int n = int(v.is_word(t)) + int(v.is_docid(t)) + int(v.is_special(t));
        EXPECT_EQ(n, 1) << t;
        words += v.is_word(t);
        docids += v.is_docid(t);
        special += v.is_special(t);
        EXPECT_EQ(v.require(v.symbol(t)), t);
    }
    EXPECT_EQ(words, 200u);
    EXPECT_EQ(docids, 100u);
    EXPECT_EQ(special, 2u);
    EXPECT_EQ(v.symbol(v.docid(42)), "D0042");
    EXPECT_THROW(v.kind(302), ValidationError);
}

TEST(GenerateCorpus, TwoDocumentsAreDeterministic) {
    const auto a = generate_corpus(7, 2, 40);
    const auto b = generate_corpus(7, 2, 40);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(dump(a), dump(b));
    EXPECT_LT(body_overlap(a.docs[0], a.docs[1]), 0.5);
    EXPECT_NE(dump(a), dump(generate_corpus(8, 2, 40)));
}

TEST(GenerateCorpus, HundredDocumentsPairwiseDistinct) {
    const auto c = generate_corpus(7, 100, 200);
    ASSERT_EQ(c.size(), 100u);
    for (std::size_t i = 0; i < c.size(); ++i) {
        const Document& d = c.docs[i];
        EXPECT_EQ(d.doc_id, c.vocab.docid(i));
        EXPECT_FALSE(d.body.empty());
        EXPECT_LE(d.body.size(), kMaxIndexLen);
        for (TokenId t : d.body) EXPECT_TRUE(c.vocab.is_word(t));
        for (std::size_t j = i + 1; j < c.size(); ++j) EXPECT_LT(body_overlap(d, c.docs[j]), 0.5) << i << "," << j;
    }
}

TEST(GenerateCorpus, RejectsInfeasibleParameters) {
    EXPECT_THROW(generate_corpus(1, 100, 20), ValidationError);
    EXPECT_THROW(generate_corpus(1, 1, 40), ValidationError);
    EXPECT_THROW(generate_corpus(1, 2, 19), ValidationError);
}

TEST(MakeQueries, MembershipAndSplits) {
    const auto c = generate_corpus(7, 20, 200);
    const auto qs = make_queries(c, 3, 10);
    ASSERT_EQ(qs.size(), 200u);
    std::map<TokenId, std::map<Split, int>> per_doc;
    for (const Example& e : qs) {
        const Document& d = c.by_docid(e.target);
        std::set<TokenId> body(d.body.begin(), d.body.end());
        std::size_t in_body = 0;
        for (TokenId t : e.input) in_body += body.count(t);
        EXPECT_GE(in_body, 3u);
        EXPECT_LE(in_body, 6u);
        EXPECT_LE(e.input.size() - in_body, 2u);
        per_doc[e.target][e.split]++;
    }
    for (auto& [doc, m] : per_doc) {
        EXPECT_EQ(m[Split::train], 6);
        EXPECT_EQ(m[Split::validation], 2);
        EXPECT_EQ(m[Split::test], 2);
    }
    // query sets are disjoint across splits of one document
    std::map<TokenId, std::set<std::vector<TokenId>>> keys;
    for (const Example& e : qs) {
        auto k = e.input;
        std::sort(k.begin(), k.end());
        EXPECT_TRUE(keys[e.target].insert(k).second);
    }
}

TEST(MakeQueries, ZeroQueriesGiveIndexingOnlyStream) {
    const auto c = generate_corpus(7, 10, 100);
    const auto qs = make_queries(c, 3, 0);
    EXPECT_TRUE(qs.empty());
    const auto set = build_examples(c, qs, 32, 1);
    EXPECT_EQ(set.stream.size(), 10u);
    EXPECT_EQ(set.count(ExampleKind::retrieve), 0u);
}

TEST(MakeQueries, SameSeedSameSplits) {
    const auto c = generate_corpus(7, 10, 100);
    EXPECT_EQ(make_queries(c, 5, 10), make_queries(c, 5, 10));
    EXPECT_THROW(make_queries(Corpus{}, 5, 10), ValidationError);
}

TEST(BuildExamples, RatioThirtyTwoBlocks) {
    const auto c = generate_corpus(7, 100, 200);
    const auto qs = make_queries(c, 7, 10);
    const auto set = build_examples(c, qs, 32, 7);
    ASSERT_EQ(set.stream.size() % 33, 0u);
    for (std::size_t b = 0; b < set.stream.size() / 33; ++b) {
        for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(set.stream[b * 33 + i].kind, ExampleKind::index);
        EXPECT_EQ(set.stream[b * 33 + 32].kind, ExampleKind::retrieve);
    }
}

TEST(BuildExamples, RatioOneAlternates) {
    const auto c = generate_corpus(7, 10, 100);
    const auto set = build_examples(c, make_queries(c, 7, 5), 1, 3);
    for (std::size_t i = 0; i < set.stream.size(); ++i) {
        EXPECT_EQ(set.stream[i].kind, i % 2 == 0 ? ExampleKind::index : ExampleKind::retrieve);
    }
}

TEST(BuildExamples, StreamCountsForRatioFive) {
    const auto c = generate_corpus(7, 10, 100);
    const auto qs = make_queries(c, 7, 2);  // one train + one validation query per document
    const auto set = build_examples(c, qs, 5, 3);
    std::size_t run = 0, blocks = 0;
    for (const Example& e : set.stream) {
        if (e.kind == ExampleKind::index) {
            ++run;
            continue;
        }
        EXPECT_EQ(run, 5u);
        EXPECT_EQ(e.split, Split::train);
        run = 0;
        ++blocks;
    }
    EXPECT_EQ(run, 0u);
    EXPECT_EQ(blocks, 10u);
    EXPECT_EQ(set.count(ExampleKind::index), 50u);
    // each document is indexed exactly five times
    std::map<TokenId, int> n;
    for (const Example& e : set.stream) n[e.target] += e.kind == ExampleKind::index;
    for (auto& [d, k] : n) EXPECT_EQ(k, 5);
    EXPECT_THROW(build_examples(c, qs, 0, 3), ValidationError);
}

TEST(Learnability, NearestNeighbourBaseline) {
    const auto c = generate_corpus(7, 100, 200);
    const auto qs = make_queries(c, 7, 30);
    EXPECT_GE(nn_baseline_accuracy(c, qs), 0.95);
}

TEST(Jsonl, RoundTrip) {
    const auto c = generate_corpus(7, 10, 100);
    const auto back = [&] {
        std::istringstream is(dump(c));
        return read_corpus_jsonl(is, c.vocab);
    }();
    EXPECT_EQ(dump(back), dump(c));
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(back.docs[i].cluster, c.docs[i].cluster);

    const auto qs = make_queries(c, 7, 5);
    std::ostringstream os;
    write_examples_jsonl(os, c.vocab, qs);
    std::istringstream is(os.str());
    EXPECT_EQ(read_examples_jsonl(is, c.vocab), qs);
    EXPECT_NE(os.str().find("\"kind\":\"retrieve\""), std::string::npos);
}

TEST(Jsonl, RejectsMalformedInput) {
    const Vocabulary v(20, 2);
    std::istringstream bad_symbol(R"({"doc_id":"D0000","body":["nope"]})");
    EXPECT_THROW(read_corpus_jsonl(bad_symbol, v), ValidationError);
    std::istringstream bad_json("{not json");
    EXPECT_THROW(read_corpus_jsonl(bad_json, v), ValidationError);
    std::istringstream bad_kind(R"({"kind":"other","input":["w001"],"target":"D0001"})");
    EXPECT_THROW(read_examples_jsonl(bad_kind, v), ValidationError);
}
