#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "test_util.hpp"

using namespace kbcheck;
using kbtest::TempDir;

namespace {

using Terms = std::vector<std::string>;

/// Straight transcription of the Lucene BM25 formula over raw token lists.
struct NaiveBm25 {
    std::vector<Terms> docs;
    double k1 = 0.9;
    double b = 0.4;

    double avgdl() const
    {
        double total = 0;
        for (const auto& d : docs) {
            total += static_cast<double>(d.size());
        }
        return total / static_cast<double>(docs.size());
    }

    double score(const Terms& query, std::size_t d) const
    {
        const double n = static_cast<double>(docs.size());
        const double avg = avgdl();
        double s = 0;
        for (const auto& q : query) {
            double df = 0;
            for (const auto& doc : docs) {
                df += std::find(doc.begin(), doc.end(), q) != doc.end() ? 1 : 0;
            }
            const double tf = static_cast<double>(std::count(docs[d].begin(), docs[d].end(), q));
            if (tf == 0) {
                continue;
            }
            const double idf = std::log(1 + (n - df + 0.5) / (df + 0.5));
            const double len = static_cast<double>(docs[d].size());
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg));
        }
        return s;
    }
};

KnowledgeBase random_kb(std::mt19937& rng, std::size_t n_docs, std::size_t vocab, std::size_t max_len)
{
    KnowledgeBase kb;
    kb.name = "rand";
    for (std::size_t d = 0; d < n_docs; ++d) {
        std::string text;
        const std::size_t len = 1 + rng() % max_len;
        for (std::size_t w = 0; w < len; ++w) {
            // skewed so some terms are frequent
            const auto t = std::min(rng() % vocab, rng() % vocab);
            text += "w" + std::to_string(t) + " ";
        }
        char id[16];
        std::snprintf(id, sizeof id, "doc%05zu", d);
        kb.documents.push_back(make_document(id, std::nullopt, text));
    }
    return kb;
}

} // namespace

TEST(Tokenize, LowercasesAndSplitsOnPunctuation)
{
    EXPECT_EQ(tokenize("Polar bears, ICE-shelves & U.S. 2012!"),
              (Terms{"polar", "bears", "ice", "shelves", "u", "s", "2012"}));
    EXPECT_EQ(tokenize("don't"), (Terms{"don", "t"}));
    EXPECT_EQ(tokenize("Global warming is real."), (Terms{"global", "warming", "is", "real"}));
    EXPECT_EQ(tokenize("anti-IL-2 receptor"), (Terms{"anti", "il", "2", "receptor"}));
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_TRUE(tokenize("  ...  ").empty());
}

TEST(Tokenize, KeepsNonAsciiBytesInsideWords)
{
    EXPECT_EQ(tokenize("Caf\xC3\xA9 na\xC3\xAFve"), (Terms{"caf\xC3\xA9", "na\xC3\xAFve"}));
}

TEST(InvertedIndex, TwoDocumentStatistics)
{
    auto kb = kbtest::make_kb("kb", {{"x", "a b"}, {"y", "a a"}});
    auto index = InvertedIndex::build(kb);
    EXPECT_EQ(index.doc_count(), 2u);
    EXPECT_DOUBLE_EQ(index.avg_doc_length(), 2.0);
    EXPECT_EQ(index.doc_freq("a"), 2u);
    EXPECT_EQ(index.doc_freq("b"), 1u);
    EXPECT_EQ(index.term_frequency("a", 1), 2u);
    EXPECT_EQ(index.term_frequency("b", 1), 0u);
    EXPECT_EQ(index.term_count(), 2u);
}

TEST(InvertedIndex, SingleDocumentAverageIsItsLength)
{
    auto index = InvertedIndex::build(kbtest::make_kb("kb", {{"d", "one two three four"}}));
    EXPECT_DOUBLE_EQ(index.avg_doc_length(), 4.0);
}

TEST(InvertedIndex, TitleIsIndexed)
{
    KnowledgeBase kb;
    kb.name = "kb";
    kb.documents.push_back(make_document("d1", "Walrus", "tusks"));
    auto index = InvertedIndex::build(kb);
    EXPECT_EQ(index.doc_freq("walrus"), 1u);
    EXPECT_EQ(index.doc_length(0), 2u);
}

TEST(InvertedIndex, EmptyKnowledgeBaseRejected)
{
    KnowledgeBase kb;
    kb.name = "empty";
    EXPECT_THROW(InvertedIndex::build(kb), Error);
}

TEST(InvertedIndex, PostingsMatchBruteForceCounts)
{
    std::mt19937 rng(11);
    auto kb = random_kb(rng, 10000, 400, 30);
    auto index = InvertedIndex::build(kb, 4);

    std::map<std::string, std::map<std::uint32_t, std::uint32_t>> oracle;
    for (std::uint32_t d = 0; d < kb.documents.size(); ++d) {
        for (const auto& t : tokenize(kb.documents[d].text)) {
            ++oracle[t][d];
        }
    }
    ASSERT_EQ(index.term_count(), oracle.size());
    for (const auto& [term, per_doc] : oracle) {
        auto list = index.postings(term);
        ASSERT_EQ(list.size(), per_doc.size()) << term;
        std::size_t i = 0;
        for (const auto& [doc, tf] : per_doc) {
            EXPECT_EQ(list[i].doc, doc);
            EXPECT_EQ(list[i].tf, tf);
            ++i;
        }
    }
}

TEST(InvertedIndex, ThreadCountDoesNotChangeResult)
{
    std::mt19937 rng(3);
    auto kb = random_kb(rng, 997, 120, 25);
    auto serial = InvertedIndex::build(kb, 1);
    auto parallel = InvertedIndex::build(kb, 7);
    TempDir tmp;
    serial.save(tmp / "a.idx");
    parallel.save(tmp / "b.idx");
    EXPECT_EQ(kbtest::read_text(tmp / "a.idx"), kbtest::read_text(tmp / "b.idx"));
}

TEST(Bm25, SingleDocumentSingleTerm)
{
    auto index = InvertedIndex::build(kbtest::make_kb("kb", {{"d", "a"}}));
    const Terms q{"a"};
    EXPECT_NEAR(bm25_score(index, q, 0), std::log(4.0 / 3.0), 1e-12);
    EXPECT_NEAR(bm25_score(index, q, 0), 0.2877, 1e-4);
}

TEST(Bm25, EmptyQueryScoresZero)
{
    auto index = InvertedIndex::build(kbtest::make_kb("kb", {{"d", "a b"}}));
    EXPECT_EQ(bm25_score(index, Terms{}, 0), 0.0);
    EXPECT_EQ(bm25_score(index, Terms{"zzz"}, 0), 0.0);
    EXPECT_TRUE(index.top_k(Terms{}, 5).empty());
}

TEST(Bm25, PolarBearRanking)
{
    auto index = InvertedIndex::build(kbtest::make_kb(
        "kb", {{"d1", "polar bear ice"}, {"d2", "bear market stocks"}, {"d3", "ice cream"}}));
    NaiveBm25 naive{{{"polar", "bear", "ice"}, {"bear", "market", "stocks"}, {"ice", "cream"}}};
    const Terms q{"polar", "bear"};
    auto hits = index.top_k(q, 5);
    ASSERT_EQ(hits.size(), 2u);
    EXPECT_EQ(index.document(hits[0].doc).id, "d1");
    EXPECT_EQ(index.document(hits[1].doc).id, "d2");
    EXPECT_NEAR(hits[0].score, naive.score(q, 0), 1e-12);
    EXPECT_NEAR(hits[1].score, naive.score(q, 1), 1e-12);
}

TEST(Bm25, MatchesNaiveFormulaOnRandomCorpora)
{
    std::mt19937 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto kb = random_kb(rng, 60, 25, 12);
        NaiveBm25 naive;
        for (const auto& d : kb.documents) {
            naive.docs.push_back(tokenize(d.text));
        }
        auto index = InvertedIndex::build(kb);
        Terms q;
        for (int i = 0; i < 3; ++i) {
            q.push_back("w" + std::to_string(rng() % 30));
        }
        for (std::uint32_t d = 0; d < kb.documents.size(); ++d) {
            EXPECT_NEAR(bm25_score(index, q, d), naive.score(q, d), 1e-9);
        }
        // top_k agrees with a full sort of the naive scores
        std::vector<std::pair<double, std::string>> all;
        for (std::uint32_t d = 0; d < kb.documents.size(); ++d) {
            const double s = naive.score(q, d);
            if (s > 0) {
                all.emplace_back(-s, kb.documents[d].id);
            }
        }
        std::sort(all.begin(), all.end());
        auto hits = index.top_k(q, 5);
        ASSERT_EQ(hits.size(), std::min<std::size_t>(5, all.size()));
        for (std::size_t i = 0; i < hits.size(); ++i) {
            EXPECT_NEAR(hits[i].score, -all[i].first, 1e-9);
        }
    }
}

TEST(Bm25, MoreOccurrencesScoreHigherAtEqualLength)
{
    auto index = InvertedIndex::build(kbtest::make_kb(
        "kb", {{"d1", "seal seal ice"}, {"d2", "seal ice ice"}, {"d3", "cream cone cup"}}));
    const Terms q{"seal"};
    EXPECT_GT(bm25_score(index, q, 0), bm25_score(index, q, 1));
}

TEST(Bm25, TiesBreakByDocumentId)
{
    auto index = InvertedIndex::build(kbtest::make_kb("kb", {{"zz", "bear"}, {"aa", "bear"}, {"mm", "cat"}}));
    auto hits = index.top_k(Terms{"bear"}, 5);
    ASSERT_EQ(hits.size(), 2u);
    EXPECT_EQ(index.document(hits[0].doc).id, "aa");
    EXPECT_EQ(index.document(hits[1].doc).id, "zz");
}

TEST(Snapshot, RoundTripGivesIdenticalResults)
{
    TempDir tmp;
    auto kb = load_kb(kbtest::fixture("pipeline/kb_wiki.jsonl"), "wiki");
    auto index = InvertedIndex::build(kb);
    index.save(tmp / "wiki.idx");
    auto loaded = InvertedIndex::load(tmp / "wiki.idx");
    EXPECT_EQ(loaded.doc_count(), index.doc_count());
    EXPECT_EQ(loaded.term_count(), index.term_count());
    EXPECT_DOUBLE_EQ(loaded.avg_doc_length(), index.avg_doc_length());
    EXPECT_EQ(loaded.documents(), index.documents());
    for (const auto& doc : kb.documents) {
        const auto q = tokenize(doc.sentences.front());
        auto a = index.top_k(q, 5);
        auto b = loaded.top_k(q, 5);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            EXPECT_EQ(a[i].doc, b[i].doc);
            EXPECT_EQ(a[i].score, b[i].score);
        }
    }
    // rebuilding writes the same bytes
    InvertedIndex::build(kb).save(tmp / "again.idx");
    EXPECT_EQ(kbtest::read_text(tmp / "wiki.idx"), kbtest::read_text(tmp / "again.idx"));
}

TEST(Snapshot, RejectsOtherVersionsAndGarbage)
{
    TempDir tmp;
    InvertedIndex::build(kbtest::make_kb("kb", {{"d", "a b"}})).save(tmp / "ok.idx");
    auto bytes = kbtest::read_text(tmp / "ok.idx");
    bytes[4] = 2;
    kbtest::write_text(tmp / "v2.idx", bytes);
    try {
        InvertedIndex::load(tmp / "v2.idx");
        FAIL() << "expected SnapshotFormat";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SnapshotFormat);
    }
    kbtest::write_text(tmp / "junk.idx", "not an index");
    EXPECT_THROW(InvertedIndex::load(tmp / "junk.idx"), Error);
    kbtest::write_text(tmp / "short.idx", bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(InvertedIndex::load(tmp / "short.idx"), Error);
}
