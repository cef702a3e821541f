#include <gtest/gtest.h>

#include <mutex>

#include <nlohmann/json.hpp>

#include "test_util.hpp"

using namespace kbcheck;

namespace {

/// Returns a preset list of scores regardless of input; counts calls.
class ScriptedScorer final : public EvidenceScorer {
public:
    explicit ScriptedScorer(std::vector<double> scores) : scores_(std::move(scores)) {}
    std::vector<double> score(std::span<const SentencePair> pairs) const override
    {
        ++calls;
        last_batch = pairs.size();
        return scores_;
    }
    mutable int calls = 0;
    mutable std::size_t last_batch = 0;

private:
    std::vector<double> scores_;
};

Claim claim_of(std::string text) { return {"c", std::move(text), std::nullopt}; }

std::vector<Document> three_docs()
{
    return {make_document("d1", std::nullopt, "S1. S2."), make_document("d2", std::nullopt, "S3. S4."),
            make_document("d3", std::nullopt, "S5. S6.")};
}

} // namespace

TEST(LexicalScore, JaccardExample)
{
    EXPECT_NEAR(lexical_score("polar bears hunt seals", "polar bears hunt fish"), 0.02 + 0.96 * 0.6, 1e-12);
    EXPECT_NEAR(lexical_score("polar bears extinction", "polar bears face extinction risk"), 0.596, 1e-12);
    EXPECT_NEAR(lexical_score("Global warming is real.", "global WARMING is real"), 0.98, 1e-12);
    EXPECT_NEAR(lexical_score("a b", "c d"), 0.02, 1e-12);
    EXPECT_NEAR(lexical_score("A b", "b a a"), 0.98, 1e-12);
    EXPECT_NEAR(lexical_score("", ""), 0.02, 1e-12);
}

TEST(LexicalScore, SymmetricAndInsideOpenInterval)
{
    std::mt19937 rng(9);
    const std::vector<std::string> words{"bear", "ice", "seal", "polar", "arctic", "melt", "sea"};
    for (int i = 0; i < 300; ++i) {
        std::string a;
        std::string b;
        for (std::size_t w = rng() % 5; w > 0; --w) {
            a += words[rng() % words.size()] + " ";
        }
        for (std::size_t w = rng() % 5; w > 0; --w) {
            b += words[rng() % words.size()] + " ";
        }
        const double s = lexical_score(a, b);
        EXPECT_EQ(s, lexical_score(b, a));
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

TEST(SelectEvidence, KeepsTopFiveInScoreOrder)
{
    ScriptedScorer scorer({0.9, 0.1, 0.2, 0.8, 0.7, 0.3});
    const auto docs = three_docs();
    auto ev = select_evidence(claim_of("claim"), docs, scorer);
    EXPECT_EQ(scorer.calls, 1);
    EXPECT_EQ(scorer.last_batch, 6u);
    ASSERT_EQ(ev.sentences.size(), 5u);
    std::vector<std::string> texts;
    std::vector<double> scores;
    for (const auto& s : ev.sentences) {
        texts.push_back(s.text);
        scores.push_back(s.score);
    }
    EXPECT_EQ(texts, (std::vector<std::string>{"S1.", "S4.", "S5.", "S6.", "S3."}));
    EXPECT_EQ(scores, (std::vector<double>{0.9, 0.8, 0.7, 0.3, 0.2}));
    EXPECT_EQ(ev.max_score, 0.9);
    EXPECT_EQ(ev.sentences[1].doc_id, "d2");
    EXPECT_EQ(ev.sentences[1].sentence_index, 1u);
}

TEST(SelectEvidence, TiesBreakByDocumentThenSentence)
{
    ScriptedScorer scorer({0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    std::vector<Document> docs{make_document("b", std::nullopt, "B0. B1."), make_document("a", std::nullopt, "A0. A1."),
                               make_document("c", std::nullopt, "C0. C1.")};
    auto ev = select_evidence(claim_of("x"), docs, scorer, 4);
    std::vector<std::string> texts;
    for (const auto& s : ev.sentences) {
        texts.push_back(s.text);
    }
    EXPECT_EQ(texts, (std::vector<std::string>{"A0.", "A1.", "B0.", "B1."}));
}

TEST(SelectEvidence, FewerSentencesThanNAndNoDocuments)
{
    ScriptedScorer scorer({0.4, 0.6});
    std::vector<Document> docs{make_document("d", std::nullopt, "One. Two.")};
    auto ev = select_evidence(claim_of("x"), docs, scorer);
    EXPECT_EQ(ev.sentences.size(), 2u);
    EXPECT_EQ(ev.max_score, 0.6);

    ScriptedScorer never({});
    auto none = select_evidence(claim_of("x"), std::span<const Document>{}, never);
    EXPECT_TRUE(none.empty());
    EXPECT_EQ(none.max_score, 0.0);
    EXPECT_EQ(never.calls, 0);
}

TEST(SelectEvidence, RejectsBadScorerOutput)
{
    const auto docs = three_docs();
    ScriptedScorer short_list({0.5});
    EXPECT_THROW(select_evidence(claim_of("x"), docs, short_list), Error);
    ScriptedScorer out_of_range({0.5, 0.5, 1.0, 0.5, 0.5, 0.5});
    EXPECT_THROW(select_evidence(claim_of("x"), docs, out_of_range), Error);
    ScriptedScorer fine({0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
    EXPECT_THROW(select_evidence(claim_of("x"), docs, fine, 0), Error);
}

TEST(SelectEvidence, LabelsSourceKnowledgeBase)
{
    kbtest::HashScorer scorer;
    const auto docs = three_docs();
    const std::vector<std::string> sources{"wiki", "sci", "wiki"};
    auto ev = select_evidence(claim_of("x"), docs, scorer, 6, sources);
    for (const auto& s : ev.sentences) {
        EXPECT_EQ(s.source_kb, s.doc_id == "d2" ? "sci" : "wiki");
    }
}

TEST(SelectEvidence, BatchScoringMatchesPerSentenceScoring)
{
    LexicalScorer scorer;
    auto kb = load_kb(kbtest::fixture("pipeline/kb_science.jsonl"), "sci");
    const auto claim = claim_of("Sea ice extent in the Arctic has declined since 1979.");
    auto ev = select_evidence(claim, kb.documents, scorer, 1000);
    for (const auto& s : ev.sentences) {
        EXPECT_EQ(s.score, lexical_score(claim.text, s.text));
    }
    for (std::size_t i = 1; i < ev.sentences.size(); ++i) {
        EXPECT_FALSE(evidence_before(ev.sentences[i], ev.sentences[i - 1]));
    }
}

TEST(RemoteScorer, ChunksClampsAndPreservesOrder)
{
    std::mutex mu;
    std::vector<std::size_t> batch_sizes;
    kbtest::TestServer server([&](httplib::Server& s) {
        s.Post("/score_evidence", [&](const httplib::Request& req, httplib::Response& res) {
            auto body = nlohmann::json::parse(req.body);
            const auto& pairs = body.at("pairs");
            {
                std::lock_guard lock(mu);
                batch_sizes.push_back(pairs.size());
            }
            nlohmann::json scores = nlohmann::json::array();
            for (const auto& p : pairs) {
                const auto sentence = p.at("sentence").get<std::string>();
                if (sentence == "hi") {
                    scores.push_back(0.99999999);
                } else if (sentence == "lo") {
                    scores.push_back(0.0);
                } else {
                    scores.push_back(std::stod(sentence) / 1000.0);
                }
            }
            res.set_content(nlohmann::json{{"scores", scores}}.dump(), "application/json");
        });
    });
    RemoteScorer scorer(server.options());
    std::vector<SentencePair> pairs;
    for (int i = 0; i < 128; ++i) {
        pairs.push_back({"claim", std::to_string(i + 1)});
    }
    pairs.push_back({"claim", "hi"});
    pairs.push_back({"claim", "lo"});
    auto scores = scorer.score(pairs);
    ASSERT_EQ(scores.size(), 130u);
    EXPECT_EQ(batch_sizes, (std::vector<std::size_t>{64, 64, 2}));
    for (int i = 0; i < 128; ++i) {
        EXPECT_DOUBLE_EQ(scores[i], (i + 1) / 1000.0);
    }
    EXPECT_EQ(scores[128], 1.0 - 1e-6);
    EXPECT_EQ(scores[129], 1e-6);
    EXPECT_TRUE(scorer.score({}).empty());
    EXPECT_EQ(batch_sizes.size(), 3u);
}

TEST(RemoteScorer, ProtocolErrorsAreNotRetried)
{
    std::atomic<int> calls{0};
    std::atomic<int> mode{0};
    kbtest::TestServer server([&](httplib::Server& s) {
        s.Post("/score_evidence", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            switch (mode.load()) {
            case 0: res.set_content(R"({"scores":[0.5]})", "application/json"); break;
            case 1: res.set_content(R"({"scores":["high","low"]})", "application/json"); break;
            case 2: res.set_content(R"({"other":1})", "application/json"); break;
            default: res.set_content("not json", "text/plain"); break;
            }
        });
    });
    RemoteScorer scorer(server.options(3));
    const std::vector<SentencePair> pairs{{"c", "a"}, {"c", "b"}};
    for (int m = 0; m < 4; ++m) {
        mode = m;
        calls = 0;
        try {
            scorer.score(pairs);
            FAIL() << "mode " << m;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::ProtocolError) << "mode " << m;
        }
        EXPECT_EQ(calls.load(), 1);
    }
}

TEST(RemoteScorer, RetriesThenGivesUp)
{
    std::atomic<int> calls{0};
    kbtest::TestServer server([&](httplib::Server& s) {
        s.Post("/score_evidence", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 500;
        });
    });
    RemoteScorer scorer(server.options(3));
    try {
        scorer.score(std::vector<SentencePair>{{"c", "s"}});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ScorerUnavailable);
    }
    EXPECT_EQ(calls.load(), 4);
}

TEST(RemoteScorer, EndpointPathPrefix)
{
    kbtest::TestServer server([](httplib::Server& s) {
        s.Post("/v1/score_evidence", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"scores":[0.25]})", "application/json");
        });
    });
    auto opts = server.options();
    opts.endpoint = server.url() + "/v1/";
    RemoteScorer scorer(opts);
    EXPECT_EQ(scorer.score(std::vector<SentencePair>{{"c", "s"}}), std::vector<double>{0.25});
}

TEST(InFlightLimiter, CapsConcurrentRequests)
{
    std::atomic<int> active{0};
    std::atomic<int> peak{0};
    kbtest::TestServer server([&](httplib::Server& s) {
        s.Post("/score_evidence", [&](const httplib::Request&, httplib::Response& res) {
            const int now = ++active;
            int prev = peak.load();
            while (now > prev && !peak.compare_exchange_weak(prev, now)) {
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
            --active;
            res.set_content(R"({"scores":[0.5]})", "application/json");
        });
    });
    auto opts = server.options();
    opts.max_in_flight = 2;
    RemoteScorer scorer(opts);
    std::vector<std::jthread> threads;
    for (int i = 0; i < 6; ++i) {
        threads.emplace_back([&] { scorer.score(std::vector<SentencePair>{{"c", "s"}}); });
    }
    threads.clear();
    EXPECT_LE(peak.load(), 2);
    EXPECT_GE(peak.load(), 1);
}
