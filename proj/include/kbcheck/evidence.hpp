#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/http_util.hpp"
#include "kbcheck/tokenize.hpp"

namespace kbcheck {

struct EvidenceSentence {
    std::string doc_id;
    std::size_t sentence_index = 0;
    std::string text;
    double score = 0.0;
    std::string source_kb;  // set when documents are pooled from several KBs

    bool operator==(const EvidenceSentence&) const = default;
};

/// Selected evidence for one claim, best first; max_score is 0 when empty.
struct EvidenceSet {
    std::string claim_id;
    std::vector<EvidenceSentence> sentences;
    double max_score = 0.0;

    bool empty() const { return sentences.empty(); }
    bool operator==(const EvidenceSet&) const = default;
};

struct SentencePair {
    std::string claim;
    std::string sentence;
};

/// Scores (claim, sentence) pairs; one score in (0,1) per pair, same order.
class EvidenceScorer {
public:
    virtual ~EvidenceScorer() = default;
    virtual std::vector<double> score(std::span<const SentencePair> pairs) const = 0;
};

/// 0.02 + 0.96 * Jaccard(token sets). Always inside (0,1).
inline double lexical_score(std::string_view claim, std::string_view sentence)
{
    const auto a_terms = tokenize(claim);
    const auto b_terms = tokenize(sentence);
    const std::set<std::string> a(a_terms.begin(), a_terms.end());
    const std::set<std::string> b(b_terms.begin(), b_terms.end());
    std::size_t common = 0;
    for (const auto& t : a) {
        common += b.count(t);
    }
    const std::size_t united = a.size() + b.size() - common;
    const double jaccard = united == 0 ? 0.0 : static_cast<double>(common) / static_cast<double>(united);
    return 0.02 + 0.96 * jaccard;
}

class LexicalScorer final : public EvidenceScorer {
public:
    std::vector<double> score(std::span<const SentencePair> pairs) const override
    {
        std::vector<double> out;
        out.reserve(pairs.size());
        for (const auto& p : pairs) {
            out.push_back(lexical_score(p.claim, p.sentence));
        }
        return out;
    }
};

/// Client for POST /score_evidence. Batches are chunked to kMaxBatch pairs per
/// request and scores are clamped into [1e-6, 1 - 1e-6].
class RemoteScorer final : public EvidenceScorer {
public:
    static constexpr std::size_t kMaxBatch = 64;
    static constexpr double kClampEpsilon = 1e-6;

    explicit RemoteScorer(http::ClientOptions options)
        : options_(std::move(options)), limiter_(std::make_shared<http::InFlightLimiter>(options_.max_in_flight))
    {}

    std::vector<double> score(std::span<const SentencePair> pairs) const override
    {
        std::vector<double> out;
        out.reserve(pairs.size());
        for (std::size_t begin = 0; begin < pairs.size(); begin += kMaxBatch) {
            auto chunk = pairs.subspan(begin, std::min(kMaxBatch, pairs.size() - begin));
            auto scores = score_chunk(chunk);
            out.insert(out.end(), scores.begin(), scores.end());
        }
        return out;
    }

private:
    std::vector<double> score_chunk(std::span<const SentencePair> chunk) const
    {
        nlohmann::json body{{"pairs", nlohmann::json::array()}};
        for (const auto& p : chunk) {
            body["pairs"].push_back({{"claim", p.claim}, {"sentence", p.sentence}});
        }
        auto response = http::with_retries(options_, ErrorCode::ScorerUnavailable, [&] {
            http::InFlightLimiter::Slot slot(*limiter_);
            return http::post_json(options_, "/score_evidence", body);
        });
        auto scores = response.find("scores");
        if (!response.is_object() || scores == response.end() || !scores->is_array()) {
            throw Error(ErrorCode::ProtocolError, "response lacks a 'scores' array");
        }
        if (scores->size() != chunk.size()) {
            throw Error(ErrorCode::ProtocolError, "expected " + std::to_string(chunk.size()) + " scores, got " +
                                                      std::to_string(scores->size()));
        }
        std::vector<double> out;
        out.reserve(chunk.size());
        for (const auto& s : *scores) {
            if (!s.is_number()) {
                throw Error(ErrorCode::ProtocolError, "non-numeric score " + s.dump());
            }
            const double v = s.get<double>();
            if (!std::isfinite(v)) {
                throw Error(ErrorCode::ProtocolError, "non-finite score");
            }
            out.push_back(std::clamp(v, kClampEpsilon, 1.0 - kClampEpsilon));
        }
        return out;
    }

    http::ClientOptions options_;
    std::shared_ptr<http::InFlightLimiter> limiter_;
};

/// Deterministic evidence order: score descending, then (doc_id, sentence_index).
inline bool evidence_before(const EvidenceSentence& a, const EvidenceSentence& b)
{
    if (a.score != b.score) {
        return a.score > b.score;
    }
    if (a.doc_id != b.doc_id) {
        return a.doc_id < b.doc_id;
    }
    return a.sentence_index < b.sentence_index;
}

/// Scores every sentence of every document in one batch and keeps the top n.
/// `sources`, when non-empty, labels each document with its KB.
inline EvidenceSet select_evidence(const Claim& claim, std::span<const Document> docs,
                                   const EvidenceScorer& scorer, std::size_t n = 5,
                                   std::span<const std::string> sources = {})
{
    if (n < 1) {
        throw Error(ErrorCode::InvalidArgument, "evidence size must be at least 1");
    }
    if (!sources.empty() && sources.size() != docs.size()) {
        throw Error(ErrorCode::LengthMismatch, "document sources do not match documents");
    }
    EvidenceSet set;
    set.claim_id = claim.id;
    std::vector<EvidenceSentence> candidates;
    std::vector<SentencePair> pairs;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        const auto& doc = docs[d];
        for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
            candidates.push_back({doc.id, s, doc.sentences[s], 0.0, sources.empty() ? std::string() : sources[d]});
            pairs.push_back({claim.text, doc.sentences[s]});
        }
    }
    if (pairs.empty()) {
        return set;
    }
    const auto scores = scorer.score(pairs);
    if (scores.size() != pairs.size()) {
        throw Error(ErrorCode::ProtocolError, "scorer returned " + std::to_string(scores.size()) +
                                                  " scores for " + std::to_string(pairs.size()) + " pairs");
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!(scores[i] > 0.0 && scores[i] < 1.0)) {
            throw Error(ErrorCode::ProtocolError, "evidence score outside (0,1)");
        }
        candidates[i].score = scores[i];
    }
    std::stable_sort(candidates.begin(), candidates.end(), evidence_before);
    if (candidates.size() > n) {
        candidates.resize(n);
    }
    set.max_score = candidates.front().score;
    set.sentences = std::move(candidates);
    return set;
}

} // namespace kbcheck
