#pragma once

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/http_util.hpp"
#include "kbcheck/index.hpp"
#include "kbcheck/tokenize.hpp"

namespace kbcheck {

struct RetrievalEntry {
    std::string doc_id;
    double score = 0.0;

    bool operator==(const RetrievalEntry&) const = default;
};

/// Ranked documents for one claim. Entries are sorted by score descending,
/// ties by document id ascending; max_score is 0 when empty.
struct RetrievalResult {
    std::vector<RetrievalEntry> entries;
    double max_score = 0.0;

    bool operator==(const RetrievalResult&) const = default;
};

struct Retrieved {
    RetrievalResult result;
    std::vector<Document> documents;  // parallel to result.entries
};

/// Maps a claim to ranked documents of one knowledge base.
class Retriever {
public:
    virtual ~Retriever() = default;
    virtual RetrieverKind kind() const = 0;
    virtual Retrieved retrieve(const Claim& claim, std::size_t k) const = 0;

    std::size_t default_k() const { return kind() == RetrieverKind::Indexed ? 5 : 10; }
};

/// BM25 over a prebuilt inverted index.
class IndexedRetriever final : public Retriever {
public:
    explicit IndexedRetriever(std::shared_ptr<const InvertedIndex> index) : index_(std::move(index)) {}

    RetrieverKind kind() const override { return RetrieverKind::Indexed; }

    Retrieved retrieve(const Claim& claim, std::size_t k) const override
    {
        const auto terms = tokenize(claim.text);
        Retrieved out;
        for (const auto& hit : index_->top_k(terms, k)) {
            const auto& doc = index_->document(hit.doc);
            out.result.entries.push_back({doc.id, hit.score});
            out.documents.push_back(doc);
        }
        if (!out.result.entries.empty()) {
            out.result.max_score = out.result.entries.front().score;
        }
        return out;
    }

    const InvertedIndex& index() const { return *index_; }

private:
    std::shared_ptr<const InvertedIndex> index_;
};

namespace detail {

/// Search APIs expose ranks, not scores: the i-th of m hits scores m - i.
inline Retrieved rank_scored(std::vector<Document> hits, std::size_t k)
{
    if (hits.size() > k) {
        hits.resize(k);
    }
    Retrieved out;
    const auto m = hits.size();
    for (std::size_t rank = 0; rank < m; ++rank) {
        out.result.entries.push_back({hits[rank].id, static_cast<double>(m - rank)});
    }
    if (m > 0) {
        out.result.max_score = static_cast<double>(m);
    }
    out.documents = std::move(hits);
    return out;
}

} // namespace detail

/// Replays recorded search hits: JSON-lines {claim_id, hits: [{id, title?, text}]}.
class FixtureRetriever final : public Retriever {
public:
    static FixtureRetriever load(const std::filesystem::path& path)
    {
        FixtureRetriever fixture;
        detail::for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line_no) {
            auto claim_id = detail::required_string(obj, "claim_id", line_no);
            auto hits = obj.find("hits");
            if (hits == obj.end() || !hits->is_array()) {
                throw LineError(ErrorCode::MalformedLine, line_no, "missing array field 'hits'");
            }
            std::vector<Document> docs;
            for (const auto& hit : *hits) {
                if (!hit.is_object()) {
                    throw LineError(ErrorCode::MalformedLine, line_no, "hit is not an object");
                }
                try {
                    docs.push_back(make_document(detail::required_string(hit, "id", line_no),
                                                 detail::optional_string(hit, "title", line_no),
                                                 detail::required_string(hit, "text", line_no)));
                } catch (const LineError&) {
                    throw;
                } catch (const Error& e) {
                    throw LineError(e.code(), line_no, e.what());
                }
            }
            if (!fixture.hits_.emplace(nfc(claim_id), std::move(docs)).second) {
                throw LineError(ErrorCode::DuplicateId, line_no, "duplicate claim_id '" + claim_id + "'");
            }
        });
        return fixture;
    }

    RetrieverKind kind() const override { return RetrieverKind::Fixture; }

    Retrieved retrieve(const Claim& claim, std::size_t k) const override
    {
        auto it = hits_.find(claim.id);
        if (it == hits_.end()) {
            return {};
        }
        return detail::rank_scored(it->second, k);
    }

    std::size_t size() const { return hits_.size(); }

private:
    std::unordered_map<std::string, std::vector<Document>> hits_;
};

struct WebSearchConfig {
    http::ClientOptions client = [] {
        http::ClientOptions opts;
        opts.max_in_flight = 2;
        return opts;
    }();
    std::string api_key_env;  // name of the environment variable holding the key
    std::size_t hits = 10;
};

/// Live search client. Issues GET <endpoint>?q=<claim>&num=<k>[&key=<key>]
/// and reads {"items": [{"link"|"id", "title"?, "snippet"|"text"}]}.
class WebSearchRetriever final : public Retriever {
public:
    explicit WebSearchRetriever(WebSearchConfig config)
        : config_(std::move(config)), limiter_(std::make_shared<http::InFlightLimiter>(config_.client.max_in_flight))
    {}

    RetrieverKind kind() const override { return RetrieverKind::WebSearch; }

    Retrieved retrieve(const Claim& claim, std::size_t k) const override
    {
        const auto n = std::min(k, config_.hits);
        auto body = http::with_retries(config_.client, ErrorCode::RetrieverUnavailable, [&] {
            http::InFlightLimiter::Slot slot(*limiter_);
            return fetch(claim.text, n);
        });
        auto items = body.find("items");
        std::vector<Document> docs;
        if (items == body.end() || items->is_null()) {
            return {};
        }
        if (!items->is_array()) {
            throw Error(ErrorCode::ProtocolError, "search response 'items' is not an array");
        }
        for (const auto& item : *items) {
            auto pick = [&](const char* a, const char* b) -> std::optional<std::string> {
                for (const char* key : {a, b}) {
                    auto it = item.find(key);
                    if (it != item.end() && it->is_string()) {
                        return it->get<std::string>();
                    }
                }
                return std::nullopt;
            };
            auto id = pick("link", "id");
            auto text = pick("snippet", "text");
            if (!id || !text || detail::trim(*text).empty()) {
                continue;
            }
            docs.push_back(make_document(*id, pick("title", "title"), *text));
        }
        return detail::rank_scored(std::move(docs), n);
    }

private:
    nlohmann::json fetch(const std::string& query, std::size_t n) const
    {
        const auto ep = http::parse_endpoint(config_.client.endpoint);
        httplib::Client client(ep.base);
        const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.client.timeout);
        const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.client.timeout - secs);
        client.set_connection_timeout(secs.count(), usecs.count());
        client.set_read_timeout(secs.count(), usecs.count());
        httplib::Params params{{"q", query}, {"num", std::to_string(n)}};
        if (!config_.api_key_env.empty()) {
            if (const char* key = std::getenv(config_.api_key_env.c_str())) {
                params.emplace("key", key);
            }
        }
        auto res = client.Get(ep.path_prefix.empty() ? "/" : ep.path_prefix, params, httplib::Headers{});
        if (!res) {
            throw http::TransportFailure{httplib::to_string(res.error())};
        }
        if (res->status != 200) {
            throw http::TransportFailure{"HTTP status " + std::to_string(res->status)};
        }
        try {
            return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::ProtocolError, std::string("search response is not JSON: ") + e.what());
        }
    }

    WebSearchConfig config_;
    std::shared_ptr<http::InFlightLimiter> limiter_;
};

/// Top-k retrieval; k defaults to 5 for indexed and 10 for search-style
/// retrievers.
inline Retrieved retrieve_top_k(const Retriever& retriever, const Claim& claim,
                                std::optional<std::size_t> k = std::nullopt)
{
    const auto limit = k.value_or(retriever.default_k());
    if (limit < 1) {
        throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
    }
    return retriever.retrieve(claim, limit);
}

} // namespace kbcheck
