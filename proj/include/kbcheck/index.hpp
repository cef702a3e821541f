#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/tokenize.hpp"

namespace kbcheck {

/// Lucene-style BM25 parameters.
struct Bm25Params {
    double k1 = 0.9;
    double b = 0.4;

    bool operator==(const Bm25Params&) const = default;
};

struct Posting {
    std::uint32_t doc;
    std::uint32_t tf;

    bool operator==(const Posting&) const = default;
};

struct ScoredDoc {
    std::uint32_t doc;
    double score;
};

/// Text indexed for a document: title and body joined by a space.
inline std::vector<std::string> index_terms(const Document& doc)
{
    return tokenize(doc.title ? *doc.title + " " + doc.text : doc.text);
}

/// Immutable inverted index over one knowledge base. Keeps the documents so
/// retrieval can hand back full Document values.
class InvertedIndex {
public:
    static constexpr std::array<char, 4> kMagic{'V', 'K', 'B', 'I'};
    static constexpr std::uint32_t kFormatVersion = 1;

    /// Builds the index. With threads > 1 documents are tokenized in
    /// contiguous shards and merged in shard order, so the result does not
    /// depend on the thread count.
    static InvertedIndex build(const KnowledgeBase& kb, unsigned threads = 1, Bm25Params params = {})
    {
        if (kb.kind != RetrieverKind::Indexed) {
            throw Error(ErrorCode::InvalidArgument, "knowledge base '" + kb.name + "' is not indexable");
        }
        if (kb.documents.empty()) {
            throw Error(ErrorCode::EmptyKnowledgeBase, "knowledge base '" + kb.name + "' has no documents");
        }
        InvertedIndex index;
        index.params_ = params;
        index.documents_ = kb.documents;
        const std::size_t n = index.documents_.size();
        index.doc_lengths_.resize(n);

        using ShardMap = std::unordered_map<std::string, std::vector<Posting>>;
        const std::size_t shard_count = std::clamp<std::size_t>(threads, 1, n);
        std::vector<ShardMap> shards(shard_count);
        auto build_shard = [&](std::size_t shard) {
            const std::size_t begin = n * shard / shard_count;
            const std::size_t end = n * (shard + 1) / shard_count;
            auto& local = shards[shard];
            for (std::size_t d = begin; d < end; ++d) {
                auto terms = index_terms(index.documents_[d]);
                index.doc_lengths_[d] = static_cast<std::uint32_t>(terms.size());
                std::map<std::string, std::uint32_t> counts;
                for (auto& t : terms) {
                    ++counts[std::move(t)];
                }
                for (auto& [term, tf] : counts) {
                    local[term].push_back({static_cast<std::uint32_t>(d), tf});
                }
            }
        };
        if (shard_count == 1) {
            build_shard(0);
        } else {
            std::vector<std::jthread> workers;
            workers.reserve(shard_count);
            for (std::size_t s = 0; s < shard_count; ++s) {
                workers.emplace_back(build_shard, s);
            }
        }
        for (auto& shard : shards) {
            for (auto& [term, postings] : shard) {
                auto& merged = index.postings_[term];
                merged.insert(merged.end(), postings.begin(), postings.end());
            }
        }
        index.finish_stats();
        return index;
    }

    std::size_t doc_count() const { return documents_.size(); }
    double avg_doc_length() const { return avg_doc_length_; }
    std::uint32_t doc_length(std::size_t ordinal) const { return doc_lengths_.at(ordinal); }
    std::span<const std::uint32_t> doc_lengths() const { return doc_lengths_; }
    const Bm25Params& params() const { return params_; }
    const std::vector<Document>& documents() const { return documents_; }
    const Document& document(std::size_t ordinal) const { return documents_.at(ordinal); }
    std::size_t term_count() const { return postings_.size(); }

    std::span<const Posting> postings(const std::string& term) const
    {
        auto it = postings_.find(term);
        if (it == postings_.end()) {
            return {};
        }
        return it->second;
    }

    std::uint32_t doc_freq(const std::string& term) const
    {
        return static_cast<std::uint32_t>(postings(term).size());
    }

    std::uint32_t term_frequency(const std::string& term, std::uint32_t ordinal) const
    {
        auto list = postings(term);
        auto it = std::lower_bound(list.begin(), list.end(), ordinal,
                                   [](const Posting& p, std::uint32_t d) { return p.doc < d; });
        return (it != list.end() && it->doc == ordinal) ? it->tf : 0;
    }

    double idf(std::uint32_t df) const
    {
        const auto n = static_cast<double>(doc_count());
        const auto f = static_cast<double>(df);
        return std::log(1.0 + (n - f + 0.5) / (f + 0.5));
    }

    /// One term's contribution to a document's score.
    double term_weight(std::uint32_t df, std::uint32_t tf, std::uint32_t doc_len) const
    {
        const double k1 = params_.k1;
        const double b = params_.b;
        const auto f = static_cast<double>(tf);
        const double norm = k1 * (1.0 - b + b * static_cast<double>(doc_len) / avg_doc_length_);
        return idf(df) * (f * (k1 + 1.0) / (f + norm));
    }

    /// Top-k documents with a positive score, ordered by score descending and
    /// then document id ascending.
    std::vector<ScoredDoc> top_k(std::span<const std::string> query_terms, std::size_t k) const
    {
        std::unordered_map<std::uint32_t, double> acc;
        for (const auto& term : query_terms) {
            auto list = postings(term);
            const auto df = static_cast<std::uint32_t>(list.size());
            for (const auto& p : list) {
                acc[p.doc] += term_weight(df, p.tf, doc_lengths_[p.doc]);
            }
        }
        std::vector<ScoredDoc> hits;
        hits.reserve(acc.size());
        for (const auto& [doc, score] : acc) {
            if (score > 0.0) {
                hits.push_back({doc, score});
            }
        }
        auto before = [this](const ScoredDoc& a, const ScoredDoc& b) {
            if (a.score != b.score) {
                return a.score > b.score;
            }
            return documents_[a.doc].id < documents_[b.doc].id;
        };
        if (hits.size() > k) {
            std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), before);
            hits.resize(k);
        } else {
            std::sort(hits.begin(), hits.end(), before);
        }
        return hits;
    }

    void save(const std::filesystem::path& path) const
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error(ErrorCode::Io, "cannot write " + path.string());
        }
        out.write(kMagic.data(), kMagic.size());
        write_u32(out, kFormatVersion);
        write_f64(out, params_.k1);
        write_f64(out, params_.b);
        write_u64(out, documents_.size());
        for (std::size_t d = 0; d < documents_.size(); ++d) {
            const auto& doc = documents_[d];
            write_str(out, doc.id);
            out.put(doc.title ? 1 : 0);
            if (doc.title) {
                write_str(out, *doc.title);
            }
            write_str(out, doc.text);
            write_u32(out, doc_lengths_[d]);
        }
        std::vector<const std::string*> terms;
        terms.reserve(postings_.size());
        for (const auto& [term, _] : postings_) {
            terms.push_back(&term);
        }
        std::sort(terms.begin(), terms.end(), [](auto* a, auto* b) { return *a < *b; });
        write_u64(out, terms.size());
        for (const auto* term : terms) {
            write_str(out, *term);
            const auto& list = postings_.at(*term);
            write_u64(out, list.size());
            for (const auto& p : list) {
                write_u32(out, p.doc);
                write_u32(out, p.tf);
            }
        }
        if (!out) {
            throw Error(ErrorCode::Io, "write failure on " + path.string());
        }
    }

    static InvertedIndex load(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw Error(ErrorCode::Io, "cannot open " + path.string());
        }
        std::array<char, 4> magic{};
        in.read(magic.data(), magic.size());
        if (!in || magic != kMagic) {
            throw Error(ErrorCode::SnapshotFormat, path.string() + " is not an index snapshot");
        }
        const auto version = read_u32(in);
        if (version != kFormatVersion) {
            throw Error(ErrorCode::SnapshotFormat, "snapshot version " + std::to_string(version) +
                                                       " unsupported (expected " +
                                                       std::to_string(kFormatVersion) + ")");
        }
        InvertedIndex index;
        index.params_.k1 = read_f64(in);
        index.params_.b = read_f64(in);
        const auto n = read_u64(in);
        if (n == 0) {
            throw Error(ErrorCode::SnapshotFormat, "snapshot holds no documents");
        }
        for (std::uint64_t d = 0; d < n; ++d) {
            auto id = read_str(in);
            std::optional<std::string> title;
            if (in.get() == 1) {
                title = read_str(in);
            }
            auto text = read_str(in);
            Document doc;
            doc.id = std::move(id);
            doc.title = std::move(title);
            doc.sentences = split_sentences(text);
            doc.text = std::move(text);
            index.documents_.push_back(std::move(doc));
            index.doc_lengths_.push_back(read_u32(in));
        }
        const auto term_total = read_u64(in);
        for (std::uint64_t t = 0; t < term_total; ++t) {
            auto term = read_str(in);
            const auto count = read_u64(in);
            std::vector<Posting> list;
            list.reserve(count);
            for (std::uint64_t i = 0; i < count; ++i) {
                const auto doc = read_u32(in);
                const auto tf = read_u32(in);
                if (doc >= n) {
                    throw Error(ErrorCode::SnapshotFormat, "posting references unknown document");
                }
                list.push_back({doc, tf});
            }
            index.postings_.emplace(std::move(term), std::move(list));
        }
        index.finish_stats();
        return index;
    }

private:
    void finish_stats()
    {
        std::uint64_t total = 0;
        for (auto len : doc_lengths_) {
            total += len;
        }
        avg_doc_length_ = static_cast<double>(total) / static_cast<double>(doc_lengths_.size());
        // Every document empty after tokenization: keep the length ratio finite.
        if (avg_doc_length_ <= 0.0) {
            avg_doc_length_ = 1.0;
        }
    }

    static void write_u32(std::ostream& out, std::uint32_t v)
    {
        std::array<char, 4> buf{};
        for (std::size_t i = 0; i < 4; ++i) {
            buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        }
        out.write(buf.data(), buf.size());
    }

    static void write_u64(std::ostream& out, std::uint64_t v)
    {
        std::array<char, 8> buf{};
        for (std::size_t i = 0; i < 8; ++i) {
            buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        }
        out.write(buf.data(), buf.size());
    }

    static void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

    static void write_str(std::ostream& out, const std::string& s)
    {
        write_u64(out, s.size());
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    static std::uint64_t read_le(std::istream& in, std::size_t bytes)
    {
        std::array<unsigned char, 8> buf{};
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
        if (!in) {
            throw Error(ErrorCode::SnapshotFormat, "truncated snapshot");
        }
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < bytes; ++i) {
            v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        }
        return v;
    }

    static std::uint32_t read_u32(std::istream& in) { return static_cast<std::uint32_t>(read_le(in, 4)); }
    static std::uint64_t read_u64(std::istream& in) { return read_le(in, 8); }
    static double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

    static std::string read_str(std::istream& in)
    {
        const auto len = read_u64(in);
        if (len > (std::uint64_t{1} << 32)) {
            throw Error(ErrorCode::SnapshotFormat, "string length out of range");
        }
        std::string s(len, '\0');
        in.read(s.data(), static_cast<std::streamsize>(len));
        if (!in) {
            throw Error(ErrorCode::SnapshotFormat, "truncated snapshot");
        }
        return s;
    }

    Bm25Params params_;
    std::vector<Document> documents_;
    std::vector<std::uint32_t> doc_lengths_;
    double avg_doc_length_ = 0.0;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
};

/// BM25 score of one document for a query term list (duplicates count each
/// time). Terms absent from the corpus contribute nothing.
inline double bm25_score(const InvertedIndex& index, std::span<const std::string> query_terms,
                         std::uint32_t ordinal)
{
    double score = 0.0;
    for (const auto& term : query_terms) {
        const auto tf = index.term_frequency(term, ordinal);
        if (tf > 0) {
            score += index.term_weight(index.doc_freq(term), tf, index.doc_length(ordinal));
        }
    }
    return score;
}

} // namespace kbcheck
