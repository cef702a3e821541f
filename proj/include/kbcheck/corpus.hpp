#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbcheck/error.hpp"
#include "kbcheck/label.hpp"
#include "kbcheck/unicode.hpp"

namespace kbcheck {

struct Claim {
    std::string id;
    std::string text;
    std::optional<Label> gold;

    bool operator==(const Claim&) const = default;
};

struct ClaimTask {
    std::string name;
    std::vector<Claim> claims;

    /// Gold label counts in Label order; unlabeled claims are not counted.
    std::array<std::size_t, kNumLabels> class_counts() const
    {
        std::array<std::size_t, kNumLabels> counts{};
        for (const auto& claim : claims) {
            if (claim.gold) {
                ++counts[index_of(*claim.gold)];
            }
        }
        return counts;
    }
};

struct Document {
    std::string id;
    std::optional<std::string> title;
    std::string text;
    std::vector<std::string> sentences;

    bool operator==(const Document&) const = default;
};

enum class RetrieverKind { Indexed, WebSearch, Fixture };

inline std::string_view to_string(RetrieverKind kind)
{
    switch (kind) {
    case RetrieverKind::Indexed: return "indexed";
    case RetrieverKind::WebSearch: return "web_search";
    case RetrieverKind::Fixture: return "fixture";
    }
    return "";
}

struct KnowledgeBase {
    std::string name;
    std::vector<Document> documents;
    RetrieverKind kind = RetrieverKind::Indexed;
};

namespace detail {

inline bool is_space(char c)
{
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::string_view trim(std::string_view s)
{
    while (!s.empty() && is_space(s.front())) {
        s.remove_prefix(1);
    }
    while (!s.empty() && is_space(s.back())) {
        s.remove_suffix(1);
    }
    return s;
}

/// Trims and collapses every whitespace run to one space.
inline std::string collapse_whitespace(std::string_view s)
{
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : trim(s)) {
        if (is_space(c)) {
            pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c);
    }
    return out;
}

inline const std::unordered_set<std::string_view>& abbreviations()
{
    static const std::unordered_set<std::string_view> words{
        "dr",   "mr",   "mrs",  "ms",   "prof", "st",   "jr",    "sr",   "vs",  "al",
        "fig",  "figs", "eq",   "cf",   "approx", "ca", "vol",   "pp",   "inc", "ltd",
        "corp", "co",   "dept", "univ", "gen",  "sen",  "rep",   "gov",  "col", "lt",
        "sgt",  "capt", "mt",   "ft",   "jan",  "feb",  "mar",   "apr",  "jun", "jul",
        "aug",  "sep",  "sept", "oct",  "nov",  "dec",  "nos",  "ed",   "eds",
    };
    return words;
}

/// "u.s", "e.g", "p.m": single letters joined by periods.
inline bool is_dotted_acronym(std::string_view word)
{
    if (word.size() < 3) {
        return false;
    }
    for (std::size_t i = 0; i < word.size(); ++i) {
        const bool letter_slot = i % 2 == 0;
        const auto c = static_cast<unsigned char>(word[i]);
        if (letter_slot ? !std::isalpha(c) : word[i] != '.') {
            return false;
        }
    }
    return word.size() % 2 == 1;
}

inline bool suppresses_break(std::string_view word)
{
    while (!word.empty() && (word.front() == '(' || word.front() == '[' || word.front() == '"' ||
                             word.front() == '\'')) {
        word.remove_prefix(1);
    }
    if (word.empty()) {
        return false;
    }
    if (word.size() == 1 && std::isupper(static_cast<unsigned char>(word[0]))) {
        return true;
    }
    std::string lower(word);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return abbreviations().contains(lower) || is_dotted_acronym(lower);
}

/// Length of a closing quote/bracket at `pos`, 0 if none. Handles the UTF-8
/// right single and double quotation marks.
inline std::size_t closer_length(std::string_view s, std::size_t pos)
{
    const char c = s[pos];
    if (c == '"' || c == '\'' || c == ')' || c == ']') {
        return 1;
    }
    if (pos + 2 < s.size() && static_cast<unsigned char>(c) == 0xE2 &&
        static_cast<unsigned char>(s[pos + 1]) == 0x80) {
        const auto third = static_cast<unsigned char>(s[pos + 2]);
        if (third == 0x99 || third == 0x9D) {
            return 3;
        }
    }
    return 0;
}

} // namespace detail

/// Rule-based sentence splitter. A sentence ends after a run of terminators
/// (. ! ?) plus any closing quotes/brackets, when followed by whitespace or the
/// end of text. A lone period after an abbreviation, dotted acronym, or single
/// capital initial does not end a sentence. Whitespace inside sentences is
/// collapsed, so joining the result with single spaces gives the collapsed text.
inline std::vector<std::string> split_sentences(std::string_view raw)
{
    const std::string text = detail::collapse_whitespace(raw);
    std::vector<std::string> sentences;
    std::size_t start = 0;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto is_terminator = [](char c) { return c == '.' || c == '!' || c == '?'; };

    while (i < n) {
        if (!is_terminator(text[i])) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && is_terminator(text[j])) {
            ++j;
        }
        const bool lone_period = (j - i == 1) && text[i] == '.';
        while (j < n) {
            const auto len = detail::closer_length(text, j);
            if (len == 0) {
                break;
            }
            j += len;
        }
        if (j < n && text[j] != ' ') {
            i = j;
            continue;
        }
        if (lone_period) {
            const std::size_t word_begin = [&] {
                const auto space = text.rfind(' ', i);
                return (space == std::string::npos || space < start) ? start : space + 1;
            }();
            if (detail::suppresses_break(std::string_view(text).substr(word_begin, i - word_begin))) {
                i = j;
                continue;
            }
        }
        sentences.emplace_back(detail::trim(std::string_view(text).substr(start, j - start)));
        start = j + 1;
        i = start;
    }
    if (start < n) {
        auto rest = detail::trim(std::string_view(text).substr(start));
        if (!rest.empty()) {
            sentences.emplace_back(rest);
        }
    }
    return sentences;
}

/// Builds a Document: NFC-normalizes fields and splits sentences.
inline Document make_document(std::string id, std::optional<std::string> title, std::string_view text)
{
    Document doc;
    doc.id = nfc(id);
    if (title) {
        doc.title = nfc(*title);
    }
    doc.text = nfc(text);
    if (detail::trim(doc.text).empty()) {
        throw Error(ErrorCode::EmptyDocument, "document '" + doc.id + "' has empty text");
    }
    doc.sentences = split_sentences(doc.text);
    return doc;
}

namespace detail {

template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw LineError(ErrorCode::MalformedLine, line_no, e.what());
        }
        if (!obj.is_object()) {
            throw LineError(ErrorCode::MalformedLine, line_no, "expected a JSON object");
        }
        fn(obj, line_no);
    }
    if (in.bad()) {
        throw Error(ErrorCode::Io, "read failure on " + path.string());
    }
}

inline std::string required_string(const nlohmann::json& obj, const char* field, std::size_t line_no)
{
    auto it = obj.find(field);
    if (it == obj.end() || !it->is_string()) {
        throw LineError(ErrorCode::MalformedLine, line_no,
                        std::string("missing or non-string field '") + field + "'");
    }
    return it->get<std::string>();
}

inline std::optional<std::string> optional_string(const nlohmann::json& obj, const char* field,
                                                  std::size_t line_no)
{
    auto it = obj.find(field);
    if (it == obj.end() || it->is_null()) {
        return std::nullopt;
    }
    if (!it->is_string()) {
        throw LineError(ErrorCode::MalformedLine, line_no,
                        std::string("non-string field '") + field + "'");
    }
    return it->get<std::string>();
}

} // namespace detail

/// Reads a JSON-lines claim file: {id, text, label?} per line.
inline ClaimTask load_task(const std::filesystem::path& path, std::string name = {})
{
    ClaimTask task;
    task.name = name.empty() ? path.stem().string() : std::move(name);
    std::unordered_set<std::string> seen;
    detail::for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line_no) {
        Claim claim;
        claim.id = nfc(detail::required_string(obj, "id", line_no));
        claim.text = nfc(detail::required_string(obj, "text", line_no));
        if (detail::trim(claim.text).empty()) {
            throw LineError(ErrorCode::MalformedLine, line_no, "claim '" + claim.id + "' has empty text");
        }
        if (auto label = detail::optional_string(obj, "label", line_no)) {
            auto parsed = parse_label(*label);
            if (!parsed) {
                throw LineError(ErrorCode::UnknownLabel, line_no, "unknown label '" + *label + "'");
            }
            claim.gold = *parsed;
        }
        if (!seen.insert(claim.id).second) {
            throw LineError(ErrorCode::DuplicateId, line_no, "duplicate id '" + claim.id + "'");
        }
        task.claims.push_back(std::move(claim));
    });
    if (task.claims.empty()) {
        throw Error(ErrorCode::EmptyTask, path.string() + " contains no claims");
    }
    return task;
}

/// Reads a JSON-lines document file: {id, title?, text} per line.
inline KnowledgeBase load_kb(const std::filesystem::path& path, std::string name)
{
    KnowledgeBase kb;
    kb.name = std::move(name);
    kb.kind = RetrieverKind::Indexed;
    std::unordered_set<std::string> seen;
    detail::for_each_jsonl(path, [&](const nlohmann::json& obj, std::size_t line_no) {
        auto id = detail::required_string(obj, "id", line_no);
        auto title = detail::optional_string(obj, "title", line_no);
        auto text = detail::required_string(obj, "text", line_no);
        Document doc;
        try {
            doc = make_document(std::move(id), std::move(title), text);
        } catch (const Error& e) {
            throw LineError(e.code(), line_no, e.what());
        }
        if (!seen.insert(doc.id).second) {
            throw LineError(ErrorCode::DuplicateId, line_no, "duplicate id '" + doc.id + "'");
        }
        kb.documents.push_back(std::move(doc));
    });
    if (kb.documents.empty()) {
        throw Error(ErrorCode::EmptyKnowledgeBase, path.string() + " contains no documents");
    }
    return kb;
}

inline nlohmann::json to_json(const Document& doc)
{
    nlohmann::json obj{{"id", doc.id}};
    if (doc.title) {
        obj["title"] = *doc.title;
    }
    obj["text"] = doc.text;
    return obj;
}

inline void save_kb(const KnowledgeBase& kb, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
    for (const auto& doc : kb.documents) {
        out << to_json(doc).dump() << '\n';
    }
    if (!out) {
        throw Error(ErrorCode::Io, "write failure on " + path.string());
    }
}

} // namespace kbcheck
