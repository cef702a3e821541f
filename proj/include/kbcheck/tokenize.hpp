#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kbcheck {

/// Lowercases ASCII and splits on every byte that is not an ASCII letter or
/// digit. Bytes >= 0x80 count as word characters so non-ASCII words survive
/// intact. No stemming, no stopwords.
inline std::vector<std::string> tokenize(std::string_view text)
{
    std::vector<std::string> terms;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80) {
            current.push_back(ch);
        } else if (c >= 'A' && c <= 'Z') {
            current.push_back(static_cast<char>(c - 'A' + 'a'));
        } else if (!current.empty()) {
            terms.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        terms.push_back(std::move(current));
    }
    return terms;
}

} // namespace kbcheck
