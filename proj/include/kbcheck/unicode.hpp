#pragma once

#include <string>
#include <string_view>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "kbcheck/error.hpp"

namespace kbcheck {

/// NFC-normalizes UTF-8 text. Ill-formed sequences become U+FFFD.
inline std::string nfc(std::string_view utf8)
{
    bool ascii = true;
    for (unsigned char c : utf8) {
        if (c >= 0x80) {
            ascii = false;
            break;
        }
    }
    if (ascii) {
        return std::string(utf8);
    }
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) {
        throw Error(ErrorCode::Io, "ICU NFC normalizer unavailable");
    }
    auto source = icu::UnicodeString::fromUTF8(
        icu::StringPiece(utf8.data(), static_cast<int32_t>(utf8.size())));
    icu::UnicodeString normalized = normalizer->normalize(source, status);
    if (U_FAILURE(status)) {
        throw Error(ErrorCode::InvalidArgument, "NFC normalization failed");
    }
    std::string out;
    normalized.toUTF8String(out);
    return out;
}

} // namespace kbcheck
