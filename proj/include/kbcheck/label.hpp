#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

#include "kbcheck/error.hpp"

namespace kbcheck {

/// Veracity label. The enumerator order is the canonical class order used by
/// probability vectors and confusion matrices.
enum class Label : std::size_t { Supported = 0, Refuted = 1, NotEnoughInfo = 2 };

inline constexpr std::size_t kNumLabels = 3;
inline constexpr std::array<Label, kNumLabels> kAllLabels{
    Label::Supported, Label::Refuted, Label::NotEnoughInfo};

inline constexpr std::size_t index_of(Label label) { return static_cast<std::size_t>(label); }

inline constexpr std::string_view to_string(Label label)
{
    switch (label) {
    case Label::Supported: return "SUPPORTED";
    case Label::Refuted: return "REFUTED";
    case Label::NotEnoughInfo: return "NOT_ENOUGH_INFO";
    }
    return "";
}

inline std::optional<Label> parse_label(std::string_view text)
{
    for (auto label : kAllLabels) {
        if (to_string(label) == text) {
            return label;
        }
    }
    return std::nullopt;
}

inline Label label_or_throw(std::string_view text)
{
    if (auto label = parse_label(text)) {
        return *label;
    }
    throw Error(ErrorCode::UnknownLabel, "unknown label '" + std::string(text) + "'");
}

} // namespace kbcheck
