#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/evidence.hpp"
#include "kbcheck/http_util.hpp"
#include "kbcheck/label.hpp"
#include "kbcheck/tokenize.hpp"

namespace kbcheck {

using LabelProbs = std::array<double, kNumLabels>;

/// First index of the maximum, which gives Supported > Refuted > NotEnoughInfo
/// on ties.
inline Label argmax_label(const LabelProbs& probs)
{
    return static_cast<Label>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

struct Verdict {
    Label label = Label::NotEnoughInfo;
    LabelProbs probs{0.0, 0.0, 1.0};

    static constexpr double kSumTolerance = 1e-6;

    /// Validates a probability vector and derives the label from it.
    static Verdict from_probs(const LabelProbs& probs)
    {
        double sum = 0.0;
        for (double p : probs) {
            if (!(p >= 0.0 && p <= 1.0)) {
                throw Error(ErrorCode::ProtocolError, "class probability outside [0,1]");
            }
            sum += p;
        }
        if (std::abs(sum - 1.0) > kSumTolerance) {
            throw Error(ErrorCode::ProtocolError, "class probabilities sum to " + std::to_string(sum));
        }
        return {argmax_label(probs), probs};
    }

    static Verdict not_enough_info() { return {}; }

    bool operator==(const Verdict&) const = default;
};

inline constexpr std::string_view kDefaultSeparator = " </s> ";

/// Claim followed by each evidence sentence, joined by the separator.
inline std::string build_input(const Claim& claim, const EvidenceSet& evidence,
                               std::string_view separator = kDefaultSeparator)
{
    std::string out = claim.text;
    for (const auto& s : evidence.sentences) {
        out += separator;
        out += s.text;
    }
    return out;
}

class VeracityClassifier {
public:
    virtual ~VeracityClassifier() = default;
    virtual Verdict classify(const Claim& claim, const EvidenceSet& evidence) const = 0;
};

inline Verdict classify(const VeracityClassifier& classifier, const Claim& claim, const EvidenceSet& evidence)
{
    return classifier.classify(claim, evidence);
}

struct HeuristicConfig {
    double tau = 0.5;
    std::vector<std::string> negations{"not", "no", "never", "none", "cannot", "n't"};
};

namespace detail {

inline bool has_negation(std::string_view text, const std::vector<std::string>& lexicon)
{
    const auto terms = tokenize(text);
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (const auto& cue : lexicon) {
        const bool word_like = std::all_of(cue.begin(), cue.end(), [](unsigned char c) { return std::isalnum(c); });
        if (word_like) {
            if (std::find(terms.begin(), terms.end(), cue) != terms.end()) {
                return true;
            }
        } else if (lower.find(cue) != std::string::npos) {
            return true;
        }
        // Typographic apostrophe variant of contractions.
        if (cue == "n't" && lower.find("n\xE2\x80\x99t") != std::string::npos) {
            return true;
        }
    }
    return false;
}

} // namespace detail

/// Model-free classifier: weak evidence means NotEnoughInfo; otherwise a
/// negation mismatch between the claim and the top sentence means Refuted,
/// anything else Supported.
inline Verdict heuristic_classify(std::string_view claim_text, const EvidenceSet& evidence,
                                  const HeuristicConfig& config = {})
{
    if (evidence.empty() || evidence.max_score < config.tau) {
        return Verdict::not_enough_info();
    }
    const auto& top = evidence.sentences.front().text;
    const bool mismatch = detail::has_negation(claim_text, config.negations) !=
                          detail::has_negation(top, config.negations);
    if (mismatch) {
        return {Label::Refuted, {0.1, 0.9, 0.0}};
    }
    return {Label::Supported, {0.9, 0.1, 0.0}};
}

class HeuristicClassifier final : public VeracityClassifier {
public:
    explicit HeuristicClassifier(HeuristicConfig config = {}) : config_(std::move(config)) {}

    Verdict classify(const Claim& claim, const EvidenceSet& evidence) const override
    {
        return heuristic_classify(claim.text, evidence, config_);
    }

private:
    HeuristicConfig config_;
};

/// Client for POST /classify_verdict. The label is re-derived from the
/// returned probabilities with the local tie-break.
class RemoteClassifier final : public VeracityClassifier {
public:
    explicit RemoteClassifier(http::ClientOptions options)
        : options_(std::move(options)), limiter_(std::make_shared<http::InFlightLimiter>(options_.max_in_flight))
    {}

    Verdict classify(const Claim& claim, const EvidenceSet& evidence) const override
    {
        std::vector<std::string> texts;
        for (const auto& s : evidence.sentences) {
            texts.push_back(s.text);
        }
        return classify_batch({{claim.text, std::move(texts)}}).front();
    }

    struct Item {
        std::string claim;
        std::vector<std::string> evidence;
    };

    std::vector<Verdict> classify_batch(const std::vector<Item>& items) const
    {
        if (items.empty()) {
            return {};
        }
        nlohmann::json body{{"items", nlohmann::json::array()}};
        for (const auto& item : items) {
            body["items"].push_back({{"claim", item.claim}, {"evidence", item.evidence}});
        }
        auto response = http::with_retries(options_, ErrorCode::ClassifierUnavailable, [&] {
            http::InFlightLimiter::Slot slot(*limiter_);
            return http::post_json(options_, "/classify_verdict", body);
        });
        auto verdicts = response.find("verdicts");
        if (!response.is_object() || verdicts == response.end() || !verdicts->is_array()) {
            throw Error(ErrorCode::ProtocolError, "response lacks a 'verdicts' array");
        }
        if (verdicts->size() != items.size()) {
            throw Error(ErrorCode::ProtocolError, "verdict count does not match item count");
        }
        std::vector<Verdict> out;
        for (const auto& v : *verdicts) {
            auto probs = v.find("probs");
            if (!v.is_object() || probs == v.end() || !probs->is_array() || probs->size() != kNumLabels) {
                throw Error(ErrorCode::ProtocolError, "verdict lacks a 3-element 'probs' array");
            }
            auto label = v.find("label");
            if (label != v.end() && (!label->is_string() || !parse_label(label->get<std::string>()))) {
                throw Error(ErrorCode::ProtocolError, "invalid verdict label " + label->dump());
            }
            LabelProbs p{};
            for (std::size_t i = 0; i < kNumLabels; ++i) {
                if (!(*probs)[i].is_number()) {
                    throw Error(ErrorCode::ProtocolError, "non-numeric probability");
                }
                p[i] = (*probs)[i].get<double>();
            }
            out.push_back(Verdict::from_probs(p));
        }
        return out;
    }

private:
    http::ClientOptions options_;
    std::shared_ptr<http::InFlightLimiter> limiter_;
};

} // namespace kbcheck
