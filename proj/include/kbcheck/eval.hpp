#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "kbcheck/error.hpp"
#include "kbcheck/label.hpp"
#include "kbcheck/policy.hpp"

namespace kbcheck {

using Matrix3 = std::array<std::array<double, kNumLabels>, kNumLabels>;
using CountMatrix3 = std::array<std::array<std::int64_t, kNumLabels>, kNumLabels>;

/// Gold-by-predicted table, rows and columns in Label order. `normalized`
/// scales the whole table to sum to 100, so its trace is the accuracy in
/// percent. `total` is the number of claims behind the table.
struct ConfusionMatrix {
    CountMatrix3 counts{};
    Matrix3 normalized{};
    double total = 0.0;

    static ConfusionMatrix from_counts(const CountMatrix3& counts)
    {
        ConfusionMatrix m;
        m.counts = counts;
        for (const auto& row : counts) {
            for (auto c : row) {
                m.total += static_cast<double>(c);
            }
        }
        if (m.total > 0) {
            for (std::size_t g = 0; g < kNumLabels; ++g) {
                for (std::size_t p = 0; p < kNumLabels; ++p) {
                    m.normalized[g][p] = static_cast<double>(counts[g][p]) * 100.0 / m.total;
                }
            }
        }
        return m;
    }

    /// For tables only published in normalized form; counts are recovered by
    /// rounding normalized * claims / 100.
    static ConfusionMatrix from_normalized(const Matrix3& normalized, double claims)
    {
        ConfusionMatrix m;
        m.normalized = normalized;
        m.total = claims;
        for (std::size_t g = 0; g < kNumLabels; ++g) {
            for (std::size_t p = 0; p < kNumLabels; ++p) {
                m.counts[g][p] = std::llround(normalized[g][p] * claims / 100.0);
            }
        }
        return m;
    }

    double accuracy() const { return normalized[0][0] + normalized[1][1] + normalized[2][2]; }

    double normalized_sum() const
    {
        double s = 0.0;
        for (const auto& row : normalized) {
            for (double v : row) {
                s += v;
            }
        }
        return s;
    }
};

/// Tallies predictions against gold labels; entries without a gold label are
/// skipped.
inline ConfusionMatrix confusion(std::span<const Label> predicted, std::span<const std::optional<Label>> golds)
{
    if (predicted.size() != golds.size()) {
        throw Error(ErrorCode::LengthMismatch, std::to_string(predicted.size()) + " predictions vs " +
                                                   std::to_string(golds.size()) + " gold labels");
    }
    CountMatrix3 counts{};
    std::size_t labeled = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (!golds[i]) {
            continue;
        }
        ++counts[index_of(*golds[i])][index_of(predicted[i])];
        ++labeled;
    }
    if (labeled == 0) {
        throw Error(ErrorCode::EmptyEvaluation, "no gold-labeled claims to evaluate");
    }
    return ConfusionMatrix::from_counts(counts);
}

inline ConfusionMatrix confusion(std::span<const ClaimOutcome> outcomes, std::span<const std::optional<Label>> golds)
{
    std::vector<Label> predicted;
    predicted.reserve(outcomes.size());
    for (const auto& o : outcomes) {
        predicted.push_back(o.verdict.label);
    }
    return confusion(std::span<const Label>(predicted), golds);
}

/// Pools matrices by summing the underlying claim counts: the normalized
/// result is the claim-weighted mean of the inputs' normalized tables, which
/// is the plain cell-wise mean when all inputs cover the same number of claims.
inline ConfusionMatrix aggregate_matrices(std::span<const ConfusionMatrix> matrices)
{
    if (matrices.empty()) {
        throw Error(ErrorCode::EmptyList, "no matrices to aggregate");
    }
    ConfusionMatrix out;
    for (const auto& m : matrices) {
        if (!(m.total > 0)) {
            throw Error(ErrorCode::InvalidArgument, "matrix with no claims");
        }
        out.total += m.total;
        for (std::size_t g = 0; g < kNumLabels; ++g) {
            for (std::size_t p = 0; p < kNumLabels; ++p) {
                out.counts[g][p] += m.counts[g][p];
                out.normalized[g][p] += m.normalized[g][p] * m.total;
            }
        }
    }
    for (auto& row : out.normalized) {
        for (auto& v : row) {
            v /= out.total;
        }
    }
    return out;
}

struct BootstrapCI {
    double mean = 0.0;        // percent
    double half_width = 0.0;  // z * standard deviation of resample accuracies
    std::size_t n_resamples = 0;
    double level = 0.95;
};

/// Uniform integer in [0, n) without modulo bias.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n)
{
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t x = rng();
        if (x >= threshold) {
            return x % n;
        }
    }
}

inline BootstrapCI bootstrap_accuracy(const std::vector<bool>& correct, std::size_t n_resamples = 200,
                                      std::uint64_t seed = 42)
{
    if (correct.empty()) {
        throw Error(ErrorCode::EmptyEvaluation, "no outcomes to bootstrap");
    }
    if (n_resamples == 0) {
        throw Error(ErrorCode::InvalidArgument, "need at least one resample");
    }
    std::mt19937_64 rng(seed);
    const auto n = correct.size();
    std::vector<double> accuracies;
    accuracies.reserve(n_resamples);
    for (std::size_t r = 0; r < n_resamples; ++r) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            hits += correct[uniform_index(rng, n)] ? 1 : 0;
        }
        accuracies.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(n));
    }
    double mean = 0.0;
    for (double a : accuracies) {
        mean += a;
    }
    mean /= static_cast<double>(n_resamples);
    double ss = 0.0;
    for (double a : accuracies) {
        ss += (a - mean) * (a - mean);
    }
    const double sd = n_resamples > 1 ? std::sqrt(ss / static_cast<double>(n_resamples - 1)) : 0.0;
    return {mean, 1.96 * sd, n_resamples, 0.95};
}

struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    std::string label;
};

struct CorrelationReport {
    double r = 0.0;
    double p_value = 1.0;  // two-sided
    std::size_t n = 0;
    std::vector<ScatterPoint> points;
};

/// Two-sided p-value of a Pearson r from Student's t with n - 2 degrees of
/// freedom: P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
inline double pearson_p_value(double r, std::size_t n)
{
    const double df = static_cast<double>(n) - 2.0;
    const double r2 = r * r;
    if (r2 >= 1.0) {
        return 0.0;
    }
    const double t2 = r2 * df / (1.0 - r2);
    return boost::math::ibeta(df / 2.0, 0.5, df / (df + t2));
}

inline CorrelationReport pearson(std::span<const ScatterPoint> points)
{
    const auto n = points.size();
    if (n < 3) {
        throw Error(ErrorCode::TooFewPoints, "pearson needs at least 3 points, got " + std::to_string(n));
    }
    double mx = 0.0;
    double my = 0.0;
    for (const auto& p : points) {
        mx += p.x;
        my += p.y;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (const auto& p : points) {
        const double dx = p.x - mx;
        const double dy = p.y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) {
        throw Error(ErrorCode::DegenerateVariance, "a coordinate has zero variance");
    }
    CorrelationReport report;
    report.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    report.p_value = pearson_p_value(report.r, n);
    report.n = n;
    report.points.assign(points.begin(), points.end());
    return report;
}

struct EvidenceQualityStats {
    double mean_max_bm25 = 0.0;
    double mean_max_e = 0.0;
};

/// Means of the per-claim best retrieval score and best evidence score.
inline EvidenceQualityStats quality_stats(std::span<const ClaimOutcome> outcomes)
{
    if (outcomes.empty()) {
        throw Error(ErrorCode::EmptyEvaluation, "no outcomes");
    }
    EvidenceQualityStats stats;
    for (const auto& o : outcomes) {
        stats.mean_max_bm25 += o.max_retrieval_score();
        stats.mean_max_e += o.evidence.max_score;
    }
    stats.mean_max_bm25 /= static_cast<double>(outcomes.size());
    stats.mean_max_e /= static_cast<double>(outcomes.size());
    return stats;
}

/// Per-claim correctness for labeled claims, in claim order.
inline std::vector<bool> correct_flags(std::span<const ClaimOutcome> outcomes, std::span<const std::optional<Label>> golds)
{
    if (outcomes.size() != golds.size()) {
        throw Error(ErrorCode::LengthMismatch, "outcomes and gold labels differ in length");
    }
    std::vector<bool> flags;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (golds[i]) {
            flags.push_back(outcomes[i].verdict.label == *golds[i]);
        }
    }
    return flags;
}

} // namespace kbcheck
