#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/eval.hpp"
#include "kbcheck/policy.hpp"

namespace kbcheck {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Outcome records

inline std::optional<StageFailure> parse_stage_failure(const json& j)
{
    if (j.is_null()) {
        return std::nullopt;
    }
    const auto s = j.get<std::string>();
    for (auto f : {StageFailure::RetrieverUnavailable, StageFailure::ScorerUnavailable,
                   StageFailure::ClassifierUnavailable}) {
        if (to_string(f) == s) {
            return f;
        }
    }
    throw Error(ErrorCode::MalformedLine, "unknown failure '" + s + "'");
}

inline json failure_json(const std::optional<StageFailure>& f)
{
    return f ? json(std::string(to_string(*f))) : json(nullptr);
}

/// One outcomes.jsonl record; the gold label travels with the outcome so
/// reports can be rebuilt from the records alone.
inline json outcome_to_json(const ClaimOutcome& o, const std::optional<Label>& gold)
{
    json retrievals = json::array();
    for (const auto& r : o.retrievals) {
        json entries = json::array();
        for (const auto& e : r.result.entries) {
            entries.push_back({e.doc_id, e.score});
        }
        retrievals.push_back(
            {{"kb", r.kb}, {"entries", entries}, {"max_score", r.result.max_score}, {"failure", failure_json(r.failure)}});
    }
    json sentences = json::array();
    for (const auto& s : o.evidence.sentences) {
        sentences.push_back({{"doc_id", s.doc_id},
                             {"sentence_index", s.sentence_index},
                             {"text", s.text},
                             {"score", s.score},
                             {"source_kb", s.source_kb}});
    }
    return {
        {"claim_id", o.claim_id},
        {"gold", gold ? json(std::string(to_string(*gold))) : json(nullptr)},
        {"policy", o.policy},
        {"chosen_kb", o.chosen_kb ? json(*o.chosen_kb) : json(nullptr)},
        {"retrievals", retrievals},
        {"evidence", {{"sentences", sentences}, {"max_score", o.evidence.max_score}}},
        {"verdict", {{"label", std::string(to_string(o.verdict.label))}, {"probs", o.verdict.probs}}},
        {"failure", failure_json(o.failure)},
        {"failure_detail", o.failure_detail},
    };
}

struct OutcomeRecord {
    ClaimOutcome outcome;
    std::optional<Label> gold;
};

inline OutcomeRecord outcome_from_json(const json& j)
{
    OutcomeRecord rec;
    auto& o = rec.outcome;
    o.claim_id = j.at("claim_id").get<std::string>();
    if (!j.at("gold").is_null()) {
        rec.gold = label_or_throw(j.at("gold").get<std::string>());
    }
    o.policy = j.at("policy").get<std::string>();
    if (!j.at("chosen_kb").is_null()) {
        o.chosen_kb = j.at("chosen_kb").get<std::string>();
    }
    for (const auto& r : j.at("retrievals")) {
        KbRetrieval kr;
        kr.kb = r.at("kb").get<std::string>();
        for (const auto& e : r.at("entries")) {
            kr.result.entries.push_back({e.at(0).get<std::string>(), e.at(1).get<double>()});
        }
        kr.result.max_score = r.at("max_score").get<double>();
        kr.failure = parse_stage_failure(r.at("failure"));
        o.retrievals.push_back(std::move(kr));
    }
    o.evidence.claim_id = o.claim_id;
    for (const auto& s : j.at("evidence").at("sentences")) {
        o.evidence.sentences.push_back({s.at("doc_id").get<std::string>(), s.at("sentence_index").get<std::size_t>(),
                                        s.at("text").get<std::string>(), s.at("score").get<double>(),
                                        s.at("source_kb").get<std::string>()});
    }
    o.evidence.max_score = j.at("evidence").at("max_score").get<double>();
    o.verdict.label = label_or_throw(j.at("verdict").at("label").get<std::string>());
    o.verdict.probs = j.at("verdict").at("probs").get<LabelProbs>();
    o.failure = parse_stage_failure(j.at("failure"));
    o.failure_detail = j.at("failure_detail").get<std::string>();
    return rec;
}

// ---------------------------------------------------------------------------
// Per-cell results

/// Summary of one <task, policy> cell.
struct ExperimentResult {
    std::string task;
    std::string policy;
    PolicyKind kind = PolicyKind::NoKb;
    std::optional<std::string> kb;       // the single KB, or the task-level choice
    std::optional<std::string> kb_kind;  // retriever kind of `kb`
    std::size_t n_claims = 0;
    std::size_t n_labeled = 0;
    std::optional<ConfusionMatrix> matrix;
    std::optional<BootstrapCI> ci;
    EvidenceQualityStats quality;
    std::array<std::size_t, 3> failures{};  // retriever, scorer, classifier

    std::optional<double> accuracy() const
    {
        return matrix ? std::optional<double>(matrix->accuracy()) : std::nullopt;
    }
};

inline ExperimentResult summarize(const std::string& task, const KbPolicy& policy,
                                  std::span<const OutcomeRecord> records, std::uint64_t seed,
                                  std::size_t n_resamples = 200)
{
    ExperimentResult res;
    res.task = task;
    res.policy = policy.id();
    res.kind = policy.kind;
    res.n_claims = records.size();
    std::vector<ClaimOutcome> outcomes;
    std::vector<std::optional<Label>> golds;
    for (const auto& r : records) {
        outcomes.push_back(r.outcome);
        golds.push_back(r.gold);
        if (r.gold) {
            ++res.n_labeled;
        }
        if (r.outcome.failure) {
            ++res.failures[static_cast<std::size_t>(*r.outcome.failure)];
        }
    }
    if (policy.kind == PolicyKind::Single) {
        res.kb = policy.kbs.front();
    } else if (policy.kind == PolicyKind::BestEvidenceTask && !outcomes.empty()) {
        res.kb = outcomes.front().chosen_kb;
    }
    if (!outcomes.empty()) {
        res.quality = quality_stats(outcomes);
    }
    if (res.n_labeled > 0) {
        res.matrix = confusion(std::span<const ClaimOutcome>(outcomes), golds);
        res.ci = bootstrap_accuracy(correct_flags(outcomes, golds), n_resamples, seed);
    }
    return res;
}

inline json matrix_json(const ConfusionMatrix& m)
{
    return {{"counts", m.counts}, {"normalized", m.normalized}, {"total", m.total}};
}

inline ConfusionMatrix matrix_from_json(const json& j)
{
    ConfusionMatrix m;
    m.counts = j.at("counts").get<CountMatrix3>();
    m.normalized = j.at("normalized").get<Matrix3>();
    m.total = j.at("total").get<double>();
    return m;
}

inline json result_to_json(const ExperimentResult& r)
{
    json j{{"task", r.task},
           {"policy", r.policy},
           {"kind", static_cast<int>(r.kind)},
           {"kb", r.kb ? json(*r.kb) : json(nullptr)},
           {"kb_kind", r.kb_kind ? json(*r.kb_kind) : json(nullptr)},
           {"n_claims", r.n_claims},
           {"n_labeled", r.n_labeled},
           {"matrix", r.matrix ? matrix_json(*r.matrix) : json(nullptr)},
           {"quality", {{"mean_max_bm25", r.quality.mean_max_bm25}, {"mean_max_e", r.quality.mean_max_e}}},
           {"failures", r.failures}};
    if (r.ci) {
        j["ci"] = {{"mean", r.ci->mean}, {"half_width", r.ci->half_width}, {"n_resamples", r.ci->n_resamples},
                   {"level", r.ci->level}};
    } else {
        j["ci"] = nullptr;
    }
    return j;
}

inline ExperimentResult result_from_json(const json& j)
{
    ExperimentResult r;
    r.task = j.at("task").get<std::string>();
    r.policy = j.at("policy").get<std::string>();
    r.kind = static_cast<PolicyKind>(j.at("kind").get<int>());
    if (!j.at("kb").is_null()) {
        r.kb = j.at("kb").get<std::string>();
    }
    if (!j.at("kb_kind").is_null()) {
        r.kb_kind = j.at("kb_kind").get<std::string>();
    }
    r.n_claims = j.at("n_claims").get<std::size_t>();
    r.n_labeled = j.at("n_labeled").get<std::size_t>();
    if (!j.at("matrix").is_null()) {
        r.matrix = matrix_from_json(j.at("matrix"));
    }
    r.quality.mean_max_bm25 = j.at("quality").at("mean_max_bm25").get<double>();
    r.quality.mean_max_e = j.at("quality").at("mean_max_e").get<double>();
    r.failures = j.at("failures").get<std::array<std::size_t, 3>>();
    if (!j.at("ci").is_null()) {
        const auto& c = j.at("ci");
        r.ci = BootstrapCI{c.at("mean").get<double>(), c.at("half_width").get<double>(),
                           c.at("n_resamples").get<std::size_t>(), c.at("level").get<double>()};
    }
    return r;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

/// Shortest decimal that round-trips to the same double.
inline std::string fmt_exact(double v)
{
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

inline std::string fmt_fixed(double v, int digits)
{
    std::array<char, 64> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, digits);
    return std::string(buf.data(), end);
}

inline std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return out + "\"";
}

inline void write_file(const std::filesystem::path& path, const std::string& content)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
    out << content;
    if (!out) {
        throw Error(ErrorCode::Io, "write failure on " + path.string());
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

} // namespace detail

inline std::vector<ScatterPoint> bm25_points(std::span<const ExperimentResult> results)
{
    std::vector<ScatterPoint> pts;
    for (const auto& r : results) {
        if (r.kind == PolicyKind::Single && r.accuracy() && r.kb_kind == "indexed") {
            pts.push_back({r.quality.mean_max_bm25, *r.accuracy(), r.task + "/" + *r.kb});
        }
    }
    return pts;
}

inline std::vector<ScatterPoint> evidence_points(std::span<const ExperimentResult> results)
{
    std::vector<ScatterPoint> pts;
    for (const auto& r : results) {
        if (r.kind == PolicyKind::Single && r.accuracy()) {
            pts.push_back({r.quality.mean_max_e, *r.accuracy(), r.task + "/" + *r.kb});
        }
    }
    return pts;
}

inline json correlation_json(const std::vector<ScatterPoint>& pts)
{
    try {
        const auto rep = pearson(pts);
        return {{"r", rep.r}, {"p", rep.p_value}, {"n", rep.n}, {"r_squared", rep.r * rep.r}};
    } catch (const Error& e) {
        return {{"r", nullptr}, {"p", nullptr}, {"n", pts.size()}, {"error", e.what()}};
    }
}

/// Writes accuracy.{md,csv}, confusion/*.csv, scatter.csv and
/// correlation.json. Results are rendered in the given order; every file
/// starts with the config hash.
inline void emit_report(std::span<const ExperimentResult> results, const std::filesystem::path& dir,
                        const std::string& config_hash)
{
    if (results.empty()) {
        throw Error(ErrorCode::EmptyEvaluation, "no results to report");
    }
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "confusion", ec);
    if (ec) {
        throw Error(ErrorCode::Io, "cannot create " + (dir / "confusion").string());
    }
    const std::string hash_line = "# config_hash=" + config_hash + "\n";

    std::vector<std::string> tasks;
    std::vector<std::string> policies;
    std::map<std::pair<std::string, std::string>, const ExperimentResult*> cell;
    for (const auto& r : results) {
        if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) {
            tasks.push_back(r.task);
        }
        if (std::find(policies.begin(), policies.end(), r.policy) == policies.end()) {
            policies.push_back(r.policy);
        }
        cell[{r.task, r.policy}] = &r;
    }

    // Accuracy matrix, policies as rows.
    std::ostringstream md;
    md << "<!-- config_hash: " << config_hash << " -->\n\n| Policy |";
    for (const auto& t : tasks) {
        md << ' ' << t << " |";
    }
    md << " Avg. |\n|---|";
    for (std::size_t i = 0; i <= tasks.size(); ++i) {
        md << "---|";
    }
    md << '\n';
    for (const auto& p : policies) {
        md << "| " << p << " |";
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& t : tasks) {
            auto it = cell.find({t, p});
            if (it != cell.end() && it->second->accuracy()) {
                const double acc = *it->second->accuracy();
                md << ' ' << detail::fmt_fixed(acc, 1) << " |";
                sum += acc;
                ++count;
            } else {
                md << " - |";
            }
        }
        md << ' ' << (count ? detail::fmt_fixed(sum / static_cast<double>(count), 1) : std::string("-")) << " |\n";
    }
    detail::write_file(dir / "accuracy.md", md.str());

    std::ostringstream csv;
    csv << hash_line
        << "task,policy,kb,n_claims,n_labeled,accuracy,ci_mean,ci_half_width,mean_max_bm25,mean_max_e,"
           "retriever_failures,scorer_failures,classifier_failures\n";
    for (const auto& r : results) {
        csv << detail::csv_field(r.task) << ',' << detail::csv_field(r.policy) << ','
            << detail::csv_field(r.kb.value_or("")) << ',' << r.n_claims << ',' << r.n_labeled << ','
            << (r.accuracy() ? detail::fmt_exact(*r.accuracy()) : "") << ','
            << (r.ci ? detail::fmt_exact(r.ci->mean) : "") << ','
            << (r.ci ? detail::fmt_exact(r.ci->half_width) : "") << ',' << detail::fmt_exact(r.quality.mean_max_bm25)
            << ',' << detail::fmt_exact(r.quality.mean_max_e) << ',' << r.failures[0] << ',' << r.failures[1]
            << ',' << r.failures[2] << '\n';
    }
    detail::write_file(dir / "accuracy.csv", csv.str());

    for (const auto& r : results) {
        if (!r.matrix) {
            continue;
        }
        std::ostringstream cm;
        cm << hash_line << "kind,gold,SUPPORTED,REFUTED,NOT_ENOUGH_INFO\n";
        for (auto g : kAllLabels) {
            cm << "raw," << to_string(g);
            for (auto c : r.matrix->counts[index_of(g)]) {
                cm << ',' << c;
            }
            cm << '\n';
        }
        for (auto g : kAllLabels) {
            cm << "normalized," << to_string(g);
            for (auto v : r.matrix->normalized[index_of(g)]) {
                cm << ',' << detail::fmt_exact(v);
            }
            cm << '\n';
        }
        detail::write_file(dir / "confusion" / (r.task + "__" + r.policy + ".csv"), cm.str());
    }

    std::ostringstream scatter;
    scatter << hash_line << "task,kb,mean_max_bm25,mean_max_e,accuracy\n";
    for (const auto& r : results) {
        if (r.kind == PolicyKind::Single && r.accuracy()) {
            scatter << detail::csv_field(r.task) << ',' << detail::csv_field(*r.kb) << ','
                    << detail::fmt_exact(r.quality.mean_max_bm25) << ',' << detail::fmt_exact(r.quality.mean_max_e)
                    << ',' << detail::fmt_exact(*r.accuracy()) << '\n';
        }
    }
    detail::write_file(dir / "scatter.csv", scatter.str());

    nlohmann::ordered_json corr{{"config_hash", config_hash},
              {"bm25_vs_accuracy", correlation_json(bm25_points(results))},
              {"evidence_vs_accuracy", correlation_json(evidence_points(results))}};
    detail::write_file(dir / "correlation.json", corr.dump(2) + "\n");
}

struct ScatterRow {
    std::string task;
    std::string kb;
    double mean_max_bm25 = 0.0;
    double mean_max_e = 0.0;
    double accuracy = 0.0;
};

/// Reads scatter.csv back; '#' lines are skipped.
inline std::vector<ScatterRow> load_scatter(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path.string());
    }
    std::vector<ScatterRow> rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty() || line.front() == '#') {
            continue;
        }
        if (header) {
            header = false;
            continue;
        }
        auto f = detail::split_csv_line(line);
        if (f.size() != 5) {
            throw Error(ErrorCode::MalformedLine, "scatter row has " + std::to_string(f.size()) + " fields");
        }
        rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    }
    return rows;
}

} // namespace kbcheck
