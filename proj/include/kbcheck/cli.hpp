#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/evidence.hpp"
#include "kbcheck/index.hpp"
#include "kbcheck/policy.hpp"
#include "kbcheck/report.hpp"
#include "kbcheck/retriever.hpp"
#include "kbcheck/verdict.hpp"

namespace kbcheck::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string sha256_hex(std::string_view data)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::Io, "SHA-256 unavailable");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) {
        out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return out.str();
}

struct TaskSpec {
    std::string name;
    fs::path path;
};

struct KbSpec {
    std::string name;
    RetrieverKind kind = RetrieverKind::Indexed;
    fs::path path;        // indexed: JSON-lines documents
    fs::path index_path;  // indexed: optional prebuilt snapshot
    fs::path fixture_path;
    WebSearchConfig web;
    std::optional<std::size_t> k;
};

struct ModelSpec {
    bool remote = false;
    http::ClientOptions client;
    HeuristicConfig heuristic;
};

struct ExperimentConfig {
    std::vector<TaskSpec> tasks;
    std::vector<KbSpec> kbs;
    std::vector<KbPolicy> policies;
    ModelSpec scorer;
    ModelSpec classifier;
    fs::path output_dir;
    std::size_t workers = 1;
    std::uint64_t seed = 42;
    std::size_t n_resamples = 200;
    std::size_t evidence_n = 5;
    std::string hash;
};

namespace detail {

inline std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline fs::path resolve(const fs::path& base, const std::string& p)
{
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

/// Collects configuration problems so all of them can be reported at once.
class Problems {
public:
    void add(std::string msg) { list_.push_back(std::move(msg)); }
    bool empty() const { return list_.empty(); }
    const std::vector<std::string>& list() const { return list_; }

    std::string joined() const
    {
        std::string out;
        for (const auto& p : list_) {
            out += (out.empty() ? "" : "\n") + p;
        }
        return out;
    }

private:
    std::vector<std::string> list_;
};

template <typename T>
std::optional<T> get_opt(const json& obj, const char* key, const std::string& where, Problems& problems)
{
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        return std::nullopt;
    }
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        problems.add(where + ": field '" + key + "' has the wrong type");
        return std::nullopt;
    }
}

inline ModelSpec parse_model(const json& j, const std::string& where, Problems& problems)
{
    ModelSpec spec;
    if (j.is_null()) {
        return spec;
    }
    if (!j.is_object()) {
        problems.add(where + ": expected an object");
        return spec;
    }
    const auto type = get_opt<std::string>(j, "type", where, problems).value_or("native");
    if (type == "remote") {
        spec.remote = true;
        if (auto ep = get_opt<std::string>(j, "endpoint", where, problems)) {
            spec.client.endpoint = *ep;
            try {
                http::parse_endpoint(*ep);
            } catch (const Error& e) {
                problems.add(where + ": " + e.what());
            }
        } else {
            problems.add(where + ": remote model needs an 'endpoint'");
        }
        spec.client.retries = get_opt<int>(j, "retries", where, problems).value_or(3);
        spec.client.max_in_flight = get_opt<int>(j, "max_in_flight", where, problems).value_or(4);
        spec.client.timeout = std::chrono::milliseconds(get_opt<int>(j, "timeout_ms", where, problems).value_or(30000));
        spec.client.initial_backoff =
            std::chrono::milliseconds(get_opt<int>(j, "backoff_ms", where, problems).value_or(100));
    } else if (type == "native") {
        if (auto tau = get_opt<double>(j, "tau", where, problems)) {
            spec.heuristic.tau = *tau;
        }
        if (auto neg = get_opt<std::vector<std::string>>(j, "negations", where, problems)) {
            spec.heuristic.negations = *neg;
        }
    } else {
        problems.add(where + ": unknown type '" + type + "' (expected native or remote)");
    }
    return spec;
}

inline std::optional<KbPolicy> parse_policy(const json& j, const std::string& where,
                                            const std::vector<std::string>& all_kbs, Problems& problems)
{
    if (!j.is_object()) {
        problems.add(where + ": expected an object");
        return std::nullopt;
    }
    const auto type = get_opt<std::string>(j, "type", where, problems);
    if (!type) {
        problems.add(where + ": missing 'type'");
        return std::nullopt;
    }
    auto list = get_opt<std::vector<std::string>>(j, "kbs", where, problems).value_or(all_kbs);
    if (*type == "single") {
        auto kb = get_opt<std::string>(j, "kb", where, problems);
        if (!kb) {
            problems.add(where + ": single policy needs 'kb'");
            return std::nullopt;
        }
        return KbPolicy::single(*kb);
    }
    if (*type == "union") {
        return KbPolicy::union_of(list);
    }
    if (*type == "none") {
        return KbPolicy::none();
    }
    if (*type == "best_evidence_task") {
        return KbPolicy::best_task(list);
    }
    if (*type == "best_evidence_claim") {
        return KbPolicy::best_claim(list);
    }
    problems.add(where + ": unknown policy type '" + *type + "'");
    return std::nullopt;
}

} // namespace detail

/// Parses and validates an experiment config. Every problem found is reported
/// in a single Config error, one per line.
inline ExperimentConfig parse_config(const json& root, const fs::path& base_dir)
{
    detail::Problems problems;
    ExperimentConfig cfg;
    if (!root.is_object()) {
        throw Error(ErrorCode::Config, "config must be a JSON object");
    }
    cfg.hash = sha256_hex(root.dump());

    auto tasks = root.find("tasks");
    if (tasks == root.end() || !tasks->is_array() || tasks->empty()) {
        problems.add("config: 'tasks' must be a non-empty array");
    } else {
        for (std::size_t i = 0; i < tasks->size(); ++i) {
            const auto& t = (*tasks)[i];
            const std::string where = "tasks[" + std::to_string(i) + "]";
            auto name = detail::get_opt<std::string>(t, "name", where, problems);
            auto path = detail::get_opt<std::string>(t, "path", where, problems);
            if (!name || !path) {
                problems.add(where + ": needs 'name' and 'path'");
                continue;
            }
            for (const auto& other : cfg.tasks) {
                if (other.name == *name) {
                    problems.add(where + ": duplicate task name '" + *name + "'");
                }
            }
            TaskSpec spec{*name, detail::resolve(base_dir, *path)};
            if (!fs::exists(spec.path)) {
                problems.add(where + ": task file not found: " + spec.path.string());
            }
            cfg.tasks.push_back(std::move(spec));
        }
    }

    std::vector<std::string> kb_names;
    auto kbs = root.find("kbs");
    if (kbs != root.end() && !kbs->is_array()) {
        problems.add("config: 'kbs' must be an array");
    } else if (kbs != root.end()) {
        for (std::size_t i = 0; i < kbs->size(); ++i) {
            const auto& k = (*kbs)[i];
            const std::string where = "kbs[" + std::to_string(i) + "]";
            auto name = detail::get_opt<std::string>(k, "name", where, problems);
            if (!name) {
                problems.add(where + ": missing 'name'");
                continue;
            }
            if (std::find(kb_names.begin(), kb_names.end(), *name) != kb_names.end()) {
                problems.add(where + ": duplicate knowledge base name '" + *name + "'");
                continue;
            }
            KbSpec spec;
            spec.name = *name;
            spec.k = detail::get_opt<std::size_t>(k, "k", where, problems);
            if (spec.k && *spec.k < 1) {
                problems.add(where + ": 'k' must be at least 1");
            }
            const auto kind = detail::get_opt<std::string>(k, "kind", where, problems).value_or("indexed");
            auto require_file = [&](const char* key) -> fs::path {
                auto p = detail::get_opt<std::string>(k, key, where, problems);
                if (!p) {
                    return {};
                }
                auto resolved = detail::resolve(base_dir, *p);
                if (!fs::exists(resolved)) {
                    problems.add(where + ": file not found: " + resolved.string());
                }
                return resolved;
            };
            if (kind == "indexed") {
                spec.kind = RetrieverKind::Indexed;
                spec.path = require_file("path");
                spec.index_path = require_file("index");
                if (spec.path.empty() && spec.index_path.empty()) {
                    problems.add(where + ": indexed knowledge base needs 'path' or 'index'");
                }
            } else if (kind == "fixture") {
                spec.kind = RetrieverKind::Fixture;
                spec.fixture_path = require_file("fixture_path");
                if (spec.fixture_path.empty()) {
                    problems.add(where + ": fixture knowledge base needs 'fixture_path'");
                }
            } else if (kind == "web_search") {
                spec.kind = RetrieverKind::WebSearch;
                auto ep = detail::get_opt<std::string>(k, "endpoint", where, problems);
                if (!ep) {
                    problems.add(where + ": web_search knowledge base needs 'endpoint'");
                } else {
                    spec.web.client.endpoint = *ep;
                }
                spec.web.api_key_env = detail::get_opt<std::string>(k, "api_key_env", where, problems).value_or("");
                spec.web.hits = detail::get_opt<std::size_t>(k, "hits", where, problems).value_or(10);
                spec.web.client.max_in_flight = detail::get_opt<int>(k, "max_in_flight", where, problems).value_or(2);
                spec.web.client.retries = detail::get_opt<int>(k, "retries", where, problems).value_or(3);
            } else {
                problems.add(where + ": unknown kind '" + kind + "'");
            }
            kb_names.push_back(spec.name);
            cfg.kbs.push_back(std::move(spec));
        }
    }

    auto policies = root.find("policies");
    if (policies == root.end() || !policies->is_array() || policies->empty()) {
        problems.add("config: 'policies' must be a non-empty array");
    } else {
        // Validate references against names only; retrievers are built later.
        KbRegistry names_only;
        auto placeholder = std::make_shared<FixtureRetriever>();
        for (const auto& n : kb_names) {
            names_only.add({n, placeholder, std::nullopt});
        }
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < policies->size(); ++i) {
            const std::string where = "policies[" + std::to_string(i) + "]";
            auto policy = detail::parse_policy((*policies)[i], where, kb_names, problems);
            if (!policy) {
                continue;
            }
            for (const auto& issue : policy->problems(names_only)) {
                problems.add(where + ": " + issue);
            }
            if (std::find(ids.begin(), ids.end(), policy->id()) != ids.end()) {
                problems.add(where + ": duplicate policy '" + policy->id() + "'");
            }
            ids.push_back(policy->id());
            cfg.policies.push_back(std::move(*policy));
        }
    }

    cfg.scorer = detail::parse_model(root.value("scorer", json()), "scorer", problems);
    cfg.classifier = detail::parse_model(root.value("classifier", json()), "classifier", problems);
    cfg.output_dir = detail::resolve(base_dir, detail::get_opt<std::string>(root, "output_dir", "config", problems)
                                                   .value_or("kbcheck-out"));
    cfg.workers = detail::get_opt<std::size_t>(root, "workers", "config", problems).value_or(1);
    cfg.seed = detail::get_opt<std::uint64_t>(root, "seed", "config", problems).value_or(42);
    cfg.n_resamples = detail::get_opt<std::size_t>(root, "n_resamples", "config", problems).value_or(200);
    cfg.evidence_n = detail::get_opt<std::size_t>(root, "evidence_n", "config", problems).value_or(5);
    if (cfg.workers < 1 || cfg.n_resamples < 1 || cfg.evidence_n < 1) {
        problems.add("config: 'workers', 'n_resamples' and 'evidence_n' must be at least 1");
    }
    if (!problems.empty()) {
        throw Error(ErrorCode::Config, problems.joined());
    }
    return cfg;
}

inline ExperimentConfig load_config(const fs::path& path)
{
    json root;
    try {
        root = json::parse(detail::read_file(path));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Config, path.string() + ": " + e.what());
    }
    return parse_config(root, path.parent_path());
}

inline KbRegistry build_registry(const ExperimentConfig& cfg)
{
    KbRegistry registry;
    for (const auto& spec : cfg.kbs) {
        std::shared_ptr<const Retriever> retriever;
        switch (spec.kind) {
        case RetrieverKind::Indexed: {
            auto index = spec.index_path.empty()
                             ? InvertedIndex::build(load_kb(spec.path, spec.name), static_cast<unsigned>(cfg.workers))
                             : InvertedIndex::load(spec.index_path);
            retriever = std::make_shared<IndexedRetriever>(std::make_shared<const InvertedIndex>(std::move(index)));
            break;
        }
        case RetrieverKind::Fixture:
            retriever = std::make_shared<FixtureRetriever>(FixtureRetriever::load(spec.fixture_path));
            break;
        case RetrieverKind::WebSearch:
            retriever = std::make_shared<WebSearchRetriever>(spec.web);
            break;
        }
        registry.add({spec.name, std::move(retriever), spec.k});
    }
    return registry;
}

inline std::unique_ptr<EvidenceScorer> make_scorer(const ModelSpec& spec)
{
    if (spec.remote) {
        return std::make_unique<RemoteScorer>(spec.client);
    }
    return std::make_unique<LexicalScorer>();
}

inline std::unique_ptr<VeracityClassifier> make_classifier(const ModelSpec& spec)
{
    if (spec.remote) {
        return std::make_unique<RemoteClassifier>(spec.client);
    }
    return std::make_unique<HeuristicClassifier>(spec.heuristic);
}

inline std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

inline fs::path cell_dir(const fs::path& out_dir, const std::string& task, const std::string& policy)
{
    return out_dir / "cells" / task / policy;
}

inline constexpr const char* kDoneFile = "DONE";
inline constexpr const char* kOutcomesFile = "outcomes.jsonl";
inline constexpr const char* kManifestFile = "manifest.json";

inline std::vector<OutcomeRecord> read_outcomes(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open " + path.string());
    }
    std::vector<OutcomeRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            auto j = json::parse(line);
            if (j.contains("header")) {
                continue;
            }
            records.push_back(outcome_from_json(j));
        } catch (const json::exception& e) {
            throw LineError(ErrorCode::MalformedLine, line_no, path.string() + ": " + e.what());
        }
    }
    return records;
}

struct CellInfo {
    std::string task;
    KbPolicy policy;
    std::optional<std::string> kb_kind;
};

inline json cell_json(const CellInfo& c, std::string_view status)
{
    return {{"task", c.task},
            {"policy", c.policy.id()},
            {"kind", static_cast<int>(c.policy.kind)},
            {"kbs", c.policy.kbs},
            {"kb_kind", c.kb_kind ? json(*c.kb_kind) : json(nullptr)},
            {"status", status}};
}

/// Rebuilds per-cell summaries from stored outcomes.
inline ExperimentResult summarize_cell(const fs::path& out_dir, const CellInfo& cell, std::uint64_t seed,
                                       std::size_t n_resamples)
{
    const auto records = read_outcomes(cell_dir(out_dir, cell.task, cell.policy.id()) / kOutcomesFile);
    auto result = summarize(cell.task, cell.policy, records, seed, n_resamples);
    if (cell.policy.kind == PolicyKind::Single) {
        result.kb_kind = cell.kb_kind;
    }
    return result;
}

struct RunSummary {
    std::vector<std::string> computed;  // "task/policy" cells run this time
    std::vector<std::string> resumed;   // cells reused from an earlier run
};

/// Runs every (task x policy) cell, persists outcomes, and renders reports.
/// Per-claim failures are data; only configuration and I/O problems throw.
inline RunSummary run_experiment(const ExperimentConfig& cfg, bool resume, std::ostream& log)
{
    const auto started = utc_now();
    fs::create_directories(cfg.output_dir);
    std::optional<KbRegistry> registry;
    std::unique_ptr<EvidenceScorer> scorer;
    std::unique_ptr<VeracityClassifier> classifier;

    RunSummary summary;
    std::vector<ExperimentResult> results;
    json cells = json::array();
    std::array<std::size_t, 3> failures{};

    for (const auto& task_spec : cfg.tasks) {
        std::optional<ClaimTask> task;
        for (const auto& policy : cfg.policies) {
            CellInfo info{task_spec.name, policy, std::nullopt};
            if (policy.kind == PolicyKind::Single) {
                for (const auto& kb : cfg.kbs) {
                    if (kb.name == policy.kbs.front()) {
                        info.kb_kind = std::string(to_string(kb.kind));
                    }
                }
            }
            const auto dir = cell_dir(cfg.output_dir, task_spec.name, policy.id());
            const auto done = dir / kDoneFile;
            const std::string label = task_spec.name + "/" + policy.id();
            bool reuse = false;
            if (resume && fs::exists(done) && fs::exists(dir / kOutcomesFile)) {
                reuse = detail::read_file(done) == cfg.hash + "\n";
            }
            if (reuse) {
                summary.resumed.push_back(label);
                log << "resume " << label << '\n';
            } else {
                if (!task) {
                    task = load_task(task_spec.path, task_spec.name);
                }
                if (!registry) {
                    registry = build_registry(cfg);
                    scorer = make_scorer(cfg.scorer);
                    classifier = make_classifier(cfg.classifier);
                }
                fs::remove_all(dir);
                fs::create_directories(dir);
                Pipeline pipe{*registry, *scorer, *classifier, cfg.workers, cfg.evidence_n};
                auto run = run_policy(*task, policy, pipe);
                std::ostringstream lines;
                lines << json{{"header", {{"config_hash", cfg.hash}, {"task", task_spec.name}, {"policy", policy.id()}}}}
                             .dump()
                      << '\n';
                for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
                    lines << outcome_to_json(run.outcomes[i], task->claims[i].gold).dump() << '\n';
                }
                kbcheck::detail::write_file(dir / kOutcomesFile, lines.str());
                json cell_meta{{"config_hash", cfg.hash}};
                if (run.task_selection) {
                    cell_meta["selected_kb"] = run.task_selection->chosen;
                    cell_meta["mean_max_e"] = run.task_selection->mean_max_scores;
                }
                kbcheck::detail::write_file(dir / "selection.json", cell_meta.dump(2) + "\n");
                summary.computed.push_back(label);
                log << "ran    " << label << '\n';
            }
            auto result = summarize_cell(cfg.output_dir, info, cfg.seed, cfg.n_resamples);
            kbcheck::detail::write_file(dir / "result.json",
                                        json{{"config_hash", cfg.hash}, {"result", result_to_json(result)}}.dump(2) + "\n");
            if (!reuse) {
                kbcheck::detail::write_file(done, cfg.hash + "\n");
            }
            for (std::size_t f = 0; f < 3; ++f) {
                failures[f] += result.failures[f];
            }
            results.push_back(std::move(result));
            cells.push_back(cell_json(info, reuse ? "resumed" : "computed"));
        }
    }

    emit_report(results, cfg.output_dir / "report", cfg.hash);

    nlohmann::ordered_json manifest{{"config_hash", cfg.hash},
                  {"tool_version", kToolVersion},
                  {"seed", cfg.seed},
                  {"n_resamples", cfg.n_resamples},
                  {"started_at", started},
                  {"finished_at", utc_now()},
                  {"cells", cells},
                  {"failures",
                   {{"RetrieverUnavailable", failures[0]},
                    {"ScorerUnavailable", failures[1]},
                    {"ClassifierUnavailable", failures[2]}}}};
    kbcheck::detail::write_file(cfg.output_dir / kManifestFile, manifest.dump(2) + "\n");
    return summary;
}

/// Re-renders the report of a finished run from its stored outcomes.
inline void render_report(const fs::path& dir)
{
    const auto manifest_path = dir / kManifestFile;
    if (!fs::exists(manifest_path)) {
        throw Error(ErrorCode::Io, "no " + std::string(kManifestFile) + " in " + dir.string());
    }
    json manifest;
    try {
        manifest = json::parse(detail::read_file(manifest_path));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Io, manifest_path.string() + ": " + e.what());
    }
    const auto hash = manifest.at("config_hash").get<std::string>();
    const auto seed = manifest.at("seed").get<std::uint64_t>();
    const auto n_resamples = manifest.at("n_resamples").get<std::size_t>();
    std::vector<ExperimentResult> results;
    for (const auto& c : manifest.at("cells")) {
        CellInfo info;
        info.task = c.at("task").get<std::string>();
        info.policy.kind = static_cast<PolicyKind>(c.at("kind").get<int>());
        info.policy.kbs = c.at("kbs").get<std::vector<std::string>>();
        if (!c.at("kb_kind").is_null()) {
            info.kb_kind = c.at("kb_kind").get<std::string>();
        }
        const auto cdir = cell_dir(dir, info.task, info.policy.id());
        if (!fs::exists(cdir / kDoneFile) || !fs::exists(cdir / kOutcomesFile)) {
            throw Error(ErrorCode::Io, "incomplete cell " + cdir.string());
        }
        results.push_back(summarize_cell(dir, info, seed, n_resamples));
    }
    if (results.empty()) {
        throw Error(ErrorCode::Io, "run in " + dir.string() + " has no cells");
    }
    emit_report(results, dir / "report", hash);
}

// ---------------------------------------------------------------------------
// Command entry points: return the process exit code.

inline int cmd_index(const fs::path& kb_path, const fs::path& out_path, std::ostream& out, std::ostream& err)
{
    try {
        const auto kb = load_kb(kb_path, kb_path.stem().string());
        const auto index = InvertedIndex::build(kb);
        index.save(out_path);
        out << "docs=" << index.doc_count() << " avg_doc_length=" << index.avg_doc_length()
            << " terms=" << index.term_count() << '\n';
        return 0;
    } catch (const Error& e) {
        err << "index: " << e.what() << '\n';
        return 1;
    }
}

inline int cmd_run(const fs::path& config_path, bool resume, std::ostream& out, std::ostream& err)
{
    try {
        const auto cfg = load_config(config_path);
        const auto summary = run_experiment(cfg, resume, out);
        out << "cells computed=" << summary.computed.size() << " resumed=" << summary.resumed.size()
            << " output=" << cfg.output_dir.string() << '\n';
        return 0;
    } catch (const Error& e) {
        err << "run: " << e.what() << '\n';
        return 1;
    } catch (const fs::filesystem_error& e) {
        err << "run: " << e.what() << '\n';
        return 1;
    }
}

inline int cmd_report(const fs::path& dir, std::ostream& out, std::ostream& err)
{
    try {
        render_report(dir);
        out << "report written to " << (dir / "report").string() << '\n';
        return 0;
    } catch (const Error& e) {
        err << "report: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        err << "report: malformed run directory: " << e.what() << '\n';
        return 1;
    }
}

} // namespace kbcheck::cli
