#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "kbcheck/corpus.hpp"
#include "kbcheck/error.hpp"
#include "kbcheck/evidence.hpp"
#include "kbcheck/retriever.hpp"
#include "kbcheck/verdict.hpp"

namespace kbcheck {

/// A named knowledge base ready for retrieval. `k` overrides the
/// retriever's default depth.
struct KbEntry {
    std::string name;
    std::shared_ptr<const Retriever> retriever;
    std::optional<std::size_t> k;

    std::size_t depth() const { return k.value_or(retriever->default_k()); }
};

/// Knowledge bases in registration order; the order breaks selection ties.
class KbRegistry {
public:
    void add(KbEntry entry)
    {
        if (find(entry.name)) {
            throw Error(ErrorCode::Config, "knowledge base '" + entry.name + "' registered twice");
        }
        if (!entry.retriever) {
            throw Error(ErrorCode::Config, "knowledge base '" + entry.name + "' has no retriever");
        }
        entries_.push_back(std::move(entry));
    }

    const KbEntry* find(const std::string& name) const
    {
        for (const auto& e : entries_) {
            if (e.name == name) {
                return &e;
            }
        }
        return nullptr;
    }

    const KbEntry& at(const std::string& name) const
    {
        if (const auto* e = find(name)) {
            return *e;
        }
        throw Error(ErrorCode::Config, "unknown knowledge base '" + name + "'");
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        for (const auto& e : entries_) {
            out.push_back(e.name);
        }
        return out;
    }

    const std::vector<KbEntry>& entries() const { return entries_; }

private:
    std::vector<KbEntry> entries_;
};

enum class PolicyKind { Single, Union, NoKb, BestEvidenceTask, BestEvidenceClaim };

struct KbPolicy {
    PolicyKind kind = PolicyKind::NoKb;
    std::vector<std::string> kbs;

    static KbPolicy single(std::string kb) { return {PolicyKind::Single, {std::move(kb)}}; }
    static KbPolicy union_of(std::vector<std::string> kbs) { return {PolicyKind::Union, std::move(kbs)}; }
    static KbPolicy none() { return {PolicyKind::NoKb, {}}; }
    static KbPolicy best_task(std::vector<std::string> kbs) { return {PolicyKind::BestEvidenceTask, std::move(kbs)}; }
    static KbPolicy best_claim(std::vector<std::string> kbs) { return {PolicyKind::BestEvidenceClaim, std::move(kbs)}; }

    /// Stable identifier, also used as a directory name.
    std::string id() const
    {
        auto joined = [this] {
            std::string s;
            for (const auto& kb : kbs) {
                s += (s.empty() ? "" : "+") + kb;
            }
            return s;
        };
        switch (kind) {
        case PolicyKind::Single: return "single-" + joined();
        case PolicyKind::Union: return "union-" + joined();
        case PolicyKind::NoKb: return "none";
        case PolicyKind::BestEvidenceTask: return "best-task-" + joined();
        case PolicyKind::BestEvidenceClaim: return "best-claim-" + joined();
        }
        return "";
    }

    /// Problems with this policy against a registry; empty when valid.
    std::vector<std::string> problems(const KbRegistry& registry) const
    {
        std::vector<std::string> out;
        if (kind == PolicyKind::NoKb) {
            if (!kbs.empty()) {
                out.push_back("policy 'none' takes no knowledge bases");
            }
            return out;
        }
        if (kind == PolicyKind::Single && kbs.size() != 1) {
            out.push_back("single policy needs exactly one knowledge base");
        }
        if (kbs.empty()) {
            out.push_back("policy lists no knowledge bases");
        }
        std::unordered_set<std::string> seen;
        for (const auto& kb : kbs) {
            if (!seen.insert(kb).second) {
                out.push_back("knowledge base '" + kb + "' listed twice");
            }
            if (!registry.find(kb)) {
                out.push_back("unknown knowledge base '" + kb + "'");
            }
        }
        return out;
    }

    void validate(const KbRegistry& registry) const
    {
        auto issues = problems(registry);
        if (!issues.empty()) {
            std::string msg = id() + ":";
            for (const auto& i : issues) {
                msg += " " + i + ";";
            }
            throw Error(ErrorCode::InvalidArgument, msg);
        }
    }

    bool operator==(const KbPolicy&) const = default;
};

enum class StageFailure { RetrieverUnavailable, ScorerUnavailable, ClassifierUnavailable };

inline std::string_view to_string(StageFailure f)
{
    switch (f) {
    case StageFailure::RetrieverUnavailable: return "RetrieverUnavailable";
    case StageFailure::ScorerUnavailable: return "ScorerUnavailable";
    case StageFailure::ClassifierUnavailable: return "ClassifierUnavailable";
    }
    return "";
}

struct KbRetrieval {
    std::string kb;
    RetrievalResult result;
    std::optional<StageFailure> failure;

    bool operator==(const KbRetrieval&) const = default;
};

/// Everything recorded for one claim under one policy. A set `failure` always
/// comes with the NotEnoughInfo (0,0,1) verdict.
struct ClaimOutcome {
    std::string claim_id;
    std::string policy;
    std::optional<std::string> chosen_kb;
    std::vector<KbRetrieval> retrievals;
    EvidenceSet evidence;
    Verdict verdict;
    std::optional<StageFailure> failure;
    std::string failure_detail;

    /// Highest retrieval score across the consulted KBs, 0 if none.
    double max_retrieval_score() const
    {
        double best = 0.0;
        for (const auto& r : retrievals) {
            best = std::max(best, r.result.max_score);
        }
        return best;
    }

    bool operator==(const ClaimOutcome&) const = default;
};

/// Retrieval and evidence selection against one KB.
struct KbEvidence {
    std::string kb;
    RetrievalResult retrieval;
    std::vector<Document> documents;
    EvidenceSet evidence;
    std::optional<StageFailure> failure;
    std::string failure_detail;
};

namespace detail {

inline bool is_transport_code(ErrorCode code)
{
    return code == ErrorCode::RetrieverUnavailable || code == ErrorCode::ScorerUnavailable ||
           code == ErrorCode::ClassifierUnavailable || code == ErrorCode::ProtocolError;
}

inline void fail(ClaimOutcome& outcome, StageFailure stage, const std::string& detail)
{
    outcome.failure = stage;
    outcome.failure_detail = detail;
    outcome.verdict = Verdict::not_enough_info();
}

inline void classify_into(ClaimOutcome& outcome, const Claim& claim, const VeracityClassifier& classifier)
{
    try {
        outcome.verdict = classifier.classify(claim, outcome.evidence);
    } catch (const Error& e) {
        if (!is_transport_code(e.code())) {
            throw;
        }
        fail(outcome, StageFailure::ClassifierUnavailable, e.what());
    }
}

} // namespace detail

inline KbEvidence fetch_evidence(const Claim& claim, const KbEntry& kb, const EvidenceScorer& scorer,
                                 std::size_t evidence_n = 5)
{
    KbEvidence out;
    out.kb = kb.name;
    out.evidence.claim_id = claim.id;
    try {
        auto retrieved = retrieve_top_k(*kb.retriever, claim, kb.depth());
        out.retrieval = std::move(retrieved.result);
        out.documents = std::move(retrieved.documents);
    } catch (const Error& e) {
        if (!detail::is_transport_code(e.code())) {
            throw;
        }
        out.failure = StageFailure::RetrieverUnavailable;
        out.failure_detail = e.what();
        return out;
    }
    try {
        const std::vector<std::string> sources(out.documents.size(), kb.name);
        out.evidence = select_evidence(claim, out.documents, scorer, evidence_n, sources);
    } catch (const Error& e) {
        if (!detail::is_transport_code(e.code())) {
            throw;
        }
        out.failure = StageFailure::ScorerUnavailable;
        out.failure_detail = e.what();
        out.evidence = EvidenceSet{claim.id, {}, 0.0};
    }
    return out;
}

/// Turns one KB's evidence into an outcome; classification happens only when
/// the earlier stages succeeded.
inline ClaimOutcome outcome_from(const Claim& claim, const KbPolicy& policy, KbEvidence fetched,
                                 const VeracityClassifier& classifier)
{
    ClaimOutcome outcome;
    outcome.claim_id = claim.id;
    outcome.policy = policy.id();
    outcome.chosen_kb = fetched.kb;
    outcome.retrievals.push_back(
        {fetched.kb, fetched.retrieval,
         fetched.failure == StageFailure::RetrieverUnavailable ? fetched.failure : std::nullopt});
    outcome.evidence = std::move(fetched.evidence);
    if (fetched.failure) {
        detail::fail(outcome, *fetched.failure, fetched.failure_detail);
        return outcome;
    }
    detail::classify_into(outcome, claim, classifier);
    return outcome;
}

inline ClaimOutcome run_claim_single(const Claim& claim, const KbEntry& kb, const EvidenceScorer& scorer,
                                     const VeracityClassifier& classifier, std::size_t evidence_n = 5)
{
    return outcome_from(claim, KbPolicy::single(kb.name), fetch_evidence(claim, kb, scorer, evidence_n),
                        classifier);
}

/// Pools each KB's own top-k documents and selects evidence across the pool.
/// A KB whose retrieval fails is skipped; the claim fails only when all do.
inline ClaimOutcome run_claim_union(const Claim& claim, const std::vector<const KbEntry*>& kbs,
                                    const EvidenceScorer& scorer, const VeracityClassifier& classifier,
                                    std::size_t evidence_n = 5)
{
    KbPolicy policy{PolicyKind::Union, {}};
    for (const auto* kb : kbs) {
        policy.kbs.push_back(kb->name);
    }
    if (kbs.empty()) {
        throw Error(ErrorCode::InvalidArgument, "union needs at least one knowledge base");
    }
    if (std::unordered_set<std::string>(policy.kbs.begin(), policy.kbs.end()).size() != policy.kbs.size()) {
        throw Error(ErrorCode::InvalidArgument, "union lists a knowledge base twice");
    }
    ClaimOutcome outcome;
    outcome.claim_id = claim.id;
    outcome.policy = policy.id();
    outcome.evidence.claim_id = claim.id;

    std::vector<Document> pool;
    std::vector<std::string> sources;
    std::size_t failed = 0;
    std::string detail_msg;
    for (const auto* kb : kbs) {
        KbRetrieval record{kb->name, {}, std::nullopt};
        try {
            auto retrieved = retrieve_top_k(*kb->retriever, claim, kb->depth());
            record.result = std::move(retrieved.result);
            for (auto& doc : retrieved.documents) {
                pool.push_back(std::move(doc));
                sources.push_back(kb->name);
            }
        } catch (const Error& e) {
            if (!detail::is_transport_code(e.code())) {
                throw;
            }
            record.failure = StageFailure::RetrieverUnavailable;
            detail_msg += std::string(detail_msg.empty() ? "" : "; ") + e.what();
            ++failed;
        }
        outcome.retrievals.push_back(std::move(record));
    }
    if (failed == kbs.size()) {
        detail::fail(outcome, StageFailure::RetrieverUnavailable, detail_msg);
        return outcome;
    }
    try {
        outcome.evidence = select_evidence(claim, pool, scorer, evidence_n, sources);
    } catch (const Error& e) {
        if (!detail::is_transport_code(e.code())) {
            throw;
        }
        detail::fail(outcome, StageFailure::ScorerUnavailable, e.what());
        return outcome;
    }
    detail::classify_into(outcome, claim, classifier);
    return outcome;
}

inline ClaimOutcome run_claim_none(const Claim& claim, const VeracityClassifier& classifier)
{
    ClaimOutcome outcome;
    outcome.claim_id = claim.id;
    outcome.policy = KbPolicy::none().id();
    outcome.evidence.claim_id = claim.id;
    detail::classify_into(outcome, claim, classifier);
    return outcome;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
/// is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn)
{
    workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (auto i = next++; i < n && !stop; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) {
                            error = std::current_exception();
                        }
                        stop = true;
                    }
                }
            });
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

struct TaskSelection {
    std::string chosen;
    std::vector<double> mean_max_scores;           // per KB, registry order of the input
    std::vector<std::vector<KbEvidence>> evidence;  // [kb][claim]
};

/// Picks the KB whose evidence has the highest mean max score over the task.
/// Empty or failed claims contribute 0; ties go to the earlier KB.
inline TaskSelection select_kb_task(const ClaimTask& task, const std::vector<const KbEntry*>& kbs,
                                    const EvidenceScorer& scorer, std::size_t workers = 1,
                                    std::size_t evidence_n = 5)
{
    if (kbs.empty()) {
        throw Error(ErrorCode::InvalidArgument, "task-level selection needs knowledge bases");
    }
    TaskSelection sel;
    sel.evidence.resize(kbs.size());
    for (std::size_t k = 0; k < kbs.size(); ++k) {
        auto& per_claim = sel.evidence[k];
        per_claim.resize(task.claims.size());
        parallel_for(task.claims.size(), workers, [&](std::size_t i) {
            per_claim[i] = fetch_evidence(task.claims[i], *kbs[k], scorer, evidence_n);
        });
        double sum = 0.0;
        for (const auto& e : per_claim) {
            sum += e.evidence.max_score;
        }
        sel.mean_max_scores.push_back(task.claims.empty() ? 0.0 : sum / static_cast<double>(task.claims.size()));
    }
    const auto best = std::max_element(sel.mean_max_scores.begin(), sel.mean_max_scores.end());
    sel.chosen = kbs[static_cast<std::size_t>(best - sel.mean_max_scores.begin())]->name;
    return sel;
}

struct ClaimSelection {
    std::optional<std::string> chosen;  // empty when every KB failed
    std::vector<KbEvidence> per_kb;
};

/// Fetches evidence from every KB and keeps the set with the highest max
/// score. Failed KBs are skipped; ties go to the earlier KB.
inline ClaimSelection select_kb_claim(const Claim& claim, const std::vector<const KbEntry*>& kbs,
                                      const EvidenceScorer& scorer, std::size_t evidence_n = 5)
{
    ClaimSelection sel;
    std::optional<std::size_t> best;
    for (const auto* kb : kbs) {
        sel.per_kb.push_back(fetch_evidence(claim, *kb, scorer, evidence_n));
        const auto& cur = sel.per_kb.back();
        if (cur.failure) {
            continue;
        }
        if (!best || cur.evidence.max_score > sel.per_kb[*best].evidence.max_score) {
            best = sel.per_kb.size() - 1;
        }
    }
    if (best) {
        sel.chosen = sel.per_kb[*best].kb;
    }
    return sel;
}

/// `kbs` order breaks ties. `as_policy` overrides the recorded policy id.
inline ClaimOutcome run_claim_best(const Claim& claim, const std::vector<const KbEntry*>& kbs,
                                   const EvidenceScorer& scorer, const VeracityClassifier& classifier,
                                   std::size_t evidence_n = 5, const KbPolicy* as_policy = nullptr)
{
    KbPolicy policy{PolicyKind::BestEvidenceClaim, {}};
    for (const auto* kb : kbs) {
        policy.kbs.push_back(kb->name);
    }
    if (as_policy) {
        policy = *as_policy;
    }
    auto sel = select_kb_claim(claim, kbs, scorer, evidence_n);
    if (!sel.chosen) {
        // Every KB failed: classify without evidence, but record the failure.
        ClaimOutcome outcome;
        outcome.claim_id = claim.id;
        outcome.policy = policy.id();
        outcome.evidence.claim_id = claim.id;
        std::string msg;
        for (auto& e : sel.per_kb) {
            outcome.retrievals.push_back({e.kb, e.retrieval,
                                          e.failure == StageFailure::RetrieverUnavailable ? e.failure : std::nullopt});
            msg += std::string(msg.empty() ? "" : "; ") + e.failure_detail;
        }
        detail::fail(outcome, sel.per_kb.front().failure.value_or(StageFailure::RetrieverUnavailable), msg);
        return outcome;
    }
    auto it = std::find_if(sel.per_kb.begin(), sel.per_kb.end(), [&](const auto& e) { return e.kb == *sel.chosen; });
    return outcome_from(claim, policy, std::move(*it), classifier);
}

/// Shared collaborators for running a policy over a task.
struct Pipeline {
    const KbRegistry& registry;
    const EvidenceScorer& scorer;
    const VeracityClassifier& classifier;
    std::size_t workers = 1;
    std::size_t evidence_n = 5;
};

struct PolicyRun {
    std::vector<ClaimOutcome> outcomes;  // claim order
    std::optional<TaskSelection> task_selection;
};

inline PolicyRun run_policy(const ClaimTask& task, const KbPolicy& policy, const Pipeline& pipe)
{
    policy.validate(pipe.registry);
    std::vector<const KbEntry*> kbs;
    for (const auto& name : policy.kbs) {
        kbs.push_back(&pipe.registry.at(name));
    }
    if (policy.kind == PolicyKind::BestEvidenceTask || policy.kind == PolicyKind::BestEvidenceClaim) {
        // selection ties go to the earlier KB in registry order
        const auto& all = pipe.registry.entries();
        std::stable_sort(kbs.begin(), kbs.end(), [&](const KbEntry* a, const KbEntry* b) {
            return a - all.data() < b - all.data();
        });
    }
    PolicyRun run;
    run.outcomes.resize(task.claims.size());
    auto each = [&](auto&& fn) { parallel_for(task.claims.size(), pipe.workers, fn); };
    switch (policy.kind) {
    case PolicyKind::Single:
        each([&](std::size_t i) {
            run.outcomes[i] = run_claim_single(task.claims[i], *kbs.front(), pipe.scorer, pipe.classifier, pipe.evidence_n);
        });
        break;
    case PolicyKind::Union:
        each([&](std::size_t i) {
            run.outcomes[i] = run_claim_union(task.claims[i], kbs, pipe.scorer, pipe.classifier, pipe.evidence_n);
        });
        break;
    case PolicyKind::NoKb:
        each([&](std::size_t i) { run.outcomes[i] = run_claim_none(task.claims[i], pipe.classifier); });
        break;
    case PolicyKind::BestEvidenceTask: {
        auto sel = select_kb_task(task, kbs, pipe.scorer, pipe.workers, pipe.evidence_n);
        const auto chosen = static_cast<std::size_t>(
            std::find_if(kbs.begin(), kbs.end(), [&](const KbEntry* e) { return e->name == sel.chosen; }) -
            kbs.begin());
        each([&](std::size_t i) {
            run.outcomes[i] = outcome_from(task.claims[i], policy, sel.evidence[chosen][i], pipe.classifier);
        });
        run.task_selection = std::move(sel);
        break;
    }
    case PolicyKind::BestEvidenceClaim:
        each([&](std::size_t i) {
            run.outcomes[i] =
                run_claim_best(task.claims[i], kbs, pipe.scorer, pipe.classifier, pipe.evidence_n, &policy);
        });
        break;
    }
    return run;
}

} // namespace kbcheck
