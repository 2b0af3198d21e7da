#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "flankid/union_find.hpp"

namespace flankid {

enum class Verdict { confirmed, rejected };

std::string_view to_string(Verdict verdict);
std::optional<Verdict> parse_verdict(std::string_view text);

struct VerdictEvent {
    std::string ts;  // ISO-8601 UTC
    std::string a;
    std::string b;
    Verdict verdict = Verdict::confirmed;
    std::string reviewer;
};

struct RecordOutcome {
    std::size_t component_size = 1;  // size of a's confirmed component afterwards
    // A confirmation joined two components that each already had several members.
    bool merged_components = false;
};

struct ScoredCandidate {
    std::string image_id;
    double score = 0.0;
    bool operator==(const ScoredCandidate&) const = default;
};

struct CandidateQuery {
    std::string anchor;
    std::vector<ScoredCandidate> pool;
    int top_k = 5;
};

// Human verdicts on image pairs. Confirmed edges define identity components;
// the latest verdict per unordered pair is current and every verdict stays in
// the history. Safe for one writer and many readers.
//
// On disk (directory):
//   events.jsonl   append-only verdict log, one JSON object per line
//   nodes.jsonl    append-only node registrations
//   snapshot.json  compacted current state, replaced by rename
class MatchGraph {
public:
    using Clock = std::function<std::string()>;

    // In-memory graph.
    MatchGraph();
    // Opens (or creates) a persistent graph in `dir`.
    explicit MatchGraph(std::filesystem::path dir, Clock clock = {});
    MatchGraph(const MatchGraph&) = delete;
    MatchGraph& operator=(const MatchGraph&) = delete;

    void add_node(const std::string& image_id);
    bool has_node(const std::string& image_id) const;
    std::vector<std::string> nodes() const;

    // Replaces the current verdict for {a, b} and appends it to the history;
    // persisted before returning. Throws ConflictError on a == b and
    // NotFoundError on an unregistered id.
    RecordOutcome record_verdict(const std::string& a, const std::string& b, Verdict verdict,
                                 const std::string& reviewer);

    std::optional<Verdict> current_verdict(const std::string& a, const std::string& b) const;
    // Confirmed component of the anchor (minus the anchor) plus every image
    // holding a current rejection against it.
    std::set<std::string> exclusion_set(const std::string& anchor) const;
    std::size_t component_size(const std::string& image_id) const;
    // Confirmed-edge components over all nodes, members sorted, ordered by first member.
    std::vector<std::vector<std::string>> components() const;

    std::vector<VerdictEvent> history() const;
    std::size_t history_size() const;

    // Canonical JSON of nodes and current verdicts.
    std::string current_state_json() const;
    // Writes snapshot.json atomically (no-op for in-memory graphs).
    void compact();

private:
    using Pair = std::pair<std::string, std::string>;

    std::filesystem::path dir_;
    Clock clock_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::size_t> node_index_;
    std::vector<std::string> node_ids_;
    std::map<Pair, VerdictEvent> current_;
    std::vector<VerdictEvent> history_;
    mutable UnionFind components_;
    mutable bool components_dirty_ = false;

    bool persistent() const { return !dir_.empty(); }
    void load();
    void apply(const VerdictEvent& event, bool* merged);
    void add_node_unlocked(const std::string& image_id, bool persist);
    void rebuild_components() const;
    std::string state_json_unlocked() const;
    std::set<std::string> exclusion_unlocked(const std::string& anchor) const;
};

// Pool minus the anchor and its exclusion set, best score first (ties by
// image id), truncated to top_k.
std::vector<ScoredCandidate> filter_candidates(const CandidateQuery& query, const MatchGraph& graph);

std::string iso8601_now();

}  // namespace flankid
