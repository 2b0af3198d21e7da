#include "flankid/matchdb.hpp"

#include "flankid/error.hpp"
#include "flankid/tensor_io.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

namespace flankid {

using nlohmann::json;

std::string_view to_string(Verdict verdict) {
    return verdict == Verdict::confirmed ? "confirmed" : "rejected";
}

std::optional<Verdict> parse_verdict(std::string_view text) {
    if (text == "confirmed") return Verdict::confirmed;
    if (text == "rejected") return Verdict::rejected;
    return std::nullopt;
}

std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[40];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

namespace {

json event_json(const VerdictEvent& e) {
    return json{{"ts", e.ts}, {"a", e.a}, {"b", e.b}, {"verdict", to_string(e.verdict)}, {"reviewer", e.reviewer}};
}

VerdictEvent event_from_json(const json& j) {
    VerdictEvent e;
    e.ts = j.at("ts").get<std::string>();
    e.a = j.at("a").get<std::string>();
    e.b = j.at("b").get<std::string>();
    const auto v = parse_verdict(j.at("verdict").get<std::string>());
    if (!v) throw ParseError("unknown verdict '" + j.at("verdict").get<std::string>() + "'");
    e.verdict = *v;
    e.reviewer = j.at("reviewer").get<std::string>();
    return e;
}

// Appends one line and fsyncs before returning.
void durable_append(const std::filesystem::path& path, const std::string& line) {
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("cannot open " + path.string() + " for append");
    std::string data = line + "\n";
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            ::close(fd);
            throw Error("write failed on " + path.string());
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0) {
        ::close(fd);
        throw Error("fsync failed on " + path.string());
    }
    ::close(fd);
}

// Parsed JSON lines of an append-only log. A torn final line (no trailing
// newline, unparsable) is the remains of an interrupted append and is cut off.
std::vector<json> read_log(const std::filesystem::path& path) {
    std::vector<json> out;
    if (!std::filesystem::exists(path)) return out;
    std::string text = read_file(path);
    const bool complete = text.empty() || text.back() == '\n';
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        const std::size_t end = text.find('\n', pos);
        const bool last = end == std::string::npos;
        const std::string line = text.substr(pos, last ? std::string::npos : end - pos);
        ++line_no;
        if (line.find_first_not_of(" \t\r") != std::string::npos) {
            try {
                out.push_back(json::parse(line));
            } catch (const json::parse_error&) {
                if (last && !complete) {
                    std::filesystem::resize_file(path, pos);
                    break;
                }
                throw ParseError("malformed entry in " + path.string(), line_no);
            }
        }
        if (last) break;
        pos = end + 1;
    }
    return out;
}

}  // namespace

MatchGraph::MatchGraph() : clock_(iso8601_now) {}

MatchGraph::MatchGraph(std::filesystem::path dir, Clock clock)
    : dir_(std::move(dir)), clock_(clock ? std::move(clock) : Clock(iso8601_now)) {
    if (dir_.empty()) throw ConfigError("match graph directory must not be empty");
    std::filesystem::create_directories(dir_);
    load();
}

void MatchGraph::load() {
    std::size_t events_covered = 0;
    const auto snapshot = dir_ / "snapshot.json";
    if (std::filesystem::exists(snapshot)) {
        json s;
        try {
            s = json::parse(read_file(snapshot));
        } catch (const json::parse_error& e) {
            throw ParseError("corrupt snapshot " + snapshot.string() + ": " + e.what());
        }
        for (const auto& id : s.at("nodes")) add_node_unlocked(id.get<std::string>(), false);
        for (const auto& v : s.at("verdicts")) apply(event_from_json(v), nullptr);
        events_covered = s.at("events").get<std::size_t>();
    }
    for (const auto& n : read_log(dir_ / "nodes.jsonl")) add_node_unlocked(n.at("node").get<std::string>(), false);

    const auto events = read_log(dir_ / "events.jsonl");
    if (events.size() < events_covered)
        throw ParseError("event log is shorter than its snapshot in " + dir_.string());
    history_.reserve(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        VerdictEvent e;
        try {
            e = event_from_json(events[i]);
        } catch (const json::exception& ex) {
            throw ParseError(std::string("bad event: ") + ex.what(), i + 1);
        }
        if (i >= events_covered) {
            add_node_unlocked(e.a, false);
            add_node_unlocked(e.b, false);
            apply(e, nullptr);
        }
        history_.push_back(std::move(e));
    }
}

void MatchGraph::add_node_unlocked(const std::string& image_id, bool persist) {
    if (image_id.empty()) throw ValidationError("image id must not be empty");
    if (node_index_.count(image_id)) return;
    if (persist && persistent()) durable_append(dir_ / "nodes.jsonl", json{{"node", image_id}}.dump());
    node_index_.emplace(image_id, node_ids_.size());
    node_ids_.push_back(image_id);
    if (!components_dirty_) components_.add();
}

void MatchGraph::add_node(const std::string& image_id) {
    std::unique_lock lock(mutex_);
    add_node_unlocked(image_id, true);
}

bool MatchGraph::has_node(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    return node_index_.count(image_id) != 0;
}

std::vector<std::string> MatchGraph::nodes() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, _] : node_index_) out.push_back(id);
    return out;
}

void MatchGraph::apply(const VerdictEvent& event, bool* merged) {
    Pair key = std::minmax(event.a, event.b);
    auto it = current_.find(key);
    const bool was_confirmed = it != current_.end() && it->second.verdict == Verdict::confirmed;
    current_[key] = event;
    if (event.verdict == Verdict::confirmed) {
        if (!components_dirty_) {
            const auto ia = node_index_.at(event.a), ib = node_index_.at(event.b);
            const bool both_multi = components_.set_size(ia) > 1 && components_.set_size(ib) > 1;
            if (components_.unite(ia, ib) && merged) *merged = both_multi;
        }
    } else if (was_confirmed) {
        // Removing an edge can split a component; rebuild lazily.
        components_dirty_ = true;
    }
}

void MatchGraph::rebuild_components() const {
    components_.reset(node_ids_.size());
    for (const auto& [key, e] : current_)
        if (e.verdict == Verdict::confirmed) components_.unite(node_index_.at(key.first), node_index_.at(key.second));
    components_dirty_ = false;
}

RecordOutcome MatchGraph::record_verdict(const std::string& a, const std::string& b, Verdict verdict,
                                         const std::string& reviewer) {
    if (a == b) throw ConflictError("cannot record a verdict between '" + a + "' and itself");
    std::unique_lock lock(mutex_);
    for (const auto* id : {&a, &b})
        if (!node_index_.count(*id)) throw NotFoundError("unknown image '" + *id + "'");
    if (components_dirty_) rebuild_components();

    VerdictEvent event{clock_(), a, b, verdict, reviewer};
    if (persistent()) durable_append(dir_ / "events.jsonl", event_json(event).dump());
    RecordOutcome outcome;
    apply(event, &outcome.merged_components);
    history_.push_back(std::move(event));
    if (components_dirty_) rebuild_components();
    outcome.component_size = components_.set_size(node_index_.at(a));
    return outcome;
}

std::optional<Verdict> MatchGraph::current_verdict(const std::string& a, const std::string& b) const {
    std::shared_lock lock(mutex_);
    auto it = current_.find(std::minmax(a, b));
    if (it == current_.end()) return std::nullopt;
    return it->second.verdict;
}

// Union-find state is rebuilt or path-compressed under the shared lock, so
// readers touching it take the exclusive lock instead.
std::set<std::string> MatchGraph::exclusion_unlocked(const std::string& anchor) const {
    std::set<std::string> out;
    auto it = node_index_.find(anchor);
    if (it == node_index_.end()) return out;
    if (components_dirty_) rebuild_components();
    const auto root = components_.find(it->second);
    if (components_.set_size(root) > 1)
        for (std::size_t i = 0; i < node_ids_.size(); ++i)
            if (i != it->second && components_.find(i) == root) out.insert(node_ids_[i]);
    for (const auto& [key, e] : current_) {
        if (e.verdict != Verdict::rejected) continue;
        if (key.first == anchor) out.insert(key.second);
        if (key.second == anchor) out.insert(key.first);
    }
    return out;
}

std::set<std::string> MatchGraph::exclusion_set(const std::string& anchor) const {
    std::unique_lock lock(mutex_);
    return exclusion_unlocked(anchor);
}

std::size_t MatchGraph::component_size(const std::string& image_id) const {
    std::unique_lock lock(mutex_);
    auto it = node_index_.find(image_id);
    if (it == node_index_.end()) throw NotFoundError("unknown image '" + image_id + "'");
    if (components_dirty_) rebuild_components();
    return components_.set_size(it->second);
}

std::vector<std::vector<std::string>> MatchGraph::components() const {
    std::unique_lock lock(mutex_);
    if (components_dirty_) rebuild_components();
    std::map<std::size_t, std::vector<std::string>> groups;
    for (std::size_t i = 0; i < node_ids_.size(); ++i) groups[components_.find(i)].push_back(node_ids_[i]);
    std::vector<std::vector<std::string>> out;
    for (auto& [_, members] : groups) {
        std::sort(members.begin(), members.end());
        out.push_back(std::move(members));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<VerdictEvent> MatchGraph::history() const {
    std::shared_lock lock(mutex_);
    return history_;
}

std::size_t MatchGraph::history_size() const {
    std::shared_lock lock(mutex_);
    return history_.size();
}

std::string MatchGraph::state_json_unlocked() const {
    json nodes = json::array();
    for (const auto& [id, _] : node_index_) nodes.push_back(id);
    json verdicts = json::array();
    for (const auto& [key, e] : current_) verdicts.push_back(event_json(e));
    return json{{"events", history_.size()}, {"nodes", nodes}, {"verdicts", verdicts}}.dump(1);
}

std::string MatchGraph::current_state_json() const {
    std::shared_lock lock(mutex_);
    return state_json_unlocked();
}

void MatchGraph::compact() {
    std::unique_lock lock(mutex_);
    if (!persistent()) return;
    atomic_write(dir_ / "snapshot.json", state_json_unlocked() + "\n");
}

std::vector<ScoredCandidate> filter_candidates(const CandidateQuery& query, const MatchGraph& graph) {
    const auto excluded = graph.exclusion_set(query.anchor);
    std::vector<ScoredCandidate> out;
    for (const auto& c : query.pool)
        if (c.image_id != query.anchor && !excluded.count(c.image_id)) out.push_back(c);
    std::sort(out.begin(), out.end(), [](const ScoredCandidate& x, const ScoredCandidate& y) {
        if (x.score != y.score) return x.score > y.score;
        return x.image_id < y.image_id;
    });
    if (query.top_k >= 0 && out.size() > static_cast<std::size_t>(query.top_k)) out.resize(query.top_k);
    return out;
}

}  // namespace flankid
