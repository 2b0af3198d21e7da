#include <doctest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>

#include <json.hpp>

#include "flankid/error.hpp"
#include "flankid/matchdb.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flankid;
using testing_support::TempDir;

namespace {

MatchGraph::Clock counter_clock() {
    auto n = std::make_shared<int>(0);
    return [n] {
        char buf[32];
        std::snprintf(buf, sizeof buf, "2026-01-01T00:00:%02dZ", (*n)++ % 60);
        return std::string(buf);
    };
}

void add_nodes(MatchGraph& g, std::initializer_list<const char*> ids) {
    for (const char* id : ids) g.add_node(id);
}

std::string read_all(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("confirm then reject the same pair") {
    MatchGraph g;
    add_nodes(g, {"a", "b", "c"});
    auto out = g.record_verdict("a", "b", Verdict::confirmed, "r1");
    CHECK(out.component_size == 2);
    CHECK(g.exclusion_set("a") == std::set<std::string>{"b"});
    out = g.record_verdict("b", "a", Verdict::rejected, "r2");
    CHECK(out.component_size == 1);
    CHECK(g.current_verdict("a", "b") == Verdict::rejected);
    CHECK(g.component_size("a") == 1);
    CHECK(g.component_size("b") == 1);
    // A current rejection still excludes.
    CHECK(g.exclusion_set("a") == std::set<std::string>{"b"});
    CHECK(g.history_size() == 2);
    const auto h = g.history();
    CHECK(h[0].verdict == Verdict::confirmed);
    CHECK(h[0].reviewer == "r1");
    CHECK(h[1].verdict == Verdict::rejected);
}

TEST_CASE("transitive confirmation") {
    MatchGraph g;
    add_nodes(g, {"a", "b", "c", "d"});
    g.record_verdict("a", "b", Verdict::confirmed, "r");
    g.record_verdict("b", "c", Verdict::confirmed, "r");
    CHECK(g.exclusion_set("a") == std::set<std::string>{"b", "c"});
    CHECK(g.component_size("c") == 3);
    CHECK(g.components() == std::vector<std::vector<std::string>>{{"a", "b", "c"}, {"d"}});
    // Breaking the middle edge splits the chain.
    g.record_verdict("c", "b", Verdict::rejected, "r");
    CHECK(g.component_size("a") == 2);
    CHECK(g.exclusion_set("c") == std::set<std::string>{"b"});
}

TEST_CASE("merge of two multi-member components is flagged") {
    MatchGraph g;
    add_nodes(g, {"a", "b", "c", "d", "e"});
    CHECK_FALSE(g.record_verdict("a", "b", Verdict::confirmed, "r").merged_components);
    CHECK_FALSE(g.record_verdict("c", "d", Verdict::confirmed, "r").merged_components);
    CHECK_FALSE(g.record_verdict("d", "e", Verdict::confirmed, "r").merged_components);
    const auto out = g.record_verdict("b", "c", Verdict::confirmed, "r");
    CHECK(out.merged_components);
    CHECK(out.component_size == 5);
    CHECK_FALSE(g.record_verdict("a", "e", Verdict::confirmed, "r").merged_components);
}

TEST_CASE("verdict errors") {
    MatchGraph g;
    add_nodes(g, {"a", "b"});
    CHECK_THROWS_AS(g.record_verdict("a", "a", Verdict::confirmed, "r"), ConflictError);
    CHECK_THROWS_AS(g.record_verdict("a", "zz", Verdict::confirmed, "r"), NotFoundError);
    CHECK_THROWS_AS(g.component_size("zz"), NotFoundError);
    CHECK_THROWS_AS(g.add_node(""), ValidationError);
    CHECK(g.history_size() == 0);
    CHECK(g.exclusion_set("unknown").empty());
    CHECK(parse_verdict("confirmed") == Verdict::confirmed);
    CHECK(parse_verdict("rejected") == Verdict::rejected);
    CHECK_FALSE(parse_verdict("maybe"));
}

TEST_CASE("candidate filtering") {
    MatchGraph g;
    add_nodes(g, {"q", "a", "b", "c", "d", "e"});
    g.record_verdict("q", "a", Verdict::confirmed, "r");
    g.record_verdict("q", "c", Verdict::rejected, "r");
    CandidateQuery query{"q", {{"a", 0.9}, {"b", 0.5}, {"c", 0.8}, {"d", 0.5}, {"e", 0.1}, {"q", 1.0}}, 2};
    const auto out = filter_candidates(query, g);
    CHECK(out == std::vector<ScoredCandidate>{{"b", 0.5}, {"d", 0.5}});
    query.top_k = 10;
    CHECK(filter_candidates(query, g).size() == 3);
}

TEST_CASE("random verdict sequences match a brute-force graph") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 12);
        std::vector<std::string> ids;
        MatchGraph g;
        for (int i = 0; i < n; ++i) {
            ids.push_back("n" + std::to_string(i));
            g.add_node(ids.back());
        }
        std::map<std::pair<std::string, std::string>, Verdict> latest;
        const int steps = 1 + static_cast<int>(rng() % 40);
        for (int s = 0; s < steps; ++s) {
            const auto& a = ids[rng() % n];
            const auto& b = ids[rng() % n];
            if (a == b) continue;
            const Verdict v = rng() % 3 ? Verdict::confirmed : Verdict::rejected;
            g.record_verdict(a, b, v, "r");
            latest[std::minmax(a, b)] = v;
        }
        std::set<std::pair<std::string, std::string>> confirmed;
        for (const auto& [k, v] : latest)
            if (v == Verdict::confirmed) confirmed.insert(k);
        const auto comp = oracle::components(ids, confirmed);
        for (const auto& id : ids) {
            CHECK(g.component_size(id) == comp.at(id).size());
            std::set<std::string> expected = comp.at(id);
            expected.erase(id);
            for (const auto& [k, v] : latest)
                if (v == Verdict::rejected && (k.first == id || k.second == id))
                    expected.insert(k.first == id ? k.second : k.first);
            CHECK(g.exclusion_set(id) == expected);
        }
    }
}

TEST_CASE("persistence") {
    TempDir dir;
    std::string before;
    {
        MatchGraph g(dir.path(), counter_clock());
        add_nodes(g, {"a", "b", "c", "lonely"});
        g.record_verdict("a", "b", Verdict::confirmed, "r1");
        g.record_verdict("b", "c", Verdict::rejected, "r2");
        g.record_verdict("a", "b", Verdict::rejected, "r3");
        g.record_verdict("a", "c", Verdict::confirmed, "r1");
        before = g.current_state_json();
    }
    {
        MatchGraph g(dir.path());
        CHECK(g.current_state_json() == before);
        CHECK(g.history_size() == 4);
        CHECK(g.has_node("lonely"));
        CHECK(g.component_size("c") == 2);
        g.compact();
    }
    SUBCASE("reload from snapshot and a longer log") {
        {
            MatchGraph g(dir.path(), counter_clock());
            g.record_verdict("b", "lonely", Verdict::confirmed, "r4");
            before = g.current_state_json();
        }
        MatchGraph g(dir.path());
        CHECK(g.current_state_json() == before);
        CHECK(g.history_size() == 5);
        CHECK(g.component_size("lonely") == 2);
    }
    SUBCASE("torn final line is dropped") {
        const auto log = dir / "events.jsonl";
        const auto intact = read_all(log);
        std::ofstream(log, std::ios::app) << R"({"ts":"2026-01-01T00:01:00Z","a":"a","b)";
        MatchGraph g(dir.path());
        CHECK(g.current_state_json() == before);
        CHECK(read_all(log) == intact);
    }
    SUBCASE("corruption mid-log is an error") {
        const auto log = dir / "events.jsonl";
        std::string text = read_all(log);
        text.insert(text.find('\n') + 1, "not json\n");
        std::ofstream(log, std::ios::binary | std::ios::trunc) << text;
        try {
            MatchGraph g(dir.path());
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
}

TEST_CASE("log replay is byte-identical across 1000 random sequences") {
    std::mt19937_64 rng(1234);
    TempDir root;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto dir = root / ("g" + std::to_string(trial));
        std::string state;
        {
            MatchGraph g(dir, counter_clock());
            const int n = 2 + static_cast<int>(rng() % 6);
            for (int i = 0; i < n; ++i) g.add_node("n" + std::to_string(i));
            const int steps = static_cast<int>(rng() % 12);
            for (int s = 0; s < steps; ++s) {
                const int a = static_cast<int>(rng() % n), b = static_cast<int>(rng() % n);
                if (a == b) continue;
                g.record_verdict("n" + std::to_string(a), "n" + std::to_string(b),
                                 rng() % 2 ? Verdict::confirmed : Verdict::rejected, "r");
            }
            if (rng() % 4 == 0) g.compact();
            state = g.current_state_json();
        }
        MatchGraph reopened(dir);
        CHECK(reopened.current_state_json() == state);
    }
}

TEST_CASE("history keeps every verdict in order") {
    TempDir dir;
    MatchGraph g(dir.path(), counter_clock());
    add_nodes(g, {"a", "b"});
    for (int i = 0; i < 5; ++i) g.record_verdict("a", "b", i % 2 ? Verdict::rejected : Verdict::confirmed, "r");
    const auto h = g.history();
    REQUIRE(h.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(h[i].verdict == (i % 2 ? Verdict::rejected : Verdict::confirmed));
    CHECK(h[4].ts == "2026-01-01T00:00:04Z");
    std::ifstream in(dir / "events.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("ts"));
        CHECK(j.contains("reviewer"));
        ++lines;
    }
    CHECK(lines == 5);
    CHECK(iso8601_now().size() == 24);
}
