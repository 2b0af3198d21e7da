#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "flankid/error.hpp"
#include "flankid/ingest.hpp"
#include "support.hpp"

using namespace flankid;
using testing_support::manifest_with_counts;
using testing_support::TempDir;

namespace {

std::string line(const std::string& id, const std::string& ind, const std::string& side,
                 const std::string& split = "train") {
    return R"({"image_id":")" + id + R"(","individual_id":")" + ind + R"(","side":")" + side + R"(","uri":")" + id +
           R"(.jpg","split":")" + split + "\"}\n";
}

std::set<std::string> flanks_in(const Manifest& m, Split s) {
    std::set<std::string> out;
    for (const auto& r : m.records())
        if (r.split == s) out.insert(r.flank_id);
    return out;
}

}  // namespace

TEST_CASE("manifest counts distinct flanks") {
    std::istringstream in(line("a", "L1", "left") + line("b", "L1", "left") + line("c", "L1", "right"));
    const Manifest m = parse_manifest(in);
    CHECK(m.size() == 3);
    CHECK(m.num_classes() == 2);
    CHECK(m.records()[2].flank_id == make_flank_id("L1", Side::right));
    CHECK(m.records()[0].flank_id != m.records()[2].flank_id);
}

TEST_CASE("empty manifest") {
    std::istringstream in("");
    const Manifest m = parse_manifest(in);
    CHECK(m.empty());
    CHECK(m.num_classes() == 0);
}

TEST_CASE("duplicate image ids are rejected") {
    std::istringstream in(line("a", "L1", "left") + line("a", "L2", "left"));
    CHECK_THROWS_AS(parse_manifest(in), ValidationError);
}

TEST_CASE("malformed lines report their line number") {
    std::istringstream bad_json(line("a", "L1", "left") + "{not json\n");
    try {
        parse_manifest(bad_json);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    std::istringstream bad_side(line("a", "L1", "left") + line("b", "L1", "middle"));
    try {
        parse_manifest(bad_side);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("middle") != std::string::npos);
    }
    std::istringstream missing(R"({"image_id":"a","side":"left","uri":"x","split":"train"})" "\n");
    CHECK_THROWS_AS(parse_manifest(missing), ParseError);
}

TEST_CASE("unknown side is accepted at ingest") {
    std::istringstream in(line("a", "L1", "unknown"));
    const Manifest m = parse_manifest(in);
    CHECK(m.records()[0].side == Side::unknown);
}

TEST_CASE("manifest file round trip and uri resolution") {
    TempDir dir;
    {
        std::ofstream out(dir / "m.jsonl");
        out << line("a", "L1", "left") << line("b", "L2", "right", "test");
    }
    const Manifest m = load_manifest(dir / "m.jsonl");
    CHECK(m.resolve(m.records()[0]) == dir / "a.jpg");
    write_manifest(m, dir / "copy.jsonl");
    const Manifest again = load_manifest(dir / "copy.jsonl");
    REQUIRE(again.size() == 2);
    CHECK(again.records()[1].split == Split::test);
    CHECK(again.records()[1].side == Side::right);

    LoadOptions strict;
    strict.require_readable_uris = true;
    CHECK_THROWS_AS(load_manifest(dir / "m.jsonl", strict), ValidationError);
    std::ofstream(dir / "a.jpg") << "x";
    std::ofstream(dir / "b.jpg") << "x";
    CHECK_NOTHROW(load_manifest(dir / "m.jsonl", strict));
    CHECK_THROWS_AS(load_manifest(dir / "absent.jsonl"), ParseError);
}

TEST_CASE("class index is contiguous") {
    const Manifest m = manifest_with_counts({3, 1, 2, 5});
    std::set<int> values;
    for (const auto& [flank, idx] : m.class_index()) values.insert(idx);
    CHECK(values == std::set<int>{0, 1, 2, 3});
}

TEST_CASE("split by flank") {
    SUBCASE("100 flanks at 7 percent") {
        const Manifest m = manifest_with_counts(std::vector<int>(100, 3), Split::unassigned);
        const Manifest s = split_by_flank(m, 0.07, 42);
        const auto test = flanks_in(s, Split::test), train = flanks_in(s, Split::train);
        CHECK(test.size() == 7);
        CHECK(train.size() == 93);
        for (const auto& f : test) CHECK(train.count(f) == 0);
        CHECK(flanks_in(s, Split::unassigned).empty());
    }
    SUBCASE("two flanks at one half") {
        const Manifest s = split_by_flank(manifest_with_counts({2, 2}), 0.5, 1);
        CHECK(flanks_in(s, Split::test).size() == 1);
        CHECK(flanks_in(s, Split::train).size() == 1);
    }
    SUBCASE("deterministic under seed") {
        const Manifest m = manifest_with_counts(std::vector<int>(30, 2));
        CHECK(flanks_in(split_by_flank(m, 0.3, 9), Split::test) == flanks_in(split_by_flank(m, 0.3, 9), Split::test));
        CHECK(flanks_in(split_by_flank(m, 0.3, 9), Split::test) != flanks_in(split_by_flank(m, 0.3, 10), Split::test));
    }
    SUBCASE("zero test flanks is an error") {
        CHECK_THROWS_AS(split_by_flank(manifest_with_counts({2, 2, 2}), 0.1, 0), ValidationError);
        CHECK_THROWS_AS(split_by_flank(Manifest{}, 0.5, 0), ValidationError);
    }
}

TEST_CASE("split is a partition for any seed and fraction") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> counts(5 + rng() % 40);
        for (auto& c : counts) c = 1 + static_cast<int>(rng() % 5);
        const Manifest m = manifest_with_counts(counts);
        const double frac = 0.1 + 0.8 * std::uniform_real_distribution<double>(0, 1)(rng);
        Manifest s;
        try {
            s = split_by_flank(m, frac, rng());
        } catch (const ValidationError&) {
            continue;  // fraction rounds to 0 or all flanks
        }
        const auto test = flanks_in(s, Split::test), train = flanks_in(s, Split::train);
        CHECK(test.size() + train.size() == m.num_classes());
        for (const auto& f : test) CHECK(train.count(f) == 0);
        CHECK(test.size() == static_cast<std::size_t>(std::llround(frac * m.num_classes())));
    }
}

TEST_CASE("drop singletons") {
    const Manifest m = drop_singletons(manifest_with_counts({3, 1, 2}));
    CHECK(m.num_classes() == 2);
    CHECK(m.size() == 5);
    std::set<int> values;
    for (const auto& [flank, idx] : m.class_index()) values.insert(idx);
    CHECK(values == std::set<int>{0, 1});

    const Manifest none = manifest_with_counts({2, 4});
    CHECK(drop_singletons(none).size() == none.size());

    const Manifest all = drop_singletons(manifest_with_counts({1, 1, 1}));
    CHECK(all.empty());
    CHECK(all.num_classes() == 0);

    const Manifest twice = drop_singletons(m);
    CHECK(twice.size() == m.size());
    CHECK(twice.class_index() == m.class_index());
}
