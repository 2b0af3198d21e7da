#include <doctest.h>

#include <map>
#include <set>

#include "flankid/error.hpp"
#include "flankid/sampler.hpp"
#include "support.hpp"

using namespace flankid;
using testing_support::manifest_with_counts;

namespace {

std::map<std::string, int> multiplicity(const Batch& batch) {
    std::map<std::string, int> m;
    for (const auto& item : batch) ++m[item.flank_id];
    return m;
}

SamplerConfig config(int batch, int n, bool singletons = false, std::uint64_t seed = 0) {
    SamplerConfig cfg;
    cfg.batch_size = batch;
    cfg.exemplars_per_id = n;
    cfg.include_singletons = singletons;
    cfg.seed = seed;
    return cfg;
}

bool same_plan(const std::vector<Batch>& a, const std::vector<Batch>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return false;
        for (std::size_t j = 0; j < a[i].size(); ++j)
            if (a[i][j].image_id != b[i][j].image_id) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("batch holds batch_size / N flanks") {
    const Manifest m = manifest_with_counts({5, 6, 4, 7});
    std::mt19937_64 rng(1);
    const Batch b = next_batch(m, config(8, 4), rng);
    CHECK(b.size() == 8);
    const auto mult = multiplicity(b);
    CHECK(mult.size() == 2);
    for (const auto& [flank, n] : mult) CHECK(n == 4);
    for (const auto& item : b) CHECK(item.label == m.class_of(item.flank_id));
}

TEST_CASE("small flanks are topped up with duplicates") {
    const Manifest m = manifest_with_counts({2, 2});
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
        const Batch b = next_batch(m, config(8, 4), rng);
        std::map<std::string, std::set<std::string>> distinct;
        for (const auto& item : b) distinct[item.flank_id].insert(item.image_id);
        for (const auto& [flank, ids] : distinct) CHECK(ids.size() == 2);
        for (const auto& [flank, n] : multiplicity(b)) CHECK(n == 4);
    }
}

TEST_CASE("large flanks are drawn without replacement") {
    const Manifest m = manifest_with_counts({9, 9, 9});
    std::mt19937_64 rng(3);
    for (int i = 0; i < 20; ++i) {
        const Batch b = next_batch(m, config(12, 4), rng);
        std::set<std::string> ids;
        for (const auto& item : b) ids.insert(item.image_id);
        CHECK(ids.size() == 12);
    }
}

TEST_CASE("singleton handling") {
    const Manifest m = manifest_with_counts({1, 1, 3, 4, 1});
    std::mt19937_64 rng(4);
    for (int i = 0; i < 20; ++i) {
        const Batch b = next_batch(m, config(8, 4), rng);
        const auto counts = m.flank_counts();
        for (const auto& item : b) CHECK(counts.at(item.flank_id) > 1);
    }
    CHECK(eligible_flanks(m, config(8, 4, true)).size() == 5);
    bool saw_singleton = false;
    for (int i = 0; i < 50; ++i) {
        const Batch b = next_batch(m, config(8, 4, true), rng);
        for (const auto& [flank, n] : multiplicity(b)) {
            if (m.flank_counts().at(flank) == 1) {
                CHECK(n == 1);
                saw_singleton = true;
            } else {
                CHECK(n == 4);
            }
        }
    }
    CHECK(saw_singleton);
}

TEST_CASE("too few flanks names the shortfall") {
    const Manifest m = manifest_with_counts({3, 3, 1});
    std::mt19937_64 rng(5);
    try {
        next_batch(m, config(12, 4), rng);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("short by 1") != std::string::npos);
    }
    CHECK_THROWS_AS(epoch_plan(m, config(12, 4), rng), ValidationError);
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS(config(10, 4).validate(), ConfigError);
    CHECK_THROWS_AS(config(8, 1).validate(), ConfigError);
    CHECK_THROWS_AS(config(0, 4).validate(), ConfigError);
    CHECK_NOTHROW(config(64, 4).validate());
}

TEST_CASE("epoch plan") {
    SUBCASE("10 flanks, 2 per batch") {
        const Manifest m = manifest_with_counts(std::vector<int>(10, 4));
        std::mt19937_64 rng(6);
        const auto plan = epoch_plan(m, config(8, 4), rng);
        CHECK(plan.size() == 5);
        std::set<std::string> seen;
        for (const auto& b : plan)
            for (const auto& item : b) seen.insert(item.flank_id);
        CHECK(seen.size() == 10);
    }
    SUBCASE("3 flanks, 2 per batch") {
        const Manifest m = manifest_with_counts({4, 4, 4});
        std::mt19937_64 rng(7);
        const auto plan = epoch_plan(m, config(8, 4), rng);
        REQUIRE(plan.size() == 2);
        std::map<std::string, int> batches_per_flank;
        for (const auto& b : plan)
            for (const auto& [flank, n] : multiplicity(b)) {
                CHECK(n == 4);
                ++batches_per_flank[flank];
            }
        CHECK(batches_per_flank.size() == 3);
        int repeated = 0;
        for (const auto& [flank, n] : batches_per_flank) repeated += n == 2;
        CHECK(repeated == 1);
    }
    SUBCASE("same seed, same plan") {
        const Manifest m = manifest_with_counts({3, 5, 2, 6, 4, 4, 2});
        std::mt19937_64 a(8), b(8), c(9);
        const auto pa = epoch_plan(m, config(8, 4), a);
        CHECK(same_plan(pa, epoch_plan(m, config(8, 4), b)));
        CHECK_FALSE(same_plan(pa, epoch_plan(m, config(8, 4), c)));
    }
}

TEST_CASE("batches of 64 with N = 4 over random manifests") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> counts(16 + rng() % 40);
        for (auto& c : counts) c = 1 + static_cast<int>(rng() % 9);
        const Manifest m = manifest_with_counts(counts);
        const auto eligible = eligible_flanks(m, config(64, 4));
        if (eligible.size() < 16) continue;
        const auto plan = epoch_plan(m, config(64, 4), rng);
        CHECK(plan.size() == (eligible.size() + 15) / 16);
        std::set<std::string> seen;
        for (const auto& b : plan) {
            const auto mult = multiplicity(b);
            CHECK(mult.size() == 16);
            for (const auto& [flank, n] : mult) {
                CHECK(n == 4);
                seen.insert(flank);
            }
        }
        CHECK(seen == std::set<std::string>(eligible.begin(), eligible.end()));
    }
}
