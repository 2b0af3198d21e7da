#include <doctest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "flankid/embedding_set.hpp"
#include "flankid/error.hpp"
#include "flankid/evaluate.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flankid;
using testing_support::TempDir;

namespace {

SimilarityMatrix from_scores(const std::vector<std::vector<double>>& s, const std::vector<std::string>& labels) {
    SimilarityMatrix sim;
    const auto n = static_cast<Eigen::Index>(s.size());
    sim.scores.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) sim.scores(i, j) = s[i][j];
    sim.labels = labels;
    for (Eigen::Index i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "img%04ld", static_cast<long>(i));
        sim.image_ids.push_back(id);
    }
    return sim;
}

EmbeddingSet set_of(const std::vector<std::vector<double>>& rows) {
    EmbeddingSet e;
    e.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        e.image_ids.push_back("v" + std::to_string(i));
        for (std::size_t d = 0; d < rows[i].size(); ++d)
            e.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = rows[i][d];
    }
    return e;
}

// Six images of one flank paired off at score 0.5, every member with three
// stronger singleton distractors and one weaker one: each query's only match
// within the top five sits at rank 4.
SimilarityMatrix rank_four_fixture() {
    const int members = 6, per = 4, n = members + members * per;
    std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
    std::vector<std::string> labels(n);
    for (int i = 0; i < members; ++i) labels[i] = "A";
    for (int i = members; i < n; ++i) labels[i] = "single" + std::to_string(i);
    for (int i = 0; i < members; ++i)
        for (int j = 0; j < members; ++j)
            if (i != j) s[i][j] = (i / 2 == j / 2) ? 0.5 : -1.0;
    for (int i = 0; i < members; ++i)
        for (int d = 0; d < per; ++d) {
            const int j = members + i * per + d;
            s[i][j] = s[j][i] = d < 3 ? 0.9 : 0.2;
        }
    return from_scores(s, labels);
}

}  // namespace

TEST_CASE("similarity matrix") {
    const auto same = set_of({{0.6, 0.8}, {0.6, 0.8}});
    CHECK(similarity_matrix(same, {"a", "b"}, SimilarityMetric::cosine_similarity).scores(0, 1) ==
          doctest::Approx(1.0));
    const auto orth = set_of({{1.0, 0.0}, {0.0, 1.0}});
    CHECK(similarity_matrix(orth, {"a", "b"}, SimilarityMetric::cosine_similarity).scores(0, 1) == 0.0);
    const auto tri = set_of({{0.0, 0.0}, {3.0, 4.0}});
    const auto sim = similarity_matrix(tri, {"a", "b"}, SimilarityMetric::negative_euclidean);
    CHECK(sim.scores(0, 1) == -5.0);
    CHECK(sim.scores(1, 0) == -5.0);
    CHECK_THROWS_AS(similarity_matrix(tri, {"a"}, SimilarityMetric::cosine_similarity), ShapeError);
    CHECK_THROWS_AS(similarity_matrix(set_of({{1.0}}), {"a"}, SimilarityMetric::cosine_similarity), ValidationError);
}

TEST_CASE("worked example: single match at rank 4") {
    const SimilarityMatrix sim = rank_four_fixture();
    for (std::size_t q = 0; q < 6; ++q) {
        const auto order = ranked_candidates(sim, q);
        int first = 0;
        for (std::size_t r = 0; r < order.size() && !first; ++r)
            if (sim.labels[order[r]] == "A") first = static_cast<int>(r) + 1;
        CHECK(first == 4);
    }
    // (1/5)(0 + 0 + 0 + 1/4 + 1/5)
    CHECK(std::abs(dtkap(sim, 5) - 0.09) < 1e-15);
    CHECK(tkrmd(sim, 5) == 1.0);
    CHECK(tkrmd(sim, 3) == 0.0);
    CHECK(tkrmd(sim, 4) == 1.0);
}

TEST_CASE("matches at ranks 1 and 3 with four members") {
    // Query 0 of class A (4 members); candidates ranked: A, x, A, y, A.
    std::vector<std::string> labels{"A", "A", "x1", "A", "y1", "A"};
    std::vector<std::vector<double>> s(6, std::vector<double>(6, -1.0));
    const double row[] = {0, 0.9, 0.8, 0.7, 0.6, 0.5};
    for (int j = 1; j < 6; ++j) s[0][j] = s[j][0] = row[j];
    const SimilarityMatrix sim = from_scores(s, labels);
    const auto order = ranked_candidates(sim, 0);
    CHECK(order == std::vector<std::size_t>{1, 2, 3, 4, 5});
    // k_i = min(4 - 1, 5) = 3. Queries 0 and 1 see A, x, A: (1/3)(1 + 1/2 + 2/3) = 13/18.
    // Queries 3 and 5 see A, A, x: (1/3)(1 + 1 + 2/3) = 8/9. Mean = 29/36.
    CHECK(std::abs(dtkap(sim, 5) - 29.0 / 36.0) < 1e-15);
    CHECK(dtkap(sim, 5) == oracle::dtkap(s, labels, sim.image_ids, 5));
    CHECK(tkrmd(sim, 1) == 1.0);
}

TEST_CASE("perfect rankings") {
    const auto e = set_of({{1, 0, 0}, {0.99, 0.1, 0}, {0, 1, 0}, {0.1, 0.99, 0}, {0, 0, 1}, {0, 0.1, 0.99}});
    const std::vector<std::string> labels{"a", "a", "b", "b", "c", "c"};
    const auto sim = similarity_matrix(e, labels, SimilarityMetric::cosine_similarity);
    CHECK(tkrmd(sim, 1) == 1.0);
    CHECK(dtkap(sim, 5) == 1.0);
}

TEST_CASE("no eligible queries") {
    const auto e = set_of({{1, 0}, {0, 1}});
    const auto sim = similarity_matrix(e, {"a", "b"}, SimilarityMetric::cosine_similarity);
    CHECK_THROWS_AS(tkrmd(sim, 1), ValidationError);
    CHECK_THROWS_AS(dtkap(sim, 5), ValidationError);
    CHECK_THROWS_AS(tkrmd(sim, 0), ValidationError);
}

TEST_CASE("ties break by image id") {
    std::vector<std::vector<double>> s(4, std::vector<double>(4, 0.5));
    auto sim = from_scores(s, {"a", "b", "a", "b"});
    sim.image_ids = {"q", "zz", "bb", "aa"};
    CHECK(ranked_candidates(sim, 0) == std::vector<std::size_t>{3, 2, 1});
}

TEST_CASE("metrics agree with the brute-force oracle") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 49);
        const int classes = 1 + static_cast<int>(rng() % std::max(1, n / 2));
        std::vector<std::string> labels(n);
        for (auto& l : labels) l = "c" + std::to_string(rng() % classes);
        if (oracle::class_size(labels, labels[0]) < 2) labels[1] = labels[0];
        // Coarse scores so ties occur and the id tie-break is exercised.
        std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) s[i][j] = s[j][i] = std::round(u(rng) * 8.0) / 8.0;
        auto sim = from_scores(s, labels);
        std::shuffle(sim.image_ids.begin(), sim.image_ids.end(), rng);
        for (int k : {1, 3, 5, 10}) {
            CHECK(tkrmd(sim, k) == oracle::tkrmd(s, labels, sim.image_ids, k));
            CHECK(dtkap(sim, k) == oracle::dtkap(s, labels, sim.image_ids, k));
        }
    }
}

TEST_CASE("ccdr") {
    SUBCASE("orthogonal identical pairs") {
        const auto e = set_of({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
        CHECK(ccdr(e, {"a", "a", "b", "b"}) == 0.0);
    }
    SUBCASE("collapse is degenerate") {
        const auto e = set_of({{1, 1}, {1, 1}, {1, 1}});
        CHECK_THROWS_AS(ccdr(e, {"a", "a", "b"}), ValidationError);
    }
    SUBCASE("three classes of three random vectors") {
        std::mt19937_64 rng(6);
        std::normal_distribution<double> g;
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<std::vector<double>> rows(9, std::vector<double>(5));
            for (auto& r : rows)
                for (auto& v : r) v = g(rng);
            const std::vector<std::string> labels{"a", "a", "a", "b", "b", "b", "c", "c", "c"};
            CHECK(ccdr(set_of(rows), labels) == doctest::Approx(oracle::ccdr(rows, labels)).epsilon(1e-12));
        }
    }
    SUBCASE("preconditions") {
        CHECK_THROWS_AS(ccdr(set_of({{1, 0}, {0, 1}}), {"a", "a"}), ValidationError);
        CHECK_THROWS_AS(ccdr(set_of({{1, 0}, {0, 1}}), {"a", "b"}), ValidationError);
    }
}

TEST_CASE("metric invariances") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 6 + static_cast<int>(rng() % 30);
        std::vector<std::vector<double>> rows(n, std::vector<double>(4));
        for (auto& r : rows)
            for (auto& v : r) v = g(rng);
        std::vector<std::string> labels(n);
        for (auto& l : labels) l = "c" + std::to_string(rng() % 5);
        labels[1] = labels[0];
        const auto e = set_of(rows);
        const auto sim = similarity_matrix(e, labels, SimilarityMetric::cosine_similarity);

        double prev = 0.0;
        for (int k = 1; k <= 10; ++k) {
            const double t = tkrmd(sim, k);
            CHECK(t >= prev);
            prev = t;
        }
        CHECK(dtkap(sim, 5) <= tkrmd(sim, 5) + 1e-15);

        std::vector<std::string> renamed = labels;
        for (auto& l : renamed) l = "renamed-" + l + "-x";
        const auto sim2 = similarity_matrix(e, renamed, SimilarityMetric::cosine_similarity);
        CHECK(dtkap(sim2, 5) == dtkap(sim, 5));
        CHECK(tkrmd(sim2, 3) == tkrmd(sim, 3));
        CHECK(ccdr(e, renamed) == ccdr(e, labels));

        SimilarityMatrix shifted = sim;
        shifted.scores.array() += 3.25;
        CHECK(dtkap(shifted, 5) == dtkap(sim, 5));
        CHECK(tkrmd(shifted, 2) == tkrmd(sim, 2));
    }
}

TEST_CASE("evaluation report") {
    const auto e = set_of({{1, 0}, {0.9, 0.1}, {0, 1}, {0.1, 0.9}, {-1, 0}});
    const std::vector<std::string> labels{"a", "a", "b", "b", "c"};
    const EvalReport r = evaluate_embeddings(e, labels, SimilarityMetric::cosine_similarity, 5, 4);
    CHECK(r.num_images == 5);
    CHECK(r.num_queries == 4);
    CHECK(r.tkrmd.size() == 5);
    CHECK(r.dtkap == 1.0);
    REQUIRE(r.queries.size() == 4);
    CHECK(r.queries[0].hit_ranks == std::vector<int>{1});
    CHECK(r.queries[0].first_match_rank == 1);

    const auto j = nlohmann::json::parse(report_to_json(r));
    CHECK(j["dtkap"] == 1.0);
    CHECK(j["tkrmd"]["1"] == 1.0);
    CHECK(j["queries"].size() == 4);
    CHECK_FALSE(nlohmann::json::parse(report_to_json(r, false)).contains("queries"));

    TempDir dir;
    write_rank_curve_csv(r, dir / "curve.csv");
    std::ifstream in(dir / "curve.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "k,tkrmd");
    CHECK(first.rfind("1,", 0) == 0);
}

TEST_CASE("naive baseline sits at the hypergeometric chance level") {
    // 30 classes of 4 plus 20 singletons.
    std::vector<std::string> ids, labels;
    std::vector<int> sizes;
    for (int c = 0; c < 30; ++c) {
        sizes.push_back(4);
        for (int i = 0; i < 4; ++i) {
            ids.push_back("c" + std::to_string(c) + "_" + std::to_string(i));
            labels.push_back("c" + std::to_string(c));
        }
    }
    for (int s = 0; s < 20; ++s) {
        sizes.push_back(1);
        ids.push_back("s" + std::to_string(s));
        labels.push_back("s" + std::to_string(s));
    }
    double mean = 0.0;
    const int runs = 10;
    for (int seed = 0; seed < runs; ++seed) mean += naive_baseline(ids, labels, seed).tkrmd.at(5) / runs;
    CHECK(std::abs(mean - oracle::chance_tkrmd(sizes, 5)) <= 0.03);
    CHECK(std::abs(naive_baseline(ids, labels, 1).tkrmd.at(5) - oracle::chance_tkrmd(sizes, 5)) <= 0.1);

    const auto two = naive_baseline({"a", "b"}, {"x", "x"}, 3);
    CHECK(two.tkrmd.at(1) == 1.0);
    CHECK_THROWS_AS(naive_baseline({}, {}, 0), ValidationError);
}

TEST_CASE("sphere export") {
    TempDir dir;
    const auto e = set_of({{1, 0, 0}, {0, 2, 0}, {0, 0, -3}, {1, 1, 1}});
    sphere_demo_export(e, {"a", "a", "b", "b"}, dir / "s.csv");
    std::ifstream in(dir / "s.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "image_id,label,x,y,z");
    int rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        std::stringstream ss(line);
        std::string id, label, x, y, z;
        std::getline(ss, id, ',');
        std::getline(ss, label, ',');
        std::getline(ss, x, ',');
        std::getline(ss, y, ',');
        std::getline(ss, z, ',');
        const double n = std::sqrt(std::stod(x) * std::stod(x) + std::stod(y) * std::stod(y) + std::stod(z) * std::stod(z));
        CHECK(std::abs(n - 1.0) < 1e-6);
    }
    CHECK(rows == 4);

    EmbeddingSet empty;
    empty.vectors.resize(0, 3);
    sphere_demo_export(empty, {}, dir / "empty.csv");
    std::ifstream e_in(dir / "empty.csv");
    int lines = 0;
    while (std::getline(e_in, line)) ++lines;
    CHECK(lines == 1);

    CHECK_THROWS_AS(sphere_demo_export(set_of({{1, 0}}), {"a"}, dir / "bad.csv"), ValidationError);
}

TEST_CASE("embedding set file round trip") {
    TempDir dir;
    EmbeddingSet e = set_of({{1.5, -2.0, 0.25}, {0, 0, 1}});
    e.image_ids[1] = "with space/and slash";
    e.normalized = true;
    write_embedding_set(dir / "e.fkem", e);
    const EmbeddingSet back = read_embedding_set(dir / "e.fkem");
    CHECK(back.image_ids == e.image_ids);
    CHECK(back.normalized);
    CHECK(back.vectors.isApprox(e.vectors));
    CHECK(back.index_of("with space/and slash") == 1);
    CHECK_THROWS_AS(back.index_of("nope"), NotFoundError);

    std::ofstream(dir / "bad.fkem") << "FKXX";
    CHECK_THROWS_AS(read_embedding_set(dir / "bad.fkem"), ParseError);
}
