#include "flankid/evaluate.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

namespace flankid {

std::string_view to_string(SimilarityMetric metric) {
    return metric == SimilarityMetric::cosine_similarity ? "cosine_similarity" : "negative_euclidean";
}

std::optional<SimilarityMetric> parse_metric(std::string_view text) {
    if (text == "cosine_similarity" || text == "cosine") return SimilarityMetric::cosine_similarity;
    if (text == "negative_euclidean" || text == "euclidean") return SimilarityMetric::negative_euclidean;
    return std::nullopt;
}

namespace {

Eigen::MatrixXd unit_rows(const Eigen::MatrixXd& m) {
    Eigen::MatrixXd u = m;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        const double n = u.row(i).norm();
        if (n == 0.0) throw ValidationError("cannot take the cosine of a zero vector");
        u.row(i) /= n;
    }
    return u;
}

std::map<std::string, std::size_t> class_sizes(const std::vector<std::string>& labels) {
    std::map<std::string, std::size_t> sizes;
    for (const auto& l : labels) ++sizes[l];
    return sizes;
}

// Same-label indicator for each of the first `depth` ranked candidates.
std::vector<bool> hits_at(const SimilarityMatrix& sim, std::size_t query, std::size_t depth) {
    const auto order = ranked_candidates(sim, query);
    std::vector<bool> hits;
    for (std::size_t r = 0; r < std::min(depth, order.size()); ++r)
        hits.push_back(sim.labels[order[r]] == sim.labels[query]);
    return hits;
}

void check_labels(const SimilarityMatrix& sim) {
    if (static_cast<std::size_t>(sim.scores.rows()) != sim.labels.size() || sim.scores.rows() != sim.scores.cols())
        throw ShapeError("similarity matrix and labels disagree in size");
}

}  // namespace

SimilarityMatrix similarity_matrix(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                                   SimilarityMetric metric) {
    if (embeddings.size() < 2) throw ValidationError("similarity matrix needs at least 2 embeddings");
    if (labels.size() != embeddings.size()) throw ShapeError("labels and embeddings differ in count");
    if (static_cast<std::size_t>(embeddings.vectors.rows()) != embeddings.size())
        throw ShapeError("embedding rows and image ids differ in count");

    SimilarityMatrix sim;
    sim.labels = labels;
    sim.image_ids = embeddings.image_ids;
    sim.metric = metric;
    const auto& x = embeddings.vectors;
    if (metric == SimilarityMetric::cosine_similarity) {
        const Eigen::MatrixXd u = unit_rows(x);
        sim.scores = (u * u.transpose()).cwiseMax(-1.0).cwiseMin(1.0);
    } else {
        const auto n = x.rows();
        sim.scores.resize(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            sim.scores(i, i) = 0.0;
            for (Eigen::Index j = i + 1; j < n; ++j) sim.scores(i, j) = sim.scores(j, i) = -(x.row(i) - x.row(j)).norm();
        }
    }
    return sim;
}

std::vector<std::size_t> ranked_candidates(const SimilarityMatrix& sim, std::size_t query) {
    const std::size_t n = sim.size();
    std::vector<std::size_t> order;
    order.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j)
        if (j != query) order.push_back(j);
    const bool by_id = sim.image_ids.size() == n;
    const auto q = static_cast<Eigen::Index>(query);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = sim.scores(q, static_cast<Eigen::Index>(a));
        const double sb = sim.scores(q, static_cast<Eigen::Index>(b));
        if (sa != sb) return sa > sb;
        return by_id ? sim.image_ids[a] < sim.image_ids[b] : a < b;
    });
    return order;
}

double tkrmd(const SimilarityMatrix& sim, int k) {
    if (k < 1) throw ValidationError("k must be >= 1");
    check_labels(sim);
    const auto sizes = class_sizes(sim.labels);
    std::size_t eligible = 0, detected = 0;
    for (std::size_t i = 0; i < sim.size(); ++i) {
        if (sizes.at(sim.labels[i]) < 2) continue;
        ++eligible;
        const auto hits = hits_at(sim, i, static_cast<std::size_t>(k));
        if (std::find(hits.begin(), hits.end(), true) != hits.end()) ++detected;
    }
    if (eligible == 0) throw ValidationError("no eligible queries (every class has a single image)");
    return static_cast<double>(detected) / static_cast<double>(eligible);
}

double dtkap(const SimilarityMatrix& sim, int k_max) {
    if (k_max < 1) throw ValidationError("k_max must be >= 1");
    check_labels(sim);
    const auto sizes = class_sizes(sim.labels);
    std::size_t eligible = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < sim.size(); ++i) {
        const auto class_size = sizes.at(sim.labels[i]);
        if (class_size < 2) continue;
        ++eligible;
        const auto k_i = std::min<std::size_t>(class_size - 1, static_cast<std::size_t>(k_max));
        const auto hits = hits_at(sim, i, k_i);
        double found = 0.0, precision_sum = 0.0;
        for (std::size_t j = 0; j < k_i; ++j) {
            if (hits[j]) found += 1.0;
            precision_sum += found / static_cast<double>(j + 1);
        }
        total += precision_sum / static_cast<double>(k_i);
    }
    if (eligible == 0) throw ValidationError("no eligible queries (every class has a single image)");
    return total / static_cast<double>(eligible);
}

double ccdr(const EmbeddingSet& embeddings, const std::vector<std::string>& labels) {
    if (labels.size() != embeddings.size()) throw ShapeError("labels and embeddings differ in count");
    const auto sizes = class_sizes(labels);
    if (sizes.size() < 2) throw ValidationError("CCDR needs at least 2 classes");
    if (std::none_of(sizes.begin(), sizes.end(), [](const auto& kv) { return kv.second >= 2; }))
        throw ValidationError("CCDR needs a class with at least 2 members");

    const Eigen::MatrixXd u = unit_rows(embeddings.vectors);
    const Eigen::MatrixXd cos = u * u.transpose();
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            const double d = 1.0 - cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            if (labels[i] == labels[j]) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    const double mean_inter = inter / static_cast<double>(n_inter);
    // Rounding leaves identical unit vectors a few ulps apart.
    if (mean_inter <= 1e-12) throw ValidationError("degenerate embeddings: inter-class cosine distance is 0");
    return (intra / static_cast<double>(n_intra)) / mean_inter;
}

EvalReport evaluate_embeddings(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                               SimilarityMetric metric, int k_max, int curve_max) {
    if (k_max < 1 || curve_max < 1) throw ValidationError("k_max and curve_max must be >= 1");
    const SimilarityMatrix sim = similarity_matrix(embeddings, labels, metric);
    EvalReport report;
    report.k_max = k_max;
    report.metric = metric;
    report.num_images = embeddings.size();
    report.dtkap = dtkap(sim, k_max);
    const int curve = std::max(curve_max, k_max);
    for (int k = 1; k <= curve; ++k) report.tkrmd[k] = tkrmd(sim, k);
    try {
        report.ccdr = ccdr(embeddings, labels);
    } catch (const ValidationError&) {
        report.ccdr.reset();
    }

    const auto sizes = class_sizes(labels);
    for (std::size_t i = 0; i < sim.size(); ++i) {
        if (sizes.at(labels[i]) < 2) continue;
        ++report.num_queries;
        QueryDiagnostics q;
        q.query_id = embeddings.image_ids[i];
        q.label = labels[i];
        const auto order = ranked_candidates(sim, i);
        for (std::size_t r = 0; r < order.size(); ++r) {
            const bool hit = labels[order[r]] == labels[i];
            if (r < static_cast<std::size_t>(k_max)) {
                q.candidates.push_back(embeddings.image_ids[order[r]]);
                if (hit) q.hit_ranks.push_back(static_cast<int>(r + 1));
            }
            if (hit && q.first_match_rank == 0) q.first_match_rank = static_cast<int>(r + 1);
        }
        report.queries.push_back(std::move(q));
    }
    return report;
}

EvalReport naive_baseline(const std::vector<std::string>& image_ids, const std::vector<std::string>& labels,
                          std::uint64_t seed, int k_max, int dim) {
    if (image_ids.empty()) throw ValidationError("naive baseline needs a non-empty shard");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    EmbeddingSet set;
    set.image_ids = image_ids;
    set.vectors.resize(static_cast<Eigen::Index>(image_ids.size()), dim);
    for (Eigen::Index i = 0; i < set.vectors.rows(); ++i) {
        for (Eigen::Index d = 0; d < dim; ++d) set.vectors(i, d) = normal(rng);
        set.vectors.row(i).normalize();
    }
    set.normalized = true;
    return evaluate_embeddings(set, labels, SimilarityMetric::cosine_similarity, k_max);
}

std::string report_to_json(const EvalReport& report, bool include_queries) {
    nlohmann::json j;
    j["k_max"] = report.k_max;
    j["metric"] = to_string(report.metric);
    j["num_images"] = report.num_images;
    j["num_queries"] = report.num_queries;
    j["dtkap"] = report.dtkap;
    nlohmann::json curve = nlohmann::json::object();
    for (const auto& [k, v] : report.tkrmd) curve[std::to_string(k)] = v;
    j["tkrmd"] = curve;
    j["ccdr"] = report.ccdr ? nlohmann::json(*report.ccdr) : nlohmann::json(nullptr);
    if (include_queries) {
        nlohmann::json qs = nlohmann::json::array();
        for (const auto& q : report.queries)
            qs.push_back({{"query", q.query_id},
                          {"label", q.label},
                          {"candidates", q.candidates},
                          {"hit_ranks", q.hit_ranks},
                          {"first_match_rank", q.first_match_rank}});
        j["queries"] = qs;
    }
    return j.dump(2);
}

void write_rank_curve_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "k,tkrmd\n";
    for (const auto& [k, v] : report.tkrmd) out << k << ',' << v << '\n';
}

void sphere_demo_export(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                        const std::filesystem::path& path) {
    if (embeddings.size() > 0 && embeddings.dim() != 3)
        throw ValidationError("sphere demo export needs 3-dimensional embeddings, got " +
                              std::to_string(embeddings.dim()));
    if (labels.size() != embeddings.size()) throw ShapeError("labels and embeddings differ in count");
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "image_id,label,x,y,z\n";
    out.precision(9);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        Eigen::RowVector3d v = embeddings.vectors.row(static_cast<Eigen::Index>(i));
        const double n = v.norm();
        if (n == 0.0) throw ValidationError("cannot project a zero vector onto the sphere");
        v /= n;
        out << embeddings.image_ids[i] << ',' << labels[i] << ',' << v(0) << ',' << v(1) << ',' << v(2) << '\n';
    }
}

}  // namespace flankid
