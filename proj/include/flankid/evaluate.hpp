#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "flankid/embedding_set.hpp"

namespace flankid {

enum class SimilarityMetric { cosine_similarity, negative_euclidean };

std::string_view to_string(SimilarityMetric metric);
std::optional<SimilarityMetric> parse_metric(std::string_view text);

// Pairwise scores, higher = more similar. The diagonal never takes part in a ranking.
struct SimilarityMatrix {
    Eigen::MatrixXd scores;
    std::vector<std::string> labels;     // flank id per row
    std::vector<std::string> image_ids;  // tie-break key per row
    SimilarityMetric metric = SimilarityMetric::cosine_similarity;

    std::size_t size() const noexcept { return labels.size(); }
};

SimilarityMatrix similarity_matrix(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                                   SimilarityMetric metric);

// Candidates for query row i, best first; ties resolve by ascending image id.
std::vector<std::size_t> ranked_candidates(const SimilarityMatrix& sim, std::size_t query);

// Fraction of queries with a same-label image among their top k. Queries whose
// class has a single image are skipped.
double tkrmd(const SimilarityMatrix& sim, int k);

// Mean over eligible queries of (1/k_i) * sum_{j<=k_i} P(j), with
// k_i = min(|C_i| - 1, k_max) and P(j) the precision among the top j.
double dtkap(const SimilarityMatrix& sim, int k_max);

// Mean intra-class cosine distance over mean inter-class cosine distance,
// both averaged over all unordered pairs.
double ccdr(const EmbeddingSet& embeddings, const std::vector<std::string>& labels);

struct QueryDiagnostics {
    std::string query_id;
    std::string label;
    std::vector<std::string> candidates;  // top k_max, best first
    std::vector<int> hit_ranks;           // 1-based ranks of same-label candidates among them
    int first_match_rank = 0;             // over the full ranking
};

struct EvalReport {
    int k_max = 5;
    double dtkap = 0.0;
    std::map<int, double> tkrmd;  // k -> TkRMD, k = 1..curve_max
    std::optional<double> ccdr;
    std::size_t num_queries = 0;  // eligible queries
    std::size_t num_images = 0;
    SimilarityMetric metric = SimilarityMetric::cosine_similarity;
    std::vector<QueryDiagnostics> queries;
};

EvalReport evaluate_embeddings(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                               SimilarityMetric metric, int k_max = 5, int curve_max = 10);

// Random unit vectors for every image: the chance floor for the metrics.
EvalReport naive_baseline(const std::vector<std::string>& image_ids, const std::vector<std::string>& labels,
                          std::uint64_t seed, int k_max = 5, int dim = 128);

std::string report_to_json(const EvalReport& report, bool include_queries = true);
void write_rank_curve_csv(const EvalReport& report, const std::filesystem::path& path);

// CSV of image_id,label,x,y,z with each row projected onto the unit sphere.
void sphere_demo_export(const EmbeddingSet& embeddings, const std::vector<std::string>& labels,
                        const std::filesystem::path& path);

}  // namespace flankid
