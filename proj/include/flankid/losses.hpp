#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace flankid::losses {

using Matrix = Eigen::MatrixXd;

// Cosines are clamped into this band before use so acos-free expressions stay smooth.
inline constexpr double kCosineClamp = 1.0 - 1e-7;

// Angular classification head. One row of `weights` per class; rows are
// L2-normalized on every use, bias is fixed at zero.
struct AngularHead {
    Matrix weights;  // C x D
    double scale = 64.0;
    double margin = 0.0;
};

struct BatchLabels {
    Matrix embeddings;  // N x D, one row per sample
    std::vector<int> labels;
};

enum class MarginMode {
    none,      // normalized softmax
    constant,  // CosFace: subtract m from the target cosine
    adaptive,  // subtract m * h(cos) from the target cosine
};

struct LossWithGrad {
    double value = 0.0;
    Matrix grad_embeddings;  // N x D
    Matrix grad_weights;     // C x D (empty for triplet)
};

// Adaptive margin multiplier ((1 - c^2)^4 + 0.1) / 1.1. Largest (1.0) for
// orthogonal vectors, smallest (1/11) for aligned or opposed ones.
double margin_h(double cos_theta);
// d margin_h / d cos_theta.
double margin_h_derivative(double cos_theta);

double normalized_softmax_loss(const BatchLabels& batch, const AngularHead& head);
double cosface_loss(const BatchLabels& batch, const AngularHead& head);
double modified_cosface_loss(const BatchLabels& batch, const AngularHead& head);

// Mean angular-margin cross entropy and its gradients w.r.t. the raw
// (unnormalized) embeddings and head weights. Gradients flow through h.
LossWithGrad angular_loss(const BatchLabels& batch, const AngularHead& head, MarginMode mode);

// Per-sample target-class cosines after clamping, useful for diagnostics.
std::vector<double> target_cosines(const BatchLabels& batch, const AngularHead& head);

// ---- triplet ----------------------------------------------------------------

struct TripletConfig {
    double margin = 10.0;  // alpha, Euclidean
    // Upper width of the semi-hard window; defaults to the margin.
    std::optional<double> semi_hard_window;
    int mining_start_epoch = 4;
    double weighting_epsilon = 1e-8;

    double window() const { return semi_hard_window.value_or(margin); }
};

struct Triplet {
    int anchor = 0;
    int positive = 0;
    int negative = 0;
    bool operator==(const Triplet&) const = default;
};

struct MiningResult {
    std::vector<Triplet> triplets;
    std::size_t semi_hard = 0;  // pairs whose negative came from the semi-hard set
    std::size_t random = 0;     // pairs that fell back to a uniform negative
};

double triplet_loss(double d_ap, double d_an, double alpha);

// Pairwise Euclidean distances between the rows of `embeddings`.
Matrix pairwise_distances(const Matrix& embeddings);

// For every ordered positive pair (a, p), a != p, picks one negative. Epochs
// are 1-based; before cfg.mining_start_epoch, or when no negative satisfies
// d_ap < d_an < d_ap + window, the negative is uniform over all negatives.
// Otherwise it is drawn from the semi-hard set with weight 1 / (d_an + eps).
MiningResult mine_batch_triplets(const BatchLabels& batch, const TripletConfig& cfg, int epoch,
                                 std::mt19937_64& rng);

// Mean hinge loss over the triplets, with gradients w.r.t. embeddings.
LossWithGrad batch_triplet_loss(const Matrix& embeddings, const std::vector<Triplet>& triplets, double alpha);

}  // namespace flankid::losses
