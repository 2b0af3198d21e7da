#include "flankid/losses.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flankid::losses {

double margin_h(double cos_theta) {
    const double c = std::clamp(cos_theta, -1.0, 1.0);
    const double s = 1.0 - c * c;
    const double s2 = s * s;
    return (s2 * s2 + 0.1) / 1.1;
}

double margin_h_derivative(double cos_theta) {
    const double c = std::clamp(cos_theta, -1.0, 1.0);
    const double s = 1.0 - c * c;
    return -8.0 * c * s * s * s / 1.1;
}

namespace {

void check_batch(const BatchLabels& batch, const AngularHead& head) {
    const auto n = batch.embeddings.rows();
    if (n == 0) throw ValidationError("loss requires a non-empty batch");
    if (static_cast<std::size_t>(n) != batch.labels.size())
        throw ShapeError("embedding rows and labels differ in count");
    if (head.weights.rows() == 0) throw ValidationError("head has no classes");
    if (head.weights.cols() != batch.embeddings.cols())
        throw ShapeError("head width " + std::to_string(head.weights.cols()) + " != embedding dim " +
                         std::to_string(batch.embeddings.cols()));
    if (!(head.scale > 0.0)) throw ValidationError("scale s must be positive");
    if (head.margin < 0.0) throw ValidationError("margin m must be >= 0");
    for (int y : batch.labels)
        if (y < 0 || y >= head.weights.rows())
            throw ValidationError("label " + std::to_string(y) + " outside [0, C)");
}

Eigen::VectorXd row_norms(const Matrix& m) {
    Eigen::VectorXd n = m.rowwise().norm();
    for (Eigen::Index i = 0; i < n.size(); ++i)
        if (n(i) == 0.0) throw ValidationError("cannot normalize a zero vector");
    return n;
}

// Gradient of f(x / |x|) w.r.t. x, given the gradient w.r.t. the unit vector.
Matrix through_normalization(const Matrix& grad_unit, const Matrix& unit, const Eigen::VectorXd& norms) {
    Matrix g = grad_unit;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double radial = grad_unit.row(i).dot(unit.row(i));
        g.row(i) = (grad_unit.row(i) - radial * unit.row(i)) / norms(i);
    }
    return g;
}

struct Cosines {
    Matrix unit_x;  // N x D
    Matrix unit_w;  // C x D
    Eigen::VectorXd norm_x, norm_w;
    Matrix cos;      // N x C, clamped
    Matrix clamped;  // 1 where the raw cosine sat outside the band (zero gradient)
};

Cosines compute_cosines(const BatchLabels& batch, const AngularHead& head) {
    Cosines c;
    c.norm_x = row_norms(batch.embeddings);
    c.norm_w = row_norms(head.weights);
    c.unit_x = c.norm_x.cwiseInverse().asDiagonal() * batch.embeddings;
    c.unit_w = c.norm_w.cwiseInverse().asDiagonal() * head.weights;
    c.cos = c.unit_x * c.unit_w.transpose();
    c.clamped = Matrix::Zero(c.cos.rows(), c.cos.cols());
    for (Eigen::Index i = 0; i < c.cos.rows(); ++i)
        for (Eigen::Index j = 0; j < c.cos.cols(); ++j) {
            double& v = c.cos(i, j);
            if (v > kCosineClamp || v < -kCosineClamp) {
                v = std::clamp(v, -kCosineClamp, kCosineClamp);
                c.clamped(i, j) = 1.0;
            }
        }
    return c;
}

double margin_of(MarginMode mode, double m, double cos_y) {
    switch (mode) {
        case MarginMode::none: return 0.0;
        case MarginMode::constant: return m;
        case MarginMode::adaptive: return m * margin_h(cos_y);
    }
    return 0.0;
}

double margin_slope(MarginMode mode, double m, double cos_y) {
    return mode == MarginMode::adaptive ? m * margin_h_derivative(cos_y) : 0.0;
}

}  // namespace

LossWithGrad angular_loss(const BatchLabels& batch, const AngularHead& head, MarginMode mode) {
    check_batch(batch, head);
    const Cosines cs = compute_cosines(batch, head);
    const auto n = batch.embeddings.rows();
    const auto classes = head.weights.rows();
    const double s = head.scale;

    LossWithGrad out;
    Matrix grad_cos = Matrix::Zero(n, classes);
    Eigen::VectorXd logits(classes);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = batch.labels[static_cast<std::size_t>(i)];
        const double cos_y = cs.cos(i, y);
        for (Eigen::Index j = 0; j < classes; ++j) logits(j) = s * cs.cos(i, j);
        logits(y) = s * (cos_y - margin_of(mode, head.margin, cos_y));

        const double top = logits.maxCoeff();
        const Eigen::VectorXd ex = (logits.array() - top).exp();
        const double total = ex.sum();
        out.value += std::log(total) + top - logits(y);

        // dL/dlogit = softmax - onehot; chain into cosines.
        for (Eigen::Index j = 0; j < classes; ++j) {
            double g = ex(j) / total - (j == y ? 1.0 : 0.0);
            double dlogit_dcos = s;
            if (j == y) dlogit_dcos = s * (1.0 - margin_slope(mode, head.margin, cos_y));
            grad_cos(i, j) = cs.clamped(i, j) != 0.0 ? 0.0 : g * dlogit_dcos;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    out.value *= inv_n;
    grad_cos *= inv_n;

    const Matrix grad_unit_x = grad_cos * cs.unit_w;              // N x D
    const Matrix grad_unit_w = grad_cos.transpose() * cs.unit_x;  // C x D
    out.grad_embeddings = through_normalization(grad_unit_x, cs.unit_x, cs.norm_x);
    out.grad_weights = through_normalization(grad_unit_w, cs.unit_w, cs.norm_w);
    return out;
}

double normalized_softmax_loss(const BatchLabels& batch, const AngularHead& head) {
    return angular_loss(batch, head, MarginMode::none).value;
}

double cosface_loss(const BatchLabels& batch, const AngularHead& head) {
    return angular_loss(batch, head, MarginMode::constant).value;
}

double modified_cosface_loss(const BatchLabels& batch, const AngularHead& head) {
    return angular_loss(batch, head, MarginMode::adaptive).value;
}

std::vector<double> target_cosines(const BatchLabels& batch, const AngularHead& head) {
    check_batch(batch, head);
    const Cosines cs = compute_cosines(batch, head);
    std::vector<double> out;
    for (Eigen::Index i = 0; i < cs.cos.rows(); ++i) out.push_back(cs.cos(i, batch.labels[static_cast<std::size_t>(i)]));
    return out;
}

// ---- triplet ----------------------------------------------------------------

double triplet_loss(double d_ap, double d_an, double alpha) { return std::max(d_ap - d_an + alpha, 0.0); }

Matrix pairwise_distances(const Matrix& embeddings) {
    const auto n = embeddings.rows();
    Matrix d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = (embeddings.row(i) - embeddings.row(j)).norm();
    }
    return d;
}

MiningResult mine_batch_triplets(const BatchLabels& batch, const TripletConfig& cfg, int epoch,
                                 std::mt19937_64& rng) {
    const auto n = static_cast<int>(batch.embeddings.rows());
    if (static_cast<std::size_t>(n) != batch.labels.size())
        throw ShapeError("embedding rows and labels differ in count");
    if (!(cfg.margin > 0.0)) throw ValidationError("triplet margin must be positive");

    MiningResult result;
    if (n < 2) return result;
    const Matrix dist = pairwise_distances(batch.embeddings);
    const bool mining = epoch >= cfg.mining_start_epoch;
    const double window = cfg.window();

    std::vector<int> negatives, semi_hard;
    std::vector<double> weights;
    for (int a = 0; a < n; ++a) {
        negatives.clear();
        for (int j = 0; j < n; ++j)
            if (batch.labels[j] != batch.labels[a]) negatives.push_back(j);
        if (negatives.empty()) continue;

        for (int p = 0; p < n; ++p) {
            if (p == a || batch.labels[p] != batch.labels[a]) continue;
            const double d_ap = dist(a, p);
            semi_hard.clear();
            weights.clear();
            if (mining) {
                for (int neg : negatives) {
                    const double d_an = dist(a, neg);
                    if (d_an > d_ap && d_an < d_ap + window) {
                        semi_hard.push_back(neg);
                        weights.push_back(1.0 / (d_an + cfg.weighting_epsilon));
                    }
                }
            }
            int chosen;
            if (semi_hard.empty()) {
                std::uniform_int_distribution<std::size_t> pick(0, negatives.size() - 1);
                chosen = negatives[pick(rng)];
                ++result.random;
            } else {
                std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
                chosen = semi_hard[pick(rng)];
                ++result.semi_hard;
            }
            result.triplets.push_back({a, p, chosen});
        }
    }
    return result;
}

LossWithGrad batch_triplet_loss(const Matrix& embeddings, const std::vector<Triplet>& triplets, double alpha) {
    LossWithGrad out;
    out.grad_embeddings = Matrix::Zero(embeddings.rows(), embeddings.cols());
    if (triplets.empty()) return out;
    const double inv = 1.0 / static_cast<double>(triplets.size());
    for (const auto& t : triplets) {
        const Eigen::RowVectorXd ap = embeddings.row(t.anchor) - embeddings.row(t.positive);
        const Eigen::RowVectorXd an = embeddings.row(t.anchor) - embeddings.row(t.negative);
        const double d_ap = ap.norm(), d_an = an.norm();
        const double l = triplet_loss(d_ap, d_an, alpha);
        out.value += l * inv;
        if (l <= 0.0) continue;
        // d|u|/du = u/|u|; coincident points contribute no direction.
        const Eigen::RowVectorXd g_ap = d_ap > 0.0 ? Eigen::RowVectorXd(ap / d_ap) : Eigen::RowVectorXd::Zero(ap.size());
        const Eigen::RowVectorXd g_an = d_an > 0.0 ? Eigen::RowVectorXd(an / d_an) : Eigen::RowVectorXd::Zero(an.size());
        out.grad_embeddings.row(t.anchor) += inv * (g_ap - g_an);
        out.grad_embeddings.row(t.positive) -= inv * g_ap;
        out.grad_embeddings.row(t.negative) += inv * g_an;
    }
    return out;
}

}  // namespace flankid::losses
