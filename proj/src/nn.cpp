#include "flankid/nn.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace flankid::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// ---- Tensor -------------------------------------------------------------------

Tensor::Tensor(int n, int c, int h, int w, float fill)
    : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(int n, int c, int h, int w) const {
    if (static_cast<std::size_t>(n) * c * h * w != data_.size()) throw ShapeError("reshape changes element count");
    Tensor t;
    t.shape_ = {n, c, h, w};
    t.data_ = data_;
    return t;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (!same_shape(other)) throw ShapeError("tensor shapes differ in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

void Layer::collect(const std::string&, std::vector<Parameter*>&, std::vector<Buffer*>&) {}

namespace {

Parameter make_param(int n, int c, int h, int w, Parameter::Init init, int fan_in) {
    Parameter p;
    p.value = Tensor(n, c, h, w, init == Parameter::Init::ones ? 1.0f : 0.0f);
    p.grad = Tensor(n, c, h, w);
    p.init = init;
    p.fan_in = fan_in;
    return p;
}

void register_param(const std::string& prefix, const char* name, Parameter& p, std::vector<Parameter*>& params) {
    p.name = prefix + name;
    params.push_back(&p);
}

}  // namespace

// ---- Conv2d -------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias, int groups)
    : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding), groups_(groups),
      has_bias_(bias) {
    if (groups != 1 && !(groups == in_channels && in_channels == out_channels))
        throw ConfigError("conv2d supports dense or depthwise grouping only");
    const int per_group_in = in_ / groups_;
    weight_ = make_param(out_, per_group_in, k_, k_, Parameter::Init::kaiming, per_group_in * k_ * k_);
    if (has_bias_) bias_ = make_param(out_, 1, 1, 1, Parameter::Init::zeros, 1);
}

void Conv2d::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>&) {
    register_param(prefix, "weight", weight_, params);
    if (has_bias_) register_param(prefix, "bias", bias_, params);
}

void Conv2d::widen_input(int channels, std::vector<float> new_weight) {
    if (groups_ != 1) throw ConfigError("cannot widen a depthwise convolution");
    if (new_weight.size() != static_cast<std::size_t>(out_) * channels * k_ * k_)
        throw ShapeError("widened stem weight has the wrong size");
    in_ = channels;
    weight_ = make_param(out_, channels, k_, k_, Parameter::Init::kaiming, channels * k_ * k_);
    weight_.value.values() = std::move(new_weight);
}

namespace {

void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* col) {
    const int plane = oh * ow;
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
                const float* src = x + static_cast<std::size_t>(ci) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* out = row + oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + ow, 0.0f);
                        continue;
                    }
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        out[ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0f;
                    }
                }
            }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* x) {
    const int plane = oh * ow;
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * plane;
                float* dst = x + static_cast<std::size_t>(ci) * h * w;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[iy * w + ix] += row[oy * ow + ox];
                    }
                }
            }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, bool) {
    if (x.c() != in_)
        throw ShapeError("conv2d expects " + std::to_string(in_) + " channels, got " + std::to_string(x.c()));
    out_h_ = (x.h() + 2 * pad_ - k_) / stride_ + 1;
    out_w_ = (x.w() + 2 * pad_ - k_) / stride_ + 1;
    if (out_h_ <= 0 || out_w_ <= 0) throw ShapeError("conv2d input smaller than its kernel");
    input_ = x;
    Tensor y(x.n(), out_, out_h_, out_w_);
    if (groups_ == 1) forward_dense(x, y);
    else forward_depthwise(x, y);
    if (has_bias_) {
        const std::size_t plane = static_cast<std::size_t>(out_h_) * out_w_;
        for (int n = 0; n < y.n(); ++n)
            for (int o = 0; o < out_; ++o) {
                float* p = y.sample(n) + o * plane;
                const float b = bias_.value[o];
                for (std::size_t i = 0; i < plane; ++i) p[i] += b;
            }
    }
    return y;
}

void Conv2d::forward_dense(const Tensor& x, Tensor& y) {
    const int rows = in_ * k_ * k_, plane = out_h_ * out_w_;
    std::vector<float> col(static_cast<std::size_t>(rows) * plane);
    ConstMatMap wmat(weight_.value.data(), out_, rows);
    for (int n = 0; n < x.n(); ++n) {
        im2col(x.sample(n), in_, x.h(), x.w(), k_, stride_, pad_, out_h_, out_w_, col.data());
        MatMap out(y.sample(n), out_, plane);
        out.noalias() = wmat * ConstMatMap(col.data(), rows, plane);
    }
}

void Conv2d::forward_depthwise(const Tensor& x, Tensor& y) {
    const int h = x.h(), w = x.w();
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < in_; ++c) {
            const float* src = x.sample(n) + static_cast<std::size_t>(c) * h * w;
            float* dst = y.sample(n) + static_cast<std::size_t>(c) * out_h_ * out_w_;
            const float* ker = weight_.value.data() + static_cast<std::size_t>(c) * k_ * k_;
            for (int oy = 0; oy < out_h_; ++oy)
                for (int ox = 0; ox < out_w_; ++ox) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < k_; ++ky) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix >= 0 && ix < w) acc += ker[ky * k_ + kx] * src[iy * w + ix];
                        }
                    }
                    dst[oy * out_w_ + ox] = acc;
                }
        }
}

Tensor Conv2d::backward(const Tensor& g) {
    if (has_bias_) {
        const std::size_t plane = static_cast<std::size_t>(out_h_) * out_w_;
        for (int n = 0; n < g.n(); ++n)
            for (int o = 0; o < out_; ++o) {
                const float* p = g.sample(n) + o * plane;
                float acc = 0.0f;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                bias_.grad[o] += acc;
            }
    }
    return groups_ == 1 ? backward_dense(g) : backward_depthwise(g);
}

Tensor Conv2d::backward_dense(const Tensor& g) {
    const Tensor& x = input_;
    const int rows = in_ * k_ * k_, plane = out_h_ * out_w_;
    std::vector<float> col(static_cast<std::size_t>(rows) * plane);
    std::vector<float> dcol(static_cast<std::size_t>(rows) * plane);
    ConstMatMap wmat(weight_.value.data(), out_, rows);
    MatMap dw(weight_.grad.data(), out_, rows);
    Tensor dx(x.n(), x.c(), x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
        im2col(x.sample(n), in_, x.h(), x.w(), k_, stride_, pad_, out_h_, out_w_, col.data());
        ConstMatMap gmat(g.sample(n), out_, plane);
        dw.noalias() += gmat * ConstMatMap(col.data(), rows, plane).transpose();
        MatMap(dcol.data(), rows, plane).noalias() = wmat.transpose() * gmat;
        col2im(dcol.data(), in_, x.h(), x.w(), k_, stride_, pad_, out_h_, out_w_, dx.sample(n));
    }
    return dx;
}

Tensor Conv2d::backward_depthwise(const Tensor& g) {
    const Tensor& x = input_;
    const int h = x.h(), w = x.w();
    Tensor dx(x.n(), x.c(), h, w);
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < in_; ++c) {
            const float* src = x.sample(n) + static_cast<std::size_t>(c) * h * w;
            float* dsrc = dx.sample(n) + static_cast<std::size_t>(c) * h * w;
            const float* gout = g.sample(n) + static_cast<std::size_t>(c) * out_h_ * out_w_;
            const float* ker = weight_.value.data() + static_cast<std::size_t>(c) * k_ * k_;
            float* dker = weight_.grad.data() + static_cast<std::size_t>(c) * k_ * k_;
            for (int oy = 0; oy < out_h_; ++oy)
                for (int ox = 0; ox < out_w_; ++ox) {
                    const float go = gout[oy * out_w_ + ox];
                    for (int ky = 0; ky < k_; ++ky) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= w) continue;
                            dker[ky * k_ + kx] += go * src[iy * w + ix];
                            dsrc[iy * w + ix] += go * ker[ky * k_ + kx];
                        }
                    }
                }
        }
    return dx;
}

// ---- BatchNorm2d --------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int channels, float momentum, float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = make_param(channels, 1, 1, 1, Parameter::Init::ones, 1);
    beta_ = make_param(channels, 1, 1, 1, Parameter::Init::zeros, 1);
    running_mean_.value = Tensor(channels, 1, 1, 1, 0.0f);
    running_var_.value = Tensor(channels, 1, 1, 1, 1.0f);
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) {
    register_param(prefix, "gamma", gamma_, params);
    register_param(prefix, "beta", beta_, params);
    running_mean_.name = prefix + "running_mean";
    running_var_.name = prefix + "running_var";
    buffers.push_back(&running_mean_);
    buffers.push_back(&running_var_);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    if (x.c() != channels_) throw ShapeError("batchnorm channel mismatch");
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    const std::size_t count = plane * x.n();
    last_training_ = training;
    inv_std_.assign(channels_, 0.0f);
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    Tensor y(x.n(), x.c(), x.h(), x.w());
    for (int c = 0; c < channels_; ++c) {
        float mean, var;
        if (training) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < x.n(); ++n) {
                const float* p = x.sample(n) + c * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            mean = static_cast<float>(sum / static_cast<double>(count));
            for (int n = 0; n < x.n(); ++n) {
                const float* p = x.sample(n) + c * plane;
                for (std::size_t i = 0; i < plane; ++i) sq += static_cast<double>(p[i] - mean) * (p[i] - mean);
            }
            var = static_cast<float>(sq / static_cast<double>(count));
            const float unbiased = count > 1 ? static_cast<float>(sq / static_cast<double>(count - 1)) : var;
            running_mean_.value[c] = (1.0f - momentum_) * running_mean_.value[c] + momentum_ * mean;
            running_var_.value[c] = (1.0f - momentum_) * running_var_.value[c] + momentum_ * unbiased;
        } else {
            mean = running_mean_.value[c];
            var = running_var_.value[c];
        }
        const float inv = 1.0f / std::sqrt(var + eps_);
        inv_std_[c] = inv;
        const float g = gamma_.value[c], b = beta_.value[c];
        for (int n = 0; n < x.n(); ++n) {
            const float* p = x.sample(n) + c * plane;
            float* xh = xhat_.sample(n) + c * plane;
            float* out = y.sample(n) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - mean) * inv;
                out[i] = g * xh[i] + b;
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& g) {
    const std::size_t plane = static_cast<std::size_t>(g.h()) * g.w();
    const double count = static_cast<double>(plane * g.n());
    Tensor dx(g.n(), g.c(), g.h(), g.w());
    for (int c = 0; c < channels_; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int n = 0; n < g.n(); ++n) {
            const float* gp = g.sample(n) + c * plane;
            const float* xh = xhat_.sample(n) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += gp[i];
                sum_gx += static_cast<double>(gp[i]) * xh[i];
            }
        }
        beta_.grad[c] += static_cast<float>(sum_g);
        gamma_.grad[c] += static_cast<float>(sum_gx);
        const float scale = gamma_.value[c] * inv_std_[c];
        const float mean_g = static_cast<float>(sum_g / count), mean_gx = static_cast<float>(sum_gx / count);
        for (int n = 0; n < g.n(); ++n) {
            const float* gp = g.sample(n) + c * plane;
            const float* xh = xhat_.sample(n) + c * plane;
            float* out = dx.sample(n) + c * plane;
            if (last_training_) {
                for (std::size_t i = 0; i < plane; ++i) out[i] = scale * (gp[i] - mean_g - xh[i] * mean_gx);
            } else {
                for (std::size_t i = 0; i < plane; ++i) out[i] = scale * gp[i];
            }
        }
    }
    return dx;
}

// ---- activations --------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
    input_ = x;
    Tensor y = x;
    for (auto& v : y.values()) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor ReLU::backward(const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i)
        if (input_[i] <= 0.0f) dx[i] = 0.0f;
    return dx;
}

namespace {
inline float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }
}  // namespace

Tensor SiLU::forward(const Tensor& x, bool) {
    input_ = x;
    Tensor y = x;
    for (auto& v : y.values()) v = v * sigmoid(v);
    return y;
}

Tensor SiLU::backward(const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        const float s = sigmoid(input_[i]);
        dx[i] *= s * (1.0f + input_[i] * (1.0f - s));
    }
    return dx;
}

Tensor Sigmoid::forward(const Tensor& x, bool) {
    Tensor y = x;
    for (auto& v : y.values()) v = sigmoid(v);
    output_ = y;
    return y;
}

Tensor Sigmoid::backward(const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= output_[i] * (1.0f - output_[i]);
    return dx;
}

// ---- pooling ------------------------------------------------------------------

MaxPool2d::MaxPool2d(int kernel, int stride, int padding) : k_(kernel), stride_(stride), pad_(padding) {}

Tensor MaxPool2d::forward(const Tensor& x, bool) {
    in_shape_ = x.shape();
    const int oh = (x.h() + 2 * pad_ - k_) / stride_ + 1;
    const int ow = (x.w() + 2 * pad_ - k_) / stride_ + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("maxpool input smaller than its window");
    Tensor y(x.n(), x.c(), oh, ow);
    argmax_.assign(y.size(), -1);
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * x.c() + c) * x.h() * x.w();
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int32_t arg = -1;
                    for (int ky = 0; ky < k_; ++ky) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= x.h()) continue;
                        for (int kx = 0; kx < k_; ++kx) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= x.w()) continue;
                            const float v = x[base + iy * x.w() + ix];
                            if (v > best) {
                                best = v;
                                arg = iy * x.w() + ix;
                            }
                        }
                    }
                    y[o] = best;
                    argmax_[o] = arg;
                }
        }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& g) {
    Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const std::size_t plane_in = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
    const std::size_t plane_out = static_cast<std::size_t>(g.h()) * g.w();
    for (std::size_t o = 0; o < g.size(); ++o) {
        const std::size_t nc = o / plane_out;
        if (argmax_[o] >= 0) dx[nc * plane_in + static_cast<std::size_t>(argmax_[o])] += g[o];
    }
    return dx;
}

AdaptiveAvgPool2d::AdaptiveAvgPool2d(int out_h, int out_w) : oh_(out_h), ow_(out_w) {}

namespace {
inline int bin_start(int i, int out, int in) { return (i * in) / out; }
inline int bin_end(int i, int out, int in) { return ((i + 1) * in + out - 1) / out; }
}  // namespace

Tensor AdaptiveAvgPool2d::forward(const Tensor& x, bool) {
    in_shape_ = x.shape();
    Tensor y(x.n(), x.c(), oh_, ow_);
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c)
            for (int oy = 0; oy < oh_; ++oy) {
                const int y0 = bin_start(oy, oh_, x.h()), y1 = bin_end(oy, oh_, x.h());
                for (int ox = 0; ox < ow_; ++ox) {
                    const int x0 = bin_start(ox, ow_, x.w()), x1 = bin_end(ox, ow_, x.w());
                    float acc = 0.0f;
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix) acc += x.at(n, c, iy, ix);
                    y.at(n, c, oy, ox) = acc / static_cast<float>((y1 - y0) * (x1 - x0));
                }
            }
    return y;
}

Tensor AdaptiveAvgPool2d::backward(const Tensor& g) {
    Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const int h = in_shape_[2], w = in_shape_[3];
    for (int n = 0; n < g.n(); ++n)
        for (int c = 0; c < g.c(); ++c)
            for (int oy = 0; oy < oh_; ++oy) {
                const int y0 = bin_start(oy, oh_, h), y1 = bin_end(oy, oh_, h);
                for (int ox = 0; ox < ow_; ++ox) {
                    const int x0 = bin_start(ox, ow_, w), x1 = bin_end(ox, ow_, w);
                    const float share = g.at(n, c, oy, ox) / static_cast<float>((y1 - y0) * (x1 - x0));
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix) dx.at(n, c, iy, ix) += share;
                }
            }
    return dx;
}

Tensor Flatten::forward(const Tensor& x, bool) {
    in_shape_ = x.shape();
    return x.reshaped(x.n(), static_cast<int>(x.stride()), 1, 1);
}

Tensor Flatten::backward(const Tensor& g) { return g.reshaped(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]); }

// ---- Linear -------------------------------------------------------------------

Linear::Linear(int in_features, int out_features, bool bias) : in_(in_features), out_(out_features), has_bias_(bias) {
    weight_ = make_param(out_, in_, 1, 1, Parameter::Init::kaiming, in_);
    if (has_bias_) bias_ = make_param(out_, 1, 1, 1, Parameter::Init::zeros, 1);
}

void Linear::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>&) {
    register_param(prefix, "weight", weight_, params);
    if (has_bias_) register_param(prefix, "bias", bias_, params);
}

Tensor Linear::forward(const Tensor& x, bool) {
    if (static_cast<int>(x.stride()) != in_)
        throw ShapeError("linear expects " + std::to_string(in_) + " features, got " + std::to_string(x.stride()));
    input_ = x;
    Tensor y(x.n(), out_, 1, 1);
    MatMap out(y.data(), x.n(), out_);
    out.noalias() = ConstMatMap(x.data(), x.n(), in_) * ConstMatMap(weight_.value.data(), out_, in_).transpose();
    if (has_bias_)
        for (int n = 0; n < x.n(); ++n)
            for (int o = 0; o < out_; ++o) out(n, o) += bias_.value[o];
    return y;
}

Tensor Linear::backward(const Tensor& g) {
    const int n = g.n();
    ConstMatMap gmat(g.data(), n, out_);
    MatMap(weight_.grad.data(), out_, in_).noalias() += gmat.transpose() * ConstMatMap(input_.data(), n, in_);
    if (has_bias_)
        for (int o = 0; o < out_; ++o) bias_.grad[o] += gmat.col(o).sum();
    Tensor dx(input_.n(), input_.c(), input_.h(), input_.w());
    MatMap(dx.data(), n, in_).noalias() = gmat * ConstMatMap(weight_.value.data(), out_, in_);
    return dx;
}

// ---- containers ---------------------------------------------------------------

Sequential& Sequential::add(LayerPtr layer) {
    layers_.push_back(std::move(layer));
    return *this;
}

Tensor Sequential::forward(const Tensor& x, bool training) {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, training);
    return h;
}

Tensor Sequential::backward(const Tensor& g) {
    Tensor h = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) h = (*it)->backward(h);
    return h;
}

void Sequential::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i]->collect(prefix + std::to_string(i) + ".", params, buffers);
}

Residual::Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut, LayerPtr post)
    : main_(std::move(main)), shortcut_(std::move(shortcut)), post_(std::move(post)) {
    if (!shortcut_) shortcut_ = std::make_unique<Sequential>();
}

Tensor Residual::forward(const Tensor& x, bool training) {
    Tensor y = main_->forward(x, training);
    y += shortcut_->empty() ? x : shortcut_->forward(x, training);
    return post_ ? post_->forward(y, training) : y;
}

Tensor Residual::backward(const Tensor& g) {
    const Tensor gy = post_ ? post_->backward(g) : g;
    Tensor dx = main_->backward(gy);
    dx += shortcut_->empty() ? gy : shortcut_->backward(gy);
    return dx;
}

void Residual::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) {
    main_->collect(prefix + "main.", params, buffers);
    shortcut_->collect(prefix + "shortcut.", params, buffers);
    if (post_) post_->collect(prefix + "post.", params, buffers);
}

SqueezeExcite::SqueezeExcite(int channels, int reduced) : reduce_(channels, reduced), expand_(reduced, channels) {}

void SqueezeExcite::collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) {
    reduce_.collect(prefix + "reduce.", params, buffers);
    expand_.collect(prefix + "expand.", params, buffers);
}

Tensor SqueezeExcite::forward(const Tensor& x, bool training) {
    input_ = x;
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    Tensor pooled(x.n(), x.c(), 1, 1);
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const float* p = x.sample(n) + c * plane;
            float acc = 0.0f;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            pooled.at(n, c, 0, 0) = acc / static_cast<float>(plane);
        }
    gate_ = gate_act_.forward(expand_.forward(act_.forward(reduce_.forward(pooled, training), training), training),
                              training);
    Tensor y = x;
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            float* p = y.sample(n) + c * plane;
            const float s = gate_.at(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) p[i] *= s;
        }
    return y;
}

Tensor SqueezeExcite::backward(const Tensor& g) {
    const Tensor& x = input_;
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    Tensor dgate(x.n(), x.c(), 1, 1);
    Tensor dx = g;
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            const float* gp = g.sample(n) + c * plane;
            const float* xp = x.sample(n) + c * plane;
            float* dp = dx.sample(n) + c * plane;
            const float s = gate_.at(n, c, 0, 0);
            float acc = 0.0f;
            for (std::size_t i = 0; i < plane; ++i) {
                acc += gp[i] * xp[i];
                dp[i] = gp[i] * s;
            }
            dgate.at(n, c, 0, 0) = acc;
        }
    const Tensor dpooled = reduce_.backward(act_.backward(expand_.backward(gate_act_.backward(dgate))));
    for (int n = 0; n < x.n(); ++n)
        for (int c = 0; c < x.c(); ++c) {
            float* dp = dx.sample(n) + c * plane;
            const float share = dpooled.at(n, c, 0, 0) / static_cast<float>(plane);
            for (std::size_t i = 0; i < plane; ++i) dp[i] += share;
        }
    return dx;
}

void initialize(Layer& layer, std::mt19937_64& rng) {
    std::vector<Parameter*> params;
    std::vector<Buffer*> buffers;
    layer.collect("", params, buffers);
    for (auto* p : params) {
        switch (p->init) {
            case Parameter::Init::zeros: p->value.fill(0.0f); break;
            case Parameter::Init::ones: p->value.fill(1.0f); break;
            case Parameter::Init::kaiming: {
                std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(p->fan_in)));
                for (auto& v : p->value.values()) v = dist(rng);
                break;
            }
        }
        p->grad.fill(0.0f);
    }
}

}  // namespace flankid::nn
