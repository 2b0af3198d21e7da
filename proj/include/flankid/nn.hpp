#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace flankid::nn {

// Dense float tensor in NCHW layout. Vectors are stored as (N, F, 1, 1).
class Tensor {
public:
    Tensor() = default;
    Tensor(int n, int c, int h, int w, float fill = 0.0f);

    int n() const noexcept { return shape_[0]; }
    int c() const noexcept { return shape_[1]; }
    int h() const noexcept { return shape_[2]; }
    int w() const noexcept { return shape_[3]; }
    const std::array<int, 4>& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    // Elements per sample.
    std::size_t stride() const noexcept { return static_cast<std::size_t>(c()) * h() * w(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    float* sample(int i) noexcept { return data_.data() + i * stride(); }
    const float* sample(int i) const noexcept { return data_.data() + i * stride(); }
    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& at(int n, int c, int y, int x) noexcept { return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x]; }
    float at(int n, int c, int y, int x) const noexcept { return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x]; }

    std::vector<float>& values() noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    void fill(float v);
    // Same data, new shape of equal element count.
    Tensor reshaped(int n, int c, int h, int w) const;
    Tensor& operator+=(const Tensor& other);
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

private:
    std::array<int, 4> shape_{0, 0, 0, 0};
    std::vector<float> data_;
};

struct Parameter {
    enum class Init { kaiming, zeros, ones };

    std::string name;
    Tensor value;
    Tensor grad;
    Init init = Init::zeros;
    int fan_in = 1;
};

// Non-trainable state carried in checkpoints (batch-norm running statistics).
struct Buffer {
    std::string name;
    Tensor value;
};

class Layer {
public:
    virtual ~Layer() = default;
    // Caches what backward needs; `training` selects batch statistics in norms.
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    // Accumulates parameter gradients and returns the gradient w.r.t. the input
    // of the most recent forward call.
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers);
    virtual std::string kind() const = 0;
};

using LayerPtr = std::unique_ptr<Layer>;

class Conv2d : public Layer {
public:
    // groups must be 1 or equal to in_channels == out_channels (depthwise).
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias, int groups = 1);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "conv2d"; }

    Parameter& weight() { return weight_; }
    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int kernel() const { return k_; }
    // Replaces the weight with an out x channels x k x k array.
    void widen_input(int channels, std::vector<float> new_weight);

private:
    int in_, out_, k_, stride_, pad_, groups_;
    bool has_bias_;
    Parameter weight_;  // out x (in/groups) x k x k
    Parameter bias_;    // out
    Tensor input_;
    int out_h_ = 0, out_w_ = 0;

    void forward_dense(const Tensor& x, Tensor& y);
    void forward_depthwise(const Tensor& x, Tensor& y);
    Tensor backward_dense(const Tensor& g);
    Tensor backward_depthwise(const Tensor& g);
};

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(int channels, float momentum = 0.1f, float eps = 1e-5f);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "batchnorm2d"; }

private:
    int channels_;
    float momentum_, eps_;
    Parameter gamma_, beta_;
    Buffer running_mean_, running_var_;
    Tensor xhat_;
    std::vector<float> inv_std_;
    bool last_training_ = false;
};

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "relu"; }

private:
    Tensor input_;
};

class SiLU : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "silu"; }

private:
    Tensor input_;
};

class Sigmoid : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "sigmoid"; }

private:
    Tensor output_;
};

class MaxPool2d : public Layer {
public:
    MaxPool2d(int kernel, int stride, int padding = 0);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "maxpool2d"; }

private:
    int k_, stride_, pad_;
    std::array<int, 4> in_shape_{};
    std::vector<std::int32_t> argmax_;
};

// Averages into a fixed out_h x out_w grid using floor/ceil bin edges.
class AdaptiveAvgPool2d : public Layer {
public:
    AdaptiveAvgPool2d(int out_h, int out_w);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "adaptiveavgpool2d"; }

private:
    int oh_, ow_;
    std::array<int, 4> in_shape_{};
};

class Flatten : public Layer {
public:
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::string kind() const override { return "flatten"; }

private:
    std::array<int, 4> in_shape_{};
};

class Linear : public Layer {
public:
    Linear(int in_features, int out_features, bool bias = true);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "linear"; }

private:
    int in_, out_;
    bool has_bias_;
    Parameter weight_;  // out x in
    Parameter bias_;
    Tensor input_;
};

class Sequential : public Layer {
public:
    Sequential() = default;
    Sequential& add(LayerPtr layer);
    template <typename L, typename... Args>
    L& emplace(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "sequential"; }

    std::size_t size() const { return layers_.size(); }
    bool empty() const { return layers_.empty(); }
    Layer& operator[](std::size_t i) { return *layers_[i]; }

private:
    std::vector<LayerPtr> layers_;
};

// y = post(main(x) + shortcut(x)); an empty shortcut is the identity and an
// absent post-activation is the identity.
class Residual : public Layer {
public:
    Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut, LayerPtr post = nullptr);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "residual"; }

private:
    std::unique_ptr<Sequential> main_, shortcut_;
    LayerPtr post_;
};

// Channel attention: x * sigmoid(W2 silu(W1 mean_hw(x))).
class SqueezeExcite : public Layer {
public:
    SqueezeExcite(int channels, int reduced);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    void collect(const std::string& prefix, std::vector<Parameter*>& params, std::vector<Buffer*>& buffers) override;
    std::string kind() const override { return "squeeze_excite"; }

private:
    Linear reduce_, expand_;
    SiLU act_;
    Sigmoid gate_act_;
    Tensor input_, gate_;
};

// Kaiming-normal conv/linear weights, zero biases, unit batch-norm scales.
void initialize(Layer& layer, std::mt19937_64& rng);

}  // namespace flankid::nn
