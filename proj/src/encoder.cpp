#include "flankid/encoder.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <cmath>

namespace flankid {

using namespace nn;

std::string_view to_string(Backbone backbone) {
    switch (backbone) {
        case Backbone::small_cnn: return "small_cnn";
        case Backbone::resnet18_class: return "resnet18_class";
        case Backbone::effnetv2b2_class: return "effnetv2b2_class";
    }
    return "small_cnn";
}

std::optional<Backbone> parse_backbone(std::string_view text) {
    if (text == "small_cnn") return Backbone::small_cnn;
    if (text == "resnet18_class") return Backbone::resnet18_class;
    if (text == "effnetv2b2_class") return Backbone::effnetv2b2_class;
    return std::nullopt;
}

std::string_view to_string(StemAdaptation mode) {
    return mode == StemAdaptation::average_rgb_into_new_channel ? "average_rgb_into_new_channel"
                                                                : "random_init_new_channel";
}

std::optional<StemAdaptation> parse_stem_adaptation(std::string_view text) {
    if (text == "average_rgb_into_new_channel") return StemAdaptation::average_rgb_into_new_channel;
    if (text == "random_init_new_channel") return StemAdaptation::random_init_new_channel;
    return std::nullopt;
}

void EncoderConfig::validate() const {
    if (embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
    if (input_channels != 4) throw ConfigError("encoder input must have 4 channels (RGB + edge)");
}

std::vector<float> adapt_stem_weight(const std::vector<float>& rgb_weight, int out_channels, int kernel,
                                     StemAdaptation mode, std::mt19937_64& rng) {
    const std::size_t kk = static_cast<std::size_t>(kernel) * kernel;
    if (rgb_weight.size() != static_cast<std::size_t>(out_channels) * 3 * kk)
        throw ShapeError("stem weight is not out x 3 x k x k");
    std::vector<float> widened(static_cast<std::size_t>(out_channels) * 4 * kk);
    std::normal_distribution<float> fresh(0.0f, std::sqrt(2.0f / static_cast<float>(4 * kk)));
    for (int o = 0; o < out_channels; ++o) {
        const float* src = rgb_weight.data() + static_cast<std::size_t>(o) * 3 * kk;
        float* dst = widened.data() + static_cast<std::size_t>(o) * 4 * kk;
        std::copy(src, src + 3 * kk, dst);
        for (std::size_t i = 0; i < kk; ++i) {
            dst[3 * kk + i] = mode == StemAdaptation::average_rgb_into_new_channel
                                  ? (src[i] + src[kk + i] + src[2 * kk + i]) / 3.0f
                                  : fresh(rng);
        }
    }
    return widened;
}

namespace {

std::unique_ptr<Sequential> seq() { return std::make_unique<Sequential>(); }

void conv_bn(Sequential& s, int in, int out, int k, int stride, bool silu_act, bool relu_act = false) {
    s.emplace<Conv2d>(in, out, k, stride, k / 2, false);
    s.emplace<BatchNorm2d>(out);
    if (silu_act) s.emplace<SiLU>();
    if (relu_act) s.emplace<ReLU>();
}

int build_small_cnn(Sequential& net) {
    const int widths[] = {16, 32, 64, 64};
    int in = 3;
    for (int w : widths) {
        net.emplace<Conv2d>(in, w, 3, 1, 1, false);
        net.emplace<BatchNorm2d>(w);
        net.emplace<ReLU>();
        net.emplace<MaxPool2d>(2, 2);
        in = w;
    }
    net.emplace<AdaptiveAvgPool2d>(4, 8);
    net.emplace<Flatten>();
    return in * 4 * 8;
}

LayerPtr basic_block(int in, int out, int stride) {
    auto main = seq();
    conv_bn(*main, in, out, 3, stride, false, true);
    conv_bn(*main, out, out, 3, 1, false);
    auto shortcut = seq();
    if (stride != 1 || in != out) {
        shortcut->emplace<Conv2d>(in, out, 1, stride, 0, false);
        shortcut->emplace<BatchNorm2d>(out);
    }
    return std::make_unique<Residual>(std::move(main), std::move(shortcut), std::make_unique<ReLU>());
}

int build_resnet18(Sequential& net) {
    net.emplace<Conv2d>(3, 64, 7, 2, 3, false);
    net.emplace<BatchNorm2d>(64);
    net.emplace<ReLU>();
    net.emplace<MaxPool2d>(3, 2, 1);
    int in = 64;
    const int widths[] = {64, 128, 256, 512};
    for (int s = 0; s < 4; ++s) {
        net.add(basic_block(in, widths[s], s == 0 ? 1 : 2));
        net.add(basic_block(widths[s], widths[s], 1));
        in = widths[s];
    }
    net.emplace<AdaptiveAvgPool2d>(1, 1);
    net.emplace<Flatten>();
    return in;
}

LayerPtr fused_mbconv(int in, int out, int expand, int stride) {
    auto main = seq();
    if (expand == 1) {
        conv_bn(*main, in, out, 3, stride, true);
    } else {
        conv_bn(*main, in, in * expand, 3, stride, true);
        conv_bn(*main, in * expand, out, 1, 1, false);
    }
    if (stride == 1 && in == out) return std::make_unique<Residual>(std::move(main), nullptr);
    return main;
}

LayerPtr mbconv(int in, int out, int expand, int stride) {
    auto main = seq();
    const int mid = in * expand;
    conv_bn(*main, in, mid, 1, 1, true);
    main->emplace<Conv2d>(mid, mid, 3, stride, 1, false, mid);
    main->emplace<BatchNorm2d>(mid);
    main->emplace<SiLU>();
    main->emplace<SqueezeExcite>(mid, std::max(1, in / 4));
    conv_bn(*main, mid, out, 1, 1, false);
    if (stride == 1 && in == out) return std::make_unique<Residual>(std::move(main), nullptr);
    return main;
}

int build_effnetv2b2(Sequential& net) {
    struct Stage {
        bool fused;
        int expand, stride, out, repeats;
    };
    const Stage stages[] = {{true, 1, 1, 16, 2},  {true, 4, 2, 32, 3},  {true, 4, 2, 56, 3},
                            {false, 4, 2, 104, 4}, {false, 6, 1, 120, 6}, {false, 6, 2, 208, 10}};
    conv_bn(net, 3, 32, 3, 2, true);
    int in = 32;
    for (const auto& st : stages) {
        for (int r = 0; r < st.repeats; ++r) {
            const int stride = r == 0 ? st.stride : 1;
            net.add(st.fused ? fused_mbconv(in, st.out, st.expand, stride) : mbconv(in, st.out, st.expand, stride));
            in = st.out;
        }
    }
    conv_bn(net, in, 1408, 1, 1, true);
    net.emplace<AdaptiveAvgPool2d>(1, 1);
    net.emplace<Flatten>();
    return 1408;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    int features = 0;
    switch (cfg_.backbone) {
        case Backbone::small_cnn: features = build_small_cnn(net_); break;
        case Backbone::resnet18_class: features = build_resnet18(net_); break;
        case Backbone::effnetv2b2_class: features = build_effnetv2b2(net_); break;
    }
    net_.emplace<Linear>(features, cfg_.embedding_dim);

    std::mt19937_64 rng(seed);
    initialize(net_, rng);
    // Every backbone starts with an RGB convolution; widen it for the edge plane.
    auto& stem = dynamic_cast<Conv2d&>(net_[0]);
    stem.widen_input(cfg_.input_channels, adapt_stem_weight(stem.weight().value.values(), stem.out_channels(),
                                                            stem.kernel(), cfg_.stem_adaptation, rng));
    net_.collect("", params_, buffers_);
}

nn::Tensor Encoder::forward(const nn::Tensor& x, bool training) {
    if (x.c() != cfg_.input_channels) throw ShapeError("encoder expects 4-channel input");
    return net_.forward(x, training);
}

nn::Tensor Encoder::backward(const nn::Tensor& grad) { return net_.backward(grad); }

std::size_t Encoder::parameter_count() const {
    std::size_t total = 0;
    for (const auto* p : params_) total += p->value.size();
    return total;
}

void Encoder::zero_grad() {
    for (auto* p : params_) p->grad.fill(0.0f);
}

std::unique_ptr<Encoder> build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
    return std::make_unique<Encoder>(cfg, seed);
}

nn::Tensor to_batch(const std::vector<StackedInput>& inputs) {
    if (inputs.empty()) return {};
    const int h = inputs.front().height(), w = inputs.front().width();
    nn::Tensor t(static_cast<int>(inputs.size()), StackedInput::kChannels, h, w);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].height() != h || inputs[i].width() != w) throw ShapeError("batch inputs differ in size");
        std::copy(inputs[i].data().begin(), inputs[i].data().end(), t.sample(static_cast<int>(i)));
    }
    return t;
}

}  // namespace flankid
