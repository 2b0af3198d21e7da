#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "flankid/nn.hpp"
#include "flankid/preprocess.hpp"

namespace flankid {

enum class Backbone { small_cnn, resnet18_class, effnetv2b2_class };
enum class StemAdaptation { average_rgb_into_new_channel, random_init_new_channel };

std::string_view to_string(Backbone backbone);
std::optional<Backbone> parse_backbone(std::string_view text);
std::string_view to_string(StemAdaptation mode);
std::optional<StemAdaptation> parse_stem_adaptation(std::string_view text);

struct EncoderConfig {
    Backbone backbone = Backbone::small_cnn;
    int embedding_dim = 1028;
    int input_channels = 4;
    StemAdaptation stem_adaptation = StemAdaptation::average_rgb_into_new_channel;

    void validate() const;
};

// Weight for a stem convolution that accepts one more input channel than
// `rgb_weight` (out x 3 x k x k). The extra channel is either the mean of the
// RGB filters or a fresh Kaiming draw.
std::vector<float> adapt_stem_weight(const std::vector<float>& rgb_weight, int out_channels, int kernel,
                                     StemAdaptation mode, std::mt19937_64& rng);

// Convolutional backbone followed by a fully connected embedding layer. The
// stem is built for RGB and then widened to the 4-channel input.
class Encoder {
public:
    Encoder(const EncoderConfig& cfg, std::uint64_t seed);
    Encoder(const Encoder&) = delete;
    Encoder& operator=(const Encoder&) = delete;

    // x: N x 4 x H x W  ->  N x D x 1 x 1
    nn::Tensor forward(const nn::Tensor& x, bool training);
    nn::Tensor backward(const nn::Tensor& grad);

    const EncoderConfig& config() const noexcept { return cfg_; }
    const std::vector<nn::Parameter*>& parameters() const noexcept { return params_; }
    const std::vector<nn::Buffer*>& buffers() const noexcept { return buffers_; }
    std::size_t parameter_count() const;
    void zero_grad();

private:
    EncoderConfig cfg_;
    nn::Sequential net_;
    std::vector<nn::Parameter*> params_;
    std::vector<nn::Buffer*> buffers_;
};

std::unique_ptr<Encoder> build_encoder(const EncoderConfig& cfg, std::uint64_t seed);

// Packs stacked inputs into one N x 4 x H x W tensor; all inputs must share a size.
nn::Tensor to_batch(const std::vector<StackedInput>& inputs);

}  // namespace flankid
