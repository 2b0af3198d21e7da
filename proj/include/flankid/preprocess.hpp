#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

namespace flankid {

// Pixel box in source-image coordinates, half-open: [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    int width() const noexcept { return x_max - x_min; }
    int height() const noexcept { return y_max - y_min; }
    bool operator==(const BoundingBox&) const = default;
};

enum class Equalization { global, adaptive };

struct PreprocessConfig {
    int height = 256;
    int width = 512;
    bool use_background_removal = false;
    // Executable implementing the matting contract: `<exe> <in.png> <out_rgba.png>`.
    std::string background_stage;
    Equalization equalization = Equalization::global;
    int gaussian_kernel = 5;
    double gaussian_sigma = 1.0;
    double canny_low = 50.0;
    double canny_high = 150.0;
    double rotation_max_deg = 10.0;
    double crop_max_fraction = 0.10;
    double jitter_brightness = 0.1;
    double jitter_contrast = 0.1;
    double jitter_saturation = 0.1;
    std::array<float, 4> channel_means{0.485f, 0.456f, 0.406f, 0.5f};
    std::array<float, 4> channel_stds{0.229f, 0.224f, 0.225f, 0.5f};

    // Throws ConfigError on an inconsistent setting.
    void validate() const;
};

// Four planes (R, G, B, Edge), each height x width, row-major, channel-major.
// RGB values live in [0, 1] before normalization; the edge plane is {0, 1}.
class StackedInput {
public:
    static constexpr int kChannels = 4;

    StackedInput() = default;
    StackedInput(int height, int width);
    StackedInput(int height, int width, std::vector<float> data);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    float& at(int c, int y, int x) { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }
    float at(int c, int y, int x) const { return data_[c * plane_size() + static_cast<std::size_t>(y) * width_ + x]; }

    std::span<float> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    std::span<const float> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }

    const std::vector<float>& data() const noexcept { return data_; }
    std::vector<float>& data() noexcept { return data_; }

    bool operator==(const StackedInput&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

// Image I/O. Arrays are 8-bit RGB (not OpenCV's BGR) throughout the toolkit.
cv::Mat load_rgb(const std::filesystem::path& path);
cv::Mat decode_rgb(std::span<const std::uint8_t> bytes);
void save_rgb(const cv::Mat& rgb, const std::filesystem::path& path);

// Exact boxed region after clamping to the image; throws ValidationError when
// the clamped box is empty.
cv::Mat crop(const cv::Mat& image, const BoundingBox& box);

// Pluggable matting stage: returns an 8-bit RGBA image the same size as the input.
class MattingStage {
public:
    virtual ~MattingStage() = default;
    virtual cv::Mat matte(const cv::Mat& rgb) = 0;
};

// Runs `<executable> <input.png> <output.png>`; a nonzero exit is a failure.
class ExternalMattingStage : public MattingStage {
public:
    // Throws ConfigError when the executable is missing or not executable.
    explicit ExternalMattingStage(std::filesystem::path executable);
    cv::Mat matte(const cv::Mat& rgb) override;

private:
    std::filesystem::path executable_;
};

struct MattingResult {
    cv::Mat rgba;       // RGB premultiplied by alpha
    bool empty_mask = false;  // stage found no foreground; rgba holds the input unmasked
};

MattingResult remove_background(const cv::Mat& rgb, MattingStage& stage);
// Applies an RGBA matte to rgb: RGB <- round(RGB * alpha / 255).
MattingResult apply_matte(const cv::Mat& rgb, const cv::Mat& rgba);

// Grayscale -> histogram equalization -> Gaussian blur -> Canny. Values {0, 1}, CV_8U.
cv::Mat edge_channel(const cv::Mat& rgb, const PreprocessConfig& cfg);

// Resizes RGB and edge planes to the configured size. The edge plane is
// resampled bilinearly and re-thresholded at 0.5.
StackedInput stack_and_resize(const cv::Mat& rgb, const cv::Mat& edge, const PreprocessConfig& cfg);

struct AugmentDraw {
    double rotation_deg = 0.0;
    // Fraction of width/height removed at each side.
    double crop_left = 0.0, crop_right = 0.0, crop_top = 0.0, crop_bottom = 0.0;
    double brightness = 1.0, contrast = 1.0, saturation = 1.0;
};

AugmentDraw draw_augmentation(const PreprocessConfig& cfg, std::mt19937_64& rng);
StackedInput apply_augmentation(const StackedInput& input, const AugmentDraw& draw);
StackedInput augment(const StackedInput& input, const PreprocessConfig& cfg, std::mt19937_64& rng);

// channel c <- (channel c - mean_c) / std_c. Throws ConfigError on a zero std.
StackedInput normalize(const StackedInput& input, const PreprocessConfig& cfg);

// Detections file produced by an external detector, one JSON object per line.
struct Detection {
    BoundingBox box;
    double score = 0.0;
};
using DetectionTable = std::map<std::string, std::vector<Detection>>;

DetectionTable load_detections(const std::filesystem::path& path);
// Highest-scoring box for the image, if any.
std::optional<BoundingBox> best_box(const DetectionTable& table, const std::string& image_id);

struct PreprocessOutcome {
    StackedInput input;
    bool matting_failed = false;
};

// crop -> optional matting -> edge channel -> stack and resize. The edge plane
// is computed from the cropped image unless matting is enabled and succeeded.
PreprocessOutcome preprocess_image(const cv::Mat& rgb, const std::optional<BoundingBox>& box,
                                   const PreprocessConfig& cfg, MattingStage* matting = nullptr);

}  // namespace flankid
