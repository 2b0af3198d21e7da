#include "flankid/preprocess.hpp"

#include "flankid/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

extern char** environ;

namespace flankid {

void PreprocessConfig::validate() const {
    if (height <= 0 || width <= 0) throw ConfigError("target size must be positive");
    if (!(canny_low < canny_high)) throw ConfigError("canny_low must be below canny_high");
    if (rotation_max_deg < 0.0) throw ConfigError("rotation_max_deg must be >= 0");
    if (!(crop_max_fraction >= 0.0 && crop_max_fraction < 0.5))
        throw ConfigError("crop_max_fraction must lie in [0, 0.5)");
    if (gaussian_kernel < 1 || gaussian_kernel % 2 == 0)
        throw ConfigError("gaussian_kernel must be a positive odd integer");
    if (gaussian_sigma < 0.0) throw ConfigError("gaussian_sigma must be >= 0");
    if (jitter_brightness < 0.0 || jitter_contrast < 0.0 || jitter_saturation < 0.0 ||
        jitter_brightness >= 1.0 || jitter_contrast >= 1.0 || jitter_saturation >= 1.0)
        throw ConfigError("colour jitter strengths must lie in [0, 1)");
    if (use_background_removal && background_stage.empty())
        throw ConfigError("background removal enabled without a background_stage executable");
}

StackedInput::StackedInput(int height, int width)
    : height_(height), width_(width), data_(static_cast<std::size_t>(kChannels) * height * width, 0.0f) {}

StackedInput::StackedInput(int height, int width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(kChannels) * height * width)
        throw ShapeError("stacked input buffer does not match 4 x H x W");
}

cv::Mat load_rgb(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("cannot decode image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

cv::Mat decode_rgb(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw Error("empty image payload");
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("undecodable image payload");
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

void save_rgb(const cv::Mat& rgb, const std::filesystem::path& path) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write image " + path.string());
}

cv::Mat crop(const cv::Mat& image, const BoundingBox& box) {
    const int x0 = std::clamp(box.x_min, 0, image.cols);
    const int x1 = std::clamp(box.x_max, 0, image.cols);
    const int y0 = std::clamp(box.y_min, 0, image.rows);
    const int y1 = std::clamp(box.y_max, 0, image.rows);
    if (x0 >= x1 || y0 >= y1) throw ValidationError("bounding box is degenerate after clamping");
    return image(cv::Rect(x0, y0, x1 - x0, y1 - y0)).clone();
}

// ---- matting ---------------------------------------------------------------

ExternalMattingStage::ExternalMattingStage(std::filesystem::path executable)
    : executable_(std::move(executable)) {
    if (executable_.empty() || ::access(executable_.c_str(), X_OK) != 0)
        throw ConfigError("background removal stage unavailable: " + executable_.string());
}

namespace {

std::filesystem::path scratch_path(const char* tag) {
    static std::atomic<unsigned> counter{0};
    return std::filesystem::temp_directory_path() /
           ("flankid-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + tag);
}

}  // namespace

cv::Mat ExternalMattingStage::matte(const cv::Mat& rgb) {
    const auto in_path = scratch_path("-in.png");
    const auto out_path = scratch_path("-out.png");
    save_rgb(rgb, in_path);

    std::string exe = executable_.string(), in = in_path.string(), out = out_path.string();
    char* argv[] = {exe.data(), in.data(), out.data(), nullptr};
    pid_t pid = 0;
    int status = 0;
    const int rc = ::posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv, environ);
    if (rc == 0) ::waitpid(pid, &status, 0);
    std::filesystem::remove(in_path);
    if (rc != 0 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        std::filesystem::remove(out_path);
        throw Error("background removal stage failed: " + exe);
    }

    cv::Mat bgra = cv::imread(out, cv::IMREAD_UNCHANGED);
    std::filesystem::remove(out_path);
    if (bgra.empty() || bgra.size() != rgb.size())
        throw Error("background removal stage produced an unusable image");
    cv::Mat rgba;
    if (bgra.channels() == 4) {
        cv::cvtColor(bgra, rgba, cv::COLOR_BGRA2RGBA);
    } else {
        cv::cvtColor(bgra, rgba, bgra.channels() == 3 ? cv::COLOR_BGR2RGBA : cv::COLOR_GRAY2RGBA);
    }
    return rgba;
}

MattingResult apply_matte(const cv::Mat& rgb, const cv::Mat& rgba) {
    if (rgba.type() != CV_8UC4 || rgb.type() != CV_8UC3 || rgba.size() != rgb.size())
        throw ShapeError("matte must be 8-bit RGBA matching the RGB image");
    MattingResult result;
    std::vector<cv::Mat> planes;
    cv::split(rgba, planes);
    if (cv::countNonZero(planes[3]) == 0) {
        result.empty_mask = true;
        cv::cvtColor(rgb, result.rgba, cv::COLOR_RGB2RGBA);
        return result;
    }
    result.rgba.create(rgb.size(), CV_8UC4);
    for (int y = 0; y < rgb.rows; ++y) {
        const auto* src = rgb.ptr<cv::Vec3b>(y);
        const auto* matte = rgba.ptr<cv::Vec4b>(y);
        auto* dst = result.rgba.ptr<cv::Vec4b>(y);
        for (int x = 0; x < rgb.cols; ++x) {
            const int alpha = matte[x][3];
            for (int c = 0; c < 3; ++c) dst[x][c] = static_cast<std::uint8_t>((src[x][c] * alpha + 127) / 255);
            dst[x][3] = static_cast<std::uint8_t>(alpha);
        }
    }
    return result;
}

MattingResult remove_background(const cv::Mat& rgb, MattingStage& stage) {
    return apply_matte(rgb, stage.matte(rgb));
}

// ---- edges and stacking ----------------------------------------------------

cv::Mat edge_channel(const cv::Mat& rgb, const PreprocessConfig& cfg) {
    cv::Mat gray;
    cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
    cv::Mat equalized;
    if (cfg.equalization == Equalization::global) {
        cv::equalizeHist(gray, equalized);
    } else {
        auto clahe = cv::createCLAHE(2.0, cv::Size(8, 8));
        clahe->apply(gray, equalized);
    }
    cv::Mat blurred;
    cv::GaussianBlur(equalized, blurred, cv::Size(cfg.gaussian_kernel, cfg.gaussian_kernel), cfg.gaussian_sigma);
    cv::Mat edges;
    cv::Canny(blurred, edges, cfg.canny_low, cfg.canny_high);
    cv::Mat binary;
    cv::threshold(edges, binary, 0, 1, cv::THRESH_BINARY);
    return binary;
}

StackedInput stack_and_resize(const cv::Mat& rgb, const cv::Mat& edge, const PreprocessConfig& cfg) {
    if (rgb.size() != edge.size()) throw ShapeError("rgb and edge planes differ in size");
    if (rgb.type() != CV_8UC3) throw ShapeError("rgb plane must be 8-bit 3-channel");

    const cv::Size target(cfg.width, cfg.height);
    cv::Mat rgb_f;
    rgb.convertTo(rgb_f, CV_32FC3, 1.0 / 255.0);
    cv::Mat edge_f;
    edge.convertTo(edge_f, CV_32F);
    if (rgb_f.size() != target) {
        cv::resize(rgb_f, rgb_f, target, 0, 0, cv::INTER_LINEAR);
        cv::resize(edge_f, edge_f, target, 0, 0, cv::INTER_LINEAR);
    }

    StackedInput out(cfg.height, cfg.width);
    for (int y = 0; y < cfg.height; ++y) {
        const auto* px = rgb_f.ptr<cv::Vec3f>(y);
        const auto* ex = edge_f.ptr<float>(y);
        for (int x = 0; x < cfg.width; ++x) {
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = px[x][c];
            out.at(3, y, x) = ex[x] >= 0.5f ? 1.0f : 0.0f;
        }
    }
    return out;
}

// ---- augmentation ----------------------------------------------------------

AugmentDraw draw_augmentation(const PreprocessConfig& cfg, std::mt19937_64& rng) {
    auto uniform = [&rng](double lo, double hi) {
        return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    AugmentDraw d;
    d.rotation_deg = uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
    d.crop_left = uniform(0.0, cfg.crop_max_fraction);
    d.crop_right = uniform(0.0, cfg.crop_max_fraction);
    d.crop_top = uniform(0.0, cfg.crop_max_fraction);
    d.crop_bottom = uniform(0.0, cfg.crop_max_fraction);
    d.brightness = uniform(1.0 - cfg.jitter_brightness, 1.0 + cfg.jitter_brightness);
    d.contrast = uniform(1.0 - cfg.jitter_contrast, 1.0 + cfg.jitter_contrast);
    d.saturation = uniform(1.0 - cfg.jitter_saturation, 1.0 + cfg.jitter_saturation);
    return d;
}

namespace {

bool is_geometric_identity(const AugmentDraw& d) {
    return d.rotation_deg == 0.0 && d.crop_left == 0.0 && d.crop_right == 0.0 && d.crop_top == 0.0 &&
           d.crop_bottom == 0.0;
}

// Affine map from output pixel coordinates to input pixel coordinates.
cv::Mat inverse_warp(const AugmentDraw& d, int height, int width) {
    const double x0 = d.crop_left * width, x1 = width - d.crop_right * width;
    const double y0 = d.crop_top * height, y1 = height - d.crop_bottom * height;
    const double sx = (x1 - x0) / width, sy = (y1 - y0) / height;
    const double cx_in = (x0 + x1 - 1.0) / 2.0, cy_in = (y0 + y1 - 1.0) / 2.0;
    const double cx_out = (width - 1.0) / 2.0, cy_out = (height - 1.0) / 2.0;
    const double theta = d.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), s = std::sin(theta);
    // [a b; d e] = R(theta) * diag(sx, sy)
    const double a = c * sx, b = -s * sy, dd = s * sx, e = c * sy;
    cv::Mat m = (cv::Mat_<double>(2, 3) << a, b, cx_in - a * cx_out - b * cy_out,
                                           dd, e, cy_in - dd * cx_out - e * cy_out);
    return m;
}

}  // namespace

StackedInput apply_augmentation(const StackedInput& input, const AugmentDraw& d) {
    const int h = input.height(), w = input.width();
    StackedInput out = input;
    if (!is_geometric_identity(d)) {
        const cv::Mat m = inverse_warp(d, h, w);
        for (int c = 0; c < StackedInput::kChannels; ++c) {
            cv::Mat src(h, w, CV_32F, const_cast<float*>(input.plane(c).data()));
            cv::Mat dst(h, w, CV_32F, out.plane(c).data());
            // Edge pixels move to their nearest destination so the plane stays binary.
            const int interp = c == 3 ? cv::INTER_NEAREST : cv::INTER_LINEAR;
            cv::warpAffine(src, dst, m, cv::Size(w, h), interp | cv::WARP_INVERSE_MAP, cv::BORDER_CONSTANT, 0.0);
        }
        for (float& v : out.plane(3)) v = v >= 0.5f ? 1.0f : 0.0f;
    }

    if (d.brightness != 1.0 || d.contrast != 1.0 || d.saturation != 1.0) {
        auto r = out.plane(0), g = out.plane(1), b = out.plane(2);
        const std::size_t n = out.plane_size();
        const auto luma = [&](std::size_t i) { return 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i]; };
        const float bright = static_cast<float>(d.brightness);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] *= bright;
            g[i] *= bright;
            b[i] *= bright;
        }
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += luma(i);
        mean /= static_cast<double>(n);
        const float contrast = static_cast<float>(d.contrast), m = static_cast<float>(mean);
        const float sat = static_cast<float>(d.saturation);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = (r[i] - m) * contrast + m;
            g[i] = (g[i] - m) * contrast + m;
            b[i] = (b[i] - m) * contrast + m;
            const float y = luma(i);
            r[i] = std::clamp(y + sat * (r[i] - y), 0.0f, 1.0f);
            g[i] = std::clamp(y + sat * (g[i] - y), 0.0f, 1.0f);
            b[i] = std::clamp(y + sat * (b[i] - y), 0.0f, 1.0f);
        }
    }
    return out;
}

StackedInput augment(const StackedInput& input, const PreprocessConfig& cfg, std::mt19937_64& rng) {
    return apply_augmentation(input, draw_augmentation(cfg, rng));
}

StackedInput normalize(const StackedInput& input, const PreprocessConfig& cfg) {
    for (float s : cfg.channel_stds)
        if (s == 0.0f) throw ConfigError("channel std must be nonzero");
    StackedInput out = input;
    for (int c = 0; c < StackedInput::kChannels; ++c) {
        const float mean = cfg.channel_means[c], inv = 1.0f / cfg.channel_stds[c];
        for (float& v : out.plane(c)) v = (v - mean) * inv;
    }
    return out;
}

// ---- detections ------------------------------------------------------------

DetectionTable load_detections(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open detections " + path.string());
    DetectionTable table;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
            const auto id = j.at("image_id").get<std::string>();
            const auto& boxes = j.at("boxes");
            std::vector<double> scores;
            if (j.contains("scores")) scores = j.at("scores").get<std::vector<double>>();
            if (!scores.empty() && scores.size() != boxes.size())
                throw ParseError("boxes and scores differ in length", line);
            auto& entry = table[id];
            for (std::size_t i = 0; i < boxes.size(); ++i) {
                const auto b = boxes[i].get<std::vector<int>>();
                if (b.size() != 4) throw ParseError("box must have 4 coordinates", line);
                entry.push_back({{b[0], b[1], b[2], b[3]}, scores.empty() ? 1.0 : scores[i]});
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed detection: ") + e.what(), line);
        }
    }
    return table;
}

std::optional<BoundingBox> best_box(const DetectionTable& table, const std::string& image_id) {
    auto it = table.find(image_id);
    if (it == table.end() || it->second.empty()) return std::nullopt;
    const auto best = std::max_element(it->second.begin(), it->second.end(),
                                       [](const Detection& a, const Detection& b) { return a.score < b.score; });
    return best->box;
}

PreprocessOutcome preprocess_image(const cv::Mat& rgb, const std::optional<BoundingBox>& box,
                                   const PreprocessConfig& cfg, MattingStage* matting) {
    cfg.validate();
    cv::Mat cropped = box ? crop(rgb, *box) : rgb;
    PreprocessOutcome outcome;
    cv::Mat model_rgb = cropped;
    if (cfg.use_background_removal) {
        if (!matting) throw ConfigError("background removal enabled without a matting stage");
        auto matted = remove_background(cropped, *matting);
        outcome.matting_failed = matted.empty_mask;
        cv::cvtColor(matted.rgba, model_rgb, cv::COLOR_RGBA2RGB);
    }
    const cv::Mat edge = edge_channel(model_rgb, cfg);
    outcome.input = stack_and_resize(model_rgb, edge, cfg);
    return outcome;
}

}  // namespace flankid
