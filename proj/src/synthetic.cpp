#include "flankid/synthetic.hpp"

#include "flankid/error.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <opencv2/imgproc.hpp>
#include <json.hpp>

namespace flankid {

namespace {

struct Rosette {
    double u, v, radius, phase;
    int petals;
};

struct Spot {
    double u, v, radius;
};

struct Individual {
    std::string id;
    cv::Vec3d fur;
    std::vector<Rosette> rosettes;
    std::vector<Spot> spots;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Individual make_individual(int index, const SyntheticConfig& cfg, std::mt19937_64& rng) {
    Individual ind;
    char buf[16];
    std::snprintf(buf, sizeof buf, "ind%03d", index);
    ind.id = buf;
    ind.fur = {uniform(rng, 185, 220), uniform(rng, 140, 175), uniform(rng, 70, 110)};
    const int n_ros = uniform_int(rng, cfg.rosettes_min, cfg.rosettes_max);
    for (int i = 0; i < n_ros; ++i)
        ind.rosettes.push_back({uniform(rng, 0.06, 0.94), uniform(rng, 0.1, 0.9), uniform(rng, 0.07, 0.12),
                                uniform(rng, 0.0, 2.0 * M_PI), uniform_int(rng, 4, 7)});
    const int n_spots = uniform_int(rng, cfg.spots_min, cfg.spots_max);
    for (int i = 0; i < n_spots; ++i)
        ind.spots.push_back({uniform(rng, 0.03, 0.97), uniform(rng, 0.05, 0.95), uniform(rng, 0.02, 0.04)});
    return ind;
}

// Renders one view of the flank into a w x h patch.
cv::Mat render_flank(const Individual& ind, int w, int h, const SyntheticConfig& cfg, std::mt19937_64& rng) {
    const double theta = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0;
    const double scale = 1.0 + uniform(rng, -cfg.max_scale_change, cfg.max_scale_change);
    const double du = uniform(rng, -cfg.max_shift, cfg.max_shift);
    const double dv = uniform(rng, -cfg.max_shift, cfg.max_shift);
    const double ct = std::cos(theta), st = std::sin(theta);

    // Pattern coordinates are measured in flank heights so rotation keeps shapes round.
    const double aspect = static_cast<double>(w) / h;
    auto place = [&](double u, double v) {
        const double x = (u - 0.5) * aspect, y = v - 0.5;
        const double xr = scale * (ct * x - st * y) + du * aspect;
        const double yr = scale * (st * x + ct * y) + dv;
        return cv::Point2d((xr / aspect + 0.5) * w, (yr + 0.5) * h);
    };
    const auto to_px = [&](double r) { return r * scale * h; };

    const cv::Vec3d fur_jitter(uniform(rng, -8, 8), uniform(rng, -8, 8), uniform(rng, -8, 8));
    const cv::Vec3d fur = ind.fur + fur_jitter;
    cv::Mat img(h, w, CV_8UC3, cv::Scalar(fur[0], fur[1], fur[2]));
    const cv::Scalar dark(35, 28, 20);
    const cv::Scalar inner(fur[0] * 0.8, fur[1] * 0.7, fur[2] * 0.6);
    constexpr int kShift = 4;  // sub-pixel bits for the drawing calls
    const auto fixed = [](const cv::Point2d& p) {
        return cv::Point(static_cast<int>(std::lround(p.x * (1 << kShift))), static_cast<int>(std::lround(p.y * (1 << kShift))));
    };
    const auto fixed_len = [](double v) { return std::max(1, static_cast<int>(std::lround(v * (1 << kShift)))); };

    for (const auto& r : ind.rosettes) {
        const cv::Point2d c = place(r.u, r.v);
        const double rad = to_px(r.radius);
        cv::circle(img, fixed(c), fixed_len(rad * 0.75), inner, cv::FILLED, cv::LINE_AA, kShift);
        for (int k = 0; k < r.petals; ++k) {
            const double a = r.phase + 2.0 * M_PI * k / r.petals + theta;
            const cv::Point2d p(c.x + rad * std::cos(a), c.y + rad * std::sin(a));
            const double angle_deg = a * 180.0 / M_PI + 90.0;
            cv::ellipse(img, fixed(p), cv::Size(fixed_len(rad * 0.45), fixed_len(rad * 0.22)), angle_deg, 0, 360, dark,
                        cv::FILLED, cv::LINE_AA, kShift);
        }
    }
    for (const auto& s : ind.spots)
        cv::circle(img, fixed(place(s.u, s.v)), fixed_len(to_px(s.radius)), dark, cv::FILLED, cv::LINE_AA, kShift);
    return img;
}

SyntheticView render_view(const Individual& ind, int view, const SyntheticConfig& cfg, std::mt19937_64& rng) {
    const int H = cfg.canvas_height, W = cfg.canvas_width;
    const int left = uniform_int(rng, W / 40, W / 14), right = uniform_int(rng, W / 40, W / 14);
    const int top = uniform_int(rng, H / 30, H / 10), bottom = uniform_int(rng, H / 30, H / 10);
    BoundingBox box{left, top, W - right, H - bottom};

    cv::Mat canvas(H, W, CV_8UC3);
    const cv::Scalar bg(uniform(rng, 60, 120), uniform(rng, 80, 140), uniform(rng, 50, 100));
    canvas.setTo(bg);
    cv::Mat bg_noise(H, W, CV_8UC3);
    cv::randu(bg_noise, cv::Scalar::all(0), cv::Scalar::all(40));
    canvas += bg_noise;
    render_flank(ind, box.width(), box.height(), cfg, rng)
        .copyTo(canvas(cv::Rect(box.x_min, box.y_min, box.width(), box.height())));

    // Lighting and sensor noise over the whole frame.
    cv::Mat f;
    canvas.convertTo(f, CV_32FC3, uniform(rng, 0.8, 1.2), uniform(rng, -15.0, 15.0));
    cv::Mat noise(H, W, CV_32FC3);
    cv::randn(noise, cv::Scalar::all(0), cv::Scalar::all(cfg.noise_sigma));
    f += noise;
    if (uniform(rng, 0.0, 1.0) < 0.5) cv::GaussianBlur(f, f, cv::Size(3, 3), 0.8);
    f.convertTo(canvas, CV_8UC3);

    SyntheticView out;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_v%02d", ind.id.c_str(), view);
    out.record.image_id = buf;
    out.record.individual_id = ind.id;
    out.record.side = Side::left;
    out.record.flank_id = make_flank_id(ind.id, Side::left);
    out.record.uri = "images/" + out.record.image_id + ".png";
    out.rgb = canvas;
    out.box = box;
    return out;
}

}  // namespace

std::vector<SyntheticView> render_synthetic(const SyntheticConfig& cfg) {
    if (cfg.individuals < 1 || cfg.views < 1) throw ConfigError("synthetic set needs >= 1 individual and view");
    if (cfg.canvas_height < 32 || cfg.canvas_width < 32) throw ConfigError("synthetic canvas must be at least 32x32");
    std::mt19937_64 rng(cfg.seed);
    cv::setRNGSeed(static_cast<int>(cfg.seed & 0x7fffffff));
    std::vector<SyntheticView> views;
    for (int i = 0; i < cfg.individuals; ++i) {
        const Individual ind = make_individual(i, cfg, rng);
        for (int v = 0; v < cfg.views; ++v) views.push_back(render_view(ind, v, cfg, rng));
    }
    return views;
}

Manifest synthetic_manifest(const std::vector<SyntheticView>& views) {
    std::vector<ImageRecord> records;
    for (const auto& v : views) records.push_back(v.record);
    return Manifest(std::move(records));
}

Manifest write_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& dir) {
    const auto views = render_synthetic(cfg);
    std::filesystem::create_directories(dir / "images");
    std::ofstream det(dir / "detections.jsonl");
    if (!det) throw Error("cannot write " + (dir / "detections.jsonl").string());
    for (const auto& v : views) {
        save_rgb(v.rgb, dir / v.record.uri);
        const nlohmann::json line{
            {"image_id", v.record.image_id},
            {"boxes", {{v.box.x_min, v.box.y_min, v.box.x_max, v.box.y_max}}},
            {"scores", {1.0}},
        };
        det << line.dump() << '\n';
    }
    std::vector<ImageRecord> records;
    for (const auto& v : views) records.push_back(v.record);
    Manifest manifest(std::move(records), dir);
    write_manifest(manifest, dir / "manifest.jsonl");
    return manifest;
}

std::map<std::string, StackedInput> preprocess_views(const std::vector<SyntheticView>& views,
                                                     const PreprocessConfig& cfg) {
    std::map<std::string, StackedInput> out;
    for (const auto& v : views) out.emplace(v.record.image_id, preprocess_image(v.rgb, v.box, cfg).input);
    return out;
}

}  // namespace flankid
