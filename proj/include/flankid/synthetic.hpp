#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "flankid/ingest.hpp"
#include "flankid/preprocess.hpp"

namespace flankid {

// Toy flanks: every individual owns a fixed layout of rosettes and spots;
// each view re-renders it under a random similarity transform, lighting,
// background and sensor noise.
struct SyntheticConfig {
    int individuals = 40;
    int views = 8;
    int canvas_height = 120;
    int canvas_width = 220;
    int rosettes_min = 10;
    int rosettes_max = 16;
    int spots_min = 8;
    int spots_max = 14;
    double max_rotation_deg = 8.0;
    double max_scale_change = 0.08;
    double max_shift = 0.05;  // fraction of the flank size
    double noise_sigma = 6.0;
    std::uint64_t seed = 0;
};

struct SyntheticView {
    ImageRecord record;
    cv::Mat rgb;
    BoundingBox box;  // flank region inside the canvas
};

// Individuals "ind000".."indNNN", all left flanks, image ids "<ind>_vNN".
std::vector<SyntheticView> render_synthetic(const SyntheticConfig& cfg);

// Writes images/<id>.png, manifest.jsonl and detections.jsonl under dir.
Manifest write_synthetic(const SyntheticConfig& cfg, const std::filesystem::path& dir);

// Runs every view through preprocess_image with its box.
std::map<std::string, StackedInput> preprocess_views(const std::vector<SyntheticView>& views,
                                                     const PreprocessConfig& cfg);

Manifest synthetic_manifest(const std::vector<SyntheticView>& views);

}  // namespace flankid
