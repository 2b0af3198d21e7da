#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "flankid/ingest.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "flankid") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Manifest with `counts[i]` images of individual "id<i>", left side, train split.
inline flankid::Manifest manifest_with_counts(const std::vector<int>& counts,
                                              flankid::Split split = flankid::Split::train) {
    std::vector<flankid::ImageRecord> records;
    for (std::size_t i = 0; i < counts.size(); ++i)
        for (int j = 0; j < counts[i]; ++j) {
            flankid::ImageRecord r;
            r.individual_id = "id" + std::to_string(i);
            r.side = flankid::Side::left;
            r.flank_id = flankid::make_flank_id(r.individual_id, r.side);
            r.image_id = r.individual_id + "_" + std::to_string(j);
            r.uri = r.image_id + ".png";
            r.split = split;
            records.push_back(r);
        }
    return flankid::Manifest(std::move(records));
}

}  // namespace testing_support
