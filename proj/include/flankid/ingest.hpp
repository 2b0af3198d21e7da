#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flankid {

enum class Side { left, right, unknown };
enum class Split { train, test, unassigned };

std::string_view to_string(Side side);
std::string_view to_string(Split split);
std::optional<Side> parse_side(std::string_view text);
std::optional<Split> parse_split(std::string_view text);

// Class label for one coat side of one animal. Left and right flanks carry
// independent patterns, so each is its own identity class.
std::string make_flank_id(std::string_view individual_id, Side side);

struct ImageRecord {
    std::string image_id;
    std::string individual_id;
    Side side = Side::unknown;
    std::string flank_id;
    std::string uri;
    Split split = Split::unassigned;
};

class Manifest {
public:
    Manifest() = default;
    // Rebuilds the class index from the records. Throws ValidationError on a
    // duplicated image_id.
    explicit Manifest(std::vector<ImageRecord> records, std::filesystem::path base_dir = {});

    const std::vector<ImageRecord>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    bool empty() const noexcept { return records_.empty(); }

    // Number of distinct flank ids (C).
    std::size_t num_classes() const noexcept { return class_index_.size(); }
    const std::map<std::string, int>& class_index() const noexcept { return class_index_; }
    int class_of(const std::string& flank_id) const;
    int label_of(const ImageRecord& record) const { return class_of(record.flank_id); }

    const ImageRecord* find(const std::string& image_id) const;
    std::map<std::string, std::size_t> flank_counts() const;

    // Directory that relative uris resolve against.
    const std::filesystem::path& base_dir() const noexcept { return base_dir_; }
    std::filesystem::path resolve(const ImageRecord& record) const;

    Manifest filter(const std::function<bool(const ImageRecord&)>& keep) const;
    Manifest with_split(Split split) const;

private:
    std::vector<ImageRecord> records_;
    std::map<std::string, int> class_index_;
    std::map<std::string, std::size_t> by_image_id_;
    std::filesystem::path base_dir_;
};

struct LoadOptions {
    // Reject train/test records whose uri cannot be opened.
    bool require_readable_uris = false;
};

Manifest parse_manifest(std::istream& in, std::filesystem::path base_dir = {},
                        const LoadOptions& options = {});
Manifest load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
void write_manifest(const Manifest& manifest, std::ostream& out);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Assigns whole flanks to train or test. Exactly round(test_fraction * C)
// flanks go to test; the draw depends only on (flank set, seed).
Manifest split_by_flank(const Manifest& manifest, double test_fraction, std::uint64_t seed);

// Removes flanks that own a single image.
Manifest drop_singletons(const Manifest& manifest);

}  // namespace flankid
