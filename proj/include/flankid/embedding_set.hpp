#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace flankid {

// One D-dimensional vector per image, rows aligned with image_ids.
struct EmbeddingSet {
    std::vector<std::string> image_ids;
    Eigen::MatrixXd vectors;  // count x D
    bool normalized = false;

    std::size_t size() const noexcept { return image_ids.size(); }
    int dim() const noexcept { return static_cast<int>(vectors.cols()); }
    // Row index of an image id; throws NotFoundError.
    std::size_t index_of(const std::string& image_id) const;
};

// EmbeddingSet file, little-endian:
//   char[4] "FKEM", uint32 version (1), uint64 count, uint32 D, uint8 normalized,
//   then per record: uint32 id byte length, id bytes, D x float32.
void write_embedding_set(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet read_embedding_set(const std::filesystem::path& path);

}  // namespace flankid
