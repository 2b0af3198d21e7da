#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flankid/preprocess.hpp"

namespace flankid {

// Preprocess cache file, little-endian:
//   offset 0  char[4]  magic "FKTN"
//   offset 4  uint8    dtype code (1 = float32)
//   offset 5  uint8    ndim
//   offset 6  uint16   reserved, zero
//   offset 8  uint32[ndim] shape, outermost first
//   then      product(shape) elements of raw data
inline constexpr char kTensorMagic[4] = {'F', 'K', 'T', 'N'};
inline constexpr std::uint8_t kDtypeFloat32 = 1;

struct TensorFile {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& tensor);
TensorFile read_tensor_file(const std::filesystem::path& path);

void write_stacked(const std::filesystem::path& path, const StackedInput& input);
StackedInput read_stacked(const std::filesystem::path& path);

// Cache location for an image id; characters outside [A-Za-z0-9._-] are %XX-escaped.
std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& image_id);

// Writes to a sibling temporary and renames it into place.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

// Little-endian primitive encoding shared by the binary formats.
namespace le {
void put_u8(std::string& out, std::uint8_t v);
void put_u16(std::string& out, std::uint16_t v);
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f32(std::string& out, float v);
void put_f64(std::string& out, double v);

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string bytes(std::size_t n);
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
    void need(std::size_t n) const;
};
}  // namespace le

std::string read_file(const std::filesystem::path& path);

}  // namespace flankid
