#include "flankid/embedding_set.hpp"

#include "flankid/error.hpp"
#include "flankid/tensor_io.hpp"

#include <algorithm>

namespace flankid {

namespace {
constexpr char kMagic[4] = {'F', 'K', 'E', 'M'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::size_t EmbeddingSet::index_of(const std::string& image_id) const {
    auto it = std::find(image_ids.begin(), image_ids.end(), image_id);
    if (it == image_ids.end()) throw NotFoundError("no embedding for image '" + image_id + "'");
    return static_cast<std::size_t>(it - image_ids.begin());
}

void write_embedding_set(const std::filesystem::path& path, const EmbeddingSet& set) {
    if (static_cast<std::size_t>(set.vectors.rows()) != set.image_ids.size())
        throw ShapeError("embedding rows and image ids differ in count");
    std::string out;
    out.append(kMagic, 4);
    le::put_u32(out, kVersion);
    le::put_u64(out, set.image_ids.size());
    le::put_u32(out, static_cast<std::uint32_t>(set.vectors.cols()));
    le::put_u8(out, set.normalized ? 1 : 0);
    for (std::size_t i = 0; i < set.image_ids.size(); ++i) {
        le::put_u32(out, static_cast<std::uint32_t>(set.image_ids[i].size()));
        out += set.image_ids[i];
        for (Eigen::Index d = 0; d < set.vectors.cols(); ++d)
            le::put_f32(out, static_cast<float>(set.vectors(static_cast<Eigen::Index>(i), d)));
    }
    atomic_write(path, out);
}

EmbeddingSet read_embedding_set(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    le::Reader r(bytes);
    if (r.bytes(4) != std::string(kMagic, 4)) throw ParseError("bad embedding-set magic in " + path.string());
    if (r.u32() != kVersion) throw ParseError("unsupported embedding-set version in " + path.string());
    const auto count = r.u64();
    const auto dim = r.u32();
    EmbeddingSet set;
    set.normalized = r.u8() != 0;
    set.vectors.resize(static_cast<Eigen::Index>(count), dim);
    set.image_ids.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        set.image_ids.push_back(r.bytes(r.u32()));
        for (std::uint32_t d = 0; d < dim; ++d) set.vectors(static_cast<Eigen::Index>(i), d) = r.f32();
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes in " + path.string());
    return set;
}

}  // namespace flankid
