#include "flankid/tensor_io.hpp"

#include "flankid/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace flankid {

namespace le {

namespace {
template <typename T>
void put(std::string& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
}  // namespace

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) { put(out, v); }
void put_u32(std::string& out, std::uint32_t v) { put(out, v); }
void put_u64(std::string& out, std::uint64_t v) { put(out, v); }
void put_f32(std::string& out, float v) { put(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64(std::string& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

void Reader::need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("truncated binary file");
}

namespace {
template <typename T>
T get(const std::string& bytes, std::size_t& pos) {
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<T>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += sizeof(T);
    return v;
}
}  // namespace

std::uint8_t Reader::u8() { need(1); return static_cast<std::uint8_t>(bytes_[pos_++]); }
std::uint16_t Reader::u16() { need(2); return get<std::uint16_t>(bytes_, pos_); }
std::uint32_t Reader::u32() { need(4); return get<std::uint32_t>(bytes_, pos_); }
std::uint64_t Reader::u64() { need(8); return get<std::uint64_t>(bytes_, pos_); }
float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
}

}  // namespace le

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw Error("cannot write " + tmp.string());
    std::size_t done = 0;
    while (done < bytes.size()) {
        const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
        if (n < 0) {
            ::close(fd);
            throw Error("write failed for " + tmp.string());
        }
        done += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    std::filesystem::rename(tmp, path);
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& tensor) {
    std::size_t count = 1;
    for (auto d : tensor.shape) count *= d;
    if (count != tensor.data.size()) throw ShapeError("tensor data does not match its shape");
    std::string out;
    out.reserve(8 + 4 * tensor.shape.size() + 4 * count);
    out.append(kTensorMagic, 4);
    le::put_u8(out, kDtypeFloat32);
    le::put_u8(out, static_cast<std::uint8_t>(tensor.shape.size()));
    le::put_u16(out, 0);
    for (auto d : tensor.shape) le::put_u32(out, d);
    for (float v : tensor.data) le::put_f32(out, v);
    atomic_write(path, out);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    le::Reader r(bytes);
    if (r.bytes(4) != std::string(kTensorMagic, 4)) throw ParseError("bad tensor magic in " + path.string());
    if (r.u8() != kDtypeFloat32) throw ParseError("unsupported tensor dtype in " + path.string());
    const auto ndim = r.u8();
    r.u16();
    TensorFile t;
    std::size_t count = 1;
    for (int i = 0; i < ndim; ++i) {
        t.shape.push_back(r.u32());
        count *= t.shape.back();
    }
    if (r.remaining() != 4 * count) throw ParseError("tensor payload size mismatch in " + path.string());
    t.data.resize(count);
    for (auto& v : t.data) v = r.f32();
    return t;
}

void write_stacked(const std::filesystem::path& path, const StackedInput& input) {
    write_tensor_file(path, {{StackedInput::kChannels, static_cast<std::uint32_t>(input.height()),
                              static_cast<std::uint32_t>(input.width())},
                             input.data()});
}

StackedInput read_stacked(const std::filesystem::path& path) {
    auto t = read_tensor_file(path);
    if (t.shape.size() != 3 || t.shape[0] != StackedInput::kChannels)
        throw ShapeError("cached tensor is not 4 x H x W: " + path.string());
    return StackedInput(static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]), std::move(t.data));
}

std::filesystem::path cache_path(const std::filesystem::path& cache_dir, const std::string& image_id) {
    static constexpr char hex[] = "0123456789ABCDEF";
    std::string name;
    for (unsigned char c : image_id) {
        if (std::isalnum(c) || c == '.' || c == '_' || c == '-') {
            name.push_back(static_cast<char>(c));
        } else {
            name.push_back('%');
            name.push_back(hex[c >> 4]);
            name.push_back(hex[c & 0xF]);
        }
    }
    if (name == "." || name == "..") name = "%2E" + name.substr(1);
    return cache_dir / (name + ".fkt");
}

}  // namespace flankid
