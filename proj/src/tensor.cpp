#include "idleak/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace idleak {

static_assert(std::endian::native == std::endian::little,
              "flgt containers are little-endian; big-endian hosts are not supported");

std::size_t dtype_size(Dtype dt) {
    switch (dt) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    throw DtypeError("unknown dtype code " + std::to_string(static_cast<int>(dt)));
}

std::string dtype_name(Dtype dt) {
    switch (dt) {
        case Dtype::F32: return "f32";
        case Dtype::F64: return "f64";
        case Dtype::U8: return "u8";
    }
    return "invalid";
}

Tensor::Tensor(Dtype dt, std::vector<std::uint32_t> shape) : dtype_(dt), shape_(std::move(shape)) {
    switch (dt) {
        case Dtype::F32: payload_ = std::vector<float>(size(), 0.0f); break;
        case Dtype::F64: payload_ = std::vector<double>(size(), 0.0); break;
        case Dtype::U8: payload_ = std::vector<std::uint8_t>(size(), 0); break;
    }
}

namespace {

constexpr char kMagic[4] = {'F', 'L', 'G', 'T'};

template <typename T>
void append_raw(std::vector<std::uint8_t>& out, const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take_raw(const std::uint8_t* data, std::size_t len, std::size_t& off) {
    if (off + sizeof(T) > len) throw TruncatedFileError("flgt: truncated while reading header/payload");
    T v;
    std::memcpy(&v, data + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> tensor_bytes(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(12 + 4 * t.rank() + t.size() * dtype_size(t.dtype()));
    out.insert(out.end(), kMagic, kMagic + 4);
    append_raw(out, kFlgtVersion);
    append_raw(out, static_cast<std::uint8_t>(t.dtype()));
    append_raw(out, static_cast<std::uint8_t>(t.rank()));
    for (std::uint32_t d : t.shape()) append_raw(out, d);
    const std::size_t n = t.size();
    switch (t.dtype()) {
        case Dtype::F32: {
            const auto& v = t.data<float>();
            const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
            out.insert(out.end(), p, p + n * 4);
            break;
        }
        case Dtype::F64: {
            const auto& v = t.data<double>();
            const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
            out.insert(out.end(), p, p + n * 8);
            break;
        }
        case Dtype::U8: {
            const auto& v = t.data<std::uint8_t>();
            out.insert(out.end(), v.begin(), v.end());
            break;
        }
    }
    return out;
}

Tensor tensor_from_bytes(const std::uint8_t* data, std::size_t len, std::size_t* consumed) {
    std::size_t off = 0;
    if (len < 4) throw TruncatedFileError("flgt: file shorter than magic");
    if (std::memcmp(data, kMagic, 4) != 0)
        throw BadMagicError("flgt: bad magic (expected \"FLGT\")");
    off = 4;
    const auto version = take_raw<std::uint16_t>(data, len, off);
    if (version != kFlgtVersion)
        throw DtypeError("flgt: unsupported container version " + std::to_string(version));
    const auto dtype_code = take_raw<std::uint8_t>(data, len, off);
    if (dtype_code > 2)
        throw DtypeError("flgt: unknown dtype code " + std::to_string(int(dtype_code)));
    const auto rank = take_raw<std::uint8_t>(data, len, off);
    std::vector<std::uint32_t> shape(rank);
    for (auto& d : shape) d = take_raw<std::uint32_t>(data, len, off);

    Tensor t(static_cast<Dtype>(dtype_code), shape);
    const std::size_t payload = t.size() * dtype_size(t.dtype());
    if (off + payload > len)
        throw TruncatedFileError("flgt: payload shorter than element count requires");
    switch (t.dtype()) {
        case Dtype::F32: std::memcpy(t.data<float>().data(), data + off, payload); break;
        case Dtype::F64: std::memcpy(t.data<double>().data(), data + off, payload); break;
        case Dtype::U8: std::memcpy(t.data<std::uint8_t>().data(), data + off, payload); break;
    }
    off += payload;
    if (consumed) *consumed = off;
    return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = tensor_bytes(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t consumed = 0;
    Tensor t = tensor_from_bytes(bytes.data(), bytes.size(), &consumed);
    if (consumed != bytes.size())
        throw IoError("flgt: trailing bytes after payload in " + path.string());
    return t;
}

}  // namespace idleak
