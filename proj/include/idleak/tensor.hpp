#pragma once

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "idleak/common.hpp"

namespace idleak {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

std::size_t dtype_size(Dtype dt);
std::string dtype_name(Dtype dt);

// Row-major dense tensor, the in-memory form of the .flgt container:
//   magic "FLGT" | version u16 | dtype u8 | rank u8 | dims rank*u32 | payload LE
class Tensor {
public:
    Tensor() = default;
    Tensor(Dtype dt, std::vector<std::uint32_t> shape);

    static Tensor f32(std::vector<std::uint32_t> shape) { return Tensor(Dtype::F32, std::move(shape)); }
    static Tensor f64(std::vector<std::uint32_t> shape) { return Tensor(Dtype::F64, std::move(shape)); }
    static Tensor u8(std::vector<std::uint32_t> shape) { return Tensor(Dtype::U8, std::move(shape)); }

    Dtype dtype() const { return dtype_; }
    const std::vector<std::uint32_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const {
        return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                               [](std::size_t a, std::uint32_t b) { return a * b; });
    }

    template <typename T>
    std::vector<T>& data() {
        return std::get<std::vector<T>>(payload_);
    }
    template <typename T>
    const std::vector<T>& data() const {
        return std::get<std::vector<T>>(payload_);
    }

    bool operator==(const Tensor& other) const = default;

private:
    Dtype dtype_ = Dtype::F32;
    std::vector<std::uint32_t> shape_;
    std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>> payload_;
};

constexpr std::uint16_t kFlgtVersion = 1;

// Errors: BadMagicError, TruncatedFileError, DtypeError (unknown dtype code or
// unsupported version), IoError for anything else. write/read round-trips are
// bitwise for every dtype.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Serialize to an in-memory buffer (used by the model container, which embeds
// tensors after its own header).
std::vector<std::uint8_t> tensor_bytes(const Tensor& t);
Tensor tensor_from_bytes(const std::uint8_t* data, std::size_t len, std::size_t* consumed = nullptr);

}  // namespace idleak
