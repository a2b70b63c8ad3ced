#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace idleak {

// SHA-256 hex digests; content addressing for artifacts and configs.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& path);

// Canonical serialization: nlohmann::json with default (sorted-key) object
// ordering, no whitespace. Hashing the canonical dump makes configs
// order-insensitive and diff-stable.
std::string canonical_json(const nlohmann::json& j);
std::string json_hash(const nlohmann::json& j);

}  // namespace idleak
