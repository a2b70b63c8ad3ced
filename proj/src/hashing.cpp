#include "idleak/hashing.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>

#include "idleak/common.hpp"

namespace idleak {

namespace {

std::string to_hex(const unsigned char* digest, unsigned int len) {
    static const char* hexd = "0123456789abcdef";
    std::string out(len * 2, '0');
    for (unsigned int i = 0; i < len; ++i) {
        out[2 * i] = hexd[digest[i] >> 4];
        out[2 * i + 1] = hexd[digest[i] & 0xf];
    }
    return out;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t len) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int dlen = 0;
    if (EVP_Digest(data, len, digest.data(), &dlen, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 digest failed");
    return to_hex(digest.data(), dlen);
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for hashing: " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::array<char, 1 << 16> buf;
    while (f) {
        f.read(buf.data(), buf.size());
        const auto got = f.gcount();
        if (got > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(got));
    }
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int dlen = 0;
    EVP_DigestFinal_ex(ctx, digest.data(), &dlen);
    EVP_MD_CTX_free(ctx);
    return to_hex(digest.data(), dlen);
}

std::string canonical_json(const nlohmann::json& j) { return j.dump(); }

std::string json_hash(const nlohmann::json& j) { return sha256_hex(canonical_json(j)); }

}  // namespace idleak
