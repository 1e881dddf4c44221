#include "oclapo/core/hash.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <stdexcept>

namespace oclapo {

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
            throw std::runtime_error("sha256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t n) {
        if (EVP_DigestUpdate(ctx_, data, n) != 1)
            throw std::runtime_error("sha256 update failed");
    }

    std::string hex() {
        std::array<unsigned char, 32> out{};
        unsigned int n = 0;
        if (EVP_DigestFinal_ex(ctx_, out.data(), &n) != 1)
            throw std::runtime_error("sha256 final failed");
        static const char* digits = "0123456789abcdef";
        std::string s(2 * n, '0');
        for (unsigned int i = 0; i < n; ++i) {
            s[2 * i] = digits[out[i] >> 4];
            s[2 * i + 1] = digits[out[i] & 0xf];
        }
        return s;
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot hash missing file: " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 20);
    while (is) {
        is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<size_t>(is.gcount()));
    }
    return h.hex();
}

std::string sha256_tree(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(path)) return sha256_file(path);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& f : files) {
        const std::string rel = fs::relative(f, path).generic_string();
        h.update(rel.data(), rel.size());
        const std::string d = sha256_file(f);
        h.update(d.data(), d.size());
    }
    return h.hex();
}

}  // namespace oclapo
