#include "retmask/hash.hpp"

#include <fstream>
#include <sstream>

#include "retmask/common.hpp"

namespace retmask {

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file for hashing: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();
    return fnv1a64(buf.data(), buf.size());
}

std::string hash_file_hex(const std::filesystem::path& path) {
    return hex64(hash_file(path));
}

}  // namespace retmask
