#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace frailt {

// FNV-1a 64-bit. Used for corpus/batch/file fingerprints, not for security.
class Fnv1a {
public:
    void update(std::span<const std::byte> bytes) noexcept {
        for (std::byte b : bytes) {
            hash_ ^= static_cast<std::uint64_t>(b);
            hash_ *= 0x100000001B3ULL;
        }
    }
    void update(std::string_view text) noexcept { update(std::as_bytes(std::span(text.data(), text.size()))); }
    template <class T>
    void update_pod(const T& value) noexcept {
        update(std::as_bytes(std::span(&value, 1)));
    }

    std::uint64_t value() const noexcept { return hash_; }
    std::string hex() const;

private:
    std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

inline std::string Fnv1a::hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t v = hash_;
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
        v >>= 4;
    }
    return out;
}

inline std::string digest_hex(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

}  // namespace frailt
