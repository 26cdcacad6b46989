#include "tdx/random.hpp"

namespace tdx {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) noexcept {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> c,
                                        std::array<std::uint32_t, 2> k) noexcept {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kMul0, c[0], hi0, lo0);
        mulhilo(kMul1, c[2], hi1, lo1);
        c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
        k[0] += kWeyl0;
        k[1] += kWeyl1;
    }
    return c;
}

StepRng::StepRng(std::uint64_t seed, std::uint32_t stream, std::uint64_t path, std::uint32_t step) noexcept
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
      counter_{0u, step, static_cast<std::uint32_t>(path),
               static_cast<std::uint32_t>(path >> 32) ^ (stream * 0x85EBCA6Bu)} {}

void StepRng::refill() noexcept {
    block_ = philox4x32(counter_, key_);
    ++counter_[0];
    used_ = 0;
}

StepRng::result_type StepRng::operator()() noexcept {
    if (used_ > 2) refill();
    const std::uint64_t hi = block_[static_cast<std::size_t>(used_)];
    const std::uint64_t lo = block_[static_cast<std::size_t>(used_) + 1];
    used_ += 2;
    return (hi << 32) | lo;
}

double StepRng::uniform() noexcept {
    // 53 random bits, shifted by half an ulp so 0 is never returned.
    return ((*this)() >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

double StepRng::normal() { return gauss_(*this); }

Vector StepRng::normals(int d) {
    Vector z(d);
    for (int i = 0; i < d; ++i) z(i) = normal();
    return z;
}

}  // namespace tdx
