#pragma once

#include "tdx/types.hpp"

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace tdx {

/// Philox4x32-10 block cipher used as a counter-based generator: the output
/// for a counter depends only on (key, counter), so draws can be addressed
/// directly by (path, step) in any order.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key) noexcept;

/// Uniform random bit generator for one (path, step) cell of a RandomStream.
/// Successive calls walk the block counter; nothing is shared between cells.
class StepRng {
public:
    using result_type = std::uint64_t;

    StepRng(std::uint64_t seed, std::uint32_t stream, std::uint64_t path, std::uint32_t step) noexcept;

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }
    result_type operator()() noexcept;

    /// Uniform on the open interval (0, 1).
    double uniform() noexcept;
    double normal();
    Vector normals(int d);

private:
    void refill() noexcept;

    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> counter_;
    std::array<std::uint32_t, 4> block_{};
    int used_ = 4;
    std::normal_distribution<double> gauss_{0.0, 1.0};
};

/// Seed plus coupling id. Two ensembles built from streams with the same
/// (seed, id) see identical innovation draws cell by cell.
class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed, std::uint32_t coupling_id = 0) noexcept
        : seed_(seed), id_(coupling_id) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] std::uint32_t coupling_id() const noexcept { return id_; }
    [[nodiscard]] StepRng at(std::uint64_t path, std::uint32_t step) const noexcept {
        return StepRng(seed_, id_, path, step);
    }
    /// d iid standard normals for cell (path, step); this is the draw the
    /// Euler-Maruyama reference uses for its Brownian increments.
    [[nodiscard]] Vector normals(std::uint64_t path, std::uint32_t step, int d) const {
        auto rng = at(path, step);
        return rng.normals(d);
    }

private:
    std::uint64_t seed_;
    std::uint32_t id_;
};

}  // namespace tdx
