#pragma once

#include "tdx/models.hpp"
#include "tdx/random.hpp"
#include "tdx/trendex.hpp"

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace tdx {

/// numPaths x (n+1) x d states stored path-major, then step, then component.
class PathEnsemble {
public:
    PathEnsemble(std::string spec_id, TimeGrid grid, int dim, int num_paths, std::uint64_t seed,
                 std::uint32_t coupling_id);

    [[nodiscard]] const std::string& spec_id() const noexcept { return spec_id_; }
    [[nodiscard]] const TimeGrid& grid() const noexcept { return grid_; }
    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] int num_paths() const noexcept { return num_paths_; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] std::uint32_t coupling_id() const noexcept { return coupling_id_; }

    [[nodiscard]] Eigen::Map<const Vector> state(int path, int k) const;
    [[nodiscard]] Eigen::Map<Vector> state(int path, int k);
    /// All paths at step k, one row per path.
    [[nodiscard]] Matrix slice(int k) const;
    [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

    /// CSV `path,k,t,x1..xd` with %.17g values.
    void write_csv(std::ostream& out) const;
    /// 16-byte header (magic "TDXE", u16 version, u16 d, u32 n, u32 numPaths)
    /// followed by little-endian float64 states.
    void write_binary(std::ostream& out) const;
    static PathEnsemble read_binary(std::istream& in);

private:
    [[nodiscard]] std::size_t offset(int path, int k) const;

    std::string spec_id_;
    TimeGrid grid_;
    int dim_;
    int num_paths_;
    std::uint64_t seed_;
    std::uint32_t coupling_id_;
    std::vector<double> data_;
};

/// Simulates the chain recursion with the innovation for cell (path, k)
/// drawn from stream.at(path, k). Throws NonFiniteState on blow-up.
PathEnsemble simulate_chain(const ChainSpec& spec, int num_paths, const RandomStream& stream, int threads = 1);

/// Original and excluded chains driven by the same stream. The excluded
/// innovations are the linear image of the original draws, not fresh samples.
std::pair<PathEnsemble, PathEnsemble> simulate_coupled(const ChainSpec& spec, const ExcludedChain& excluded,
                                                       int num_paths, const RandomStream& stream, int threads = 1);

/// Maps every state of an ensemble through Phi(k) (excluded -> original).
PathEnsemble restore_ensemble(const PathEnsemble& excluded, const FundamentalMatrixTable& phi);

/// max |restored - original| / (1 + max |original|) over all entries.
double coupling_residual(const PathEnsemble& original, const PathEnsemble& restored);

/// Euler-Maruyama on a fine grid with increments sqrt(dt) * stream.normals(path, k, d).
PathEnsemble simulate_diffusion_reference(const DiffusionModel& model, int fine_n, int num_paths,
                                          const RandomStream& stream, int threads = 1);

}  // namespace tdx
