#include "tdx/chain.hpp"

#include "tdx/parallel.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>

namespace tdx {

PathEnsemble::PathEnsemble(std::string spec_id, TimeGrid grid, int dim, int num_paths, std::uint64_t seed,
                           std::uint32_t coupling_id)
    : spec_id_(std::move(spec_id)),
      grid_(grid),
      dim_(dim),
      num_paths_(num_paths),
      seed_(seed),
      coupling_id_(coupling_id) {
    if (dim < 1 || num_paths < 1) throw Error(ErrorCode::InvalidParameter, "ensemble needs d >= 1 and numPaths >= 1");
    data_.assign(static_cast<std::size_t>(num_paths) * (static_cast<std::size_t>(grid.steps()) + 1) *
                     static_cast<std::size_t>(dim),
                 0.0);
}

std::size_t PathEnsemble::offset(int path, int k) const {
    return (static_cast<std::size_t>(path) * (static_cast<std::size_t>(grid_.steps()) + 1) +
            static_cast<std::size_t>(k)) *
           static_cast<std::size_t>(dim_);
}

Eigen::Map<const Vector> PathEnsemble::state(int path, int k) const {
    return Eigen::Map<const Vector>(data_.data() + offset(path, k), dim_);
}

Eigen::Map<Vector> PathEnsemble::state(int path, int k) { return Eigen::Map<Vector>(data_.data() + offset(path, k), dim_); }

Matrix PathEnsemble::slice(int k) const {
    Matrix out(num_paths_, dim_);
    for (int p = 0; p < num_paths_; ++p) out.row(p) = state(p, k).transpose();
    return out;
}

void PathEnsemble::write_csv(std::ostream& out) const {
    out << "path,k,t";
    for (int i = 1; i <= dim_; ++i) out << ",x" << i;
    out << '\n';
    char buf[40];
    for (int p = 0; p < num_paths_; ++p)
        for (int k = 0; k <= grid_.steps(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", grid_.point(k));
            out << p << ',' << k << ',' << buf;
            const auto x = state(p, k);
            for (int i = 0; i < dim_; ++i) {
                std::snprintf(buf, sizeof buf, "%.17g", x(i));
                out << ',' << buf;
            }
            out << '\n';
        }
}

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
    out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in) {
    std::array<unsigned char, sizeof(T)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!in) throw Error(ErrorCode::InvalidParameter, "truncated ensemble file");
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(bytes[i]) << (8 * i));
    return value;
}

constexpr std::uint16_t kBinaryVersion = 1;

}  // namespace

void PathEnsemble::write_binary(std::ostream& out) const {
    out.write("TDXE", 4);
    put_le<std::uint16_t>(out, kBinaryVersion);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(dim_));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(grid_.steps()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(num_paths_));
    for (double v : data_) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

PathEnsemble PathEnsemble::read_binary(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TDXE", 4) != 0) throw Error(ErrorCode::InvalidParameter, "not a TDXE file");
    if (get_le<std::uint16_t>(in) != kBinaryVersion) throw Error(ErrorCode::InvalidParameter, "unsupported version");
    const int d = get_le<std::uint16_t>(in);
    const int n = static_cast<int>(get_le<std::uint32_t>(in));
    const int paths = static_cast<int>(get_le<std::uint32_t>(in));
    // The header carries no horizon; ensembles are read back on [0, 1].
    PathEnsemble ens("binary", TimeGrid(n), d, paths, 0, 0);
    for (double& v : ens.data_) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
    return ens;
}

// -------------------------------------------------------------- simulators

PathEnsemble simulate_chain(const ChainSpec& spec, int num_paths, const RandomStream& stream, int threads) {
    spec.check();
    PathEnsemble ens(spec.name, spec.grid, spec.dim, num_paths, stream.seed(), stream.coupling_id());
    const int n = spec.n();
    parallel_for(static_cast<std::size_t>(num_paths), threads, [&](std::size_t p) {
        const int path = static_cast<int>(p);
        Vector x = spec.x0;
        ens.state(path, 0) = x;
        for (int k = 0; k < n; ++k) {
            auto rng = stream.at(p, static_cast<std::uint32_t>(k));
            const Vector eps = spec.innovations.sampler(n, spec.grid.point(k), x, rng);
            x = spec.step(k, x, eps);
            if (!x.allFinite())
                throw Error(ErrorCode::NonFiniteState,
                            "path " + std::to_string(path) + " became non-finite at k = " + std::to_string(k + 1));
            ens.state(path, k + 1) = x;
        }
    });
    return ens;
}

std::pair<PathEnsemble, PathEnsemble> simulate_coupled(const ChainSpec& spec, const ExcludedChain& excluded,
                                                       int num_paths, const RandomStream& stream, int threads) {
    if (excluded.base.n() != spec.n() || excluded.base.dim != spec.dim)
        throw Error(ErrorCode::InvalidParameter, "excluded chain does not match the original chain");
    return {simulate_chain(spec, num_paths, stream, threads), simulate_chain(excluded.base, num_paths, stream, threads)};
}

PathEnsemble restore_ensemble(const PathEnsemble& excluded, const FundamentalMatrixTable& phi) {
    if (phi.grid().steps() != excluded.grid().steps() || phi.dim() != excluded.dim())
        throw Error(ErrorCode::GridMismatch, "fundamental matrix table does not match the ensemble grid");
    PathEnsemble out(excluded.spec_id() + "-restored", excluded.grid(), excluded.dim(), excluded.num_paths(),
                     excluded.seed(), excluded.coupling_id());
    for (int p = 0; p < excluded.num_paths(); ++p)
        for (int k = 0; k <= excluded.grid().steps(); ++k) out.state(p, k) = phi.phi(k) * excluded.state(p, k);
    return out;
}

double coupling_residual(const PathEnsemble& original, const PathEnsemble& restored) {
    if (original.data().size() != restored.data().size())
        throw Error(ErrorCode::GridMismatch, "ensembles differ in shape");
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < original.data().size(); ++i) {
        diff = std::max(diff, std::abs(original.data()[i] - restored.data()[i]));
        scale = std::max(scale, std::abs(original.data()[i]));
    }
    return diff / (1.0 + scale);
}

PathEnsemble simulate_diffusion_reference(const DiffusionModel& model, int fine_n, int num_paths,
                                          const RandomStream& stream, int threads) {
    model.check();
    const TimeGrid grid(fine_n, model.horizon);
    PathEnsemble ens(model.name + "-euler-maruyama", grid, model.dim, num_paths, stream.seed(), stream.coupling_id());
    const double dt = grid.step();
    const double sqrt_dt = std::sqrt(dt);
    parallel_for(static_cast<std::size_t>(num_paths), threads, [&](std::size_t p) {
        const int path = static_cast<int>(p);
        Vector y = model.x0;
        ens.state(path, 0) = y;
        for (int k = 0; k < fine_n; ++k) {
            const double t = grid.point(k);
            const Vector dw = sqrt_dt * stream.normals(p, static_cast<std::uint32_t>(k), model.dim);
            y = y + dt * model.drift(t, y) + model.sigma(t, y) * dw;
            if (!y.allFinite())
                throw Error(ErrorCode::NonFiniteState,
                            "reference path " + std::to_string(path) + " became non-finite at k = " + std::to_string(k + 1));
            ens.state(path, k + 1) = y;
        }
    });
    return ens;
}

}  // namespace tdx
