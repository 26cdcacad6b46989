#pragma once

#include "tdx/chain.hpp"
#include "tdx/fundmat.hpp"
#include "tdx/models.hpp"

#include <iosfwd>
#include <optional>
#include <vector>

namespace tdx {

struct Axis {
    double min;
    double max;
    int points;

    [[nodiscard]] double spacing() const noexcept { return (max - min) / (points - 1); }
    [[nodiscard]] double at(int j) const noexcept { return j == points - 1 ? max : min + j * spacing(); }
};

/// Uniform tensor grid; flat storage with the last axis fastest.
class SpatialGrid {
public:
    explicit SpatialGrid(std::vector<Axis> axes);
    static SpatialGrid line(double min, double max, int points);

    [[nodiscard]] int dim() const noexcept { return static_cast<int>(axes_.size()); }
    [[nodiscard]] const std::vector<Axis>& axes() const noexcept { return axes_; }
    [[nodiscard]] const Axis& axis(int i) const { return axes_.at(static_cast<std::size_t>(i)); }
    [[nodiscard]] std::size_t size() const noexcept { return size_; }
    [[nodiscard]] Vector node(std::size_t flat) const;
    /// Trapezoid weight of a node (product of per-axis weights).
    [[nodiscard]] double weight(std::size_t flat) const;
    [[nodiscard]] bool contains(const Vector& y, double slack = 1e-12) const;
    [[nodiscard]] bool same_as(const SpatialGrid& other) const;

private:
    std::vector<Axis> axes_;
    std::size_t size_;
};

enum class DensityKind { ClosedForm, Evolved, Kde, Transformed };

/// Transition density y -> p(s, t, x0, y) tabulated on a spatial grid.
struct DensityField {
    double s = 0.0;
    double t = 1.0;
    Vector x0;
    SpatialGrid grid = SpatialGrid::line(-1.0, 1.0, 3);
    std::vector<double> values;
    DensityKind kind = DensityKind::ClosedForm;

    [[nodiscard]] double integral() const;
    [[nodiscard]] double peak() const;
    /// Multilinear interpolation; GridCoverage outside the grid.
    [[nodiscard]] double interpolate(const Vector& y) const;
    /// max boundary value / peak.
    [[nodiscard]] double boundary_ratio() const;
    /// CSV `y1..yd,value` with %.17g values.
    void write_csv(std::ostream& out) const;
};

/// Gaussian density with mean x e^{-b tau} + alpha (1 - e^{-b tau}) and
/// variance sigma^2 (1 - e^{-2 b tau}) / (2 b), tau = t - s.
double vasicek_density(double alpha, double beta, double sigma, double s, double t, double x, double y);
DensityField vasicek_field(double alpha, double beta, double sigma, double s, double t, double x,
                           const SpatialGrid& grid);

/// N(mean, cov) tabulated on a grid.
DensityField gaussian_field(const Vector& mean, const Matrix& cov, const SpatialGrid& grid, double s = 0.0,
                            double t = 1.0, const Vector& x0 = {});

/// Density of X_n(T) given X_n(0) = x0 for a 1-d chain, by repeated trapezoid
/// convolution with the one-step kernel. GridTooSmall if mass leaks.
DensityField evolve_chain_density(const ChainSpec& spec, const SpatialGrid& grid);

/// Gaussian-kernel density estimate of the states at step k. Missing
/// bandwidths are set per axis by Silverman's rule, floored at the grid spacing.
DensityField kde_estimate(const PathEnsemble& ensemble, int k, const SpatialGrid& grid,
                          std::optional<Vector> bandwidth = std::nullopt);

enum class TransformDirection {
    ToOriginal,  // p_Y(s,t,x,y) = det Phi^{-1}(t) p_Ytilde(s,t,Phi^{-1}(s)x, Phi^{-1}(t)y)
    ToExcluded,  // p_Ytilde(s,t,x,z) = det Phi(t) p_Y(s,t,Phi(s)x, Phi(t)z)
};

/// Change of variables between backtracked and original coordinates.
/// Without a target grid the image of the source grid is used (diagonal Phi only).
DensityField transform_density(const DensityField& field, const FundamentalMatrixTable& phi, double s, double t,
                               TransformDirection direction = TransformDirection::ToOriginal,
                               std::optional<SpatialGrid> target = std::nullopt);

struct WeightedDistance {
    /// max_u (1 + |u - x|^{2(S'-1)}) |det Phi(1)| |p1(u) - p2(u)|  (u = Phi(1) y)
    double forward = 0.0;
    /// max_u (1 + |Phi^{-1}(1) u - x|^{2(S'-1)}) |p1(u) - p2(u)|
    double pullback = 0.0;
    /// max_u (1 + |u - Phi(1) x|^{2(S'-1)}) |p1(u) - p2(u)|
    double pushforward = 0.0;
    /// max(|Phi(1)|, |Phi^{-1}(1)|); pullback and pushforward weights agree
    /// within a factor 1 + kappa^{2(S'-1)}.
    double kappa = 1.0;
};

/// GridMismatch unless both fields live on the same grid with the same (s, t).
WeightedDistance weighted_sup_distance(const DensityField& p1, const DensityField& p2, const Matrix& phi1,
                                       const Vector& x, int sprime = 2);

struct TailFit {
    double c1 = 0.0;  // prefactor
    double c2 = 0.0;  // decay rate
};

struct TailReport {
    TailFit fit;
    std::size_t violations = 0;
    std::size_t points_checked = 0;
    bool finite = false;  // c1 finite and c2 > 0
};

/// Least-squares fit of log p ~ log c1 - c2 |Phi^{-1} y - x|^2 over the core
/// (p >= core * peak), c1 raised to the smallest value dominating the core.
TailFit fit_gaussian_envelope(const DensityField& field, const Matrix& phi_inv, const Vector& x, double core = 1e-6);

/// Counts grid points with p > c1 exp(-c2 |Phi^{-1} y - x|^2). Fits the
/// envelope first when no constants are given.
TailReport gaussian_tail_check(const DensityField& field, const Matrix& phi_inv, const Vector& x,
                               std::optional<TailFit> constants = std::nullopt);

}  // namespace tdx
