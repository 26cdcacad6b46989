#pragma once

#include "tdx/types.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace tdx {

/// Uniform grid {0, h, 2h, ..., nh = T}. Points are computed as k*h, never by
/// accumulation, and the last point is pinned to T.
class TimeGrid {
public:
    explicit TimeGrid(int n, double horizon = 1.0);

    [[nodiscard]] int steps() const noexcept { return n_; }
    [[nodiscard]] double horizon() const noexcept { return horizon_; }
    [[nodiscard]] double step() const noexcept { return h_; }
    [[nodiscard]] double point(int k) const;
    [[nodiscard]] std::vector<double> points() const;

    /// Index k with point(k) == t up to rounding; throws InvalidParameter if t is
    /// not a grid point.
    [[nodiscard]] int index_of(double t) const;
    /// floor(t / h) clamped to [0, n].
    [[nodiscard]] int floor_index(double t) const;

private:
    int n_;
    double horizon_;
    double h_;
};

/// Time-dependent d x d matrix, e.g. the linear drift part b(t).
class MatrixFunction {
public:
    using Evaluator = std::function<Matrix(double t)>;

    MatrixFunction(int dim, Evaluator eval, bool continuous = true);

    static MatrixFunction constant(const Matrix& value);
    static MatrixFunction zero(int dim);

    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] bool continuous() const noexcept { return continuous_; }
    /// Evaluates and checks shape. Throws NonFiniteCoefficient on NaN/Inf.
    [[nodiscard]] Matrix operator()(double t) const;

private:
    int dim_;
    Evaluator eval_;
    bool continuous_;
};

enum class TableKind { Continuous, Discrete };

/// Fundamental matrices tabulated on a TimeGrid together with their inverses
/// and determinants. Immutable once built.
class FundamentalMatrixTable {
public:
    [[nodiscard]] const TimeGrid& grid() const noexcept { return grid_; }
    [[nodiscard]] TableKind kind() const noexcept { return kind_; }
    [[nodiscard]] int dim() const noexcept { return generator_.dim(); }
    [[nodiscard]] const MatrixFunction& generator() const noexcept { return generator_; }

    [[nodiscard]] const Matrix& phi(int k) const { return phi_.at(static_cast<std::size_t>(k)); }
    [[nodiscard]] const Matrix& phi_inv(int k) const { return phi_inv_.at(static_cast<std::size_t>(k)); }
    [[nodiscard]] double det(int k) const { return det_.at(static_cast<std::size_t>(k)); }

    /// Phi at an arbitrary time. Continuous tables integrate from the preceding
    /// node with the table's RK4 sub-step; discrete tables require a grid point.
    [[nodiscard]] Matrix phi_at(double t) const;
    [[nodiscard]] Matrix phi_inv_at(double t) const;

    /// max_k ||Phi[k] PhiInv[k] - I||_inf
    [[nodiscard]] double inverse_residual() const;
    /// Continuous tables only: max_k ||PhiInv[k] - Psi[k]||_inf where Psi solves
    /// Psi' = -Psi b(t), Psi(0) = I. Zero for discrete tables.
    [[nodiscard]] double adjoint_residual() const noexcept { return adjoint_residual_; }
    /// Largest condition number (inf-norm) over the table's matrices.
    [[nodiscard]] double max_condition() const noexcept { return max_condition_; }
    [[nodiscard]] bool ill_conditioned() const noexcept { return max_condition_ > 1e8; }
    [[nodiscard]] int refinement() const noexcept { return refinement_; }

    /// CSV with columns k,t,phi_00..phi_{d-1}{d-1},det (row-major, %.17g).
    void write_csv(std::ostream& out) const;

private:
    FundamentalMatrixTable(TimeGrid grid, TableKind kind, MatrixFunction generator, int refinement);
    void finalize();

    TimeGrid grid_;
    TableKind kind_;
    MatrixFunction generator_;
    int refinement_;
    std::vector<Matrix> phi_;
    std::vector<Matrix> phi_inv_;
    std::vector<double> det_;
    double adjoint_residual_ = 0.0;
    double max_condition_ = 1.0;

    friend FundamentalMatrixTable solve_continuous(const MatrixFunction&, const TimeGrid&, int);
    friend FundamentalMatrixTable build_discrete(const MatrixFunction&, const TimeGrid&);
};

inline constexpr double kSingularityTolerance = 1e-12;

/// Phi' = b(t) Phi, Phi(0) = I by classical RK4 with `refinement` sub-steps per
/// grid cell. The inverse comes from LU inversion; the adjoint ODE is solved
/// alongside as a consistency check.
FundamentalMatrixTable solve_continuous(const MatrixFunction& b, const TimeGrid& grid, int refinement);

/// Phi_n((k+1)h) = (I + h b_n(kh)) Phi_n(kh), Phi_n(0) = I. Requires
/// h ||b_n(kh)||_2 <= 1/2 at every node (StepTooLarge otherwise).
FundamentalMatrixTable build_discrete(const MatrixFunction& b_n, const TimeGrid& grid);

/// Spectral norm (largest singular value).
double operator_norm(const Matrix& m);

/// exp(m) by Pade scaling and squaring.
Matrix matrix_exponential(const Matrix& m);

struct ExpBoundResidual {
    double lhs;  // ||exp(b) - (I + b/n)^n||_2
    double rhs;  // a^2 e^a / n, a = ||b||_2
};

/// Both sides of the Euler-product error bound for constant b on [0, 1].
ExpBoundResidual exp_bound_residual(const Matrix& b, int n);

/// For each n: max_k ||Phi_n(kh) - Phi(kh)||_2 between the Euler product for
/// b_n and the RK4 solution for b (with `refinement` sub-steps per cell).
std::vector<double> broken_line_convergence(const MatrixFunction& b_n, const MatrixFunction& b,
                                            std::span<const int> n_list, double horizon = 1.0,
                                            int refinement = 1000);

}  // namespace tdx
