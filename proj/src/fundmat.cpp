#include "tdx/fundmat.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace tdx {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::NonFiniteCoefficient: return "NonFiniteCoefficient";
        case ErrorCode::SingularFundamentalMatrix: return "SingularFundamentalMatrix";
        case ErrorCode::StepTooLarge: return "StepTooLarge";
        case ErrorCode::InvalidParameter: return "InvalidParameter";
        case ErrorCode::UnboundedCoefficient: return "UnboundedCoefficient";
        case ErrorCode::NotSPD: return "NotSPD";
        case ErrorCode::NonFiniteState: return "NonFiniteState";
        case ErrorCode::GridTooSmall: return "GridTooSmall";
        case ErrorCode::GridCoverage: return "GridCoverage";
        case ErrorCode::GridMismatch: return "GridMismatch";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::UnknownExample: return "UnknownExample";
    }
    return "Unknown";
}

// ---------------------------------------------------------------- TimeGrid

TimeGrid::TimeGrid(int n, double horizon) : n_(n), horizon_(horizon), h_(0.0) {
    if (n < 1) throw Error(ErrorCode::InvalidParameter, "time grid needs n >= 1");
    if (!(horizon > 0.0) || !std::isfinite(horizon))
        throw Error(ErrorCode::InvalidParameter, "time grid horizon must be positive");
    h_ = horizon / n;
}

double TimeGrid::point(int k) const {
    if (k < 0 || k > n_) throw Error(ErrorCode::InvalidParameter, "grid index out of range");
    return k == n_ ? horizon_ : k * h_;
}

std::vector<double> TimeGrid::points() const {
    std::vector<double> out(static_cast<std::size_t>(n_) + 1);
    for (int k = 0; k <= n_; ++k) out[static_cast<std::size_t>(k)] = point(k);
    return out;
}

int TimeGrid::index_of(double t) const {
    const double scaled = t / h_;
    const long k = std::lround(scaled);
    if (k < 0 || k > n_ || std::abs(scaled - static_cast<double>(k)) > 1e-9)
        throw Error(ErrorCode::InvalidParameter, "time " + std::to_string(t) + " is not a grid point");
    return static_cast<int>(k);
}

int TimeGrid::floor_index(double t) const {
    // A tiny tolerance keeps t = k*h from landing in cell k-1 through rounding.
    const double scaled = t / h_ + 1e-12;
    const long k = static_cast<long>(std::floor(scaled));
    return static_cast<int>(std::clamp<long>(k, 0, n_));
}

// ---------------------------------------------------------- MatrixFunction

MatrixFunction::MatrixFunction(int dim, Evaluator eval, bool continuous)
    : dim_(dim), eval_(std::move(eval)), continuous_(continuous) {
    if (dim < 1) throw Error(ErrorCode::InvalidParameter, "matrix function needs dim >= 1");
    if (!eval_) throw Error(ErrorCode::InvalidParameter, "matrix function has no evaluator");
}

MatrixFunction MatrixFunction::constant(const Matrix& value) {
    if (value.rows() != value.cols())
        throw Error(ErrorCode::InvalidParameter, "constant matrix function must be square");
    return MatrixFunction(static_cast<int>(value.rows()), [value](double) { return value; });
}

MatrixFunction MatrixFunction::zero(int dim) { return constant(Matrix::Zero(dim, dim)); }

Matrix MatrixFunction::operator()(double t) const {
    Matrix m = eval_(t);
    if (m.rows() != dim_ || m.cols() != dim_)
        throw Error(ErrorCode::InvalidParameter, "matrix function returned wrong shape");
    if (!m.allFinite())
        throw Error(ErrorCode::NonFiniteCoefficient, "b(" + std::to_string(t) + ") is not finite");
    return m;
}

// ------------------------------------------------------------------ helpers

namespace {

double inf_norm(const Matrix& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

// One classical RK4 step for Y' = b(t) Y (left = false) or Y' = -Y b(t)
// (left = true, the adjoint equation for the inverse).
Matrix rk4_step(const MatrixFunction& b, double t, double dt, const Matrix& y, bool left) {
    const Matrix b0 = b(t);
    const Matrix bm = b(t + 0.5 * dt);
    const Matrix b1 = b(t + dt);
    auto f = [left](const Matrix& bt, const Matrix& v) -> Matrix {
        return left ? Matrix(-v * bt) : Matrix(bt * v);
    };
    const Matrix k1 = f(b0, y);
    const Matrix k2 = f(bm, y + 0.5 * dt * k1);
    const Matrix k3 = f(bm, y + 0.5 * dt * k2);
    const Matrix k4 = f(b1, y + dt * k3);
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

Matrix integrate(const MatrixFunction& b, double t0, double t1, int steps, Matrix y, bool left) {
    const double dt = (t1 - t0) / steps;
    for (int s = 0; s < steps; ++s) y = rk4_step(b, t0 + s * dt, dt, y, left);
    return y;
}

}  // namespace

double operator_norm(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(m);
    return svd.singularValues()(0);
}

Matrix matrix_exponential(const Matrix& m) {
    if (!m.allFinite()) throw Error(ErrorCode::NonFiniteCoefficient, "matrix exponential of non-finite matrix");
    return m.exp();
}

// --------------------------------------------------- FundamentalMatrixTable

FundamentalMatrixTable::FundamentalMatrixTable(TimeGrid grid, TableKind kind, MatrixFunction generator,
                                               int refinement)
    : grid_(grid), kind_(kind), generator_(std::move(generator)), refinement_(refinement) {}

void FundamentalMatrixTable::finalize() {
    const int d = dim();
    phi_inv_.clear();
    det_.clear();
    max_condition_ = 1.0;
    for (std::size_t k = 0; k < phi_.size(); ++k) {
        Eigen::PartialPivLU<Matrix> lu(phi_[k]);
        const double det = lu.determinant();
        if (!std::isfinite(det) || std::abs(det) < kSingularityTolerance)
            throw Error(ErrorCode::SingularFundamentalMatrix,
                        "|det Phi| = " + std::to_string(std::abs(det)) + " at k = " + std::to_string(k));
        Matrix inv = lu.solve(Matrix::Identity(d, d));
        max_condition_ = std::max(max_condition_, inf_norm(phi_[k]) * inf_norm(inv));
        det_.push_back(det);
        phi_inv_.push_back(std::move(inv));
    }
}

Matrix FundamentalMatrixTable::phi_at(double t) const {
    if (kind_ == TableKind::Discrete) return phi(grid_.index_of(t));
    if (t < 0.0 || t > grid_.horizon() * (1.0 + 1e-12))
        throw Error(ErrorCode::InvalidParameter, "time outside the table horizon");
    const int k = std::min(grid_.floor_index(t), grid_.steps());
    const double tk = grid_.point(k);
    const double gap = t - tk;
    if (gap <= 0.0) return phi(k);
    const int steps = std::max(1, static_cast<int>(std::ceil(gap / grid_.step() * refinement_)));
    return integrate(generator_, tk, t, steps, phi(k), false);
}

Matrix FundamentalMatrixTable::phi_inv_at(double t) const {
    if (kind_ == TableKind::Discrete) return phi_inv(grid_.index_of(t));
    const int k = std::min(grid_.floor_index(t), grid_.steps());
    if (t - grid_.point(k) <= 0.0) return phi_inv(k);
    return phi_at(t).inverse();
}

double FundamentalMatrixTable::inverse_residual() const {
    const int d = dim();
    double worst = 0.0;
    for (std::size_t k = 0; k < phi_.size(); ++k)
        worst = std::max(worst, inf_norm(phi_[k] * phi_inv_[k] - Matrix::Identity(d, d)));
    return worst;
}

void FundamentalMatrixTable::write_csv(std::ostream& out) const {
    const int d = dim();
    out << "k,t";
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) out << ",phi_" << i << j;
    out << ",det\n";
    char buf[64];
    for (int k = 0; k <= grid_.steps(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", grid_.point(k));
        out << k << ',' << buf;
        const Matrix& m = phi(k);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
                out << ',' << buf;
            }
        std::snprintf(buf, sizeof buf, "%.17g", det(k));
        out << ',' << buf << '\n';
    }
}

// --------------------------------------------------------------- builders

FundamentalMatrixTable solve_continuous(const MatrixFunction& b, const TimeGrid& grid, int refinement) {
    if (refinement < 1) throw Error(ErrorCode::InvalidParameter, "refinement must be >= 1");
    FundamentalMatrixTable table(grid, TableKind::Continuous, b, refinement);
    const int d = b.dim();
    Matrix phi = Matrix::Identity(d, d);
    Matrix adjoint = Matrix::Identity(d, d);
    std::vector<Matrix> adjoints;
    table.phi_.reserve(static_cast<std::size_t>(grid.steps()) + 1);
    table.phi_.push_back(phi);
    adjoints.push_back(adjoint);
    for (int k = 0; k < grid.steps(); ++k) {
        const double t0 = grid.point(k);
        const double t1 = grid.point(k + 1);
        phi = integrate(b, t0, t1, refinement, phi, false);
        adjoint = integrate(b, t0, t1, refinement, adjoint, true);
        if (!phi.allFinite())
            throw Error(ErrorCode::SingularFundamentalMatrix, "integrator produced non-finite Phi");
        table.phi_.push_back(phi);
        adjoints.push_back(adjoint);
    }
    table.finalize();
    for (std::size_t k = 0; k < adjoints.size(); ++k)
        table.adjoint_residual_ = std::max(table.adjoint_residual_, inf_norm(table.phi_inv_[k] - adjoints[k]));
    return table;
}

FundamentalMatrixTable build_discrete(const MatrixFunction& b_n, const TimeGrid& grid) {
    FundamentalMatrixTable table(grid, TableKind::Discrete, b_n, 1);
    const int d = b_n.dim();
    const double h = grid.step();
    Matrix phi = Matrix::Identity(d, d);
    table.phi_.reserve(static_cast<std::size_t>(grid.steps()) + 1);
    table.phi_.push_back(phi);
    for (int k = 0; k < grid.steps(); ++k) {
        const Matrix bk = b_n(grid.point(k));
        const double load = h * operator_norm(bk);
        if (load > 0.5)
            throw Error(ErrorCode::StepTooLarge, "h*||b_n(kh)|| = " + std::to_string(load) + " > 1/2 at k = " +
                                                     std::to_string(k) + "; increase n");
        phi = (Matrix::Identity(d, d) + h * bk) * phi;
        table.phi_.push_back(phi);
    }
    table.finalize();
    return table;
}

ExpBoundResidual exp_bound_residual(const Matrix& b, int n) {
    if (n < 1) throw Error(ErrorCode::InvalidParameter, "n must be >= 1");
    if (!b.allFinite()) throw Error(ErrorCode::NonFiniteCoefficient, "b is not finite");
    const int d = static_cast<int>(b.rows());
    Matrix product = Matrix::Identity(d, d);
    const Matrix factor = Matrix::Identity(d, d) + b / static_cast<double>(n);
    for (int k = 0; k < n; ++k) product = factor * product;
    const double a = operator_norm(b);
    return {operator_norm(matrix_exponential(b) - product), a * a * std::exp(a) / n};
}

std::vector<double> broken_line_convergence(const MatrixFunction& b_n, const MatrixFunction& b,
                                            std::span<const int> n_list, double horizon, int refinement) {
    std::vector<double> gaps;
    gaps.reserve(n_list.size());
    for (int n : n_list) {
        const TimeGrid grid(n, horizon);
        const auto discrete = build_discrete(b_n, grid);
        const auto continuous = solve_continuous(b, grid, refinement);
        double gap = 0.0;
        for (int k = 0; k <= n; ++k) gap = std::max(gap, operator_norm(discrete.phi(k) - continuous.phi(k)));
        gaps.push_back(gap);
    }
    return gaps;
}

}  // namespace tdx
