#include "tdx/fundmat.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace tdx;

namespace {

Matrix diag2(double a, double b) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 0) = a;
    m(1, 1) = b;
    return m;
}

// Power series with squaring; independent of the library's exponential.
Matrix taylor_exp(const Matrix& a) {
    int squarings = 0;
    double scale = a.cwiseAbs().rowwise().sum().maxCoeff();
    while (scale > 0.1) {
        scale /= 2.0;
        ++squarings;
    }
    const Matrix small = a / std::pow(2.0, squarings);
    Matrix term = Matrix::Identity(a.rows(), a.cols());
    Matrix sum = term;
    for (int k = 1; k < 30; ++k) {
        term = term * small / k;
        sum += term;
    }
    for (int i = 0; i < squarings; ++i) sum = sum * sum;
    return sum;
}

}  // namespace

TEST(TimeGrid, PointsAreMultiplesOfTheStep) {
    const TimeGrid grid(7, 2.0);
    EXPECT_EQ(grid.point(0), 0.0);
    EXPECT_EQ(grid.point(7), 2.0);
    for (int k = 0; k < 7; ++k) EXPECT_DOUBLE_EQ(grid.point(k), k * (2.0 / 7));
    EXPECT_EQ(grid.points().size(), 8u);
    EXPECT_EQ(grid.index_of(grid.point(3)), 3);
    EXPECT_THROW((void)grid.index_of(0.1), Error);
    EXPECT_EQ(grid.floor_index(5.0), 7);
    EXPECT_THROW(TimeGrid(0), Error);
}

TEST(MatrixFunction, RejectsNonFiniteValues) {
    const MatrixFunction bad(1, [](double) { return Matrix::Constant(1, 1, std::nan("")); });
    try {
        (void)bad(0.5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFiniteCoefficient);
    }
    EXPECT_THROW(solve_continuous(bad, TimeGrid(4), 2), Error);
}

TEST(SolveContinuous, ZeroGeneratorGivesIdentity) {
    const auto table = solve_continuous(MatrixFunction::zero(2), TimeGrid(5), 3);
    for (int k = 0; k <= 5; ++k) EXPECT_EQ(table.phi(k), Matrix::Identity(2, 2));
    EXPECT_EQ(table.kind(), TableKind::Continuous);
}

TEST(SolveContinuous, DiagonalGeneratorMatchesExponentials) {
    const auto table = solve_continuous(MatrixFunction::constant(diag2(0.05, -2.0)), TimeGrid(10), 100);
    for (int k = 0; k <= 10; ++k) {
        const double t = 0.1 * k;
        EXPECT_NEAR(table.phi(k)(0, 0), std::exp(0.05 * t), 1e-10);
        EXPECT_NEAR(table.phi(k)(1, 1), std::exp(-2.0 * t), 1e-10);
        EXPECT_EQ(table.phi(k)(0, 1), 0.0);
    }
    const Matrix mid = table.phi_at(0.437);
    EXPECT_NEAR(mid(1, 1), std::exp(-2.0 * 0.437), 1e-10);
}

TEST(SolveContinuous, ScalarVasicekDecay) {
    const auto table = solve_continuous(MatrixFunction::constant(Matrix::Constant(1, 1, -1.5)), TimeGrid(10), 100);
    EXPECT_NEAR(table.phi(10)(0, 0), std::exp(-1.5), 1e-10);
}

TEST(SolveContinuous, InverseAndAdjointAgree) {
    const MatrixFunction rot(2, [](double t) {
        Matrix m(2, 2);
        m << 0.1, 1.0 + t, -(1.0 + t), -0.3;
        return m;
    });
    const auto table = solve_continuous(rot, TimeGrid(20), 50);
    EXPECT_LE(table.inverse_residual(), 1e-10);
    EXPECT_LE(table.adjoint_residual(), 1e-8);
    EXPECT_FALSE(table.ill_conditioned());
    for (int k = 0; k <= 20; ++k) EXPECT_NE(table.det(k), 0.0);
}

TEST(SolveContinuous, CollapsingSolutionIsSingular) {
    try {
        (void)solve_continuous(MatrixFunction::constant(Matrix::Constant(1, 1, -50.0)), TimeGrid(10), 100);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SingularFundamentalMatrix);
    }
}

TEST(BuildDiscrete, ZeroGeneratorGivesIdentity) {
    const auto table = build_discrete(MatrixFunction::zero(3), TimeGrid(10));
    for (int k = 0; k <= 10; ++k) EXPECT_EQ(table.phi(k), Matrix::Identity(3, 3));
}

TEST(BuildDiscrete, ScalarProductMatchesExactRational) {
    const auto table = build_discrete(MatrixFunction::constant(Matrix::Constant(1, 1, 1.0)), TimeGrid(10));
    // 11^10 / 10^10 = 25937424601 / 10^10
    EXPECT_NEAR(table.phi(10)(0, 0), 25937424601.0 / 1e10, 1e-14);
    EXPECT_NEAR(table.phi(10)(0, 0), 2.5937424601, 1e-12);
}

TEST(BuildDiscrete, DiagonalProduct) {
    const auto table = build_discrete(MatrixFunction::constant(diag2(0.05, -2.0)), TimeGrid(16));
    double a = 1.0, b = 1.0;
    for (int i = 0; i < 16; ++i) {
        a *= 1.0 + 0.05 / 16;
        b *= 1.0 - 2.0 / 16;
    }
    EXPECT_NEAR(table.phi(16)(0, 0), a, 1e-15);
    EXPECT_NEAR(table.phi(16)(1, 1), b, 1e-15);
}

TEST(BuildDiscrete, RecursionHoldsExactly) {
    const MatrixFunction b(2, [](double t) {
        Matrix m(2, 2);
        m << -1.0, t, 0.5, std::sin(3.0 * t);
        return m;
    });
    const TimeGrid grid(25);
    const auto table = build_discrete(b, grid);
    EXPECT_EQ(table.kind(), TableKind::Discrete);
    for (int k = 0; k < 25; ++k) {
        const Matrix step = Matrix::Identity(2, 2) + grid.step() * b(grid.point(k));
        EXPECT_EQ(Matrix(step * table.phi(k)), table.phi(k + 1));
    }
    EXPECT_LE(table.inverse_residual(), 1e-10);
    EXPECT_THROW((void)table.phi_at(0.013), Error);
}

TEST(BuildDiscrete, RejectsLargeSteps) {
    try {
        (void)build_discrete(MatrixFunction::constant(Matrix::Constant(1, 1, 10.0)), TimeGrid(10));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::StepTooLarge);
    }
}

TEST(MatrixExponential, AgreesWithSeriesAndRotation) {
    Matrix a(3, 3);
    a << 0.3, -1.2, 0.5, 0.7, -0.4, 0.1, -0.2, 0.9, 0.25;
    EXPECT_LE((matrix_exponential(a) - taylor_exp(a)).cwiseAbs().maxCoeff(), 1e-13);
    Matrix r(2, 2);
    r << 0.0, 2.0, -2.0, 0.0;
    Matrix expected(2, 2);
    expected << std::cos(2.0), std::sin(2.0), -std::sin(2.0), std::cos(2.0);
    EXPECT_LE((matrix_exponential(r) - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(OperatorNorm, LargestSingularValue) {
    Matrix a(2, 2);
    a << 3.0, 0.0, 4.0, 5.0;
    // singular values of [[3,0],[4,5]] are sqrt(45) and sqrt(5)
    EXPECT_NEAR(operator_norm(a), std::sqrt(45.0), 1e-12);
}

TEST(ExpBound, ScalarCase) {
    const auto r = exp_bound_residual(Matrix::Constant(1, 1, 1.0), 10);
    EXPECT_NEAR(r.lhs, std::exp(1.0) - std::pow(1.1, 10), 1e-14);
    EXPECT_NEAR(r.lhs, 0.1245, 5e-5);
    EXPECT_NEAR(r.rhs, std::exp(1.0) / 10, 1e-15);
    EXPECT_LE(r.lhs, r.rhs);
}

TEST(ExpBound, ZeroMatrix) {
    const auto r = exp_bound_residual(Matrix::Zero(2, 2), 7);
    EXPECT_EQ(r.lhs, 0.0);
    EXPECT_EQ(r.rhs, 0.0);
}

TEST(ExpBound, DecaysLikeOneOverN) {
    std::vector<double> lhs;
    for (int n : {10, 100, 1000}) {
        const auto r = exp_bound_residual(Matrix::Constant(1, 1, 1.0), n);
        EXPECT_LE(r.lhs, r.rhs);
        lhs.push_back(r.lhs);
    }
    EXPECT_NEAR(std::log10(lhs[1] / lhs[0]), -1.0, 0.05);
    EXPECT_NEAR(std::log10(lhs[2] / lhs[1]), -1.0, 0.05);
}

TEST(ExpBound, HoldsForAssortedMatrices) {
    Matrix a(2, 2), b(3, 3);
    a << 0.2, -1.0, 0.4, -0.7;
    b << 1.0, 0.5, 0.0, -0.3, 0.2, 0.8, 0.1, -0.9, -1.1;
    for (const Matrix& m : {a, b, Matrix(diag2(0.05, -2.0))})
        for (int n : {1, 3, 10, 50, 400}) {
            const auto r = exp_bound_residual(m, n);
            EXPECT_LE(r.lhs, r.rhs) << "n = " << n;
        }
}

TEST(BrokenLine, ConstantGeneratorMatchesClosedForms) {
    const double c = -0.8;
    const MatrixFunction b = MatrixFunction::constant(Matrix::Constant(1, 1, c));
    const std::vector<int> ns{4, 16};
    const auto gaps = broken_line_convergence(b, b, ns, 1.0, 200);
    for (std::size_t i = 0; i < ns.size(); ++i) {
        const double h = 1.0 / ns[i];
        double expected = 0.0;
        for (int k = 0; k <= ns[i]; ++k)
            expected = std::max(expected, std::abs(std::exp(c * k * h) - std::pow(1.0 + c * h, k)));
        EXPECT_NEAR(gaps[i], expected, 1e-11);
    }
}

TEST(BrokenLine, ZeroGenerator) {
    const std::vector<int> ns{2, 8};
    for (double g : broken_line_convergence(MatrixFunction::zero(2), MatrixFunction::zero(2), ns, 1.0, 10))
        EXPECT_EQ(g, 0.0);
}

TEST(BrokenLine, GapsHalveForTimeVaryingGenerator) {
    const double beta = 1.0;
    const MatrixFunction b(1, [beta](double t) { return Matrix::Constant(1, 1, -beta * (1.0 + 0.5 * t)); });
    const std::vector<int> ns{8, 16, 32, 64};
    const auto gaps = broken_line_convergence(b, b, ns, 1.0, 1000);
    for (std::size_t i = 1; i < gaps.size(); ++i) {
        const double ratio = gaps[i - 1] / gaps[i];
        EXPECT_GE(ratio, 1.6);
        EXPECT_LE(ratio, 2.4);
    }
}

TEST(FundamentalMatrixTable, CsvLayout) {
    const auto table = build_discrete(MatrixFunction::constant(diag2(0.05, -2.0)), TimeGrid(4));
    std::ostringstream out;
    table.write_csv(out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "k,t,phi_00,phi_01,phi_10,phi_11,det");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 5);
    // second row: diag(1 + 0.05/4, 1 - 2/4), det 0.50625
    EXPECT_NE(out.str().find("\n1,0.25,1.0125,0,0,0.5,0.50624999999999998\n"), std::string::npos) << out.str();
}
