#include "tdx/chain.hpp"
#include "tdx/config.hpp"
#include "tdx/trendex.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace tdx;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

DiffusionModel heston() {
    ProbeBox box;
    box.lower = Vector{{0.5, 0.0}};
    box.upper = Vector{{2.0, 0.5}};
    return make_heston_like(0.05, 2.0, 0.04, 0.3, capped_sqrt_volatility(1e-4, 1.0), 1.0, 0.04, box);
}

double normal_pdf(double z, double var) { return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * std::numbers::pi * var); }

}  // namespace

TEST(ExcludeDiffusion, VasicekCoefficients) {
    const double alpha = 0.05, beta = 2.0, sigma = 0.1;
    const auto ex = exclude_diffusion(make_vasicek(alpha, beta, sigma, 0.03));
    EXPECT_EQ(ex.base.b(0.5), Matrix::Zero(1, 1));
    EXPECT_EQ(ex.base.x0(0), 0.03);
    for (double t : {0.0, 0.13, 0.5, 0.77, 1.0})
        for (double x : {-1.0, 0.0, 2.5}) {
            EXPECT_NEAR(ex.base.m(t, scalar(x))(0), std::exp(beta * t) * alpha * beta, 1e-9 * std::exp(beta * t));
            EXPECT_NEAR(ex.base.sigma(t, scalar(x))(0, 0), std::exp(beta * t) * sigma, 1e-9 * std::exp(beta * t));
            EXPECT_NEAR(ex.diffusion_matrix(t, scalar(x))(0, 0), std::exp(2 * beta * t) * sigma * sigma, 1e-9);
        }
}

TEST(ExcludeDiffusion, HestonDrift) {
    const auto ex = exclude_diffusion(heston());
    for (double t : {0.0, 0.4, 1.0}) {
        const Vector m = ex.base.m(t, Vector{{1.3, 0.05}});
        EXPECT_NEAR(m(0), 0.0, 1e-15);
        EXPECT_NEAR(m(1), std::exp(2.0 * t) * 2.0 * 0.04, 1e-9);
    }
}

TEST(ExcludeDiffusion, ZeroLinearPartIsIdentity) {
    DiffusionModel model;
    model.b = MatrixFunction::zero(1);
    model.m = [](double t, const Vector& x) { return scalar(std::sin(x(0)) + t); };
    model.sigma = [](double, const Vector& x) { return Matrix::Constant(1, 1, 0.2 + 0.1 * std::cos(x(0))); };
    model.x0 = scalar(0.3);
    const auto ex = exclude_diffusion(model);
    for (double t : {0.0, 0.5, 1.0})
        for (double x : {-2.0, 0.1, 1.7}) {
            EXPECT_EQ(ex.base.m(t, scalar(x)), model.m(t, scalar(x)));
            EXPECT_EQ(ex.base.sigma(t, scalar(x)), model.sigma(t, scalar(x)));
        }
}

TEST(ExcludeDiffusion, BoundsTransfer) {
    const DiffusionModel model = heston();
    const auto ex = exclude_diffusion(model);
    ProbeBox box = ProbeBox::around(model.x0, 0.5);
    double worst_inv = 0.0, m_sup = 0.0;
    for (double t : box.times(1.0)) worst_inv = std::max(worst_inv, operator_norm(ex.phi->phi_inv_at(t)));
    for (double t : box.times(1.0))
        for (const Vector& x : box.states()) m_sup = std::max(m_sup, model.m(t, x).norm());
    for (double t : box.times(1.0))
        for (const Vector& x : box.states()) {
            EXPECT_LE(ex.base.m(t, x).norm(), worst_inv * m_sup * (1.0 + 1e-12));
            Eigen::SelfAdjointEigenSolver<Matrix> eig(ex.diffusion_matrix(t, x));
            EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
        }
}

TEST(ExcludeChain, ZeroLinearPartLeavesStepsAlone) {
    DiffusionModel model;
    model.b = MatrixFunction::zero(1);
    model.m = [](double, const Vector& x) { return scalar(0.1 * std::sin(x(0))); };
    model.sigma = [](double, const Vector&) { return Matrix::Constant(1, 1, 0.2); };
    model.x0 = scalar(0.5);
    const ChainSpec chain = euler_chain(model, 16);
    const ExcludedChain ex = exclude_chain(chain);
    for (int k = 0; k < 16; ++k)
        for (double x : {-1.0, 0.5, 3.0}) {
            const Vector eps = scalar(0.7 - 0.1 * k);
            EXPECT_EQ(ex.base.step(k, scalar(x), eps), chain.step(k, scalar(x), eps));
        }
}

TEST(ExcludeChain, SingleStepExpansion) {
    const double alpha = 0.05, beta = 2.0;
    const ChainSpec chain = euler_chain(make_vasicek(alpha, beta, 0.1, 0.03), 8);
    const ExcludedChain ex = exclude_chain(chain);
    const double h = 1.0 / 8;
    const double eps = 0.37;
    const double x0 = 0.03;
    // Phi_n(0) = 1 and 1 + h b = 1 - beta h
    const double expected = x0 + h * alpha * beta / (1.0 - beta * h) + std::sqrt(h) * eps / (1.0 - beta * h);
    const double eps_tilde = (*ex.step_pullback)[0](0, 0) * eps;
    EXPECT_NEAR(eps_tilde, eps / (1.0 - beta * h), 1e-15);
    EXPECT_NEAR(ex.base.step(0, scalar(x0), scalar(eps_tilde))(0), expected, 1e-15);
}

TEST(ExcludeChain, StepsConjugateTheOriginal) {
    const ChainSpec chain = euler_chain(heston(), 16);
    const ExcludedChain ex = exclude_chain(chain);
    const RandomStream stream(3);
    for (int k = 0; k < 16; ++k) {
        const Vector x = Vector{{1.0 + 0.01 * k, 0.04 + 0.001 * k}};
        const Vector eps = stream.normals(0, static_cast<std::uint32_t>(k), 2);
        const Vector x_tilde = pull_state(*ex.phi_n, k, x);
        const Vector z = (*ex.step_pullback)[static_cast<std::size_t>(k)] * eps;
        const Vector next_tilde = ex.base.step(k, x_tilde, z);
        const Vector next = chain.step(k, x, eps);
        EXPECT_LE((restore_state(*ex.phi_n, k + 1, next_tilde) - next).cwiseAbs().maxCoeff(), 1e-13);
    }
}

TEST(ExcludeChain, VasicekPathsRestore) {
    const ChainSpec chain = euler_chain(make_vasicek(0.05, 2.0, 0.1, 0.03), 4);
    const ExcludedChain ex = exclude_chain(chain);
    auto [original, tilde] = simulate_coupled(chain, ex, 50, RandomStream(17, 2));
    const PathEnsemble restored = restore_ensemble(tilde, *ex.phi_n);
    for (std::size_t i = 0; i < original.data().size(); ++i)
        EXPECT_NEAR(restored.data()[i], original.data()[i], 1e-13);
}

TEST(ExcludeChain, RejectsLargeSteps) {
    try {
        (void)exclude_chain(euler_chain(make_vasicek(0.0, 20.0, 0.1, 0.0), 8));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::StepTooLarge);
    }
}

TEST(InnovationDensity, IdentityMatrixLeavesDensity) {
    DiffusionModel model;
    model.b = MatrixFunction::zero(1);
    model.m = [](double, const Vector&) { return scalar(0.0); };
    model.sigma = [](double, const Vector&) { return Matrix::Constant(1, 1, 0.5); };
    model.x0 = scalar(0.0);
    const ChainSpec chain = euler_chain(model, 8);
    const auto table = build_discrete(chain.b_n, chain.grid);
    const auto q = transform_innovation_density(chain.innovations, table, 3, scalar(0.2));
    for (double z : {-1.0, 0.0, 0.3})
        EXPECT_EQ(q(scalar(z)), chain.innovations.density(8, 3.0 / 8, scalar(0.2), scalar(z)));
}

TEST(InnovationDensity, ScalarVarianceShrinks) {
    const double beta = 2.0, sigma = 0.1;
    const ChainSpec chain = euler_chain(make_vasicek(0.05, beta, sigma, 0.03), 16);
    const auto table = build_discrete(chain.b_n, chain.grid);
    const int k = 5;
    const double phi = std::pow(1.0 - beta / 16, k + 1);
    const double var = sigma * sigma / (phi * phi);
    const auto q = transform_innovation_density(chain.innovations, table, k, scalar(0.4));
    for (double z : {-0.3, 0.0, 0.05, 0.2}) EXPECT_NEAR(q(scalar(z)), normal_pdf(z, var), 1e-12);
}

TEST(InnovationDensity, QuadratureCovariance) {
    const ChainSpec chain = euler_chain(heston(), 16);
    const auto table = build_discrete(chain.b_n, chain.grid);
    const int k = 7;
    const Vector x_tilde = Vector{{0.9, 0.05}};
    const auto q = transform_innovation_density(chain.innovations, table, k, x_tilde);
    const Matrix& inv = table.phi_inv(k + 1);
    const Matrix a = chain.innovations.covariance(table.grid().point(k), table.phi(k) * x_tilde);
    const Matrix expected = inv * a * inv.transpose();
    const auto mom = integrate_moments_gauss_hermite(q, expected, 20);
    EXPECT_NEAR(mom.mass, 1.0, 1e-10);
    EXPECT_LE(mom.mean.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((mom.second - expected).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((transformed_covariance(chain.innovations.covariance, table, table.grid().point(k), x_tilde) - expected)
                  .cwiseAbs()
                  .maxCoeff(),
              1e-15);
}

TEST(TransformedCovariance, IdentityAndScalar) {
    DiffusionModel flat;
    flat.dim = 2;
    flat.b = MatrixFunction::zero(2);
    flat.m = [](double, const Vector&) { return Vector::Zero(2); };
    flat.sigma = [](double, const Vector&) { return Matrix::Identity(2, 2); };
    flat.x0 = Vector::Zero(2);
    const ChainSpec c = euler_chain(flat, 4);
    const auto id = build_discrete(c.b_n, c.grid);
    EXPECT_EQ(transformed_covariance(c.innovations.covariance, id, 0.5, Vector::Zero(2)), Matrix::Identity(2, 2));

    const double beta = 2.0, sigma = 0.1;
    const ChainSpec v = euler_chain(make_vasicek(0.05, beta, sigma, 0.03), 32);
    const auto table = build_discrete(v.b_n, v.grid);
    for (int k = 0; k < 32; ++k) {
        const double phi = std::pow(1.0 - beta / 32, k + 1);
        const double t = k / 32.0 + 0.01;
        EXPECT_NEAR(transformed_covariance(v.innovations.covariance, table, t, scalar(0.0))(0, 0),
                    sigma * sigma / (phi * phi), 1e-12 * sigma * sigma / (phi * phi));
    }
}

TEST(TransformedCovariance, DiscreteApproachesContinuous) {
    const DiffusionModel model = make_vasicek(0.05, 2.0, 0.1, 0.03);
    const auto ex = exclude_diffusion(model);
    double previous = std::numeric_limits<double>::infinity();
    for (int n : {8, 16, 32, 64, 128}) {
        const ChainSpec chain = euler_chain(model, n);
        const auto table = build_discrete(chain.b_n, chain.grid);
        double gap = 0.0;
        for (double t : {0.0, 0.25, 0.5, 0.75}) {
            const double discrete = transformed_covariance(chain.innovations.covariance, table, t, scalar(0.1))(0, 0);
            const double continuous = transformed_covariance(model, *ex.phi, t, scalar(0.1))(0, 0);
            EXPECT_NEAR(continuous, std::exp(4.0 * t) * 0.01, 1e-10);
            gap = std::max(gap, std::abs(discrete - continuous));
        }
        EXPECT_LT(gap, previous) << "n = " << n;
        previous = gap;
    }
}

TEST(StateMaps, RoundTrip) {
    const ChainSpec chain = euler_chain(heston(), 32);
    const auto table = build_discrete(chain.b_n, chain.grid);
    const auto ex = exclude_diffusion(heston());
    const Vector x = Vector{{1.4, 0.07}};
    for (int k = 0; k <= 32; ++k) {
        EXPECT_LE((restore_state(table, k, pull_state(table, k, x)) - x).cwiseAbs().maxCoeff(), 1e-13);
        const double t = k / 32.0;
        EXPECT_LE((restore_state(*ex.phi, t, pull_state(*ex.phi, t, x)) - x).cwiseAbs().maxCoeff(), 1e-13);
    }
    EXPECT_EQ(restore_state(table, 0, x), x);
    const auto v = exclude_diffusion(make_vasicek(0.05, 2.0, 0.1, 0.03));
    EXPECT_NEAR(restore_state(*v.phi, 1.0, scalar(0.5))(0), std::exp(-2.0) * 0.5, 1e-10);
}
