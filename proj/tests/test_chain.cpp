#include "tdx/chain.hpp"
#include "tdx/config.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

using namespace tdx;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

DiffusionModel random_walk() {
    DiffusionModel model;
    model.b = MatrixFunction::zero(1);
    model.m = [](double, const Vector&) { return scalar(0.0); };
    model.sigma = [](double, const Vector&) { return Matrix::Identity(1, 1); };
    model.x0 = scalar(0.0);
    model.name = "walk";
    return model;
}

DiffusionModel sine_drift() {
    DiffusionModel model;
    model.b = MatrixFunction::constant(Matrix::Constant(1, 1, -1.0));
    model.m = [](double, const Vector& x) { return scalar(0.1 * std::sin(x(0))); };
    model.sigma = [](double, const Vector&) { return Matrix::Constant(1, 1, 0.2); };
    model.x0 = scalar(0.5);
    model.name = "sine";
    return model;
}

DiffusionModel heston() {
    ProbeBox box;
    box.lower = Vector{{0.0, 0.0}};
    box.upper = Vector{{4.0, 2.0}};
    return make_heston_like(0.05, 2.0, 0.04, 0.3, capped_sqrt_volatility(1e-4, 1.0), 1.0, 0.04, box);
}

struct SampleStats {
    double mean = 0.0;
    double var = 0.0;
};

SampleStats terminal_stats(const PathEnsemble& ens) {
    const int n = ens.grid().steps();
    SampleStats s;
    for (int p = 0; p < ens.num_paths(); ++p) s.mean += ens.state(p, n)(0);
    s.mean /= ens.num_paths();
    for (int p = 0; p < ens.num_paths(); ++p) s.var += std::pow(ens.state(p, n)(0) - s.mean, 2);
    s.var /= ens.num_paths() - 1;
    return s;
}

}  // namespace

TEST(SimulateChain, RandomWalkVariance) {
    const int paths = 100000;
    const auto ens = simulate_chain(euler_chain(random_walk(), 16), paths, RandomStream(1));
    const auto s = terminal_stats(ens);
    EXPECT_NEAR(s.mean, 0.0, 4.0 / std::sqrt(paths));
    EXPECT_NEAR(s.var, 1.0, 4.0 * std::sqrt(2.0 / paths));
}

TEST(SimulateChain, VasicekMean) {
    const double alpha = 0.05, beta = 2.0, sigma = 0.1, x0 = 0.03;
    const int n = 64, paths = 100000;
    const auto ens = simulate_chain(euler_chain(make_vasicek(alpha, beta, sigma, x0), n), paths, RandomStream(2));
    const double h = 1.0 / n;
    double mean = x0, var = 0.0;
    for (int k = 0; k < n; ++k) {
        mean = (1.0 - beta * h) * mean + h * alpha * beta;
        var = (1.0 - beta * h) * (1.0 - beta * h) * var + h * sigma * sigma;
    }
    const double exact = x0 * std::exp(-beta) + alpha * (1.0 - std::exp(-beta));
    const auto s = terminal_stats(ens);
    const double mc = 4.0 * std::sqrt(var / paths);
    EXPECT_NEAR(s.mean, mean, mc);
    EXPECT_NEAR(s.mean, exact, mc + std::abs(mean - exact));
    EXPECT_NEAR(s.var, var, 4.0 * var * std::sqrt(2.0 / paths));
}

TEST(SimulateChain, ZeroInnovationsGiveEulerRecursion) {
    ChainSpec chain = euler_chain(sine_drift(), 32);
    chain.innovations = zero_innovations(1);
    const auto ens = simulate_chain(chain, 3, RandomStream(4));
    double x = 0.5;
    const double h = 1.0 / 32;
    for (int k = 0; k < 32; ++k) {
        x = x + h * (-x + 0.1 * std::sin(x));
        for (int p = 0; p < 3; ++p) EXPECT_NEAR(ens.state(p, k + 1)(0), x, 1e-15);
    }
}

TEST(SimulateChain, NonFiniteStateIsReported) {
    DiffusionModel model = random_walk();
    model.m = [](double, const Vector& x) { return scalar(1e300 * (1.0 + x(0) * x(0))); };
    try {
        (void)simulate_chain(euler_chain(model, 8), 2, RandomStream(1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFiniteState);
    }
}

TEST(SimulateChain, ThreadCountDoesNotMatter) {
    const auto chain = euler_chain(heston(), 32);
    const auto one = simulate_chain(chain, 257, RandomStream(99, 3), 1);
    const auto four = simulate_chain(chain, 257, RandomStream(99, 3), 4);
    EXPECT_EQ(one.data(), four.data());
    const auto again = simulate_chain(chain, 257, RandomStream(99, 3), 3);
    EXPECT_EQ(one.data(), again.data());
    const auto other = simulate_chain(chain, 257, RandomStream(100, 3), 1);
    EXPECT_NE(one.data(), other.data());
}

TEST(SimulateCoupled, ZeroLinearPartGivesIdenticalEnsembles) {
    DiffusionModel model = sine_drift();
    model.b = MatrixFunction::zero(1);
    const auto chain = euler_chain(model, 16);
    auto [original, tilde] = simulate_coupled(chain, exclude_chain(chain), 100, RandomStream(6));
    EXPECT_EQ(original.data(), tilde.data());
}

TEST(SimulateCoupled, ConjugationResidual) {
    const auto vchain = euler_chain(make_vasicek(0.05, 2.0, 0.1, 0.03), 16);
    const auto vex = exclude_chain(vchain);
    auto [vo, vt] = simulate_coupled(vchain, vex, 100, RandomStream(7), 2);
    EXPECT_LE(coupling_residual(vo, restore_ensemble(vt, *vex.phi_n)), 1e-12);

    const auto hchain = euler_chain(heston(), 32);
    const auto hex = exclude_chain(hchain);
    auto [ho, ht] = simulate_coupled(hchain, hex, 100, RandomStream(8), 2);
    EXPECT_LE(coupling_residual(ho, restore_ensemble(ht, *hex.phi_n)), 1e-11);
}

TEST(PathEnsemble, BinaryRoundTrip) {
    const auto ens = simulate_chain(euler_chain(heston(), 8), 5, RandomStream(3));
    std::stringstream buf;
    ens.write_binary(buf);
    const std::string bytes = buf.str();
    ASSERT_EQ(bytes.size(), 16u + 5u * 9u * 2u * 8u);
    EXPECT_EQ(bytes.substr(0, 4), "TDXE");
    std::uint16_t d = 0;
    std::uint32_t n = 0, paths = 0;
    std::memcpy(&d, bytes.data() + 6, 2);
    std::memcpy(&n, bytes.data() + 8, 4);
    std::memcpy(&paths, bytes.data() + 12, 4);
    EXPECT_EQ(d, 2);
    EXPECT_EQ(n, 8u);
    EXPECT_EQ(paths, 5u);
    double first = 0.0;
    std::memcpy(&first, bytes.data() + 16, 8);
    EXPECT_EQ(first, 1.0);  // S(0)

    const auto back = PathEnsemble::read_binary(buf);
    EXPECT_EQ(back.dim(), 2);
    EXPECT_EQ(back.num_paths(), 5);
    EXPECT_EQ(back.grid().steps(), 8);
    EXPECT_EQ(back.data(), ens.data());

    std::stringstream junk("NOPE0000000000000000");
    EXPECT_THROW((void)PathEnsemble::read_binary(junk), Error);
}

TEST(PathEnsemble, CsvLayout) {
    const auto ens = simulate_chain(euler_chain(random_walk(), 2), 2, RandomStream(3));
    std::ostringstream out;
    ens.write_csv(out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "path,k,t,x1");
    std::getline(in, line);
    EXPECT_EQ(line, "0,0,0,0");
    int rows = 1;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 6);
}

TEST(DiffusionReference, DeterministicVasicek) {
    const double alpha = 0.05, beta = 2.0, x0 = 0.4;
    DiffusionModel model = make_vasicek(alpha, beta, 1.0, x0);
    model.sigma = [](double, const Vector&) { return Matrix::Zero(1, 1); };
    for (int fine : {500, 1000}) {
        const auto ens = simulate_diffusion_reference(model, fine, 2, RandomStream(1));
        for (int k = 0; k <= fine; k += fine / 10) {
            const double t = static_cast<double>(k) / fine;
            const double exact = x0 * std::exp(-beta * t) + alpha * (1.0 - std::exp(-beta * t));
            EXPECT_NEAR(ens.state(1, k)(0), exact, 2.0 / fine);
        }
    }
}

TEST(DiffusionReference, GapHalvesWithTheStep) {
    const double alpha = 0.05, beta = 2.0, sigma = 0.1, x0 = 0.03;
    const DiffusionModel model = make_vasicek(alpha, beta, sigma, x0);
    const std::vector<int> fines{50, 100, 200, 400};
    std::vector<double> gaps;
    for (int fine : fines) {
        const double dt = 1.0 / fine;
        double total = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const RandomStream stream(seed, 5);
            const int paths = 100;
            const auto ens = simulate_diffusion_reference(model, fine, paths, stream);
            for (int p = 0; p < paths; ++p) {
                double integral = 0.0;
                for (int k = 0; k < fine; ++k)
                    integral += std::exp(-beta * (1.0 - k * dt)) * std::sqrt(dt) *
                                stream.normals(static_cast<std::uint64_t>(p), static_cast<std::uint32_t>(k), 1)(0);
                const double exact = x0 * std::exp(-beta) + alpha * (1.0 - std::exp(-beta)) + sigma * integral;
                total += std::abs(ens.state(p, fine)(0) - exact);
            }
        }
        gaps.push_back(total / (20.0 * 100.0));
    }
    for (std::size_t i = 1; i < gaps.size(); ++i) {
        const double ratio = gaps[i - 1] / gaps[i];
        EXPECT_GE(ratio, 1.6) << fines[i];
        EXPECT_LE(ratio, 2.4) << fines[i];
    }
}

TEST(SimulateChain, MarkovProperty) {
    // Given X_k in a narrow bin, X_{k-1} and X_{k+1} should be independent.
    const int n = 16, k = 8, paths = 200000;
    const auto ens = simulate_chain(euler_chain(sine_drift(), n), paths, RandomStream(31), 2);
    std::vector<double> mid(static_cast<std::size_t>(paths));
    for (int p = 0; p < paths; ++p) mid[static_cast<std::size_t>(p)] = ens.state(p, k)(0);
    std::vector<double> sorted = mid;
    std::nth_element(sorted.begin(), sorted.begin() + paths / 2, sorted.end());
    const double centre = sorted[static_cast<std::size_t>(paths / 2)];
    const double half = 0.0025;

    std::vector<std::pair<double, double>> pairs;
    for (int p = 0; p < paths; ++p)
        if (std::abs(mid[static_cast<std::size_t>(p)] - centre) <= half)
            pairs.emplace_back(ens.state(p, k - 1)(0), ens.state(p, k + 1)(0));
    ASSERT_GT(pairs.size(), 1000u);

    auto tertiles = [&](bool second) {
        std::vector<double> v;
        for (const auto& pr : pairs) v.push_back(second ? pr.second : pr.first);
        std::sort(v.begin(), v.end());
        return std::pair{v[v.size() / 3], v[2 * v.size() / 3]};
    };
    const auto [a1, a2] = tertiles(false);
    const auto [b1, b2] = tertiles(true);
    auto bin = [](double v, double c1, double c2) { return v < c1 ? 0 : (v < c2 ? 1 : 2); };
    double table[3][3] = {};
    for (const auto& [prev, next] : pairs) table[bin(prev, a1, a2)][bin(next, b1, b2)] += 1.0;
    double rows[3] = {}, cols[3] = {};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            rows[i] += table[i][j];
            cols[j] += table[i][j];
        }
    const double total = static_cast<double>(pairs.size());
    double chi2 = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double expected = rows[i] * cols[j] / total;
            chi2 += std::pow(table[i][j] - expected, 2) / expected;
        }
    const double critical = boost::math::quantile(boost::math::chi_squared(4.0), 0.999);
    EXPECT_LT(chi2, critical) << "chi2 = " << chi2 << " over " << pairs.size() << " pairs";

    // Sanity: unconditionally the two ends are strongly dependent.
    double c = 0.0, va = 0.0, vb = 0.0, ma = 0.0, mb = 0.0;
    for (int p = 0; p < paths; ++p) {
        ma += ens.state(p, k - 1)(0);
        mb += ens.state(p, k + 1)(0);
    }
    ma /= paths;
    mb /= paths;
    for (int p = 0; p < paths; ++p) {
        const double x = ens.state(p, k - 1)(0) - ma, y = ens.state(p, k + 1)(0) - mb;
        c += x * y;
        va += x * x;
        vb += y * y;
    }
    EXPECT_GT(c / std::sqrt(va * vb), 0.5);
}
