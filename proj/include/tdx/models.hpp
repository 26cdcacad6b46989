#pragma once

#include "tdx/fundmat.hpp"
#include "tdx/random.hpp"
#include "tdx/types.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tdx {

/// dY = {b(t) Y + m(t, Y)} dt + sigma(t, Y) dB,  Y(0) = x0, t in [0, T].
/// b carries the linearly growing part of the drift; m must stay bounded.
struct DiffusionModel {
    int dim = 1;
    double horizon = 1.0;
    MatrixFunction b = MatrixFunction::zero(1);
    VectorField m;
    MatrixField sigma;
    Vector x0;
    std::string name;

    [[nodiscard]] Vector drift(double t, const Vector& x) const { return b(t) * x + m(t, x); }
    /// a = sigma sigma^T
    [[nodiscard]] Matrix diffusion_matrix(double t, const Vector& x) const {
        const Matrix s = sigma(t, x);
        return s * s.transpose();
    }
    /// Throws InvalidParameter on inconsistent dimensions.
    void check() const;
};

/// Conditional law of the chain innovation given (n, t, x).
struct InnovationFamily {
    using Density = std::function<double(int n, double t, const Vector& x, const Vector& z)>;
    using Sampler = std::function<Vector(int n, double t, const Vector& x, StepRng& rng)>;

    int dim = 1;
    Density density;  // empty when the law has no Lebesgue density
    Sampler sampler;
    MatrixField covariance;  // a_n(t, x) = E[z z^T]
    int moment_order = 0;    // S = 2 d S' + 4
    /// Centered Gaussian with the stated covariance. Enables closed-form
    /// kernels in the density evolution and marks condition 4 as verified.
    bool gaussian = false;
    /// Custom families: the caller vouches for the psi-domination of condition 4.
    bool condition4_attested = false;

    [[nodiscard]] bool has_density() const noexcept { return static_cast<bool>(density); }
};

/// X((k+1)h) = X(kh) + h {b_n(kh) X(kh) + m_n(kh, X(kh))} + sqrt(h) eps((k+1)h).
struct ChainSpec {
    int dim = 1;
    TimeGrid grid{1};
    MatrixFunction b_n = MatrixFunction::zero(1);
    VectorField m_n;
    InnovationFamily innovations;
    Vector x0;
    std::string name;

    [[nodiscard]] int n() const noexcept { return grid.steps(); }
    /// One step of the recursion for a given innovation draw.
    [[nodiscard]] Vector step(int k, const Vector& x, const Vector& eps) const;
    void check() const;
};

// ------------------------------------------------------------- built-ins

/// dX = {alpha beta - beta X} dt + sigma dB
DiffusionModel make_vasicek(double alpha, double beta, double sigma, double x0, double horizon = 1.0);

/// Axis-aligned box used for sampling-based checks.
struct ProbeBox {
    Vector lower;
    Vector upper;
    int time_samples = 11;
    int state_samples = 64;
    int direction_samples = 32;
    std::uint64_t seed = 7;

    static ProbeBox around(const Vector& centre, double half_width);
    /// Deterministic probe states (corners excluded), reproducible from `seed`.
    [[nodiscard]] std::vector<Vector> states() const;
    [[nodiscard]] std::vector<double> times(double horizon) const;
};

/// Heston-like system on x = (S, v):
///   dS = mu S dt + f(v, S) dB1,  dv = k (theta - v) dt + xi g(v) dB2.
/// f and g must be bounded by the declared bounds on the probe box.
struct HestonVolatility {
    std::function<double(double v, double s)> f;
    std::function<double(double v)> g;
    double f_bound = 1.0;
    double g_bound = 1.0;
};
DiffusionModel make_heston_like(double mu, double k, double theta, double xi, const HestonVolatility& vol,
                                double s0, double v0, const ProbeBox& probe, double horizon = 1.0);

/// dX = {beta(t) (a(t) - X)} dt + sigma(t, X) dB, so b(t) = -beta(t), m(t, x) = beta(t) a(t).
DiffusionModel make_koo_linton(const MatrixFunction& beta, std::function<Vector(double)> level,
                               MatrixField sigma, const Vector& x0, double horizon = 1.0);

/// Centered Gaussian innovations with covariance a_n(t, x), sampled as L xi
/// with L the Cholesky factor. NotSPD is raised if the factorization fails.
InnovationFamily gaussian_innovations(int dim, MatrixField a_n, int sprime = 2);

/// eps == 0: turns the chain into the deterministic Euler recursion.
InnovationFamily zero_innovations(int dim);

/// Euler chain of a model on n steps: b_n = b, m_n = m, Gaussian innovations
/// with a_n = sigma sigma^T.
ChainSpec euler_chain(const DiffusionModel& model, int n, int sprime = 2);

// ------------------------------------------------------------ quadrature

struct Moments {
    double mass = 0.0;
    Vector mean;
    Matrix second;  // E[z z^T]
};

/// Tensor trapezoid on the box [lower, upper] with `nodes` points per axis.
Moments integrate_moments_trapezoid(const std::function<double(const Vector&)>& density, const Vector& lower,
                                    const Vector& upper, int nodes);

/// Gauss-Hermite tensor rule weighted by N(0, reference). The integrand is
/// q / phi_reference, so Gaussian q with that covariance is integrated exactly.
Moments integrate_moments_gauss_hermite(const std::function<double(const Vector&)>& density,
                                        const Matrix& reference, int nodes);

/// Nodes and weights for int e^{-u^2} f(u) du (Golub-Welsch).
struct GaussHermiteRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};
GaussHermiteRule gauss_hermite_rule(int order);

/// Kolmogorov-Smirnov statistic of `samples` draws from a 1-d family at
/// (n, t, x) against the CDF obtained by integrating its density.
double sampler_ks_statistic(const InnovationFamily& family, int n, double t, const Vector& x, int samples,
                            const RandomStream& stream);

// ------------------------------------------------------------ validation

/// sup gaps |m_n - m|, |a_n - a|, |b_n - b| over probe points, one entry per n.
struct ApproximationRates {
    std::vector<int> n_list;
    std::vector<double> drift_gap;
    std::vector<double> covariance_gap;
    std::vector<double> linear_gap;
    std::vector<double> target;  // Delta_n
    double constant = 0.0;       // smallest c with every gap <= c Delta_n
    bool passed = false;
};

ApproximationRates approximation_rates(const DiffusionModel& model,
                                       const std::function<ChainSpec(int n)>& chain_for,
                                       std::span<const int> n_list, const ProbeBox& probe,
                                       const std::function<double(int n)>& delta = {},
                                       double max_constant = 1e6);

struct ConditionResult {
    int condition;
    bool passed;
    std::string detail;
};

struct ValidationReport {
    std::vector<ConditionResult> results;
    double ellipticity_lower = 0.0;  // c
    double ellipticity_upper = 0.0;  // C
    double sampled_lower = 0.0;      // min theta^T a theta over sampled directions
    double drift_sup = 0.0;
    double diffusion_sup = 0.0;
    double drift_lipschitz = 0.0;
    double diffusion_lipschitz = 0.0;
    double moment_error = 0.0;
    double drift_gap = 0.0;
    double covariance_gap = 0.0;
    double linear_gap = 0.0;

    [[nodiscard]] bool passed(int condition) const;
    [[nodiscard]] bool all_passed() const;
};

/// Checks conditions 1-5 by sampling on the probe box. Failures are recorded
/// in the report; nothing is thrown for a failed condition.
/// Condition 5 passes when every gap is at most `rate_constant / n`.
ValidationReport validate_conditions(const DiffusionModel& model, const ChainSpec& chain, const ProbeBox& probe,
                                     double rate_constant = 100.0);

}  // namespace tdx
