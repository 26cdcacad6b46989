#include "tdx/trendex.hpp"

#include <cmath>

namespace tdx {

ExcludedDiffusion exclude_diffusion(const DiffusionModel& model, int refinement, int table_steps) {
    model.check();
    auto phi = std::make_shared<const FundamentalMatrixTable>(
        solve_continuous(model.b, TimeGrid(table_steps, model.horizon), refinement));

    ExcludedDiffusion out;
    out.phi = phi;
    out.base.dim = model.dim;
    out.base.horizon = model.horizon;
    out.base.b = MatrixFunction::zero(model.dim);
    auto m = model.m;
    auto sigma = model.sigma;
    out.base.m = [phi, m](double t, const Vector& x) -> Vector {
        const Matrix fwd = phi->phi_at(t);
        return fwd.partialPivLu().solve(m(t, fwd * x));
    };
    out.base.sigma = [phi, sigma](double t, const Vector& x) -> Matrix {
        const Matrix fwd = phi->phi_at(t);
        return fwd.partialPivLu().solve(sigma(t, fwd * x));
    };
    out.base.x0 = model.x0;  // Phi(0) = I
    out.base.name = model.name + "-excluded";
    return out;
}

ExcludedChain exclude_chain(const ChainSpec& spec) {
    spec.check();
    auto phi_n = std::make_shared<const FundamentalMatrixTable>(build_discrete(spec.b_n, spec.grid));
    const int d = spec.dim;
    const int n = spec.n();
    const double h = spec.grid.step();

    auto pullback = std::make_shared<std::vector<Matrix>>();
    pullback->reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        const Matrix factor = Matrix::Identity(d, d) + h * spec.b_n(spec.grid.point(k));
        pullback->push_back(phi_n->phi_inv(k) * factor.inverse());
    }
    std::shared_ptr<const std::vector<Matrix>> pull = pullback;

    ExcludedChain out;
    out.phi_n = phi_n;
    out.step_pullback = pull;
    ChainSpec& base = out.base;
    base.dim = d;
    base.grid = spec.grid;
    base.b_n = MatrixFunction::zero(d);
    base.x0 = spec.x0;  // Phi_n(0) = I
    base.name = spec.name + "-excluded";

    const TimeGrid grid = spec.grid;
    auto m_n = spec.m_n;
    base.m_n = [phi_n, pull, m_n, grid](double t, const Vector& x) -> Vector {
        const int k = grid.index_of(t);
        return (*pull)[static_cast<std::size_t>(k)] * m_n(t, phi_n->phi(k) * x);
    };

    const InnovationFamily source = spec.innovations;
    InnovationFamily& fam = base.innovations;
    fam.dim = d;
    fam.moment_order = source.moment_order;
    fam.gaussian = source.gaussian;
    fam.condition4_attested = source.condition4_attested;
    fam.covariance = [phi_n, source](double t, const Vector& x) {
        return transformed_covariance(source.covariance, *phi_n, t, x);
    };
    fam.sampler = [phi_n, pull, source, grid](int n_steps, double t, const Vector& x, StepRng& rng) -> Vector {
        const int k = grid.index_of(t);
        return (*pull)[static_cast<std::size_t>(k)] * source.sampler(n_steps, t, phi_n->phi(k) * x, rng);
    };
    if (source.has_density()) {
        fam.density = [phi_n, source, grid](int, double t, const Vector& x, const Vector& z) {
            return transform_innovation_density(source, *phi_n, grid.index_of(t), x)(z);
        };
    }
    return out;
}

std::function<double(const Vector&)> transform_innovation_density(const InnovationFamily& q,
                                                                  const FundamentalMatrixTable& phi_n, int k,
                                                                  const Vector& x_tilde) {
    const TimeGrid& grid = phi_n.grid();
    if (k < 0 || k >= grid.steps()) throw Error(ErrorCode::InvalidParameter, "need 0 <= k < n");
    if (!q.has_density()) throw Error(ErrorCode::InvalidParameter, "innovation family has no density");
    const Matrix next = phi_n.phi(k + 1);
    const double jac = std::abs(phi_n.det(k + 1));
    if (jac < kSingularityTolerance) throw Error(ErrorCode::SingularFundamentalMatrix, "det Phi_n((k+1)h) ~ 0");
    const Vector state = phi_n.phi(k) * x_tilde;
    const double t = grid.point(k);
    const int n = grid.steps();
    auto density = q.density;
    return [=](const Vector& z) { return jac * density(n, t, state, next * z); };
}

Matrix transformed_covariance(const MatrixField& a_n, const FundamentalMatrixTable& phi_n, double t,
                              const Vector& x_tilde) {
    const TimeGrid& grid = phi_n.grid();
    const int k = grid.floor_index(t);
    if (k >= grid.steps()) throw Error(ErrorCode::InvalidParameter, "transformed covariance needs t < T");
    const Matrix& inv_next = phi_n.phi_inv(k + 1);
    const Matrix a = a_n(t, phi_n.phi(k) * x_tilde);
    const Matrix out = inv_next * a * inv_next.transpose();
    return 0.5 * (out + out.transpose());
}

Matrix transformed_covariance(const DiffusionModel& model, const FundamentalMatrixTable& phi, double t,
                              const Vector& x_tilde) {
    const Matrix fwd = phi.phi_at(t);
    const Matrix inv = fwd.inverse();
    const Matrix out = inv * model.diffusion_matrix(t, fwd * x_tilde) * inv.transpose();
    return 0.5 * (out + out.transpose());
}

Vector restore_state(const FundamentalMatrixTable& phi, int k, const Vector& x_tilde) { return phi.phi(k) * x_tilde; }

Vector pull_state(const FundamentalMatrixTable& phi, int k, const Vector& x) { return phi.phi_inv(k) * x; }

Vector restore_state(const FundamentalMatrixTable& phi, double t, const Vector& x_tilde) {
    return phi.phi_at(t) * x_tilde;
}

Vector pull_state(const FundamentalMatrixTable& phi, double t, const Vector& x) {
    return phi.phi_at(t).partialPivLu().solve(x);
}

}  // namespace tdx
