#pragma once

#include "tdx/fundmat.hpp"
#include "tdx/models.hpp"

#include <memory>
#include <vector>

namespace tdx {

/// Diffusion in backtracked coordinates Ytilde = Phi^{-1}(t) Y:
///   dYtilde = mtilde(t, Ytilde) dt + sigmatilde(t, Ytilde) dB,
///   mtilde(t, x) = Phi^{-1}(t) m(t, Phi(t) x),
///   sigmatilde(t, x) = Phi^{-1}(t) sigma(t, Phi(t) x).
/// `base` has a zero linear part and the original initial state.
struct ExcludedDiffusion {
    DiffusionModel base;
    std::shared_ptr<const FundamentalMatrixTable> phi;  // continuous

    /// atilde = sigmatilde sigmatilde^T = Phi^{-1} a(t, Phi x) Phi^{-T}
    [[nodiscard]] Matrix diffusion_matrix(double t, const Vector& x) const { return base.diffusion_matrix(t, x); }
};

/// Chain in backtracked coordinates Xtilde_n(kh) = Phi_n^{-1}(kh) X_n(kh).
/// Its drift is mtilde_n(kh, x) = Phi_n^{-1}(kh) (I + h b_n(kh))^{-1} m_n(kh, Phi_n(kh) x)
/// and its innovations are eps~ = Phi_n^{-1}(kh) (I + h b_n(kh))^{-1} eps.
struct ExcludedChain {
    ChainSpec base;
    std::shared_ptr<const FundamentalMatrixTable> phi_n;  // discrete
    /// Phi_n^{-1}(kh) (I + h b_n(kh))^{-1}, k = 0..n-1.
    std::shared_ptr<const std::vector<Matrix>> step_pullback;
};

/// Builds the continuous fundamental matrix of the model's b on a grid with
/// `table_steps` cells and `refinement` RK4 sub-steps per cell.
ExcludedDiffusion exclude_diffusion(const DiffusionModel& model, int refinement = 100, int table_steps = 100);

/// Requires h ||b_n(kh)|| <= 1/2 (StepTooLarge otherwise).
ExcludedChain exclude_chain(const ChainSpec& spec);

/// Conditional density of eps~((k+1)h) given Xtilde(kh) = xt:
///   z -> |det Phi_n((k+1)h)| q_{n, kh, Phi_n(kh) xt}(Phi_n((k+1)h) z).
std::function<double(const Vector&)> transform_innovation_density(const InnovationFamily& q,
                                                                  const FundamentalMatrixTable& phi_n, int k,
                                                                  const Vector& x_tilde);

/// Phi_n^{-1}(([tn]+1)h) a_n(t, Phi_n([tn]h) xt) Phi_n^{-1}(([tn]+1)h)^T
Matrix transformed_covariance(const MatrixField& a_n, const FundamentalMatrixTable& phi_n, double t,
                              const Vector& x_tilde);

/// Continuous counterpart Phi^{-1}(t) a(t, Phi(t) xt) Phi^{-1}(t)^T.
Matrix transformed_covariance(const DiffusionModel& model, const FundamentalMatrixTable& phi, double t,
                              const Vector& x_tilde);

/// x = Phi(k) xt and xt = Phi^{-1}(k) x on grid index k ...
Vector restore_state(const FundamentalMatrixTable& phi, int k, const Vector& x_tilde);
Vector pull_state(const FundamentalMatrixTable& phi, int k, const Vector& x);
/// ... or at time t (continuous tables may use any t in [0, T]).
Vector restore_state(const FundamentalMatrixTable& phi, double t, const Vector& x_tilde);
Vector pull_state(const FundamentalMatrixTable& phi, double t, const Vector& x);

}  // namespace tdx
