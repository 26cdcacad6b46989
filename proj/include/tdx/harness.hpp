#pragma once

#include "tdx/chain.hpp"
#include "tdx/config.hpp"
#include "tdx/density.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tdx {

/// Spatial grids are sized from the model: a band of `sd_window` standard
/// deviations around the mean path, plus drift slack, resolved with at least
/// `cells_per_sd` cells per one-step kernel standard deviation.
struct GridParams {
    double sd_window = 12.0;
    double cells_per_sd = 4.0;
    int kde_points = 81;  // per axis, 2-d pipeline
};

struct ConvergenceConfig {
    DiffusionModel model;
    std::optional<VasicekParams> closed_form;  // limit density; self-convergence otherwise
    std::vector<int> n_list{8, 16, 32, 64, 128};
    int n_ref_multiplier = 8;
    int sprime = 2;
    GridParams grid;
    std::uint64_t seed = 1;
    int kde_paths = 20000;
    std::filesystem::path out_dir;  // empty: nothing written
    int threads = 1;

    [[nodiscard]] int n_ref() const { return n_ref_multiplier * n_list.back(); }
    /// ConfigInvalid unless n_list is non-empty and strictly increasing,
    /// n_ref >= 4 max(n_list), S' >= 1 and the model is 1-d or 2-d.
    void check() const;
};

/// Least-squares line through (log n, log distance).
struct LogLogFit {
    double slope = 0.0;
    double intercept = 0.0;
};
LogLogFit fit_log_log(const std::vector<int>& n, const std::vector<double>& distance);

struct ConvergenceReport {
    std::string model;
    bool kde_pipeline = false;
    bool self_reference = false;
    int n_ref = 0;
    std::vector<int> n;
    std::vector<double> forward;      // weight on u - x, u = Phi(1) y
    std::vector<double> pullback;     // weight on Phi^{-1}(1) u - x
    std::vector<double> pushforward;  // weight on u - Phi(1) x
    double kappa = 1.0;
    LogLogFit fit_forward;
    LogLogFit fit_pullback;
    bool monotone_forward = false;
    bool monotone_pullback = false;
    std::vector<double> stage_seconds;  // per n, then the reference
    double seconds = 0.0;

    /// Strictly decreasing distances with fitted slope <= max_slope, both weights.
    [[nodiscard]] bool passed(double max_slope = -0.4) const;
    /// `n,dist_forward_weight,dist_pullback_weight,slope_so_far`; the running
    /// slope is fitted on the forward distances up to that row.
    void write_csv(std::ostream& out) const;
};

/// 1-d: deterministic density evolution of each excluded chain, mapped back
/// with the discrete fundamental matrix and compared with the limit density.
/// 2-d: the same pipeline with kernel estimates from simulated paths.
ConvergenceReport run_convergence_study(const ConvergenceConfig& config);

/// Reads the optional "study" object of a model config.
ConvergenceConfig convergence_config_from(const ModelConfig& model, const nlohmann::json& doc);

/// Density of X_n(T) in original coordinates from the excluded chain, on a
/// grid sized from the chain's mean path and spread (1-d only).
DensityField chain_density(const DiffusionModel& model, int n, const GridParams& params = {}, int sprime = 2);

/// {n,log_n,dist_forward_weight,log_forward,dist_pullback_weight,log_pullback}
/// CSV plus a gnuplot script overlaying the fitted lines. Returns both paths.
std::vector<std::filesystem::path> emit_plot_data(const ConvergenceReport& report,
                                                  const std::filesystem::path& out_dir,
                                                  const std::string& stem = "convergence");

// ----------------------------------------------------------------- examples

struct ExampleResult {
    std::string name;
    std::map<std::string, double> metrics;
    bool passed = false;
    std::vector<std::filesystem::path> files;
};

/// vasicek, heston or koo-linton; UnknownExample otherwise.
ExampleResult run_example(const std::string& name, const std::filesystem::path& out_dir, std::uint64_t seed = 1,
                          int threads = 1);

/// Excluded solution of the deterministic Vasicek ODE (sigma = 0), integrated
/// with RK4 on n cells and restored; max gap to the closed-form solution.
double vasicek_ode_residual(double alpha, double beta, double x0, int n, int refinement = 16);

/// Euler-Maruyama on the excluded Vasicek SDE restored by Phi, against the
/// closed-form solution with the stochastic integral discretized on the same
/// increments. Mean over paths of the terminal gap.
double vasicek_coupling_residual(double alpha, double beta, double sigma, double x0, int fine_n, int paths,
                                 const RandomStream& stream);

// --------------------------------------------------------------- acceptance

struct CriterionResult {
    int id = 0;
    std::string title;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct AcceptanceOptions {
    std::filesystem::path out_dir = "acceptance-out";
    std::uint64_t seed = 20240501;
    int threads = 1;
    int reproducibility_threads = 8;
};

CriterionResult criterion_fundamental_accuracy();
CriterionResult criterion_exp_bound();
CriterionResult criterion_conjugation(const AcceptanceOptions& options);
CriterionResult criterion_moment_identities(const AcceptanceOptions& options);
CriterionResult criterion_transform_exactness(const AcceptanceOptions& options);
CriterionResult criterion_vasicek_convergence(const AcceptanceOptions& options);
CriterionResult criterion_nonlinear_convergence(const AcceptanceOptions& options);
CriterionResult criterion_tail_bound(const AcceptanceOptions& options);
/// Re-runs criteria 3-7 with another thread count and compares the CSVs of
/// both runs byte for byte.
CriterionResult criterion_reproducibility(const AcceptanceOptions& options);

/// Runs criteria 1-9, calling `report` as each one finishes.
std::vector<CriterionResult> run_acceptance_suite(const AcceptanceOptions& options,
                                                  const std::function<void(const CriterionResult&)>& report = {});

/// "[PASS] 3 conjugation identity ... (0.12 s)"
std::string format_result(const CriterionResult& result);

/// The built-ins used by the acceptance suite and the examples.
DiffusionModel acceptance_vasicek();
DiffusionModel acceptance_heston();
DiffusionModel acceptance_nonlinear();

}  // namespace tdx
