#include "tdx/harness.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace tdx;
namespace fs = std::filesystem;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }

bool raises(ErrorCode code, const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code() == code;
    }
    return false;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("tdx_harness_" + name);
    fs::remove_all(dir);
    return dir;
}

std::vector<std::string> lines_of(const fs::path& file) {
    std::ifstream in(file);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

ConvergenceConfig small_vasicek() {
    ConvergenceConfig cfg;
    cfg.model = acceptance_vasicek();
    cfg.closed_form = VasicekParams{0.05, 2.0, 0.1};
    cfg.n_list = {8, 16, 32};
    return cfg;
}

DiffusionModel bounded_drift() {
    DiffusionModel model;
    model.b = MatrixFunction::zero(1);
    model.m = [](double, const Vector& x) { return scalar(0.1 * std::sin(x(0))); };
    model.sigma = [](double, const Vector&) { return Matrix::Constant(1, 1, 0.2); };
    model.x0 = scalar(0.5);
    model.name = "bounded";
    return model;
}

}  // namespace

TEST(ConvergenceConfig, Validation) {
    auto with = [](const std::function<void(ConvergenceConfig&)>& edit) {
        ConvergenceConfig cfg = small_vasicek();
        edit(cfg);
        return raises(ErrorCode::ConfigInvalid, [&] { cfg.check(); });
    };
    EXPECT_FALSE(with([](ConvergenceConfig&) {}));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.n_list.clear(); }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.n_list = {16, 8}; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.n_list = {8, 8}; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.n_ref_multiplier = 3; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.sprime = 0; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.kde_paths = 10; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.threads = 0; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.grid.cells_per_sd = 0.0; }));
    EXPECT_TRUE(with([](ConvergenceConfig& c) { c.model = acceptance_heston(); }));  // closed form is 1-d
    EXPECT_EQ(small_vasicek().n_ref(), 256);
}

TEST(FitLogLog, ExactPowerLaw) {
    const std::vector<int> n{8, 16, 32, 64};
    std::vector<double> d;
    for (int v : n) d.push_back(3.0 * std::pow(v, -0.5));
    const auto fit = fit_log_log(n, d);
    EXPECT_NEAR(fit.slope, -0.5, 1e-14);
    EXPECT_NEAR(fit.intercept, std::log(3.0), 1e-13);
    const auto none = fit_log_log({8}, {1.0});
    EXPECT_EQ(none.slope, 0.0);
}

TEST(ConvergenceStudy, VasicekClosedForm) {
    ConvergenceConfig cfg = small_vasicek();
    cfg.out_dir = scratch("vasicek");
    const auto report = run_convergence_study(cfg);
    EXPECT_FALSE(report.kde_pipeline);
    EXPECT_FALSE(report.self_reference);
    ASSERT_EQ(report.n.size(), 3u);
    EXPECT_TRUE(report.monotone_forward);
    EXPECT_TRUE(report.monotone_pullback);
    EXPECT_LE(report.fit_forward.slope, -0.4);
    EXPECT_LE(report.fit_pullback.slope, -0.4);
    EXPECT_TRUE(report.passed());
    EXPECT_NEAR(report.kappa, std::exp(2.0), 1e-6);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_LE(report.pushforward[i], (1.0 + report.kappa * report.kappa) * report.pullback[i] * (1.0 + 1e-12));
        EXPECT_GT(report.forward[i], 0.0);
    }

    const auto rows = lines_of(cfg.out_dir / "convergence.csv");
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0], "n,dist_forward_weight,dist_pullback_weight,slope_so_far");
    EXPECT_EQ(rows[1].substr(0, 2), "8,");
    EXPECT_NE(rows[1].find("nan"), std::string::npos);
    EXPECT_EQ(rows[3].substr(0, 3), "32,");
    fs::remove_all(cfg.out_dir);
}

TEST(ConvergenceStudy, ZeroLinearPartSelfReference) {
    ConvergenceConfig cfg;
    cfg.model = bounded_drift();
    cfg.n_list = {8, 16, 32};
    cfg.n_ref_multiplier = 4;
    const auto report = run_convergence_study(cfg);
    EXPECT_TRUE(report.self_reference);
    EXPECT_EQ(report.n_ref, 128);
    EXPECT_EQ(report.kappa, 1.0);
    EXPECT_TRUE(report.monotone_forward);
    EXPECT_TRUE(report.monotone_pullback);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(report.forward[i], report.pullback[i], 1e-15);
}

TEST(ConvergenceStudy, ThreadCountDoesNotChangeResults) {
    ConvergenceConfig cfg = small_vasicek();
    cfg.n_list = {8, 16};
    const auto one = run_convergence_study(cfg);
    cfg.threads = 2;
    const auto two = run_convergence_study(cfg);
    EXPECT_EQ(one.forward, two.forward);
    EXPECT_EQ(one.pullback, two.pullback);
}

TEST(ConvergenceStudy, KernelEstimatePipeline) {
    ConvergenceConfig cfg;
    cfg.model = acceptance_heston();
    cfg.n_list = {8, 16};
    cfg.n_ref_multiplier = 4;
    cfg.kde_paths = 2000;
    cfg.grid.kde_points = 41;
    cfg.threads = 2;
    const auto report = run_convergence_study(cfg);
    EXPECT_TRUE(report.kde_pipeline);
    EXPECT_TRUE(report.self_reference);
    ASSERT_EQ(report.forward.size(), 2u);
    for (double d : report.forward) {
        EXPECT_TRUE(std::isfinite(d));
        EXPECT_GT(d, 0.0);
    }
    EXPECT_GE(report.kappa, 1.0);
}

TEST(PlotData, EmptyAndFullReports) {
    const fs::path dir = scratch("plot");
    ConvergenceReport empty;
    const auto files = emit_plot_data(empty, dir, "empty");
    ASSERT_EQ(files.size(), 2u);
    EXPECT_EQ(lines_of(files[0]), (std::vector<std::string>{
                                      "n,log_n,dist_forward_weight,log_forward,dist_pullback_weight,log_pullback"}));

    ConvergenceReport full;
    for (int n : {8, 16, 32, 64, 128}) {
        full.n.push_back(n);
        full.forward.push_back(2.0 / n);
        full.pullback.push_back(1.0 / n);
    }
    full.fit_forward = fit_log_log(full.n, full.forward);
    full.fit_pullback = fit_log_log(full.n, full.pullback);
    const auto written = emit_plot_data(full, dir);
    EXPECT_EQ(written[0].filename(), "convergence_loglog.csv");
    EXPECT_EQ(lines_of(written[0]).size(), 6u);
    std::ifstream script(written[1]);
    std::stringstream text;
    text << script.rdbuf();
    EXPECT_NE(text.str().find("plot 'convergence_loglog.csv'"), std::string::npos);
    EXPECT_NE(text.str().find("f(x) = "), std::string::npos);
    fs::remove_all(dir);
}

TEST(ChainDensity, VasicekCloseToClosedForm) {
    const auto field = chain_density(acceptance_vasicek(), 128);
    EXPECT_NEAR(field.integral(), 1.0, 1e-6);
    const auto closed = vasicek_field(0.05, 2.0, 0.1, 0.0, 1.0, 0.03, field.grid);
    double gap = 0.0;
    for (std::size_t i = 0; i < field.values.size(); ++i)
        gap = std::max(gap, std::abs(field.values[i] - closed.values[i]));
    EXPECT_LE(gap, 0.02 * closed.peak());
    EXPECT_TRUE(raises(ErrorCode::InvalidParameter, [] { (void)chain_density(acceptance_heston(), 8); }));
}

TEST(Examples, UnknownName) {
    EXPECT_TRUE(raises(ErrorCode::UnknownExample, [] { (void)run_example("cir", scratch("unknown")); }));
}

TEST(Examples, AllPass) {
    for (const char* name : {"vasicek", "heston", "koo-linton"}) {
        const fs::path dir = scratch(name);
        const auto r = run_example(name, dir, 5, 2);
        EXPECT_TRUE(r.passed) << name;
        EXPECT_FALSE(r.metrics.empty()) << name;
        for (const auto& f : r.files) EXPECT_TRUE(fs::exists(f)) << f;
        fs::remove_all(dir);
    }
}

TEST(Examples, VasicekResiduals) {
    EXPECT_LE(vasicek_ode_residual(0.05, 2.0, 0.03, 256), 1e-12);
    const RandomStream stream(9);
    const double coarse = vasicek_coupling_residual(0.05, 2.0, 0.1, 0.03, 100, 200, stream);
    const double fine = vasicek_coupling_residual(0.05, 2.0, 0.1, 0.03, 400, 200, stream);
    EXPECT_GT(coarse, 0.0);
    EXPECT_NEAR(std::log(coarse / fine) / std::log(4.0), 1.0, 0.2);
}

TEST(Acceptance, ResultFormatting) {
    CriterionResult r{3, "conjugation identity", true, "residual 1e-16", 0.25};
    EXPECT_EQ(format_result(r), "[PASS] 3 conjugation identity: residual 1e-16 (0.25 s)");
    r.passed = false;
    EXPECT_EQ(format_result(r).substr(0, 7), "[FAIL] ");
}

TEST(Acceptance, AnalyticCriteria) {
    EXPECT_TRUE(criterion_fundamental_accuracy().passed);
    EXPECT_TRUE(criterion_exp_bound().passed);
}
