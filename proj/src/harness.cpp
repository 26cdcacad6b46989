#include "tdx/harness.hpp"

#include "tdx/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

namespace tdx {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string num(double v, int digits = 3) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

std::ofstream open_out(const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidParameter, "cannot write " + file.string());
    return out;
}

Matrix continuous_phi_at_horizon(const DiffusionModel& model) {
    const auto table = solve_continuous(model.b, TimeGrid(64, model.horizon), 64);
    return table.phi(64);
}

}  // namespace

// ------------------------------------------------------------- config & fit

void ConvergenceConfig::check() const {
    auto invalid = [](const std::string& why) { throw Error(ErrorCode::ConfigInvalid, why); };
    if (n_list.empty()) invalid("n list is empty");
    if (n_list.front() < 1) invalid("n values must be positive");
    for (std::size_t i = 1; i < n_list.size(); ++i)
        if (n_list[i] <= n_list[i - 1]) invalid("n list must be strictly increasing");
    if (n_ref_multiplier < 4) invalid("n_ref must be at least 4 x max(n list)");
    if (sprime < 1) invalid("S' must be >= 1");
    if (model.dim != 1 && model.dim != 2) invalid("convergence studies support d = 1 or d = 2");
    if (closed_form && model.dim != 1) invalid("closed-form limit is 1-d");
    if (!(grid.sd_window > 0.0) || !(grid.cells_per_sd > 0.0) || grid.kde_points < 5)
        invalid("grid parameters must be positive (kde_points >= 5)");
    if (kde_paths < 1000) invalid("kde_paths must be >= 1000");
    if (threads < 1) invalid("threads must be >= 1");
    model.check();
}

LogLogFit fit_log_log(const std::vector<int>& n, const std::vector<double>& distance) {
    LogLogFit fit;
    const std::size_t count = std::min(n.size(), distance.size());
    if (count < 2) return fit;
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double x = std::log(static_cast<double>(n[i]));
        const double y = std::log(distance[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double c = static_cast<double>(count);
    const double denom = c * sxx - sx * sx;
    if (denom <= 0.0) return fit;
    fit.slope = (c * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / c;
    return fit;
}

namespace {

bool strictly_decreasing(const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] < v[i - 1])) return false;
    return !v.empty();
}

}  // namespace

bool ConvergenceReport::passed(double max_slope) const {
    return n.size() >= 2 && monotone_forward && monotone_pullback && fit_forward.slope <= max_slope &&
           fit_pullback.slope <= max_slope;
}

void ConvergenceReport::write_csv(std::ostream& out) const {
    out << "n,dist_forward_weight,dist_pullback_weight,slope_so_far\n";
    char buf[128];
    for (std::size_t i = 0; i < n.size(); ++i) {
        const std::vector<int> ns(n.begin(), n.begin() + static_cast<std::ptrdiff_t>(i + 1));
        const std::vector<double> ds(forward.begin(), forward.begin() + static_cast<std::ptrdiff_t>(i + 1));
        const double slope = i == 0 ? std::nan("") : fit_log_log(ns, ds).slope;
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", n[i], forward[i], pullback[i], slope);
        out << buf;
    }
}

// --------------------------------------------------------- 1-d pipeline

namespace {

// Mean path and spread bound of a 1-d chain in original coordinates.
struct Band {
    std::vector<double> lo;
    std::vector<double> hi;
    std::vector<double> a_min;  // smallest sampled a(kh, .) on the band
};

Band chain_band(const ChainSpec& spec, double window) {
    const int n = spec.n();
    const double h = spec.grid.step();
    Band band;
    band.lo.resize(static_cast<std::size_t>(n) + 1);
    band.hi.resize(static_cast<std::size_t>(n) + 1);
    band.a_min.resize(static_cast<std::size_t>(n));
    double mean = spec.x0(0);
    double var = 0.0;
    double slack = 0.0;
    band.lo[0] = band.hi[0] = mean;
    Vector x(1);
    for (int k = 0; k < n; ++k) {
        const double t = spec.grid.point(k);
        const double b = spec.b_n(t)(0, 0);
        const double sd = std::sqrt(var);
        double a_lo = std::numeric_limits<double>::infinity();
        double a_hi = 0.0;
        double m_lo = std::numeric_limits<double>::infinity();
        double m_hi = -m_lo;
        for (int j = -4; j <= 4; ++j) {
            x(0) = mean + 0.75 * j * sd;
            const double a = spec.innovations.covariance(t, x)(0, 0);
            const double m = spec.m_n(t, x)(0);
            a_lo = std::min(a_lo, a);
            a_hi = std::max(a_hi, a);
            m_lo = std::min(m_lo, m);
            m_hi = std::max(m_hi, m);
        }
        x(0) = mean;
        const double growth = 1.0 + h * b;
        mean += h * (b * mean + spec.m_n(t, x)(0));
        var = growth * growth * var + h * a_hi;
        slack = std::abs(growth) * slack + h * (m_hi - m_lo);
        band.a_min[static_cast<std::size_t>(k)] = a_lo;
        const double w = window * std::sqrt(var) + slack;
        band.lo[static_cast<std::size_t>(k) + 1] = mean - w;
        band.hi[static_cast<std::size_t>(k) + 1] = mean + w;
    }
    return band;
}

struct Stage {
    int n = 0;
    ChainSpec chain;
    ExcludedChain excluded;
    Band band;
    double excluded_lo = 0.0;  // union of the band pulled back by Phi_n^{-1}(kh)
    double excluded_hi = 0.0;
    double spacing = 0.0;  // target spacing in excluded coordinates
};

Stage make_stage(const DiffusionModel& model, int n, int sprime, const GridParams& params, double window) {
    Stage s;
    s.n = n;
    s.chain = euler_chain(model, n, sprime);
    s.excluded = exclude_chain(s.chain);
    s.band = chain_band(s.chain, window);
    const auto& phi = *s.excluded.phi_n;
    s.excluded_lo = std::numeric_limits<double>::infinity();
    s.excluded_hi = -s.excluded_lo;
    double sd_min = std::numeric_limits<double>::infinity();
    const double h = s.chain.grid.step();
    for (int k = 0; k <= n; ++k) {
        const double psi = phi.phi_inv(k)(0, 0);
        const double a = psi * s.band.lo[static_cast<std::size_t>(k)];
        const double b = psi * s.band.hi[static_cast<std::size_t>(k)];
        s.excluded_lo = std::min({s.excluded_lo, a, b});
        s.excluded_hi = std::max({s.excluded_hi, a, b});
        if (k < n)
            sd_min = std::min(sd_min, std::sqrt(h * s.band.a_min[static_cast<std::size_t>(k)]) *
                                          std::abs(phi.phi_inv(k + 1)(0, 0)));
    }
    if (!(sd_min > 0.0)) throw Error(ErrorCode::InvalidParameter, "degenerate diffusion on the density band");
    s.spacing = sd_min / params.cells_per_sd;
    return s;
}

// Grid in excluded coordinates whose nodes include the exact pull-back of
// every target node, extended by whole cells to cover the band.
SpatialGrid excluded_grid(const Stage& s, const SpatialGrid& target) {
    const Axis& g = target.axis(0);
    const double psi = s.excluded.phi_n->phi_inv(s.n)(0, 0);
    const double a = psi * g.min;
    const double b = psi * g.max;
    const double lo = std::min(a, b);
    const double hi = std::max(a, b);
    const double step = (hi - lo) / (g.points - 1);
    const int below = std::max(0, static_cast<int>(std::ceil((lo - s.excluded_lo) / step)));
    const int above = std::max(0, static_cast<int>(std::ceil((s.excluded_hi - hi) / step)));
    return SpatialGrid({Axis{lo - below * step, hi + above * step, g.points + below + above}});
}

DensityField run_stage(const Stage& s, const SpatialGrid& target) {
    const DensityField evolved = evolve_chain_density(s.excluded.base, excluded_grid(s, target));
    return transform_density(evolved, *s.excluded.phi_n, 0.0, s.chain.grid.horizon(), TransformDirection::ToOriginal,
                             target);
}

struct StudyOutcome {
    std::vector<DensityField> fields;  // per n
    DensityField limit;
    std::vector<double> seconds;
};

StudyOutcome run_density_stages(const ConvergenceConfig& cfg, double window, bool self_reference) {
    std::vector<int> ns = cfg.n_list;
    if (self_reference) ns.push_back(cfg.n_ref());
    std::vector<Stage> stages(ns.size());
    parallel_for(ns.size(), cfg.threads, [&](std::size_t i) {
        stages[i] = make_stage(cfg.model, ns[i], cfg.sprime, cfg.grid, window);
    });

    // One target grid for every n: the union of the terminal bands, resolved
    // finely enough for the tightest stage after pull-back.
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double dx = std::numeric_limits<double>::infinity();
    for (const Stage& s : stages) {
        lo = std::min(lo, s.band.lo.back());
        hi = std::max(hi, s.band.hi.back());
        dx = std::min(dx, s.spacing / std::abs(s.excluded.phi_n->phi_inv(s.n)(0, 0)));
    }
    const int points = static_cast<int>(std::ceil((hi - lo) / dx)) + 1;
    if (points > 400000) throw Error(ErrorCode::GridTooSmall, "density grid would need more than 400000 points");
    const SpatialGrid target({Axis{lo, hi, points}});

    StudyOutcome out;
    std::vector<std::optional<DensityField>> fields(stages.size());
    out.seconds.assign(stages.size(), 0.0);
    parallel_for(stages.size(), cfg.threads, [&](std::size_t i) {
        const auto start = Clock::now();
        fields[i] = run_stage(stages[i], target);
        out.seconds[i] = since(start);
    });
    for (std::size_t i = 0; i < cfg.n_list.size(); ++i) out.fields.push_back(std::move(*fields[i]));
    if (self_reference) {
        out.limit = std::move(*fields.back());
    } else {
        const auto& p = *cfg.closed_form;
        out.limit = vasicek_field(p.alpha, p.beta, p.sigma, 0.0, cfg.model.horizon, cfg.model.x0(0), target);
    }
    return out;
}

}  // namespace

DensityField chain_density(const DiffusionModel& model, int n, const GridParams& params, int sprime) {
    if (model.dim != 1) throw Error(ErrorCode::InvalidParameter, "density evolution is 1-d");
    double window = params.sd_window;
    for (int attempt = 0;; ++attempt) {
        try {
            const Stage s = make_stage(model, n, sprime, params, window);
            const double dx = s.spacing / std::abs(s.excluded.phi_n->phi_inv(n)(0, 0));
            const double lo = s.band.lo.back();
            const double hi = s.band.hi.back();
            const SpatialGrid target({Axis{lo, hi, static_cast<int>(std::ceil((hi - lo) / dx)) + 1}});
            DensityField field = run_stage(s, target);
            if (field.boundary_ratio() <= 1e-12 || attempt == 3) return field;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::GridTooSmall || attempt == 3) throw;
        }
        window *= 1.5;
    }
}

namespace {

// --------------------------------------------------------- 2-d pipeline

SpatialGrid box_grid(const Vector& lo, const Vector& hi, int points) {
    std::vector<Axis> axes;
    for (Eigen::Index i = 0; i < lo.size(); ++i) axes.push_back({lo(i), hi(i), points});
    return SpatialGrid(std::move(axes));
}

StudyOutcome run_kde_stages(const ConvergenceConfig& cfg) {
    std::vector<int> ns = cfg.n_list;
    ns.push_back(cfg.n_ref());
    const int d = cfg.model.dim;
    const double horizon = cfg.model.horizon;

    std::vector<ExcludedChain> excluded(ns.size());
    std::vector<std::optional<PathEnsemble>> ensembles(ns.size());
    std::vector<double> seconds(ns.size(), 0.0);
    parallel_for(ns.size(), cfg.threads, [&](std::size_t i) {
        const auto start = Clock::now();
        excluded[i] = exclude_chain(euler_chain(cfg.model, ns[i], cfg.sprime));
        ensembles[i] = simulate_chain(excluded[i].base, cfg.kde_paths,
                                      RandomStream(cfg.seed, static_cast<std::uint32_t>(ns[i])), 1);
        seconds[i] = since(start);
    });

    // Target box from the restored reference cloud.
    const auto& ref = *ensembles.back();
    const Matrix& phi_ref = excluded.back().phi_n->phi(ns.back());
    const Matrix cloud = (phi_ref * ref.slice(ns.back()).transpose()).transpose();
    const Vector mean = cloud.colwise().mean();
    const Vector sd = ((cloud.rowwise() - mean.transpose()).array().square().colwise().sum() /
                       static_cast<double>(cloud.rows() - 1))
                          .sqrt();
    const SpatialGrid target = box_grid(mean - 5.0 * sd, mean + 5.0 * sd, cfg.grid.kde_points);

    std::vector<std::optional<DensityField>> fields(ns.size());
    parallel_for(ns.size(), cfg.threads, [&](std::size_t i) {
        const auto start = Clock::now();
        const Matrix inv = excluded[i].phi_n->phi_inv(ns[i]);
        Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
        Vector hi = -lo;
        for (int corner = 0; corner < (1 << d); ++corner) {
            Vector y(d);
            for (int a = 0; a < d; ++a) y(a) = ((corner >> a) & 1) ? target.axis(a).max : target.axis(a).min;
            const Vector z = inv * y;
            lo = lo.cwiseMin(z);
            hi = hi.cwiseMax(z);
        }
        const Vector pad = 0.05 * (hi - lo);
        const SpatialGrid source = box_grid(lo - pad, hi + pad, 2 * cfg.grid.kde_points);
        const DensityField kde = kde_estimate(*ensembles[i], ns[i], source);
        fields[i] = transform_density(kde, *excluded[i].phi_n, 0.0, horizon, TransformDirection::ToOriginal, target);
        seconds[i] += since(start);
    });

    StudyOutcome out;
    for (std::size_t i = 0; i < cfg.n_list.size(); ++i) out.fields.push_back(std::move(*fields[i]));
    out.limit = std::move(*fields.back());
    out.seconds = std::move(seconds);
    return out;
}

}  // namespace

ConvergenceReport run_convergence_study(const ConvergenceConfig& config) {
    config.check();
    const auto start = Clock::now();
    ConvergenceReport report;
    report.model = config.model.name;
    report.kde_pipeline = config.model.dim == 2;
    report.self_reference = !config.closed_form.has_value();
    report.n_ref = report.self_reference ? config.n_ref() : 0;

    StudyOutcome outcome;
    if (report.kde_pipeline) {
        outcome = run_kde_stages(config);
    } else {
        // Retry on wider bands if mass reaches the grid edge.
        double window = config.grid.sd_window;
        for (int attempt = 0;; ++attempt) {
            try {
                outcome = run_density_stages(config, window, report.self_reference);
                double edge = outcome.limit.boundary_ratio();
                for (const auto& f : outcome.fields) edge = std::max(edge, f.boundary_ratio());
                if (edge <= 1e-12 || attempt == 3) break;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::GridTooSmall || attempt == 3) throw;
            }
            window *= 1.5;
        }
    }

    const Matrix phi1 = continuous_phi_at_horizon(config.model);
    for (std::size_t i = 0; i < config.n_list.size(); ++i) {
        const auto dist = weighted_sup_distance(outcome.fields[i], outcome.limit, phi1, config.model.x0, config.sprime);
        report.n.push_back(config.n_list[i]);
        report.forward.push_back(dist.forward);
        report.pullback.push_back(dist.pullback);
        report.pushforward.push_back(dist.pushforward);
        report.kappa = dist.kappa;
    }
    report.fit_forward = fit_log_log(report.n, report.forward);
    report.fit_pullback = fit_log_log(report.n, report.pullback);
    report.monotone_forward = strictly_decreasing(report.forward);
    report.monotone_pullback = strictly_decreasing(report.pullback);
    report.stage_seconds = outcome.seconds;
    report.seconds = since(start);

    if (!config.out_dir.empty()) {
        auto out = open_out(config.out_dir / "convergence.csv");
        report.write_csv(out);
    }
    return report;
}

ConvergenceConfig convergence_config_from(const ModelConfig& model, const nlohmann::json& doc) {
    ConvergenceConfig cfg;
    cfg.model = model.model;
    cfg.closed_form = model.vasicek;
    if (!doc.is_object() || !doc.contains("study")) {
        cfg.check();
        return cfg;
    }
    const auto& s = doc.at("study");
    try {
        if (s.contains("n_list")) cfg.n_list = s.at("n_list").get<std::vector<int>>();
        cfg.n_ref_multiplier = s.value("n_ref_multiplier", cfg.n_ref_multiplier);
        cfg.sprime = s.value("sprime", cfg.sprime);
        cfg.seed = s.value("seed", cfg.seed);
        cfg.kde_paths = s.value("kde_paths", cfg.kde_paths);
        if (s.value("self_reference", false)) cfg.closed_form.reset();
        if (s.contains("grid")) {
            const auto& g = s.at("grid");
            cfg.grid.sd_window = g.value("sd_window", cfg.grid.sd_window);
            cfg.grid.cells_per_sd = g.value("cells_per_sd", cfg.grid.cells_per_sd);
            cfg.grid.kde_points = g.value("kde_points", cfg.grid.kde_points);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, std::string("malformed study block: ") + e.what());
    }
    cfg.check();
    return cfg;
}

std::vector<fs::path> emit_plot_data(const ConvergenceReport& report, const fs::path& out_dir, const std::string& stem) {
    const fs::path csv = out_dir / (stem + "_loglog.csv");
    const fs::path script = out_dir / (stem + ".gp");
    {
        auto out = open_out(csv);
        out << "n,log_n,dist_forward_weight,log_forward,dist_pullback_weight,log_pullback\n";
        char buf[160];
        for (std::size_t i = 0; i < report.n.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", report.n[i],
                          std::log(static_cast<double>(report.n[i])), report.forward[i], std::log(report.forward[i]),
                          report.pullback[i], std::log(report.pullback[i]));
            out << buf;
        }
    }
    {
        auto out = open_out(script);
        char buf[256];
        out << "set datafile separator ','\n"
            << "set key top right\n"
            << "set xlabel 'log n'\n"
            << "set ylabel 'log distance'\n";
        std::snprintf(buf, sizeof buf, "f(x) = %.17g + %.17g * x\ng(x) = %.17g + %.17g * x\n",
                      report.fit_forward.intercept, report.fit_forward.slope, report.fit_pullback.intercept,
                      report.fit_pullback.slope);
        out << buf;
        out << "plot '" << csv.filename().string() << "' using 2:4 skip 1 with points title 'forward weight', \\\n"
            << "     '" << csv.filename().string() << "' using 2:6 skip 1 with points title 'pullback weight', \\\n"
            << "     f(x) title sprintf('slope %.3f', " << num(report.fit_forward.slope, 17) << "), \\\n"
            << "     g(x) title sprintf('slope %.3f', " << num(report.fit_pullback.slope, 17) << ")\n";
    }
    return {csv, script};
}

// ----------------------------------------------------------------- examples

DiffusionModel acceptance_vasicek() { return make_vasicek(0.05, 2.0, 0.1, 0.03); }

DiffusionModel acceptance_heston() {
    ProbeBox probe;
    probe.lower = Vector{{0.0, 0.0}};
    probe.upper = Vector{{4.0, 2.0}};
    return make_heston_like(0.05, 2.0, 0.04, 0.3, capped_sqrt_volatility(1e-4, 1.0), 1.0, 0.04, probe);
}

DiffusionModel acceptance_nonlinear() {
    DiffusionModel model;
    model.dim = 1;
    model.b = MatrixFunction::constant(Matrix::Constant(1, 1, -1.0));
    model.m = [](double, const Vector& x) { return Vector::Constant(1, 0.1 * std::sin(x(0))); };
    model.sigma = [](double, const Vector&) { return Matrix::Constant(1, 1, 0.2); };
    model.x0 = Vector::Constant(1, 0.5);
    model.name = "sine-drift";
    return model;
}

double vasicek_ode_residual(double alpha, double beta, double x0, int n, int refinement) {
    DiffusionModel model;
    model.dim = 1;
    model.b = MatrixFunction::constant(Matrix::Constant(1, 1, -beta));
    model.m = [level = alpha * beta](double, const Vector&) { return Vector::Constant(1, level); };
    model.sigma = [](double, const Vector&) { return Matrix::Zero(1, 1); };
    model.x0 = Vector::Constant(1, x0);
    model.name = "vasicek-ode";
    const ExcludedDiffusion ex = exclude_diffusion(model, 100, n);

    const TimeGrid grid(n, model.horizon);
    const double dt = grid.step() / refinement;
    Vector y = model.x0;
    double worst = 0.0;
    for (int k = 0; k < n; ++k) {
        double t = grid.point(k);
        for (int r = 0; r < refinement; ++r) {
            const Vector k1 = ex.base.m(t, y);
            const Vector k2 = ex.base.m(t + 0.5 * dt, y + 0.5 * dt * k1);
            const Vector k3 = ex.base.m(t + 0.5 * dt, y + 0.5 * dt * k2);
            const Vector k4 = ex.base.m(t + dt, y + dt * k3);
            y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += dt;
        }
        const double tk = grid.point(k + 1);
        const double restored = restore_state(*ex.phi, k + 1, y)(0);
        const double exact = x0 * std::exp(-beta * tk) - alpha * std::expm1(-beta * tk);
        worst = std::max(worst, std::abs(restored - exact));
    }
    return worst;
}

double vasicek_coupling_residual(double alpha, double beta, double sigma, double x0, int fine_n, int paths,
                                 const RandomStream& stream) {
    const DiffusionModel model = make_vasicek(alpha, beta, sigma, x0);
    const ExcludedDiffusion ex = exclude_diffusion(model, 100, fine_n);
    const PathEnsemble tilde = simulate_diffusion_reference(ex.base, fine_n, paths, stream);
    const TimeGrid& grid = tilde.grid();
    const double sqrt_dt = std::sqrt(grid.step());
    double total = 0.0;
    for (int p = 0; p < paths; ++p) {
        double integral = 0.0;  // sum e^{beta s_j} dB_j on the same increments
        for (int k = 0; k < fine_n; ++k)
            integral += std::exp(beta * grid.point(k)) * sqrt_dt * stream.normals(static_cast<std::uint64_t>(p),
                                                                                   static_cast<std::uint32_t>(k), 1)(0);
        const double t = grid.horizon();
        const double exact = x0 * std::exp(-beta * t) - alpha * std::expm1(-beta * t) +
                             sigma * std::exp(-beta * t) * integral;
        const double restored = restore_state(*ex.phi, fine_n, tilde.state(p, fine_n))(0);
        total += std::abs(restored - exact);
    }
    return total / paths;
}

namespace {

ExampleResult example_vasicek(const fs::path& out_dir, std::uint64_t seed) {
    ExampleResult r;
    r.name = "vasicek";
    const double ode = vasicek_ode_residual(0.05, 2.0, 0.03, 256);
    r.metrics["ode_residual_n256"] = ode;
    const std::vector<int> fine{256, 512, 1024, 2048};
    std::vector<double> residual;
    const RandomStream stream(seed, 11);
    for (int f : fine) residual.push_back(vasicek_coupling_residual(0.05, 2.0, 0.1, 0.03, f, 200, stream));
    bool halving = true;
    for (std::size_t i = 1; i < fine.size(); ++i) {
        const double ratio = residual[i - 1] / residual[i];
        halving = halving && ratio >= 1.6 && ratio <= 2.4;
    }
    r.metrics["coupling_slope"] = fit_log_log(fine, residual).slope;
    r.passed = ode <= 1e-12 && halving;
    if (!out_dir.empty()) {
        const fs::path file = out_dir / "vasicek_coupling.csv";
        auto out = open_out(file);
        out << "fine_n,mean_terminal_gap\n";
        char buf[64];
        for (std::size_t i = 0; i < fine.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%d,%.17g\n", fine[i], residual[i]);
            out << buf;
        }
        r.files.push_back(file);
    }
    return r;
}

ExampleResult coupling_example(const std::string& name, const DiffusionModel& model, int n, double tolerance,
                               const fs::path& out_dir, std::uint64_t seed, int threads) {
    ExampleResult r;
    r.name = name;
    const ChainSpec chain = euler_chain(model, n);
    const ExcludedChain ex = exclude_chain(chain);
    const RandomStream stream(seed, 21);
    auto [original, tilde] = simulate_coupled(chain, ex, 100, stream, threads);
    const PathEnsemble restored = restore_ensemble(tilde, *ex.phi_n);
    const double residual = coupling_residual(original, restored);
    r.metrics["coupling_residual"] = residual;
    r.passed = residual <= tolerance;
    if (!out_dir.empty()) {
        for (const auto& [stem, ens] : {std::pair<const char*, const PathEnsemble*>{"original", &original},
                                        std::pair<const char*, const PathEnsemble*>{"restored", &restored}}) {
            const fs::path file = out_dir / (name + "_" + stem + ".csv");
            auto out = open_out(file);
            ens->write_csv(out);
            r.files.push_back(file);
        }
    }
    return r;
}

ExampleResult example_heston(const fs::path& out_dir, std::uint64_t seed, int threads) {
    const DiffusionModel model = acceptance_heston();
    ExampleResult r = coupling_example("heston", model, 32, 1e-11, out_dir, seed, threads);
    // Excluded bounded drift against (0, e^{kt} k theta).
    const ExcludedDiffusion ex = exclude_diffusion(model);
    double gap = 0.0;
    for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        const Vector m = ex.base.m(t, Vector{{1.0, 0.04}});
        gap = std::max({gap, std::abs(m(0)), std::abs(m(1) - std::exp(2.0 * t) * 2.0 * 0.04)});
    }
    r.metrics["excluded_drift_gap"] = gap;
    r.passed = r.passed && gap <= 1e-9;
    return r;
}

ExampleResult example_koo_linton(const fs::path& out_dir, std::uint64_t seed, int threads) {
    const DiffusionModel model = make_koo_linton(
        MatrixFunction(1, [](double t) { return Matrix::Constant(1, 1, 1.0 + t); }),
        [](double) { return Vector::Constant(1, 0.02); },
        [](double, const Vector&) { return Matrix::Constant(1, 1, 0.1); }, Vector::Constant(1, 0.03));
    ExampleResult r = coupling_example("koo-linton", model, 64, 1e-12, out_dir, seed, threads);
    const auto phi = solve_continuous(model.b, TimeGrid(10), 100);
    double gap = 0.0;
    for (int k = 0; k <= 10; ++k) {
        const double t = 0.1 * k;
        gap = std::max(gap, std::abs(phi.phi(k)(0, 0) - std::exp(-(t + 0.5 * t * t))));
    }
    r.metrics["phi_gap"] = gap;
    r.passed = r.passed && gap <= 1e-10;
    return r;
}

}  // namespace

ExampleResult run_example(const std::string& name, const fs::path& out_dir, std::uint64_t seed, int threads) {
    if (name == "vasicek") return example_vasicek(out_dir, seed);
    if (name == "heston") return example_heston(out_dir, seed, threads);
    if (name == "koo-linton") return example_koo_linton(out_dir, seed, threads);
    throw Error(ErrorCode::UnknownExample, "unknown example '" + name + "' (vasicek, heston, koo-linton)");
}

// --------------------------------------------------------------- acceptance

namespace {

fs::path run_dir(const AcceptanceOptions& o) { return o.out_dir / ("threads-" + std::to_string(o.threads)); }

CriterionResult timed(int id, std::string title, double limit, const std::function<bool(std::string&)>& body) {
    CriterionResult r;
    r.id = id;
    r.title = std::move(title);
    const auto start = Clock::now();
    try {
        r.passed = body(r.detail);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("error: ") + e.what();
    }
    r.seconds = since(start);
    if (r.seconds >= limit) {
        r.passed = false;
        r.detail += "; runtime " + num(r.seconds) + " s exceeds " + num(limit) + " s";
    }
    return r;
}

}  // namespace

CriterionResult criterion_fundamental_accuracy() {
    return timed(1, "fundamental-matrix accuracy", 1.0, [](std::string& detail) {
        Matrix heston = Matrix::Zero(2, 2);
        heston(0, 0) = 0.05;
        heston(1, 1) = -2.0;
        const Matrix cases[] = {heston, Matrix::Constant(1, 1, -1.5)};
        double worst = 0.0;
        for (const Matrix& b : cases) {
            const auto table = solve_continuous(MatrixFunction::constant(b), TimeGrid(1), 100);
            worst = std::max(worst, operator_norm(table.phi(1) - matrix_exponential(b)));
        }
        detail = "max |Phi(1) - exp(b)| = " + num(worst) + " (tol 1e-08)";
        return worst <= 1e-8;
    });
}

CriterionResult criterion_exp_bound() {
    return timed(2, "Euler-product error bound", 1.0, [](std::string& detail) {
        const Matrix b = Matrix::Constant(1, 1, 1.0);
        bool ok = true;
        std::string parts;
        for (int n : {10, 100, 1000}) {
            const auto r = exp_bound_residual(b, n);
            ok = ok && r.lhs <= r.rhs;
            parts += " n=" + std::to_string(n) + ": " + num(r.lhs, 4) + " <= " + num(r.rhs, 4) + ";";
        }
        const double lhs10 = exp_bound_residual(b, 10).lhs;
        ok = ok && std::abs(lhs10 - 0.1245) <= 5e-5;
        detail = "lhs(10) = " + num(lhs10, 6) + ";" + parts;
        return ok;
    });
}

CriterionResult criterion_conjugation(const AcceptanceOptions& options) {
    return timed(3, "conjugation identity", 5.0, [&](std::string& detail) {
        const fs::path dir = run_dir(options) / "conjugation";
        const RandomStream stream(options.seed, 3);
        double worst = 0.0;
        detail.clear();
        for (const auto& [model, n] : {std::pair{acceptance_vasicek(), 16}, std::pair{acceptance_heston(), 32}}) {
            const ChainSpec chain = euler_chain(model, n);
            const ExcludedChain ex = exclude_chain(chain);
            auto [original, tilde] = simulate_coupled(chain, ex, 100, stream, options.threads);
            const PathEnsemble restored = restore_ensemble(tilde, *ex.phi_n);
            const double res = coupling_residual(original, restored);
            worst = std::max(worst, res);
            detail += model.name + " (n=" + std::to_string(n) + ") " + num(res) + "; ";
            auto a = open_out(dir / (model.name + "_original.csv"));
            original.write_csv(a);
            auto b = open_out(dir / (model.name + "_restored.csv"));
            restored.write_csv(b);
        }
        detail += "tol 1e-11";
        return worst <= 1e-11;
    });
}

CriterionResult criterion_moment_identities(const AcceptanceOptions& options) {
    return timed(4, "transformed innovation moments", 5.0, [&](std::string& detail) {
        const int n = 32;
        const ChainSpec chain = euler_chain(acceptance_heston(), n);
        const ExcludedChain ex = exclude_chain(chain);
        const auto& phi = *ex.phi_n;
        const RandomStream stream(options.seed, 4);

        struct Probe {
            int k;
            Vector x;
            double mass_err, mean_err, cov_err;
        };
        std::vector<Probe> probes(5);
        parallel_for(probes.size(), options.threads, [&](std::size_t i) {
            auto rng = stream.at(i, 0);
            Probe& p = probes[i];
            p.k = std::min(n - 1, static_cast<int>(rng.uniform() * n));
            const Vector x = chain.x0 + Vector{{0.5 * (2.0 * rng.uniform() - 1.0), 0.03 * (2.0 * rng.uniform() - 1.0)}};
            p.x = pull_state(phi, p.k, x);
            const double t = chain.grid.point(p.k);
            const auto density = transform_innovation_density(chain.innovations, phi, p.k, p.x);
            const Matrix target = transformed_covariance(chain.innovations.covariance, phi, t, p.x);
            // Quadrature weighted by the covariance pulled back without the step factor.
            const Matrix& inv = phi.phi_inv(p.k);
            const Matrix reference = inv * chain.innovations.covariance(t, phi.phi(p.k) * p.x) * inv.transpose();
            const Moments mom = integrate_moments_gauss_hermite(density, reference, 40);
            p.mass_err = std::abs(mom.mass - 1.0);
            p.mean_err = mom.mean.norm();
            p.cov_err = (mom.second - target).cwiseAbs().maxCoeff();
        });
        double mean_worst = 0.0, cov_worst = 0.0, mass_worst = 0.0;
        auto out = open_out(run_dir(options) / "moments" / "probes.csv");
        out << "k,x1,x2,mass_error,mean_norm,covariance_error\n";
        char buf[200];
        for (const Probe& p : probes) {
            mean_worst = std::max(mean_worst, p.mean_err);
            cov_worst = std::max(cov_worst, p.cov_err);
            mass_worst = std::max(mass_worst, p.mass_err);
            std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.k, p.x(0), p.x(1), p.mass_err,
                          p.mean_err, p.cov_err);
            out << buf;
        }
        detail = "max |mean| = " + num(mean_worst) + ", max |cov - a~| = " + num(cov_worst) + ", max |mass - 1| = " +
                 num(mass_worst) + " over 5 probes (tol 1e-08)";
        return mean_worst <= 1e-8 && cov_worst <= 1e-8;
    });
}

CriterionResult criterion_transform_exactness(const AcceptanceOptions& options) {
    return timed(5, "density transform exactness", 5.0, [&](std::string& detail) {
        const double alpha = 0.05, beta = 2.0, sigma = 0.1, x0 = 0.03;
        const DiffusionModel model = make_vasicek(alpha, beta, sigma, x0);
        const ExcludedDiffusion ex = exclude_diffusion(model, 100, 100);
        const auto& phi = *ex.phi;

        const double mean = x0 * std::exp(-beta) - alpha * std::expm1(-beta);
        const double sd = sigma * std::sqrt(-std::expm1(-2.0 * beta) / (2.0 * beta));
        const SpatialGrid target = SpatialGrid::line(mean - 12.0 * sd, mean + 12.0 * sd, 2000);

        // Exact law of the excluded process at t = 1, tabulated on the pulled-back grid.
        const double psi = phi.phi_inv(100)(0, 0);
        const SpatialGrid source = SpatialGrid::line(psi * target.axis(0).min, psi * target.axis(0).max, 2000);
        const Vector ex_mean = Vector::Constant(1, x0 + alpha * std::expm1(beta));
        const Matrix ex_var = Matrix::Constant(1, 1, sigma * sigma * std::expm1(2.0 * beta) / (2.0 * beta));
        const DensityField excluded = gaussian_field(ex_mean, ex_var, source, 0.0, 1.0, model.x0);

        const DensityField mapped = transform_density(excluded, phi, 0.0, 1.0, TransformDirection::ToOriginal, target);
        const DensityField exact = vasicek_field(alpha, beta, sigma, 0.0, 1.0, x0, target);
        double err = 0.0;
        std::vector<double> diff(target.size());
        parallel_for(target.size(), options.threads, [&](std::size_t i) {
            diff[i] = std::abs(mapped.values[i] - exact.values[i]);
        });
        for (double v : diff) err = std::max(err, v);
        auto out = open_out(run_dir(options) / "transform" / "vasicek_transformed.csv");
        mapped.write_csv(out);
        detail = "sup |transformed - closed form| = " + num(err) + " on 2000 points (peak " + num(exact.peak()) +
                 ", tol 1e-08)";
        return err <= 1e-8;
    });
}

namespace {

std::string study_detail(const ConvergenceReport& r) {
    std::string s = "d_fwd";
    for (double d : r.forward) s += " " + num(d);
    s += " | slopes fwd " + num(r.fit_forward.slope) + ", pull " + num(r.fit_pullback.slope);
    s += std::string(" | monotone ") + (r.monotone_forward && r.monotone_pullback ? "yes" : "no");
    return s;
}

}  // namespace

CriterionResult criterion_vasicek_convergence(const AcceptanceOptions& options) {
    return timed(6, "Vasicek local limit rate", 60.0, [&](std::string& detail) {
        ConvergenceConfig cfg;
        cfg.model = acceptance_vasicek();
        cfg.closed_form = VasicekParams{0.05, 2.0, 0.1};
        cfg.out_dir = run_dir(options) / "vasicek-study";
        cfg.threads = options.threads;
        cfg.seed = options.seed;
        const ConvergenceReport r = run_convergence_study(cfg);
        detail = study_detail(r);
        return r.passed(-0.4);
    });
}

CriterionResult criterion_nonlinear_convergence(const AcceptanceOptions& options) {
    return timed(7, "bounded nonlinear drift, self-reference", 120.0, [&](std::string& detail) {
        ConvergenceConfig cfg;
        cfg.model = acceptance_nonlinear();
        cfg.out_dir = run_dir(options) / "nonlinear-study";
        cfg.threads = options.threads;
        cfg.seed = options.seed;
        const ConvergenceReport r = run_convergence_study(cfg);
        detail = study_detail(r) + " | n_ref " + std::to_string(r.n_ref);
        return r.passed(-0.4);
    });
}

CriterionResult criterion_tail_bound(const AcceptanceOptions&) {
    return timed(8, "Gaussian tail envelope", 5.0, [](std::string& detail) {
        const double alpha = 0.05, beta = 2.0, sigma = 0.1, x0 = 0.03;
        const double mean = x0 * std::exp(-beta) - alpha * std::expm1(-beta);
        const double sd = sigma * std::sqrt(-std::expm1(-2.0 * beta) / (2.0 * beta));
        const SpatialGrid grid = SpatialGrid::line(mean - 14.0 * sd, mean + 14.0 * sd, 2001);
        const DensityField field = vasicek_field(alpha, beta, sigma, 0.0, 1.0, x0, grid);
        const Matrix phi_inv = Matrix::Constant(1, 1, std::exp(beta));
        const TailReport r = gaussian_tail_check(field, phi_inv, Vector::Constant(1, x0));
        detail = "C1 = " + num(r.fit.c1) + ", C2 = " + num(r.fit.c2) + ", violations " + std::to_string(r.violations) +
                 " of " + std::to_string(r.points_checked);
        return r.finite && r.violations == 0;
    });
}

namespace {

std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> out;
    if (!fs::exists(root)) return out;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) out.push_back(fs::relative(entry.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void run_file_criteria(const AcceptanceOptions& o) {
    criterion_conjugation(o);
    criterion_moment_identities(o);
    criterion_transform_exactness(o);
    criterion_vasicek_convergence(o);
    criterion_nonlinear_convergence(o);
}

}  // namespace

CriterionResult criterion_reproducibility(const AcceptanceOptions& options) {
    return timed(9, "bitwise reproducibility across thread counts", 1e9, [&](std::string& detail) {
        AcceptanceOptions first = options;
        AcceptanceOptions second = options;
        first.threads = 1;
        second.threads = options.reproducibility_threads == 1 ? 8 : options.reproducibility_threads;
        auto listing = files_under(run_dir(first));
        if (listing.empty()) {
            run_file_criteria(first);
            listing = files_under(run_dir(first));
        }
        fs::remove_all(run_dir(second));
        run_file_criteria(second);
        const auto other = files_under(run_dir(second));
        if (listing != other) {
            detail = "file sets differ between thread counts " + std::to_string(first.threads) + " and " +
                     std::to_string(second.threads);
            return false;
        }
        std::size_t mismatched = 0;
        std::string names;
        for (const auto& rel : listing) {
            if (slurp(run_dir(first) / rel) != slurp(run_dir(second) / rel)) {
                ++mismatched;
                names += " " + rel.string();
            }
        }
        detail = std::to_string(listing.size()) + " CSVs compared at threads " + std::to_string(first.threads) + " and " +
                 std::to_string(second.threads) + ", " + std::to_string(mismatched) + " differ" + names;
        return mismatched == 0 && !listing.empty();
    });
}

std::vector<CriterionResult> run_acceptance_suite(const AcceptanceOptions& options,
                                                  const std::function<void(const CriterionResult&)>& report) {
    AcceptanceOptions o = options;
    o.threads = 1;
    fs::remove_all(o.out_dir);
    std::vector<CriterionResult> results;
    auto add = [&](CriterionResult r) {
        if (report) report(r);
        results.push_back(std::move(r));
    };
    add(criterion_fundamental_accuracy());
    add(criterion_exp_bound());
    add(criterion_conjugation(o));
    add(criterion_moment_identities(o));
    add(criterion_transform_exactness(o));
    add(criterion_vasicek_convergence(o));
    add(criterion_nonlinear_convergence(o));
    add(criterion_tail_bound(o));
    add(criterion_reproducibility(o));
    return results;
}

std::string format_result(const CriterionResult& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " (%.2f s)", r.seconds);
    return std::string(r.passed ? "[PASS] " : "[FAIL] ") + std::to_string(r.id) + " " + r.title + ": " + r.detail + buf;
}

}  // namespace tdx
