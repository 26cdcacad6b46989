// Command-line front end: every study and the acceptance suite run from here.

#include "tdx/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

namespace fs = std::filesystem;
using namespace tdx;

constexpr int kExitPass = 0;
constexpr int kExitError = 1;
constexpr int kExitFail = 2;

struct Globals {
    std::string config;
    std::uint64_t seed = 20240501;
    std::string out = "tdx-out";
    int threads = 1;
};

ModelConfig require_model(const Globals& g) {
    if (g.config.empty()) throw Error(ErrorCode::ConfigInvalid, "this command needs --config <file>");
    return load_model_config(g.config);
}

std::ofstream writer(const fs::path& file) {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidParameter, "cannot write " + file.string());
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

int cmd_fundmat(const Globals& g, int n, int refinement, const std::string& kind) {
    const ModelConfig cfg = require_model(g);
    const TimeGrid grid(n, cfg.model.horizon);
    const FundamentalMatrixTable table =
        kind == "discrete" ? build_discrete(cfg.model.b, grid) : solve_continuous(cfg.model.b, grid, refinement);
    const fs::path file = fs::path(g.out) / "fundmat.csv";
    auto out = writer(file);
    table.write_csv(out);
    std::cout << "wrote " << file.string() << "\n"
              << "inverse residual " << fmt(table.inverse_residual()) << ", adjoint residual "
              << fmt(table.adjoint_residual()) << ", max condition " << fmt(table.max_condition())
              << (table.ill_conditioned() ? " (ill-conditioned)" : "") << "\n";
    return kExitPass;
}

int cmd_validate(const Globals& g, int n, double half_width) {
    const ModelConfig cfg = require_model(g);
    const ChainSpec chain = euler_chain(cfg.model, n);
    ProbeBox probe = ProbeBox::around(cfg.model.x0, half_width);
    probe.seed = g.seed;
    const ValidationReport report = validate_conditions(cfg.model, chain, probe);
    for (const auto& r : report.results)
        std::cout << "condition " << r.condition << (r.passed ? " pass: " : " FAIL: ") << r.detail << "\n";
    return report.all_passed() ? kExitPass : kExitFail;
}

int cmd_simulate(const Globals& g, int n, int paths, bool binary, bool excluded) {
    const ModelConfig cfg = require_model(g);
    const ChainSpec chain = euler_chain(cfg.model, n);
    const RandomStream stream(g.seed, 0);
    PathEnsemble ens = excluded ? simulate_chain(exclude_chain(chain).base, paths, stream, g.threads)
                                : simulate_chain(chain, paths, stream, g.threads);
    const fs::path file = fs::path(g.out) / (binary ? "ensemble.tdxe" : "ensemble.csv");
    auto out = writer(file);
    if (binary)
        ens.write_binary(out);
    else
        ens.write_csv(out);
    std::cout << "wrote " << file.string() << " (" << paths << " paths, n = " << n << ")\n";
    return kExitPass;
}

int cmd_exclude(const Globals& g, int n, int paths) {
    const ModelConfig cfg = require_model(g);
    const ChainSpec chain = euler_chain(cfg.model, n);
    const ExcludedChain ex = exclude_chain(chain);
    const fs::path dir(g.out);
    const fs::path table = dir / "excluded_phi.csv";
    {
        auto out = writer(table);
        ex.phi_n->write_csv(out);
    }
    nlohmann::json doc;
    doc["kind"] = "trend-excluded";
    doc["dim"] = cfg.model.dim;
    doc["horizon"] = cfg.model.horizon;
    doc["n"] = n;
    doc["phi_table"] = table.filename().string();
    doc["phi_kind"] = "discrete";
    doc["drift"] = "Phi_n^-1(kh) (I + h b_n(kh))^-1 m_n(kh, Phi_n(kh) x)";
    doc["innovation_map"] = "Phi_n^-1(kh) (I + h b_n(kh))^-1";
    doc["source"] = cfg.source;
    const fs::path file = dir / "excluded.json";
    {
        auto out = writer(file);
        out << doc.dump(2) << "\n";
    }
    auto [original, tilde] = simulate_coupled(chain, ex, paths, RandomStream(g.seed, 1), g.threads);
    const double residual = coupling_residual(original, restore_ensemble(tilde, *ex.phi_n));
    std::cout << "wrote " << file.string() << " and " << table.string() << "\n"
              << "coupling residual over " << paths << " paths: " << fmt(residual) << "\n";
    return residual <= 1e-11 ? kExitPass : kExitFail;
}

int cmd_density(const Globals& g, int n, double s_window) {
    const ModelConfig cfg = require_model(g);
    if (cfg.model.dim != 1) throw Error(ErrorCode::ConfigInvalid, "density evolution is 1-d");
    GridParams params;
    params.sd_window = s_window;
    const DensityField field = chain_density(cfg.model, n, params);
    const fs::path file = fs::path(g.out) / "density.csv";
    auto out = writer(file);
    field.write_csv(out);
    std::cout << "wrote " << file.string() << " (integral " << fmt(field.integral()) << ")\n";
    return kExitPass;
}

int cmd_converge(const Globals& g) {
    if (g.config.empty()) throw Error(ErrorCode::ConfigInvalid, "converge needs --config <file>");
    const nlohmann::json doc = read_json_file(g.config);
    ConvergenceConfig cfg = convergence_config_from(parse_model_config(doc), doc);
    cfg.out_dir = g.out;
    cfg.threads = g.threads;
    if (!(doc.contains("study") && doc.at("study").contains("seed"))) cfg.seed = g.seed;
    const ConvergenceReport report = run_convergence_study(cfg);
    emit_plot_data(report, cfg.out_dir);
    for (std::size_t i = 0; i < report.n.size(); ++i)
        std::cout << "n = " << report.n[i] << "  forward " << fmt(report.forward[i]) << "  pullback "
                  << fmt(report.pullback[i]) << "\n";
    std::cout << "slope forward " << fmt(report.fit_forward.slope) << ", pullback " << fmt(report.fit_pullback.slope)
              << (report.kde_pipeline ? " (kernel estimates, property check only)" : "") << "\n";
    return report.kde_pipeline || report.passed() ? kExitPass : kExitFail;
}

int cmd_example(const Globals& g, const std::string& name) {
    const ExampleResult r = run_example(name, g.out, g.seed, g.threads);
    for (const auto& [key, value] : r.metrics) std::cout << key << " = " << fmt(value) << "\n";
    for (const auto& f : r.files) std::cout << "wrote " << f.string() << "\n";
    std::cout << r.name << (r.passed ? " passed" : " FAILED") << "\n";
    return r.passed ? kExitPass : kExitFail;
}

int cmd_acceptance(const Globals& g) {
    AcceptanceOptions options;
    options.out_dir = g.out;
    options.seed = g.seed;
    const auto results =
        run_acceptance_suite(options, [](const CriterionResult& r) { std::cout << format_result(r) << std::endl; });
    const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    return ok ? kExitPass : kExitFail;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trend exclusion and density convergence toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Model config (JSON)");
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

    int n = 64, refinement = 100, paths = 100;
    std::string kind = "continuous";
    double half_width = 1.0, window = 12.0;
    bool binary = false, excluded = false;
    std::string example;

    auto* fundmat = app.add_subcommand("fundmat", "Tabulate the fundamental matrix of b");
    fundmat->add_option("-n,--steps", n, "Grid cells");
    fundmat->add_option("--refinement", refinement, "RK4 sub-steps per cell");
    fundmat->add_option("--kind", kind, "continuous or discrete")->check(CLI::IsMember({"continuous", "discrete"}));

    auto* validate = app.add_subcommand("validate", "Check conditions 1-5 on a probe box");
    validate->add_option("-n,--steps", n, "Chain steps");
    validate->add_option("--half-width", half_width, "Probe box half width around x0");

    auto* simulate = app.add_subcommand("simulate", "Simulate the Euler chain");
    simulate->add_option("-n,--steps", n, "Chain steps");
    simulate->add_option("--paths", paths, "Number of paths");
    simulate->add_flag("--binary", binary, "Write the TDXE binary format");
    simulate->add_flag("--excluded", excluded, "Simulate the trend-excluded chain");

    auto* exclude = app.add_subcommand("exclude", "Exclude the trend and check the conjugation identity");
    exclude->add_option("-n,--steps", n, "Chain steps");
    exclude->add_option("--paths", paths, "Paths for the coupling check");

    auto* density = app.add_subcommand("density", "Evolve the 1-d chain density");
    density->add_option("-n,--steps", n, "Chain steps");
    density->add_option("--window", window, "Half width in standard deviations");

    auto* converge = app.add_subcommand("converge", "Run a convergence study");
    auto* ex = app.add_subcommand("example", "Reproduce a worked example");
    ex->add_option("name", example, "vasicek, heston or koo-linton")->required();
    auto* acceptance = app.add_subcommand("acceptance", "Run the acceptance suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitPass : kExitError;
    }

    try {
        if (*fundmat) return cmd_fundmat(g, n, refinement, kind);
        if (*validate) return cmd_validate(g, n, half_width);
        if (*simulate) return cmd_simulate(g, n, paths, binary, excluded);
        if (*exclude) return cmd_exclude(g, n, paths);
        if (*density) return cmd_density(g, n, window);
        if (*converge) return cmd_converge(g);
        if (*ex) return cmd_example(g, example);
        if (*acceptance) return cmd_acceptance(g);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
