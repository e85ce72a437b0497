// Command-line front end for the petal experiments.
//
//   fapp run --config <file> [--controller fapp|baseline] --out <dir>
//   fapp compare --a <dir> --b <dir>
//   fapp gen-reference --config <file> --out <file>
//   fapp qp-check
//
// Exit codes: 0 success, 2 configuration error, 3 episode failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "fapp/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitEpisode = 3;

int run(const std::string& config_file, const std::string& controller, const std::string& out_dir) {
    fapp::ExperimentConfig config = fapp::load_config(config_file);
    if (!controller.empty()) config.controller = fapp::parse_controller(controller);
    const fapp::EpisodeResult r = fapp::run_episode(config);
    fapp::write_episode(r, out_dir);
    std::cout << fapp::to_json(r.metrics).dump(2) << '\n';
    if (r.metrics.failed) {
        std::cerr << "episode failed: " << r.metrics.failure << '\n';
        return kExitEpisode;
    }
    return kExitOk;
}

int compare(const std::string& a, const std::string& b) {
    std::cout << fapp::compare_episodes(a, b).dump(2) << '\n';
    return kExitOk;
}

int gen_reference(const std::string& config_file, const std::string& out_file) {
    const fapp::TimedReference ref = fapp::generate_nominal_reference(fapp::load_config(config_file));
    const std::filesystem::path out(out_file);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream os(out);
    if (!os) throw fapp::ConfigError("cannot write " + out_file);
    ref.write_csv(os);
    std::cout << "wrote " << ref.size() << " samples to " << out_file << '\n';
    return kExitOk;
}

/// Solver self-check: random strictly convex QPs certified through their KKT
/// residuals, then timing of the condensed MPC problem at the petal start.
int qp_check() {
    using Eigen::MatrixXd;
    using Eigen::VectorXd;
    std::mt19937 rng(2024);
    std::normal_distribution<double> normal;
    std::uniform_int_distribution<int> dim(1, 8), rows(0, 6);
    fapp::QpSolver solver;
    int certified = 0;
    double worst = 0.0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        const int n = dim(rng), m = rows(rng);
        MatrixXd l(n, n), a(m, n);
        VectorXd f(n), x0(n), b(m);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) l(i, j) = normal(rng);
            f(i) = normal(rng);
            x0(i) = normal(rng);
        }
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) a(i, j) = normal(rng);
        }
        const MatrixXd h = l * l.transpose() + 0.1 * MatrixXd::Identity(n, n);
        b = a * x0 + VectorXd::Constant(m, 0.5);
        const fapp::QpSolution sol = solver.solve(h, f, a, b);
        if (sol.status != fapp::QpStatus::Optimal) continue;
        const fapp::KktResiduals r = fapp::kkt_residuals(h, f, a, b, sol.primal, sol.dual);
        const double e = std::max({r.stationarity, r.primal, r.dual_sign, r.complementarity});
        worst = std::max(worst, e);
        if (e <= 1e-6) ++certified;
    }

    fapp::ExperimentConfig config = fapp::case_config(fapp::Case::Nominal);
    config.duration = 2.0;
    const fapp::EpisodeResult ep = fapp::run_fapp_episode(config);

    const nlohmann::json report{{"random_qps", trials},
                                {"certified", certified},
                                {"worst_kkt_residual", worst},
                                {"mpc_timing_ms", fapp::to_json(ep.timing)}};
    std::cout << report.dump(2) << '\n';
    return certified == trials ? kExitOk : kExitEpisode;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flatness-based predictive path following on a simulated quadrotor"};
    app.require_subcommand(1);

    std::string config_file, controller, out, a, b;
    CLI::App* run_cmd = app.add_subcommand("run", "Run one episode and write its outputs");
    run_cmd->add_option("--config", config_file, "Experiment config (JSON)")->required();
    run_cmd->add_option("--controller", controller, "Override the controller: fapp or baseline");
    run_cmd->add_option("--out", out, "Output directory")->required();

    CLI::App* cmp_cmd = app.add_subcommand("compare", "Compare two episode directories");
    cmp_cmd->add_option("--a", a, "First episode directory")->required();
    cmp_cmd->add_option("--b", b, "Second episode directory")->required();

    CLI::App* ref_cmd = app.add_subcommand("gen-reference", "Record the nominal timed reference");
    ref_cmd->add_option("--config", config_file, "Experiment config (JSON)")->required();
    ref_cmd->add_option("--out", out, "Reference CSV to write")->required();

    CLI::App* qp_cmd = app.add_subcommand("qp-check", "Certify the QP solver and time the MPC");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (run_cmd->parsed()) return run(config_file, controller, out);
        if (cmp_cmd->parsed()) return compare(a, b);
        if (ref_cmd->parsed()) return gen_reference(config_file, out);
        if (qp_cmd->parsed()) return qp_check();
    } catch (const fapp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const fapp::MissingEpisode& e) {
        std::cerr << "missing episode: " << e.what() << '\n';
        return kExitEpisode;
    } catch (const fapp::Error& e) {
        std::cerr << "episode failure: " << e.what() << '\n';
        return kExitEpisode;
    }
    return kExitOk;
}
