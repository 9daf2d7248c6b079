#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "statesel/harness.hpp"

using namespace statesel;

namespace {

void print_matrix(std::ostream& os, const char* name, const Matrix& m) {
    os << name << " =\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        os << "  [";
        for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? ", " : "") << std::setw(14) << m(r, c);
        os << "]\n";
    }
}

ExperimentConfig config_or_default(const std::string& path, const std::string& model) {
    if (!path.empty()) return load_experiment_config(path);
    nlohmann::json j{{"model", model.empty() ? "example1" : model}};
    return experiment_config_from_json(j);
}

int run_simulate(const std::string& config, const std::string& out, int threads, long long seed, bool no_svg,
                 bool fallback, bool quiet) {
    auto cfg = load_experiment_config(config);
    if (!out.empty()) cfg.output_dir = out;
    if (threads >= 0) cfg.threads = static_cast<unsigned>(threads);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (no_svg) cfg.emit_svg = false;
    if (fallback) cfg.fallback_mean = true;
    const auto sc = build_scenario(cfg);
    const auto res = run_experiment(cfg, sc);
    emit_outputs(cfg, sc, res, cfg.output_dir);
    if (!quiet) {
        std::cout << "steps recorded: " << res.records.size() << "\n";
        std::cout << "mean violation rate: " << mean_violation_rate(res.records) << " (epsilon "
                  << sc.selection.epsilon << ")\n";
        if (res.stop_step) std::cout << "stopped at k=" << *res.stop_step << ": " << res.stop_reason << "\n";
        for (const auto& w : res.warnings) std::cout << "warning: " << w << "\n";
        std::cout << "outputs: " << cfg.output_dir.string() << "\n";
    }
    return 0;
}

int run_select(const std::string& particles_path, const std::string& config, const std::string& model, long long seed,
               int threads, bool as_json) {
    auto cfg = config_or_default(config, model);
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (threads >= 0) cfg.threads = static_cast<unsigned>(threads);
    const auto sc = build_scenario(cfg);
    std::ifstream in(particles_path);
    if (!in) throw ConfigError("cannot open " + particles_path);
    const auto ps = read_particles_csv(in);
    if (ps.particles.front().size() != sc.plant.dims.state)
        throw ConfigError("particle dimension does not match the model state");
    const SelectionProblem problem{sc.plant, sc.controller, sc.cost, sc.constraints};
    SelectionConfig scfg = sc.selection;
    scfg.seed = cfg.seed;
    const auto result = select_state(ps, problem, scfg);
    if (as_json) {
        std::cout << to_json(result).dump(2) << "\n";
    } else {
        std::cout << "particles: " << ps.size() << "\nsamples M: " << result.resolved_samples
                  << "\nfeasible candidates: " << result.feasible_count() << "\n";
        for (const auto& w : result.warnings) std::cout << "warning: " << w << "\n";
        if (result.chosen) {
            std::cout << std::setprecision(10) << "chosen index: " << *result.chosen_index << "\nchosen state:";
            for (Eigen::Index i = 0; i < result.chosen->size(); ++i) std::cout << ' ' << (*result.chosen)(i);
            std::cout << "\nsampled cost: " << *result.reports[*result.chosen_index].sampled_cost << "\n";
        } else {
            std::cout << "no feasible candidate\n";
        }
    }
    return result.chosen ? 0 : 3;
}

int run_qp(const std::string& config, bool as_json, bool full) {
    auto cfg = config_or_default(config, "dcdc");
    if (cfg.model != "dcdc") throw ConfigError("qp: needs a linear model");
    const auto sc = build_scenario(cfg);
    const auto& p = *sc.linear;
    const auto mode = full || cfg.full_covariance ? CovarianceMode::Full : CovarianceMode::OneStep;
    const auto s = select_state_qp(p, mode);
    std::optional<Vector> free_min;
    try {
        free_min = unconstrained_minimizer(s.cost, p.prior_mean);
    } catch (const NumericalError&) {
    }
    if (as_json) {
        nlohmann::json j{{"A1", json_io::to_json(s.cost.A1)},
                         {"A2", json_io::to_json(s.cost.A2)},
                         {"tightened", {{"A", json_io::to_json(s.constraints.A)}, {"b", json_io::to_json(s.constraints.b)}}},
                         {"prior_mean", json_io::to_json(p.prior_mean)},
                         {"status", s.solution.optimal() ? "optimal" : "infeasible"},
                         {"iterations", s.solution.iterations}};
        if (s.solution.optimal()) {
            j["x0_star"] = json_io::to_json(s.solution.x);
            j["objective"] = s.solution.objective;
        }
        if (free_min) j["unconstrained_minimizer"] = json_io::to_json(*free_min);
        std::cout << j.dump(2) << "\n";
        return s.solution.optimal() ? 0 : 3;
    }
    std::cout << std::setprecision(8);
    print_matrix(std::cout, "A1", s.cost.A1);
    print_matrix(std::cout, "A2", s.cost.A2);
    std::cout << "tightened rows (A x <= b):\n";
    for (Eigen::Index r = 0; r < s.constraints.rows(); ++r) {
        std::cout << "  [";
        for (Eigen::Index c = 0; c < s.constraints.A.cols(); ++c) std::cout << (c ? ", " : "") << s.constraints.A(r, c);
        std::cout << "] x <= " << s.constraints.b(r) << "\n";
    }
    if (s.solution.optimal()) {
        std::cout << "x0* =";
        for (Eigen::Index i = 0; i < s.solution.x.size(); ++i) std::cout << ' ' << s.solution.x(i);
        std::cout << "\n";
    } else {
        std::cout << "QP infeasible\n";
    }
    if (free_min) {
        std::cout << "unconstrained minimizer =";
        for (Eigen::Index i = 0; i < free_min->size(); ++i) std::cout << ' ' << (*free_min)(i);
        std::cout << "\n";
    }
    return s.solution.optimal() ? 0 : 3;
}

int run_synthesize(const std::string& out, const std::string& config, long long grid_points, long long seed,
                   int threads) {
    auto cfg = config_or_default(config, "example1");
    if (cfg.model != "example1") throw ConfigError("synthesize: needs the example1 model");
    const double eps = cfg.epsilon.value_or(0.3);
    auto problem = synthesis_problem_for(cfg, eps);
    if (cfg.controller.synthesis) apply_synthesis_overrides(problem, *cfg.controller.synthesis);
    const Vector mean = cfg.prior_mean.value_or(catalog::example1_prior_mean());
    const Matrix cov = cfg.prior_cov.value_or(catalog::example1_prior_cov());
    const Box region = default_synthesis_region(mean, cov, cfg.avoid.value_or(catalog::example1_avoid()),
                                                problem.model.process_noise.covariance());
    auto settings = synthesis_settings_from_json(cfg.controller.synthesis.value_or(nlohmann::json::object()), region);
    if (grid_points > 0) settings.grid_points = static_cast<std::size_t>(grid_points);
    if (seed >= 0) settings.seed = static_cast<std::uint64_t>(seed);
    settings.threads = threads >= 0 ? static_cast<unsigned>(threads) : cfg.threads;
    const auto vi = value_iteration(make_value_grid(problem, settings), problem, settings);
    const auto policy = extract_policy(vi, problem, settings);
    save_policy(policy, out);
    std::cout << "sweeps: " << vi.grid.sweeps << "\nresidual: " << vi.grid.residual
              << "\nabsorbed nodes: " << vi.grid.absorbed << "\npolicy: " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"State selection for output-feedback stochastic control"};
    app.require_subcommand(1);

    std::string config, out, model, particles;
    int threads = -1;
    long long seed = -1;
    bool no_svg = false, fallback = false, quiet = false, as_json = false, full = false;

    auto* sim = app.add_subcommand("simulate", "Run a closed-loop experiment from a JSON config");
    sim->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
    sim->add_option("--out", out, "Output directory (overrides the config)");
    sim->add_option("--threads", threads, "Worker threads, 0 = all cores");
    sim->add_option("--seed", seed, "Master seed (overrides the config)");
    sim->add_flag("--no-svg", no_svg, "Skip trajectory.svg");
    sim->add_flag("--fallback-mean", fallback, "Use the estimator mean when no state is feasible");
    sim->add_flag("--quiet", quiet, "No console summary");

    auto* sel = app.add_subcommand("select", "One-shot state selection from a particle CSV");
    sel->add_option("--particles", particles, "CSV with columns x0..,weight")->required()->check(CLI::ExistingFile);
    sel->add_option("--config", config, "Experiment config supplying model, controller and selector settings");
    sel->add_option("--model", model, "Built-in model when no config is given");
    sel->add_option("--seed", seed, "Sample seed");
    sel->add_option("--threads", threads, "Worker threads, 0 = all cores");
    sel->add_flag("--json", as_json, "Print per-candidate reports as JSON");

    auto* qp = app.add_subcommand("qp", "Print A1/A2, tightened rows and the selected state for a linear problem");
    qp->add_option("--config", config, "Config with a linear model (default: dcdc)");
    qp->add_flag("--json", as_json, "JSON output");
    qp->add_flag("--full-covariance", full, "Tighten with propagated covariances instead of the one-step relaxation");

    auto* syn = app.add_subcommand("synthesize", "Value-iteration policy synthesis for the example1 model");
    syn->add_option("--out", out, "Policy header path (values go to the sibling .csv)")->required();
    syn->add_option("--config", config, "Config whose controller.synthesis block supplies settings");
    long long grid_points = 0;
    syn->add_option("--grid-points", grid_points, "Random grid size");
    syn->add_option("--seed", seed, "Grid and noise seed");
    syn->add_option("--threads", threads, "Worker threads, 0 = all cores");

    auto* bnd = app.add_subcommand("bound", "Sample count M guaranteeing the feasibility confidence");
    double eps = 0, alpha = 0, delta = 0;
    std::size_t L = 0;
    int check = 0;
    bnd->add_option("--eps", eps, "Violation tolerance epsilon")->required();
    bnd->add_option("--alpha", alpha, "Sampled feasibility tolerance alpha")->required();
    bnd->add_option("--delta", delta, "Confidence parameter delta")->required();
    bnd->add_option("--L", L, "Number of particles")->required();
    bnd->add_option("--check", check, "Report whether this M satisfies the bound");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim) return run_simulate(config, out, threads, seed, no_svg, fallback, quiet);
        if (*sel) return run_select(particles, config, model, seed, threads, as_json);
        if (*qp) return run_qp(config, as_json, full);
        if (*syn) return run_synthesize(out, config, grid_points, seed, threads);
        if (*bnd) {
            const int m = sample_bound(eps, alpha, delta, L);
            std::cout << m << "\n";
            if (bnd->count("--check")) {
                const bool ok = check >= m;
                std::cout << "M=" << check << (ok ? " satisfies" : " does not satisfy") << " the bound (M >= " << m
                          << ")\n";
                return ok ? 0 : 1;
            }
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
