#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "statesel/catalog.hpp"
#include "statesel/filter.hpp"
#include "statesel/json_io.hpp"
#include "statesel/lqsel.hpp"
#include "statesel/selector.hpp"
#include "statesel/synth.hpp"

// Closed-loop experiment driver: select -> act -> measure -> filter -> repeat.

namespace statesel {

enum class EstimatorKind { Particle, Kalman };
enum class SelectionMode { State, Mean };

struct ControllerSpec {
    std::string type = "default";  // default | kappa1 | linear | policy
    std::optional<Matrix> gain;
    std::optional<std::filesystem::path> policy_file;
    std::optional<nlohmann::json> synthesis;  // settings for on-the-fly synthesis
};

struct ExperimentConfig {
    std::string model = "example1";
    std::optional<nlohmann::json> linear;  // overrides on top of the built-in linear problem
    ControllerSpec controller;
    EstimatorKind estimator = EstimatorKind::Particle;
    std::size_t particles = 400;
    ResamplePolicy resample = ResamplePolicy::Always;
    SelectionMode selection = SelectionMode::State;
    // Selector fields; unset ones fall back to the model's defaults.
    std::optional<double> epsilon;
    std::optional<double> alpha;  // default min(0.1, epsilon / 2)
    double delta = 0.01;
    std::optional<int> horizon;
    int samples = 0;
    std::optional<BoxUnion> avoid;
    std::optional<Box> input_bounds;
    std::optional<Vector> prior_mean;
    std::optional<Matrix> prior_cov;
    std::optional<Vector> initial_state;
    int steps = 30;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    bool fallback_mean = false;
    std::filesystem::path output_dir = "out";
    bool emit_svg = true;
    int snapshot_every = 1;  // particles_k.csv cadence; 0 disables
    bool full_covariance = false;  // QP tightening with propagated covariances
    std::filesystem::path base_dir = ".";  // relative paths resolve against this
};

namespace detail {

inline Box box_from(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 2) throw ConfigError(what + ": expected [lo, hi]");
    Box b{json_io::vector_from(j[0], what + ".lo"), json_io::vector_from(j[1], what + ".hi")};
    if (b.lo.size() != b.hi.size() || (b.lo.array() > b.hi.array()).any())
        throw ConfigError(what + ": lo must not exceed hi");
    return b;
}

inline ResamplePolicy resample_from(const std::string& s) {
    if (s == "always") return ResamplePolicy::Always;
    if (s == "when_depleted") return ResamplePolicy::WhenDepleted;
    if (s == "never") return ResamplePolicy::Never;
    throw ConfigError("estimator.resample: expected always, when_depleted or never");
}

inline const char* resample_name(ResamplePolicy p) {
    switch (p) {
        case ResamplePolicy::Always: return "always";
        case ResamplePolicy::WhenDepleted: return "when_depleted";
        case ResamplePolicy::Never: return "never";
    }
    return "?";
}

template <class T>
T get_checked(const nlohmann::json& j, const std::string& what) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(what + ": wrong type");
    }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, std::filesystem::path base_dir = ".") {
    using detail::get_checked;
    json_io::reject_unknown_keys(j,
                                 {"model", "linear", "controller", "estimator", "selection", "selector", "constraints",
                                  "prior", "initial_state", "steps", "seed", "threads", "fallback_mean", "output_dir",
                                  "emit_svg", "snapshot_every", "full_covariance"},
                                 "config");
    ExperimentConfig c;
    c.base_dir = std::move(base_dir);
    if (j.contains("model")) c.model = get_checked<std::string>(j["model"], "model");
    if (c.model != "example1" && c.model != "dcdc") throw ConfigError("model: expected example1 or dcdc");
    if (j.contains("linear")) {
        if (c.model != "dcdc") throw ConfigError("linear: only valid with the dcdc model");
        c.linear = j["linear"];
    }
    if (j.contains("controller")) {
        const auto& cj = j["controller"];
        json_io::reject_unknown_keys(cj, {"type", "gain", "policy_file", "synthesis"}, "controller");
        c.controller.type = get_checked<std::string>(cj.at("type"), "controller.type");
        if (cj.contains("gain")) c.controller.gain = json_io::matrix_from(cj["gain"], "controller.gain");
        if (cj.contains("policy_file"))
            c.controller.policy_file = get_checked<std::string>(cj["policy_file"], "controller.policy_file");
        if (cj.contains("synthesis")) c.controller.synthesis = cj["synthesis"];
        const auto& t = c.controller.type;
        if (t != "default" && t != "kappa1" && t != "linear" && t != "policy")
            throw ConfigError("controller.type: expected default, kappa1, linear or policy");
        if (t == "policy" && !c.controller.policy_file && !c.controller.synthesis)
            throw ConfigError("controller: policy needs policy_file or synthesis");
        if (t == "policy" && c.controller.policy_file && c.controller.synthesis)
            throw ConfigError("controller: give exactly one of policy_file and synthesis");
    }
    if (j.contains("estimator")) {
        const auto& ej = j["estimator"];
        json_io::reject_unknown_keys(ej, {"type", "particles", "resample"}, "estimator");
        const auto type = get_checked<std::string>(ej.at("type"), "estimator.type");
        if (type == "particle") {
            c.estimator = EstimatorKind::Particle;
        } else if (type == "kalman") {
            c.estimator = EstimatorKind::Kalman;
            if (ej.contains("particles") || ej.contains("resample"))
                throw ConfigError("estimator: particles/resample only apply to the particle filter");
        } else {
            throw ConfigError("estimator.type: expected particle or kalman");
        }
        if (ej.contains("particles")) {
            const auto n = get_checked<long long>(ej["particles"], "estimator.particles");
            if (n < 1) throw ConfigError("estimator.particles must be at least 1");
            c.particles = static_cast<std::size_t>(n);
        }
        if (ej.contains("resample")) c.resample = detail::resample_from(get_checked<std::string>(ej["resample"], "estimator.resample"));
    }
    if (j.contains("selection")) {
        const auto s = get_checked<std::string>(j["selection"], "selection");
        if (s == "state") c.selection = SelectionMode::State;
        else if (s == "mean") c.selection = SelectionMode::Mean;
        else throw ConfigError("selection: expected state or mean");
    }
    if (j.contains("selector")) {
        const auto& sj = j["selector"];
        json_io::reject_unknown_keys(sj, {"epsilon", "alpha", "delta", "horizon", "samples"}, "selector");
        if (sj.contains("epsilon")) c.epsilon = get_checked<double>(sj["epsilon"], "selector.epsilon");
        if (sj.contains("alpha")) c.alpha = get_checked<double>(sj["alpha"], "selector.alpha");
        if (sj.contains("delta")) c.delta = get_checked<double>(sj["delta"], "selector.delta");
        if (sj.contains("horizon")) c.horizon = get_checked<int>(sj["horizon"], "selector.horizon");
        if (sj.contains("samples")) c.samples = get_checked<int>(sj["samples"], "selector.samples");
    }
    if (j.contains("constraints")) {
        if (c.model != "example1") throw ConfigError("constraints: linear models take constraints under 'linear'");
        const auto& cj = j["constraints"];
        json_io::reject_unknown_keys(cj, {"avoid_boxes", "input_bounds"}, "constraints");
        if (cj.contains("avoid_boxes")) {
            BoxUnion u;
            for (const auto& b : cj["avoid_boxes"]) u.boxes.push_back(detail::box_from(b, "constraints.avoid_boxes"));
            c.avoid = u;
        }
        if (cj.contains("input_bounds")) {
            const auto& ib = cj["input_bounds"];
            if (ib.is_null()) c.input_bounds = Box{Vector::Constant(1, -std::numeric_limits<double>::infinity()),
                                                   Vector::Constant(1, std::numeric_limits<double>::infinity())};
            else c.input_bounds = detail::box_from(ib, "constraints.input_bounds");
        }
    }
    if (j.contains("prior")) {
        if (c.model != "example1") throw ConfigError("prior: linear models take prior_mean/prior_cov under 'linear'");
        const auto& pj = j["prior"];
        json_io::reject_unknown_keys(pj, {"mean", "covariance"}, "prior");
        if (pj.contains("mean")) c.prior_mean = json_io::vector_from(pj["mean"], "prior.mean");
        if (pj.contains("covariance")) c.prior_cov = json_io::matrix_from(pj["covariance"], "prior.covariance");
    }
    if (j.contains("initial_state")) c.initial_state = json_io::vector_from(j["initial_state"], "initial_state");
    if (j.contains("steps")) c.steps = get_checked<int>(j["steps"], "steps");
    if (c.steps < 0) throw ConfigError("steps must be nonnegative");
    if (j.contains("seed")) c.seed = get_checked<std::uint64_t>(j["seed"], "seed");
    if (j.contains("threads")) c.threads = get_checked<unsigned>(j["threads"], "threads");
    if (j.contains("fallback_mean")) c.fallback_mean = get_checked<bool>(j["fallback_mean"], "fallback_mean");
    if (j.contains("output_dir")) c.output_dir = get_checked<std::string>(j["output_dir"], "output_dir");
    if (j.contains("emit_svg")) c.emit_svg = get_checked<bool>(j["emit_svg"], "emit_svg");
    if (j.contains("snapshot_every")) c.snapshot_every = get_checked<int>(j["snapshot_every"], "snapshot_every");
    if (c.snapshot_every < 0) throw ConfigError("snapshot_every must be nonnegative");
    if (j.contains("full_covariance")) c.full_covariance = get_checked<bool>(j["full_covariance"], "full_covariance");
    if (c.estimator == EstimatorKind::Kalman && c.model == "example1")
        throw ConfigError("estimator: the Kalman filter needs a linear model");
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j, path.parent_path().empty() ? "." : path.parent_path());
}

/// Synthesis settings from JSON, defaulting the region from the prior and avoid set.
inline SynthesisSettings synthesis_settings_from_json(const nlohmann::json& j, const Box& default_region) {
    using detail::get_checked;
    json_io::reject_unknown_keys(j,
                                 {"grid_points", "input_points", "noise_draws", "region", "fit_region", "lattice",
                                  "neighbours", "tolerance", "max_sweeps", "seed", "discount", "epsilon"},
                                 "synthesis");
    SynthesisSettings s;
    s.region = default_region;
    if (j.contains("grid_points")) s.grid_points = get_checked<std::size_t>(j["grid_points"], "synthesis.grid_points");
    if (j.contains("input_points")) s.input_points = get_checked<std::size_t>(j["input_points"], "synthesis.input_points");
    if (j.contains("noise_draws")) s.noise_draws = get_checked<std::size_t>(j["noise_draws"], "synthesis.noise_draws");
    if (j.contains("region")) s.region = detail::box_from(j["region"], "synthesis.region");
    if (j.contains("fit_region")) s.fit_region = detail::box_from(j["fit_region"], "synthesis.fit_region");
    if (j.contains("lattice")) s.lattice_resolution = get_checked<int>(j["lattice"], "synthesis.lattice");
    if (j.contains("neighbours")) s.fit_neighbours = get_checked<std::size_t>(j["neighbours"], "synthesis.neighbours");
    if (j.contains("tolerance")) s.tolerance = get_checked<double>(j["tolerance"], "synthesis.tolerance");
    if (j.contains("max_sweeps")) s.max_sweeps = get_checked<int>(j["max_sweeps"], "synthesis.max_sweeps");
    if (j.contains("seed")) s.seed = get_checked<std::uint64_t>(j["seed"], "synthesis.seed");
    return s;
}

// ---------------------------------------------------------------------------
// Scenario: the resolved model, controller, cost and constraints
// ---------------------------------------------------------------------------

struct Scenario {
    PlantModel plant;
    Controller controller;
    StageCost cost;
    ConstraintSet constraints;
    std::optional<LinearProblem> linear;
    std::optional<BoxUnion> avoid;  // for plotting and violation counting
    Vector prior_mean;
    Matrix prior_cov;
    SelectionConfig selection;
    std::string controller_name;
};

inline SynthesisProblem synthesis_problem_for(const ExperimentConfig& cfg, double epsilon) {
    auto s = catalog::example1_synthesis(epsilon);
    if (cfg.avoid) s.in_avoid = [a = *cfg.avoid](const Vector& x) { return a.contains(x); };
    if (cfg.input_bounds) {
        s.input_lo = cfg.input_bounds->lo(0);
        s.input_hi = cfg.input_bounds->hi(0);
        if (!std::isfinite(s.input_lo) || !std::isfinite(s.input_hi))
            throw ConfigError("policy synthesis needs finite input bounds");
    }
    return s;
}

/// The discount and epsilon keys of a synthesis block belong to the problem, not the settings.
inline void apply_synthesis_overrides(SynthesisProblem& problem, const nlohmann::json& j) {
    using detail::get_checked;
    if (j.contains("discount")) problem.discount = get_checked<double>(j["discount"], "synthesis.discount");
    if (j.contains("epsilon")) problem.epsilon = get_checked<double>(j["epsilon"], "synthesis.epsilon");
    if (!(problem.discount > 0.0 && problem.discount < 1.0)) throw ConfigError("synthesis.discount must lie in (0,1)");
    if (!(problem.epsilon > 0.0 && problem.epsilon <= 1.0)) throw ConfigError("synthesis.epsilon must lie in (0,1]");
}

inline Scenario build_scenario(const ExperimentConfig& cfg) {
    Scenario s;
    const bool linear = cfg.model == "dcdc";
    if (linear) {
        LinearProblem p = cfg.linear ? linear_problem_from_json(*cfg.linear) : dcdc_problem();
        if (cfg.epsilon) p.epsilon = *cfg.epsilon;
        if (cfg.horizon) p.horizon = *cfg.horizon;
        p.validate();
        s.plant = plant_of(p, "dcdc");
        s.cost = StageCost::quadratic(p.Q, p.R, p.QN, p.horizon);
        s.constraints = ConstraintSet::polyhedral(p.state_constraints, p.input_constraints, p.epsilon);
        s.prior_mean = p.prior_mean;
        s.prior_cov = p.prior_cov;
        s.selection.epsilon = p.epsilon;
        s.selection.horizon = p.horizon;
        s.linear = p;
    } else {
        s.plant = catalog::example1_plant();
        const double eps = cfg.epsilon.value_or(0.3);
        const int horizon = cfg.horizon.value_or(6);
        s.avoid = cfg.avoid.value_or(catalog::example1_avoid());
        const Box ub = cfg.input_bounds.value_or(catalog::example1_input_box());
        s.constraints = ConstraintSet::avoid_region(*s.avoid, ub, eps);
        s.cost = catalog::example1_cost(horizon);
        s.prior_mean = cfg.prior_mean.value_or(catalog::example1_prior_mean());
        s.prior_cov = cfg.prior_cov.value_or(catalog::example1_prior_cov());
        s.selection.epsilon = eps;
        s.selection.horizon = horizon;
    }
    if (s.prior_mean.size() != s.plant.dims.state || s.prior_cov.rows() != s.plant.dims.state ||
        s.prior_cov.cols() != s.plant.dims.state)
        throw ConfigError("prior: dimension does not match the model state");
    if (cfg.initial_state && cfg.initial_state->size() != s.plant.dims.state)
        throw ConfigError("initial_state: dimension does not match the model state");
    s.selection.alpha = cfg.alpha.value_or(std::min(0.1, 0.5 * s.selection.epsilon));
    s.selection.delta = cfg.delta;
    s.selection.samples = cfg.samples;
    s.selection.threads = cfg.threads;
    s.selection.seed = cfg.seed;
    s.selection.validate();

    std::string type = cfg.controller.type;
    if (type == "default") type = linear ? "linear" : "kappa1";
    s.controller_name = type;
    if (type == "kappa1") {
        if (linear) throw ConfigError("controller: kappa1 belongs to the example1 model");
        s.controller = catalog::kappa1();
    } else if (type == "linear") {
        Matrix K;
        if (cfg.controller.gain) K = *cfg.controller.gain;
        else if (linear) K = s.linear->K;
        else throw ConfigError("controller: linear needs a gain for the example1 model");
        if (K.rows() != s.plant.dims.input || K.cols() != s.plant.dims.state)
            throw ConfigError("controller.gain: shape must be inputs x states");
        if (linear) s.linear->K = K;
        s.controller = Controller::linear_gain(K);
    } else {
        if (linear) throw ConfigError("controller: grid policies are synthesized for the example1 model");
        GridPolicy policy;
        if (cfg.controller.policy_file) {
            auto path = *cfg.controller.policy_file;
            if (path.is_relative()) path = cfg.base_dir / path;
            policy = load_policy(path);
        } else {
            auto problem = synthesis_problem_for(cfg, s.selection.epsilon);
            apply_synthesis_overrides(problem, *cfg.controller.synthesis);
            const Box region =
                default_synthesis_region(s.prior_mean, s.prior_cov, *s.avoid, s.plant.process_noise.covariance());
            auto settings = synthesis_settings_from_json(*cfg.controller.synthesis, region);
            settings.threads = cfg.threads;
            policy = synthesize_policy(problem, settings);
        }
        s.controller = policy.as_controller();
    }
    if (s.cost.horizon != s.selection.horizon) throw ConfigError("cost horizon differs from selector horizon");
    return s;
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

enum class StepStatus { Selected, Mean, MeanFallback, Infeasible };

inline const char* status_name(StepStatus s) {
    switch (s) {
        case StepStatus::Selected: return "selected";
        case StepStatus::Mean: return "mean";
        case StepStatus::MeanFallback: return "mean_fallback";
        case StepStatus::Infeasible: return "infeasible";
    }
    return "?";
}

struct StepRecord {
    int k = 0;
    Vector true_state;
    std::optional<Vector> input;        // absent on the stopping step
    std::optional<Vector> measurement;  // y_{k+1}
    std::optional<Vector> chosen;
    std::optional<std::size_t> chosen_index;
    StepStatus status = StepStatus::Selected;
    double violation_fraction = 0.0;
    std::size_t feasible_count = 0;
    double effective_sample_size = 0.0;
    bool true_state_violates = false;
    double wall_clock_seconds = 0.0;
};

struct ExperimentResult {
    std::vector<StepRecord> records;
    std::vector<ParticleSet> snapshots;  // Xi_k for recorded k
    std::vector<int> snapshot_steps;
    std::optional<int> stop_step;
    std::string stop_reason;  // empty when the run completed
    std::vector<std::string> warnings;
    int resolved_samples = 0;
    Vector final_true_state;
};

namespace detail {

/// Weighted fraction of particles outside the state constraint set.
inline double particle_violation(const ParticleSet& ps, const ConstraintSet& c) {
    double v = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (!c.state_ok(ps.particles[i])) v += ps.weights[i];
    return std::min(1.0, v);
}

/// Violation probability of N(mean, cov) estimated on a fixed set of draws.
inline double gaussian_violation(const Vector& mean, const Matrix& cov, const ConstraintSet& c,
                                 const std::vector<Vector>& standard_draws) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(cov));
    const Matrix root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    std::size_t hits = 0;
    for (const auto& z : standard_draws) hits += c.state_ok(mean + root * z) ? 0 : 1;
    return static_cast<double>(hits) / static_cast<double>(standard_draws.size());
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Scenario& sc) {
    using clock = std::chrono::steady_clock;
    ExperimentResult out;
    const auto& model = sc.plant;
    const NoiseModel prior = NoiseModel::gaussian(sc.prior_mean, sc.prior_cov);
    Vector truth;
    if (cfg.initial_state) {
        truth = *cfg.initial_state;
    } else {
        Rng rng(cfg.seed, {stream::kTruth});
        truth = prior.sample(rng);
    }

    const bool kalman = cfg.estimator == EstimatorKind::Kalman;
    ParticleSet ps;
    GaussianEstimate kf{sc.prior_mean, sc.prior_cov};
    std::vector<Vector> standard_draws;
    if (kalman) {
        Rng rng(cfg.seed, {stream::kViolationEstimate});
        for (int i = 0; i < 2000; ++i) {
            Vector z(model.dims.state);
            for (Eigen::Index d = 0; d < z.size(); ++d) z(d) = rng.normal();
            standard_draws.push_back(std::move(z));
        }
    } else {
        ps = sample_particles(prior, cfg.particles, cfg.seed);
    }

    const SelectionProblem problem{model, sc.controller, sc.cost, sc.constraints};
    if (!kalman && cfg.selection == SelectionMode::State)
        out.resolved_samples = resolve_samples(sc.selection, cfg.particles, &out.warnings);

    for (int k = 0; k < cfg.steps; ++k) {
        StepRecord rec;
        rec.k = k;
        rec.true_state = truth;
        rec.true_state_violates = !sc.constraints.state_ok(truth);
        Vector estimate_mean;
        if (kalman) {
            estimate_mean = kf.mean;
            rec.violation_fraction = detail::gaussian_violation(kf.mean, kf.covariance, sc.constraints, standard_draws);
        } else {
            ps.step = k;
            estimate_mean = mean_and_cov(ps).mean;
            rec.violation_fraction = detail::particle_violation(ps, sc.constraints);
            rec.effective_sample_size = effective_sample_size(ps);
            if (cfg.snapshot_every > 0 && k % cfg.snapshot_every == 0) {
                out.snapshots.push_back(ps);
                out.snapshot_steps.push_back(k);
            }
        }

        const auto t0 = clock::now();
        if (cfg.selection == SelectionMode::Mean) {
            rec.chosen = estimate_mean;
            rec.status = StepStatus::Mean;
        } else if (kalman) {
            LinearProblem p = *sc.linear;
            p.prior_mean = kf.mean;
            p.prior_cov = kf.covariance;
            const auto qp = select_state_qp(p, cfg.full_covariance ? CovarianceMode::Full : CovarianceMode::OneStep);
            rec.feasible_count = qp.solution.optimal() ? 1 : 0;
            if (qp.solution.optimal()) {
                rec.chosen = qp.solution.x;
                rec.status = StepStatus::Selected;
            }
        } else {
            SelectionConfig scfg = sc.selection;
            scfg.seed = derive_seed(cfg.seed, {stream::kSelectorSamples, static_cast<std::uint64_t>(k)});
            const auto sel = select_state(ps, problem, scfg);
            rec.feasible_count = sel.feasible_count();
            if (sel.chosen) {
                rec.chosen = *sel.chosen;
                rec.chosen_index = sel.chosen_index;
                rec.status = StepStatus::Selected;
            }
        }
        rec.wall_clock_seconds = std::chrono::duration<double>(clock::now() - t0).count();

        if (!rec.chosen) {
            if (!cfg.fallback_mean) {
                rec.status = StepStatus::Infeasible;
                out.records.push_back(std::move(rec));
                out.stop_step = k;
                out.stop_reason = "feasible set empty";
                break;
            }
            rec.chosen = estimate_mean;
            rec.status = StepStatus::MeanFallback;
        }

        const Vector u = sc.controller(*rec.chosen);
        Rng process(cfg.seed, {stream::kPlantProcess, static_cast<std::uint64_t>(k)});
        Rng measurement(cfg.seed, {stream::kPlantMeasurement, static_cast<std::uint64_t>(k)});
        truth = model.step(truth, u, model.process_noise.sample(process));
        const Vector y = model.measure(truth, model.measurement_noise.sample(measurement));
        rec.input = u;
        rec.measurement = y;
        out.records.push_back(std::move(rec));

        if (kalman) {
            kf = kalman_step(*sc.linear, kf.mean, kf.covariance, u, y);
        } else {
            try {
                ps = predict(ps, model, u, derive_seed(cfg.seed, {stream::kFilterPredict, static_cast<std::uint64_t>(k)}),
                             cfg.threads);
                ps = update(ps, model, y);
            } catch (const DegenerateLikelihood& e) {
                out.stop_step = k + 1;
                out.stop_reason = std::string("estimator diverged: ") + e.what();
                break;
            }
            Rng rs(cfg.seed, {stream::kFilterResample, static_cast<std::uint64_t>(k)});
            ps = resample_by_policy(ps, cfg.resample, rs);
        }
    }
    out.final_true_state = truth;
    return out;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, build_scenario(cfg)); }

inline std::vector<double> violation_rate_series(const std::vector<StepRecord>& records) {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.violation_fraction);
    return v;
}

inline double mean_violation_rate(const std::vector<StepRecord>& records) {
    if (records.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : records) s += r.violation_fraction;
    return s / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

namespace detail {

inline void write_cells(std::ostream& os, const std::optional<Vector>& v, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
        os << ',';
        if (v) os << (*v)(i);
    }
}

inline void header_cells(std::ostream& os, const char* prefix, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) os << ',' << prefix << i;
}

}  // namespace detail

/// steps.csv: one row per StepRecord. Wall-clock lives in summary.json so
/// that this file is byte-reproducible.
inline void write_steps_csv(const std::vector<StepRecord>& records, const Dims& dims, std::ostream& os) {
    os << "k";
    detail::header_cells(os, "x", dims.state);
    detail::header_cells(os, "u", dims.input);
    detail::header_cells(os, "y", dims.output);
    detail::header_cells(os, "chosen", dims.state);
    os << ",chosen_index,status,violation_rate,feasible_count,ess,true_violates\n";
    const auto old = os.precision(17);
    for (const auto& r : records) {
        os << r.k;
        detail::write_cells(os, r.true_state, dims.state);
        detail::write_cells(os, r.input, dims.input);
        detail::write_cells(os, r.measurement, dims.output);
        detail::write_cells(os, r.chosen, dims.state);
        os << ',';
        if (r.chosen_index) os << *r.chosen_index;
        os << ',' << status_name(r.status) << ',' << r.violation_fraction << ',' << r.feasible_count << ','
           << r.effective_sample_size << ',' << (r.true_state_violates ? 1 : 0) << '\n';
    }
    os.precision(old);
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const Scenario& sc, const ExperimentResult& res) {
    std::vector<double> clock;
    for (const auto& r : res.records) clock.push_back(r.wall_clock_seconds);
    double mean_clock = 0.0;
    double max_clock = 0.0;
    for (double c : clock) {
        mean_clock += c;
        max_clock = std::max(max_clock, c);
    }
    if (!clock.empty()) mean_clock /= static_cast<double>(clock.size());
    nlohmann::json j{{"model", cfg.model},
                     {"controller", sc.controller_name},
                     {"estimator", cfg.estimator == EstimatorKind::Kalman ? "kalman" : "particle"},
                     {"selection", cfg.selection == SelectionMode::State ? "state" : "mean"},
                     {"seed", cfg.seed},
                     {"epsilon", sc.selection.epsilon},
                     {"steps_requested", cfg.steps},
                     {"steps_recorded", res.records.size()},
                     {"mean_violation_rate", mean_violation_rate(res.records)},
                     {"violation_rates", violation_rate_series(res.records)},
                     {"stop_step", res.stop_step ? nlohmann::json(*res.stop_step) : nlohmann::json(nullptr)},
                     {"stop_reason", res.stop_reason},
                     {"mean_wall_clock_seconds", mean_clock},
                     {"max_wall_clock_seconds", max_clock},
                     {"wall_clock_seconds", clock},
                     {"resolved_samples", res.resolved_samples},
                     {"warnings", res.warnings}};
    if (cfg.estimator == EstimatorKind::Particle) {
        j["particles"] = cfg.particles;
        j["resample"] = detail::resample_name(cfg.resample);
    }
    if (res.final_true_state.size() > 0) j["final_true_state"] = json_io::to_json(res.final_true_state);
    return j;
}

namespace detail {

struct View {
    double x0, x1, y0, y1;
    double width = 720.0;
    double height = 720.0;

    double sx(double x) const { return (x - x0) / (x1 - x0) * width; }
    double sy(double y) const { return height - (y - y0) / (y1 - y0) * height; }
};

inline View plot_view(const Scenario& sc, const ExperimentResult& res) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    auto grow = [&](const Vector& p) {
        if (!std::isfinite(p(0)) || !std::isfinite(p(1))) return;
        x0 = std::min(x0, p(0));
        x1 = std::max(x1, p(0));
        y0 = std::min(y0, p(1));
        y1 = std::max(y1, p(1));
    };
    for (const auto& s : res.snapshots)
        for (const auto& p : s.particles) grow(p);
    for (const auto& r : res.records) {
        grow(r.true_state);
        if (r.chosen) grow(*r.chosen);
    }
    if (sc.avoid)
        for (const auto& b : sc.avoid->boxes) {
            grow(b.lo);
            grow(b.hi);
        }
    if (!std::isfinite(x0)) x0 = -1, x1 = 1, y0 = -1, y1 = 1;
    const double px = std::max(0.05 * (x1 - x0), 0.5);
    const double py = std::max(0.05 * (y1 - y0), 0.5);
    return {x0 - px, x1 + px, y0 - py, y1 + py};
}

}  // namespace detail

/// Particle clouds as circles, the avoid region cross-hatched, selected states as squares.
inline void write_trajectory_svg(const Scenario& sc, const ExperimentResult& res, std::ostream& os) {
    if (sc.plant.dims.state != 2) {
        os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"10\" height=\"10\"/>\n";
        return;
    }
    const auto v = detail::plot_view(sc, res);
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << v.width << "\" height=\"" << v.height
       << "\" viewBox=\"0 0 " << v.width << ' ' << v.height << "\">\n";
    os << "<defs><pattern id=\"hatch\" width=\"8\" height=\"8\" patternUnits=\"userSpaceOnUse\">"
          "<path d=\"M0,0 L8,8 M8,0 L0,8\" stroke=\"#444\" stroke-width=\"0.8\"/></pattern></defs>\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (sc.avoid) {
        os << "<g id=\"avoid\">\n";
        for (const auto& b : sc.avoid->boxes) {
            os << "<rect x=\"" << v.sx(b.lo(0)) << "\" y=\"" << v.sy(b.hi(1)) << "\" width=\""
               << v.sx(b.hi(0)) - v.sx(b.lo(0)) << "\" height=\"" << v.sy(b.lo(1)) - v.sy(b.hi(1))
               << "\" fill=\"url(#hatch)\" stroke=\"black\"/>\n";
        }
        os << "</g>\n";
    }
    if (sc.linear && sc.linear->state_constraints) {
        // Boundary lines T(j) x = xbar(j), clipped to the view.
        const auto& poly = *sc.linear->state_constraints;
        for (Eigen::Index r = 0; r < poly.rows(); ++r) {
            const double a = poly.A(r, 0), b = poly.A(r, 1), c = poly.b(r);
            if (std::abs(b) > std::abs(a)) {
                os << "<line class=\"boundary\" x1=\"" << v.sx(v.x0) << "\" y1=\"" << v.sy((c - a * v.x0) / b)
                   << "\" x2=\"" << v.sx(v.x1) << "\" y2=\"" << v.sy((c - a * v.x1) / b)
                   << "\" stroke=\"black\" stroke-dasharray=\"6,3\"/>\n";
            } else {
                os << "<line class=\"boundary\" x1=\"" << v.sx((c - b * v.y0) / a) << "\" y1=\"" << v.sy(v.y0)
                   << "\" x2=\"" << v.sx((c - b * v.y1) / a) << "\" y2=\"" << v.sy(v.y1)
                   << "\" stroke=\"black\" stroke-dasharray=\"6,3\"/>\n";
            }
        }
    }
    os << "<g id=\"particles\" fill=\"#1f77b4\" fill-opacity=\"0.35\">\n";
    for (std::size_t s = 0; s < res.snapshots.size(); ++s) {
        os << "<g class=\"cloud\" data-k=\"" << res.snapshot_steps[s] << "\">\n";
        for (const auto& p : res.snapshots[s].particles)
            os << "<circle class=\"particle\" cx=\"" << v.sx(p(0)) << "\" cy=\"" << v.sy(p(1)) << "\" r=\"1.5\"/>\n";
        os << "</g>\n";
    }
    os << "</g>\n";
    if (!res.records.empty()) {
        os << "<polyline id=\"truth\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.2\" points=\"";
        for (const auto& r : res.records) os << v.sx(r.true_state(0)) << ',' << v.sy(r.true_state(1)) << ' ';
        os << "\"/>\n";
    }
    os << "<g id=\"selected\" fill=\"black\">\n";
    for (const auto& r : res.records) {
        if (!r.chosen) continue;
        os << "<rect class=\"selected\" x=\"" << v.sx((*r.chosen)(0)) - 4 << "\" y=\"" << v.sy((*r.chosen)(1)) - 4
           << "\" width=\"8\" height=\"8\"/>\n";
    }
    os << "</g>\n</svg>\n";
}

/// Writes steps.csv, particles_<k>.csv, summary.json and (optionally) trajectory.svg.
inline void emit_outputs(const ExperimentConfig& cfg, const Scenario& sc, const ExperimentResult& res,
                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [](const std::filesystem::path& p) {
        std::ofstream f(p);
        if (!f) throw std::runtime_error("cannot write " + p.string());
        return f;
    };
    {
        auto f = open(dir / "steps.csv");
        write_steps_csv(res.records, sc.plant.dims, f);
    }
    for (std::size_t s = 0; s < res.snapshots.size(); ++s) {
        auto f = open(dir / ("particles_" + std::to_string(res.snapshot_steps[s]) + ".csv"));
        write_particles_csv(res.snapshots[s], f);
    }
    {
        auto f = open(dir / "summary.json");
        f << summary_json(cfg, sc, res).dump(2) << '\n';
    }
    if (cfg.emit_svg) {
        auto f = open(dir / "trajectory.svg");
        write_trajectory_svg(sc, res, f);
    }
}

}  // namespace statesel
