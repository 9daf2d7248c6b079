#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "statesel/json_io.hpp"
#include "statesel/models.hpp"
#include "statesel/nearest.hpp"
#include "statesel/parallel.hpp"
#include "statesel/random.hpp"

// Discounted infinite-horizon value iteration on a randomized state grid,
// with a state-dependent admissible input set that keeps the one-step
// probability of entering the avoid region below epsilon. The resulting
// policy is fitted to a regular lattice and evaluated bilinearly.

namespace statesel {

/// Model data for the synthesis. Inputs are scalar and sorted ascending.
struct SynthesisProblem {
    PlantModel model;
    std::function<double(const Vector& x, double u)> stage_cost;
    std::function<bool(const Vector&)> in_avoid;
    double epsilon = 0.3;
    double input_lo = -3.0;
    double input_hi = 3.0;
    double discount = 0.9;
};

struct SynthesisSettings {
    std::size_t grid_points = 4000;
    std::size_t input_points = 50;
    std::size_t noise_draws = 64;
    Box region;      // where grid states are sampled
    Box fit_region;  // where the policy lattice is laid out; empty = region
    int lattice_resolution = 101;
    std::size_t fit_neighbours = 4;
    double tolerance = 1e-4;
    int max_sweeps = 2000;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

struct ValueGrid {
    std::vector<Vector> states;
    std::vector<double> inputs;
    std::vector<Vector> noise_draws;
    std::vector<double> values;
    double discount = 0.9;

    // Filled in by value_iteration.
    std::vector<char> avoid;                          // in the avoid region or absorbed into it
    std::vector<std::vector<std::size_t>> admissible;  // per node; empty = none admissible
    int sweeps = 0;
    double residual = 0.0;
    double contraction_slack = 0.0;  // max over sweeps of (d_{n+1} - gamma d_n)+
    std::size_t absorbed = 0;        // nodes added to the avoid set for lack of admissible inputs
};

class NonConvergence : public NumericalError {
public:
    NonConvergence(const std::string& what, double residual) : NumericalError(what), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

inline std::vector<double> input_grid(double lo, double hi, std::size_t count) {
    if (count == 0) throw ConfigError("input grid must have at least one point");
    if (count == 1) return {0.5 * (lo + hi)};
    std::vector<double> u(count);
    for (std::size_t i = 0; i < count; ++i)
        u[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    return u;
}

/// Uniformly random grid states over `region`, a uniform input grid, and a
/// fixed set of disturbance draws shared by every backup.
inline ValueGrid make_value_grid(const SynthesisProblem& problem, const SynthesisSettings& s) {
    if (s.region.lo.size() != problem.model.dims.state || s.region.hi.size() != problem.model.dims.state)
        throw ConfigError("synthesis region dimension does not match the state");
    if (!(problem.discount > 0.0 && problem.discount < 1.0)) throw ConfigError("discount must lie in (0,1)");
    if (s.noise_draws == 0) throw ConfigError("synthesis needs at least one noise draw");
    ValueGrid g;
    g.discount = problem.discount;
    Rng grid_rng(s.seed, {stream::kSynthGrid});
    g.states.reserve(s.grid_points);
    for (std::size_t i = 0; i < s.grid_points; ++i) {
        Vector x(s.region.lo.size());
        for (Eigen::Index d = 0; d < x.size(); ++d) x(d) = grid_rng.uniform(s.region.lo(d), s.region.hi(d));
        g.states.push_back(std::move(x));
    }
    g.inputs = input_grid(problem.input_lo, problem.input_hi, s.input_points);
    Rng noise_rng(s.seed, {stream::kSynthNoise});
    for (std::size_t d = 0; d < s.noise_draws; ++d) g.noise_draws.push_back(problem.model.process_noise.sample(noise_rng));
    g.values.assign(g.states.size(), 0.0);
    return g;
}

/// Indices of inputs whose empirical one-step probability of landing in the
/// avoid set is strictly below epsilon.
inline std::vector<std::size_t> admissible_inputs(const Vector& x, const std::vector<double>& inputs,
                                                  const PlantModel& model,
                                                  const std::function<bool(const Vector&)>& in_avoid, double epsilon,
                                                  const std::vector<Vector>& noise_draws) {
    if (noise_draws.empty()) throw ConfigError("admissible_inputs: no noise draws");
    std::vector<std::size_t> kept;
    const double draws = static_cast<double>(noise_draws.size());
    for (std::size_t iu = 0; iu < inputs.size(); ++iu) {
        const Vector u = Vector::Constant(1, inputs[iu]);
        std::size_t hits = 0;
        for (const Vector& w : noise_draws) hits += in_avoid(model.step(x, u, w)) ? 1 : 0;
        if (static_cast<double>(hits) / draws < epsilon) kept.push_back(iu);
    }
    return kept;
}

namespace detail {

/// Next-state nearest grid node for every (node, input, draw), flattened.
struct TransitionTable {
    std::size_t inputs = 0;
    std::size_t draws = 0;
    std::vector<std::uint32_t> next;
    std::vector<double> stage;  // stage cost per (node, input)

    std::uint32_t at(std::size_t node, std::size_t iu, std::size_t d) const {
        return next[(node * inputs + iu) * draws + d];
    }
};

inline TransitionTable build_transitions(const ValueGrid& g, const SynthesisProblem& problem, const KdTree& tree,
                                         unsigned threads) {
    TransitionTable t;
    t.inputs = g.inputs.size();
    t.draws = g.noise_draws.size();
    t.next.resize(g.states.size() * t.inputs * t.draws);
    t.stage.resize(g.states.size() * t.inputs);
    parallel_for(g.states.size(), threads, [&](std::size_t i) {
        for (std::size_t iu = 0; iu < t.inputs; ++iu) {
            const Vector u = Vector::Constant(1, g.inputs[iu]);
            t.stage[i * t.inputs + iu] = problem.stage_cost(g.states[i], g.inputs[iu]);
            for (std::size_t d = 0; d < t.draws; ++d) {
                const Vector next = problem.model.step(g.states[i], u, g.noise_draws[d]);
                t.next[(i * t.inputs + iu) * t.draws + d] = static_cast<std::uint32_t>(tree.nearest(next));
            }
        }
    });
    return t;
}

inline double expected_value(const TransitionTable& t, const std::vector<double>& values, std::size_t node,
                             std::size_t iu) {
    double sum = 0.0;
    const std::size_t base = (node * t.inputs + iu) * t.draws;
    for (std::size_t d = 0; d < t.draws; ++d) sum += values[t.next[base + d]];
    return sum / static_cast<double>(t.draws);
}

/// min over admissible inputs (all inputs when none are admissible); ties to the lowest index.
inline std::pair<double, std::size_t> best_backup(const TransitionTable& t, const ValueGrid& g, std::size_t node) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    auto consider = [&](std::size_t iu) {
        const double q = t.stage[node * t.inputs + iu] + g.discount * expected_value(t, g.values, node, iu);
        if (q < best) {
            best = q;
            arg = iu;
        }
    };
    if (g.admissible[node].empty()) {
        for (std::size_t iu = 0; iu < t.inputs; ++iu) consider(iu);
    } else {
        for (std::size_t iu : g.admissible[node]) consider(iu);
    }
    return {best, arg};
}

}  // namespace detail

struct ValueIterationResult {
    ValueGrid grid;
    std::vector<std::size_t> policy_index;  // argmin input index per node
};

/// Runs Bellman sweeps to a sup-norm change below the tolerance.
/// Nodes with no admissible input are absorbed into the avoid set (repeated
/// to a fixed point) and then back up over the full input set.
inline ValueIterationResult value_iteration(ValueGrid grid, const SynthesisProblem& problem,
                                            const SynthesisSettings& s) {
    if (grid.states.empty()) throw ConfigError("value_iteration: empty grid");
    if (!(grid.discount > 0.0 && grid.discount < 1.0)) throw ConfigError("value_iteration: discount must lie in (0,1)");
    const KdTree tree(grid.states);
    const auto t = detail::build_transitions(grid, problem, tree, s.threads);
    const std::size_t P = grid.states.size();
    const double draws = static_cast<double>(t.draws);

    grid.avoid.assign(P, 0);
    for (std::size_t i = 0; i < P; ++i) grid.avoid[i] = problem.in_avoid(grid.states[i]) ? 1 : 0;
    grid.admissible.assign(P, {});
    grid.absorbed = 0;
    for (bool changed = true; changed;) {
        changed = false;
        for (std::size_t i = 0; i < P; ++i) {
            grid.admissible[i].clear();
            for (std::size_t iu = 0; iu < t.inputs; ++iu) {
                std::size_t hits = 0;
                for (std::size_t d = 0; d < t.draws; ++d) hits += grid.avoid[t.at(i, iu, d)];
                if (static_cast<double>(hits) / draws < problem.epsilon) grid.admissible[i].push_back(iu);
            }
            if (grid.admissible[i].empty() && !grid.avoid[i]) {
                grid.avoid[i] = 1;
                ++grid.absorbed;
                changed = true;
            }
        }
    }

    std::vector<double> next(P);
    double previous_change = std::numeric_limits<double>::infinity();
    grid.contraction_slack = 0.0;
    for (grid.sweeps = 1; grid.sweeps <= s.max_sweeps; ++grid.sweeps) {
        parallel_for(P, s.threads, [&](std::size_t i) { next[i] = detail::best_backup(t, grid, i).first; });
        double change = 0.0;
        for (std::size_t i = 0; i < P; ++i) change = std::max(change, std::abs(next[i] - grid.values[i]));
        if (std::isfinite(previous_change))
            grid.contraction_slack = std::max(grid.contraction_slack, change - grid.discount * previous_change);
        previous_change = change;
        grid.values.swap(next);
        grid.residual = change;
        if (change < s.tolerance) break;
    }
    if (grid.sweeps > s.max_sweeps) {
        grid.sweeps = s.max_sweeps;
        throw NonConvergence("value_iteration: no convergence within " + std::to_string(s.max_sweeps) +
                                 " sweeps, residual " + std::to_string(grid.residual),
                             grid.residual);
    }

    ValueIterationResult out;
    out.policy_index.resize(P);
    for (std::size_t i = 0; i < P; ++i) out.policy_index[i] = detail::best_backup(t, grid, i).second;
    out.grid = std::move(grid);
    return out;
}

/// Piecewise-bilinear policy on a regular lattice over a 2-D region,
/// clamped to the input bounds.
struct GridPolicy {
    Box region;
    int resolution = 101;
    std::vector<double> values;  // values[iy * resolution + ix]
    double input_lo = -3.0;
    double input_hi = 3.0;
    nlohmann::json metadata = nlohmann::json::object();

    double at(int ix, int iy) const { return values[static_cast<std::size_t>(iy * resolution + ix)]; }

    double evaluate(const Vector& x) const {
        auto coord = [&](Eigen::Index d, int& cell, double& frac) {
            const double span = region.hi(d) - region.lo(d);
            double f = (std::clamp(x(d), region.lo(d), region.hi(d)) - region.lo(d)) / span * (resolution - 1);
            cell = std::min(static_cast<int>(std::floor(f)), resolution - 2);
            frac = f - cell;
        };
        int ix = 0;
        int iy = 0;
        double tx = 0.0;
        double ty = 0.0;
        coord(0, ix, tx);
        coord(1, iy, ty);
        const double v = (1 - tx) * (1 - ty) * at(ix, iy) + tx * (1 - ty) * at(ix + 1, iy) +
                         (1 - tx) * ty * at(ix, iy + 1) + tx * ty * at(ix + 1, iy + 1);
        return std::clamp(v, input_lo, input_hi);
    }

    Controller as_controller() const {
        return {ControllerKind::GridPolicy, [p = *this](const Vector& x) { return Vector(Vector::Constant(1, p.evaluate(x))); }};
    }
};

/// Per-node argmin policy, fitted to the lattice by inverse-distance
/// averaging over the nearest grid nodes.
inline GridPolicy extract_policy(const ValueIterationResult& vi, const SynthesisProblem& problem,
                                 const SynthesisSettings& s) {
    const auto& g = vi.grid;
    if (g.states.front().size() != 2) throw ConfigError("extract_policy: the lattice fit needs a 2-D state");
    if (s.lattice_resolution < 2) throw ConfigError("extract_policy: lattice resolution must be at least 2");
    GridPolicy policy;
    policy.region = s.fit_region.lo.size() == 2 ? s.fit_region : s.region;
    policy.resolution = s.lattice_resolution;
    policy.input_lo = problem.input_lo;
    policy.input_hi = problem.input_hi;
    policy.values.resize(static_cast<std::size_t>(s.lattice_resolution * s.lattice_resolution));
    const KdTree tree(g.states);
    const int res = s.lattice_resolution;
    for (int iy = 0; iy < res; ++iy) {
        for (int ix = 0; ix < res; ++ix) {
            Vector q(2);
            q(0) = policy.region.lo(0) + (policy.region.hi(0) - policy.region.lo(0)) * ix / (res - 1);
            q(1) = policy.region.lo(1) + (policy.region.hi(1) - policy.region.lo(1)) * iy / (res - 1);
            const auto nn = tree.k_nearest(q, s.fit_neighbours);
            double num = 0.0;
            double den = 0.0;
            double exact = std::numeric_limits<double>::quiet_NaN();
            for (const auto& [d2, idx] : nn) {
                const double u = g.inputs[vi.policy_index[idx]];
                if (d2 < 1e-24) {
                    exact = u;
                    break;
                }
                const double w = 1.0 / std::sqrt(d2);
                num += w * u;
                den += w;
            }
            const double value = std::isnan(exact) ? num / den : exact;
            policy.values[static_cast<std::size_t>(iy * res + ix)] = std::clamp(value, problem.input_lo, problem.input_hi);
        }
    }
    policy.metadata = {{"discount", g.discount},
                       {"grid_points", g.states.size()},
                       {"input_points", g.inputs.size()},
                       {"noise_draws", g.noise_draws.size()},
                       {"sweeps", g.sweeps},
                       {"residual", g.residual},
                       {"absorbed", g.absorbed}};
    return policy;
}

inline GridPolicy synthesize_policy(const SynthesisProblem& problem, const SynthesisSettings& s) {
    return extract_policy(value_iteration(make_value_grid(problem, s), problem, s), problem, s);
}

/// Bounding box of mean +- 4 sigma of the prior, united with the avoid
/// boxes inflated by 2 process-noise standard deviations.
inline Box default_synthesis_region(const Vector& prior_mean, const Matrix& prior_cov, const BoxUnion& avoid,
                                    const Matrix& process_cov) {
    const Vector prior_sd = prior_cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    const Vector noise_sd = process_cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    Box box{prior_mean - 4.0 * prior_sd, prior_mean + 4.0 * prior_sd};
    for (const auto& b : avoid.boxes) {
        box.lo = box.lo.cwiseMin(b.lo - 2.0 * noise_sd);
        box.hi = box.hi.cwiseMax(b.hi + 2.0 * noise_sd);
    }
    return box;
}

// Policy file: JSON header next to a CSV matrix of lattice values
// (one row per iy, one column per ix).

inline void save_policy(const GridPolicy& p, const std::filesystem::path& json_path) {
    std::filesystem::path csv_path = json_path;
    csv_path.replace_extension(".csv");
    nlohmann::json header{{"region", {{"lo", json_io::to_json(p.region.lo)}, {"hi", json_io::to_json(p.region.hi)}}},
                          {"resolution", p.resolution},
                          {"input_bounds", {p.input_lo, p.input_hi}},
                          {"values_csv", csv_path.filename().string()},
                          {"synthesis", p.metadata}};
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot write " + json_path.string());
    js << header.dump(2) << '\n';
    std::ofstream cs(csv_path);
    if (!cs) throw std::runtime_error("cannot write " + csv_path.string());
    cs.precision(17);
    for (int iy = 0; iy < p.resolution; ++iy) {
        for (int ix = 0; ix < p.resolution; ++ix) cs << (ix ? "," : "") << p.at(ix, iy);
        cs << '\n';
    }
}

inline GridPolicy load_policy(const std::filesystem::path& json_path) {
    std::ifstream js(json_path);
    if (!js) throw ConfigError("cannot open policy " + json_path.string());
    const auto header = nlohmann::json::parse(js);
    GridPolicy p;
    p.region = {json_io::vector_from(header.at("region").at("lo"), "region.lo"),
                json_io::vector_from(header.at("region").at("hi"), "region.hi")};
    p.resolution = header.at("resolution").get<int>();
    p.input_lo = header.at("input_bounds").at(0).get<double>();
    p.input_hi = header.at("input_bounds").at(1).get<double>();
    if (header.contains("synthesis")) p.metadata = header.at("synthesis");
    std::ifstream cs(json_path.parent_path() / header.at("values_csv").get<std::string>());
    if (!cs) throw ConfigError("cannot open policy values for " + json_path.string());
    std::string line;
    while (std::getline(cs, line)) {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) p.values.push_back(std::stod(cell));
    }
    if (p.values.size() != static_cast<std::size_t>(p.resolution * p.resolution))
        throw ConfigError("policy values do not match the lattice resolution");
    return p;
}

}  // namespace statesel
