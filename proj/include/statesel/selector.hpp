#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "statesel/filter.hpp"
#include "statesel/models.hpp"
#include "statesel/parallel.hpp"
#include "statesel/random.hpp"

namespace statesel {

struct SelectionConfig {
    double epsilon = 0.3;  // tolerated violation probability
    double alpha = 0.1;    // statistical feasibility tolerance, alpha < epsilon
    double delta = 0.01;   // reliability margin for the sample bound
    int horizon = 6;
    int samples = 0;  // M; 0 resolves to sample_bound()
    std::uint64_t seed = 0;
    unsigned threads = 1;  // 0 = hardware concurrency

    void validate() const {
        if (!(alpha >= 0.0 && alpha < epsilon && epsilon < 1.0))
            throw ConfigError("selection config: need 0 <= alpha < epsilon < 1");
        if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("selection config: need 0 < delta < 1");
        if (horizon < 1) throw ConfigError("selection config: horizon must be at least 1");
        if (samples < 0) throw ConfigError("selection config: samples must be nonnegative");
    }
};

/// Smallest M with M >= ln(L/delta) / (2 (epsilon - alpha)^2), at least 1.
/// With that many samples the sampled feasible set lies inside the
/// epsilon-feasible set with probability at least 1 - delta.
inline int sample_bound(double epsilon, double alpha, double delta, std::size_t particle_count) {
    if (!(alpha >= 0.0 && alpha < epsilon)) throw ConfigError("sample_bound: need 0 <= alpha < epsilon");
    if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("sample_bound: need 0 < delta <= 1");
    if (particle_count < 1) throw ConfigError("sample_bound: need at least one particle");
    const double gap = epsilon - alpha;
    const double raw = std::log(static_cast<double>(particle_count) / delta) / (2.0 * gap * gap);
    // Guard against raw landing a few ulps above an integer it equals exactly.
    const double rounded = std::ceil(raw - 1e-9 * std::max(1.0, raw));
    return std::max(1, static_cast<int>(rounded));
}

/// The M Monte Carlo tuples (W'_j, W''_j, x''_{0,j}) shared by every candidate.
struct SampleBank {
    std::vector<std::vector<Vector>> closed_noise;  // W'_j, N disturbances each
    std::vector<std::vector<Vector>> open_noise;    // W''_j
    std::vector<Vector> initial;                    // x''_{0,j}

    std::size_t size() const { return initial.size(); }
    int horizon() const { return closed_noise.empty() ? 0 : static_cast<int>(closed_noise.front().size()); }

    /// Tuple j is drawn from its own stream (seed, j).
    static SampleBank draw(int samples, int horizon, const NoiseModel& disturbance,
                           const std::function<Vector(Rng&)>& initial_sampler, std::uint64_t seed) {
        SampleBank bank;
        bank.closed_noise.resize(samples);
        bank.open_noise.resize(samples);
        bank.initial.resize(samples);
        for (int j = 0; j < samples; ++j) {
            Rng rng(seed, {stream::kSelectorSamples, static_cast<std::uint64_t>(j)});
            bank.closed_noise[j].reserve(horizon);
            bank.open_noise[j].reserve(horizon);
            for (int k = 0; k < horizon; ++k) bank.closed_noise[j].push_back(disturbance.sample(rng));
            for (int k = 0; k < horizon; ++k) bank.open_noise[j].push_back(disturbance.sample(rng));
            bank.initial[j] = initial_sampler(rng);
        }
        return bank;
    }

    /// Initial states are weighted draws from the particle set.
    static SampleBank draw(int samples, int horizon, const NoiseModel& disturbance, const ParticleSet& particles,
                           std::uint64_t seed) {
        std::vector<double> cumulative(particles.size());
        std::partial_sum(particles.weights.begin(), particles.weights.end(), cumulative.begin());
        const double total = cumulative.back();
        auto sampler = [&](Rng& rng) -> Vector {
            const double u = rng.uniform() * total;
            auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
            const auto i = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), particles.size() - 1);
            return particles.particles[i];
        };
        return draw(samples, horizon, disturbance, sampler, seed);
    }
};

/// References to everything the selector needs besides the particles.
struct SelectionProblem {
    const PlantModel& model;
    const Controller& controller;
    const StageCost& cost;
    const ConstraintSet& constraints;
};

struct CandidateReport {
    Vector candidate;
    std::vector<double> beta;    // input feasibility rate, k = 0..N-1
    std::vector<double> lambda;  // state feasibility rate, k = 1..N
    bool feasible = false;
    std::optional<double> sampled_cost;
};

struct SelectionResult {
    std::optional<std::size_t> chosen_index;
    std::optional<Vector> chosen;
    std::vector<CandidateReport> reports;
    int resolved_samples = 0;
    std::vector<std::string> warnings;

    std::size_t feasible_count() const {
        std::size_t n = 0;
        for (const auto& r : reports) n += r.feasible ? 1 : 0;
        return n;
    }
};

namespace detail {

struct SampleOutcome {
    std::vector<int> input_ok;  // per k
    std::vector<int> state_ok;  // per k (index 0 is k = 1)
    std::vector<double> costs;  // per j
};

inline SampleOutcome simulate_candidate(const Vector& candidate, const SampleBank& bank, const SelectionProblem& p) {
    const int horizon = bank.horizon();
    SampleOutcome out{std::vector<int>(horizon, 0), std::vector<int>(horizon, 0), {}};
    out.costs.reserve(bank.size());
    for (std::size_t j = 0; j < bank.size(); ++j) {
        const auto closed = rollout_closed_loop(p.model, p.controller, candidate, bank.closed_noise[j]);
        const auto open = rollout_open_loop(p.model, closed.inputs, bank.initial[j], bank.open_noise[j]);
        for (int k = 0; k < horizon; ++k) {
            out.input_ok[k] += p.constraints.input_ok(closed.inputs[k]) ? 1 : 0;
            out.state_ok[k] += p.constraints.state_ok(open[k + 1]) ? 1 : 0;
        }
        out.costs.push_back(trajectory_cost(p.cost, open, closed.inputs));
    }
    return out;
}

/// Incremental mean; returns c exactly when every sample equals c.
inline double running_mean(const std::vector<double>& values) {
    double mean = 0.0;
    for (std::size_t j = 0; j < values.size(); ++j) mean += (values[j] - mean) / static_cast<double>(j + 1);
    return mean;
}

inline int required_count(double alpha, std::size_t samples) {
    const double need = (1.0 - alpha) * static_cast<double>(samples);
    return static_cast<int>(std::ceil(need - 1e-9 * std::max(1.0, need)));
}

}  // namespace detail

/// Monte Carlo feasibility rates and sampled cost of one candidate initial state.
inline CandidateReport evaluate_candidate(const Vector& candidate, const SampleBank& bank, const SelectionProblem& p,
                                          double alpha) {
    if (bank.size() == 0) throw ConfigError("evaluate_candidate: empty sample bank");
    if (bank.horizon() != p.cost.horizon) throw ConfigError("evaluate_candidate: bank horizon differs from cost horizon");
    const auto outcome = detail::simulate_candidate(candidate, bank, p);
    const double m = static_cast<double>(bank.size());
    const int need = detail::required_count(alpha, bank.size());

    CandidateReport report;
    report.candidate = candidate;
    report.feasible = true;
    for (std::size_t k = 0; k < outcome.input_ok.size(); ++k) {
        report.beta.push_back(outcome.input_ok[k] / m);
        report.lambda.push_back(outcome.state_ok[k] / m);
        if (outcome.input_ok[k] < need || outcome.state_ok[k] < need) report.feasible = false;
    }
    if (report.feasible) report.sampled_cost = detail::running_mean(outcome.costs);
    return report;
}

inline int resolve_samples(const SelectionConfig& cfg, std::size_t particle_count, std::vector<std::string>* warnings) {
    const int bound = sample_bound(cfg.epsilon, cfg.alpha, cfg.delta, particle_count);
    if (cfg.samples == 0) return bound;
    if (cfg.samples < bound && warnings)
        warnings->push_back("M=" + std::to_string(cfg.samples) + " is below the sample bound " + std::to_string(bound));
    return cfg.samples;
}

inline SampleBank draw_bank(const ParticleSet& particles, const SelectionProblem& p, const SelectionConfig& cfg,
                            int samples) {
    return SampleBank::draw(samples, cfg.horizon, p.model.process_noise, particles, cfg.seed);
}

inline CandidateReport evaluate_candidate(const Vector& candidate, const ParticleSet& particles,
                                          const SelectionProblem& p, const SelectionConfig& cfg) {
    cfg.validate();
    const int m = resolve_samples(cfg, particles.size(), nullptr);
    return evaluate_candidate(candidate, draw_bank(particles, p, cfg, m), p, cfg.alpha);
}

/// Evaluates every particle as a candidate and returns the feasible one with
/// least sampled cost (lowest index on ties), or no choice when none is feasible.
inline SelectionResult select_state(const ParticleSet& particles, const SelectionProblem& p,
                                    const SelectionConfig& cfg) {
    cfg.validate();
    if (particles.size() == 0) throw ConfigError("select_state: empty particle set");
    if (cfg.horizon != p.cost.horizon) throw ConfigError("select_state: config horizon differs from cost horizon");
    SelectionResult result;
    result.resolved_samples = resolve_samples(cfg, particles.size(), &result.warnings);
    const SampleBank bank = draw_bank(particles, p, cfg, result.resolved_samples);

    result.reports.resize(particles.size());
    parallel_for(particles.size(), cfg.threads,
                 [&](std::size_t i) { result.reports[i] = evaluate_candidate(particles.particles[i], bank, p, cfg.alpha); });

    for (std::size_t i = 0; i < result.reports.size(); ++i) {
        const auto& r = result.reports[i];
        if (!r.feasible) continue;
        if (!result.chosen_index || *r.sampled_cost < *result.reports[*result.chosen_index].sampled_cost)
            result.chosen_index = i;
    }
    if (result.chosen_index) result.chosen = particles.particles[*result.chosen_index];
    return result;
}

/// Evaluates `extra` on the same sample streams as `result` and reports
/// whether the chosen state's sampled cost is no worse.
inline bool candidate_dominance_check(const SelectionResult& result, const Vector& extra,
                                      const ParticleSet& particles, const SelectionProblem& p,
                                      const SelectionConfig& cfg) {
    const SampleBank bank = draw_bank(particles, p, cfg, result.resolved_samples);
    const auto report = evaluate_candidate(extra, bank, p, cfg.alpha);
    if (!report.feasible) return true;
    if (!result.chosen_index) return false;
    return *result.reports[*result.chosen_index].sampled_cost <= *report.sampled_cost;
}

struct PairedDifference {
    double mean = 0.0;
    double standard_error = 0.0;
};

/// Sample mean and standard error of J(a) - J(b) over a shared bank.
inline PairedDifference paired_cost_difference(const Vector& a, const Vector& b, const SampleBank& bank,
                                               const SelectionProblem& p) {
    const auto ca = detail::simulate_candidate(a, bank, p).costs;
    const auto cb = detail::simulate_candidate(b, bank, p).costs;
    const double m = static_cast<double>(bank.size());
    double mean = 0.0;
    for (std::size_t j = 0; j < ca.size(); ++j) mean += ca[j] - cb[j];
    mean /= m;
    double ss = 0.0;
    for (std::size_t j = 0; j < ca.size(); ++j) ss += (ca[j] - cb[j] - mean) * (ca[j] - cb[j] - mean);
    const double variance = bank.size() > 1 ? ss / (m - 1.0) : 0.0;
    return {mean, std::sqrt(variance / m)};
}

inline nlohmann::json to_json(const SelectionResult& r) {
    nlohmann::json j;
    j["resolved_samples"] = r.resolved_samples;
    j["chosen_index"] = r.chosen_index ? nlohmann::json(*r.chosen_index) : nlohmann::json(nullptr);
    j["chosen"] = r.chosen ? nlohmann::json(std::vector<double>(r.chosen->begin(), r.chosen->end()))
                           : nlohmann::json(nullptr);
    j["feasible_count"] = r.feasible_count();
    j["warnings"] = r.warnings;
    auto& reports = j["candidates"] = nlohmann::json::array();
    for (const auto& c : r.reports) {
        reports.push_back({{"candidate", std::vector<double>(c.candidate.begin(), c.candidate.end())},
                           {"beta", c.beta},
                           {"lambda", c.lambda},
                           {"feasible", c.feasible},
                           {"sampled_cost", c.sampled_cost ? nlohmann::json(*c.sampled_cost) : nlohmann::json(nullptr)}});
    }
    return j;
}

}  // namespace statesel
