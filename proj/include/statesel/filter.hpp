#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "statesel/models.hpp"
#include "statesel/parallel.hpp"
#include "statesel/random.hpp"

namespace statesel {

/// Every particle received (numerically) zero likelihood: the filter has diverged.
class DegenerateLikelihood : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Weighted particle approximation of the filtered state density.
struct ParticleSet {
    std::vector<Vector> particles;
    std::vector<double> weights;
    int step = 0;

    std::size_t size() const { return particles.size(); }

    static ParticleSet uniform(std::vector<Vector> particles, int step = 0) {
        if (particles.empty()) throw ConfigError("particle set must be nonempty");
        ParticleSet ps;
        ps.weights.assign(particles.size(), 1.0 / static_cast<double>(particles.size()));
        ps.particles = std::move(particles);
        ps.step = step;
        return ps;
    }

    static ParticleSet point_mass(const Vector& x, int step = 0) { return uniform({x}, step); }

    void normalize() {
        const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
        if (!(total > 0.0) || !std::isfinite(total)) throw DegenerateLikelihood("particle weights sum to zero");
        for (double& w : weights) w /= total;
    }
};

/// L independent draws from `prior`, uniformly weighted.
inline ParticleSet sample_particles(const NoiseModel& prior, std::size_t count, std::uint64_t seed) {
    std::vector<Vector> particles;
    particles.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(seed, {stream::kPrior, i});
        particles.push_back(prior.sample(rng));
    }
    return ParticleSet::uniform(std::move(particles));
}

/// Propagates each particle through the dynamics with its own disturbance draw.
/// Particle i uses the stream (seed, i), so the output does not depend on `threads`.
inline ParticleSet predict(const ParticleSet& ps, const PlantModel& model, const Vector& u, std::uint64_t seed,
                           unsigned threads = 1) {
    ParticleSet out;
    out.particles.resize(ps.size());
    out.weights = ps.weights;
    out.step = ps.step + 1;
    parallel_for(ps.size(), threads, [&](std::size_t i) {
        Rng rng(seed, {stream::kFilterPredict, i});
        out.particles[i] = model.step(ps.particles[i], u, model.process_noise.sample(rng));
    });
    return out;
}

/// Bayes update with the additive measurement-noise density:
/// w_i <- w_i * p_v(y - h(xi_i, 0)), then renormalized in the log domain.
inline ParticleSet update(const ParticleSet& ps, const PlantModel& model, const Vector& y) {
    if (!model.measurement_noise.has_log_density()) throw ConfigError("update: measurement noise has no density");
    detail::require_dim(y, model.dims.output, "update measurement");
    std::vector<double> logw(ps.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const double prior = ps.weights[i] > 0.0 ? std::log(ps.weights[i]) : -std::numeric_limits<double>::infinity();
        logw[i] = prior + model.measurement_noise.log_density(y - model.measure_mean(ps.particles[i]));
        if (std::isnan(logw[i])) throw DegenerateLikelihood("particle log-weight is NaN");
        best = std::max(best, logw[i]);
    }
    if (!std::isfinite(best)) throw DegenerateLikelihood("all particle weights are zero after the measurement update");
    ParticleSet out;
    out.particles = ps.particles;
    out.step = ps.step;
    out.weights.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out.weights[i] = std::exp(logw[i] - best);
    out.normalize();
    return out;
}

/// Systematic resampling: positions (offset + i) / count, offset in [0,1).
inline std::vector<std::size_t> systematic_indices(std::span<const double> weights, std::size_t count, double offset) {
    std::vector<std::size_t> idx(count);
    double cumulative = weights.empty() ? 0.0 : weights[0];
    std::size_t j = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double position = (offset + static_cast<double>(i)) / static_cast<double>(count);
        while (position >= cumulative && j + 1 < weights.size()) cumulative += weights[++j];
        idx[i] = j;
    }
    return idx;
}

inline ParticleSet resample(const ParticleSet& ps, Rng& rng) {
    const auto idx = systematic_indices(ps.weights, ps.size(), rng.uniform());
    ParticleSet out;
    out.step = ps.step;
    out.particles.reserve(ps.size());
    for (std::size_t i : idx) out.particles.push_back(ps.particles[i]);
    out.weights.assign(ps.size(), 1.0 / static_cast<double>(ps.size()));
    return out;
}

inline double effective_sample_size(const ParticleSet& ps) {
    double sq = 0.0;
    for (double w : ps.weights) sq += w * w;
    return 1.0 / sq;
}

enum class ResamplePolicy { Always, WhenDepleted, Never };

/// WhenDepleted resamples once ESS drops below L/2.
inline ParticleSet resample_by_policy(const ParticleSet& ps, ResamplePolicy policy, Rng& rng) {
    switch (policy) {
        case ResamplePolicy::Always: return resample(ps, rng);
        case ResamplePolicy::WhenDepleted:
            if (effective_sample_size(ps) < 0.5 * static_cast<double>(ps.size())) return resample(ps, rng);
            return ps;
        case ResamplePolicy::Never: return ps;
    }
    return ps;
}

struct Moments {
    Vector mean;
    Matrix covariance;
};

inline Moments mean_and_cov(const ParticleSet& ps) {
    const Eigen::Index n = ps.particles.front().size();
    Moments m{Vector::Zero(n), Matrix::Zero(n, n)};
    for (std::size_t i = 0; i < ps.size(); ++i) m.mean += ps.weights[i] * ps.particles[i];
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Vector d = ps.particles[i] - m.mean;
        m.covariance += ps.weights[i] * d * d.transpose();
    }
    m.covariance = detail::symmetrize(m.covariance);
    return m;
}

// CSV: one row per particle, state components then weight.

inline void write_particles_csv(const ParticleSet& ps, std::ostream& os) {
    const Eigen::Index n = ps.particles.empty() ? 0 : ps.particles.front().size();
    for (Eigen::Index c = 0; c < n; ++c) os << 'x' << c << ',';
    os << "weight\n";
    const auto old_precision = os.precision(17);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        for (Eigen::Index c = 0; c < n; ++c) os << ps.particles[i](c) << ',';
        os << ps.weights[i] << '\n';
    }
    os.precision(old_precision);
}

inline ParticleSet read_particles_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("particle CSV: missing header");
    const auto columns = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);
    if (columns < 2) throw ConfigError("particle CSV: need at least one state column and a weight column");
    ParticleSet ps;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> values;
        while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
        if (static_cast<Eigen::Index>(values.size()) != columns)
            throw ConfigError("particle CSV: row has " + std::to_string(values.size()) + " columns");
        ps.particles.push_back(Eigen::Map<const Vector>(values.data(), columns - 1));
        ps.weights.push_back(values.back());
    }
    if (ps.particles.empty()) throw ConfigError("particle CSV: no particles");
    ps.normalize();
    return ps;
}

}  // namespace statesel
