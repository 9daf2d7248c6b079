#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "statesel/random.hpp"
#include "statesel/types.hpp"

namespace statesel {

// ============================================================================
// Noise
// ============================================================================

/// A disturbance density: a sampler, a log-density, and its first two moments.
class NoiseModel {
public:
    using Sampler = std::function<Vector(Rng&)>;
    using LogDensity = std::function<double(const Vector&)>;

    NoiseModel() = default;
    NoiseModel(Sampler sampler, LogDensity log_density, Vector mean, Matrix covariance)
        : sampler_(std::move(sampler)),
          log_density_(std::move(log_density)),
          mean_(std::move(mean)),
          covariance_(std::move(covariance)) {}

    /// N(mean, covariance). The covariance may be singular (e.g. zero) for
    /// sampling; log_density then throws since no density exists.
    static NoiseModel gaussian(Vector mean, Matrix covariance) {
        if (covariance.rows() != mean.size() || covariance.cols() != mean.size())
            throw ConfigError("gaussian noise: covariance shape does not match mean");
        covariance = detail::symmetrize(covariance);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(covariance);
        if (eig.eigenvalues().size() > 0 && eig.eigenvalues().minCoeff() < -1e-12 * (1.0 + eig.eigenvalues().cwiseAbs().maxCoeff()))
            throw ConfigError("gaussian noise: covariance is not positive semidefinite");
        const Matrix root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();

        Eigen::LLT<Matrix> llt(covariance);
        const bool definite = llt.info() == Eigen::Success && mean.size() > 0 &&
                              eig.eigenvalues().minCoeff() > 0.0;
        double log_norm = 0.0;
        if (definite) {
            const Matrix l = llt.matrixL();
            log_norm = -0.5 * static_cast<double>(mean.size()) * std::log(2.0 * std::numbers::pi) -
                       l.diagonal().array().log().sum();
        }

        Sampler sampler = [mean, root](Rng& rng) {
            Vector z(mean.size());
            for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
            return Vector(mean + root * z);
        };
        LogDensity log_density = [mean, llt, definite, log_norm](const Vector& v) {
            if (!definite) throw ConfigError("gaussian noise: log_density requires a positive definite covariance");
            detail::require_dim(v, mean.size(), "gaussian log_density");
            const Vector d = v - mean;
            return log_norm - 0.5 * d.dot(llt.solve(d));
        };
        return NoiseModel(std::move(sampler), std::move(log_density), mean, covariance);
    }

    static NoiseModel gaussian(Matrix covariance) {
        Vector mean = Vector::Zero(covariance.rows());
        return gaussian(std::move(mean), std::move(covariance));
    }

    Vector sample(Rng& rng) const { return sampler_(rng); }
    double log_density(const Vector& v) const { return log_density_(v); }
    bool has_log_density() const { return static_cast<bool>(log_density_); }

    const Vector& mean() const { return mean_; }
    const Matrix& covariance() const { return covariance_; }
    Eigen::Index dim() const { return mean_.size(); }

private:
    Sampler sampler_;
    LogDensity log_density_;
    Vector mean_;
    Matrix covariance_;
};

// ============================================================================
// Plant
// ============================================================================

struct Dims {
    Eigen::Index state = 0;
    Eigen::Index input = 0;
    Eigen::Index disturbance = 0;
    Eigen::Index output = 0;
};

/// x_{k+1} = step(x_k, u_k, w_k),  y_k = measure(x_k, v_k).
/// Both maps must be pure.
struct PlantModel {
    using StepFn = std::function<Vector(const Vector& x, const Vector& u, const Vector& w)>;
    using MeasureFn = std::function<Vector(const Vector& x, const Vector& v)>;

    std::string name;
    Dims dims;
    StepFn step;
    MeasureFn measure;
    NoiseModel process_noise;
    NoiseModel measurement_noise;

    /// Noise-free output, used as the likelihood centre by the particle filter.
    Vector measure_mean(const Vector& x) const { return measure(x, Vector::Zero(dims.output)); }
};

inline PlantModel linear_plant(std::string name, const Matrix& F, const Matrix& G, const Matrix& H,
                               const Matrix& process_cov, const Matrix& measurement_cov) {
    if (F.rows() != F.cols() || G.rows() != F.rows() || H.cols() != F.rows() ||
        process_cov.rows() != F.rows() || measurement_cov.rows() != H.rows())
        throw ConfigError("linear_plant: inconsistent matrix shapes");
    PlantModel m;
    m.name = std::move(name);
    m.dims = {F.rows(), G.cols(), F.rows(), H.rows()};
    m.step = [F, G](const Vector& x, const Vector& u, const Vector& w) { return Vector(F * x + G * u + w); };
    m.measure = [H](const Vector& x, const Vector& v) { return Vector(H * x + v); };
    m.process_noise = NoiseModel::gaussian(process_cov);
    m.measurement_noise = NoiseModel::gaussian(measurement_cov);
    return m;
}

// ============================================================================
// Constraints
// ============================================================================

/// { x : A x <= b }
struct Polyhedron {
    Matrix A;
    Vector b;

    bool contains(const Vector& x) const { return ((A * x) - b).maxCoeff() <= 0.0; }
    Eigen::Index rows() const { return A.rows(); }
};

struct Box {
    Vector lo;
    Vector hi;

    bool contains(const Vector& x) const {
        return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
    }
};

struct BoxUnion {
    std::vector<Box> boxes;

    bool contains(const Vector& x) const {
        for (const auto& b : boxes)
            if (b.contains(x)) return true;
        return false;
    }
    bool empty() const { return boxes.empty(); }
};

namespace detail {
inline void require_full_row_rank(const Matrix& m, const char* what) {
    if (m.rows() == 0) return;
    Eigen::ColPivHouseholderQR<Matrix> qr(m);
    if (qr.rank() != m.rows()) throw ConfigError(std::string(what) + ": matrix must have full row rank");
}
}  // namespace detail

/// State set X, input set U, and the tolerated violation probability epsilon.
struct ConstraintSet {
    using Membership = std::function<bool(const Vector&)>;

    Membership state_member;
    Membership input_member;
    std::optional<Polyhedron> state_polyhedron;
    std::optional<Polyhedron> input_polyhedron;
    double violation_tolerance = 0.0;

    bool state_ok(const Vector& x) const { return state_member(x); }
    bool input_ok(const Vector& u) const { return input_member(u); }

    static ConstraintSet unconstrained(double epsilon = 0.0) {
        ConstraintSet c;
        c.state_member = [](const Vector&) { return true; };
        c.input_member = [](const Vector&) { return true; };
        c.violation_tolerance = checked_epsilon(epsilon);
        return c;
    }

    /// X = {x : T x <= xbar}, U = {u : S u <= ubar}; either may be absent (whole space).
    static ConstraintSet polyhedral(std::optional<Polyhedron> state, std::optional<Polyhedron> input, double epsilon) {
        ConstraintSet c = unconstrained(epsilon);
        if (state) {
            if (state->A.rows() != state->b.size()) throw ConfigError("state polyhedron: T and xbar disagree");
            detail::require_full_row_rank(state->A, "state polyhedron T");
            c.state_member = [p = *state](const Vector& x) { return p.contains(x); };
            c.state_polyhedron = std::move(state);
        }
        if (input) {
            if (input->A.rows() != input->b.size()) throw ConfigError("input polyhedron: S and ubar disagree");
            detail::require_full_row_rank(input->A, "input polyhedron S");
            c.input_member = [p = *input](const Vector& u) { return p.contains(u); };
            c.input_polyhedron = std::move(input);
        }
        return c;
    }

    /// X = complement of `avoid`, U = box.
    static ConstraintSet avoid_region(BoxUnion avoid, std::optional<Box> input_box, double epsilon) {
        ConstraintSet c = unconstrained(epsilon);
        c.state_member = [a = std::move(avoid)](const Vector& x) { return !a.contains(x); };
        if (input_box) c.input_member = [b = *input_box](const Vector& u) { return b.contains(u); };
        return c;
    }

    static double checked_epsilon(double epsilon) {
        if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("violation tolerance must lie in [0,1)");
        return epsilon;
    }
};

// ============================================================================
// Cost and control
// ============================================================================

/// J = sum_{k=0}^{N} running(k, x_k, u_k), with u_N = 0 at the terminal stage.
struct StageCost {
    std::function<double(int k, const Vector& x, const Vector& u)> running;
    int horizon = 1;

    /// x'Qx + u'Ru for k < N, x'Q_N x at k = N.
    static StageCost quadratic(Matrix Q, Matrix R, Matrix QN, int horizon) {
        if (horizon < 1) throw ConfigError("horizon must be at least 1");
        StageCost c;
        c.horizon = horizon;
        c.running = [Q = std::move(Q), R = std::move(R), QN = std::move(QN), horizon](int k, const Vector& x,
                                                                                      const Vector& u) {
            if (k >= horizon) return x.dot(QN * x) + u.dot(R * u);
            return x.dot(Q * x) + u.dot(R * u);
        };
        return c;
    }
};

enum class ControllerKind { FeedbackLinearizing, LinearGain, GridPolicy, Custom };

struct Controller {
    ControllerKind kind = ControllerKind::Custom;
    std::function<Vector(const Vector&)> act;

    Vector operator()(const Vector& x) const { return act(x); }

    static Controller linear_gain(Matrix K) {
        return {ControllerKind::LinearGain, [K = std::move(K)](const Vector& x) { return Vector(K * x); }};
    }
    static Controller custom(std::function<Vector(const Vector&)> fn) {
        return {ControllerKind::Custom, std::move(fn)};
    }
};

// ============================================================================
// Rollouts
// ============================================================================

struct ClosedLoopRollout {
    std::vector<Vector> states;  // N+1
    std::vector<Vector> inputs;  // N
};

/// x'_{k+1} = f(x'_k, kappa(x'_k), w'_k), x'_0 = x0.
inline ClosedLoopRollout rollout_closed_loop(const PlantModel& model, const Controller& ctrl, const Vector& x0,
                                             std::span<const Vector> noise) {
    detail::require_dim(x0, model.dims.state, "rollout_closed_loop x0");
    ClosedLoopRollout out;
    out.states.reserve(noise.size() + 1);
    out.inputs.reserve(noise.size());
    out.states.push_back(x0);
    for (const Vector& w : noise) {
        detail::require_dim(w, model.dims.disturbance, "rollout_closed_loop noise");
        Vector u = ctrl(out.states.back());
        detail::require_dim(u, model.dims.input, "controller output");
        out.states.push_back(model.step(out.states.back(), u, w));
        out.inputs.push_back(std::move(u));
    }
    return out;
}

/// x''_{k+1} = f(x''_k, inputs[k], w''_k), x''_0 = x0.
inline std::vector<Vector> rollout_open_loop(const PlantModel& model, std::span<const Vector> inputs, const Vector& x0,
                                             std::span<const Vector> noise) {
    detail::require_dim(x0, model.dims.state, "rollout_open_loop x0");
    if (inputs.size() != noise.size()) throw ConfigError("rollout_open_loop: input and noise sequences differ in length");
    std::vector<Vector> states;
    states.reserve(inputs.size() + 1);
    states.push_back(x0);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        detail::require_dim(inputs[k], model.dims.input, "rollout_open_loop input");
        detail::require_dim(noise[k], model.dims.disturbance, "rollout_open_loop noise");
        states.push_back(model.step(states.back(), inputs[k], noise[k]));
    }
    return states;
}

inline double trajectory_cost(const StageCost& cost, std::span<const Vector> states, std::span<const Vector> inputs) {
    if (states.size() != inputs.size() + 1) throw ConfigError("trajectory_cost: need |states| = |inputs| + 1");
    if (static_cast<int>(inputs.size()) != cost.horizon)
        throw ConfigError("trajectory_cost: sequence length does not match the cost horizon");
    double total = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) total += cost.running(static_cast<int>(k), states[k], inputs[k]);
    const Vector terminal_input = Vector::Zero(inputs.empty() ? 0 : inputs.front().size());
    total += cost.running(cost.horizon, states.back(), terminal_input);
    return total;
}

}  // namespace statesel
