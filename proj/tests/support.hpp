#pragma once

#include <cmath>
#include <limits>

#include "statesel/qp.hpp"
#include "statesel/random.hpp"
#include "statesel/synth.hpp"

// Shared by the unit tests and the acceptance binary.

namespace testsupport {

using statesel::Matrix;
using statesel::Vector;

struct QpInstance {
    Matrix H;
    Vector g;
    Matrix A;
    Vector b;
};

/// Random strictly convex 2-D QP. The box |x_i| <= 3 is always present, so the
/// feasible set is bounded; the other rows keep the origin strictly feasible.
inline QpInstance random_qp(std::uint64_t seed) {
    statesel::Rng rng(seed, {501});
    Matrix B(2, 2);
    for (int i = 0; i < 4; ++i) B(i / 2, i % 2) = rng.uniform(-1.5, 1.5);
    QpInstance q;
    q.H = B * B.transpose() + 0.3 * Matrix::Identity(2, 2);
    q.g = Eigen::Vector2d(rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0));
    const int extra = 1 + static_cast<int>(rng.uniform(0.0, 4.0));
    q.A.resize(4 + extra, 2);
    q.b.resize(4 + extra);
    q.A.topRows(4) << 1, 0, -1, 0, 0, 1, 0, -1;
    q.b.head(4).setConstant(3.0);
    for (int r = 0; r < extra; ++r) {
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        q.A.row(4 + r) << std::cos(angle), std::sin(angle);
        q.b(4 + r) = rng.uniform(0.1, 2.0);
    }
    return q;
}

inline double objective(const QpInstance& q, const Vector& x) { return 0.5 * x.dot(q.H * x) + q.g.dot(x); }

inline bool feasible(const QpInstance& q, const Vector& x) { return ((q.A * x - q.b).array() <= 0.0).all(); }

/// Grid search on [-3,3]^2, then successively halved grids around the incumbent.
inline Vector grid_minimizer(const QpInstance& q) {
    Vector best = Vector::Zero(2);
    double best_value = objective(q, best);
    auto scan = [&](Eigen::Vector2d centre, double half, int points) {
        const double h = 2.0 * half / (points - 1);
        const Vector c = centre;
        for (int i = 0; i < points; ++i)
            for (int j = 0; j < points; ++j) {
                const Eigen::Vector2d x(c(0) - half + i * h, c(1) - half + j * h);
                if (!feasible(q, x)) continue;
                const double v = objective(q, x);
                if (v < best_value) {
                    best_value = v;
                    best = x;
                }
            }
    };
    scan(Eigen::Vector2d::Zero(), 3.0, 601);
    for (double half = 0.2; half > 1e-5; half *= 0.5) scan(best, half, 201);
    return best;
}

/// Finite MDP with S states, A actions and D equally likely outcomes per pair,
/// embedded in the synthesis machinery: state s is the scalar s, action a the
/// input a, outcome d the noise draw d.
struct FiniteMdp {
    int states = 0;
    int actions = 0;
    int outcomes = 0;
    std::vector<int> next;      // [(s * A + a) * D + d]
    std::vector<double> cost;   // [s * A + a]
    double discount = 0.9;

    int successor(int s, int a, int d) const { return next[static_cast<std::size_t>((s * actions + a) * outcomes + d)]; }
    double stage(int s, int a) const { return cost[static_cast<std::size_t>(s * actions + a)]; }
};

inline FiniteMdp random_mdp(std::uint64_t seed, int S, int A, int D, double discount) {
    statesel::Rng rng(seed, {502});
    FiniteMdp m{S, A, D, {}, {}, discount};
    for (int i = 0; i < S * A * D; ++i) m.next.push_back(std::min(S - 1, static_cast<int>(rng.uniform(0.0, S))));
    for (int i = 0; i < S * A; ++i) m.cost.push_back(rng.uniform(0.0, 5.0));
    return m;
}

struct EnumeratedOptimum {
    std::vector<double> values;
    std::vector<int> policy;
};

/// Exhaustive search over all A^S stationary deterministic policies.
inline EnumeratedOptimum enumerate_policies(const FiniteMdp& m) {
    EnumeratedOptimum best;
    std::vector<int> pol(static_cast<std::size_t>(m.states), 0);
    for (;;) {
        Matrix P = Matrix::Zero(m.states, m.states);
        Vector c(m.states);
        for (int s = 0; s < m.states; ++s) {
            const int a = pol[static_cast<std::size_t>(s)];
            c(s) = m.stage(s, a);
            for (int d = 0; d < m.outcomes; ++d) P(s, m.successor(s, a, d)) += 1.0 / m.outcomes;
        }
        const Vector V = (Matrix::Identity(m.states, m.states) - m.discount * P).partialPivLu().solve(c);
        double total = V.sum();
        double best_total = 0.0;
        for (double v : best.values) best_total += v;
        if (best.values.empty() || total < best_total - 1e-12) {
            best.values.assign(V.data(), V.data() + V.size());
            best.policy = pol;
        }
        std::size_t i = 0;
        while (i < pol.size() && ++pol[i] == m.actions) pol[i++] = 0;
        if (i == pol.size()) break;
    }
    return best;
}

inline statesel::SynthesisProblem as_synthesis(const FiniteMdp& m) {
    statesel::SynthesisProblem p;
    p.model.name = "mdp";
    p.model.dims = {1, 1, 1, 1};
    p.model.step = [m](const Vector& x, const Vector& u, const Vector& w) {
        return Vector(Vector::Constant(1, m.successor(static_cast<int>(std::lround(x(0))), static_cast<int>(std::lround(u(0))),
                                                        static_cast<int>(std::lround(w(0))))));
    };
    p.stage_cost = [m](const Vector& x, double u) {
        return m.stage(static_cast<int>(std::lround(x(0))), static_cast<int>(std::lround(u)));
    };
    p.in_avoid = [](const Vector&) { return false; };
    p.epsilon = 0.5;
    p.input_lo = 0;
    p.input_hi = m.actions - 1;
    p.discount = m.discount;
    return p;
}

inline statesel::ValueGrid mdp_grid(const FiniteMdp& m) {
    statesel::ValueGrid g;
    for (int s = 0; s < m.states; ++s) g.states.push_back(Vector::Constant(1, s));
    for (int a = 0; a < m.actions; ++a) g.inputs.push_back(a);
    for (int d = 0; d < m.outcomes; ++d) g.noise_draws.push_back(Vector::Constant(1, d));
    g.values.assign(static_cast<std::size_t>(m.states), 0.0);
    g.discount = m.discount;
    return g;
}

}  // namespace testsupport
