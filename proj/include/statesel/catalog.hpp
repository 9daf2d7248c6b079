#pragma once

#include <string>

#include "statesel/lqsel.hpp"
#include "statesel/models.hpp"
#include "statesel/synth.hpp"

// Built-in plants referenced by name from experiment configs.

namespace statesel::catalog {

/// z+ = 0.9z + 0.2h + w1,  h+ = -0.15z + 0.9h + 0.05zh + u + w2,  y = z + v.
inline PlantModel example1_plant(double process_var = 0.3, double measurement_var = 0.3) {
    PlantModel m;
    m.name = "example1";
    m.dims = {2, 1, 2, 1};
    m.step = [](const Vector& x, const Vector& u, const Vector& w) {
        Vector next(2);
        next(0) = 0.9 * x(0) + 0.2 * x(1) + w(0);
        next(1) = -0.15 * x(0) + 0.9 * x(1) + 0.05 * x(0) * x(1) + u(0) + w(1);
        return next;
    };
    m.measure = [](const Vector& x, const Vector& v) { return Vector(Vector::Constant(1, x(0) + v(0))); };
    m.process_noise = NoiseModel::gaussian(process_var * Matrix::Identity(2, 2));
    m.measurement_noise = NoiseModel::gaussian(Matrix::Constant(1, 1, measurement_var));
    return m;
}

/// u = -0.05 z h cancels the bilinear term.
inline Controller kappa1() {
    return {ControllerKind::FeedbackLinearizing,
            [](const Vector& x) { return Vector(Vector::Constant(1, -0.05 * x(0) * x(1))); }};
}

/// [3,5]x[-4,2] union [-2,5]x[-7,-4]
inline BoxUnion example1_avoid() {
    return {{Box{Eigen::Vector2d(3.0, -4.0), Eigen::Vector2d(5.0, 2.0)},
             Box{Eigen::Vector2d(-2.0, -7.0), Eigen::Vector2d(5.0, -4.0)}}};
}

inline Box example1_input_box() { return {Vector::Constant(1, -3.0), Vector::Constant(1, 3.0)}; }

inline ConstraintSet example1_constraints(double epsilon = 0.3) {
    return ConstraintSet::avoid_region(example1_avoid(), example1_input_box(), epsilon);
}

/// x'x + u^2 at every stage, including the terminal one.
inline StageCost example1_cost(int horizon = 6) {
    return StageCost::quadratic(Matrix::Identity(2, 2), Matrix::Identity(1, 1), Matrix::Identity(2, 2), horizon);
}

inline Vector example1_prior_mean() { return Eigen::Vector2d(7.5, -7.5); }
inline Matrix example1_prior_cov() { return 0.5 * Matrix::Identity(2, 2); }

/// The value-iteration problem behind the feasible optimal controller.
inline SynthesisProblem example1_synthesis(double epsilon = 0.3, double discount = 0.9) {
    SynthesisProblem s;
    s.model = example1_plant();
    s.stage_cost = [](const Vector& x, double u) { return x.squaredNorm() + u * u; };
    s.in_avoid = [a = example1_avoid()](const Vector& x) { return a.contains(x); };
    s.epsilon = epsilon;
    s.input_lo = -3.0;
    s.input_hi = 3.0;
    s.discount = discount;
    return s;
}

inline PlantModel make_plant(const std::string& name) {
    if (name == "example1") return example1_plant();
    if (name == "dcdc") return plant_of(dcdc_problem(), "dcdc");
    throw ConfigError("unknown model '" + name + "' (known: example1, dcdc)");
}

}  // namespace statesel::catalog
