#include <gtest/gtest.h>

#include <cmath>

#include "statesel/catalog.hpp"
#include "statesel/selector.hpp"

using namespace statesel;

namespace {

PlantModel scalar_plant(double a, double q) {
    PlantModel m;
    m.name = "scalar";
    m.dims = {1, 1, 1, 1};
    m.step = [a](const Vector& x, const Vector& u, const Vector& w) { return Vector(a * x + u + w); };
    m.measure = [](const Vector& x, const Vector& v) { return Vector(x + v); };
    m.process_noise = NoiseModel::gaussian(Matrix::Constant(1, 1, q));
    m.measurement_noise = NoiseModel::gaussian(Matrix::Identity(1, 1));
    return m;
}

ConstraintSet half_space(double upper, double epsilon) {
    return ConstraintSet::polyhedral(Polyhedron{Matrix::Identity(1, 1), Vector::Constant(1, upper)}, std::nullopt,
                                     epsilon);
}

StageCost unit_cost(int horizon) {
    return StageCost::quadratic(Matrix::Identity(1, 1), Matrix::Identity(1, 1), Matrix::Identity(1, 1), horizon);
}

Vector v1(double a) { return Vector::Constant(1, a); }

/// Random stable 2-state, 1-input linear system with a random gain.
struct RandomLinear {
    PlantModel plant;
    Controller controller;
    StageCost cost;
    ConstraintSet constraints;
};

RandomLinear random_linear(std::uint64_t seed, double noise_var, int horizon) {
    Rng rng(seed, {77});
    Matrix F(2, 2), G(2, 1), K(1, 2);
    for (int i = 0; i < 4; ++i) F(i / 2, i % 2) = rng.uniform(-0.6, 0.6);
    for (int i = 0; i < 2; ++i) G(i, 0) = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < 2; ++i) K(0, i) = rng.uniform(-0.5, 0.5);
    RandomLinear r{linear_plant("rand", F, G, Matrix::Identity(2, 2), noise_var * Matrix::Identity(2, 2),
                                Matrix::Identity(2, 2)),
                   Controller::linear_gain(K),
                   StageCost::quadratic(Matrix::Identity(2, 2), Matrix::Constant(1, 1, 0.5), Matrix::Identity(2, 2),
                                        horizon),
                   ConstraintSet::polyhedral(Polyhedron{(Matrix(1, 2) << 1.0, 0.0).finished(), Vector::Constant(1, 1.5)},
                                             Polyhedron{Matrix::Identity(1, 1), Vector::Constant(1, 2.0)},
                                             0.3)};
    return r;
}

/// Appends the weighted mean as a zero-weight particle so it joins the candidate set without changing the draws.
ParticleSet with_mean(ParticleSet ps) {
    const Vector mean = mean_and_cov(ps).mean;
    ps.particles.push_back(mean);
    ps.weights.push_back(0.0);
    return ps;
}

ParticleSet random_cloud(std::uint64_t seed, std::size_t n, double spread) {
    Rng rng(seed, {78});
    std::vector<Vector> p;
    for (std::size_t i = 0; i < n; ++i) p.push_back(Eigen::Vector2d(spread * rng.normal(), spread * rng.normal()));
    return ParticleSet::uniform(p);
}

}  // namespace

TEST(SampleBound, Values) {
    EXPECT_EQ(sample_bound(0.3, 0.1, 0.01, 400), 133);
    EXPECT_EQ(sample_bound(0.2, 0.1, 0.05, 100), 381);
    EXPECT_EQ(sample_bound(0.5, 0.0, 1.0, 1), 1);
    EXPECT_GE(135, sample_bound(0.3, 0.1, 0.01, 400));
}

TEST(SampleBound, AlphaAtLeastEpsilonRejected) {
    EXPECT_THROW(sample_bound(0.3, 0.3, 0.01, 400), ConfigError);
    EXPECT_THROW(sample_bound(0.3, 0.4, 0.01, 400), ConfigError);
    EXPECT_THROW(sample_bound(0.3, 0.1, 0.0, 400), ConfigError);
}

TEST(SelectionConfig, Validation) {
    SelectionConfig c;
    EXPECT_NO_THROW(c.validate());
    c.alpha = 0.3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.delta = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.horizon = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EvaluateCandidate, PointMassZeroNoiseIsIndicator) {
    const auto m = scalar_plant(0.9, 0.0);
    const auto ctrl = Controller::linear_gain(Matrix::Zero(1, 1));
    const auto cost = unit_cost(3);
    SelectionConfig cfg;
    cfg.horizon = 3;
    cfg.samples = 20;
    // Trajectory from 2: 1.8, 1.62, 1.458. Bound 1.7 fails at k=1, bound 2 passes.
    for (double bound : {1.7, 2.0}) {
        const auto cons = half_space(bound, 0.3);
        const SelectionProblem p{m, ctrl, cost, cons};
        const auto r = evaluate_candidate(v1(2.0), ParticleSet::point_mass(v1(2.0)), p, cfg);
        for (double b : r.beta) EXPECT_EQ(b, 1.0);
        for (double l : r.lambda) EXPECT_TRUE(l == 0.0 || l == 1.0);
        EXPECT_EQ(r.feasible, bound == 2.0);
        EXPECT_EQ(r.lambda[0], bound == 2.0 ? 1.0 : 0.0);
        EXPECT_EQ(r.sampled_cost.has_value(), r.feasible);
    }
}

TEST(EvaluateCandidate, UnconstrainedAlwaysFeasible) {
    const auto m = catalog::example1_plant();
    const auto ctrl = catalog::kappa1();
    const auto cost = catalog::example1_cost(6);
    const auto cons = ConstraintSet::unconstrained(0.3);
    const SelectionProblem p{m, ctrl, cost, cons};
    SelectionConfig cfg;
    cfg.samples = 50;
    const auto cloud = sample_particles(NoiseModel::gaussian(Eigen::Vector2d(7.5, -7.5), 0.5 * Matrix::Identity(2, 2)), 30, 1);
    const auto r = evaluate_candidate(cloud.particles[3], cloud, p, cfg);
    EXPECT_TRUE(r.feasible);
    for (double b : r.beta) EXPECT_EQ(b, 1.0);
    for (double l : r.lambda) EXPECT_EQ(l, 1.0);
    EXPECT_EQ(r.beta.size(), 6u);
    EXPECT_EQ(r.lambda.size(), 6u);
}

TEST(EvaluateCandidate, LambdaConvergesToGaussianTail) {
    // x'' from 0 under zero input: x''_k ~ N(0, sum_{p<k} 0.25^p); P(x''_k <= 1).
    const auto m = scalar_plant(0.5, 1.0);
    const auto ctrl = Controller::linear_gain(Matrix::Zero(1, 1));
    const auto cost = unit_cost(3);
    const auto cons = half_space(1.0, 0.3);
    const SelectionProblem p{m, ctrl, cost, cons};
    const int M = 100000;
    const auto bank = SampleBank::draw(M, 3, m.process_noise, ParticleSet::point_mass(v1(0.0)), 42);
    const auto r = evaluate_candidate(v1(0.0), bank, p, 0.29);
    const double expected[] = {0.8413447460685429, 0.8144533152386513, 0.808633455557387};
    for (int k = 0; k < 3; ++k) {
        const double se = std::sqrt(expected[k] * (1 - expected[k]) / M);
        EXPECT_NEAR(r.lambda[static_cast<std::size_t>(k)], expected[k], 4.0 * se) << "k=" << k + 1;
    }
}

TEST(EvaluateCandidate, RatesAreMultiplesOfOneOverM) {
    const auto sys = random_linear(3, 0.4, 4);
    const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
    const auto cloud = random_cloud(3, 40, 1.0);
    SelectionConfig cfg;
    cfg.horizon = 4;
    cfg.samples = 37;
    for (const auto& x : cloud.particles) {
        const auto r = evaluate_candidate(x, cloud, p, cfg);
        for (const auto* rates : {&r.beta, &r.lambda})
            for (double v : *rates) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                EXPECT_NEAR(v * 37, std::round(v * 37), 1e-9);
            }
        // feasible <=> every rate >= 1 - alpha
        bool ok = true;
        for (double v : r.beta) ok = ok && v * 37 >= std::ceil((1 - cfg.alpha) * 37 - 1e-9);
        for (double v : r.lambda) ok = ok && v * 37 >= std::ceil((1 - cfg.alpha) * 37 - 1e-9);
        EXPECT_EQ(ok, r.feasible);
    }
}

TEST(EvaluateCandidate, BetaAtStageZeroIsIndicator) {
    const auto sys = random_linear(9, 0.4, 3);
    const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
    const auto cloud = random_cloud(9, 10, 8.0);
    SelectionConfig cfg;
    cfg.horizon = 3;
    cfg.samples = 25;
    for (const auto& x : cloud.particles) {
        const auto r = evaluate_candidate(x, cloud, p, cfg);
        EXPECT_EQ(r.beta[0], sys.constraints.input_ok(sys.controller(x)) ? 1.0 : 0.0);
    }
}

TEST(SelectState, DeterministicEquivalence) {
    const auto m = catalog::example1_plant();
    PlantModel quiet = m;
    quiet.process_noise = NoiseModel::gaussian(Matrix::Zero(2, 2));
    const auto ctrl = catalog::kappa1();
    const auto cost = catalog::example1_cost(6);
    const auto cons = catalog::example1_constraints();
    SelectionConfig cfg;
    for (const Vector& z : {Vector(Eigen::Vector2d(7.5, -7.5)), Vector(Eigen::Vector2d(6.0, 1.0)),
                           Vector(Eigen::Vector2d(-3.0, -3.0))}) {
        const auto traj = rollout_closed_loop(quiet, ctrl, z, std::vector<Vector>(6, Vector::Zero(2)));
        bool ok = true;
        for (std::size_t k = 0; k < 6; ++k) ok = ok && cons.input_ok(traj.inputs[k]) && cons.state_ok(traj.states[k + 1]);
        const SelectionProblem p{quiet, ctrl, cost, cons};
        const auto result = select_state(ParticleSet::point_mass(z), p, cfg);
        EXPECT_EQ(result.chosen.has_value(), ok);
        // Unconstrained, so the sampled cost always exists.
        const auto free = ConstraintSet::unconstrained(0.3);
        const SelectionProblem q{quiet, ctrl, cost, free};
        const auto r = select_state(ParticleSet::point_mass(z), q, cfg);
        ASSERT_TRUE(r.chosen);
        EXPECT_EQ(*r.chosen, z);
        EXPECT_EQ(*r.reports[0].sampled_cost, trajectory_cost(cost, traj.states, traj.inputs));
    }
}

TEST(SelectState, EmptyStateSetGivesNoChoice) {
    const auto m = scalar_plant(0.5, 0.1);
    const auto ctrl = Controller::linear_gain(Matrix::Zero(1, 1));
    const auto cost = unit_cost(2);
    ConstraintSet cons = ConstraintSet::unconstrained(0.3);
    cons.state_member = [](const Vector&) { return false; };
    const SelectionProblem p{m, ctrl, cost, cons};
    SelectionConfig cfg;
    cfg.horizon = 2;
    const auto r = select_state(ParticleSet::uniform({v1(0.0), v1(1.0)}), p, cfg);
    EXPECT_FALSE(r.chosen);
    EXPECT_FALSE(r.chosen_index);
    EXPECT_EQ(r.feasible_count(), 0u);
}

TEST(SelectState, Example1FirstStepHasFeasibleCandidate) {
    const auto m = catalog::example1_plant();
    const auto ctrl = catalog::kappa1();
    const auto cost = catalog::example1_cost(6);
    const auto cons = catalog::example1_constraints();
    const SelectionProblem p{m, ctrl, cost, cons};
    const auto cloud = sample_particles(NoiseModel::gaussian(catalog::example1_prior_mean(), catalog::example1_prior_cov()), 400, 7);
    SelectionConfig cfg;
    cfg.samples = 135;
    cfg.seed = 7;
    const auto r = select_state(cloud, p, cfg);
    ASSERT_TRUE(r.chosen);
    EXPECT_EQ(r.resolved_samples, 135);
    EXPECT_TRUE(r.warnings.empty());
    // The argmin property over the feasible reports.
    for (const auto& rep : r.reports)
        if (rep.feasible) { EXPECT_LE(*r.reports[*r.chosen_index].sampled_cost, *rep.sampled_cost); }
}

TEST(SelectState, TiesGoToLowestIndex) {
    const auto m = scalar_plant(0.5, 0.2);
    const auto ctrl = Controller::linear_gain(Matrix::Constant(1, 1, -0.2));
    const auto cost = unit_cost(3);
    const auto cons = ConstraintSet::unconstrained(0.3);
    const SelectionProblem p{m, ctrl, cost, cons};
    SelectionConfig cfg;
    cfg.horizon = 3;
    const auto r = select_state(ParticleSet::uniform({v1(3.0), v1(0.1), v1(0.1), v1(-2.0)}), p, cfg);
    ASSERT_TRUE(r.chosen_index);
    EXPECT_EQ(*r.chosen_index, 1u);
}

TEST(SelectState, ThreadCountDoesNotChangeResult) {
    const auto sys = random_linear(5, 0.3, 5);
    const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
    const auto cloud = random_cloud(5, 64, 1.0);
    SelectionConfig cfg;
    cfg.horizon = 5;
    cfg.seed = 99;
    cfg.threads = 1;
    const auto a = select_state(cloud, p, cfg);
    cfg.threads = 4;
    const auto b = select_state(cloud, p, cfg);
    EXPECT_EQ(a.chosen_index, b.chosen_index);
    for (std::size_t i = 0; i < a.reports.size(); ++i) {
        EXPECT_EQ(a.reports[i].beta, b.reports[i].beta);
        EXPECT_EQ(a.reports[i].lambda, b.reports[i].lambda);
        EXPECT_EQ(a.reports[i].sampled_cost, b.reports[i].sampled_cost);
    }
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(SelectState, MonotoneInAlpha) {
    const auto sys = random_linear(11, 0.5, 4);
    const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
    const auto cloud = random_cloud(11, 60, 1.2);
    SelectionConfig loose;
    loose.horizon = 4;
    loose.alpha = 0.25;
    loose.samples = 80;
    SelectionConfig tight = loose;
    tight.alpha = 0.05;
    const auto a = select_state(cloud, p, loose);
    const auto b = select_state(cloud, p, tight);
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (b.reports[i].feasible) { EXPECT_TRUE(a.reports[i].feasible); }
    EXPECT_GE(a.feasible_count(), b.feasible_count());
}

TEST(SelectState, WarnsBelowBound) {
    const auto m = scalar_plant(0.5, 0.1);
    const auto ctrl = Controller::linear_gain(Matrix::Zero(1, 1));
    const auto cost = unit_cost(2);
    const auto cons = ConstraintSet::unconstrained(0.3);
    const SelectionProblem p{m, ctrl, cost, cons};
    SelectionConfig cfg;
    cfg.horizon = 2;
    cfg.samples = 10;
    const auto r = select_state(ParticleSet::uniform({v1(0.0), v1(1.0)}), p, cfg);
    EXPECT_EQ(r.resolved_samples, 10);
    ASSERT_EQ(r.warnings.size(), 1u);
    cfg.samples = 0;
    EXPECT_EQ(select_state(ParticleSet::uniform({v1(0.0), v1(1.0)}), p, cfg).resolved_samples,
              sample_bound(0.3, 0.1, 0.01, 2));
}

TEST(Dominance, ChosenAndMean) {
    const auto m = catalog::example1_plant();
    const auto ctrl = catalog::kappa1();
    const auto cost = catalog::example1_cost(6);
    const auto cons = catalog::example1_constraints();
    const SelectionProblem p{m, ctrl, cost, cons};
    const auto cloud =
        with_mean(sample_particles(NoiseModel::gaussian(catalog::example1_prior_mean(), catalog::example1_prior_cov()), 400, 7));
    SelectionConfig cfg;
    cfg.samples = 135;
    cfg.seed = 7;
    const auto r = select_state(cloud, p, cfg);
    ASSERT_TRUE(r.chosen);
    EXPECT_TRUE(candidate_dominance_check(r, *r.chosen, cloud, p, cfg));
    EXPECT_TRUE(candidate_dominance_check(r, cloud.particles.back(), cloud, p, cfg));
}

TEST(Dominance, RandomLinearHundredSeeds) {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto sys = random_linear(seed, 0.2, 4);
        const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
        const auto cloud = with_mean(random_cloud(seed, 25, 0.8));
        SelectionConfig cfg;
        cfg.horizon = 4;
        cfg.samples = 60;
        cfg.seed = seed;
        const auto r = select_state(cloud, p, cfg);
        EXPECT_TRUE(candidate_dominance_check(r, cloud.particles.back(), cloud, p, cfg)) << "seed " << seed;
        for (std::size_t i = 0; i + 1 < cloud.size(); i += 5)
            EXPECT_TRUE(candidate_dominance_check(r, cloud.particles[i], cloud, p, cfg)) << "seed " << seed;
        checked += r.chosen ? 1 : 0;
    }
    EXPECT_GT(checked, 50);
}

TEST(PairedDifference, SameCandidateIsZero) {
    const auto sys = random_linear(1, 0.3, 3);
    const SelectionProblem p{sys.plant, sys.controller, sys.cost, sys.constraints};
    const auto bank = SampleBank::draw(100, 3, sys.plant.process_noise, random_cloud(1, 5, 1.0), 4);
    const auto d = paired_cost_difference(Eigen::Vector2d(0.3, 0.1), Eigen::Vector2d(0.3, 0.1), bank, p);
    EXPECT_EQ(d.mean, 0.0);
    EXPECT_EQ(d.standard_error, 0.0);
}

TEST(SampleBank, WeightedInitialDraws) {
    ParticleSet ps = ParticleSet::uniform({v1(0.0), v1(1.0), v1(2.0)});
    ps.weights = {0.0, 0.25, 0.75};
    const auto bank = SampleBank::draw(4000, 1, NoiseModel::gaussian(Matrix::Identity(1, 1)), ps, 6);
    int ones = 0;
    for (const auto& x : bank.initial) {
        EXPECT_NE(x(0), 0.0);
        ones += x(0) == 1.0 ? 1 : 0;
    }
    EXPECT_NEAR(ones / 4000.0, 0.25, 3.0 * std::sqrt(0.25 * 0.75 / 4000.0));
}

TEST(Json, ReportShape) {
    const auto m = scalar_plant(0.5, 0.1);
    const auto ctrl = Controller::linear_gain(Matrix::Zero(1, 1));
    const auto cost = unit_cost(2);
    const auto cons = ConstraintSet::unconstrained(0.3);
    const SelectionProblem p{m, ctrl, cost, cons};
    SelectionConfig cfg;
    cfg.horizon = 2;
    const auto j = to_json(select_state(ParticleSet::uniform({v1(0.0), v1(1.0)}), p, cfg));
    EXPECT_EQ(j["candidates"].size(), 2u);
    EXPECT_EQ(j["candidates"][0]["beta"].size(), 2u);
    EXPECT_EQ(j["chosen_index"], 0);
}
