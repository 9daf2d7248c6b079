#include <gtest/gtest.h>

#include "statesel/qp.hpp"
#include "support.hpp"

using namespace statesel;

namespace {

Matrix m1(double a) { return Matrix::Constant(1, 1, a); }
Vector v1(double a) { return Vector::Constant(1, a); }

void expect_kkt(const Matrix& H, const Vector& g, const Matrix& A, const Vector& b, const QpSolution& s) {
    const auto r = kkt_residuals(H, g, A, b, s.x, s.multipliers);
    EXPECT_LE(r.worst(), 1e-6) << "stat " << r.stationarity << " primal " << r.primal << " comp "
                               << r.complementarity << " dual " << r.dual;
}

}  // namespace

TEST(SolveQp, Unconstrained) {
    const Matrix H = Eigen::Vector2d(2.0, 4.0).asDiagonal();
    const auto s = solve_qp(H, Eigen::Vector2d(-2.0, -4.0), Matrix(0, 2), Vector(0));
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), 1.0, 1e-12);
    EXPECT_NEAR(s.x(1), 1.0, 1e-12);
    EXPECT_NEAR(s.objective, -3.0, 1e-12);
}

TEST(SolveQp, OneDimensionalLowerBound) {
    // min x^2 s.t. x >= 1
    const auto s = solve_qp(m1(2.0), v1(0.0), m1(-1.0), v1(-1.0));
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), 1.0, 1e-12);
    EXPECT_NEAR(s.multipliers(0), 2.0, 1e-10);
    expect_kkt(m1(2.0), v1(0.0), m1(-1.0), v1(-1.0), s);
}

TEST(SolveQp, InactiveConstraintHasZeroMultiplier) {
    const auto s = solve_qp(m1(2.0), v1(-2.0), m1(1.0), v1(5.0));
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), 1.0, 1e-12);
    EXPECT_NEAR(s.multipliers(0), 0.0, 1e-12);
}

TEST(SolveQp, Infeasible) {
    Matrix A(2, 1);
    A << 1.0, -1.0;
    EXPECT_EQ(solve_qp(m1(1.0), v1(0.0), A, Eigen::Vector2d(-1.0, -1.0)).status, QpStatus::Infeasible);
    // 0'x <= -1
    EXPECT_EQ(solve_qp(m1(1.0), v1(0.0), m1(0.0), v1(-1.0)).status, QpStatus::Infeasible);
}

TEST(SolveQp, UnboundedThrows) {
    EXPECT_THROW(solve_qp(m1(0.0), v1(1.0), Matrix(0, 1), Vector(0)), UnboundedProblem);
    // bounded from above only, objective decreases to -inf
    EXPECT_THROW(solve_qp(m1(0.0), v1(1.0), m1(1.0), v1(3.0)), UnboundedProblem);
}

TEST(SolveQp, LinearProgramOnBound) {
    const auto s = solve_qp(m1(0.0), v1(1.0), m1(-1.0), v1(2.0));
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), -2.0, 1e-12);
    expect_kkt(m1(0.0), v1(1.0), m1(-1.0), v1(2.0), s);
}

TEST(SolveQp, SingularHessian) {
    // min 1/2 x1^2 + x2  s.t. x2 >= 0.5
    const Matrix H = Eigen::Vector2d(1.0, 0.0).asDiagonal();
    const Matrix A = (Matrix(1, 2) << 0.0, -1.0).finished();
    const auto s = solve_qp(H, Eigen::Vector2d(0.0, 1.0), A, v1(-0.5));
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), 0.0, 1e-12);
    EXPECT_NEAR(s.x(1), 0.5, 1e-12);
}

TEST(SolveQp, DuplicateAndScaledRows) {
    Matrix A(3, 2);
    A << 1, 1, 2, 2, 1, 1;
    const Vector b = Eigen::Vector3d(-1.0, -2.0, -1.0);
    const Matrix H = Matrix::Identity(2, 2);
    const auto s = solve_qp(H, Vector::Zero(2), A, b);
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.x(0), -0.5, 1e-10);
    EXPECT_NEAR(s.x(1), -0.5, 1e-10);
    expect_kkt(H, Vector::Zero(2), A, b, s);
}

TEST(SolveQp, DimensionMismatchRejected) {
    EXPECT_THROW(solve_qp(Matrix::Identity(2, 2), v1(0.0), Matrix(0, 2), Vector(0)), ConfigError);
}

TEST(SolveQp, MatchesGridSearch) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto q = testsupport::random_qp(seed);
        const auto s = solve_qp(q.H, q.g, q.A, q.b);
        ASSERT_TRUE(s.optimal()) << seed;
        const Vector grid = testsupport::grid_minimizer(q);
        EXPECT_LE((s.x - grid).cwiseAbs().maxCoeff(), 2e-3) << "seed " << seed;
        EXPECT_LE(testsupport::objective(q, s.x), testsupport::objective(q, grid) + 1e-9) << "seed " << seed;
        expect_kkt(q.H, q.g, q.A, q.b, s);
    }
}

TEST(SolveQp, ObjectiveMatchesPoint) {
    const auto q = testsupport::random_qp(123);
    const auto s = solve_qp(q.H, q.g, q.A, q.b);
    ASSERT_TRUE(s.optimal());
    EXPECT_NEAR(s.objective, testsupport::objective(q, s.x), 1e-12);
}
