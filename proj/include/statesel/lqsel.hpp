#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "statesel/json_io.hpp"
#include "statesel/models.hpp"
#include "statesel/qp.hpp"
#include "statesel/selector.hpp"

// Linear dynamics, linear feedback u = Kx, quadratic cost and polyhedral
// chance constraints. Here the expected sampled cost is an explicit quadratic
// in the candidate state and the chance constraints tighten to linear
// inequalities, so state selection becomes a small QP.

namespace statesel {

struct LinearProblem {
    Matrix F, G, H;
    Matrix K;  // nominal feedback gain, u = K x
    Matrix Q, R, QN;
    Matrix process_cov;      // Sigma_w
    Matrix measurement_cov;  // Sigma_v
    Vector prior_mean;       // conditional mean of x_0
    Matrix prior_cov;        // Sigma_0
    std::optional<Polyhedron> state_constraints;  // T x <= xbar
    std::optional<Polyhedron> input_constraints;  // S u <= ubar
    double epsilon = 0.1;
    int horizon = 1;

    Eigen::Index state_dim() const { return F.rows(); }
    Eigen::Index input_dim() const { return G.cols(); }
    Matrix closed_loop() const { return F + G * K; }

    void validate() const {
        const auto n = F.rows();
        const auto nu = G.cols();
        auto square = [](const Matrix& m, Eigen::Index d) { return m.rows() == d && m.cols() == d; };
        if (!square(F, n) || G.rows() != n || K.rows() != nu || K.cols() != n || H.cols() != n)
            throw ConfigError("linear problem: F, G, H, K shapes are inconsistent");
        if (!square(Q, n) || !square(QN, n) || !square(R, nu) || !square(process_cov, n) || !square(prior_cov, n) ||
            !square(measurement_cov, H.rows()) || prior_mean.size() != n)
            throw ConfigError("linear problem: weight or covariance shapes are inconsistent");
        if (horizon < 1) throw ConfigError("linear problem: horizon must be at least 1");
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("linear problem: epsilon must lie in (0,1)");
        auto psd = [](const Matrix& m, double floor) {
            if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + m.cwiseAbs().maxCoeff())) return false;
            Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(m));
            return eig.eigenvalues().minCoeff() >= floor;
        };
        const double tol = -1e-12;
        if (!psd(Q, tol) || !psd(QN, tol) || !psd(process_cov, tol) || !psd(measurement_cov, tol) || !psd(prior_cov, tol))
            throw ConfigError("linear problem: Q, Q_N and covariances must be symmetric PSD");
        if (!psd(R, 1e-300) || R.size() == 0) throw ConfigError("linear problem: R must be symmetric positive definite");
        if (state_constraints) {
            if (state_constraints->A.cols() != n) throw ConfigError("linear problem: T has the wrong column count");
            detail::require_full_row_rank(state_constraints->A, "T");
        }
        if (input_constraints) {
            if (input_constraints->A.cols() != nu) throw ConfigError("linear problem: S has the wrong column count");
            detail::require_full_row_rank(input_constraints->A, "S");
        }
    }
};

/// The standard DC-DC converter regulation benchmark, constrained by P(x1 <= 2) >= 0.9.
inline LinearProblem dcdc_problem() {
    LinearProblem p;
    p.F = (Matrix(2, 2) << 1.0, 0.0075, -0.143, 0.996).finished();
    p.G = (Matrix(2, 1) << 4.798, 0.115).finished();
    p.H = Matrix::Identity(2, 2);
    p.K = (Matrix(1, 2) << -0.2409, 0.3930).finished();
    p.Q = Matrix(Eigen::Vector2d(1.0, 10.0).asDiagonal());
    p.R = Matrix::Constant(1, 1, 10.0);
    p.QN = p.Q;
    p.process_cov = 0.1 * Matrix::Identity(2, 2);
    p.measurement_cov = Matrix(Eigen::Vector2d(0.5, 0.4).asDiagonal());
    p.prior_mean = (Vector(2) << 0.6455, 1.3751).finished();
    p.prior_cov = 0.1 * Matrix::Identity(2, 2);
    p.state_constraints = Polyhedron{(Matrix(1, 2) << 1.0, 0.0).finished(), Vector::Constant(1, 2.0)};
    p.epsilon = 0.1;
    p.horizon = 8;
    return p;
}

inline PlantModel plant_of(const LinearProblem& p, std::string name = "linear") {
    return linear_plant(std::move(name), p.F, p.G, p.H, p.process_cov, p.measurement_cov);
}

// ---------------------------------------------------------------------------
// Means and covariances
// ---------------------------------------------------------------------------

/// psi[k] = sum_{h=0}^{k-1} F^h G K F_K^{k-h-1}, the coefficient of the
/// candidate in the mean of the open-loop-controlled state at step k
/// (psi[0] = 0). Returned for k = 0..N.
inline std::vector<Matrix> psi_sequence(const LinearProblem& p) {
    const auto n = p.state_dim();
    const Matrix FK = p.closed_loop();
    const Matrix GK = p.G * p.K;
    // psi[k+1] = F psi[k] + G K F_K^k
    std::vector<Matrix> psi{Matrix::Zero(n, n)};
    Matrix FK_pow = Matrix::Identity(n, n);
    for (int k = 0; k < p.horizon; ++k) {
        psi.push_back(p.F * psi.back() + GK * FK_pow);
        FK_pow = FK * FK_pow;
    }
    return psi;
}

inline Vector mean_closed_loop(const LinearProblem& p, const Vector& candidate, int k) {
    Vector x = candidate;
    const Matrix FK = p.closed_loop();
    for (int i = 0; i < k; ++i) x = FK * x;
    return x;
}

/// F^k xhat + psi[k] candidate
inline Vector mean_open_loop(const LinearProblem& p, const Vector& candidate, const Vector& prior_mean, int k) {
    Vector x = prior_mean;
    for (int i = 0; i < k; ++i) x = p.F * x;
    return x + psi_sequence(p)[static_cast<std::size_t>(k)] * candidate;
}

struct CovarianceSequence {
    std::vector<Matrix> closed_loop;  // Sigma'_k, k = 0..N
    std::vector<Matrix> open_loop;    // Sigma''_k, k = 0..N
};

inline CovarianceSequence propagate_covariances(const LinearProblem& p) {
    const auto n = p.state_dim();
    const Matrix FK = p.closed_loop();
    const Matrix GK = p.G * p.K;
    CovarianceSequence s;
    s.closed_loop.push_back(Matrix::Zero(n, n));
    s.open_loop.push_back(detail::symmetrize(p.prior_cov));
    for (int k = 0; k < p.horizon; ++k) {
        const Matrix& c = s.closed_loop.back();
        const Matrix& o = s.open_loop.back();
        s.open_loop.push_back(detail::symmetrize(p.F * o * p.F.transpose() + GK * c * GK.transpose() + p.process_cov));
        s.closed_loop.push_back(detail::symmetrize(FK * c * FK.transpose() + p.process_cov));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Cost
// ---------------------------------------------------------------------------

/// J_c(x) = x' A1 x + xhat' A2 x, up to a constant independent of x.
struct CostQuadratic {
    Matrix A1;
    Matrix A2;

    double evaluate(const Vector& candidate, const Vector& prior_mean) const {
        return candidate.dot(A1 * candidate) + prior_mean.dot(A2 * candidate);
    }
};

inline CostQuadratic cost_matrices(const LinearProblem& p) {
    const auto n = p.state_dim();
    const auto psi = psi_sequence(p);
    const Matrix FK = p.closed_loop();
    const Matrix KRK = p.K.transpose() * p.R * p.K;
    CostQuadratic q{Matrix::Zero(n, n), Matrix::Zero(n, n)};
    Matrix F_pow = Matrix::Identity(n, n);
    Matrix FK_pow = Matrix::Identity(n, n);
    for (int k = 0; k < p.horizon; ++k) {
        const Matrix& P = psi[static_cast<std::size_t>(k)];
        q.A1 += P.transpose() * p.Q * P + FK_pow.transpose() * KRK * FK_pow;
        q.A2 += 2.0 * F_pow.transpose() * p.Q * P;
        F_pow = p.F * F_pow;
        FK_pow = FK * FK_pow;
    }
    const Matrix& PN = psi.back();
    q.A1 += PN.transpose() * p.QN * PN;
    q.A2 += 2.0 * F_pow.transpose() * p.QN * PN;
    q.A1 = detail::symmetrize(q.A1);
    return q;
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

enum class RowFamily { State, Input, InitialInput };

/// Rows a'x <= b on the candidate state.
struct TightenedPolyhedron {
    Matrix A;
    Vector b;
    std::vector<RowFamily> family;
    std::vector<int> stage;

    Eigen::Index rows() const { return A.rows(); }
};

/// sqrt((rows - eps) / eps): the Cantelli multiplier that makes each of
/// `rows` scalar constraints hold with probability >= 1 - eps / rows.
inline double cantelli_factor(Eigen::Index rows, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("cantelli_factor: epsilon must lie in (0,1)");
    return std::sqrt((static_cast<double>(rows) - epsilon) / epsilon);
}

enum class CovarianceMode { OneStep, Full };

namespace detail {

inline void append_rows(TightenedPolyhedron& poly, const Matrix& A, const Vector& b, RowFamily family, int stage) {
    const auto r0 = poly.A.rows();
    Matrix A_new(r0 + A.rows(), A.cols());
    Vector b_new(r0 + b.size());
    if (r0 > 0) {
        A_new.topRows(r0) = poly.A;
        b_new.head(r0) = poly.b;
    }
    A_new.bottomRows(A.rows()) = A;
    b_new.tail(b.size()) = b;
    poly.A = std::move(A_new);
    poly.b = std::move(b_new);
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        poly.family.push_back(family);
        poly.stage.push_back(stage);
    }
}

inline TightenedPolyhedron tighten(const LinearProblem& p, const std::vector<Matrix>& open_cov,
                                   const std::vector<Matrix>& closed_cov) {
    p.validate();
    const auto n = p.state_dim();
    TightenedPolyhedron poly;
    poly.A.resize(0, n);
    poly.b.resize(0);
    const auto psi = psi_sequence(p);
    const Matrix FK = p.closed_loop();

    if (p.state_constraints && p.state_constraints->rows() > 0) {
        const Matrix& T = p.state_constraints->A;
        const Vector& xbar = p.state_constraints->b;
        const double c = cantelli_factor(T.rows(), p.epsilon);
        Vector F_pow_mean = p.prior_mean;
        for (int k = 1; k <= p.horizon; ++k) {
            F_pow_mean = p.F * F_pow_mean;
            const Matrix& S = open_cov[static_cast<std::size_t>(k)];
            const Vector margin = (T * S * T.transpose()).diagonal().cwiseMax(0.0).cwiseSqrt();
            append_rows(poly, T * psi[static_cast<std::size_t>(k)], xbar - c * margin - T * F_pow_mean,
                        RowFamily::State, k);
        }
    }
    if (p.input_constraints && p.input_constraints->rows() > 0) {
        const Matrix& S = p.input_constraints->A;
        const Vector& ubar = p.input_constraints->b;
        const double c = cantelli_factor(S.rows(), p.epsilon);
        const Matrix SK = S * p.K;
        Matrix FK_pow = FK;
        for (int k = 1; k <= p.horizon - 1; ++k) {
            const Matrix& C = closed_cov[static_cast<std::size_t>(k)];
            const Vector margin = (SK * C * SK.transpose()).diagonal().cwiseMax(0.0).cwiseSqrt();
            append_rows(poly, SK * FK_pow, ubar - c * margin, RowFamily::Input, k);
            FK_pow = FK * FK_pow;
        }
        append_rows(poly, SK, ubar, RowFamily::InitialInput, 0);
    }
    if (poly.b.size() > 0 && !poly.b.allFinite()) throw ConfigError("tighten_constraints: non-finite tightened offset");
    return poly;
}

}  // namespace detail

/// Tightened rows with the one-step-ahead ("closed-loop") covariances
/// Sigma''_1 = F Sigma_0 F' + Sigma_w and Sigma'_1 = Sigma_w used at every stage.
inline TightenedPolyhedron tighten_constraints(const LinearProblem& p, const Matrix& open_cov_1,
                                               const Matrix& closed_cov_1) {
    const std::vector<Matrix> open(static_cast<std::size_t>(p.horizon) + 1, open_cov_1);
    const std::vector<Matrix> closed(static_cast<std::size_t>(p.horizon) + 1, closed_cov_1);
    return detail::tighten(p, open, closed);
}

inline TightenedPolyhedron tighten_constraints(const LinearProblem& p, CovarianceMode mode = CovarianceMode::OneStep) {
    const auto cov = propagate_covariances(p);
    if (mode == CovarianceMode::Full) return detail::tighten(p, cov.open_loop, cov.closed_loop);
    return tighten_constraints(p, cov.open_loop[1], cov.closed_loop[1]);
}

// ---------------------------------------------------------------------------
// Selection QP
// ---------------------------------------------------------------------------

/// argmin x'A1x + xhat'A2x over the tightened polyhedron.
inline QpSolution solve_qp(const CostQuadratic& q, const TightenedPolyhedron& poly, const Vector& prior_mean) {
    return solve_qp(Matrix(2.0 * q.A1), Vector(q.A2.transpose() * prior_mean), poly.A, poly.b);
}

/// -1/2 A1^{-1} A2' xhat, the minimizer when no row is active (A1 > 0).
inline Vector unconstrained_minimizer(const CostQuadratic& q, const Vector& prior_mean) {
    Eigen::LDLT<Matrix> ldlt(q.A1);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw NumericalError("A1 is not positive definite");
    return -0.5 * ldlt.solve(q.A2.transpose() * prior_mean);
}

struct SelectionQp {
    CostQuadratic cost;
    TightenedPolyhedron constraints;
    QpSolution solution;
};

/// Builds and solves the selection QP for the problem's current prior moments.
inline SelectionQp select_state_qp(const LinearProblem& p, CovarianceMode mode = CovarianceMode::OneStep) {
    SelectionQp s{cost_matrices(p), tighten_constraints(p, mode), {}};
    s.solution = solve_qp(s.cost, s.constraints, p.prior_mean);
    return s;
}

// ---------------------------------------------------------------------------
// Kalman filter
// ---------------------------------------------------------------------------

struct GaussianEstimate {
    Vector mean;
    Matrix covariance;
};

/// Time update with (F, G, Sigma_w), then measurement update with (H, Sigma_v)
/// in Joseph form.
inline GaussianEstimate kalman_step(const LinearProblem& p, const Vector& mean, const Matrix& cov, const Vector& u,
                                    const Vector& y) {
    const Vector x_pred = p.F * mean + p.G * u;
    const Matrix P_pred = detail::symmetrize(p.F * cov * p.F.transpose() + p.process_cov);
    const Matrix S = detail::symmetrize(p.H * P_pred * p.H.transpose() + p.measurement_cov);
    Eigen::LDLT<Matrix> ldlt(S);
    const double scale = std::max(1e-300, S.cwiseAbs().maxCoeff());
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-14 * scale)
        throw NumericalError("kalman_step: innovation covariance is singular");
    const Matrix gain = ldlt.solve(p.H * P_pred).transpose();
    const auto n = p.state_dim();
    const Matrix I_KH = Matrix::Identity(n, n) - gain * p.H;
    GaussianEstimate out;
    out.mean = x_pred + gain * (y - p.H * x_pred);
    out.covariance =
        detail::symmetrize(I_KH * P_pred * I_KH.transpose() + gain * p.measurement_cov * gain.transpose());
    return out;
}

// ---------------------------------------------------------------------------
// Closed form vs Monte Carlo
// ---------------------------------------------------------------------------

struct OracleComparison {
    double closed_form = 0.0;     // J_c(a) - J_c(b) from A1, A2
    double sampled = 0.0;         // Monte Carlo estimate with shared noise
    double standard_error = 0.0;  // of `sampled`
    double interval = 0.0;        // 3 standard errors

    bool agrees() const { return std::abs(sampled - closed_form) <= interval; }
};

/// Compares the closed-form cost difference against the sampled one computed
/// by the generic selector machinery (Gaussian x''_0 ~ N(xhat, Sigma_0)).
inline OracleComparison quadratic_vs_sampling_oracle(const LinearProblem& p, const Vector& a, const Vector& b,
                                                     int samples, std::uint64_t seed) {
    p.validate();
    const auto q = cost_matrices(p);
    const PlantModel model = plant_of(p);
    const Controller ctrl = Controller::linear_gain(p.K);
    const StageCost cost = StageCost::quadratic(p.Q, p.R, p.QN, p.horizon);
    const ConstraintSet constraints = ConstraintSet::unconstrained();
    const NoiseModel prior = NoiseModel::gaussian(p.prior_mean, p.prior_cov);
    const SampleBank bank = SampleBank::draw(
        samples, p.horizon, model.process_noise, [&](Rng& rng) { return prior.sample(rng); }, seed);
    const SelectionProblem problem{model, ctrl, cost, constraints};
    const auto diff = paired_cost_difference(a, b, bank, problem);
    OracleComparison out;
    out.closed_form = q.evaluate(a, p.prior_mean) - q.evaluate(b, p.prior_mean);
    out.sampled = diff.mean;
    out.standard_error = diff.standard_error;
    out.interval = 3.0 * diff.standard_error;
    return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const LinearProblem& p) {
    using json_io::to_json;
    nlohmann::json j{{"F", to_json(p.F)},
                     {"G", to_json(p.G)},
                     {"H", to_json(p.H)},
                     {"K", to_json(p.K)},
                     {"Q", to_json(p.Q)},
                     {"R", to_json(p.R)},
                     {"QN", to_json(p.QN)},
                     {"process_cov", to_json(p.process_cov)},
                     {"measurement_cov", to_json(p.measurement_cov)},
                     {"prior_mean", to_json(p.prior_mean)},
                     {"prior_cov", to_json(p.prior_cov)},
                     {"epsilon", p.epsilon},
                     {"horizon", p.horizon}};
    if (p.state_constraints) j["state_constraints"] = {{"T", to_json(p.state_constraints->A)}, {"xbar", to_json(p.state_constraints->b)}};
    if (p.input_constraints) j["input_constraints"] = {{"S", to_json(p.input_constraints->A)}, {"ubar", to_json(p.input_constraints->b)}};
    return j;
}

/// Keys absent from `j` keep the value from `base`.
inline LinearProblem linear_problem_from_json(const nlohmann::json& j, LinearProblem base = dcdc_problem()) {
    using json_io::matrix_from;
    using json_io::vector_from;
    json_io::reject_unknown_keys(j,
                                 {"F", "G", "H", "K", "Q", "R", "QN", "process_cov", "measurement_cov", "prior_mean",
                                  "prior_cov", "epsilon", "horizon", "state_constraints", "input_constraints"},
                                 "linear problem");
    auto mat = [&](const char* key, Matrix& dst) {
        if (j.contains(key)) dst = matrix_from(j.at(key), key);
    };
    mat("F", base.F);
    mat("G", base.G);
    mat("H", base.H);
    mat("K", base.K);
    mat("Q", base.Q);
    mat("R", base.R);
    mat("QN", base.QN);
    mat("process_cov", base.process_cov);
    mat("measurement_cov", base.measurement_cov);
    mat("prior_cov", base.prior_cov);
    if (j.contains("prior_mean")) base.prior_mean = vector_from(j.at("prior_mean"), "prior_mean");
    if (j.contains("epsilon")) base.epsilon = j.at("epsilon").get<double>();
    if (j.contains("horizon")) base.horizon = j.at("horizon").get<int>();
    if (j.contains("state_constraints")) {
        const auto& s = j.at("state_constraints");
        if (s.is_null()) {
            base.state_constraints.reset();
        } else {
            json_io::reject_unknown_keys(s, {"T", "xbar"}, "state_constraints");
            base.state_constraints = Polyhedron{matrix_from(s.at("T"), "T"), vector_from(s.at("xbar"), "xbar")};
        }
    }
    if (j.contains("input_constraints")) {
        const auto& s = j.at("input_constraints");
        if (s.is_null()) {
            base.input_constraints.reset();
        } else {
            json_io::reject_unknown_keys(s, {"S", "ubar"}, "input_constraints");
            base.input_constraints = Polyhedron{matrix_from(s.at("S"), "S"), vector_from(s.at("ubar"), "ubar")};
        }
    }
    base.validate();
    return base;
}

}  // namespace statesel
