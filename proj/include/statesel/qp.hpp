#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "statesel/types.hpp"

// Dense convex QP for small problems:
//
//     minimize  1/2 x'Hx + g'x   subject to  A x <= b,   H symmetric PSD.
//
// Phase I projects the origin onto the polyhedron with the Goldfarb-Idnani
// dual method (strictly convex, so it needs no feasible start and detects
// infeasibility). Phase II runs a primal active-set method from that point,
// which tolerates a singular H and reports unboundedness along feasible rays.

namespace statesel {

class UnboundedProblem : public NumericalError {
public:
    using NumericalError::NumericalError;
};

enum class QpStatus { Optimal, Infeasible };

struct QpSolution {
    QpStatus status = QpStatus::Infeasible;
    Vector x;
    Vector multipliers;  // one per row of A, >= 0
    double objective = std::numeric_limits<double>::quiet_NaN();
    int iterations = 0;

    bool optimal() const { return status == QpStatus::Optimal; }
};

struct KktResiduals {
    double stationarity = 0.0;
    double primal = 0.0;
    double complementarity = 0.0;
    double dual = 0.0;  // most negative multiplier, as a positive number

    double worst() const { return std::max({stationarity, primal, complementarity, dual}); }
};

inline KktResiduals kkt_residuals(const Matrix& H, const Vector& g, const Matrix& A, const Vector& b, const Vector& x,
                                  const Vector& mu) {
    KktResiduals r;
    Vector grad = H * x + g;
    if (A.rows() > 0) {
        grad += A.transpose() * mu;
        const Vector slack = b - A * x;
        r.primal = std::max(0.0, -slack.minCoeff());
        r.complementarity = (mu.array() * slack.array()).abs().maxCoeff();
        r.dual = std::max(0.0, -mu.minCoeff());
    }
    r.stationarity = grad.size() > 0 ? grad.cwiseAbs().maxCoeff() : 0.0;
    return r;
}

namespace detail {

inline void apply_rotation(Matrix& m, Eigen::Index col_a, Eigen::Index col_b, double c, double s) {
    for (Eigen::Index k = 0; k < m.rows(); ++k) {
        const double ta = m(k, col_a);
        const double tb = m(k, col_b);
        m(k, col_a) = c * ta + s * tb;
        m(k, col_b) = -s * ta + c * tb;
    }
}

/// Goldfarb-Idnani dual active set for  min 1/2 x'Gx + g0'x  s.t.  A x <= b,
/// G positive definite. Returns nullopt when the constraints are inconsistent.
inline std::optional<Vector> goldfarb_idnani(const Matrix& G, const Vector& g0, const Matrix& A, const Vector& b,
                                             int* iterations) {
    const Eigen::Index n = G.rows();
    const Eigen::Index m = A.rows();
    Eigen::LLT<Matrix> llt(G);
    if (llt.info() != Eigen::Success) throw NumericalError("goldfarb_idnani: G is not positive definite");
    const Matrix L = llt.matrixL();
    Matrix J = L.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(n, n));
    Matrix R = Matrix::Zero(n, n);
    Vector x = -llt.solve(g0);

    std::vector<Eigen::Index> active;
    std::vector<double> u;
    std::vector<bool> is_active(static_cast<std::size_t>(m), false);
    double r_norm = 1.0;
    constexpr double eps = 1e-14;
    const double feas_tol = 1e-11;
    const int max_iter = static_cast<int>(50 * (m + n) + 100);
    int iter = 0;

    auto slack = [&](Eigen::Index i) { return b(i) - A.row(i).dot(x); };

    auto drop = [&](std::size_t l) {
        is_active[static_cast<std::size_t>(active[l])] = false;
        const auto iq = static_cast<Eigen::Index>(active.size());
        for (Eigen::Index j = static_cast<Eigen::Index>(l) + 1; j < iq; ++j) R.col(j - 1) = R.col(j);
        R.col(iq - 1).setZero();
        active.erase(active.begin() + static_cast<std::ptrdiff_t>(l));
        u.erase(u.begin() + static_cast<std::ptrdiff_t>(l));
        const auto new_iq = iq - 1;
        for (Eigen::Index j = static_cast<Eigen::Index>(l); j < new_iq; ++j) {
            const double a = R(j, j);
            const double c_b = R(j + 1, j);
            const double h = std::hypot(a, c_b);
            if (h == 0.0) continue;
            const double c = a / h;
            const double s = c_b / h;
            for (Eigen::Index k = j; k < new_iq; ++k) {
                const double ra = R(j, k);
                const double rb = R(j + 1, k);
                R(j, k) = c * ra + s * rb;
                R(j + 1, k) = -s * ra + c * rb;
            }
            apply_rotation(J, j, j + 1, c, s);
        }
    };

    while (true) {
        // Most violated constraint.
        Eigen::Index p = -1;
        double worst = -feas_tol;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (is_active[static_cast<std::size_t>(i)]) continue;
            const double s = slack(i);
            if (s < worst) {
                worst = s;
                p = i;
            }
        }
        if (p < 0) break;

        // Constraint p reads n'x + b_p >= 0 with n = -a_p.
        const Vector np = -A.row(p).transpose();
        double u_plus = 0.0;
        while (true) {
            if (++iter > max_iter) throw NumericalError("goldfarb_idnani: iteration limit reached");
            const auto iq = static_cast<Eigen::Index>(active.size());
            const Vector d = J.transpose() * np;
            const Vector z = J.rightCols(n - iq) * d.tail(n - iq);
            Vector r;
            if (iq > 0) r = R.topLeftCorner(iq, iq).triangularView<Eigen::Upper>().solve(d.head(iq));

            double t1 = std::numeric_limits<double>::infinity();
            std::optional<std::size_t> l;
            for (Eigen::Index k = 0; k < iq; ++k) {
                if (r(k) > eps && u[static_cast<std::size_t>(k)] / r(k) < t1) {
                    t1 = u[static_cast<std::size_t>(k)] / r(k);
                    l = static_cast<std::size_t>(k);
                }
            }
            double t2 = std::numeric_limits<double>::infinity();
            const double zn = z.dot(np);
            if (z.norm() > eps && zn > eps) t2 = std::max(0.0, -slack(p)) / zn;

            const double t = std::min(t1, t2);
            if (!std::isfinite(t)) {
                if (iterations) *iterations = iter;
                return std::nullopt;
            }
            if (!std::isfinite(t2)) {
                for (Eigen::Index k = 0; k < iq; ++k) u[static_cast<std::size_t>(k)] -= t * r(k);
                u_plus += t;
                drop(*l);
                continue;
            }
            x += t * z;
            for (Eigen::Index k = 0; k < iq; ++k) u[static_cast<std::size_t>(k)] -= t * r(k);
            u_plus += t;
            if (t == t2) {
                // Add p: rotate d so that only its first iq+1 entries are nonzero.
                Vector dd = d;
                for (Eigen::Index j = n - 1; j >= iq + 1; --j) {
                    const double h = std::hypot(dd(j - 1), dd(j));
                    if (h == 0.0) continue;
                    const double c = dd(j - 1) / h;
                    const double s = dd(j) / h;
                    dd(j - 1) = h;
                    dd(j) = 0.0;
                    apply_rotation(J, j - 1, j, c, s);
                }
                R.col(iq).head(iq + 1) = dd.head(iq + 1);
                if (std::abs(dd(iq)) <= eps * r_norm) {
                    // Numerically dependent; treat as satisfied at the current point.
                    R.col(iq).setZero();
                    break;
                }
                r_norm = std::max(r_norm, std::abs(dd(iq)));
                active.push_back(p);
                u.push_back(u_plus);
                is_active[static_cast<std::size_t>(p)] = true;
                break;
            }
            drop(*l);
        }
        if (iter > max_iter) throw NumericalError("goldfarb_idnani: iteration limit reached");
    }
    if (iterations) *iterations = iter;
    return x;
}

/// Orthonormal basis of { p : rows p = 0 }.
inline Matrix null_space(const Matrix& rows, Eigen::Index n) {
    if (rows.rows() == 0) return Matrix::Identity(n, n);
    Eigen::ColPivHouseholderQR<Matrix> qr(rows.transpose());
    const Eigen::Index rank = qr.rank();
    const Matrix Q = qr.householderQ() * Matrix::Identity(n, n);
    return Q.rightCols(n - rank);
}

}  // namespace detail

/// Solves  min 1/2 x'Hx + g'x  s.t.  A x <= b.
/// Throws UnboundedProblem when the objective decreases without bound on the feasible set.
inline QpSolution solve_qp(const Matrix& H_in, const Vector& g, const Matrix& A_in, const Vector& b_in) {
    const Eigen::Index n = H_in.rows();
    if (H_in.cols() != n || g.size() != n || A_in.cols() != (A_in.rows() > 0 ? n : A_in.cols()) ||
        A_in.rows() != b_in.size())
        throw ConfigError("solve_qp: inconsistent problem dimensions");
    const Matrix H = detail::symmetrize(H_in);
    QpSolution sol;

    // Normalize rows; zero rows are either trivially satisfied or infeasible.
    std::vector<Eigen::Index> kept;
    std::vector<double> scale;
    for (Eigen::Index i = 0; i < A_in.rows(); ++i) {
        const double norm = A_in.row(i).norm();
        if (norm <= 1e-14) {
            if (b_in(i) < -1e-12) {
                sol.status = QpStatus::Infeasible;
                return sol;
            }
            continue;
        }
        if (!std::isfinite(b_in(i)) || !A_in.row(i).allFinite()) throw ConfigError("solve_qp: non-finite constraint row");
        kept.push_back(i);
        scale.push_back(norm);
    }
    const auto m = static_cast<Eigen::Index>(kept.size());
    Matrix A(m, n);
    Vector b(m);
    for (Eigen::Index r = 0; r < m; ++r) {
        A.row(r) = A_in.row(kept[static_cast<std::size_t>(r)]) / scale[static_cast<std::size_t>(r)];
        b(r) = b_in(kept[static_cast<std::size_t>(r)]) / scale[static_cast<std::size_t>(r)];
    }

    // Phase I.
    int phase1_iterations = 0;
    auto start = detail::goldfarb_idnani(Matrix::Identity(n, n), Vector::Zero(n), A, b, &phase1_iterations);
    if (!start) {
        sol.status = QpStatus::Infeasible;
        sol.iterations = phase1_iterations;
        return sol;
    }
    Vector x = *start;
    if (m > 0 && (A * x - b).maxCoeff() > 1e-8 * (1.0 + b.cwiseAbs().maxCoeff())) {
        sol.status = QpStatus::Infeasible;
        return sol;
    }

    // Phase II.
    const double h_scale = std::max(1.0, H.cwiseAbs().maxCoeff());
    const double g_scale = std::max(1.0, g.cwiseAbs().maxCoeff());
    std::vector<Eigen::Index> working;
    std::vector<bool> in_working(static_cast<std::size_t>(m), false);
    const int max_iter = static_cast<int>(100 * (m + n) + 100);
    Vector mu_working;
    int iter = 0;
    for (;; ++iter) {
        if (iter > max_iter) throw NumericalError("solve_qp: iteration limit reached");
        const Vector grad = H * x + g;
        Matrix Aw(static_cast<Eigen::Index>(working.size()), n);
        for (std::size_t w = 0; w < working.size(); ++w) Aw.row(static_cast<Eigen::Index>(w)) = A.row(working[w]);
        const Matrix Z = detail::null_space(Aw, n);

        Vector step = Vector::Zero(n);
        bool ray = false;
        if (Z.cols() > 0) {
            const Matrix Hr = Z.transpose() * H * Z;
            const Vector gr = Z.transpose() * grad;
            Eigen::SelfAdjointEigenSolver<Matrix> eig(detail::symmetrize(Hr));
            const Vector& lam = eig.eigenvalues();
            const Matrix& V = eig.eigenvectors();
            const Vector gv = V.transpose() * gr;
            const double curvature_tol = 1e-10 * h_scale;
            Vector flat = Vector::Zero(gv.size());
            Vector newton = Vector::Zero(gv.size());
            for (Eigen::Index i = 0; i < gv.size(); ++i) {
                if (lam(i) <= curvature_tol)
                    flat(i) = -gv(i);
                else
                    newton(i) = -gv(i) / lam(i);
            }
            if (flat.cwiseAbs().maxCoeff() > 1e-11 * g_scale * (1.0 + x.cwiseAbs().maxCoeff())) {
                step = Z * (V * flat);
                ray = true;
            } else {
                step = Z * (V * newton);
            }
        }

        if (!ray && step.cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + x.cwiseAbs().maxCoeff())) {
            if (working.empty()) {
                mu_working.resize(0);
                break;
            }
            mu_working = Aw.transpose().colPivHouseholderQr().solve(-grad);
            Eigen::Index most_negative = 0;
            const double min_mu = mu_working.minCoeff(&most_negative);
            if (min_mu >= -1e-10 * g_scale) break;
            in_working[static_cast<std::size_t>(working[static_cast<std::size_t>(most_negative)])] = false;
            working.erase(working.begin() + most_negative);
            continue;
        }

        double alpha = ray ? std::numeric_limits<double>::infinity() : 1.0;
        std::optional<Eigen::Index> blocking;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (in_working[static_cast<std::size_t>(i)]) continue;
            const double ap = A.row(i).dot(step);
            if (ap <= 1e-14 * step.norm()) continue;
            const double ratio = std::max(0.0, b(i) - A.row(i).dot(x)) / ap;
            if (ratio < alpha) {
                alpha = ratio;
                blocking = i;
            }
        }
        if (!std::isfinite(alpha)) throw UnboundedProblem("solve_qp: objective is unbounded below on the feasible set");
        x += alpha * step;
        if (blocking) {
            working.push_back(*blocking);
            in_working[static_cast<std::size_t>(*blocking)] = true;
        }
    }

    sol.status = QpStatus::Optimal;
    sol.x = x;
    sol.iterations = phase1_iterations + iter;
    sol.multipliers = Vector::Zero(A_in.rows());
    for (std::size_t w = 0; w < working.size(); ++w) {
        const auto row = static_cast<std::size_t>(working[w]);
        sol.multipliers(kept[row]) = std::max(0.0, mu_working(static_cast<Eigen::Index>(w))) / scale[row];
    }
    sol.objective = 0.5 * x.dot(H * x) + g.dot(x);
    return sol;
}

}  // namespace statesel
