#pragma once

// Dense strictly convex QP:  min 1/2 x'Hx + f'x  s.t.  A x <= b.
//
// Dual active-set method of Goldfarb and Idnani. Every iterate is the
// minimizer of the problem restricted to the working set with non-negative
// multipliers, so the method needs no feasible starting point and detects
// infeasibility exactly (a violated constraint that no step can repair).

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fapp/errors.hpp"

namespace fapp {

enum class QpStatus { Optimal, MaxIterations, Infeasible };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::Optimal: return "optimal";
        case QpStatus::MaxIterations: return "max_iterations";
        case QpStatus::Infeasible: return "infeasible";
    }
    return "unknown";
}

struct QpSettings {
    double primal_tolerance = 1e-6;
    double dual_tolerance = 1e-6;
    double complementarity_tolerance = 1e-6;
    int max_iterations = 4000;
    /// Normalized violation above which a constraint enters the working set.
    double activation_tolerance = 1e-10;
    /// Relative test for a normal that is dependent on the working set.
    double dependence_tolerance = 1e-11;
};

struct QpSolution {
    Eigen::VectorXd primal;
    Eigen::VectorXd dual;  ///< one multiplier per inequality row, >= 0
    QpStatus status = QpStatus::MaxIterations;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double complementarity = 0.0;
    int iterations = 0;
    std::vector<int> active_set;
};

struct KktResiduals {
    double stationarity = 0.0;     ///< ||Hx + f + A'lambda||_inf
    double primal = 0.0;           ///< max(Ax - b)_+
    double dual_sign = 0.0;        ///< max(-lambda)_+
    double complementarity = 0.0;  ///< max |lambda_i (Ax - b)_i|
};

inline KktResiduals kkt_residuals(const Eigen::MatrixXd& h, const Eigen::VectorXd& f, const Eigen::MatrixXd& a,
                                  const Eigen::VectorXd& b, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& lambda) {
    KktResiduals r;
    Eigen::VectorXd grad = h * x + f;
    if (a.rows() > 0) grad += a.transpose() * lambda;
    r.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
    if (a.rows() > 0) {
        const Eigen::VectorXd slack = a * x - b;
        r.primal = std::max(0.0, slack.maxCoeff());
        r.dual_sign = std::max(0.0, (-lambda).maxCoeff());
        r.complementarity = lambda.cwiseProduct(slack).cwiseAbs().maxCoeff();
    }
    return r;
}

class QpSolver {
public:
    explicit QpSolver(QpSettings settings = {}) : settings_(settings) {}

    const QpSettings& settings() const { return settings_; }

    /// Solves the QP. `warm_active` seeds the working set (e.g. the previous
    /// optimal active set); invalid, dependent or dual-infeasible entries are
    /// discarded.
    QpSolution solve(const Eigen::MatrixXd& h, const Eigen::VectorXd& f, const Eigen::MatrixXd& a,
                     const Eigen::VectorXd& b, std::span<const int> warm_active = {}) {
        const Eigen::Index n = h.rows();
        const Eigen::Index m = a.rows();
        if (h.cols() != n || f.size() != n || (m > 0 && a.cols() != n) || b.size() != m) {
            throw DimensionMismatch("QP data dimensions are inconsistent");
        }
        if (!h.allFinite() || !f.allFinite() || !a.allFinite() || !b.allFinite()) {
            throw NumericalBreakdown("QP data contains non-finite entries");
        }

        llt_.compute(h);
        if (llt_.info() != Eigen::Success) throw NumericalBreakdown("Hessian is not positive definite");
        h_inv_ = llt_.solve(Eigen::MatrixXd::Identity(n, n));
        h_inv_ = 0.5 * (h_inv_ + h_inv_.transpose());
        a_ = &a;
        b_ = &b;
        f_ = &f;
        row_norm_ = m > 0 ? Eigen::VectorXd(a.rowwise().norm()) : Eigen::VectorXd();
        for (Eigen::Index i = 0; i < m; ++i) row_norm_(i) = std::max(row_norm_(i), 1e-300);

        active_.clear();
        u_.resize(0);
        x_ = -h_inv_ * f;
        int iterations = 0;
        QpStatus status = QpStatus::Optimal;

        if (!warm_active.empty() && m > 0) iterations += seed_working_set(warm_active);

        bool done = false;
        while (!done) {
            const int p = most_violated();
            if (p < 0) break;
            double u_p = 0.0;
            // Add constraint p, dropping working-set members as needed.
            while (true) {
                if (++iterations > settings_.max_iterations) {
                    status = QpStatus::MaxIterations;
                    done = true;
                    break;
                }
                const Eigen::VectorXd normal = -a.row(p).transpose();
                Eigen::VectorXd r;
                const Eigen::VectorXd z = step_direction(normal, r);

                double t1 = std::numeric_limits<double>::infinity();
                int drop = -1;
                for (Eigen::Index j = 0; j < r.size(); ++j) {
                    if (r(j) > 1e-14 && u_(j) / r(j) < t1) {
                        t1 = u_(j) / r(j);
                        drop = static_cast<int>(j);
                    }
                }
                const double curvature = z.dot(normal);
                const double scale = normal.dot(h_inv_ * normal);
                const bool independent = curvature > settings_.dependence_tolerance * scale;
                const double slack = b(p) - a.row(p).dot(x_);
                const double t2 = independent ? -slack / curvature : std::numeric_limits<double>::infinity();

                if (!std::isfinite(t1) && !std::isfinite(t2)) {
                    status = QpStatus::Infeasible;
                    done = true;
                    break;
                }
                const double t = std::min(t1, t2);
                if (std::isfinite(t2)) x_ += t * z;
                if (r.size() > 0) u_ -= t * r;
                u_p += t;
                if (t2 <= t1) {
                    active_.push_back(p);
                    u_.conservativeResize(u_.size() + 1);
                    u_(u_.size() - 1) = u_p;
                    break;
                }
                remove_active(drop);
            }
        }

        if (status == QpStatus::Optimal && !active_.empty()) polish();

        QpSolution sol;
        sol.primal = x_;
        sol.dual = Eigen::VectorXd::Zero(m);
        for (std::size_t j = 0; j < active_.size(); ++j) sol.dual(active_[j]) = std::max(0.0, u_(j));
        sol.iterations = iterations;
        sol.active_set = active_;
        const KktResiduals res = kkt_residuals(h, f, a, b, sol.primal, sol.dual);
        sol.primal_residual = res.primal;
        sol.dual_residual = res.stationarity;
        sol.complementarity = res.complementarity;
        if (status == QpStatus::Optimal &&
            (res.primal > settings_.primal_tolerance || res.stationarity > settings_.dual_tolerance ||
             res.complementarity > settings_.complementarity_tolerance)) {
            status = QpStatus::MaxIterations;
        }
        sol.status = status;
        return sol;
    }

private:
    int most_violated() const {
        const Eigen::MatrixXd& a = *a_;
        const Eigen::VectorXd& b = *b_;
        int best = -1;
        double worst = settings_.activation_tolerance;
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            const double violation = (a.row(i).dot(x_) - b(i)) / row_norm_(i);
            if (violation > worst) {
                worst = violation;
                best = static_cast<int>(i);
            }
        }
        return best;
    }

    /// Normals of the working set as columns of N (constraints written N'x >= d).
    Eigen::MatrixXd working_normals() const {
        Eigen::MatrixXd normals(a_->cols(), static_cast<Eigen::Index>(active_.size()));
        for (std::size_t j = 0; j < active_.size(); ++j) normals.col(j) = -a_->row(active_[j]).transpose();
        return normals;
    }

    /// Primal direction z and multiplier change r for adding `normal`.
    Eigen::VectorXd step_direction(const Eigen::VectorXd& normal, Eigen::VectorXd& r) const {
        const Eigen::VectorXd hn = h_inv_ * normal;
        if (active_.empty()) {
            r.resize(0);
            return hn;
        }
        const Eigen::MatrixXd normals = working_normals();
        const Eigen::MatrixXd h_normals = h_inv_ * normals;
        const Eigen::MatrixXd gram = normals.transpose() * h_normals;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success) throw NumericalBreakdown("working-set factorization failed");
        r = ldlt.solve(h_normals.transpose() * normal);
        return hn - h_normals * r;
    }

    void remove_active(int index) {
        active_.erase(active_.begin() + index);
        Eigen::VectorXd u(u_.size() - 1);
        for (Eigen::Index j = 0, k = 0; j < u_.size(); ++j) {
            if (j != index) u(k++) = u_(j);
        }
        u_ = u;
    }

    /// Solves the equality-constrained problem on the working set.
    void solve_working_set() {
        if (active_.empty()) {
            x_ = -h_inv_ * (*f_);
            u_.resize(0);
            return;
        }
        const Eigen::MatrixXd normals = working_normals();
        Eigen::VectorXd offsets(static_cast<Eigen::Index>(active_.size()));
        for (std::size_t j = 0; j < active_.size(); ++j) offsets(j) = -(*b_)(active_[j]);
        const Eigen::MatrixXd h_normals = h_inv_ * normals;
        const Eigen::MatrixXd gram = normals.transpose() * h_normals;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success) throw NumericalBreakdown("working-set factorization failed");
        u_ = ldlt.solve(offsets + h_normals.transpose() * (*f_));
        x_ = h_normals * u_ - h_inv_ * (*f_);
    }

    int seed_working_set(std::span<const int> warm) {
        const Eigen::Index m = a_->rows();
        for (int j : warm) {
            if (j < 0 || j >= m) continue;
            if (std::find(active_.begin(), active_.end(), j) != active_.end()) continue;
            const Eigen::VectorXd normal = -a_->row(j).transpose();
            Eigen::VectorXd r;
            const Eigen::VectorXd z = step_direction(normal, r);
            if (z.dot(normal) > settings_.dependence_tolerance * normal.dot(h_inv_ * normal)) active_.push_back(j);
        }
        int iterations = 1;
        solve_working_set();
        while (u_.size() > 0 && u_.minCoeff() < 0.0) {
            Eigen::Index worst;
            u_.minCoeff(&worst);
            active_.erase(active_.begin() + worst);
            solve_working_set();
            ++iterations;
        }
        return iterations;
    }

    /// Re-solves the final working set to remove accumulated round-off.
    void polish() {
        const Eigen::VectorXd x_prev = x_;
        const Eigen::VectorXd u_prev = u_;
        solve_working_set();
        const bool dual_ok = u_.size() == 0 || u_.minCoeff() >= -1e-12;
        const Eigen::VectorXd slack = (*a_) * x_ - (*b_);
        if (!dual_ok || slack.maxCoeff() > settings_.primal_tolerance) {
            x_ = x_prev;
            u_ = u_prev;
        }
    }

    QpSettings settings_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::MatrixXd h_inv_;
    Eigen::VectorXd row_norm_;
    Eigen::VectorXd x_;
    Eigen::VectorXd u_;
    std::vector<int> active_;
    const Eigen::MatrixXd* a_ = nullptr;
    const Eigen::VectorXd* b_ = nullptr;
    const Eigen::VectorXd* f_ = nullptr;
};

}  // namespace fapp
