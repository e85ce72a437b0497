#pragma once

// Condensed path-following OCP over the linear flat model and the linear
// path dynamics. One Gauss-Newton linearization of the reference map per
// control step turns the problem into a single dense QP.

#include <chrono>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fapp/errors.hpp"
#include "fapp/flat_quadrotor.hpp"
#include "fapp/path_geometry.hpp"
#include "fapp/qp_solver.hpp"

namespace fapp {

/// Cost weights; each 4-vector is the diagonal over (x, y, z, psi).
struct OcpWeights {
    Vec4 position = Vec4::Constant(500.0);
    Vec4 velocity = Vec4::Constant(10.0);
    Vec4 input = Vec4::Constant(0.01);
    double path_input = 0.1;
    /// Commanded path speed [1/s].
    double v_cmd = 0.185;

    void validate() const {
        if ((position.array() < 0.0).any() || (velocity.array() < 0.0).any() || (input.array() < 0.0).any() ||
            !(path_input >= 0.0) || !position.allFinite() || !velocity.allFinite() || !input.allFinite() ||
            !std::isfinite(v_cmd)) {
            throw ConfigError("OCP weights must be finite and non-negative");
        }
    }

    /// Diagonal of Q over the flat state: position slots (0, 4, 8, 12).
    Vec14 expanded_position() const {
        Vec14 d = Vec14::Zero();
        for (int i = 0; i < 4; ++i) d(FlatState::kPositionIndex[i]) = position(i);
        return d;
    }

    /// Diagonal of S over the flat state: velocity slots (1, 5, 9, 13).
    Vec14 expanded_velocity() const {
        Vec14 d = Vec14::Zero();
        for (int i = 0; i < 4; ++i) d(FlatState::kVelocityIndex[i]) = velocity(i);
        return d;
    }
};

struct ConstraintSpec {
    Vec3 jerk_min = Vec3::Constant(-20.0);  ///< [m/s^3]
    Vec3 jerk_max = Vec3::Constant(20.0);   ///< [m/s^3]
    double f_max = 20.0;                    ///< specific thrust bound [m/s^2]
    double gravity = 9.81;
    /// Box on the path input |w| [1/s^4].
    double path_input_max = 1000.0;
    /// Enforce theta' >= 0 along the horizon.
    bool forward_only = true;

    void validate() const {
        if (!(jerk_min.array() < jerk_max.array()).all()) throw ConfigError("jerk_min must be below jerk_max");
        if (!(f_max > gravity) || !(gravity > 0.0)) throw ConfigError("f_max must exceed gravity");
        if (!(path_input_max > 0.0)) throw ConfigError("path input bound must be positive");
    }
};

struct HorizonSpec {
    int steps = 10;
    double dt = 0.1;

    void validate() const {
        if (steps < 1 || !(dt > 0.0)) throw ConfigError("horizon needs steps >= 1 and dt > 0");
    }
};

/// Stacked predictions z_hat = A_hat z0 + B_hat v_hat, s_hat = Ap_hat s0 + Bp_hat w_hat.
struct LiftedSystem {
    Eigen::MatrixXd a_hat;
    Eigen::MatrixXd b_hat;
    Eigen::MatrixXd ap_hat;
    Eigen::MatrixXd bp_hat;
    int horizon = 0;
};

namespace detail {

inline void lift(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int horizon, Eigen::MatrixXd& a_hat,
                 Eigen::MatrixXd& b_hat) {
    const Eigen::Index nx = a.rows(), nu = b.cols();
    a_hat = Eigen::MatrixXd::Zero(horizon * nx, nx);
    b_hat = Eigen::MatrixXd::Zero(horizon * nx, horizon * nu);
    // powers[k] = A^k B
    std::vector<Eigen::MatrixXd> powers{b};
    Eigen::MatrixXd a_pow = a;
    for (int k = 0; k < horizon; ++k) {
        a_hat.block(k * nx, 0, nx, nx) = a_pow;
        a_pow = a * a_pow;
        if (k > 0) powers.push_back(a * powers.back());
    }
    for (int k = 0; k < horizon; ++k) {
        for (int j = 0; j <= k; ++j) b_hat.block(k * nx, j * nu, nx, nu) = powers[k - j];
    }
}

}  // namespace detail

inline LiftedSystem build_lifted(const Mat14& ad, const Mat14x4& bd, const Mat4& apd,
                                 const Eigen::Matrix<double, 4, 1>& bpd, int horizon) {
    if (horizon < 1) throw DomainError("horizon must be at least one step");
    LiftedSystem l;
    l.horizon = horizon;
    detail::lift(ad, bd, horizon, l.a_hat, l.b_hat);
    detail::lift(apd, bpd, horizon, l.ap_hat, l.bp_hat);
    return l;
}

struct QpProblem {
    Eigen::MatrixXd h;
    Eigen::VectorXd f;
    Eigen::MatrixXd a_in;
    Eigen::VectorXd b_in;

    double objective(const Eigen::VectorXd& x) const { return 0.5 * x.dot(h * x) + f.dot(x); }
};

struct CostMatrices {
    Eigen::MatrixXd h;
    Eigen::VectorXd f;
};

struct ConstraintRows {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;
};

/// Linearization point over the horizon (entries for k = 1..N).
struct NominalTrajectory {
    std::vector<PathState> s;
    std::vector<FlatState> z;
};

/// Row layout of the inequality block of one prediction step.
enum ConstraintRow : int {
    kJerkUpperX = 0,
    kJerkUpperY,
    kJerkUpperZ,
    kJerkLowerX,
    kJerkLowerY,
    kJerkLowerZ,
    kThrust,
    kForward,
    kPathInputUpper,
    kPathInputLower,
    kRowsPerStep
};

/// Quadratic cost in v_tilde = (v_hat, w_hat).
///
/// The reference is linearized as h(s_bar_k) + J_k (s_k - s_bar_k), which is
/// exact for straight lines; the commanded velocity is p'(theta_bar_k) v_cmd
/// and is applied to the vehicle's velocity slots.
inline CostMatrices build_cost(const LiftedSystem& lifted, const OcpWeights& weights, const FlatState& z0,
                               const PathState& s0, const BezierPath& path, std::span<const PathState> s_bar) {
    const int horizon = lifted.horizon;
    if (static_cast<int>(s_bar.size()) != horizon) throw DimensionMismatch("nominal path states != horizon");
    const int nz = kFlatStateDim, nv = kFlatInputDim * horizon, n = 5 * horizon;

    const Eigen::VectorXd z_free = lifted.a_hat * z0.values;
    const Eigen::VectorXd s_free = lifted.ap_hat * s0.values;

    Eigen::MatrixXd jac_bp(nz * horizon, horizon);
    Eigen::VectorXd ref_offset(nz * horizon);
    Eigen::VectorXd z_cmd = Eigen::VectorXd::Zero(nz * horizon);
    Eigen::VectorXd q_diag(nz * horizon), s_diag(nz * horizon);
    const Vec14 q_block = weights.expanded_position();
    const Vec14 s_block = weights.expanded_velocity();

    for (int k = 0; k < horizon; ++k) {
        const PathState nominal = s_bar[k].clamped();
        const Mat14x4 jac = reference_jacobian(path, nominal);
        const FlatState h = reference_flat_state(path, nominal);
        ref_offset.segment(k * nz, nz) = h.values + jac * (s_free.segment<4>(4 * k) - nominal.values);
        jac_bp.block(k * nz, 0, nz, horizon) = jac * lifted.bp_hat.block(4 * k, 0, 4, horizon);

        const Vec4 commanded = path.eval(nominal.theta(), 1) * weights.v_cmd;
        for (int i = 0; i < 4; ++i) z_cmd(k * nz + FlatState::kVelocityIndex[i]) = commanded(i);
        q_diag.segment(k * nz, nz) = q_block;
        s_diag.segment(k * nz, nz) = s_block;
    }

    Eigen::MatrixXd g(nz * horizon, n);
    g.leftCols(nv) = lifted.b_hat;
    g.rightCols(horizon) = -jac_bp;
    const Eigen::VectorXd e0 = z_free - ref_offset;
    const Eigen::VectorXd ev0 = z_free - z_cmd;

    CostMatrices c;
    const Eigen::MatrixXd qg = q_diag.asDiagonal() * g;
    const Eigen::MatrixXd sb = s_diag.asDiagonal() * lifted.b_hat;
    c.h = g.transpose() * qg;
    c.h.topLeftCorner(nv, nv) += lifted.b_hat.transpose() * sb;
    for (int k = 0; k < horizon; ++k) {
        for (int i = 0; i < 4; ++i) c.h(4 * k + i, 4 * k + i) += weights.input(i);
        c.h(nv + k, nv + k) += weights.path_input;
    }
    c.h = 0.5 * (c.h + c.h.transpose());

    c.f = qg.transpose() * e0;
    c.f.head(nv) += sb.transpose() * ev0;
    return c;
}

/// Jerk, linearized thrust, forward-motion and path-input rows, each
/// normalized to a unit gradient.
inline ConstraintRows build_constraints(const LiftedSystem& lifted, const ConstraintSpec& spec, const FlatState& z0,
                                        const PathState& s0, std::span<const FlatState> z_bar) {
    const int horizon = lifted.horizon;
    if (static_cast<int>(z_bar.size()) != horizon) throw DimensionMismatch("nominal flat states != horizon");
    const int nz = kFlatStateDim, nv = kFlatInputDim * horizon, n = 5 * horizon;
    const Eigen::VectorXd z_free = lifted.a_hat * z0.values;
    const Eigen::VectorXd s_free = lifted.ap_hat * s0.values;

    ConstraintRows c;
    c.a = Eigen::MatrixXd::Zero(kRowsPerStep * horizon, n);
    c.b = Eigen::VectorXd::Zero(kRowsPerStep * horizon);

    for (int k = 0; k < horizon; ++k) {
        const int base = kRowsPerStep * k;
        for (int axis = 0; axis < 3; ++axis) {
            const int slot = k * nz + FlatState::kJerkIndex[axis];
            c.a.row(base + kJerkUpperX + axis).head(nv) = lifted.b_hat.row(slot);
            c.b(base + kJerkUpperX + axis) = spec.jerk_max(axis) - z_free(slot);
            c.a.row(base + kJerkLowerX + axis).head(nv) = -lifted.b_hat.row(slot);
            c.b(base + kJerkLowerX + axis) = z_free(slot) - spec.jerk_min(axis);
        }

        // |a + g e3|^2 <= f_max^2 linearized about the nominal acceleration.
        Vec3 thrust_dir = z_bar[k].acceleration();
        thrust_dir.z() += spec.gravity;
        Eigen::RowVectorXd grad = Eigen::RowVectorXd::Zero(n);
        double free_term = 0.0;
        for (int axis = 0; axis < 3; ++axis) {
            const int slot = k * nz + FlatState::kAccelerationIndex[axis];
            grad.head(nv) += 2.0 * thrust_dir(axis) * lifted.b_hat.row(slot);
            free_term += 2.0 * thrust_dir(axis) * (z_free(slot) - z_bar[k].acceleration()(axis));
        }
        c.a.row(base + kThrust) = grad;
        c.b(base + kThrust) = spec.f_max * spec.f_max - thrust_dir.squaredNorm() - free_term;

        if (spec.forward_only) {
            const int slot = 4 * k + 1;
            c.a.row(base + kForward).tail(horizon) = -lifted.bp_hat.row(slot);
            c.b(base + kForward) = s_free(slot);
        } else {
            // Inactive placeholder keeps the row layout fixed.
            c.a(base + kForward, nv + k) = 1.0;
            c.b(base + kForward) = 2.0 * spec.path_input_max;
        }
        c.a(base + kPathInputUpper, nv + k) = 1.0;
        c.b(base + kPathInputUpper) = spec.path_input_max;
        c.a(base + kPathInputLower, nv + k) = -1.0;
        c.b(base + kPathInputLower) = spec.path_input_max;
    }

    for (Eigen::Index r = 0; r < c.a.rows(); ++r) {
        const double norm = c.a.row(r).norm();
        if (norm > 1e-12) {
            c.a.row(r) /= norm;
            c.b(r) /= norm;
        }
    }
    return c;
}

struct SolveStats {
    QpStatus status = QpStatus::Optimal;
    int iterations = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double wall_ms = 0.0;
};

struct ControlSolution {
    std::vector<FlatInput> v;
    std::vector<double> w;
    std::vector<FlatState> z_predicted;
    std::vector<PathState> s_predicted;
    std::vector<FlatState> z_ref_predicted;
    SolveStats stats;
    /// Stacked optimizer (v_hat, w_hat).
    Eigen::VectorXd decision;
    std::vector<int> active_set;
};

/// Exact-constraint audit of a predicted trajectory.
struct ConstraintAudit {
    double max_jerk_violation = 0.0;  ///< [m/s^3], 0 when within bounds
    double max_thrust_ratio = 0.0;    ///< max |a + g e3| / f_max
};

inline ConstraintAudit audit_constraints(std::span<const FlatState> states, const ConstraintSpec& spec) {
    ConstraintAudit audit;
    for (const FlatState& z : states) {
        const Vec3 j = z.jerk();
        for (int axis = 0; axis < 3; ++axis) {
            audit.max_jerk_violation = std::max(
                {audit.max_jerk_violation, j(axis) - spec.jerk_max(axis), spec.jerk_min(axis) - j(axis)});
        }
        Vec3 t = z.acceleration();
        t.z() += spec.gravity;
        audit.max_thrust_ratio = std::max(audit.max_thrust_ratio, t.norm() / spec.f_max);
    }
    return audit;
}

/// Path-following MPC: owns the lifted model and a QP solver workspace.
/// One instance per control loop; not safe for concurrent use.
class PathFollowingMpc {
public:
    static constexpr double kHessianRegularization = 1e-8;

    PathFollowingMpc(BezierPath path, OcpWeights weights, ConstraintSpec spec, HorizonSpec horizon = {},
                     QpSettings qp_settings = {})
        : path_(std::move(path)), weights_(weights), spec_(spec), horizon_(horizon), solver_(qp_settings) {
        weights_.validate();
        spec_.validate();
        horizon_.validate();
        const FlatModel flat = flat_model_matrices();
        flat_d_ = discretize_chain<kFlatStateDim, kFlatInputDim>(flat.a, flat.b, horizon_.dt);
        const PathModel pc = path_dynamics_matrices();
        path_d_ = discretize_chain<4, 1>(pc.a, pc.b, horizon_.dt);
        lifted_ = build_lifted(flat_d_.a, flat_d_.b, path_d_.a, path_d_.b, horizon_.steps);
    }

    const BezierPath& path() const { return path_; }
    const OcpWeights& weights() const { return weights_; }
    const ConstraintSpec& constraints() const { return spec_; }
    const HorizonSpec& horizon() const { return horizon_; }
    const LiftedSystem& lifted() const { return lifted_; }
    const FlatModel& flat_discrete() const { return flat_d_; }
    const PathModel& path_discrete() const { return path_d_; }
    int decision_size() const { return 5 * horizon_.steps; }

    /// Nominal trajectory from a warm start shifted by one step, or constant
    /// speed v_cmd from s0 when there is none.
    NominalTrajectory nominal(const FlatState& z0, const PathState& s0, const ControlSolution* warm) const {
        const int horizon = horizon_.steps;
        NominalTrajectory nom;
        if (warm == nullptr || warm->decision.size() != decision_size()) {
            for (int k = 1; k <= horizon; ++k) {
                nom.s.emplace_back(s0.theta() + k * horizon_.dt * weights_.v_cmd, weights_.v_cmd, 0.0, 0.0);
            }
            const Eigen::VectorXd z_free = lifted_.a_hat * z0.values;
            for (int k = 0; k < horizon; ++k) nom.z.emplace_back(z_free.segment<kFlatStateDim>(k * kFlatStateDim));
            return nom;
        }
        return rollout(z0, s0, shift(warm->decision));
    }

    /// Predicted states for a stacked decision vector.
    NominalTrajectory rollout(const FlatState& z0, const PathState& s0, const Eigen::VectorXd& decision) const {
        const int horizon = horizon_.steps, nv = kFlatInputDim * horizon;
        const Eigen::VectorXd z_hat = lifted_.a_hat * z0.values + lifted_.b_hat * decision.head(nv);
        const Eigen::VectorXd s_hat = lifted_.ap_hat * s0.values + lifted_.bp_hat * decision.tail(horizon);
        NominalTrajectory out;
        for (int k = 0; k < horizon; ++k) {
            out.z.emplace_back(z_hat.segment<kFlatStateDim>(k * kFlatStateDim));
            out.s.emplace_back(s_hat.segment<4>(4 * k));
        }
        return out;
    }

    /// Decision vector advanced by one step, last entry repeated.
    Eigen::VectorXd shift(const Eigen::VectorXd& decision) const {
        const int horizon = horizon_.steps, nv = kFlatInputDim * horizon;
        Eigen::VectorXd out = decision;
        for (int k = 0; k + 1 < horizon; ++k) {
            out.segment<kFlatInputDim>(kFlatInputDim * k) = decision.segment<kFlatInputDim>(kFlatInputDim * (k + 1));
            out(nv + k) = decision(nv + k + 1);
        }
        return out;
    }

    QpProblem assemble(const FlatState& z0, const PathState& s0, const NominalTrajectory& nom) const {
        const CostMatrices cost = build_cost(lifted_, weights_, z0, s0, path_, nom.s);
        const ConstraintRows rows = build_constraints(lifted_, spec_, z0, s0, nom.z);
        QpProblem qp{cost.h, cost.f, rows.a, rows.b};
        qp.h.diagonal().array() += kHessianRegularization;
        return qp;
    }

    /// One Gauss-Newton iteration about the given nominal trajectory.
    ControlSolution solve_with_nominal(const FlatState& z0, const PathState& s0, const NominalTrajectory& nom,
                                       std::span<const int> warm_active = {}) {
        if (!(s0.theta() >= -kThetaTolerance && s0.theta() <= 1.0 + kThetaTolerance)) {
            throw DomainError("path state theta outside [0, 1]");
        }
        const auto start = std::chrono::steady_clock::now();
        const QpProblem qp = assemble(z0, s0, nom);
        const QpSolution qs = solver_.solve(qp.h, qp.f, qp.a_in, qp.b_in, warm_active);
        const auto stop = std::chrono::steady_clock::now();

        ControlSolution sol;
        sol.stats.status = qs.status;
        sol.stats.iterations = qs.iterations;
        sol.stats.primal_residual = qs.primal_residual;
        sol.stats.dual_residual = qs.dual_residual;
        sol.stats.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
        if (qs.status != QpStatus::Optimal) {
            throw QpInfeasible(std::string("condensed QP not solved: ") + to_string(qs.status));
        }
        sol.decision = qs.primal;
        sol.active_set = qs.active_set;
        unpack(z0, s0, sol);
        return sol;
    }

    /// Full control step: nominal from the warm start, linearize, solve.
    ControlSolution solve_step(const FlatState& z0, const PathState& s0, const ControlSolution* warm = nullptr) {
        const NominalTrajectory nom = nominal(z0, s0, warm);
        std::vector<int> active;
        if (warm != nullptr) {
            for (int row : warm->active_set) {
                if (row >= kRowsPerStep) active.push_back(row - kRowsPerStep);
            }
        }
        return solve_with_nominal(z0, s0, nom, active);
    }

private:
    void unpack(const FlatState& z0, const PathState& s0, ControlSolution& sol) const {
        const int horizon = horizon_.steps, nv = kFlatInputDim * horizon;
        const NominalTrajectory pred = rollout(z0, s0, sol.decision);
        sol.z_predicted = pred.z;
        sol.s_predicted = pred.s;
        for (int k = 0; k < horizon; ++k) {
            sol.v.emplace_back(sol.decision.segment<kFlatInputDim>(kFlatInputDim * k));
            sol.w.push_back(sol.decision(nv + k));
            sol.z_ref_predicted.push_back(reference_flat_state(path_, pred.s[k].clamped()));
        }
    }

    BezierPath path_;
    OcpWeights weights_;
    ConstraintSpec spec_;
    HorizonSpec horizon_;
    FlatModel flat_d_;
    PathModel path_d_;
    LiftedSystem lifted_;
    QpSolver solver_;
};

}  // namespace fapp
