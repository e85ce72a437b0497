#include <random>

#include <gtest/gtest.h>

#include "fapp/lifted_mpc.hpp"

namespace fapp {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

FlatModel discrete_flat(double dt) {
    const FlatModel c = flat_model_matrices();
    return discretize_chain<14, 4>(c.a, c.b, dt);
}

LiftedSystem lifted_for(int horizon, double dt = 0.1) {
    const FlatModel d = discrete_flat(dt);
    const PathModel p = discretize_path(dt);
    return build_lifted(d.a, d.b, p.a, p.b, horizon);
}

TEST(Lifted, SingleStepIsTheModel) {
    const FlatModel d = discrete_flat(0.1);
    const LiftedSystem l = lifted_for(1);
    EXPECT_EQ(MatrixXd(d.a), l.a_hat);
    EXPECT_EQ(MatrixXd(d.b), l.b_hat);
}

TEST(Lifted, StrictUpperBlocksAreZero) {
    const LiftedSystem l = lifted_for(6);
    for (int k = 0; k < 6; ++k) {
        for (int j = k + 1; j < 6; ++j) {
            EXPECT_TRUE(l.b_hat.block(14 * k, 4 * j, 14, 4).isZero(0.0));
            EXPECT_TRUE(l.bp_hat.block(4 * k, j, 4, 1).isZero(0.0));
        }
    }
}

TEST(Lifted, MatchesRecursiveRollout) {
    std::mt19937 rng(1);
    std::uniform_int_distribution<int> horizon(1, 20);
    std::normal_distribution<double> g(0.0, 1.0);
    const FlatModel d = discrete_flat(0.1);
    const PathModel p = discretize_path(0.1);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = trial == 0 ? 3 : horizon(rng);
        const LiftedSystem l = build_lifted(d.a, d.b, p.a, p.b, n);
        Vec14 z0;
        for (int i = 0; i < 14; ++i) z0(i) = g(rng);
        Vec4 s0;
        for (int i = 0; i < 4; ++i) s0(i) = g(rng);
        VectorXd v(4 * n), w(n);
        for (int i = 0; i < 4 * n; ++i) v(i) = g(rng);
        for (int i = 0; i < n; ++i) w(i) = g(rng);

        const VectorXd z_hat = l.a_hat * z0 + l.b_hat * v;
        const VectorXd s_hat = l.ap_hat * s0 + l.bp_hat * w;
        Vec14 z = z0;
        Vec4 s = s0;
        for (int k = 0; k < n; ++k) {
            z = d.a * z + d.b * v.segment<4>(4 * k);
            s = p.a * s + p.b * w(k);
            EXPECT_LT((z_hat.segment<14>(14 * k) - z).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, z.norm()));
            EXPECT_LT((s_hat.segment<4>(4 * k) - s).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, s.norm()));
        }
    }
}

std::vector<PathState> cold_nominal(const PathState& s0, double v_cmd, int horizon, double dt) {
    std::vector<PathState> s;
    for (int k = 1; k <= horizon; ++k) s.emplace_back(s0.theta() + k * dt * v_cmd, v_cmd, 0.0, 0.0);
    return s;
}

TEST(Cost, PureRegularization) {
    OcpWeights w;
    w.position.setZero();
    w.velocity.setZero();
    w.input.setOnes();
    w.path_input = 1.0;
    const LiftedSystem l = lifted_for(10);
    const PathState s0(0.1, 0.2);
    const CostMatrices c = build_cost(l, w, FlatState(), s0, petal_path(), cold_nominal(s0, 0.2, 10, 0.1));
    EXPECT_LT((c.h - MatrixXd::Identity(50, 50)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(c.f.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Cost, LineEquilibriumHasZeroUnconstrainedMinimizer) {
    const BezierPath line({Vec4(0, 0, 1, 0), Vec4(4, 2, 1.5, 0.3)});
    OcpWeights w;
    w.v_cmd = 0.25;
    const LiftedSystem l = lifted_for(10);
    const PathState s0(0.0, w.v_cmd);
    const FlatState z0 = reference_flat_state(line, s0);
    const CostMatrices c = build_cost(l, w, z0, s0, line, cold_nominal(s0, w.v_cmd, 10, 0.1));
    const VectorXd x = -c.h.llt().solve(c.f);
    EXPECT_LT(x.cwiseAbs().maxCoeff(), 1e-8);
}

// Oracle: the linearized objective evaluated by explicit step recursion.
struct LinearizedObjective {
    const BezierPath& path;
    OcpWeights w;
    FlatState z0;
    PathState s0;
    std::vector<PathState> s_bar;
    double dt;

    double operator()(const VectorXd& x) const {
        const int n = static_cast<int>(s_bar.size());
        const FlatModel d = discrete_flat(dt);
        const PathModel p = discretize_path(dt);
        Vec14 z = z0.values;
        Vec4 s = s0.values;
        double j = 0.0;
        for (int k = 0; k < n; ++k) {
            const Vec4 v = x.segment<4>(4 * k);
            const double u = x(4 * n + k);
            z = d.a * z + d.b * v;
            s = p.a * s + p.b * u;
            const Vec14 ref = reference_flat_state(path, s_bar[k]).values +
                              reference_jacobian(path, s_bar[k]) * (s - s_bar[k].values);
            const Vec4 vcmd = path.eval(s_bar[k].theta(), 1) * w.v_cmd;
            for (int i = 0; i < 4; ++i) {
                const double ep = z(FlatState::kPositionIndex[i]) - ref(FlatState::kPositionIndex[i]);
                const double ev = z(FlatState::kVelocityIndex[i]) - vcmd(i);
                j += 0.5 * (w.position(i) * ep * ep + w.velocity(i) * ev * ev + w.input(i) * v(i) * v(i));
            }
            j += 0.5 * w.path_input * u * u;
        }
        return j;
    }
};

TEST(Cost, HessianAndGradientMatchFiniteDifferences) {
    const BezierPath path = petal_path();
    const OcpWeights w;
    const int n = 10;
    const LiftedSystem l = lifted_for(n);
    const PathState s0(0.2, 0.18, 0.01, 0.0);
    std::mt19937 rng(4);
    std::normal_distribution<double> g(0.0, 0.3);
    FlatState z0 = reference_flat_state(path, s0);
    for (int i = 0; i < 14; ++i) z0.values(i) += g(rng);
    const std::vector<PathState> s_bar = cold_nominal(s0, 0.2, n, 0.1);
    const CostMatrices c = build_cost(l, w, z0, s0, path, s_bar);
    const LinearizedObjective obj{path, w, z0, s0, s_bar, 0.1};

    const int dim = 5 * n;
    const double h = 1e-2;
    const VectorXd x0 = VectorXd::Zero(dim);
    const double scale = c.h.cwiseAbs().maxCoeff();
    const double j0 = obj(x0);
    std::vector<double> ji(dim);
    for (int i = 0; i < dim; ++i) ji[i] = obj(x0 + h * VectorXd::Unit(dim, i));
    double worst = 0.0;
    for (int i = 0; i < dim; ++i) {
        for (int j = i; j < dim; ++j) {
            const double jij = obj(x0 + h * VectorXd::Unit(dim, i) + h * VectorXd::Unit(dim, j));
            const double fd = (jij - ji[i] - ji[j] + j0) / (h * h);
            worst = std::max(worst, std::abs(fd - c.h(i, j)));
        }
    }
    EXPECT_LT(worst / scale, 1e-6);
    EXPECT_LT((c.h - c.h.transpose()).cwiseAbs().maxCoeff(), 1e-12);

    double worst_grad = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double fd = (obj(x0 + h * VectorXd::Unit(dim, i)) - obj(x0 - h * VectorXd::Unit(dim, i))) / (2 * h);
        worst_grad = std::max(worst_grad, std::abs(fd - c.f(i)));
    }
    EXPECT_LT(worst_grad / std::max(1.0, c.f.cwiseAbs().maxCoeff()), 1e-6);
}

TEST(Constraints, RowLayout) {
    const int n = 7;
    const LiftedSystem l = lifted_for(n);
    std::vector<FlatState> z_bar(n);
    const ConstraintRows rows = build_constraints(l, ConstraintSpec{}, FlatState(), PathState(), z_bar);
    EXPECT_EQ(rows.a.rows(), kRowsPerStep * n);
    int jerk_rows = 0;
    for (int k = 0; k < n; ++k) {
        for (int r = kJerkUpperX; r <= kJerkLowerZ; ++r) {
            if (rows.a.row(kRowsPerStep * k + r).norm() > 0.0) ++jerk_rows;
        }
    }
    EXPECT_EQ(jerk_rows, 2 * 3 * n);
    for (Eigen::Index r = 0; r < rows.a.rows(); ++r) EXPECT_NEAR(rows.a.row(r).norm(), 1.0, 1e-12);
}

TEST(Constraints, HoverThrustRow) {
    const ConstraintSpec spec;
    const double dt = 0.1;
    const LiftedSystem l = lifted_for(1, dt);
    const FlatState hover = FlatState::from_blocks(Vec4(0, 0, 1, 0), Vec4::Zero());
    const std::vector<FlatState> z_bar{hover};
    const ConstraintRows rows = build_constraints(l, spec, hover, PathState(), z_bar);
    // Feasible at hover.
    EXPECT_LE(rows.a.row(kThrust).dot(VectorXd::Zero(5)), rows.b(kThrust));
    // Vertical snap u moves z'' by u dt^2 / 2; the row must bound z'' by (f^2 - g^2) / (2 g).
    const double coeff = rows.a(kThrust, 2);
    ASSERT_GT(coeff, 0.0);
    const double zdd_max = rows.b(kThrust) / coeff * dt * dt / 2.0;
    const double g = spec.gravity, f = spec.f_max;
    EXPECT_NEAR(zdd_max, (f * f - g * g) / (2.0 * g), 1e-9);
}

TEST(Constraints, ThrustRowIsFirstOrderExact) {
    const ConstraintSpec spec;
    const int n = 10;
    const LiftedSystem l = lifted_for(n);
    std::mt19937 rng(6);
    std::normal_distribution<double> g(0.0, 1.0);
    FlatState z0;
    for (int i = 0; i < 14; ++i) z0.values(i) = g(rng);
    VectorXd x_bar(5 * n), dir(5 * n);
    for (int i = 0; i < 5 * n; ++i) {
        x_bar(i) = g(rng);
        dir(i) = g(rng);
    }
    auto accel = [&](const VectorXd& x, int k) -> Vec3 {
        const VectorXd z = l.a_hat * z0.values + l.b_hat * x.head(4 * n);
        return Vec3(z(14 * k + 2), z(14 * k + 6), z(14 * k + 10));
    };
    std::vector<FlatState> z_bar;
    const VectorXd zb = l.a_hat * z0.values + l.b_hat * x_bar.head(4 * n);
    for (int k = 0; k < n; ++k) z_bar.emplace_back(zb.segment<14>(14 * k));
    const ConstraintRows rows = build_constraints(l, spec, z0, PathState(), z_bar);

    for (int k = 0; k < n; ++k) {
        auto exact = [&](const VectorXd& x) {
            Vec3 t = accel(x, k);
            t.z() += spec.gravity;
            return t.squaredNorm() - spec.f_max * spec.f_max;
        };
        const int r = kRowsPerStep * k + kThrust;
        // Recover the unnormalized row from its value at the linearization point.
        const double lin_at_bar = rows.a.row(r).dot(x_bar) - rows.b(r);
        const double scale = exact(x_bar) / lin_at_bar;
        const double eps = 1e-4;
        const double fd = (exact(x_bar + eps * dir) - exact(x_bar - eps * dir)) / (2 * eps);
        const double lin = scale * rows.a.row(r).dot(dir);
        EXPECT_LT(std::abs(fd - lin), 1e-6 * std::max(1.0, std::abs(fd))) << "step " << k;
    }
}

BezierPath test_line() { return BezierPath({Vec4(0, 0, 1, 0), Vec4(4, 2, 1.5, 0.3)}); }

TEST(SolveStep, LineEquilibrium) {
    const BezierPath line = test_line();
    OcpWeights w;
    w.v_cmd = 0.2;
    PathFollowingMpc mpc(line, w, ConstraintSpec{});
    const PathState s0(0.0, w.v_cmd);
    const ControlSolution sol = mpc.solve_step(reference_flat_state(line, s0), s0);
    EXPECT_LT(sol.v.front().values.norm(), 1e-6);
    EXPECT_LT(std::abs(sol.w.front()), 1e-6);
    EXPECT_TRUE(sol.active_set.empty());
}

TEST(SolveStep, StartFromRestMatchesClosedFormAndConverges) {
    const BezierPath line = test_line();
    OcpWeights w;
    w.v_cmd = 0.2;
    PathFollowingMpc mpc(line, w, ConstraintSpec{});
    const PathState s0(0.0, 0.0);
    const FlatState z0 = reference_flat_state(line, s0);
    const ControlSolution sol = mpc.solve_step(z0, s0);
    const QpProblem qp = mpc.assemble(z0, s0, mpc.nominal(z0, s0, nullptr));
    if (sol.active_set.empty()) {
        const VectorXd x = -qp.h.llt().solve(qp.f);
        EXPECT_LT((x - sol.decision).cwiseAbs().maxCoeff(), 1e-6);
    }
    const Vec4 vcmd = line.eval(0.0, 1) * w.v_cmd;
    // No terminal cost, so the last step may overshoot the commanded speed.
    double prev = (z0.velocity() - vcmd).norm();
    for (int k = 0; k + 1 < mpc.horizon().steps; ++k) {
        const double err = (sol.z_predicted[k].velocity() - vcmd).norm();
        EXPECT_LT(err, prev);
        prev = err;
    }
}

TEST(SolveStep, PredictionsAreConsistent) {
    PathFollowingMpc mpc(petal_path(), OcpWeights{}, ConstraintSpec{});
    const PathState s0(0.05, 0.1);
    FlatState z0 = reference_flat_state(mpc.path(), s0);
    z0.values(0) += 0.3;
    const ControlSolution sol = mpc.solve_step(z0, s0);
    const FlatModel& d = mpc.flat_discrete();
    Vec14 z = z0.values;
    for (int k = 0; k < mpc.horizon().steps; ++k) {
        z = d.a * z + d.b * sol.v[k].values;
        EXPECT_LT((z - sol.z_predicted[k].values).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(SolveStep, PetalFeasibilityAndAudit) {
    PathFollowingMpc mpc(petal_path(), OcpWeights{}, ConstraintSpec{});
    std::mt19937 rng(10);
    std::normal_distribution<double> g(0.0, 0.5);
    std::uniform_real_distribution<double> theta(0.0, 0.9);
    for (int trial = 0; trial < 20; ++trial) {
        const PathState s0(theta(rng), 0.2);
        FlatState z0 = reference_flat_state(mpc.path(), s0);
        for (int i : {0, 4, 8}) z0.values(i) += g(rng);
        const ControlSolution sol = mpc.solve_step(z0, s0);
        const QpProblem qp = mpc.assemble(z0, s0, mpc.nominal(z0, s0, nullptr));
        EXPECT_LE((qp.a_in * sol.decision - qp.b_in).maxCoeff(), 1e-8);
        const ConstraintAudit audit = audit_constraints(sol.z_predicted, mpc.constraints());
        EXPECT_LE(audit.max_jerk_violation, 1e-8);
        EXPECT_LE(audit.max_thrust_ratio, 1.05);
    }
}

TEST(SolveStep, LargeOffsetActivatesConstraints) {
    PathFollowingMpc mpc(petal_path(), OcpWeights{}, ConstraintSpec{});
    const PathState s0(0.0, 0.0);
    FlatState z0 = reference_flat_state(mpc.path(), s0);
    z0.values(0) -= 1.5;
    const ControlSolution sol = mpc.solve_step(z0, s0);
    EXPECT_FALSE(sol.active_set.empty());
    const ConstraintAudit audit = audit_constraints(sol.z_predicted, mpc.constraints());
    EXPECT_LE(audit.max_jerk_violation, 1e-8);
    for (const PathState& s : sol.s_predicted) EXPECT_GE(s.theta_dot(), -1e-8);
}

TEST(SolveStep, GaussNewtonIsExactOnLines) {
    const BezierPath line = test_line();
    OcpWeights w;
    w.v_cmd = 0.2;
    PathFollowingMpc mpc(line, w, ConstraintSpec{});
    const PathState s0(0.1, 0.05);
    FlatState z0 = reference_flat_state(line, s0);
    z0.values(4) += 0.05;
    const ControlSolution first = mpc.solve_step(z0, s0);
    const NominalTrajectory relinearized = mpc.rollout(z0, s0, first.decision);
    const ControlSolution second = mpc.solve_with_nominal(z0, s0, relinearized);
    EXPECT_LT((first.decision - second.decision).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SolveStep, SolutionDoesNotIncreaseCostOverWarmStart) {
    PathFollowingMpc mpc(petal_path(), OcpWeights{}, ConstraintSpec{});
    PathState s0(0.1, 0.2);
    FlatState z0 = reference_flat_state(mpc.path(), s0);
    z0.values(8) += 0.1;
    const ControlSolution prev = mpc.solve_step(z0, s0);
    s0 = prev.s_predicted.front();
    z0 = prev.z_predicted.front();
    const NominalTrajectory nom = mpc.nominal(z0, s0, &prev);
    const QpProblem qp = mpc.assemble(z0, s0, nom);
    const VectorXd warm = mpc.shift(prev.decision);
    const ControlSolution next = mpc.solve_step(z0, s0, &prev);
    if ((qp.a_in * warm - qp.b_in).maxCoeff() <= 1e-9) {
        EXPECT_LE(qp.objective(next.decision), qp.objective(warm) + 1e-9);
    }
    EXPECT_LE(qp.objective(next.decision), qp.objective(VectorXd::Zero(mpc.decision_size())) + 1e-9);
}

TEST(SolveStep, RejectsThetaOutsideDomain) {
    PathFollowingMpc mpc(petal_path(), OcpWeights{}, ConstraintSpec{});
    EXPECT_THROW(mpc.solve_step(FlatState(), PathState(1.5, 0.0)), DomainError);
}

TEST(Config, ValidationErrors) {
    OcpWeights w;
    w.position(0) = -1.0;
    EXPECT_THROW(w.validate(), ConfigError);
    ConstraintSpec c;
    c.f_max = 5.0;
    EXPECT_THROW(c.validate(), ConfigError);
    HorizonSpec h;
    h.steps = 0;
    EXPECT_THROW(h.validate(), ConfigError);
}

TEST(Weights, ExpandedDiagonals) {
    OcpWeights w;
    w.position = Vec4(1, 2, 3, 4);
    w.velocity = Vec4(5, 6, 7, 8);
    const Vec14 q = w.expanded_position(), s = w.expanded_velocity();
    EXPECT_EQ(q(0), 1);
    EXPECT_EQ(q(4), 2);
    EXPECT_EQ(q(8), 3);
    EXPECT_EQ(q(12), 4);
    EXPECT_EQ(s(1), 5);
    EXPECT_EQ(s(13), 8);
    EXPECT_EQ(q.sum(), 10);
    EXPECT_EQ(s.sum(), 26);
}

}  // namespace
}  // namespace fapp
