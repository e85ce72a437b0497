#pragma once

// Bezier paths in flat-output space and the path-attached virtual vehicle.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "fapp/errors.hpp"
#include "fapp/flat_quadrotor.hpp"

namespace fapp {

inline constexpr int kPathStateDim = 4;
/// Tolerance on theta outside [0, 1] before evaluation is rejected.
inline constexpr double kThetaTolerance = 1e-9;

using PathModel = LinearModel<kPathStateDim, 1>;

/// (theta, theta', theta'', theta''') of the virtual vehicle.
struct PathState {
    Vec4 values = Vec4::Zero();

    PathState() = default;
    explicit PathState(const Vec4& v) : values(v) {}
    PathState(double theta, double theta_dot, double theta_ddot = 0.0, double theta_dddot = 0.0)
        : values(theta, theta_dot, theta_ddot, theta_dddot) {}

    double theta() const { return values(0); }
    double theta_dot() const { return values(1); }
    double theta_ddot() const { return values(2); }
    double theta_dddot() const { return values(3); }

    /// Copy with theta restricted to [0, 1] for curve evaluation.
    PathState clamped() const {
        PathState s = *this;
        s.values(0) = std::clamp(s.values(0), 0.0, 1.0);
        return s;
    }
};

/// Single-input integrator chain s' = A_p s + B_p w.
inline PathModel path_dynamics_matrices() {
    PathModel m{Mat4::Zero(), Eigen::Matrix<double, 4, 1>::Zero()};
    for (int i = 0; i + 1 < kPathStateDim; ++i) m.a(i, i + 1) = 1.0;
    m.b(kPathStateDim - 1, 0) = 1.0;
    return m;
}

inline PathModel discretize_path(double dt) {
    const PathModel c = path_dynamics_matrices();
    return discretize_chain<4, 1>(c.a, c.b, dt);
}

/// Degree-q Bezier curve with control points in (x, y, z, psi).
class BezierPath {
public:
    static constexpr int kMaxDerivative = 4;
    static constexpr int kRegularitySamples = 201;
    static constexpr double kRegularityThreshold = 1e-6;

    explicit BezierPath(std::vector<Vec4> control_points) : points_(std::move(control_points)) {
        if (points_.size() < 2) throw DegeneratePath("a Bezier path needs at least two control points");
        for (const Vec4& p : points_) {
            if (!p.allFinite()) throw DegeneratePath("control points must be finite");
        }
        // hodographs_[d] holds the control points of the d-th derivative, already
        // scaled by q!/(q-d)!.
        hodographs_.push_back(points_);
        for (int d = 1; d <= kMaxDerivative && d <= degree(); ++d) {
            const std::vector<Vec4>& prev = hodographs_.back();
            const double scale = static_cast<double>(degree() - d + 1);
            std::vector<Vec4> next;
            next.reserve(prev.size() - 1);
            for (std::size_t j = 0; j + 1 < prev.size(); ++j) next.push_back(scale * (prev[j + 1] - prev[j]));
            hodographs_.push_back(std::move(next));
        }
        for (int i = 0; i < kRegularitySamples; ++i) {
            const double theta = static_cast<double>(i) / (kRegularitySamples - 1);
            if (eval(theta, 1).norm() < kRegularityThreshold) {
                throw DegeneratePath("path hodograph vanishes; parametrization is not regular");
            }
        }
    }

    int degree() const { return static_cast<int>(points_.size()) - 1; }
    const std::vector<Vec4>& control_points() const { return points_; }

    /// d-th derivative of the curve with respect to theta.
    Vec4 eval(double theta, int derivative = 0) const {
        if (derivative < 0 || derivative > kMaxDerivative) throw DomainError("derivative order must be in 0..4");
        if (!(theta >= -kThetaTolerance && theta <= 1.0 + kThetaTolerance)) {
            throw DomainError("path parameter outside [0, 1]");
        }
        if (derivative > degree()) return Vec4::Zero();
        theta = std::clamp(theta, 0.0, 1.0);
        // de Casteljau on the hodograph control points.
        std::vector<Vec4> work = hodographs_[derivative];
        for (std::size_t level = work.size() - 1; level > 0; --level) {
            for (std::size_t j = 0; j < level; ++j) work[j] = (1.0 - theta) * work[j] + theta * work[j + 1];
        }
        return work.front();
    }

private:
    std::vector<Vec4> points_;
    std::vector<std::vector<Vec4>> hodographs_;
};

/// Reference flat state h(s) of the virtual vehicle (chain rule in time).
inline FlatState reference_flat_state(const BezierPath& path, const PathState& s) {
    const double td = s.theta_dot(), tdd = s.theta_ddot(), tddd = s.theta_dddot();
    const Vec4 p0 = path.eval(s.theta(), 0);
    const Vec4 p1 = path.eval(s.theta(), 1);
    const Vec4 p2 = path.eval(s.theta(), 2);
    const Vec4 p3 = path.eval(s.theta(), 3);

    const Vec4 velocity = p1 * td;
    const Vec4 acceleration = p2 * td * td + p1 * tdd;
    const Vec4 jerk = p3 * td * td * td + 3.0 * p2 * td * tdd + p1 * tddd;
    return FlatState::from_blocks(p0, velocity, acceleration.head<3>(), jerk.head<3>());
}

/// Exact Jacobian dh/ds (14 x 4).
inline Mat14x4 reference_jacobian(const BezierPath& path, const PathState& s) {
    const double td = s.theta_dot(), tdd = s.theta_ddot(), tddd = s.theta_dddot();
    const Vec4 p1 = path.eval(s.theta(), 1);
    const Vec4 p2 = path.eval(s.theta(), 2);
    const Vec4 p3 = path.eval(s.theta(), 3);
    const Vec4 p4 = path.eval(s.theta(), 4);

    Mat14x4 jac = Mat14x4::Zero();
    for (int axis = 0; axis < 3; ++axis) {
        const int o = kChainOffsets[axis];
        jac(o, 0) = p1(axis);

        jac(o + 1, 0) = p2(axis) * td;
        jac(o + 1, 1) = p1(axis);

        jac(o + 2, 0) = p3(axis) * td * td + p2(axis) * tdd;
        jac(o + 2, 1) = 2.0 * p2(axis) * td;
        jac(o + 2, 2) = p1(axis);

        jac(o + 3, 0) = p4(axis) * td * td * td + 3.0 * p3(axis) * td * tdd + p2(axis) * tddd;
        jac(o + 3, 1) = 3.0 * p3(axis) * td * td + 3.0 * p2(axis) * tdd;
        jac(o + 3, 2) = 3.0 * p2(axis) * td;
        jac(o + 3, 3) = p1(axis);
    }
    jac(12, 0) = p1(3);
    jac(13, 0) = p2(3) * td;
    jac(13, 1) = p1(3);
    return jac;
}

/// z_ref = pi * s + pi0 for a straight line.
struct LineCoefficients {
    Mat14x4 pi = Mat14x4::Zero();
    Vec14 pi0 = Vec14::Zero();

    FlatState apply(const PathState& s) const { return FlatState(pi * s.values + pi0); }
};

inline LineCoefficients line_coefficients(const Vec4& p0, const Vec4& p1) {
    const Vec4 d = p1 - p0;
    if (d.norm() == 0.0) throw DegeneratePath("line endpoints coincide");
    LineCoefficients c;
    for (int axis = 0; axis < 3; ++axis) {
        const int o = kChainOffsets[axis];
        for (int k = 0; k < 4; ++k) c.pi(o + k, k) = d(axis);
        c.pi0(o) = p0(axis);
    }
    c.pi(12, 0) = d(3);
    c.pi(13, 1) = d(3);
    c.pi0(12) = p0(3);
    return c;
}

/// Dense polyline used for cross-track distance.
class SampledCurve {
public:
    SampledCurve(const BezierPath& path, int samples = 2001) {
        points_.reserve(samples);
        for (int i = 0; i < samples; ++i) {
            const double theta = static_cast<double>(i) / (samples - 1);
            points_.push_back(path.eval(theta).head<3>());
        }
    }

    /// Minimum distance to the polyline through the samples (exact on lines).
    double distance(const Vec3& p) const { return std::sqrt(closest(p).squared_distance); }

    /// Curve parameter of the closest polyline point.
    double closest_theta(const Vec3& p) const { return closest(p).theta; }

private:
    struct Closest {
        double squared_distance;
        double theta;
    };

    Closest closest(const Vec3& p) const {
        Closest best{(p - points_.front()).squaredNorm(), 0.0};
        const double spacing = 1.0 / static_cast<double>(points_.size() - 1);
        for (std::size_t i = 0; i + 1 < points_.size(); ++i) {
            const Vec3 seg = points_[i + 1] - points_[i];
            const double len2 = seg.squaredNorm();
            const double t = len2 > 0.0 ? std::clamp((p - points_[i]).dot(seg) / len2, 0.0, 1.0) : 0.0;
            const double d = (p - points_[i] - t * seg).squaredNorm();
            if (d < best.squared_distance) best = {d, (static_cast<double>(i) + t) * spacing};
        }
        return best;
    }

    std::vector<Vec3> points_;
};

/// Cubic petal path used in the experiments.
inline BezierPath petal_path() {
    return BezierPath({Vec4(0.0, 0.0, 1.0, 0.0), Vec4(3.0, 2.0, 0.0, 0.0), Vec4(3.0, -2.0, 0.0, 0.0),
                       Vec4(0.0, 0.0, 1.0, 0.0)});
}

}  // namespace fapp
