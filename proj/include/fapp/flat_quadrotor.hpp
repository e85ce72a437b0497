#pragma once

// Differential-flatness structure of the quadrotor with its on-board inner loop.
//
// Conventions used throughout the library: inertial z points up, gravity is
// -g * e3, thrust acts along +body-z, and attitudes are Z-Y-X (yaw, pitch, roll)
// Euler angles of the body-to-inertial rotation R = Rz(yaw) Ry(pitch) Rx(roll).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "fapp/errors.hpp"

namespace fapp {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr int kFlatStateDim = 14;
inline constexpr int kFlatInputDim = 4;
/// Chain lengths (rho_i) of x, y, z and psi.
inline constexpr std::array<int, 4> kChainLengths{4, 4, 4, 2};
inline constexpr std::array<int, 4> kChainOffsets{0, 4, 8, 12};

using Vec14 = Eigen::Matrix<double, kFlatStateDim, 1>;
using Mat14 = Eigen::Matrix<double, kFlatStateDim, kFlatStateDim>;
using Mat14x4 = Eigen::Matrix<double, kFlatStateDim, kFlatInputDim>;

/// Specific thrust below which the body z-axis is undefined [m/s^2].
inline constexpr double kThrustEpsilon = 0.1;

/// Maps an angle to (-pi, pi].
inline double normalize_angle(double angle) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double wrapped = std::fmod(angle + std::numbers::pi, two_pi);
    if (wrapped < 0.0) wrapped += two_pi;
    wrapped -= std::numbers::pi;
    return wrapped == -std::numbers::pi ? std::numbers::pi : wrapped;
}

/// Continues an unwrapped angle sequence with a new wrapped sample.
inline double unwrap_angle(double previous_unwrapped, double wrapped) {
    return previous_unwrapped + normalize_angle(wrapped - previous_unwrapped);
}

struct FlatOutput {
    double x = 0.0;    ///< [m]
    double y = 0.0;    ///< [m]
    double z = 0.0;    ///< [m]
    double psi = 0.0;  ///< unwrapped yaw [rad]

    Vec4 vector() const { return {x, y, z, psi}; }
};

/// Brunovsky state (x, x', x'', x''', y, ..., z, ..., psi, psi').
struct FlatState {
    Vec14 values = Vec14::Zero();

    static constexpr std::array<int, 4> kPositionIndex{0, 4, 8, 12};
    static constexpr std::array<int, 4> kVelocityIndex{1, 5, 9, 13};
    static constexpr std::array<int, 3> kAccelerationIndex{2, 6, 10};
    static constexpr std::array<int, 3> kJerkIndex{3, 7, 11};

    FlatState() = default;
    explicit FlatState(const Vec14& v) : values(v) {}

    static FlatState from_blocks(const Vec4& position, const Vec4& velocity,
                                 const Vec3& acceleration = Vec3::Zero(),
                                 const Vec3& jerk = Vec3::Zero()) {
        FlatState z;
        for (int i = 0; i < 4; ++i) {
            z.values(kPositionIndex[i]) = position(i);
            z.values(kVelocityIndex[i]) = velocity(i);
        }
        for (int i = 0; i < 3; ++i) {
            z.values(kAccelerationIndex[i]) = acceleration(i);
            z.values(kJerkIndex[i]) = jerk(i);
        }
        return z;
    }

    /// (x, y, z, psi)
    Vec4 position() const { return gather<4>(kPositionIndex); }
    /// (x', y', z', psi')
    Vec4 velocity() const { return gather<4>(kVelocityIndex); }
    Vec3 acceleration() const { return gather<3>(kAccelerationIndex); }
    Vec3 jerk() const { return gather<3>(kJerkIndex); }

    Vec3 translation() const { return position().head<3>(); }
    Vec3 translational_velocity() const { return velocity().head<3>(); }
    double psi() const { return values(12); }
    double psi_rate() const { return values(13); }

    double operator()(int i) const { return values(i); }
    double& operator()(int i) { return values(i); }

private:
    template <int N>
    Eigen::Matrix<double, N, 1> gather(const std::array<int, N>& index) const {
        Eigen::Matrix<double, N, 1> out;
        for (int i = 0; i < N; ++i) out(i) = values(index[i]);
        return out;
    }
};

/// (x'''', y'''', z'''', psi'')
struct FlatInput {
    Vec4 values = Vec4::Zero();

    FlatInput() = default;
    explicit FlatInput(const Vec4& v) : values(v) {}

    Vec3 snap() const { return values.head<3>(); }
    double psi_acceleration() const { return values(3); }
};

struct QuadrotorState {
    Vec3 position = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
    /// Body-to-inertial rotation.
    Mat3 rotation = Mat3::Identity();
    /// (p, q, r) in the body frame [rad/s].
    Vec3 body_rates = Vec3::Zero();
};

/// Setpoints accepted by the on-board inner loop.
struct CommandInput {
    double zdot_cmd = 0.0;   ///< [m/s]
    double phi_cmd = 0.0;    ///< [rad]
    double theta_cmd = 0.0;  ///< [rad]
    double r_cmd = 0.0;      ///< [rad/s]
};

struct QuadrotorParams {
    double mass = 0.48;
    double gravity = 9.81;
    Vec3 inertia{3.4e-3, 3.4e-3, 6.0e-3};
    /// Roll/pitch angle and yaw-rate time constant of the inner loop [s].
    double tau = 0.15;
    /// Vertical velocity gain [1/s].
    double k_z = 3.0;
    /// Body-rate loop bandwidth for roll and pitch [1/s].
    double k_rate = 50.0;
    /// Thrust response time constant [s].
    double thrust_tau = 0.02;
    /// Thrust saturation expressed as specific thrust [m/s^2].
    double max_thrust_accel = 20.0;
    /// On-board clamp applied to roll/pitch setpoints [rad].
    double max_tilt_cmd = 1.2;

    void validate() const {
        auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
        if (!positive(mass) || !positive(gravity) || !positive(tau) || !positive(k_z) ||
            !positive(k_rate) || !positive(thrust_tau) || !positive(max_thrust_accel) ||
            !positive(max_tilt_cmd) || !positive(inertia.x()) || !positive(inertia.y()) ||
            !positive(inertia.z())) {
            throw ConfigError("quadrotor parameters must be strictly positive");
        }
        if (max_tilt_cmd >= std::numbers::pi / 2) {
            throw ConfigError("max_tilt_cmd must be below pi/2");
        }
    }
};

// ---------------------------------------------------------------------------
// Linear flat model

template <int N, int M>
struct LinearModel {
    Eigen::Matrix<double, N, N> a;
    Eigen::Matrix<double, N, M> b;
};

using FlatModel = LinearModel<kFlatStateDim, kFlatInputDim>;

/// Continuous-time Brunovsky model z' = A z + B v.
inline FlatModel flat_model_matrices() {
    FlatModel model{Mat14::Zero(), Mat14x4::Zero()};
    for (int chain = 0; chain < 4; ++chain) {
        const int offset = kChainOffsets[chain];
        const int length = kChainLengths[chain];
        for (int i = 0; i + 1 < length; ++i) model.a(offset + i, offset + i + 1) = 1.0;
        model.b(offset + length - 1, chain) = 1.0;
    }
    return model;
}

/// Exact zero-order-hold discretization of an integrator-chain model.
///
/// The augmented matrix [[A B]; [0 0]] * dt is nilpotent for chains, so its
/// exponential series terminates; non-nilpotent inputs are rejected.
template <int N, int M>
LinearModel<N, M> discretize_chain(const Eigen::Matrix<double, N, N>& a,
                                   const Eigen::Matrix<double, N, M>& b, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("discretization step must be positive");
    constexpr int K = N + M;
    using Aug = Eigen::Matrix<double, K, K>;
    Aug aug = Aug::Zero();
    aug.template topLeftCorner<N, N>() = a * dt;
    aug.template topRightCorner<N, M>() = b * dt;

    Aug exp = Aug::Identity();
    Aug term = Aug::Identity();
    bool terminated = false;
    for (int k = 1; k <= K + 1; ++k) {
        term = (term * aug) / static_cast<double>(k);
        if (term.isZero(0.0)) {
            terminated = true;
            break;
        }
        exp += term;
    }
    if (!terminated) throw DomainError("discretize_chain requires a nilpotent (integrator chain) model");
    return {exp.template topLeftCorner<N, N>(), exp.template topRightCorner<N, M>()};
}

// ---------------------------------------------------------------------------
// Rotations

inline Mat3 rotation_from_euler(double roll, double pitch, double yaw) {
    return (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
            Eigen::AngleAxisd(roll, Vec3::UnitX()))
        .toRotationMatrix();
}

/// (roll, pitch, yaw) with yaw in (-pi, pi].
inline Vec3 euler_from_rotation(const Mat3& r) {
    const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
    const double roll = std::atan2(r(2, 1), r(2, 2));
    const double yaw = std::atan2(r(1, 0), r(0, 0));
    return {roll, pitch, normalize_angle(yaw)};
}

inline Mat3 skew(const Vec3& w) {
    Mat3 s;
    s << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Flatness maps

/// Everything the flat state and flat input determine about the vehicle.
struct FlatKinematics {
    Mat3 rotation = Mat3::Identity();
    Vec3 euler = Vec3::Zero();
    Vec3 euler_rates = Vec3::Zero();
    Vec3 body_rates = Vec3::Zero();
    Vec3 body_acceleration = Vec3::Zero();
    double thrust = 0.0;       ///< [N]
    double thrust_rate = 0.0;  ///< [N/s]
};

inline FlatKinematics flat_kinematics(const FlatState& z, const FlatInput& v,
                                      const QuadrotorParams& params) {
    const Vec3 e3 = Vec3::UnitZ();
    const Vec3 t = z.acceleration() + params.gravity * e3;
    const double n = t.norm();
    if (!(n > kThrustEpsilon)) throw DegenerateThrust("specific thrust below threshold (free fall)");
    const Vec3 zb = t / n;
    const double yaw = z.psi();

    // Roll and pitch such that Rz(yaw) Ry(pitch) Rx(roll) e3 = zb.
    const Vec3 w = Eigen::AngleAxisd(-yaw, e3) * zb;
    const double roll = -std::asin(std::clamp(w.y(), -1.0, 1.0));
    const double pitch = std::atan2(w.x(), w.z());
    const double cphi = std::cos(roll), sphi = std::sin(roll);
    const double cth = std::cos(pitch), sth = std::sin(pitch);
    if (cphi * cth <= 1e-9) throw TiltLimit("flat state requires tilt of pi/2 or more");

    FlatKinematics k;
    k.rotation = rotation_from_euler(roll, pitch, yaw);
    k.euler = {roll, pitch, yaw};

    const Vec3 jerk = z.jerk();
    const Vec3 snap = v.snap();
    const double n_dot = zb.dot(jerk);
    const Vec3 zb_dot = (jerk - n_dot * zb) / n;

    const Vec3 xb = k.rotation.col(0);
    const Vec3 yb = k.rotation.col(1);
    const double q = xb.dot(zb_dot);
    const double p = -yb.dot(zb_dot);
    const double psi_dot = z.psi_rate();
    const double r = (psi_dot * cth - q * sphi) / cphi;
    k.body_rates = {p, q, r};

    const double phi_dot = p + (q * sphi + r * cphi) * sth / cth;
    const double theta_dot = q * cphi - r * sphi;
    k.euler_rates = {phi_dot, theta_dot, psi_dot};

    const double n_ddot = zb_dot.dot(jerk) + zb.dot(snap);
    const Vec3 zb_ddot = (snap - n_ddot * zb - 2.0 * n_dot * zb_dot) / n;
    const Vec3 omega = k.body_rates;
    const Vec3 proj = k.rotation.transpose() * zb_ddot - omega.cross(omega.cross(e3));
    const double q_dot = proj.x();
    const double p_dot = -proj.y();
    const double psi_ddot = v.psi_acceleration();
    const double r_dot = (psi_ddot * cth - q_dot * sphi - q * cphi * phi_dot + r * sphi * phi_dot -
                          psi_dot * sth * theta_dot) /
                         cphi;
    k.body_acceleration = {p_dot, q_dot, r_dot};

    k.thrust = params.mass * n;
    k.thrust_rate = params.mass * n_dot;
    return k;
}

/// Physical state of the vehicle flying the given flat state.
inline QuadrotorState phi_state(const FlatState& z, const FlatInput& v, const QuadrotorParams& params) {
    const FlatKinematics k = flat_kinematics(z, v, params);
    QuadrotorState x;
    x.position = z.translation();
    x.velocity = z.translational_velocity();
    x.rotation = k.rotation;
    x.body_rates = k.body_rates;
    return x;
}

/// Nominal inner-loop command for a desired flat state and flat input.
///
/// Inverts the rigid body and each inner-loop lag: the desired body
/// acceleration fixes the rate setpoint, which fixes the Euler-rate setpoint
/// and hence the angle command; the thrust rate fixes the thrust setpoint and
/// hence the vertical velocity command.
inline CommandInput psi_inverse(const FlatState& z_d, const FlatInput& v_d, const QuadrotorParams& params) {
    const FlatKinematics k = flat_kinematics(z_d, v_d, params);
    const double roll = k.euler.x(), pitch = k.euler.y();
    const double cphi = std::cos(roll), sphi = std::sin(roll);
    const double tth = std::tan(pitch);

    const double p_c = k.body_rates.x() + k.body_acceleration.x() / params.k_rate;
    const double q_c = k.body_rates.y() + k.body_acceleration.y() / params.k_rate;
    const double r = k.body_rates.z();

    const double phi_rate_c = p_c + (q_c * sphi + r * cphi) * tth;
    const double theta_rate_c = q_c * cphi - r * sphi;

    CommandInput u;
    u.phi_cmd = roll + params.tau * phi_rate_c;
    u.theta_cmd = pitch + params.tau * theta_rate_c;
    u.r_cmd = r + params.tau * k.body_acceleration.z();

    const double thrust_setpoint = k.thrust + params.thrust_tau * k.thrust_rate;
    u.zdot_cmd = z_d(9) + (thrust_setpoint * k.rotation(2, 2) / params.mass - params.gravity) / params.k_z;

    constexpr double half_pi = std::numbers::pi / 2;
    if (!(std::abs(u.phi_cmd) < half_pi) || !(std::abs(u.theta_cmd) < half_pi)) {
        throw TiltLimit("nominal command requires tilt of pi/2 or more");
    }
    return u;
}

}  // namespace fapp
