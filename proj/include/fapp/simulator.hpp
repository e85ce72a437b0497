#pragma once

// Nonlinear quadrotor simulation: rigid body, on-board inner loop, wind, and
// the model-based flat-state estimator.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "fapp/errors.hpp"
#include "fapp/flat_quadrotor.hpp"

namespace fapp {

inline constexpr double kInnerLoopRate = 200.0;
inline constexpr double kInnerLoopDt = 1.0 / kInnerLoopRate;

enum class WindMode { None, ConstantForce, GustPulse };

/// External force on the translational dynamics.
///
/// ConstantForce applies `force` on [start, start + duration), or from `start`
/// onwards when duration <= 0. GustPulse applies force * sin^2 over the window.
struct WindModel {
    WindMode mode = WindMode::None;
    Vec3 force = Vec3::Zero();  ///< [N]
    double start = 0.0;         ///< [s]
    double duration = 0.0;      ///< [s]

    void validate() const {
        if (!force.allFinite() || !std::isfinite(start) || !std::isfinite(duration)) {
            throw ConfigError("wind parameters must be finite");
        }
        if (mode == WindMode::GustPulse && !(duration > 0.0)) {
            throw ConfigError("gust pulse needs a positive duration");
        }
    }

    bool active(double t) const {
        if (mode == WindMode::None || t < start) return false;
        return duration <= 0.0 ? mode == WindMode::ConstantForce : t < start + duration;
    }

    Vec3 force_at(double t) const {
        if (!active(t)) return Vec3::Zero();
        if (mode == WindMode::ConstantForce) return force;
        const double s = std::sin(std::numbers::pi * (t - start) / duration);
        return force * s * s;
    }
};

struct SimState {
    QuadrotorState quad;
    double thrust = 0.0;       ///< current thrust T [N], T >= 0
    double thrust_rate = 0.0;  ///< dT/dt averaged over the last inner step [N/s]
    Vec3 torques = Vec3::Zero();
    double time = 0.0;
};

inline SimState hover_state(const Vec3& position, double yaw, const QuadrotorParams& params) {
    SimState s;
    s.quad.position = position;
    s.quad.rotation = rotation_from_euler(0.0, 0.0, yaw);
    s.thrust = params.mass * params.gravity;
    return s;
}

/// Simulator state that exactly realizes a flat state (including thrust and its rate).
inline SimState sim_state_from_flat(const FlatState& z, const FlatInput& v, const QuadrotorParams& params,
                                    double time = 0.0) {
    const FlatKinematics k = flat_kinematics(z, v, params);
    SimState s;
    s.quad.position = z.translation();
    s.quad.velocity = z.translational_velocity();
    s.quad.rotation = k.rotation;
    s.quad.body_rates = k.body_rates;
    s.thrust = k.thrust;
    s.thrust_rate = k.thrust_rate;
    s.time = time;
    return s;
}

namespace detail {

struct RigidBody {
    Vec3 position;
    Vec3 velocity;
    Mat3 rotation;
    Vec3 rates;
    double thrust;
};

struct RigidBodyRate {
    Vec3 position;
    Vec3 velocity;
    Mat3 rotation;
    Vec3 rates;
    double thrust;
};

inline RigidBody advance(const RigidBody& x, const RigidBodyRate& d, double h) {
    return {x.position + h * d.position, x.velocity + h * d.velocity, x.rotation + h * d.rotation,
            x.rates + h * d.rates, x.thrust + h * d.thrust};
}

inline Mat3 orthonormalize(const Mat3& r) {
    Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 out = svd.matrixU() * svd.matrixV().transpose();
    if (out.determinant() < 0.0) {
        Mat3 u = svd.matrixU();
        u.col(2) *= -1.0;
        out = u * svd.matrixV().transpose();
    }
    return out;
}

template <typename Dynamics>
RigidBody rk4(const RigidBody& x, double t, double dt, Dynamics&& f) {
    const RigidBodyRate k1 = f(t, x);
    const RigidBodyRate k2 = f(t + 0.5 * dt, advance(x, k1, 0.5 * dt));
    const RigidBodyRate k3 = f(t + 0.5 * dt, advance(x, k2, 0.5 * dt));
    const RigidBodyRate k4 = f(t + dt, advance(x, k3, dt));
    RigidBody out = x;
    out.position += dt / 6.0 * (k1.position + 2.0 * k2.position + 2.0 * k3.position + k4.position);
    out.velocity += dt / 6.0 * (k1.velocity + 2.0 * k2.velocity + 2.0 * k3.velocity + k4.velocity);
    out.rotation += dt / 6.0 * (k1.rotation + 2.0 * k2.rotation + 2.0 * k3.rotation + k4.rotation);
    out.rates += dt / 6.0 * (k1.rates + 2.0 * k2.rates + 2.0 * k3.rates + k4.rates);
    out.thrust += dt / 6.0 * (k1.thrust + 2.0 * k2.thrust + 2.0 * k3.thrust + k4.thrust);
    return out;
}

inline RigidBodyRate rigid_body_rate(const RigidBody& x, const Vec3& torques, double thrust_rate,
                                     const Vec3& wind_force, const QuadrotorParams& params) {
    const Vec3 inertia = params.inertia;
    const Vec3 momentum = inertia.cwiseProduct(x.rates);
    RigidBodyRate d;
    d.position = x.velocity;
    d.velocity = -params.gravity * Vec3::UnitZ() + (x.thrust / params.mass) * x.rotation.col(2) +
                 wind_force / params.mass;
    d.rotation = x.rotation * skew(x.rates);
    d.rates = (torques - x.rates.cross(momentum)).cwiseQuotient(inertia);
    d.thrust = thrust_rate;
    return d;
}

inline void check_finite(const SimState& s) {
    const bool ok = s.quad.position.allFinite() && s.quad.velocity.allFinite() &&
                    s.quad.rotation.allFinite() && s.quad.body_rates.allFinite() && std::isfinite(s.thrust) &&
                    std::isfinite(s.thrust_rate) && s.torques.allFinite();
    if (!ok) throw NonFiniteState("simulator state became non-finite");
}

inline RigidBody to_rigid_body(const SimState& s) {
    return {s.quad.position, s.quad.velocity, s.quad.rotation, s.quad.body_rates, s.thrust};
}

}  // namespace detail

/// Output of the on-board controller for the current state.
struct InnerLoopOutput {
    double thrust_setpoint = 0.0;        ///< [N]
    Vec3 torques = Vec3::Zero();         ///< [N m]
    Vec3 body_acceleration = Vec3::Zero();  ///< commanded (p', q', r')
};

/// Inner-loop law: roll/pitch follow first-order lags of time constant tau via
/// a body-rate loop, yaw rate lags r_cmd with tau, thrust setpoint holds z'.
inline InnerLoopOutput inner_loop(const QuadrotorState& x, const CommandInput& cmd,
                                  const QuadrotorParams& params) {
    const Vec3 euler = euler_from_rotation(x.rotation);
    const double roll = euler.x(), pitch = euler.y();
    const double cphi = std::cos(roll), sphi = std::sin(roll);
    const double tth = std::tan(pitch);
    const double p = x.body_rates.x(), q = x.body_rates.y(), r = x.body_rates.z();

    const double phi_cmd = std::clamp(cmd.phi_cmd, -params.max_tilt_cmd, params.max_tilt_cmd);
    const double theta_cmd = std::clamp(cmd.theta_cmd, -params.max_tilt_cmd, params.max_tilt_cmd);
    const double phi_rate_c = (phi_cmd - roll) / params.tau;
    const double theta_rate_c = (theta_cmd - pitch) / params.tau;

    // Body-rate setpoint realizing the Euler-rate setpoint at the current yaw rate.
    const double q_c = (theta_rate_c + r * sphi) / cphi;
    const double p_c = phi_rate_c - (q_c * sphi + r * cphi) * tth;

    InnerLoopOutput out;
    out.body_acceleration = {params.k_rate * (p_c - p), params.k_rate * (q_c - q),
                             (cmd.r_cmd - r) / params.tau};
    const Vec3 momentum = params.inertia.cwiseProduct(x.body_rates);
    out.torques = params.inertia.cwiseProduct(out.body_acceleration) + x.body_rates.cross(momentum);

    const double r33 = std::max(x.rotation(2, 2), 0.2);
    const double setpoint =
        params.mass * (params.gravity + params.k_z * (cmd.zdot_cmd - x.velocity.z())) / r33;
    out.thrust_setpoint = std::clamp(setpoint, 0.0, params.mass * params.max_thrust_accel);
    return out;
}

/// Integrates the rigid body with fixed thrust and torques (no inner loop).
inline SimState step_open_loop(const SimState& state, const Vec3& torques, const WindModel& wind, double dt,
                               const QuadrotorParams& params) {
    if (!(dt > 0.0)) throw DomainError("simulation step must be positive");
    auto f = [&](double t, const detail::RigidBody& x) {
        return detail::rigid_body_rate(x, torques, 0.0, wind.force_at(t), params);
    };
    const detail::RigidBody next = detail::rk4(detail::to_rigid_body(state), state.time, dt, f);
    SimState out = state;
    out.quad = {next.position, next.velocity, detail::orthonormalize(next.rotation), next.rates};
    out.thrust = std::max(next.thrust, 0.0);
    out.thrust_rate = 0.0;
    out.torques = torques;
    out.time = state.time + dt;
    detail::check_finite(out);
    return out;
}

/// One inner-loop period: the on-board controller is evaluated continuously
/// inside the RK4 stages while `cmd` is held.
inline SimState step(const SimState& state, const CommandInput& cmd, const WindModel& wind, double dt,
                     const QuadrotorParams& params) {
    if (!(dt > 0.0)) throw DomainError("simulation step must be positive");
    if (!std::isfinite(cmd.zdot_cmd) || !std::isfinite(cmd.phi_cmd) || !std::isfinite(cmd.theta_cmd) ||
        !std::isfinite(cmd.r_cmd)) {
        throw NonFiniteState("non-finite inner-loop command");
    }
    auto f = [&](double t, const detail::RigidBody& x) {
        const QuadrotorState q{x.position, x.velocity, x.rotation, x.rates};
        const InnerLoopOutput u = inner_loop(q, cmd, params);
        const double thrust_rate = (u.thrust_setpoint - x.thrust) / params.thrust_tau;
        return detail::rigid_body_rate(x, u.torques, thrust_rate, wind.force_at(t), params);
    };
    const detail::RigidBody next = detail::rk4(detail::to_rigid_body(state), state.time, dt, f);

    SimState out;
    out.quad = {next.position, next.velocity, detail::orthonormalize(next.rotation), next.rates};
    out.thrust = std::max(next.thrust, 0.0);
    out.time = state.time + dt;
    const InnerLoopOutput u = inner_loop(out.quad, cmd, params);
    out.thrust_rate = (out.thrust - state.thrust) / dt;
    out.torques = u.torques;
    detail::check_finite(out);
    return out;
}

struct EstimatedFlatState {
    FlatState z;
    bool valid = false;
};

/// Model-based flat state: position and velocity are copied, acceleration and
/// jerk come from thrust, attitude, body rates and thrust rate. The estimator
/// has no knowledge of external forces. Yaw is returned wrapped to (-pi, pi].
inline EstimatedFlatState estimate_flat_state(const SimState& state, const QuadrotorParams& params) {
    const QuadrotorState& x = state.quad;
    const Vec3 e3 = Vec3::UnitZ();
    const Vec3 zb = x.rotation.col(2);
    const Vec3 euler = euler_from_rotation(x.rotation);
    const double cphi = std::cos(euler.x()), sphi = std::sin(euler.x());
    const double cth = std::cos(euler.y());
    const double q = x.body_rates.y(), r = x.body_rates.z();

    EstimatedFlatState out;
    const Vec3 acceleration = -params.gravity * e3 + (state.thrust / params.mass) * zb;
    out.valid = state.thrust / params.mass > kThrustEpsilon;
    Vec3 jerk = Vec3::Zero();
    if (out.valid) {
        jerk = (state.thrust_rate / params.mass) * zb +
               (state.thrust / params.mass) * (x.rotation * x.body_rates.cross(e3));
    }
    const double psi_rate = std::abs(cth) > 1e-9 ? (q * sphi + r * cphi) / cth : 0.0;
    Vec4 position;
    position << x.position, euler.z();
    Vec4 velocity;
    velocity << x.velocity, psi_rate;
    out.z = FlatState::from_blocks(position, velocity, acceleration, jerk);
    return out;
}

}  // namespace fapp
