#pragma once

// Trajectory-tracking baseline: PD on horizontal position with a static
// tilt inversion, P control on vertical position and yaw.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fapp/errors.hpp"
#include "fapp/flat_quadrotor.hpp"

namespace fapp {

/// Time-stamped flat-state reference; lookup interpolates and clamps at the ends.
class TimedReference {
public:
    TimedReference() = default;

    void push_back(double time, const FlatState& z) {
        if (!times_.empty() && !(time > times_.back())) {
            throw ConfigError("reference timestamps must be strictly increasing");
        }
        times_.push_back(time);
        states_.push_back(z);
    }

    bool empty() const { return times_.empty(); }
    std::size_t size() const { return times_.size(); }
    const std::vector<double>& times() const { return times_; }
    const std::vector<FlatState>& states() const { return states_; }
    double start_time() const { return times_.front(); }
    double end_time() const { return times_.back(); }

    FlatState sample(double t) const {
        if (times_.empty()) throw ConfigError("empty reference");
        if (t <= times_.front()) return states_.front();
        if (t >= times_.back()) return states_.back();
        const auto it = std::upper_bound(times_.begin(), times_.end(), t);
        const std::size_t hi = static_cast<std::size_t>(it - times_.begin());
        const std::size_t lo = hi - 1;
        const double alpha = (t - times_[lo]) / (times_[hi] - times_[lo]);
        return FlatState((1.0 - alpha) * states_[lo].values + alpha * states_[hi].values);
    }

    /// CSV with header `time,x,x_d1,x_d2,x_d3,y,...,z_d3,psi,psi_d1`.
    void write_csv(std::ostream& os) const {
        os << csv_header() << '\n';
        os << std::setprecision(17);
        for (std::size_t i = 0; i < times_.size(); ++i) {
            os << times_[i];
            for (int j = 0; j < kFlatStateDim; ++j) os << ',' << states_[i].values(j);
            os << '\n';
        }
    }

    static TimedReference read_csv(std::istream& is) {
        TimedReference ref;
        std::string line;
        if (!std::getline(is, line) || line != csv_header()) throw ConfigError("reference CSV header mismatch");
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::stringstream ss(line);
            std::string cell;
            std::vector<double> row;
            while (std::getline(ss, cell, ',')) {
                try {
                    row.push_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw ConfigError("reference CSV contains a non-numeric cell");
                }
            }
            if (row.size() != kFlatStateDim + 1) throw ConfigError("reference CSV row has wrong column count");
            FlatState z;
            for (int j = 0; j < kFlatStateDim; ++j) z.values(j) = row[j + 1];
            ref.push_back(row[0], z);
        }
        return ref;
    }

    static std::string csv_header() {
        return "time,x,x_d1,x_d2,x_d3,y,y_d1,y_d2,y_d3,z,z_d1,z_d2,z_d3,psi,psi_d1";
    }

private:
    std::vector<double> times_;
    std::vector<FlatState> states_;
};

struct TrackerGains {
    double kp_xy = 4.0;  ///< [1/s^2]
    double kd_xy = 3.5;  ///< [1/s]
    double kp_z = 2.0;   ///< [1/s]
    double kp_psi = 2.0; ///< [1/s]
    double max_tilt = 0.5;  ///< [rad]

    void validate() const {
        if (!(kp_xy > 0.0) || !(kd_xy > 0.0) || !(kp_z > 0.0) || !(kp_psi > 0.0) || !(max_tilt > 0.0)) {
            throw ConfigError("tracker gains must be strictly positive");
        }
    }
};

inline CommandInput track(const FlatState& z_est, double t, const TimedReference& ref, const TrackerGains& gains,
                          const QuadrotorParams& params) {
    const FlatState r = ref.sample(t);
    const Vec3 pos = z_est.translation(), vel = z_est.translational_velocity();
    const Vec3 rpos = r.translation(), rvel = r.translational_velocity(), racc = r.acceleration();

    const double ax = racc.x() + gains.kd_xy * (rvel.x() - vel.x()) + gains.kp_xy * (rpos.x() - pos.x());
    const double ay = racc.y() + gains.kd_xy * (rvel.y() - vel.y()) + gains.kp_xy * (rpos.y() - pos.y());

    // Rotate into the heading frame and invert a_x = g tan(theta), a_y = -g tan(phi) / cos(theta).
    const double psi = z_est.psi();
    const double c = std::cos(psi), s = std::sin(psi);
    const double ah_x = c * ax + s * ay;
    const double ah_y = -s * ax + c * ay;
    const double g = params.gravity;
    const double theta = std::atan(ah_x / g);
    const double phi = -std::atan(ah_y * std::cos(theta) / g);

    CommandInput u;
    u.theta_cmd = std::clamp(theta, -gains.max_tilt, gains.max_tilt);
    u.phi_cmd = std::clamp(phi, -gains.max_tilt, gains.max_tilt);
    u.zdot_cmd = rvel.z() + gains.kp_z * (rpos.z() - pos.z());
    u.r_cmd = r.psi_rate() + gains.kp_psi * normalize_angle(r.psi() - psi);
    return u;
}

}  // namespace fapp
