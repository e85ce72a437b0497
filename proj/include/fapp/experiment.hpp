#pragma once

// Closed-loop episodes on the petal path for the path-following MPC and the
// trajectory-tracking baseline, with metrics and file output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fapp/baseline_tracker.hpp"
#include "fapp/errors.hpp"
#include "fapp/flat_quadrotor.hpp"
#include "fapp/lifted_mpc.hpp"
#include "fapp/path_geometry.hpp"
#include "fapp/simulator.hpp"

namespace fapp {

using json = nlohmann::json;

enum class ControllerKind { Fapp, Baseline };

inline std::string to_string(ControllerKind c) { return c == ControllerKind::Fapp ? "fapp" : "baseline"; }

inline ControllerKind parse_controller(const std::string& name) {
    if (name == "fapp") return ControllerKind::Fapp;
    if (name == "baseline") return ControllerKind::Baseline;
    throw ConfigError("unknown controller '" + name + "' (expected fapp or baseline)");
}

inline std::string to_string(WindMode m) {
    switch (m) {
        case WindMode::None: return "none";
        case WindMode::ConstantForce: return "constant_force";
        case WindMode::GustPulse: return "gust_pulse";
    }
    return "none";
}

inline WindMode parse_wind_mode(const std::string& name) {
    if (name == "none") return WindMode::None;
    if (name == "constant_force") return WindMode::ConstantForce;
    if (name == "gust_pulse") return WindMode::GustPulse;
    throw ConfigError("unknown wind mode '" + name + "'");
}

struct ExperimentConfig {
    static constexpr int kSchemaVersion = 1;

    std::string name = "case_i";
    ControllerKind controller = ControllerKind::Fapp;
    /// Recorded with the results; the simulation itself has no random elements.
    std::uint64_t seed = 0;
    double duration = 12.0;  ///< [s]
    /// Inner-loop steps per controller update.
    int control_decimation = 3;
    std::vector<Vec4> control_points{Vec4(0.0, 0.0, 1.0, 0.0), Vec4(3.0, 2.0, 0.0, 0.0), Vec4(3.0, -2.0, 0.0, 0.0),
                                     Vec4(0.0, 0.0, 1.0, 0.0)};
    /// Start position relative to the first control point [m].
    Vec3 initial_offset = Vec3(0.05, 0.05, 0.0);
    /// Start offset of the undisturbed run that generates the baseline reference.
    Vec3 nominal_offset = Vec3(0.05, 0.05, 0.0);
    WindModel wind;
    OcpWeights weights;
    ConstraintSpec constraints;
    HorizonSpec horizon;
    QuadrotorParams quadrotor;
    TrackerGains tracker;
    /// MPC episodes stop once the virtual vehicle passes this parameter.
    double termination_theta = 1.0 - 1e-3;
    /// Window [s] for the mean path speed metric.
    double window_start = 2.0;
    double window_end = 6.0;
    /// Baseline only: timed reference CSV; generated from the nominal run when empty.
    std::string reference_file;

    BezierPath path() const { return BezierPath(control_points); }

    /// Constraint set with gravity taken from the vehicle parameters.
    ConstraintSpec effective_constraints() const {
        ConstraintSpec c = constraints;
        c.gravity = quadrotor.gravity;
        return c;
    }

    void validate() const {
        if (!(duration >= 0.0) || !std::isfinite(duration)) throw ConfigError("duration must be finite and >= 0");
        if (control_decimation < 1) throw ConfigError("control_decimation must be >= 1");
        if (!initial_offset.allFinite() || !nominal_offset.allFinite()) throw ConfigError("offsets must be finite");
        if (!(termination_theta > 0.0 && termination_theta <= 1.0)) {
            throw ConfigError("termination_theta must lie in (0, 1]");
        }
        if (!(window_end >= window_start)) throw ConfigError("analysis window end precedes its start");
        try {
            path();
        } catch (const DegeneratePath& e) {
            throw ConfigError(std::string("invalid path: ") + e.what());
        }
        wind.validate();
        weights.validate();
        effective_constraints().validate();
        horizon.validate();
        quadrotor.validate();
        tracker.validate();
    }
};

namespace detail {

template <int N>
json vec_to_json(const Eigen::Matrix<double, N, 1>& v) {
    json a = json::array();
    for (int i = 0; i < N; ++i) a.push_back(v(i));
    return a;
}

template <int N>
Eigen::Matrix<double, N, 1> vec_from_json(const json& j, const char* key) {
    if (!j.is_array() || j.size() != static_cast<std::size_t>(N)) {
        throw ConfigError(std::string(key) + ": expected an array of " + std::to_string(N) + " numbers");
    }
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) {
        if (!j[i].is_number()) throw ConfigError(std::string(key) + ": non-numeric entry");
        v(i) = j[i].get<double>();
    }
    return v;
}

/// Reads `key` into `out` when present, with a type check.
template <typename T>
void read_if(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    const json& j = obj.at(key);
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw ConfigError(std::string(key) + ": expected a boolean");
        out = j.get<bool>();
    } else if constexpr (std::is_arithmetic_v<T>) {
        if (!j.is_number()) throw ConfigError(std::string(key) + ": expected a number");
        if constexpr (std::is_integral_v<T>) {
            if (!j.is_number_integer()) throw ConfigError(std::string(key) + ": expected an integer");
        }
        out = j.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) throw ConfigError(std::string(key) + ": expected a string");
        out = j.get<std::string>();
    } else {
        out = vec_from_json<T::RowsAtCompileTime>(j, key);
    }
}

inline const json& section(const json& root, const char* key) {
    static const json empty = json::object();
    if (!root.contains(key)) return empty;
    if (!root.at(key).is_object()) throw ConfigError(std::string(key) + ": expected an object");
    return root.at(key);
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = ExperimentConfig::kSchemaVersion;
    j["name"] = c.name;
    j["controller"] = to_string(c.controller);
    j["seed"] = c.seed;
    j["duration"] = c.duration;
    j["control_decimation"] = c.control_decimation;
    j["termination_theta"] = c.termination_theta;
    j["analysis_window"] = {c.window_start, c.window_end};
    j["reference_file"] = c.reference_file;

    json pts = json::array();
    for (const Vec4& p : c.control_points) pts.push_back(detail::vec_to_json<4>(p));
    j["path"] = {{"degree", static_cast<int>(c.control_points.size()) - 1}, {"control_points", pts}};
    j["initial"] = {{"offset", detail::vec_to_json<3>(c.initial_offset)},
                    {"nominal_offset", detail::vec_to_json<3>(c.nominal_offset)}};
    j["wind"] = {{"mode", to_string(c.wind.mode)},
                 {"force", detail::vec_to_json<3>(c.wind.force)},
                 {"start", c.wind.start},
                 {"duration", c.wind.duration}};
    j["weights"] = {{"position", detail::vec_to_json<4>(c.weights.position)},
                    {"velocity", detail::vec_to_json<4>(c.weights.velocity)},
                    {"input", detail::vec_to_json<4>(c.weights.input)},
                    {"path_input", c.weights.path_input},
                    {"v_cmd", c.weights.v_cmd}};
    j["constraints"] = {{"jerk_min", detail::vec_to_json<3>(c.constraints.jerk_min)},
                        {"jerk_max", detail::vec_to_json<3>(c.constraints.jerk_max)},
                        {"f_max", c.constraints.f_max},
                        {"path_input_max", c.constraints.path_input_max},
                        {"forward_only", c.constraints.forward_only}};
    j["horizon"] = {{"steps", c.horizon.steps}, {"dt", c.horizon.dt}};
    const QuadrotorParams& q = c.quadrotor;
    j["quadrotor"] = {{"mass", q.mass},
                      {"gravity", q.gravity},
                      {"inertia", detail::vec_to_json<3>(q.inertia)},
                      {"tau", q.tau},
                      {"k_z", q.k_z},
                      {"k_rate", q.k_rate},
                      {"thrust_tau", q.thrust_tau},
                      {"max_thrust_accel", q.max_thrust_accel},
                      {"max_tilt_cmd", q.max_tilt_cmd}};
    j["tracker"] = {{"kp_xy", c.tracker.kp_xy},
                    {"kd_xy", c.tracker.kd_xy},
                    {"kp_z", c.tracker.kp_z},
                    {"kp_psi", c.tracker.kp_psi},
                    {"max_tilt", c.tracker.max_tilt}};
    return j;
}

/// Parses a config document. Missing keys keep their defaults.
inline ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer() ||
        j.at("schema_version").get<int>() != ExperimentConfig::kSchemaVersion) {
        throw ConfigError("unsupported or missing schema_version (expected " +
                          std::to_string(ExperimentConfig::kSchemaVersion) + ")");
    }
    ExperimentConfig c;
    detail::read_if(j, "name", c.name);
    if (j.contains("controller")) {
        std::string name;
        detail::read_if(j, "controller", name);
        c.controller = parse_controller(name);
    }
    detail::read_if(j, "seed", c.seed);
    detail::read_if(j, "duration", c.duration);
    detail::read_if(j, "control_decimation", c.control_decimation);
    detail::read_if(j, "termination_theta", c.termination_theta);
    detail::read_if(j, "reference_file", c.reference_file);
    if (j.contains("analysis_window")) {
        const Eigen::Vector2d w = detail::vec_from_json<2>(j.at("analysis_window"), "analysis_window");
        c.window_start = w(0);
        c.window_end = w(1);
    }

    const json& path = detail::section(j, "path");
    if (path.contains("control_points")) {
        const json& pts = path.at("control_points");
        if (!pts.is_array()) throw ConfigError("path.control_points: expected an array");
        c.control_points.clear();
        for (const json& p : pts) c.control_points.push_back(detail::vec_from_json<4>(p, "path.control_points"));
        if (path.contains("degree")) {
            int degree = 0;
            detail::read_if(path, "degree", degree);
            if (degree + 1 != static_cast<int>(c.control_points.size())) {
                throw ConfigError("path.degree does not match the number of control points");
            }
        }
    }

    const json& init = detail::section(j, "initial");
    detail::read_if(init, "offset", c.initial_offset);
    detail::read_if(init, "nominal_offset", c.nominal_offset);

    const json& wind = detail::section(j, "wind");
    if (wind.contains("mode")) {
        std::string mode;
        detail::read_if(wind, "mode", mode);
        c.wind.mode = parse_wind_mode(mode);
    }
    detail::read_if(wind, "force", c.wind.force);
    detail::read_if(wind, "start", c.wind.start);
    detail::read_if(wind, "duration", c.wind.duration);

    const json& w = detail::section(j, "weights");
    detail::read_if(w, "position", c.weights.position);
    detail::read_if(w, "velocity", c.weights.velocity);
    detail::read_if(w, "input", c.weights.input);
    detail::read_if(w, "path_input", c.weights.path_input);
    detail::read_if(w, "v_cmd", c.weights.v_cmd);

    const json& con = detail::section(j, "constraints");
    detail::read_if(con, "jerk_min", c.constraints.jerk_min);
    detail::read_if(con, "jerk_max", c.constraints.jerk_max);
    detail::read_if(con, "f_max", c.constraints.f_max);
    detail::read_if(con, "path_input_max", c.constraints.path_input_max);
    detail::read_if(con, "forward_only", c.constraints.forward_only);

    const json& h = detail::section(j, "horizon");
    detail::read_if(h, "steps", c.horizon.steps);
    detail::read_if(h, "dt", c.horizon.dt);

    const json& q = detail::section(j, "quadrotor");
    detail::read_if(q, "mass", c.quadrotor.mass);
    detail::read_if(q, "gravity", c.quadrotor.gravity);
    detail::read_if(q, "inertia", c.quadrotor.inertia);
    detail::read_if(q, "tau", c.quadrotor.tau);
    detail::read_if(q, "k_z", c.quadrotor.k_z);
    detail::read_if(q, "k_rate", c.quadrotor.k_rate);
    detail::read_if(q, "thrust_tau", c.quadrotor.thrust_tau);
    detail::read_if(q, "max_thrust_accel", c.quadrotor.max_thrust_accel);
    detail::read_if(q, "max_tilt_cmd", c.quadrotor.max_tilt_cmd);

    const json& t = detail::section(j, "tracker");
    detail::read_if(t, "kp_xy", c.tracker.kp_xy);
    detail::read_if(t, "kd_xy", c.tracker.kd_xy);
    detail::read_if(t, "kp_z", c.tracker.kp_z);
    detail::read_if(t, "kp_psi", c.tracker.kp_psi);
    detail::read_if(t, "max_tilt", c.tracker.max_tilt);

    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw ConfigError("cannot write config file " + file.string());
    out << to_json(c).dump(2) << '\n';
}

enum class Case { Nominal, InitialOffset, Wind };

/// Default configurations of the three petal experiments.
inline ExperimentConfig case_config(Case which, ControllerKind controller = ControllerKind::Fapp) {
    ExperimentConfig c;
    c.controller = controller;
    switch (which) {
        case Case::Nominal:
            c.name = "case_i";
            break;
        case Case::InitialOffset:
            c.name = "case_ii";
            c.initial_offset = Vec3(-0.8, 0.8, 0.3);
            break;
        case Case::Wind:
            c.name = "case_iii";
            c.wind = WindModel{WindMode::ConstantForce, Vec3(0.0, -1.5, 0.0), 2.0, 4.0};
            break;
    }
    return c;
}

struct TraceRow {
    double time = 0.0;
    Vec3 position = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
    Vec3 euler = Vec3::Zero();
    Vec3 body_rates = Vec3::Zero();
    double thrust = 0.0;
    CommandInput command;
    Vec3 wind = Vec3::Zero();
    /// Virtual vehicle parameter (NaN for the baseline).
    double theta = std::numeric_limits<double>::quiet_NaN();
    Vec3 reference = Vec3::Zero();
    double cross_track = 0.0;
};

struct SolveRecord {
    double time = 0.0;
    PathState s;
    double w = 0.0;
    FlatInput v;
    std::string status;
    int iterations = 0;
    int active_constraints = 0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double wall_ms = 0.0;
    double max_thrust_ratio = 0.0;
    double max_jerk_violation = 0.0;
};

/// Deterministic episode summary. Timing lives in TimingReport.
struct MetricsReport {
    std::string name;
    std::string controller;
    std::uint64_t seed = 0;
    bool valid = false;
    bool failed = false;
    std::string failure;
    bool completed = false;
    double simulated_time = 0.0;
    int inner_steps = 0;
    int controller_updates = 0;
    double rms_tracking_error = 0.0;
    double max_tracking_error = 0.0;
    double rms_cross_track_error = 0.0;
    double max_cross_track_error = 0.0;
    double final_theta = 0.0;
    double mean_speed = 0.0;
    double max_reference_speed = 0.0;
    std::optional<double> mean_theta_dot_window;
    std::optional<double> first_time_cross_track_below_0p1;
    std::optional<double> settled_time_cross_track_below_0p1;
    int constraint_violation_count = 0;
    double max_jerk_violation = 0.0;
    double max_thrust_ratio = 0.0;
    int solver_failures = 0;
    int inverse_failures = 0;
};

struct TimingReport {
    int solves = 0;
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double p99_ms = 0.0;
    double max_ms = 0.0;
};

struct EpisodeResult {
    ExperimentConfig config;
    std::vector<TraceRow> trace;
    std::vector<SolveRecord> solves;
    TimedReference reference;
    MetricsReport metrics;
    TimingReport timing;
};

/// Slack on the exact thrust bound tolerated by the audit.
inline constexpr double kThrustAuditSlack = 0.05;
inline constexpr double kJerkAuditTolerance = 1e-6;
inline constexpr double kCrossTrackThreshold = 0.1;

namespace detail {

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline TraceRow make_row(const SimState& sim, const CommandInput& cmd, const WindModel& wind, double theta,
                         const Vec3& reference, const SampledCurve& curve) {
    TraceRow row;
    row.time = sim.time;
    row.position = sim.quad.position;
    row.velocity = sim.quad.velocity;
    row.euler = euler_from_rotation(sim.quad.rotation);
    row.body_rates = sim.quad.body_rates;
    row.thrust = sim.thrust;
    row.command = cmd;
    row.wind = wind.force_at(sim.time);
    row.theta = theta;
    row.reference = reference;
    row.cross_track = curve.distance(sim.quad.position);
    return row;
}

/// Metrics shared by both controllers; tracking errors are sampled at
/// controller updates against the reference recorded there.
inline void summarize(EpisodeResult& r, const std::vector<double>& tracking_errors) {
    MetricsReport& m = r.metrics;
    m.name = r.config.name;
    m.controller = to_string(r.config.controller);
    m.seed = r.config.seed;
    m.inner_steps = static_cast<int>(r.trace.size());
    m.valid = !r.trace.empty() && !m.failed;
    if (r.trace.empty()) return;
    m.simulated_time = r.trace.back().time + kInnerLoopDt;

    double sq = 0.0;
    for (double e : tracking_errors) {
        sq += e * e;
        m.max_tracking_error = std::max(m.max_tracking_error, e);
    }
    m.rms_tracking_error = tracking_errors.empty() ? 0.0 : std::sqrt(sq / tracking_errors.size());

    double ct_sq = 0.0, speed = 0.0;
    std::optional<double> last_above;
    for (const TraceRow& row : r.trace) {
        ct_sq += row.cross_track * row.cross_track;
        m.max_cross_track_error = std::max(m.max_cross_track_error, row.cross_track);
        speed += row.velocity.norm();
        if (row.cross_track < kCrossTrackThreshold) {
            if (!m.first_time_cross_track_below_0p1) m.first_time_cross_track_below_0p1 = row.time;
        } else {
            last_above = row.time;
        }
    }
    if (m.first_time_cross_track_below_0p1) {
        m.settled_time_cross_track_below_0p1 = last_above ? *last_above + kInnerLoopDt : 0.0;
        if (last_above && *last_above >= r.trace.back().time) m.settled_time_cross_track_below_0p1.reset();
    }
    m.rms_cross_track_error = std::sqrt(ct_sq / r.trace.size());
    m.mean_speed = speed / r.trace.size();
    for (const FlatState& z : r.reference.states()) {
        m.max_reference_speed = std::max(m.max_reference_speed, z.translational_velocity().norm());
    }

    std::vector<double> times;
    for (const SolveRecord& s : r.solves) times.push_back(s.wall_ms);
    r.timing.solves = static_cast<int>(times.size());
    if (!times.empty()) {
        double total = 0.0;
        for (double t : times) total += t;
        r.timing.mean_ms = total / times.size();
        r.timing.median_ms = percentile(times, 0.5);
        r.timing.p99_ms = percentile(times, 0.99);
        r.timing.max_ms = *std::max_element(times.begin(), times.end());
    }
}

}  // namespace detail

/// Initial vehicle and virtual-vehicle state overriding the hover start.
struct EpisodeStart {
    SimState sim;
    PathState path;
};

/// Closed loop with the path-following MPC. At each update the flat state is
/// estimated and one QP is solved; between updates the nominal inverse is
/// evaluated every inner step along the planned flat trajectory (sampled at
/// the middle of each step) and sent to the inner loop.
inline EpisodeResult run_fapp_episode(const ExperimentConfig& config,
                                      const std::optional<EpisodeStart>& initial = std::nullopt) {
    config.validate();
    EpisodeResult r;
    r.config = config;
    r.config.controller = ControllerKind::Fapp;

    const BezierPath path = config.path();
    const SampledCurve curve(path);
    const QuadrotorParams& params = config.quadrotor;
    const ConstraintSpec spec = config.effective_constraints();
    PathFollowingMpc mpc(path, config.weights, spec, config.horizon);

    const double dt = kInnerLoopDt;
    const double hold = config.control_decimation * dt;
    const PathModel path_step = discretize_path(hold);
    const FlatModel flat = flat_model_matrices();
    // Plan propagation to the middle of each inner step of a hold.
    std::vector<FlatModel> plan_steps;
    for (int k = 0; k < config.control_decimation; ++k) {
        plan_steps.push_back(discretize_chain<kFlatStateDim, kFlatInputDim>(flat.a, flat.b, (k + 0.5) * dt));
    }

    const Vec4 start = path.eval(0.0);
    SimState sim = initial ? initial->sim : hover_state(start.head<3>() + config.initial_offset, start(3), params);
    PathState s = initial ? initial->path : PathState(0.0, 0.0, 0.0, 0.0);
    std::optional<ControlSolution> warm;
    CommandInput cmd;
    // Current plan: flat state at the last update and the first planned input.
    std::optional<std::pair<FlatState, FlatInput>> plan;
    double yaw = initial ? euler_from_rotation(sim.quad.rotation).z() : start(3);
    Vec3 ref_position = start.head<3>();
    std::vector<double> tracking_errors;
    double theta_dot_sum = 0.0;
    int theta_dot_count = 0;

    const long steps = std::lround(config.duration / dt);
    try {
        for (long i = 0; i < steps; ++i) {
            if (i % config.control_decimation == 0) {
                if (s.theta() >= config.termination_theta) {
                    r.metrics.completed = true;
                    break;
                }
                const EstimatedFlatState est = estimate_flat_state(sim, params);
                FlatState z0 = est.z;
                yaw = unwrap_angle(yaw, z0.psi());
                z0.values(FlatState::kPositionIndex[3]) = yaw;

                const FlatState z_ref = reference_flat_state(path, s.clamped());
                r.reference.push_back(sim.time, z_ref);
                ref_position = z_ref.translation();
                tracking_errors.push_back((sim.quad.position - ref_position).norm());
                ++r.metrics.controller_updates;
                if (sim.time >= config.window_start && sim.time < config.window_end) {
                    theta_dot_sum += s.theta_dot();
                    ++theta_dot_count;
                }

                double w0 = 0.0;
                SolveRecord rec;
                rec.time = sim.time;
                rec.s = s;
                try {
                    if (!est.valid) throw DegenerateThrust("estimated thrust too small for the flat map");
                    ControlSolution sol = mpc.solve_step(z0, s, warm ? &*warm : nullptr);
                    rec.status = to_string(sol.stats.status);
                    rec.iterations = sol.stats.iterations;
                    rec.active_constraints = static_cast<int>(sol.active_set.size());
                    rec.primal_residual = sol.stats.primal_residual;
                    rec.dual_residual = sol.stats.dual_residual;
                    rec.wall_ms = sol.stats.wall_ms;
                    const ConstraintAudit audit = audit_constraints(sol.z_predicted, spec);
                    rec.max_jerk_violation = audit.max_jerk_violation;
                    rec.max_thrust_ratio = audit.max_thrust_ratio;

                    const FlatInput v0 = sol.v.front();
                    // Reject plans whose first inverse is unusable before committing.
                    psi_inverse(FlatState(plan_steps[0].a * z0.values + plan_steps[0].b * v0.values), v0, params);
                    plan.emplace(z0, v0);
                    w0 = sol.w.front();
                    rec.v = v0;
                    rec.w = w0;
                    warm = std::move(sol);
                } catch (const QpInfeasible&) {
                    ++r.metrics.solver_failures;
                    rec.status = "infeasible";
                    warm.reset();
                    plan.reset();
                } catch (const NumericalBreakdown&) {
                    ++r.metrics.solver_failures;
                    rec.status = "breakdown";
                    warm.reset();
                    plan.reset();
                } catch (const DegenerateThrust&) {
                    ++r.metrics.inverse_failures;
                    rec.status = "degenerate_thrust";
                    warm.reset();
                    plan.reset();
                } catch (const TiltLimit&) {
                    ++r.metrics.inverse_failures;
                    rec.status = "tilt_limit";
                    warm.reset();
                    plan.reset();
                }
                r.metrics.max_jerk_violation = std::max(r.metrics.max_jerk_violation, rec.max_jerk_violation);
                r.metrics.max_thrust_ratio = std::max(r.metrics.max_thrust_ratio, rec.max_thrust_ratio);
                if (rec.max_jerk_violation > kJerkAuditTolerance || rec.max_thrust_ratio > 1.0 + kThrustAuditSlack) {
                    ++r.metrics.constraint_violation_count;
                }
                r.solves.push_back(rec);
                const PathState next(path_step.a * s.values + path_step.b * w0);
                // The next hold would carry the virtual vehicle past the end of the path.
                if (next.theta() > 1.0) {
                    r.metrics.completed = true;
                    break;
                }
                s = next;
            }
            if (plan) {
                const FlatModel& m = plan_steps[i % config.control_decimation];
                try {
                    cmd = psi_inverse(FlatState(m.a * plan->first.values + m.b * plan->second.values), plan->second,
                                      params);
                } catch (const DegenerateThrust&) {
                    ++r.metrics.inverse_failures;
                } catch (const TiltLimit&) {
                    ++r.metrics.inverse_failures;
                }
            }
            r.trace.push_back(detail::make_row(sim, cmd, config.wind, s.theta(), ref_position, curve));
            sim = step(sim, cmd, config.wind, dt, params);
        }
    } catch (const NonFiniteState& e) {
        r.metrics.failed = true;
        r.metrics.failure = e.what();
    }
    if (!r.metrics.completed && steps > 0 && s.theta() >= config.termination_theta) r.metrics.completed = true;
    r.metrics.final_theta = s.theta();
    if (theta_dot_count > 0) r.metrics.mean_theta_dot_window = theta_dot_sum / theta_dot_count;
    detail::summarize(r, tracking_errors);
    return r;
}

/// Timed reference recorded by the MPC on the undisturbed run.
inline TimedReference generate_nominal_reference(const ExperimentConfig& config) {
    ExperimentConfig nominal = config;
    nominal.controller = ControllerKind::Fapp;
    nominal.wind = WindModel{};
    nominal.initial_offset = config.nominal_offset;
    EpisodeResult r = run_fapp_episode(nominal);
    if (r.metrics.failed) throw NonFiniteState("nominal run failed: " + r.metrics.failure);
    if (r.reference.empty()) throw ConfigError("nominal run produced an empty reference");
    return std::move(r.reference);
}

/// Closed loop with the trajectory-tracking baseline. The episode ends at the
/// reference's last timestamp or at the configured duration.
inline EpisodeResult run_baseline_episode(const ExperimentConfig& config, const TimedReference& reference) {
    config.validate();
    if (reference.empty()) throw ConfigError("baseline needs a non-empty reference");
    EpisodeResult r;
    r.config = config;
    r.config.controller = ControllerKind::Baseline;

    const BezierPath path = config.path();
    const SampledCurve curve(path);
    const QuadrotorParams& params = config.quadrotor;
    const double dt = kInnerLoopDt;
    const Vec4 start = path.eval(0.0);
    SimState sim = hover_state(start.head<3>() + config.initial_offset, start(3), params);
    CommandInput cmd;
    double yaw = start(3);
    Vec3 ref_position = reference.sample(0.0).translation();
    std::vector<double> tracking_errors;

    const double end = std::min(config.duration, reference.end_time());
    const long steps = std::max(0L, std::lround(end / dt));
    try {
        for (long i = 0; i < steps; ++i) {
            if (i % config.control_decimation == 0) {
                const EstimatedFlatState est = estimate_flat_state(sim, params);
                FlatState z = est.z;
                yaw = unwrap_angle(yaw, z.psi());
                z.values(FlatState::kPositionIndex[3]) = yaw;
                const FlatState z_ref = reference.sample(sim.time);
                r.reference.push_back(sim.time, z_ref);
                ref_position = z_ref.translation();
                tracking_errors.push_back((sim.quad.position - ref_position).norm());
                ++r.metrics.controller_updates;
                cmd = track(z, sim.time, reference, config.tracker, params);
            }
            r.trace.push_back(detail::make_row(sim, cmd, config.wind, std::numeric_limits<double>::quiet_NaN(),
                                               ref_position, curve));
            sim = step(sim, cmd, config.wind, dt, params);
        }
        r.metrics.completed = steps > 0 && end >= reference.end_time();
    } catch (const NonFiniteState& e) {
        r.metrics.failed = true;
        r.metrics.failure = e.what();
    }
    r.metrics.final_theta = curve.closest_theta(sim.quad.position);
    detail::summarize(r, tracking_errors);
    return r;
}

inline TimedReference load_reference(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open reference file " + file.string());
    return TimedReference::read_csv(in);
}

/// Runs either controller; a baseline without a reference file generates one.
inline EpisodeResult run_episode(const ExperimentConfig& config, const TimedReference* reference = nullptr) {
    if (config.controller == ControllerKind::Fapp) return run_fapp_episode(config);
    if (reference != nullptr) return run_baseline_episode(config, *reference);
    if (!config.reference_file.empty()) return run_baseline_episode(config, load_reference(config.reference_file));
    return run_baseline_episode(config, generate_nominal_reference(config));
}

/// Independent episodes on worker threads; results keep the input order.
inline std::vector<EpisodeResult> run_batch(const std::vector<ExperimentConfig>& configs,
                                            const TimedReference* reference = nullptr) {
    std::vector<std::future<EpisodeResult>> jobs;
    for (const ExperimentConfig& c : configs) {
        jobs.push_back(std::async(std::launch::async, [c, reference] { return run_episode(c, reference); }));
    }
    std::vector<EpisodeResult> out;
    for (auto& j : jobs) out.push_back(j.get());
    return out;
}

/// Largest speed gap between two references over [0, t_end], sampled at `a`'s timestamps.
inline double max_speed_difference(const TimedReference& a, const TimedReference& b, double t_end) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double t = a.times()[i];
        if (t > t_end) break;
        const double va = a.states()[i].translational_velocity().norm();
        const double vb = b.sample(t).translational_velocity().norm();
        worst = std::max(worst, std::abs(va - vb));
    }
    return worst;
}

inline json to_json(const MetricsReport& m) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"name", m.name},
                {"controller", m.controller},
                {"seed", m.seed},
                {"valid", m.valid},
                {"failed", m.failed},
                {"failure", m.failure},
                {"completed", m.completed},
                {"simulated_time", m.simulated_time},
                {"inner_steps", m.inner_steps},
                {"controller_updates", m.controller_updates},
                {"rms_tracking_error", m.rms_tracking_error},
                {"max_tracking_error", m.max_tracking_error},
                {"rms_cross_track_error", m.rms_cross_track_error},
                {"max_cross_track_error", m.max_cross_track_error},
                {"final_theta", m.final_theta},
                {"mean_speed", m.mean_speed},
                {"max_reference_speed", m.max_reference_speed},
                {"mean_theta_dot_window", opt(m.mean_theta_dot_window)},
                {"first_time_cross_track_below_0p1", opt(m.first_time_cross_track_below_0p1)},
                {"settled_time_cross_track_below_0p1", opt(m.settled_time_cross_track_below_0p1)},
                {"constraint_violation_count", m.constraint_violation_count},
                {"max_jerk_violation", m.max_jerk_violation},
                {"max_thrust_ratio", m.max_thrust_ratio},
                {"solver_failures", m.solver_failures},
                {"inverse_failures", m.inverse_failures}};
}

inline json to_json(const TimingReport& t) {
    return json{{"solves", t.solves},
                {"mean_ms", t.mean_ms},
                {"median_ms", t.median_ms},
                {"p99_ms", t.p99_ms},
                {"max_ms", t.max_ms}};
}

inline const char* trace_csv_header() {
    return "time,x,y,z,vx,vy,vz,roll,pitch,yaw,p,q,r,thrust,zdot_cmd,phi_cmd,theta_cmd,r_cmd,"
           "wind_x,wind_y,wind_z,theta,ref_x,ref_y,ref_z,cross_track";
}

inline const char* solution_csv_header() {
    return "time,theta,theta_dot,theta_ddot,theta_dddot,w,snap_x,snap_y,snap_z,psi_ddot,status,iterations,"
           "active_constraints,primal_residual,dual_residual,max_thrust_ratio,max_jerk_violation,solve_ms";
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
    os << trace_csv_header() << '\n' << std::setprecision(12);
    for (const TraceRow& r : trace) {
        os << r.time;
        for (const Vec3* v : {&r.position, &r.velocity, &r.euler, &r.body_rates}) {
            for (int i = 0; i < 3; ++i) os << ',' << (*v)(i);
        }
        os << ',' << r.thrust << ',' << r.command.zdot_cmd << ',' << r.command.phi_cmd << ','
           << r.command.theta_cmd << ',' << r.command.r_cmd;
        for (int i = 0; i < 3; ++i) os << ',' << r.wind(i);
        os << ',' << r.theta;
        for (int i = 0; i < 3; ++i) os << ',' << r.reference(i);
        os << ',' << r.cross_track << '\n';
    }
}

inline void write_solution_csv(std::ostream& os, const std::vector<SolveRecord>& solves) {
    os << solution_csv_header() << '\n' << std::setprecision(12);
    for (const SolveRecord& r : solves) {
        os << r.time;
        for (int i = 0; i < 4; ++i) os << ',' << r.s.values(i);
        os << ',' << r.w;
        for (int i = 0; i < 4; ++i) os << ',' << r.v.values(i);
        os << ',' << r.status << ',' << r.iterations << ',' << r.active_constraints << ',' << r.primal_residual
           << ',' << r.dual_residual << ',' << r.max_thrust_ratio << ',' << r.max_jerk_violation << ','
           << r.wall_ms << '\n';
    }
}

/// Writes trace.csv, solution.csv, reference.csv, metrics.json, timing.json and config.json.
inline void write_episode(const EpisodeResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name);
        if (!out) throw ConfigError("cannot write " + (dir / name).string());
        return out;
    };
    {
        auto out = open("trace.csv");
        write_trace_csv(out, r.trace);
    }
    {
        auto out = open("solution.csv");
        write_solution_csv(out, r.solves);
    }
    {
        auto out = open("reference.csv");
        r.reference.write_csv(out);
    }
    open("metrics.json") << to_json(r.metrics).dump(2) << '\n';
    open("timing.json") << to_json(r.timing).dump(2) << '\n';
    open("config.json") << to_json(r.config).dump(2) << '\n';
}

inline json read_metrics(const std::filesystem::path& dir) {
    std::ifstream in(dir / "metrics.json");
    if (!in) throw MissingEpisode("no metrics.json in " + dir.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw MissingEpisode("unreadable metrics.json in " + dir.string() + ": " + e.what());
    }
}

/// Percentage reduction of `a` relative to `b`; null when undefined.
inline json reduction_percent(double a, double b) {
    if (b == 0.0) return a == 0.0 ? json(0.0) : json(nullptr);
    return json(100.0 * (1.0 - a / b));
}

/// Paired metrics; reductions are of episode a relative to episode b.
inline json compare_metrics(const json& a, const json& b) {
    auto number = [](const json& m, const char* key) {
        if (!m.contains(key) || !m.at(key).is_number()) throw MissingEpisode(std::string("metrics lack ") + key);
        return m.at(key).get<double>();
    };
    return json{{"a", a},
                {"b", b},
                {"rms_reduction_percent",
                 reduction_percent(number(a, "rms_tracking_error"), number(b, "rms_tracking_error"))},
                {"rms_cross_track_reduction_percent",
                 reduction_percent(number(a, "rms_cross_track_error"), number(b, "rms_cross_track_error"))},
                {"max_cross_track_reduction_percent",
                 reduction_percent(number(a, "max_cross_track_error"), number(b, "max_cross_track_error"))}};
}

inline json compare_episodes(const std::filesystem::path& a, const std::filesystem::path& b) {
    return compare_metrics(read_metrics(a), read_metrics(b));
}

}  // namespace fapp
