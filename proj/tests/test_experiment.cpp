#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "fapp/experiment.hpp"

namespace fapp {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("fapp_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string first_line(const fs::path& file) {
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);
    return line;
}

TEST(Config, JsonRoundTripIsLossless) {
    ExperimentConfig c = case_config(Case::Wind, ControllerKind::Baseline);
    c.seed = 1234567890123ULL;
    c.duration = 7.25;
    c.initial_offset = Vec3(0.1, -0.2, 0.3);
    c.weights.velocity = Vec4(1, 2, 3, 4);
    c.constraints.forward_only = false;
    c.quadrotor.k_rate = 41.5;
    c.tracker.kp_xy = 3.3;
    c.window_start = 1.5;
    c.reference_file = "ref.csv";
    const json j = to_json(c);
    const ExperimentConfig back = config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    EXPECT_EQ(back.controller, ControllerKind::Baseline);
    EXPECT_EQ(back.wind.mode, WindMode::ConstantForce);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.initial_offset, c.initial_offset);
}

TEST(Config, FileRoundTrip) {
    const fs::path dir = scratch_dir("config");
    const ExperimentConfig c = case_config(Case::InitialOffset);
    save_config(c, dir / "c.json");
    EXPECT_EQ(to_json(load_config(dir / "c.json")), to_json(c));
    EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
}

TEST(Config, RejectsBadInput) {
    json j = to_json(ExperimentConfig{});
    json no_version = j;
    no_version.erase("schema_version");
    EXPECT_THROW(config_from_json(no_version), ConfigError);

    json wrong_version = j;
    wrong_version["schema_version"] = 99;
    EXPECT_THROW(config_from_json(wrong_version), ConfigError);

    json bad_controller = j;
    bad_controller["controller"] = "pid";
    EXPECT_THROW(config_from_json(bad_controller), ConfigError);

    json bad_type = j;
    bad_type["duration"] = "long";
    EXPECT_THROW(config_from_json(bad_type), ConfigError);

    json bad_vector = j;
    bad_vector["initial"]["offset"] = json::array({1, 2});
    EXPECT_THROW(config_from_json(bad_vector), ConfigError);

    json negative = j;
    negative["duration"] = -1.0;
    EXPECT_THROW(config_from_json(negative), ConfigError);

    json bad_limits = j;
    bad_limits["constraints"]["f_max"] = 5.0;
    EXPECT_THROW(config_from_json(bad_limits), ConfigError);

    EXPECT_THROW(parse_wind_mode("storm"), ConfigError);
}

TEST(Config, MissingKeysKeepDefaults) {
    const ExperimentConfig c = config_from_json(json{{"schema_version", 1}, {"duration", 3.0}});
    EXPECT_EQ(c.duration, 3.0);
    EXPECT_EQ(c.weights.position, ExperimentConfig{}.weights.position);
    EXPECT_EQ(c.controller, ControllerKind::Fapp);
}

TEST(Episode, ZeroDurationIsEmptyAndInvalid) {
    ExperimentConfig c = case_config(Case::Nominal);
    c.duration = 0.0;
    const EpisodeResult f = run_episode(c);
    EXPECT_TRUE(f.trace.empty());
    EXPECT_FALSE(f.metrics.valid);
    EXPECT_FALSE(f.metrics.failed);

    c.controller = ControllerKind::Baseline;
    TimedReference ref;
    ref.push_back(0.0, FlatState{});
    ref.push_back(1.0, FlatState{});
    const EpisodeResult b = run_episode(c, &ref);
    EXPECT_TRUE(b.trace.empty());
    EXPECT_FALSE(b.metrics.valid);
}

class NominalEpisodes : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        fapp_ = new EpisodeResult(run_fapp_episode(case_config(Case::Nominal)));
        baseline_ = new EpisodeResult(
            run_baseline_episode(case_config(Case::Nominal, ControllerKind::Baseline), fapp_->reference));
    }
    static void TearDownTestSuite() {
        delete fapp_;
        delete baseline_;
    }
    static EpisodeResult* fapp_;
    static EpisodeResult* baseline_;
};

EpisodeResult* NominalEpisodes::fapp_ = nullptr;
EpisodeResult* NominalEpisodes::baseline_ = nullptr;

TEST_F(NominalEpisodes, ReferenceShape) {
    const TimedReference& ref = fapp_->reference;
    ASSERT_FALSE(ref.empty());
    const FlatState first = ref.states().front();
    EXPECT_LT((first.translation() - Vec3(0, 0, 1)).norm(), 1e-12);
    EXPECT_LT(first.translational_velocity().norm(), 0.05);
    EXPECT_GE(fapp_->metrics.max_reference_speed, 1.5);
    EXPECT_LE(fapp_->metrics.max_reference_speed, 2.5);
    EXPECT_LT((ref.states().back().translation() - Vec3(0, 0, 1)).norm(), 0.05);
    EXPECT_TRUE(fapp_->metrics.completed);
    EXPECT_TRUE(fapp_->metrics.valid);
}

TEST_F(NominalEpisodes, FappStaysCloserToThePath) {
    EXPECT_LT(fapp_->metrics.max_cross_track_error, 0.15);
    EXPECT_LT(fapp_->metrics.rms_cross_track_error, baseline_->metrics.rms_cross_track_error);
}

TEST_F(NominalEpisodes, NoFallbacksOrViolations) {
    EXPECT_EQ(fapp_->metrics.solver_failures, 0);
    EXPECT_EQ(fapp_->metrics.inverse_failures, 0);
    EXPECT_EQ(fapp_->metrics.constraint_violation_count, 0);
    EXPECT_EQ(static_cast<int>(fapp_->solves.size()), fapp_->metrics.controller_updates);
    for (const SolveRecord& s : fapp_->solves) EXPECT_EQ(s.status, "optimal");
}

TEST_F(NominalEpisodes, TraceIsConsistent) {
    const std::vector<TraceRow>& trace = fapp_->trace;
    ASSERT_FALSE(trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) {
        EXPECT_NEAR(trace[i].time - trace[i - 1].time, kInnerLoopDt, 1e-12);
        EXPECT_GE(trace[i].theta, trace[i - 1].theta - 1e-12);
    }
    for (const TraceRow& row : baseline_->trace) EXPECT_TRUE(std::isnan(row.theta));
    EXPECT_LE(baseline_->metrics.simulated_time, fapp_->reference.end_time() + kInnerLoopDt + 1e-9);
}

TEST_F(NominalEpisodes, OutputFiles) {
    const fs::path dir = scratch_dir("episode");
    write_episode(*fapp_, dir);
    EXPECT_EQ(first_line(dir / "trace.csv"), trace_csv_header());
    EXPECT_EQ(first_line(dir / "solution.csv"), solution_csv_header());
    EXPECT_EQ(first_line(dir / "reference.csv"), TimedReference::csv_header());
    for (const char* f : {"metrics.json", "timing.json", "config.json"}) EXPECT_TRUE(fs::exists(dir / f));

    std::ifstream in(dir / "trace.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(in, line);
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, fapp_->trace.size());

    const TimedReference back = load_reference(dir / "reference.csv");
    EXPECT_EQ(back.size(), fapp_->reference.size());
    EXPECT_EQ(to_json(load_config(dir / "config.json")), to_json(fapp_->config));
}

TEST_F(NominalEpisodes, Compare) {
    const fs::path root = scratch_dir("compare");
    write_episode(*fapp_, root / "a");
    write_episode(*baseline_, root / "b");
    const json same = compare_episodes(root / "a", root / "a");
    EXPECT_EQ(same["rms_reduction_percent"].get<double>(), 0.0);
    const json cmp = compare_episodes(root / "a", root / "b");
    const double expected =
        100.0 * (1.0 - fapp_->metrics.rms_tracking_error / baseline_->metrics.rms_tracking_error);
    EXPECT_NEAR(cmp["rms_reduction_percent"].get<double>(), expected, 1e-9);
    EXPECT_THROW(compare_episodes(root / "a", root / "nowhere"), MissingEpisode);
}

TEST(Episode, Reproducible) {
    ExperimentConfig c = case_config(Case::InitialOffset);
    c.duration = 2.0;
    const EpisodeResult a = run_episode(c);
    const EpisodeResult b = run_episode(c);
    EXPECT_EQ(to_json(a.metrics).dump(), to_json(b.metrics).dump());
    ASSERT_EQ(a.trace.size(), b.trace.size());
    EXPECT_EQ(a.trace.back().position, b.trace.back().position);
}

TEST(Episode, BatchMatchesSequential) {
    ExperimentConfig c = case_config(Case::Wind);
    c.duration = 1.0;
    TimedReference ref;
    ref.push_back(0.0, reference_flat_state(c.path(), PathState(0, 0, 0, 0)));
    ref.push_back(5.0, reference_flat_state(c.path(), PathState(0, 0, 0, 0)));
    ExperimentConfig b = c;
    b.controller = ControllerKind::Baseline;
    const std::vector<EpisodeResult> batch = run_batch({c, b}, &ref);
    EXPECT_EQ(to_json(batch[0].metrics), to_json(run_episode(c).metrics));
    EXPECT_EQ(to_json(batch[1].metrics), to_json(run_episode(b, &ref).metrics));
}

TEST(Compare, ReductionEdgeCases) {
    EXPECT_EQ(reduction_percent(1.0, 4.0).get<double>(), 75.0);
    EXPECT_EQ(reduction_percent(0.0, 0.0).get<double>(), 0.0);
    EXPECT_TRUE(reduction_percent(1.0, 0.0).is_null());
    EXPECT_THROW(compare_metrics(json::object(), json::object()), MissingEpisode);
}

}  // namespace
}  // namespace fapp
