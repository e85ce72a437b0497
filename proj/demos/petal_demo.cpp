// Flies the three petal cases with both controllers and prints a summary.
//
//   petal_demo [output_dir]
//
// With an output directory, every episode is written to <dir>/<case>_<controller>.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "fapp/experiment.hpp"

int main(int argc, char** argv) {
    using namespace fapp;
    const std::filesystem::path out = argc > 1 ? argv[1] : "";

    const TimedReference nominal = generate_nominal_reference(case_config(Case::Nominal));
    std::vector<ExperimentConfig> configs;
    for (Case c : {Case::Nominal, Case::InitialOffset, Case::Wind}) {
        configs.push_back(case_config(c, ControllerKind::Fapp));
        configs.push_back(case_config(c, ControllerKind::Baseline));
    }
    const std::vector<EpisodeResult> results = run_batch(configs, &nominal);

    std::printf("%-9s %-9s %9s %9s %9s %9s %8s %8s\n", "case", "ctrl", "rms_trk", "rms_xtr", "max_xtr", "t_end",
                "theta", "p50_ms");
    for (const EpisodeResult& r : results) {
        const MetricsReport& m = r.metrics;
        std::printf("%-9s %-9s %9.4f %9.4f %9.4f %9.3f %8.4f %8.3f\n", m.name.c_str(), m.controller.c_str(),
                    m.rms_tracking_error, m.rms_cross_track_error, m.max_cross_track_error, m.simulated_time,
                    m.final_theta, r.timing.median_ms);
        if (!out.empty()) write_episode(r, out / (m.name + "_" + m.controller));
    }
    for (std::size_t i = 0; i + 1 < results.size(); i += 2) {
        const json cmp = compare_metrics(to_json(results[i].metrics), to_json(results[i + 1].metrics));
        std::cout << results[i].metrics.name << ": RMS reduction " << cmp["rms_reduction_percent"].dump() << " %\n";
    }
    return 0;
}
