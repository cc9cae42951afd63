#pragma once

#include <string>
#include <vector>

#include "infovla/config.hpp"
#include "infovla/metrics.hpp"

namespace infovla {

struct SeedMetrics {
    std::uint64_t seed = 0;
    Metrics metrics;
};

struct StrategyOutcome {
    std::string strategy;
    std::vector<SeedMetrics> per_seed;
    Metrics mean;
    Metrics stddev;
};

struct ExperimentOutcome {
    std::vector<StrategyOutcome> strategies;
    std::string report_text;
};

// Runs cfg.strategy for every seed, writing the run directory:
//   <out>/config.json, suite_manifest.json, report.json
//   <out>/seed_<s>/{R.csv, losses.csv, memory_manifest.json, metrics.json,
//                   checkpoints/stage_<k>.json}
// All artifacts are written atomically at stage boundaries.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// Runs each strategy on the identical suite and seeds under
// <out>/<strategy>/..., then writes <out>/comparison.json and a combined
// table with the ordering lines.
ExperimentOutcome compare_experiment(const ExperimentConfig& cfg,
                                     const std::vector<std::string>& strategies);

// Recomputes metrics from an R.csv file; writes metrics JSON when
// out_json_path is nonempty.
Metrics metrics_from_csv_file(const std::string& csv_path, const std::string& out_json_path);

}  // namespace infovla
