#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "infovla/policy.hpp"
#include "infovla/trainer.hpp"
#include "json.hpp"

namespace infovla {

struct BenchmarkConfig {
    int n_tasks = 5;
    int base_count = 0;
    int steps = 5;
    int per_step = 1;
    std::uint64_t suite_seed = 7;
    int n_demos = 24;
    int t_max = 80;
};

// Fully resolved experiment description. Parsing applies preset defaults,
// then file values, then CLI overrides; validation reports the offending
// field by name.
struct ExperimentConfig {
    BenchmarkConfig benchmark;
    std::string strategy = "infovla";
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    TrainerConfig trainer;
    PolicyConfig policy;
    std::string output_dir = "runs/out";
    bool save_demos = false;

    BenchmarkLayout layout() const;
    nlohmann::json to_json() const;
};

// Built-in presets: "ci" (desk-scale, minutes) and "paper" (the published
// schedule: 10 tasks, 5 base, 3000/600 iterations).
std::string preset_json_text(const std::string& name);

ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig parse_config_text(const std::string& text);

// Applies `key=value` with a dotted path ("iterations.base=50"); the value is
// parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value);

}  // namespace infovla
