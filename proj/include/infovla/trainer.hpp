#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "infovla/data.hpp"
#include "infovla/losses.hpp"
#include "infovla/metrics.hpp"
#include "infovla/optimizer.hpp"
#include "infovla/policy.hpp"
#include "infovla/replay.hpp"
#include "infovla/suite.hpp"

namespace infovla {

enum class Strategy { kMultitask, kSequential, kEr, kEwc, kInfoVla };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TrainerConfig {
    int iterations_base = 10000;
    int iterations_incremental = 4000;
    int batch_size = 16;
    double learning_rate = 3e-4;
    double replay_fraction = 0.5;
    LossWeights weights;
    int eval_episodes = 20;
    int euler_steps = 10;
    int fisher_samples = 64;
    int mi_k_bins = 8;
    int mi_joint_hidden = 32;
};

// Bi-kNm stage structure: base_count tasks trained jointly as stage 0 (when
// present), then per_step tasks per incremental stage.
struct BenchmarkLayout {
    int n_tasks = 0;
    int base_count = 0;
    int per_step = 1;

    int n_stages() const;
    int first_stage(int task) const;
    std::vector<int> stage_tasks(int stage) const;
    SuccessMatrix empty_matrix() const;
};

struct LossRecord {
    int stage = 0;
    int iter = 0;
    double loss_cl = 0.0;
    std::optional<double> loss_rac;
    std::optional<double> loss_mi;
    std::optional<double> loss_mc;
    double total = 0.0;
};

struct StageReport {
    int stage = 0;
    std::vector<std::pair<int, double>> task_success;  // (task_id, rate) for tasks seen so far
    double wall_clock_seconds = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t kl_floor_events = 0;
};

struct RunResult {
    SuccessMatrix matrix;
    std::vector<StageReport> reports;
    std::vector<LossRecord> loss_log;
};

// Mutable state threaded through the stage loop of one continual run.
struct RunState {
    PolicyParameters policy;
    std::optional<PolicyParameters> teacher;
    ReplayMemory memory;
    std::vector<EwcAnchor> ewc_anchors;
};

// Called after each stage boundary with the partially filled result, so the
// experiment layer can write artifacts atomically.
using StageEndHook = std::function<void(int stage, const RunResult&, const RunState&)>;

// One stage of the continual protocol: trains the strategy's objective for
// the stage's iteration budget, then evaluates every task introduced so far.
// Requires a teacher for the distillation strategy at stage > 0.
StageReport run_stage(int stage, const std::vector<TaskSpec>& specs,
                      const std::vector<Dataset>& task_datasets, const BenchmarkLayout& layout,
                      Strategy strategy, const TrainerConfig& cfg, std::uint64_t seed,
                      RunState& state, SuccessMatrix& matrix, std::vector<LossRecord>& loss_log);

// The full stage loop: teacher freezing, replay storage, regularizer anchors
// and per-stage evaluation, deterministic in (seed, config, strategy).
RunResult run_sequence(const std::vector<TaskSpec>& specs,
                       const std::vector<std::vector<Trajectory>>& demos,
                       const BenchmarkLayout& layout, Strategy strategy, const TrainerConfig& cfg,
                       const PolicyConfig& policy_cfg, std::uint64_t seed,
                       const StageEndHook& on_stage_end = {});

}  // namespace infovla
