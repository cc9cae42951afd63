#pragma once

#include <string>
#include <vector>

#include "infovla/data.hpp"
#include "infovla/policy.hpp"
#include "infovla/rng.hpp"

namespace infovla {

// One rendered object: color selects the image channel, shape the footprint.
struct SceneObject {
    int color = 0;  // in [0, n_objects)
    int shape = 0;  // 0 = disk, 1 = square
    double x = 0.5;
    double y = 0.5;  // nominal layout center in the unit box
};

// Procedurally generated pick-and-place task. Episodes jitter object and
// gripper positions around the nominal layout; success requires the
// instructed object released inside the target region.
struct TaskSpec {
    int task_id = 0;
    std::vector<SceneObject> objects;  // [0] is the instructed object
    double target_x = 0.5;
    double target_y = 0.5;
    double target_radius = 0.15;
    Instruction instruction;
    int t_max = 80;
    double grasp_radius = 0.14;
    double max_step = 0.05;     // world units per unit action
    double layout_jitter = 0.18; // uniform jitter half-width around nominals
};

// Kinematic point-gripper world state.
struct SimState {
    double grip_x = 0.5;
    double grip_y = 0.5;
    bool holding = false;
    double heading = 0.0;  // normalized to [-1,1]
    std::vector<std::pair<double, double>> object_pos;
    int steps = 0;
    bool success = false;
};

struct RolloutTrace {
    std::vector<SimState> states;
    std::vector<double> actions;  // flattened per executed step
};

// Deterministic in `seed`: n mutually distinct specs engineered so tasks
// share objects and layout distributions but bind them to different targets.
std::vector<TaskSpec> generate_tasks(int n, std::uint64_t seed);

SimState init_state(const TaskSpec& spec, RngStream& rng);

// Applies one action step (clamped to [-1,1]^2): moves the gripper, carries a
// held object, auto-grasps the instructed object on proximity and releases it
// inside the target region. Returns the updated state with success latched.
SimState sim_step(const SimState& state, const TaskSpec& spec, double ax, double ay);

bool success_predicate(const SimState& state, const TaskSpec& spec);

// Rasterizes objects, the target region and the gripper into C x H x W and
// fills the proprio vector from the state. Deterministic.
Observation render(const SimState& state, const TaskSpec& spec, const PolicyConfig& cfg);

// Proportional-controller chunk: toward the object until grasped, then
// toward the target. Pure function of (spec, state).
ActionChunk scripted_expert(const TaskSpec& spec, const SimState& state, const PolicyConfig& cfg);

// Runs one expert episode; returns the trajectory of (obs, chunk, instr)
// samples at re-planning points with the terminal success flag.
Trajectory expert_episode(const TaskSpec& spec, const PolicyConfig& cfg, RngStream& rng);

// n_demos successful expert episodes; failed episodes are discarded with a
// bounded retry budget.
std::vector<Trajectory> collect_demos(const TaskSpec& spec, const PolicyConfig& cfg, int n_demos,
                                      RngStream& rng);

struct RolloutResult {
    bool success = false;
    RolloutTrace trace;
};

// Policy rollout with re-planning every horizon steps.
RolloutResult rollout(const PolicyParameters& params, const TaskSpec& spec, RngStream& rng,
                      int t_max, int euler_steps);

// JSON manifest of the generated suite (ids, instructions, layouts).
std::string suite_manifest_json(const std::vector<TaskSpec>& specs, std::uint64_t seed);

// JSON-lines serialization of per-task demo sets.
std::string trajectories_jsonl(const std::vector<Trajectory>& trajs);
std::vector<Trajectory> parse_trajectories_jsonl(const std::string& text);

}  // namespace infovla
