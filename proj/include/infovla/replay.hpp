#pragma once

#include <map>
#include <string>
#include <vector>

#include "infovla/data.hpp"
#include "infovla/rng.hpp"

namespace infovla {

struct BatchSample {
    StepSample step;
    bool from_replay = false;
};

struct Batch {
    std::vector<StepSample> steps;
    std::vector<bool> replay_mask;
    size_t size() const { return steps.size(); }
};

// Memory buffer holding exactly one stored trajectory per completed task.
// Entries are immutable once inserted.
class ReplayMemory {
  public:
    // Uniformly selects one of `demos` and stores it under `task_id`.
    void store(int task_id, const std::vector<Trajectory>& demos, RngStream& rng);

    bool contains(int task_id) const { return entries_.count(task_id) > 0; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    const Trajectory& trajectory(int task_id) const;
    int stored_index(int task_id) const;

    // All stored steps flattened in task order; the sampling unit for replay.
    std::vector<const StepSample*> all_steps() const;

    // JSON manifest: [{task_id, trajectory_index, n_steps}, ...].
    std::string manifest_json() const;

  private:
    struct Entry {
        int source_index = 0;
        Trajectory trajectory;
    };
    std::map<int, Entry> entries_;
};

// Composes a training batch: ceil(replay_fraction * batch_size) uniform draws
// over stored replay steps (when memory is nonempty), remainder uniform over
// the current dataset. The mask marks memory-sourced entries.
Batch make_batch(const Dataset& current, const ReplayMemory& memory, int batch_size,
                 double replay_fraction, RngStream& rng);

}  // namespace infovla
