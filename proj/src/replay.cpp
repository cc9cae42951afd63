#include "infovla/replay.hpp"

#include <cmath>
#include <sstream>

#include "infovla/errors.hpp"

namespace infovla {

void ReplayMemory::store(int task_id, const std::vector<Trajectory>& demos, RngStream& rng) {
    if (demos.empty()) throw ContractError("replay store: no demonstrations for task");
    if (entries_.count(task_id)) {
        throw ContractError("replay store: task " + std::to_string(task_id) + " already stored");
    }
    const int pick = rng.uniform_int(static_cast<int>(demos.size()));
    entries_[task_id] = Entry{pick, demos[static_cast<size_t>(pick)]};
}

const Trajectory& ReplayMemory::trajectory(int task_id) const {
    auto it = entries_.find(task_id);
    if (it == entries_.end()) {
        throw ContractError("replay: no trajectory stored for task " + std::to_string(task_id));
    }
    return it->second.trajectory;
}

int ReplayMemory::stored_index(int task_id) const {
    auto it = entries_.find(task_id);
    if (it == entries_.end()) {
        throw ContractError("replay: no trajectory stored for task " + std::to_string(task_id));
    }
    return it->second.source_index;
}

std::vector<const StepSample*> ReplayMemory::all_steps() const {
    std::vector<const StepSample*> out;
    for (const auto& [task_id, entry] : entries_) {
        for (const StepSample& s : entry.trajectory.steps) out.push_back(&s);
    }
    return out;
}

std::string ReplayMemory::manifest_json() const {
    std::ostringstream os;
    os << "[";
    bool first = true;
    for (const auto& [task_id, entry] : entries_) {
        if (!first) os << ",";
        first = false;
        os << "{\"task_id\":" << task_id << ",\"trajectory_index\":" << entry.source_index
           << ",\"n_steps\":" << entry.trajectory.steps.size() << "}";
    }
    os << "]";
    return os.str();
}

Batch make_batch(const Dataset& current, const ReplayMemory& memory, int batch_size,
                 double replay_fraction, RngStream& rng) {
    if (current.empty()) throw ContractError("make_batch: current dataset is empty");
    if (batch_size < 2) throw ContractError("make_batch: batch_size must be >= 2");
    if (replay_fraction < 0.0 || replay_fraction > 1.0) {
        throw DomainError("make_batch: replay_fraction must lie in [0,1]");
    }

    const int n_replay =
        memory.empty() ? 0 : static_cast<int>(std::ceil(replay_fraction * batch_size));

    Batch batch;
    batch.steps.reserve(static_cast<size_t>(batch_size));
    batch.replay_mask.reserve(static_cast<size_t>(batch_size));

    std::vector<const StepSample*> replay_steps;
    if (n_replay > 0) replay_steps = memory.all_steps();
    for (int i = 0; i < n_replay; ++i) {
        const StepSample* s = replay_steps[rng.uniform_int(static_cast<int>(replay_steps.size()))];
        batch.steps.push_back(*s);
        batch.replay_mask.push_back(true);
    }
    for (int i = n_replay; i < batch_size; ++i) {
        batch.steps.push_back(current[rng.uniform_int(static_cast<int>(current.size()))]);
        batch.replay_mask.push_back(false);
    }
    return batch;
}

}  // namespace infovla
