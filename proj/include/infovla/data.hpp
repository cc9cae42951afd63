#pragma once

#include <vector>

#include "infovla/policy.hpp"

namespace infovla {

// One training sample: the observation at a re-planning point, the
// instruction, and the expert action chunk executed from there.
struct StepSample {
    Observation obs;
    Instruction instr;
    ActionChunk chunk;
    int task_id = 0;
};

// One demonstration episode as a stream of step samples.
struct Trajectory {
    int task_id = 0;
    std::vector<StepSample> steps;
    bool success = false;
};

using Dataset = std::vector<StepSample>;

}  // namespace infovla
