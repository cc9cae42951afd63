#include "infovla/suite.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "infovla/errors.hpp"
#include "json.hpp"

namespace infovla {

namespace {

constexpr double kTargetCenters[4][2] = {{0.2, 0.2}, {0.8, 0.2}, {0.2, 0.8}, {0.8, 0.8}};

// (object, target) bindings ordered so nearby tasks reuse objects under
// different targets; this is what makes sequential adaptation interfere.
constexpr int kBindings[12][2] = {{0, 0}, {0, 1}, {1, 2}, {1, 3}, {0, 2}, {1, 0},
                                  {2, 1}, {2, 3}, {0, 3}, {1, 1}, {2, 0}, {2, 2}};

double dist(double ax, double ay, double bx, double by) {
    return std::hypot(ax - bx, ay - by);
}

}  // namespace

std::vector<TaskSpec> generate_tasks(int n, std::uint64_t seed) {
    if (n < 1) throw ContractError("generate_tasks: n must be >= 1");
    if (n > 12) throw ContractError("generate_tasks: at most 12 distinct bindings available");
    RngStream rng(RngStream::derive(seed, {0x5017e}));

    // nominal layout per color, shared by every task using that color
    double nominal[3][2];
    nominal[0][0] = rng.uniform(0.3, 0.4);
    nominal[0][1] = rng.uniform(0.45, 0.55);
    nominal[1][0] = rng.uniform(0.6, 0.7);
    nominal[1][1] = rng.uniform(0.45, 0.55);
    nominal[2][0] = rng.uniform(0.45, 0.55);
    nominal[2][1] = rng.uniform(0.3, 0.4);

    std::vector<TaskSpec> specs;
    specs.reserve(static_cast<size_t>(n));
    for (int t = 0; t < n; ++t) {
        const int object_color = kBindings[t][0];
        const int target_id = kBindings[t][1];
        TaskSpec spec;
        spec.task_id = t;
        spec.instruction = Instruction{0, object_color, target_id};
        spec.target_x = kTargetCenters[target_id][0];
        spec.target_y = kTargetCenters[target_id][1];

        SceneObject instructed;
        instructed.color = object_color;
        instructed.shape = object_color % 2;
        instructed.x = nominal[object_color][0];
        instructed.y = nominal[object_color][1];
        spec.objects.push_back(instructed);

        SceneObject distractor;
        distractor.color = (object_color + 1) % 3;
        distractor.shape = distractor.color % 2;
        distractor.x = nominal[distractor.color][0];
        distractor.y = nominal[distractor.color][1];
        spec.objects.push_back(distractor);

        specs.push_back(std::move(spec));
    }
    return specs;
}

SimState init_state(const TaskSpec& spec, RngStream& rng) {
    SimState s;
    s.grip_x = rng.uniform(0.3, 0.7);
    s.grip_y = rng.uniform(0.3, 0.7);
    s.object_pos.resize(spec.objects.size());
    for (size_t i = 0; i < spec.objects.size(); ++i) {
        const SceneObject& obj = spec.objects[i];
        for (int attempt = 0; attempt < 64; ++attempt) {
            const double x =
                std::clamp(obj.x + rng.uniform(-spec.layout_jitter, spec.layout_jitter), 0.08, 0.92);
            const double y =
                std::clamp(obj.y + rng.uniform(-spec.layout_jitter, spec.layout_jitter), 0.08, 0.92);
            s.object_pos[i] = {x, y};
            // the instructed object must start outside the target region so
            // success always requires a carry
            if (i != 0 || dist(x, y, spec.target_x, spec.target_y) > spec.target_radius + 0.06) {
                break;
            }
        }
    }
    return s;
}

bool success_predicate(const SimState& state, const TaskSpec& spec) {
    if (state.holding) return false;
    const auto& [ox, oy] = state.object_pos[0];
    return dist(ox, oy, spec.target_x, spec.target_y) <= spec.target_radius;
}

SimState sim_step(const SimState& state, const TaskSpec& spec, double ax, double ay) {
    SimState s = state;
    ax = std::clamp(ax, -1.0, 1.0);
    ay = std::clamp(ay, -1.0, 1.0);
    const double dx = ax * spec.max_step;
    const double dy = ay * spec.max_step;
    s.grip_x = std::clamp(s.grip_x + dx, 0.0, 1.0);
    s.grip_y = std::clamp(s.grip_y + dy, 0.0, 1.0);
    if (std::abs(dx) + std::abs(dy) > 1e-12) {
        s.heading = std::atan2(dy, dx) / 3.14159265358979323846;
    }
    if (s.holding) {
        s.object_pos[0] = {s.grip_x, s.grip_y};
        if (dist(s.grip_x, s.grip_y, spec.target_x, spec.target_y) <= spec.target_radius) {
            s.holding = false;  // release inside the region
        }
    } else if (dist(s.grip_x, s.grip_y, s.object_pos[0].first, s.object_pos[0].second) <=
               spec.grasp_radius) {
        s.holding = true;
        s.object_pos[0] = {s.grip_x, s.grip_y};
    }
    ++s.steps;
    s.success = s.success || success_predicate(s, spec);
    return s;
}

Observation render(const SimState& state, const TaskSpec& spec, const PolicyConfig& cfg) {
    Observation obs;
    obs.image.assign(static_cast<size_t>(cfg.image_c) * cfg.image_h * cfg.image_w, 0.0);
    auto paint = [&](int channel, int py, int px, double value) {
        const size_t idx =
            (static_cast<size_t>(channel) * cfg.image_h + py) * cfg.image_w + px;
        obs.image[idx] = std::max(obs.image[idx], value);
    };

    for (int py = 0; py < cfg.image_h; ++py) {
        for (int px = 0; px < cfg.image_w; ++px) {
            const double cx = (px + 0.5) / cfg.image_w;
            const double cy = (py + 0.5) / cfg.image_h;

            if (dist(cx, cy, spec.target_x, spec.target_y) <= spec.target_radius) {
                for (int c = 0; c < cfg.image_c; ++c) paint(c, py, px, 0.25);
            }
            for (size_t i = 0; i < spec.objects.size(); ++i) {
                const SceneObject& obj = spec.objects[i];
                const auto& [ox, oy] = state.object_pos[i];
                const bool hit =
                    obj.shape == 0
                        ? dist(cx, cy, ox, oy) <= 0.06
                        : std::max(std::abs(cx - ox), std::abs(cy - oy)) <= 0.055;
                if (hit) paint(obj.color % cfg.image_c, py, px, 1.0);
            }
            if (dist(cx, cy, state.grip_x, state.grip_y) <= 0.045) {
                for (int c = 0; c < cfg.image_c; ++c) paint(c, py, px, 0.4);
            }
        }
    }

    obs.proprio = {state.grip_x, state.grip_y, state.holding ? 1.0 : 0.0, state.heading};
    obs.proprio.resize(static_cast<size_t>(cfg.d_proprio), 0.0);
    return obs;
}

ActionChunk scripted_expert(const TaskSpec& spec, const SimState& state, const PolicyConfig& cfg) {
    ActionChunk chunk = ActionChunk::zeros(cfg.horizon, cfg.d_action);
    SimState s = state;
    for (int h = 0; h < cfg.horizon; ++h) {
        double ax = 0.0, ay = 0.0;
        if (!s.success) {
            const double gx = s.holding ? spec.target_x : s.object_pos[0].first;
            const double gy = s.holding ? spec.target_y : s.object_pos[0].second;
            ax = std::clamp((gx - s.grip_x) / spec.max_step, -1.0, 1.0);
            ay = std::clamp((gy - s.grip_y) / spec.max_step, -1.0, 1.0);
        }
        chunk.a[static_cast<size_t>(h) * cfg.d_action + 0] = ax;
        if (cfg.d_action > 1) chunk.a[static_cast<size_t>(h) * cfg.d_action + 1] = ay;
        s = sim_step(s, spec, ax, ay);
    }
    return chunk;
}

Trajectory expert_episode(const TaskSpec& spec, const PolicyConfig& cfg, RngStream& rng) {
    Trajectory traj;
    traj.task_id = spec.task_id;
    SimState s = init_state(spec, rng);
    // one sample per timestep: the horizon-H expert chunk from the current
    // state, then advance by its first action
    while (s.steps < spec.t_max && !s.success) {
        StepSample sample;
        sample.obs = render(s, spec, cfg);
        sample.instr = spec.instruction;
        sample.chunk = scripted_expert(spec, s, cfg);
        sample.task_id = spec.task_id;
        s = sim_step(s, spec, sample.chunk.a[0], sample.chunk.a[1]);
        traj.steps.push_back(std::move(sample));
    }
    traj.success = s.success;
    return traj;
}

std::vector<Trajectory> collect_demos(const TaskSpec& spec, const PolicyConfig& cfg, int n_demos,
                                      RngStream& rng) {
    if (n_demos < 1) throw ContractError("collect_demos: n_demos must be >= 1");
    std::vector<Trajectory> demos;
    const int budget = 4 * n_demos + 8;
    for (int attempt = 0; attempt < budget && static_cast<int>(demos.size()) < n_demos;
         ++attempt) {
        Trajectory t = expert_episode(spec, cfg, rng);
        if (t.success) demos.push_back(std::move(t));
    }
    if (static_cast<int>(demos.size()) < n_demos) {
        throw ContractError("collect_demos: expert could not reach the demo quota for task " +
                            std::to_string(spec.task_id));
    }
    return demos;
}

RolloutResult rollout(const PolicyParameters& params, const TaskSpec& spec, RngStream& rng,
                      int t_max, int euler_steps) {
    RolloutResult result;
    SimState s = init_state(spec, rng);
    result.trace.states.push_back(s);
    while (s.steps < t_max && !s.success) {
        Observation obs = render(s, spec, params.config());
        ActionChunk chunk =
            sample_actions(obs, spec.instruction, params, euler_steps, rng);
        for (int h = 0; h < params.config().horizon && s.steps < t_max && !s.success; ++h) {
            const double ax = chunk.a[static_cast<size_t>(h) * params.config().d_action];
            const double ay = chunk.a[static_cast<size_t>(h) * params.config().d_action + 1];
            s = sim_step(s, spec, ax, ay);
            result.trace.states.push_back(s);
            result.trace.actions.push_back(ax);
            result.trace.actions.push_back(ay);
        }
    }
    result.success = s.success;
    return result;
}

std::string suite_manifest_json(const std::vector<TaskSpec>& specs, std::uint64_t seed) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["suite_seed"] = seed;
    nlohmann::json tasks = nlohmann::json::array();
    for (const TaskSpec& s : specs) {
        nlohmann::json objs = nlohmann::json::array();
        for (const SceneObject& o : s.objects) {
            objs.push_back({{"color", o.color}, {"shape", o.shape}, {"x", o.x}, {"y", o.y}});
        }
        tasks.push_back({{"task_id", s.task_id},
                         {"verb", s.instruction.verb},
                         {"object", s.instruction.object},
                         {"target", s.instruction.target},
                         {"target_x", s.target_x},
                         {"target_y", s.target_y},
                         {"target_radius", s.target_radius},
                         {"t_max", s.t_max},
                         {"objects", std::move(objs)}});
    }
    j["tasks"] = std::move(tasks);
    return j.dump(2);
}

std::string trajectories_jsonl(const std::vector<Trajectory>& trajs) {
    std::ostringstream os;
    os << nlohmann::json{{"schema_version", 1}}.dump() << "\n";
    for (const Trajectory& t : trajs) {
        nlohmann::json steps = nlohmann::json::array();
        for (const StepSample& s : t.steps) {
            steps.push_back({{"image", s.obs.image},
                             {"proprio", s.obs.proprio},
                             {"verb", s.instr.verb},
                             {"object", s.instr.object},
                             {"target", s.instr.target},
                             {"horizon", s.chunk.horizon},
                             {"d_action", s.chunk.d_action},
                             {"actions", s.chunk.a}});
        }
        nlohmann::json j{{"task_id", t.task_id}, {"success", t.success}, {"steps", std::move(steps)}};
        os << j.dump() << "\n";
    }
    return os.str();
}

std::vector<Trajectory> parse_trajectories_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw IoError("trajectory file is empty");
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.value("schema_version", 0) != 1) {
        throw IoError("unsupported trajectory schema version");
    }
    std::vector<Trajectory> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        Trajectory t;
        t.task_id = j.at("task_id");
        t.success = j.at("success");
        for (const auto& sj : j.at("steps")) {
            StepSample s;
            s.obs.image = sj.at("image").get<std::vector<double>>();
            s.obs.proprio = sj.at("proprio").get<std::vector<double>>();
            s.instr = Instruction{sj.at("verb"), sj.at("object"), sj.at("target")};
            s.chunk = ActionChunk{sj.at("horizon"), sj.at("d_action"),
                                  sj.at("actions").get<std::vector<double>>()};
            s.task_id = t.task_id;
            t.steps.push_back(std::move(s));
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace infovla
