#include "infovla/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "infovla/errors.hpp"

namespace infovla {

namespace {

// rng stream labels; every consumer derives an independent stream so run
// composition never shifts another component's draws
enum : std::uint64_t {
    kStreamPolicyInit = 1,
    kStreamTrain = 2,
    kStreamEval = 3,
    kStreamStore = 4,
    kStreamFisher = 5,
    kStreamEstimator = 6,
};

Dataset flatten_steps(const std::vector<std::vector<Trajectory>>& demos,
                      const std::vector<int>& task_ids) {
    Dataset out;
    for (int task : task_ids) {
        for (const Trajectory& t : demos[static_cast<size_t>(task)]) {
            out.insert(out.end(), t.steps.begin(), t.steps.end());
        }
    }
    return out;
}

}  // namespace

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::kMultitask: return "multitask";
        case Strategy::kSequential: return "sequential";
        case Strategy::kEr: return "er";
        case Strategy::kEwc: return "ewc";
        case Strategy::kInfoVla: return "infovla";
    }
    return "unknown";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "multitask") return Strategy::kMultitask;
    if (name == "sequential") return Strategy::kSequential;
    if (name == "er") return Strategy::kEr;
    if (name == "ewc") return Strategy::kEwc;
    if (name == "infovla") return Strategy::kInfoVla;
    throw ConfigError("strategy: unknown value '" + name + "'");
}

int BenchmarkLayout::n_stages() const {
    const int incremental = n_tasks - base_count;
    return (base_count > 0 ? 1 : 0) + incremental / per_step;
}

int BenchmarkLayout::first_stage(int task) const {
    if (task < base_count) return 0;
    return (base_count > 0 ? 1 : 0) + (task - base_count) / per_step;
}

std::vector<int> BenchmarkLayout::stage_tasks(int stage) const {
    std::vector<int> out;
    for (int t = 0; t < n_tasks; ++t) {
        if (first_stage(t) == stage) out.push_back(t);
    }
    return out;
}

SuccessMatrix BenchmarkLayout::empty_matrix() const {
    return SuccessMatrix::bi_knm(n_tasks, base_count, per_step);
}

StageReport run_stage(int stage, const std::vector<TaskSpec>& specs,
                      const std::vector<Dataset>& task_datasets, const BenchmarkLayout& layout,
                      Strategy strategy, const TrainerConfig& cfg, std::uint64_t seed,
                      RunState& state, SuccessMatrix& matrix, std::vector<LossRecord>& loss_log) {
    const auto t_start = std::chrono::steady_clock::now();
    const auto floor_events_before = numeric_diagnostics().kl_floor_events;

    const bool distill = strategy == Strategy::kInfoVla && stage > 0;
    if (strategy == Strategy::kInfoVla && stage > 0 && !state.teacher.has_value()) {
        throw ContractError("run_stage: distillation requires a frozen teacher after stage 0");
    }
    const LossWeights& w = cfg.weights;
    const bool use_rac = distill && w.lambda_rac != 0.0;
    const bool use_cmi = distill && w.lambda_cmi != 0.0;
    const bool use_replay =
        (strategy == Strategy::kEr || strategy == Strategy::kInfoVla) && stage > 0;

    // current-stage data; multitask instead sees every task in the run
    std::vector<int> current_tasks = layout.stage_tasks(stage);
    std::vector<int> train_tasks = current_tasks;
    if (strategy == Strategy::kMultitask) {
        train_tasks.clear();
        for (int t = 0; t < layout.n_tasks; ++t) train_tasks.push_back(t);
    }
    Dataset train_data;
    for (int task : train_tasks) {
        train_data.insert(train_data.end(), task_datasets[static_cast<size_t>(task)].begin(),
                          task_datasets[static_cast<size_t>(task)].end());
    }
    if (train_data.empty()) throw ContractError("run_stage: no training data");

    MiEstimatorParameters estimator;
    if (use_cmi) {
        RngStream est_rng(RngStream::derive(seed, {kStreamEstimator, (std::uint64_t)stage}));
        estimator = MiEstimatorParameters::init(state.policy.config().d_latent, cfg.mi_k_bins,
                                                cfg.mi_joint_hidden, est_rng);
    }

    AdamOptimizer opt(cfg.learning_rate);
    RngStream train_rng(RngStream::derive(seed, {kStreamTrain, (std::uint64_t)stage}));
    const int iterations = stage == 0 ? cfg.iterations_base : cfg.iterations_incremental;
    const ReplayMemory empty_memory;

    for (int iter = 0; iter < iterations; ++iter) {
        Batch batch = make_batch(train_data, use_replay ? state.memory : empty_memory,
                                 cfg.batch_size, cfg.replay_fraction, train_rng);

        std::vector<LatentPair> student_latents;
        student_latents.reserve(batch.size());
        Tensor cl_acc;
        for (const StepSample& s : batch.steps) {
            LatentPair lat = encode(s.obs, s.instr, state.policy);
            Tensor term = flow_matching_loss_latent(s.chunk, lat, state.policy, train_rng);
            cl_acc = cl_acc.defined() ? add(cl_acc, term) : term;
            if (use_rac || use_cmi) student_latents.push_back(std::move(lat));
        }
        Tensor loss_cl = mul_scalar(cl_acc, 1.0 / static_cast<double>(batch.size()));

        Tensor loss_rac, loss_mi, loss_mc, loss_cmi;
        if (use_rac || use_cmi) {
            std::vector<LatentPair> anchor_latents;
            anchor_latents.reserve(batch.size());
            {
                NoGradGuard guard;
                for (const StepSample& s : batch.steps) {
                    anchor_latents.push_back(encode(s.obs, s.instr, *state.teacher));
                }
            }
            if (use_rac) {
                loss_rac = rac_loss(student_latents, anchor_latents, batch.replay_mask,
                                    w.tau_temp, w.rac_negatives);
            }
            if (use_cmi) {
                loss_mi = mi_loss(anchor_latents, student_latents, estimator);
                loss_mc = mc_loss(anchor_latents, student_latents, estimator);
                loss_cmi = add(loss_mi, loss_mc);
            }
        }

        Tensor total = total_loss(loss_cl, loss_rac, loss_cmi, use_rac ? w.lambda_rac : 0.0,
                                  use_cmi ? w.lambda_cmi : 0.0);
        if (strategy == Strategy::kEwc && !state.ewc_anchors.empty()) {
            for (const EwcAnchor& anchor : state.ewc_anchors) {
                total = add(total, ewc_penalty(state.policy, anchor, w.lambda_ewc));
            }
        }

        backward(total);
        auto params = state.policy.trainable();
        if (use_cmi) {
            for (auto& [name, t] : estimator.trainable()) params.emplace_back("mi." + name, t);
        }
        try {
            opt.step(params);
        } catch (const NumericError& e) {
            throw NumericError("stage " + std::to_string(stage) + " iter " + std::to_string(iter) +
                               ": " + e.what());
        }

        LossRecord rec;
        rec.stage = stage;
        rec.iter = iter;
        rec.loss_cl = loss_cl.value();
        if (loss_rac.defined()) rec.loss_rac = loss_rac.value();
        if (loss_mi.defined()) rec.loss_mi = loss_mi.value();
        if (loss_mc.defined()) rec.loss_mc = loss_mc.value();
        rec.total = total.value();
        loss_log.push_back(rec);
    }

    // post-stage evaluation of every task introduced so far
    StageReport report;
    report.stage = stage;
    report.seed = seed;
    for (int task = 0; task < layout.n_tasks; ++task) {
        if (layout.first_stage(task) > stage) continue;
        int ok = 0;
        for (int ep = 0; ep < cfg.eval_episodes; ++ep) {
            RngStream eval_rng(RngStream::derive(
                seed, {kStreamEval, (std::uint64_t)stage, (std::uint64_t)task, (std::uint64_t)ep}));
            RolloutResult r = rollout(state.policy, specs[static_cast<size_t>(task)], eval_rng,
                                      specs[static_cast<size_t>(task)].t_max, cfg.euler_steps);
            ok += r.success ? 1 : 0;
        }
        const double rate = static_cast<double>(ok) / cfg.eval_episodes;
        matrix.set(task, stage, rate);
        report.task_success.emplace_back(task, rate);
    }

    report.kl_floor_events = numeric_diagnostics().kl_floor_events - floor_events_before;
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

RunResult run_sequence(const std::vector<TaskSpec>& specs,
                       const std::vector<std::vector<Trajectory>>& demos,
                       const BenchmarkLayout& layout, Strategy strategy, const TrainerConfig& cfg,
                       const PolicyConfig& policy_cfg, std::uint64_t seed,
                       const StageEndHook& on_stage_end) {
    if (specs.empty() || specs.size() != static_cast<size_t>(layout.n_tasks)) {
        throw ContractError("run_sequence: task specs do not match the layout");
    }
    if (demos.size() != specs.size()) {
        throw ContractError("run_sequence: demo sets do not match the layout");
    }

    std::vector<Dataset> task_datasets(specs.size());
    for (size_t t = 0; t < specs.size(); ++t) {
        for (const Trajectory& traj : demos[t]) {
            task_datasets[t].insert(task_datasets[t].end(), traj.steps.begin(), traj.steps.end());
        }
        if (task_datasets[t].empty()) {
            throw ContractError("run_sequence: task " + std::to_string(specs[t].task_id) +
                                " has no demonstrations");
        }
    }

    RunResult result;
    result.matrix = layout.empty_matrix();

    RunState state;
    {
        RngStream init_rng(RngStream::derive(seed, {kStreamPolicyInit}));
        state.policy = PolicyParameters::init(policy_cfg, init_rng);
    }

    const bool keeps_memory = strategy == Strategy::kEr || strategy == Strategy::kInfoVla;
    for (int stage = 0; stage < layout.n_stages(); ++stage) {
        StageReport report = run_stage(stage, specs, task_datasets, layout, strategy, cfg, seed,
                                       state, result.matrix, result.loss_log);
        result.reports.push_back(std::move(report));

        // stage-boundary protocol: freeze, remember, anchor
        if (stage == 0) state.policy.freeze_encoder();
        if (strategy == Strategy::kInfoVla) state.teacher = state.policy.snapshot_teacher();
        if (keeps_memory) {
            for (int task : layout.stage_tasks(stage)) {
                RngStream store_rng(
                    RngStream::derive(seed, {kStreamStore, (std::uint64_t)stage, (std::uint64_t)task}));
                state.memory.store(task, demos[static_cast<size_t>(task)], store_rng);
            }
        }
        if (strategy == Strategy::kEwc) {
            Dataset stage_data;
            for (int task : layout.stage_tasks(stage)) {
                stage_data.insert(stage_data.end(), task_datasets[static_cast<size_t>(task)].begin(),
                                  task_datasets[static_cast<size_t>(task)].end());
            }
            RngStream fisher_rng(RngStream::derive(seed, {kStreamFisher, (std::uint64_t)stage}));
            EwcAnchor anchor;
            anchor.fisher = fisher_diagonal(state.policy, stage_data, cfg.fisher_samples, fisher_rng);
            for (const auto& [name, t] : state.policy.trainable()) {
                anchor.reference[name] = t.data();
            }
            state.ewc_anchors.push_back(std::move(anchor));
        }

        if (on_stage_end) on_stage_end(stage, result, state);
    }
    return result;
}

}  // namespace infovla
