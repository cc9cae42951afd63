#include "infovla/trainer.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "infovla/errors.hpp"

using namespace infovla;

namespace {

PolicyConfig tiny_policy() {
    PolicyConfig cfg;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.d_latent = 10;
    cfg.horizon = 4;
    cfg.expert_hidden = 12;
    return cfg;
}

TrainerConfig tiny_trainer() {
    TrainerConfig cfg;
    cfg.iterations_base = 30;
    cfg.iterations_incremental = 20;
    cfg.batch_size = 4;
    cfg.eval_episodes = 4;
    cfg.euler_steps = 4;
    cfg.fisher_samples = 8;
    cfg.mi_k_bins = 4;
    cfg.mi_joint_hidden = 8;
    return cfg;
}

struct Bench {
    std::vector<TaskSpec> specs;
    std::vector<std::vector<Trajectory>> demos;
    BenchmarkLayout layout;
};

Bench tiny_bench(int n_tasks, const PolicyConfig& pcfg, std::uint64_t suite_seed = 7) {
    Bench b;
    b.specs = generate_tasks(n_tasks, suite_seed);
    for (TaskSpec& s : b.specs) s.t_max = 40;
    for (const TaskSpec& s : b.specs) {
        RngStream demo_rng(RngStream::derive(suite_seed, {0xde30, (std::uint64_t)s.task_id}));
        b.demos.push_back(collect_demos(s, pcfg, 3, demo_rng));
    }
    b.layout = BenchmarkLayout{n_tasks, 0, 1};
    return b;
}

}  // namespace

TEST_CASE("adam: zero gradients leave parameters unchanged") {
    Tensor x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    std::vector<std::pair<std::string, Tensor>> params{{"x", x}};
    AdamOptimizer opt(0.1);
    opt.step(params);  // no grad buffer at all
    CHECK(x.data() == std::vector<double>{1.0, -2.0, 0.5});

    backward(mul_scalar(sum(mul(x, Tensor::zeros({3}))), 1.0));
    opt.step(params);
    CHECK(x.data() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam: single-parameter quadratic converges") {
    Tensor theta = Tensor::scalar(-4.0, true);
    std::vector<std::pair<std::string, Tensor>> params{{"theta", theta}};
    AdamOptimizer opt(0.05);
    for (int i = 0; i < 500; ++i) {
        Tensor d = add_scalar(theta, -3.0);
        backward(mul(d, d));
        opt.step(params);
    }
    CHECK(std::abs(theta.value() - 3.0) < 1e-3);
    CHECK(opt.iterations() == 500);
}

TEST_CASE("adam: grads are cleared by the step, accumulation overflow aborts") {
    Tensor x = Tensor::scalar(1.0, true);
    std::vector<std::pair<std::string, Tensor>> params{{"x", x}};
    AdamOptimizer opt(0.01);
    backward(mul_scalar(x, 2.0));
    opt.step(params);
    CHECK_FALSE(x.has_grad());

    // two accumulated huge gradients overflow to inf in the leaf buffer; the
    // optimizer must reject them rather than poison the parameters
    backward(mul_scalar(x, 1e308));
    backward(mul_scalar(x, 1e308));
    CHECK(std::isinf(x.grad()[0]));
    CHECK_THROWS_AS(opt.step(params), NumericError);
}

TEST_CASE("benchmark layout: square and base-group stage maps") {
    BenchmarkLayout square{5, 0, 1};
    CHECK(square.n_stages() == 5);
    CHECK(square.first_stage(0) == 0);
    CHECK(square.first_stage(4) == 4);
    CHECK(square.stage_tasks(2) == std::vector<int>{2});

    BenchmarkLayout base{10, 5, 1};
    CHECK(base.n_stages() == 6);
    CHECK(base.stage_tasks(0) == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(base.stage_tasks(1) == std::vector<int>{5});
    CHECK(base.first_stage(9) == 5);
}

TEST_CASE("run_sequence: B0-2N1 fills the upper triangle deterministically") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);

    RunResult r1 = run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 11);
    CHECK(r1.matrix.n_tasks() == 2);
    CHECK(r1.matrix.n_stages() == 2);
    CHECK(r1.matrix.defined(0, 0));
    CHECK(r1.matrix.defined(0, 1));
    CHECK(r1.matrix.defined(1, 1));
    CHECK_FALSE(r1.matrix.defined(1, 0));
    CHECK(r1.reports.size() == 2);
    CHECK(r1.loss_log.size() == static_cast<size_t>(tcfg.iterations_base + tcfg.iterations_incremental));

    RunResult r2 = run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 11);
    for (int i = 0; i < 2; ++i) {
        for (int j = i; j < 2; ++j) CHECK(r1.matrix.at(i, j) == r2.matrix.at(i, j));
    }
    for (size_t k = 0; k < r1.loss_log.size(); ++k) {
        CHECK(r1.loss_log[k].total == r2.loss_log[k].total);
    }

    RunResult r3 = run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 12);
    bool any_diff = false;
    for (size_t k = 0; k < std::min(r1.loss_log.size(), r3.loss_log.size()); ++k) {
        any_diff |= r1.loss_log[k].total != r3.loss_log[k].total;
    }
    CHECK(any_diff);
}

TEST_CASE("stage 0 reduces every strategy to the plain flow objective") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);

    RunResult seq = run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 5);
    RunResult er = run_sequence(b.specs, b.demos, b.layout, Strategy::kEr, tcfg, pcfg, 5);
    RunResult ewc = run_sequence(b.specs, b.demos, b.layout, Strategy::kEwc, tcfg, pcfg, 5);
    RunResult ivla = run_sequence(b.specs, b.demos, b.layout, Strategy::kInfoVla, tcfg, pcfg, 5);

    for (int i = 0; i < tcfg.iterations_base; ++i) {
        CHECK(seq.loss_log[i].total == er.loss_log[i].total);
        CHECK(seq.loss_log[i].total == ewc.loss_log[i].total);
        CHECK(seq.loss_log[i].total == ivla.loss_log[i].total);
        CHECK_FALSE(seq.loss_log[i].loss_rac.has_value());
        CHECK_FALSE(ivla.loss_log[i].loss_rac.has_value());
    }
}

TEST_CASE("distillation with zero weights reproduces replay training exactly") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);

    TrainerConfig zeroed = tcfg;
    zeroed.weights.lambda_rac = 0.0;
    zeroed.weights.lambda_cmi = 0.0;
    RunResult er = run_sequence(b.specs, b.demos, b.layout, Strategy::kEr, tcfg, pcfg, 9);
    RunResult ivla = run_sequence(b.specs, b.demos, b.layout, Strategy::kInfoVla, zeroed, pcfg, 9);
    REQUIRE(er.loss_log.size() == ivla.loss_log.size());
    for (size_t k = 0; k < er.loss_log.size(); ++k) {
        CHECK(er.loss_log[k].total == ivla.loss_log[k].total);  // bitwise
    }
    for (int i = 0; i < 2; ++i) {
        for (int j = i; j < 2; ++j) CHECK(er.matrix.at(i, j) == ivla.matrix.at(i, j));
    }
}

TEST_CASE("distillation logs every loss component after stage 0") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);
    RunResult r = run_sequence(b.specs, b.demos, b.layout, Strategy::kInfoVla, tcfg, pcfg, 21);
    bool saw_stage1 = false;
    for (const LossRecord& rec : r.loss_log) {
        if (rec.stage == 0) continue;
        saw_stage1 = true;
        REQUIRE(rec.loss_rac.has_value());
        REQUIRE(rec.loss_mi.has_value());
        REQUIRE(rec.loss_mc.has_value());
        CHECK(*rec.loss_rac >= 0.0);
        CHECK(*rec.loss_mi <= 1e-9);
        CHECK(*rec.loss_mc >= -1e-9);
        const double expect = rec.loss_cl + tcfg.weights.lambda_rac * *rec.loss_rac +
                              tcfg.weights.lambda_cmi * (*rec.loss_mi + *rec.loss_mc);
        CHECK(rec.total == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(saw_stage1);
}

TEST_CASE("stage-boundary protocol: memory growth and teacher snapshots") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(3, pcfg);
    b.layout = BenchmarkLayout{3, 0, 1};

    std::vector<size_t> memory_sizes;
    std::vector<bool> teacher_present;
    std::vector<std::vector<double>> teacher_probe;
    Observation probe_obs = b.demos[0][0].steps[0].obs;
    Instruction probe_instr = b.demos[0][0].steps[0].instr;

    auto hook = [&](int stage, const RunResult&, const RunState& state) {
        memory_sizes.push_back(state.memory.size());
        teacher_present.push_back(state.teacher.has_value());
        if (state.teacher) {
            NoGradGuard guard;
            teacher_probe.push_back(encode(probe_obs, probe_instr, *state.teacher).z_fused.data());
            // the freshly frozen teacher coincides with the student
            auto student = encode(probe_obs, probe_instr, state.policy).z_fused.data();
            CHECK(teacher_probe.back() == student);
        }
    };

    run_sequence(b.specs, b.demos, b.layout, Strategy::kInfoVla, tcfg, pcfg, 31, hook);
    CHECK(memory_sizes == std::vector<size_t>{1, 2, 3});
    CHECK(teacher_present == std::vector<bool>{true, true, true});
    REQUIRE(teacher_probe.size() == 3);
    CHECK(teacher_probe[0] != teacher_probe[1]);  // training moved the student

    memory_sizes.clear();
    run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 31,
                 [&](int, const RunResult&, const RunState& state) {
                     memory_sizes.push_back(state.memory.size());
                     CHECK_FALSE(state.teacher.has_value());
                 });
    CHECK(memory_sizes == std::vector<size_t>{0, 0, 0});
}

TEST_CASE("ewc maintains one anchor per completed stage") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);
    std::vector<size_t> anchor_counts;
    run_sequence(b.specs, b.demos, b.layout, Strategy::kEwc, tcfg, pcfg, 41,
                 [&](int, const RunResult&, const RunState& state) {
                     anchor_counts.push_back(state.ewc_anchors.size());
                     for (const EwcAnchor& a : state.ewc_anchors) {
                         for (const auto& [name, f] : a.fisher) {
                             for (double x : f) CHECK(x >= 0.0);
                         }
                     }
                 });
    CHECK(anchor_counts == std::vector<size_t>{1, 2});
}

TEST_CASE("frozen encoder stays bitwise fixed through incremental training") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);
    std::vector<double> patch_after_stage0;
    run_sequence(b.specs, b.demos, b.layout, Strategy::kInfoVla, tcfg, pcfg, 51,
                 [&](int stage, const RunResult&, const RunState& state) {
                     if (stage == 0) {
                         patch_after_stage0 = state.policy.param("enc.patch_w").data();
                     } else {
                         CHECK(state.policy.param("enc.patch_w").data() == patch_after_stage0);
                     }
                 });
    REQUIRE_FALSE(patch_after_stage0.empty());
}

TEST_CASE("exploding training aborts with a numeric diagnostic") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    tcfg.learning_rate = 1e155;
    tcfg.iterations_base = 5;
    Bench b = tiny_bench(1, pcfg);
    b.layout = BenchmarkLayout{1, 0, 1};
    CHECK_THROWS_AS(
        run_sequence(b.specs, b.demos, b.layout, Strategy::kSequential, tcfg, pcfg, 3),
        NumericError);
}

TEST_CASE("run_stage rejects a missing teacher for distillation") {
    PolicyConfig pcfg = tiny_policy();
    TrainerConfig tcfg = tiny_trainer();
    Bench b = tiny_bench(2, pcfg);
    RunState state;
    RngStream rng(1);
    state.policy = PolicyParameters::init(pcfg, rng);
    std::vector<Dataset> ds;
    for (const auto& demo_set : b.demos) {
        Dataset d;
        for (const Trajectory& t : demo_set) d.insert(d.end(), t.steps.begin(), t.steps.end());
        ds.push_back(std::move(d));
    }
    SuccessMatrix m = b.layout.empty_matrix();
    std::vector<LossRecord> log;
    CHECK_THROWS_AS(run_stage(1, b.specs, ds, b.layout, Strategy::kInfoVla, tcfg, 1, state, m, log),
                    ContractError);
}

TEST_CASE("strategy names round-trip") {
    for (Strategy s : {Strategy::kMultitask, Strategy::kSequential, Strategy::kEr, Strategy::kEwc,
                       Strategy::kInfoVla}) {
        CHECK(strategy_from_name(strategy_name(s)) == s);
    }
    CHECK_THROWS_AS(strategy_from_name("nope"), ConfigError);
}
