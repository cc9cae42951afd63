#include "infovla/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "infovla/errors.hpp"
#include "infovla/fileio.hpp"
#include "infovla/suite.hpp"
#include "infovla/trainer.hpp"
#include "json.hpp"

namespace infovla {

namespace {

namespace fs = std::filesystem;

std::string losses_csv(const std::vector<LossRecord>& log) {
    std::ostringstream os;
    os << "iter,loss_cl,loss_rac,loss_mi,loss_mc,total\n";
    char buf[32];
    auto cell = [&](const std::optional<double>& v) {
        if (v) {
            std::snprintf(buf, sizeof buf, "%.9g", *v);
            os << buf;
        }
    };
    int global_iter = 0;
    for (const LossRecord& r : log) {
        os << global_iter++ << ",";
        std::snprintf(buf, sizeof buf, "%.9g", r.loss_cl);
        os << buf << ",";
        cell(r.loss_rac);
        os << ",";
        cell(r.loss_mi);
        os << ",";
        cell(r.loss_mc);
        os << ",";
        std::snprintf(buf, sizeof buf, "%.9g", r.total);
        os << buf << "\n";
    }
    return os.str();
}

nlohmann::json metrics_to_json_obj(const Metrics& m) {
    return nlohmann::json::parse(metrics_json(m));
}

struct SuiteData {
    std::vector<TaskSpec> specs;
    std::vector<std::vector<Trajectory>> demos;
};

SuiteData build_suite(const ExperimentConfig& cfg) {
    SuiteData data;
    data.specs = generate_tasks(cfg.benchmark.n_tasks, cfg.benchmark.suite_seed);
    for (TaskSpec& s : data.specs) s.t_max = cfg.benchmark.t_max;
    for (const TaskSpec& s : data.specs) {
        RngStream demo_rng(
            RngStream::derive(cfg.benchmark.suite_seed, {0xde305, (std::uint64_t)s.task_id}));
        data.demos.push_back(collect_demos(s, cfg.policy, cfg.benchmark.n_demos, demo_rng));
    }
    return data;
}

Metrics run_one_seed(const ExperimentConfig& cfg, const SuiteData& suite, Strategy strategy,
                     std::uint64_t seed, const std::string& seed_dir) {
    auto hook = [&](int stage, const RunResult& partial, const RunState& state) {
        write_file_atomic(seed_dir + "/R.csv", partial.matrix.to_csv());
        write_file_atomic(seed_dir + "/losses.csv", losses_csv(partial.loss_log));
        write_file_atomic(seed_dir + "/memory_manifest.json", state.memory.manifest_json());
        state.policy.save(seed_dir + "/checkpoints/stage_" + std::to_string(stage) + ".json");
    };
    RunResult result = run_sequence(suite.specs, suite.demos, cfg.layout(), strategy, cfg.trainer,
                                    cfg.policy, seed, hook);
    Metrics m = compute_metrics(result.matrix);
    write_file_atomic(seed_dir + "/metrics.json", metrics_json(m));
    return m;
}

void accumulate_mean_std(StrategyOutcome& out) {
    auto collect = [&](auto pick) {
        std::vector<double> vals;
        for (const SeedMetrics& sm : out.per_seed) vals.push_back(pick(sm.metrics));
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= vals.size();
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        const double sd = vals.size() > 1 ? std::sqrt(var / (vals.size() - 1)) : 0.0;
        return std::pair<double, double>(mean, sd);
    };
    auto [auc_m, auc_s] = collect([](const Metrics& m) { return m.auc; });
    auto [fwt_m, fwt_s] = collect([](const Metrics& m) { return m.fwt; });
    auto [nbt_m, nbt_s] = collect([](const Metrics& m) { return m.nbt; });
    auto [faa_m, faa_s] = collect([](const Metrics& m) { return m.faa; });
    auto [aa_m, aa_s] = collect([](const Metrics& m) { return m.aa; });
    out.mean.auc = auc_m;
    out.mean.fwt = fwt_m;
    out.mean.nbt = nbt_m;
    out.mean.faa = faa_m;
    out.mean.aa = aa_m;
    out.stddev.auc = auc_s;
    out.stddev.fwt = fwt_s;
    out.stddev.nbt = nbt_s;
    out.stddev.faa = faa_s;
    out.stddev.aa = aa_s;
}

nlohmann::json outcome_json(const StrategyOutcome& out) {
    nlohmann::json j;
    j["strategy"] = out.strategy;
    nlohmann::json per_seed = nlohmann::json::array();
    for (const SeedMetrics& sm : out.per_seed) {
        nlohmann::json e = metrics_to_json_obj(sm.metrics);
        e["seed"] = sm.seed;
        per_seed.push_back(std::move(e));
    }
    j["per_seed"] = std::move(per_seed);
    j["mean"] = {{"auc", out.mean.auc},
                 {"fwt", out.mean.fwt},
                 {"nbt", out.mean.nbt},
                 {"faa", out.mean.faa},
                 {"aa", out.mean.aa}};
    j["stddev"] = {{"auc", out.stddev.auc},
                   {"fwt", out.stddev.fwt},
                   {"nbt", out.stddev.nbt},
                   {"faa", out.stddev.faa},
                   {"aa", out.stddev.aa}};
    return j;
}

std::string outcome_table(const std::vector<StrategyOutcome>& outcomes) {
    std::ostringstream os;
    char buf[192];
    std::snprintf(buf, sizeof buf, "%-12s %-13s %-13s %-14s %-13s %-13s\n", "strategy", "AUC",
                  "FWT", "NBT", "FAA", "AA");
    os << buf;
    for (const StrategyOutcome& o : outcomes) {
        std::snprintf(buf, sizeof buf,
                      "%-12s %5.3f+-%.3f  %5.3f+-%.3f  %+5.3f+-%.3f  %5.3f+-%.3f  %5.3f+-%.3f\n",
                      o.strategy.c_str(), o.mean.auc, o.stddev.auc, o.mean.fwt, o.stddev.fwt,
                      o.mean.nbt, o.stddev.nbt, o.mean.faa, o.stddev.faa, o.mean.aa, o.stddev.aa);
        os << buf;
    }
    return os.str();
}

const StrategyOutcome* find_strategy(const std::vector<StrategyOutcome>& outcomes,
                                     const std::string& name) {
    for (const StrategyOutcome& o : outcomes) {
        if (o.strategy == name) return &o;
    }
    return nullptr;
}

std::string ordering_lines(const std::vector<StrategyOutcome>& outcomes) {
    std::ostringstream os;
    const StrategyOutcome* ivla = find_strategy(outcomes, "infovla");
    const StrategyOutcome* er = find_strategy(outcomes, "er");
    const StrategyOutcome* seq = find_strategy(outcomes, "sequential");
    const StrategyOutcome* multi = find_strategy(outcomes, "multitask");
    char buf[160];
    if (ivla && er) {
        std::snprintf(buf, sizeof buf, "ordering: FAA infovla %.3f >= er %.3f: %s\n",
                      ivla->mean.faa, er->mean.faa, ivla->mean.faa >= er->mean.faa ? "yes" : "NO");
        os << buf;
    }
    if (er && seq) {
        std::snprintf(buf, sizeof buf, "ordering: FAA er %.3f >= sequential %.3f: %s\n",
                      er->mean.faa, seq->mean.faa, er->mean.faa >= seq->mean.faa ? "yes" : "NO");
        os << buf;
    }
    if (ivla && seq) {
        std::snprintf(buf, sizeof buf,
                      "ordering: FAA infovla - sequential = %+.1f pp (gate >= 15): %s\n",
                      100.0 * (ivla->mean.faa - seq->mean.faa),
                      ivla->mean.faa - seq->mean.faa >= 0.15 ? "yes" : "NO");
        os << buf;
    }
    if (multi) {
        bool highest = true;
        for (const StrategyOutcome& o : outcomes) highest &= multi->mean.faa >= o.mean.faa;
        std::snprintf(buf, sizeof buf, "ordering: multitask FAA %.3f highest: %s, |NBT| %.3f\n",
                      multi->mean.faa, highest ? "yes" : "NO", std::abs(multi->mean.nbt));
        os << buf;
    }
    return os.str();
}

StrategyOutcome run_strategy(const ExperimentConfig& cfg, const SuiteData& suite,
                             const std::string& strategy_name_str, const std::string& out_dir) {
    StrategyOutcome outcome;
    outcome.strategy = strategy_name_str;
    const Strategy strategy = strategy_from_name(strategy_name_str);
    for (std::uint64_t seed : cfg.seeds) {
        const std::string seed_dir = out_dir + "/seed_" + std::to_string(seed);
        fs::create_directories(seed_dir + "/checkpoints");
        outcome.per_seed.push_back({seed, run_one_seed(cfg, suite, strategy, seed, seed_dir)});
    }
    accumulate_mean_std(outcome);
    return outcome;
}

void write_suite_artifacts(const ExperimentConfig& cfg, const SuiteData& suite,
                           const std::string& out_dir) {
    fs::create_directories(out_dir);
    write_file_atomic(out_dir + "/config.json", cfg.to_json().dump(2));
    write_file_atomic(out_dir + "/suite_manifest.json",
                      suite_manifest_json(suite.specs, cfg.benchmark.suite_seed));
    if (cfg.save_demos) {
        for (size_t t = 0; t < suite.demos.size(); ++t) {
            write_file_atomic(out_dir + "/demos/task_" + std::to_string(t) + ".jsonl",
                              trajectories_jsonl(suite.demos[t]));
        }
    }
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    SuiteData suite = build_suite(cfg);
    write_suite_artifacts(cfg, suite, cfg.output_dir);

    ExperimentOutcome outcome;
    outcome.strategies.push_back(run_strategy(cfg, suite, cfg.strategy, cfg.output_dir));
    write_file_atomic(cfg.output_dir + "/report.json",
                      outcome_json(outcome.strategies[0]).dump(2));
    outcome.report_text = outcome_table(outcome.strategies);
    return outcome;
}

ExperimentOutcome compare_experiment(const ExperimentConfig& cfg,
                                     const std::vector<std::string>& strategies) {
    if (strategies.empty()) throw ConfigError("compare: needs at least one strategy");
    for (const std::string& s : strategies) strategy_from_name(s);

    SuiteData suite = build_suite(cfg);
    write_suite_artifacts(cfg, suite, cfg.output_dir);

    ExperimentOutcome outcome;
    for (const std::string& s : strategies) {
        outcome.strategies.push_back(run_strategy(cfg, suite, s, cfg.output_dir + "/" + s));
    }
    nlohmann::json cmp;
    cmp["strategies"] = nlohmann::json::array();
    for (const StrategyOutcome& o : outcome.strategies) {
        cmp["strategies"].push_back(outcome_json(o));
    }
    write_file_atomic(cfg.output_dir + "/comparison.json", cmp.dump(2));
    outcome.report_text = outcome_table(outcome.strategies) + ordering_lines(outcome.strategies);
    return outcome;
}

Metrics metrics_from_csv_file(const std::string& csv_path, const std::string& out_json_path) {
    SuccessMatrix r = SuccessMatrix::from_csv(read_file(csv_path));
    Metrics m = compute_metrics(r);
    if (!out_json_path.empty()) write_file_atomic(out_json_path, metrics_json(m));
    return m;
}

}  // namespace infovla
