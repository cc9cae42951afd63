#include "infovla/config.hpp"

#include <cstdlib>
#include <filesystem>

#include "infovla/errors.hpp"

namespace infovla {

namespace {

const char* kCiPreset = R"JSON({
  "benchmark": {"n_tasks": 5, "base_count": 0, "steps": 5, "per_step": 1,
                "suite_seed": 7, "n_demos": 24, "t_max": 80},
  "strategy": "infovla",
  "seeds": [1, 2, 3],
  "lambda_rac": 0.1, "lambda_cmi": 0.1, "tau_temp": 0.07, "lambda_ewc": 1000.0,
  "rac_negatives": "anchors",
  "replay_fraction": 0.5,
  "iterations": {"base": 10000, "incremental": 4000},
  "batch_size": 16,
  "learning_rate": 0.0003,
  "eval_episodes": 20,
  "euler_steps": 10,
  "fisher_samples": 64,
  "policy": {"image_c": 3, "image_h": 16, "image_w": 16, "patch": 4, "d_latent": 32,
             "d_proprio": 4, "horizon": 8, "d_action": 2, "expert_hidden": 64,
             "mi_k_bins": 8, "mi_joint_hidden": 32},
  "output_dir": "runs/ci",
  "save_demos": false
})JSON";

const char* kPaperPreset = R"JSON({
  "benchmark": {"n_tasks": 10, "base_count": 5, "steps": 5, "per_step": 1,
                "suite_seed": 7, "n_demos": 24, "t_max": 80},
  "strategy": "infovla",
  "seeds": [1, 2, 3],
  "lambda_rac": 0.1, "lambda_cmi": 0.1, "tau_temp": 0.07, "lambda_ewc": 1000.0,
  "rac_negatives": "anchors",
  "replay_fraction": 0.5,
  "iterations": {"base": 3000, "incremental": 600},
  "batch_size": 16,
  "learning_rate": 0.0003,
  "eval_episodes": 20,
  "euler_steps": 10,
  "fisher_samples": 64,
  "policy": {"image_c": 3, "image_h": 16, "image_w": 16, "patch": 4, "d_latent": 32,
             "d_proprio": 4, "horizon": 8, "d_action": 2, "expert_hidden": 64,
             "mi_k_bins": 8, "mi_joint_hidden": 32},
  "output_dir": "runs/paper",
  "save_demos": false
})JSON";

[[noreturn]] void fail(const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& scope, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(scope.empty() ? key : scope + "." + key, "wrong type");
    }
}

void merge_patch(nlohmann::json& base, const nlohmann::json& patch) {
    if (!patch.is_object()) {
        base = patch;
        return;
    }
    if (!base.is_object()) base = nlohmann::json::object();
    for (const auto& [key, value] : patch.items()) {
        if (value.is_object()) {
            merge_patch(base[key], value);
        } else {
            base[key] = value;
        }
    }
}

}  // namespace

std::string preset_json_text(const std::string& name) {
    if (name == "ci") return kCiPreset;
    if (name == "paper") return kPaperPreset;
    throw ConfigError("preset: unknown preset '" + name + "' (expected \"ci\" or \"paper\")");
}

BenchmarkLayout ExperimentConfig::layout() const {
    return BenchmarkLayout{benchmark.n_tasks, benchmark.base_count, benchmark.per_step};
}

ExperimentConfig config_from_json(const nlohmann::json& input) {
    // start from the CI preset (or the named one), then overlay the input
    nlohmann::json j = nlohmann::json::parse(kCiPreset);
    if (input.contains("preset")) {
        if (!input.at("preset").is_string()) fail("preset", "must be a string");
        j = nlohmann::json::parse(preset_json_text(input.at("preset").get<std::string>()));
    }
    nlohmann::json overlay = input;
    overlay.erase("preset");
    merge_patch(j, overlay);

    ExperimentConfig cfg;
    const auto& b = j.value("benchmark", nlohmann::json::object());
    cfg.benchmark.n_tasks = get_field(b, "benchmark", "n_tasks", 5);
    cfg.benchmark.base_count = get_field(b, "benchmark", "base_count", 0);
    cfg.benchmark.steps = get_field(b, "benchmark", "steps", cfg.benchmark.n_tasks);
    cfg.benchmark.per_step = get_field(b, "benchmark", "per_step", 1);
    cfg.benchmark.suite_seed = get_field<std::uint64_t>(b, "benchmark", "suite_seed", 7);
    cfg.benchmark.n_demos = get_field(b, "benchmark", "n_demos", 24);
    cfg.benchmark.t_max = get_field(b, "benchmark", "t_max", 80);

    cfg.strategy = get_field<std::string>(j, "", "strategy", "infovla");
    cfg.seeds = get_field<std::vector<std::uint64_t>>(j, "", "seeds", {1, 2, 3});

    cfg.trainer.weights.lambda_rac = get_field(j, "", "lambda_rac", 0.1);
    cfg.trainer.weights.lambda_cmi = get_field(j, "", "lambda_cmi", 0.1);
    cfg.trainer.weights.tau_temp = get_field(j, "", "tau_temp", 0.07);
    cfg.trainer.weights.lambda_ewc = get_field(j, "", "lambda_ewc", 1000.0);
    const std::string negatives = get_field<std::string>(j, "", "rac_negatives", "anchors");
    if (negatives == "anchors") {
        cfg.trainer.weights.rac_negatives = RacNegatives::kAnchors;
    } else if (negatives == "students") {
        cfg.trainer.weights.rac_negatives = RacNegatives::kStudents;
    } else {
        fail("rac_negatives", "expected \"anchors\" or \"students\"");
    }
    cfg.trainer.replay_fraction = get_field(j, "", "replay_fraction", 0.5);
    const auto& iters = j.value("iterations", nlohmann::json::object());
    cfg.trainer.iterations_base = get_field(iters, "iterations", "base", 10000);
    cfg.trainer.iterations_incremental = get_field(iters, "iterations", "incremental", 4000);
    cfg.trainer.batch_size = get_field(j, "", "batch_size", 16);
    cfg.trainer.learning_rate = get_field(j, "", "learning_rate", 3e-4);
    cfg.trainer.eval_episodes = get_field(j, "", "eval_episodes", 20);
    cfg.trainer.euler_steps = get_field(j, "", "euler_steps", 10);
    cfg.trainer.fisher_samples = get_field(j, "", "fisher_samples", 64);

    const auto& p = j.value("policy", nlohmann::json::object());
    cfg.policy.image_c = get_field(p, "policy", "image_c", 3);
    cfg.policy.image_h = get_field(p, "policy", "image_h", 16);
    cfg.policy.image_w = get_field(p, "policy", "image_w", 16);
    cfg.policy.patch = get_field(p, "policy", "patch", 4);
    cfg.policy.d_latent = get_field(p, "policy", "d_latent", 32);
    cfg.policy.d_proprio = get_field(p, "policy", "d_proprio", 4);
    cfg.policy.horizon = get_field(p, "policy", "horizon", 8);
    cfg.policy.d_action = get_field(p, "policy", "d_action", 2);
    cfg.policy.expert_hidden = get_field(p, "policy", "expert_hidden", 64);
    cfg.trainer.mi_k_bins = get_field(p, "policy", "mi_k_bins", 8);
    cfg.trainer.mi_joint_hidden = get_field(p, "policy", "mi_joint_hidden", 32);

    cfg.output_dir = get_field<std::string>(j, "", "output_dir", "runs/out");
    cfg.save_demos = get_field(j, "", "save_demos", false);

    // environment variable only relocates the output root
    if (const char* root = std::getenv("INFOVLA_OUTPUT_ROOT")) {
        std::filesystem::path out(cfg.output_dir);
        if (out.is_relative()) cfg.output_dir = (std::filesystem::path(root) / out).string();
    }

    // ---- validation ----
    if (cfg.benchmark.n_tasks < 1) fail("benchmark.n_tasks", "must be >= 1");
    if (cfg.benchmark.n_tasks > 12) fail("benchmark.n_tasks", "suite supports at most 12 tasks");
    if (cfg.benchmark.base_count < 0 || cfg.benchmark.base_count > cfg.benchmark.n_tasks) {
        fail("benchmark.base_count", "must lie in [0, n_tasks]");
    }
    if (cfg.benchmark.per_step < 1) fail("benchmark.per_step", "must be >= 1");
    if (cfg.benchmark.base_count + cfg.benchmark.steps * cfg.benchmark.per_step !=
        cfg.benchmark.n_tasks) {
        fail("benchmark.steps", "base_count + steps*per_step must equal n_tasks");
    }
    if (cfg.benchmark.n_demos < 1) fail("benchmark.n_demos", "must be >= 1");
    if (cfg.benchmark.t_max < 1) fail("benchmark.t_max", "must be >= 1");
    strategy_from_name(cfg.strategy);  // throws ConfigError on bad names
    if (cfg.seeds.empty()) fail("seeds", "at least one seed required");
    for (size_t i = 0; i < cfg.seeds.size(); ++i) {
        for (size_t k = i + 1; k < cfg.seeds.size(); ++k) {
            if (cfg.seeds[i] == cfg.seeds[k]) fail("seeds", "duplicate seed values");
        }
    }
    if (cfg.trainer.weights.lambda_rac < 0.0) fail("lambda_rac", "must be >= 0");
    if (cfg.trainer.weights.lambda_cmi < 0.0) fail("lambda_cmi", "must be >= 0");
    if (cfg.trainer.weights.tau_temp <= 0.0) fail("tau_temp", "must be > 0");
    if (cfg.trainer.weights.lambda_ewc < 0.0) fail("lambda_ewc", "must be >= 0");
    if (cfg.trainer.replay_fraction < 0.0 || cfg.trainer.replay_fraction > 1.0) {
        fail("replay_fraction", "must lie in [0,1]");
    }
    if (cfg.strategy == "infovla" && cfg.trainer.weights.lambda_rac > 0.0 &&
        cfg.trainer.replay_fraction <= 0.0 && cfg.benchmark.n_tasks > 1) {
        fail("replay_fraction", "contrastive anchors need replay samples; must be > 0");
    }
    if (cfg.trainer.iterations_base < 1) fail("iterations.base", "must be >= 1");
    if (cfg.trainer.iterations_incremental < 1) fail("iterations.incremental", "must be >= 1");
    if (cfg.trainer.batch_size < 2) fail("batch_size", "must be >= 2");
    if (cfg.trainer.learning_rate <= 0.0) fail("learning_rate", "must be > 0");
    if (cfg.trainer.eval_episodes < 1) fail("eval_episodes", "must be >= 1");
    if (cfg.trainer.euler_steps < 1) fail("euler_steps", "must be >= 1");
    if (cfg.trainer.fisher_samples < 1) fail("fisher_samples", "must be >= 1");
    if (cfg.trainer.mi_k_bins < 1) fail("policy.mi_k_bins", "must be >= 1");
    if (cfg.trainer.mi_joint_hidden < 1) fail("policy.mi_joint_hidden", "must be >= 1");
    if (cfg.policy.image_h % cfg.policy.patch != 0 || cfg.policy.image_w % cfg.policy.patch != 0) {
        fail("policy.patch", "must divide image_h and image_w");
    }
    if (cfg.policy.d_action != 2) fail("policy.d_action", "the planar suite requires d_action=2");
    if (cfg.policy.d_proprio < 4) fail("policy.d_proprio", "must be >= 4");
    if (cfg.output_dir.empty()) fail("output_dir", "must not be empty");
    return cfg;
}

ExperimentConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return config_from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["benchmark"] = {{"n_tasks", benchmark.n_tasks},       {"base_count", benchmark.base_count},
                      {"steps", benchmark.steps},           {"per_step", benchmark.per_step},
                      {"suite_seed", benchmark.suite_seed}, {"n_demos", benchmark.n_demos},
                      {"t_max", benchmark.t_max}};
    j["strategy"] = strategy;
    j["seeds"] = seeds;
    j["lambda_rac"] = trainer.weights.lambda_rac;
    j["lambda_cmi"] = trainer.weights.lambda_cmi;
    j["tau_temp"] = trainer.weights.tau_temp;
    j["lambda_ewc"] = trainer.weights.lambda_ewc;
    j["rac_negatives"] =
        trainer.weights.rac_negatives == RacNegatives::kAnchors ? "anchors" : "students";
    j["replay_fraction"] = trainer.replay_fraction;
    j["iterations"] = {{"base", trainer.iterations_base},
                       {"incremental", trainer.iterations_incremental}};
    j["batch_size"] = trainer.batch_size;
    j["learning_rate"] = trainer.learning_rate;
    j["eval_episodes"] = trainer.eval_episodes;
    j["euler_steps"] = trainer.euler_steps;
    j["fisher_samples"] = trainer.fisher_samples;
    j["policy"] = {{"image_c", policy.image_c},
                   {"image_h", policy.image_h},
                   {"image_w", policy.image_w},
                   {"patch", policy.patch},
                   {"d_latent", policy.d_latent},
                   {"d_proprio", policy.d_proprio},
                   {"horizon", policy.horizon},
                   {"d_action", policy.d_action},
                   {"expert_hidden", policy.expert_hidden},
                   {"mi_k_bins", trainer.mi_k_bins},
                   {"mi_joint_hidden", trainer.mi_joint_hidden}};
    j["output_dir"] = output_dir;
    j["save_demos"] = save_demos;
    return j;
}

void apply_override(nlohmann::json& j, const std::string& dotted_key, const std::string& value) {
    if (dotted_key.empty()) throw ConfigError("override: empty key");
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
        parsed = value;  // plain string
    }
    nlohmann::json* cursor = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = dotted_key.find('.', start);
        const std::string part = dotted_key.substr(start, dot - start);
        if (part.empty()) throw ConfigError("override: malformed key '" + dotted_key + "'");
        if (dot == std::string::npos) {
            (*cursor)[part] = parsed;
            return;
        }
        cursor = &(*cursor)[part];
        start = dot + 1;
    }
}

}  // namespace infovla
