// Command-line front end. Talks to the core exclusively through the shared
// library's C API.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "infovla/infovla_c.h"

namespace {

int status_to_exit(ivla_status st) {
    switch (st) {
        case IVLA_OK: return 0;
        case IVLA_ERR_CONFIG: return 2;
        case IVLA_ERR_NUMERIC: return 3;
        default: return 1;
    }
}

struct ExperimentArgs {
    std::string config_path;
    std::string preset = "ci";
    std::string strategy;
    std::string seeds;
    std::string output;
    std::vector<std::string> sets;
};

// create the handle from --config or --preset, then layer the overrides
int make_experiment(const ExperimentArgs& args, ivla_experiment** out) {
    ivla_status st;
    if (!args.config_path.empty()) {
        st = ivla_experiment_create_from_file(args.config_path.c_str(), out);
    } else {
        const char* preset = ivla_preset_json(args.preset.c_str());
        if (!preset) {
            std::fprintf(stderr, "error: unknown preset '%s'\n", args.preset.c_str());
            return 2;
        }
        st = ivla_experiment_create(preset, out);
    }
    if (st != IVLA_OK) {
        std::fprintf(stderr, "error: %s\n", ivla_last_error());
        return status_to_exit(st);
    }

    auto apply = [&](const std::string& key, const std::string& value) -> int {
        ivla_status s = ivla_experiment_set(*out, key.c_str(), value.c_str());
        if (s != IVLA_OK) {
            std::fprintf(stderr, "error: %s\n", ivla_experiment_error(*out));
            return status_to_exit(s);
        }
        return 0;
    };
    int rc = 0;
    if (!args.strategy.empty()) rc = apply("strategy", "\"" + args.strategy + "\"");
    if (rc == 0 && !args.seeds.empty()) rc = apply("seeds", "[" + args.seeds + "]");
    if (rc == 0 && !args.output.empty()) rc = apply("output_dir", "\"" + args.output + "\"");
    for (const std::string& kv : args.sets) {
        if (rc != 0) break;
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            rc = 2;
            break;
        }
        rc = apply(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (rc != 0) {
        ivla_experiment_destroy(*out);
        *out = nullptr;
    }
    return rc;
}

void add_experiment_options(CLI::App* cmd, ExperimentArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--preset", args.preset, "built-in preset when no config file (ci|paper)");
    cmd->add_option("--strategy", args.strategy,
                    "strategy override (multitask|sequential|er|ewc|infovla)");
    cmd->add_option("--seeds", args.seeds, "comma-separated seed list override");
    cmd->add_option("--output", args.output, "output directory override");
    cmd->add_option("--set", args.sets, "dotted-path override, e.g. iterations.base=50")
        ->take_all();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual imitation-learning experiments"};
    app.require_subcommand(1);

    ExperimentArgs run_args;
    CLI::App* run_cmd = app.add_subcommand("run", "run one strategy over the configured seeds");
    add_experiment_options(run_cmd, run_args);

    ExperimentArgs cmp_args;
    std::string cmp_strategies = "sequential,er,infovla";
    CLI::App* cmp_cmd =
        app.add_subcommand("compare", "run several strategies on the identical suite and seeds");
    add_experiment_options(cmp_cmd, cmp_args);
    cmp_cmd->add_option("--strategies", cmp_strategies, "comma-separated strategy list");

    std::string metrics_path;
    std::string metrics_out;
    CLI::App* metrics_cmd =
        app.add_subcommand("metrics", "recompute metrics from an R.csv file or a run directory");
    metrics_cmd->add_option("path", metrics_path, "R.csv file or run directory")->required();
    metrics_cmd->add_option("--out", metrics_out, "metrics JSON output path");

    int gc_instances = 10;
    bool gc_corrupt = false;
    CLI::App* gc_cmd =
        app.add_subcommand("gradcheck", "finite-difference sweep over all primitives and losses");
    gc_cmd->add_option("--instances", gc_instances, "random instances per op (default 10)");
    gc_cmd->add_flag("--corrupt-fixture", gc_corrupt,
                     "append a deliberately wrong-gradient self-test entry (must fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // usage problems map to the config exit code
    }

    if (run_cmd->parsed()) {
        ivla_experiment* exp = nullptr;
        int rc = make_experiment(run_args, &exp);
        if (rc != 0) return rc;
        ivla_status st = ivla_experiment_run(exp);
        if (st != IVLA_OK) {
            std::fprintf(stderr, "error: %s\n", ivla_experiment_error(exp));
        } else {
            std::fputs(ivla_experiment_report(exp), stdout);
        }
        ivla_experiment_destroy(exp);
        return status_to_exit(st);
    }

    if (cmp_cmd->parsed()) {
        ivla_experiment* exp = nullptr;
        int rc = make_experiment(cmp_args, &exp);
        if (rc != 0) return rc;
        std::vector<std::string> names;
        std::string cur;
        for (char c : cmp_strategies + ",") {
            if (c == ',') {
                if (!cur.empty()) names.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        std::vector<const char*> ptrs;
        for (const std::string& s : names) ptrs.push_back(s.c_str());
        ivla_status st = ivla_experiment_compare(exp, ptrs.data(), ptrs.size());
        if (st != IVLA_OK) {
            std::fprintf(stderr, "error: %s\n", ivla_experiment_error(exp));
        } else {
            std::fputs(ivla_experiment_report(exp), stdout);
        }
        ivla_experiment_destroy(exp);
        return status_to_exit(st);
    }

    if (metrics_cmd->parsed()) {
        namespace fs = std::filesystem;
        std::string csv = metrics_path;
        std::string out = metrics_out;
        if (fs::is_directory(csv)) {
            if (out.empty()) out = (fs::path(csv) / "metrics.json").string();
            csv = (fs::path(csv) / "R.csv").string();
        }
        std::vector<char> table(8192);
        ivla_status st = ivla_metrics_from_csv(csv.c_str(), out.empty() ? nullptr : out.c_str(),
                                               table.data(), table.size());
        if (st != IVLA_OK) {
            std::fprintf(stderr, "error: %s\n", ivla_last_error());
            return status_to_exit(st);
        }
        std::fputs(table.data(), stdout);
        return 0;
    }

    if (gc_cmd->parsed()) {
        std::vector<char> report(16384);
        ivla_status st =
            ivla_gradcheck(gc_instances, gc_corrupt ? 1 : 0, report.data(), report.size());
        std::fputs(report.data(), stdout);
        if (st != IVLA_OK && std::string(ivla_last_error()).size() > 0) {
            std::fprintf(stderr, "error: %s\n", ivla_last_error());
        }
        return status_to_exit(st);
    }

    return 2;
}
