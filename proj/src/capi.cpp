#include "infovla/infovla_c.h"

#include <cstring>
#include <string>

#include "infovla/config.hpp"
#include "infovla/errors.hpp"
#include "infovla/experiment.hpp"
#include "infovla/fileio.hpp"
#include "infovla/gradcheck.hpp"
#include "infovla/metrics.hpp"
#include "json.hpp"

struct ivla_experiment {
    nlohmann::json config_json;
    std::string report;
    std::string error;
};

namespace {

thread_local std::string g_last_error;

void copy_to_buf(const std::string& text, char* buf, size_t len) {
    if (!buf || len == 0) return;
    const size_t n = std::min(text.size(), len - 1);
    std::memcpy(buf, text.data(), n);
    buf[n] = '\0';
}

ivla_status classify(const std::exception& e) {
    if (dynamic_cast<const infovla::ConfigError*>(&e)) return IVLA_ERR_CONFIG;
    if (dynamic_cast<const infovla::NumericError*>(&e)) return IVLA_ERR_NUMERIC;
    return IVLA_ERR;
}

template <typename Fn>
ivla_status guarded(ivla_experiment* exp, Fn&& fn) {
    try {
        fn();
        if (exp) exp->error.clear();
        return IVLA_OK;
    } catch (const std::exception& e) {
        if (exp) exp->error = e.what();
        g_last_error = e.what();
        return classify(e);
    } catch (...) {
        if (exp) exp->error = "unknown error";
        g_last_error = "unknown error";
        return IVLA_ERR;
    }
}

}  // namespace

extern "C" {

const char* ivla_version(void) { return "0.1.0"; }

const char* ivla_preset_json(const char* name) {
    if (!name) return nullptr;
    // static storage: the two presets are compile-time constants
    static const std::string ci = infovla::preset_json_text("ci");
    static const std::string paper = infovla::preset_json_text("paper");
    if (std::string(name) == "ci") return ci.c_str();
    if (std::string(name) == "paper") return paper.c_str();
    return nullptr;
}

const char* ivla_last_error(void) { return g_last_error.c_str(); }

ivla_status ivla_experiment_create(const char* config_json, ivla_experiment** out) {
    if (!config_json || !out) {
        g_last_error = "create: null argument";
        return IVLA_ERR_CONFIG;
    }
    *out = nullptr;
    auto* exp = new ivla_experiment();
    const ivla_status st = guarded(exp, [&] {
        try {
            exp->config_json = nlohmann::json::parse(config_json);
        } catch (const nlohmann::json::exception& e) {
            throw infovla::ConfigError(std::string("config: invalid JSON: ") + e.what());
        }
        infovla::config_from_json(exp->config_json);  // validate eagerly
    });
    if (st != IVLA_OK) {
        g_last_error = exp->error;
        delete exp;
        return st;
    }
    *out = exp;
    return IVLA_OK;
}

ivla_status ivla_experiment_create_from_file(const char* path, ivla_experiment** out) {
    if (!path || !out) {
        g_last_error = "create_from_file: null argument";
        return IVLA_ERR_CONFIG;
    }
    std::string text;
    try {
        text = infovla::read_file(path);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return IVLA_ERR;
    }
    return ivla_experiment_create(text.c_str(), out);
}

void ivla_experiment_destroy(ivla_experiment* exp) { delete exp; }

ivla_status ivla_experiment_set(ivla_experiment* exp, const char* dotted_key, const char* value) {
    if (!exp || !dotted_key || !value) {
        g_last_error = "set: null argument";
        return IVLA_ERR_CONFIG;
    }
    return guarded(exp, [&] { infovla::apply_override(exp->config_json, dotted_key, value); });
}

ivla_status ivla_experiment_run(ivla_experiment* exp) {
    if (!exp) {
        g_last_error = "run: null handle";
        return IVLA_ERR_CONFIG;
    }
    return guarded(exp, [&] {
        infovla::ExperimentConfig cfg = infovla::config_from_json(exp->config_json);
        infovla::ExperimentOutcome outcome = infovla::run_experiment(cfg);
        exp->report = outcome.report_text;
    });
}

ivla_status ivla_experiment_compare(ivla_experiment* exp, const char* const* strategies,
                                    size_t n_strategies) {
    if (!exp || (!strategies && n_strategies > 0)) {
        g_last_error = "compare: null argument";
        return IVLA_ERR_CONFIG;
    }
    return guarded(exp, [&] {
        std::vector<std::string> names;
        for (size_t i = 0; i < n_strategies; ++i) {
            if (!strategies[i]) throw infovla::ConfigError("compare: null strategy name");
            names.emplace_back(strategies[i]);
        }
        infovla::ExperimentConfig cfg = infovla::config_from_json(exp->config_json);
        infovla::ExperimentOutcome outcome = infovla::compare_experiment(cfg, names);
        exp->report = outcome.report_text;
    });
}

const char* ivla_experiment_report(const ivla_experiment* exp) {
    return exp ? exp->report.c_str() : "";
}

const char* ivla_experiment_error(const ivla_experiment* exp) {
    return exp ? exp->error.c_str() : "";
}

ivla_status ivla_metrics_from_csv(const char* r_csv_path, const char* metrics_json_out_path,
                                  char* table_buf, size_t table_buf_len) {
    if (!r_csv_path) {
        g_last_error = "metrics: null csv path";
        return IVLA_ERR_CONFIG;
    }
    return guarded(nullptr, [&] {
        try {
            infovla::Metrics m = infovla::metrics_from_csv_file(
                r_csv_path, metrics_json_out_path ? metrics_json_out_path : "");
            copy_to_buf(infovla::metrics_table(m), table_buf, table_buf_len);
        } catch (const infovla::IoError& e) {
            // malformed input files are a usage error at this surface
            throw infovla::ConfigError(e.what());
        }
    });
}

ivla_status ivla_gradcheck(int instances_per_op, int include_corrupt_fixture, char* report_buf,
                           size_t report_buf_len) {
    if (instances_per_op < 1) {
        g_last_error = "gradcheck: instances_per_op must be >= 1";
        return IVLA_ERR_CONFIG;
    }
    bool ok = false;
    const ivla_status st = guarded(nullptr, [&] {
        auto entries =
            infovla::run_gradient_suite(instances_per_op, 20240817, include_corrupt_fixture != 0);
        copy_to_buf(infovla::gradient_suite_report(entries), report_buf, report_buf_len);
        ok = infovla::gradient_suite_ok(entries);
    });
    if (st != IVLA_OK) return st;
    if (!ok) {
        g_last_error = "gradcheck: at least one check failed";
        return IVLA_ERR_NUMERIC;
    }
    return IVLA_OK;
}

}  // extern "C"
