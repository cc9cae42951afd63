#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "infovla/infovla_c.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string temp_path(const char* name) {
    return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("version and presets") {
    REQUIRE(ivla_version() != nullptr);
    CHECK(std::strlen(ivla_version()) > 0);

    const char* ci = ivla_preset_json("ci");
    REQUIRE(ci != nullptr);
    auto j = nlohmann::json::parse(ci);
    CHECK(j["benchmark"]["n_tasks"] == 5);
    REQUIRE(ivla_preset_json("paper") != nullptr);
    CHECK(ivla_preset_json("unknown") == nullptr);
    CHECK(ivla_preset_json(nullptr) == nullptr);
}

TEST_CASE("experiment handle lifecycle and config errors") {
    ivla_experiment* exp = nullptr;
    CHECK(ivla_experiment_create("{not json", &exp) == IVLA_ERR_CONFIG);
    CHECK(exp == nullptr);
    CHECK(std::strlen(ivla_last_error()) > 0);

    CHECK(ivla_experiment_create(R"({"strategy": "sgd"})", &exp) == IVLA_ERR_CONFIG);
    CHECK(exp == nullptr);

    REQUIRE(ivla_experiment_create(ivla_preset_json("ci"), &exp) == IVLA_OK);
    REQUIRE(exp != nullptr);
    CHECK(ivla_experiment_set(exp, "strategy", "\"er\"") == IVLA_OK);
    // invalid override value surfaces when the experiment revalidates
    CHECK(ivla_experiment_set(exp, "batch_size", "1") == IVLA_OK);
    CHECK(ivla_experiment_run(exp) == IVLA_ERR_CONFIG);
    CHECK(std::string(ivla_experiment_error(exp)).find("batch_size") != std::string::npos);
    ivla_experiment_destroy(exp);
    ivla_experiment_destroy(nullptr);  // safe no-op
}

TEST_CASE("a tiny experiment runs end to end through the C surface") {
    const std::string out = temp_path("ivla_capi_run");
    fs::remove_all(out);
    ivla_experiment* exp = nullptr;
    REQUIRE(ivla_experiment_create(ivla_preset_json("ci"), &exp) == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "benchmark.n_tasks", "2") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "benchmark.steps", "2") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "benchmark.n_demos", "3") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "iterations.base", "30") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "iterations.incremental", "20") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "batch_size", "4") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "eval_episodes", "2") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "euler_steps", "3") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "seeds", "[5]") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "strategy", "\"sequential\"") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "policy.d_latent", "8") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "policy.expert_hidden", "8") == IVLA_OK);
    CHECK(ivla_experiment_set(exp, "policy.horizon", "4") == IVLA_OK);
    const std::string quoted_out = "\"" + out + "\"";
    CHECK(ivla_experiment_set(exp, "output_dir", quoted_out.c_str()) == IVLA_OK);

    REQUIRE(ivla_experiment_run(exp) == IVLA_OK);
    const std::string report = ivla_experiment_report(exp);
    CHECK(report.find("sequential") != std::string::npos);
    CHECK(fs::exists(out + "/seed_5/R.csv"));
    CHECK(fs::exists(out + "/seed_5/metrics.json"));
    CHECK(fs::exists(out + "/report.json"));
    CHECK(fs::exists(out + "/config.json"));

    // compare degenerates to run for a single strategy
    const char* strategies[] = {"sequential"};
    const std::string quoted_cmp = "\"" + out + "_cmp\"";
    CHECK(ivla_experiment_set(exp, "output_dir", quoted_cmp.c_str()) == IVLA_OK);
    REQUIRE(ivla_experiment_compare(exp, strategies, 1) == IVLA_OK);
    CHECK(fs::exists(out + "_cmp/comparison.json"));
    CHECK(fs::exists(out + "_cmp/sequential/seed_5/R.csv"));

    ivla_experiment_destroy(exp);
    fs::remove_all(out);
    fs::remove_all(out + "_cmp");
}

TEST_CASE("metrics from csv through the C surface") {
    const std::string csv_path = temp_path("ivla_capi_r.csv");
    const std::string json_path = temp_path("ivla_capi_metrics.json");
    {
        std::ofstream f(csv_path);
        f << "stage_0,stage_1\n0.800000,0.600000\n,0.900000\n";
    }
    char table[4096];
    REQUIRE(ivla_metrics_from_csv(csv_path.c_str(), json_path.c_str(), table, sizeof table) ==
            IVLA_OK);
    CHECK(std::string(table).find("AA") != std::string::npos);
    auto j = nlohmann::json::parse(std::ifstream(json_path));
    CHECK(j["faa"] == doctest::Approx(0.75));
    CHECK(j["nbt"] == doctest::Approx(0.2));

    CHECK(ivla_metrics_from_csv("/definitely/missing.csv", nullptr, nullptr, 0) ==
          IVLA_ERR_CONFIG);
    {
        std::ofstream f(csv_path);
        f << "stage_0\nnot_a_number\n";
    }
    CHECK(ivla_metrics_from_csv(csv_path.c_str(), nullptr, nullptr, 0) == IVLA_ERR_CONFIG);
    fs::remove(csv_path);
    fs::remove(json_path);
}

TEST_CASE("gradcheck through the C surface") {
    char report[16384];
    CHECK(ivla_gradcheck(1, 0, report, sizeof report) == IVLA_OK);
    CHECK(std::string(report).find("matmul") != std::string::npos);
    CHECK(std::string(report).find("rac_loss") != std::string::npos);

    CHECK(ivla_gradcheck(1, 1, report, sizeof report) == IVLA_ERR_NUMERIC);
    CHECK(std::string(report).find("corrupt_fixture") != std::string::npos);
    CHECK(std::string(report).find("FAIL") != std::string::npos);

    CHECK(ivla_gradcheck(0, 0, nullptr, 0) == IVLA_ERR_CONFIG);
}
