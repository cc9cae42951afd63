#pragma once

#include <optional>
#include <string>
#include <vector>

#include "infovla/policy.hpp"

namespace infovla {

// R[task][stage]: success rate of a task evaluated after each learning stage.
// Cells before a task's introduction stage are undefined and excluded from
// every aggregate; they are never zero-filled. A jointly trained base group
// shares stage 0 while its tasks keep individual rows.
class SuccessMatrix {
  public:
    SuccessMatrix() = default;
    SuccessMatrix(int n_tasks, int n_stages, std::vector<int> first_stage);

    // Square benchmark: task i enters at stage i.
    static SuccessMatrix square(int n);
    // Bi-kNm flattening: base_count tasks share stage 0, then m per step.
    static SuccessMatrix bi_knm(int n_tasks, int base_count, int per_step);

    int n_tasks() const { return n_tasks_; }
    int n_stages() const { return n_stages_; }
    int first_stage(int task) const { return first_stage_[task]; }
    bool defined(int task, int stage) const;
    double at(int task, int stage) const;
    void set(int task, int stage, double value);

    std::string to_csv() const;
    static SuccessMatrix from_csv(const std::string& text);

  private:
    int n_tasks_ = 0;
    int n_stages_ = 0;
    std::vector<int> first_stage_;
    std::vector<std::optional<double>> cells_;
};

// The five continual-learning aggregates plus the per-stage table rows.
struct Metrics {
    double auc = 0.0;
    double fwt = 0.0;
    double nbt = 0.0;
    double faa = 0.0;
    double aa = 0.0;
    std::vector<double> per_stage_all;                 // mean over tasks seen by stage j
    std::vector<std::optional<double>> per_stage_old;  // mean over tasks older than stage j
};

double auc(const SuccessMatrix& r);
double fwt(const SuccessMatrix& r);
double nbt(const SuccessMatrix& r);
double faa(const SuccessMatrix& r);
double aa(const SuccessMatrix& r);
Metrics compute_metrics(const SuccessMatrix& r);

std::string metrics_json(const Metrics& m);
// Plain-text table: Base column, then Old/All per stage, then the aggregates.
std::string metrics_table(const Metrics& m);

// Mean Shannon entropy (nats) of the fusion attention over a probe set;
// higher means more diffuse attention.
double attention_diffusion(const PolicyParameters& params,
                           const std::vector<std::pair<Observation, Instruction>>& probes);

// Pairwise cosine-similarity matrix of fused latents over a probe set.
std::vector<std::vector<double>> representation_similarity(
    const PolicyParameters& params,
    const std::vector<std::pair<Observation, Instruction>>& probes);

// Frobenius distance between two similarity matrices: the structure-drift
// score compared across stages.
double similarity_drift(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b);

}  // namespace infovla
