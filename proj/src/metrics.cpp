#include "infovla/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "infovla/errors.hpp"
#include "json.hpp"

namespace infovla {

SuccessMatrix::SuccessMatrix(int n_tasks, int n_stages, std::vector<int> first_stage)
    : n_tasks_(n_tasks), n_stages_(n_stages), first_stage_(std::move(first_stage)) {
    if (n_tasks < 1 || n_stages < 1) throw ContractError("SuccessMatrix: empty dimensions");
    if (first_stage_.size() != static_cast<size_t>(n_tasks)) {
        throw ContractError("SuccessMatrix: first_stage size mismatch");
    }
    for (int s : first_stage_) {
        if (s < 0 || s >= n_stages) throw ContractError("SuccessMatrix: first stage out of range");
    }
    cells_.assign(static_cast<size_t>(n_tasks) * n_stages, std::nullopt);
}

SuccessMatrix SuccessMatrix::square(int n) {
    std::vector<int> first(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) first[i] = i;
    return SuccessMatrix(n, n, std::move(first));
}

SuccessMatrix SuccessMatrix::bi_knm(int n_tasks, int base_count, int per_step) {
    if (per_step < 1) throw ContractError("SuccessMatrix: per_step must be >= 1");
    if (base_count < 0 || base_count > n_tasks) {
        throw ContractError("SuccessMatrix: base_count out of range");
    }
    const int incremental = n_tasks - base_count;
    if (incremental % per_step != 0) {
        throw ContractError("SuccessMatrix: tasks do not divide into steps");
    }
    const int steps = incremental / per_step;
    const int n_stages = (base_count > 0 ? 1 : 0) + steps;
    std::vector<int> first(static_cast<size_t>(n_tasks));
    for (int i = 0; i < n_tasks; ++i) {
        first[i] = i < base_count ? 0 : (base_count > 0 ? 1 : 0) + (i - base_count) / per_step;
    }
    return SuccessMatrix(n_tasks, n_stages, std::move(first));
}

bool SuccessMatrix::defined(int task, int stage) const {
    return cells_[static_cast<size_t>(task) * n_stages_ + stage].has_value();
}

double SuccessMatrix::at(int task, int stage) const {
    const auto& c = cells_[static_cast<size_t>(task) * n_stages_ + stage];
    if (!c) throw ContractError("SuccessMatrix: cell undefined");
    return *c;
}

void SuccessMatrix::set(int task, int stage, double value) {
    if (task < 0 || task >= n_tasks_ || stage < 0 || stage >= n_stages_) {
        throw ContractError("SuccessMatrix: index out of range");
    }
    if (stage < first_stage_[task]) {
        throw ContractError("SuccessMatrix: cell precedes the task's first stage");
    }
    if (!(value >= 0.0 && value <= 1.0)) {
        throw ContractError("SuccessMatrix: success rates must lie in [0,1]");
    }
    cells_[static_cast<size_t>(task) * n_stages_ + stage] = value;
}

std::string SuccessMatrix::to_csv() const {
    std::ostringstream os;
    for (int j = 0; j < n_stages_; ++j) {
        if (j) os << ",";
        os << "stage_" << j;
    }
    os << "\n";
    char buf[32];
    for (int i = 0; i < n_tasks_; ++i) {
        for (int j = 0; j < n_stages_; ++j) {
            if (j) os << ",";
            if (defined(i, j)) {
                std::snprintf(buf, sizeof buf, "%.6f", at(i, j));
                os << buf;
            }
        }
        os << "\n";
    }
    return os.str();
}

SuccessMatrix SuccessMatrix::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.empty()) throw IoError("R.csv: missing header row");
    int n_stages = 1;
    for (char c : line) n_stages += c == ',';

    std::vector<std::vector<std::optional<double>>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::optional<double>> row;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) {
            if (cell.empty()) {
                row.emplace_back(std::nullopt);
            } else {
                try {
                    row.emplace_back(std::stod(cell));
                } catch (const std::exception&) {
                    throw IoError("R.csv: malformed cell '" + cell + "'");
                }
            }
        }
        while (static_cast<int>(row.size()) < n_stages) row.emplace_back(std::nullopt);
        if (static_cast<int>(row.size()) != n_stages) throw IoError("R.csv: ragged row");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError("R.csv: no task rows");

    const int n_tasks = static_cast<int>(rows.size());
    std::vector<int> first(static_cast<size_t>(n_tasks), -1);
    for (int i = 0; i < n_tasks; ++i) {
        for (int j = 0; j < n_stages; ++j) {
            if (rows[i][j].has_value()) {
                first[i] = j;
                break;
            }
        }
        if (first[i] < 0) throw IoError("R.csv: task row " + std::to_string(i) + " has no data");
        for (int j = first[i]; j < n_stages; ++j) {
            if (!rows[i][j].has_value()) {
                throw IoError("R.csv: task row " + std::to_string(i) + " has a gap");
            }
        }
    }
    SuccessMatrix r(n_tasks, n_stages, std::move(first));
    for (int i = 0; i < n_tasks; ++i) {
        for (int j = 0; j < n_stages; ++j) {
            if (rows[i][j].has_value()) {
                const double v = *rows[i][j];
                if (!(v >= 0.0 && v <= 1.0)) throw IoError("R.csv: value outside [0,1]");
                r.set(i, j, v);
            }
        }
    }
    return r;
}

namespace {

void require_complete(const SuccessMatrix& r) {
    for (int i = 0; i < r.n_tasks(); ++i) {
        for (int j = r.first_stage(i); j < r.n_stages(); ++j) {
            if (!r.defined(i, j)) throw ContractError("metrics: matrix has undefined cells");
        }
    }
}

}  // namespace

double auc(const SuccessMatrix& r) {
    require_complete(r);
    double total = 0.0;
    for (int i = 0; i < r.n_tasks(); ++i) {
        double acc = 0.0;
        int n = 0;
        for (int j = r.first_stage(i); j < r.n_stages(); ++j) {
            acc += r.at(i, j);
            ++n;
        }
        total += acc / n;
    }
    return total / r.n_tasks();
}

double fwt(const SuccessMatrix& r) {
    require_complete(r);
    double total = 0.0;
    for (int i = 0; i < r.n_tasks(); ++i) total += r.at(i, r.first_stage(i));
    return total / r.n_tasks();
}

double nbt(const SuccessMatrix& r) {
    require_complete(r);
    double total = 0.0;
    int n_tasks_with_later = 0;
    for (int i = 0; i < r.n_tasks(); ++i) {
        const int s0 = r.first_stage(i);
        if (s0 + 1 >= r.n_stages()) continue;
        double acc = 0.0;
        int n = 0;
        for (int j = s0 + 1; j < r.n_stages(); ++j) {
            acc += r.at(i, s0) - r.at(i, j);
            ++n;
        }
        total += acc / n;
        ++n_tasks_with_later;
    }
    if (n_tasks_with_later == 0) return 0.0;
    return total / n_tasks_with_later;
}

double faa(const SuccessMatrix& r) {
    require_complete(r);
    double total = 0.0;
    for (int i = 0; i < r.n_tasks(); ++i) total += r.at(i, r.n_stages() - 1);
    return total / r.n_tasks();
}

double aa(const SuccessMatrix& r) {
    require_complete(r);
    double total = 0.0;
    for (int j = 0; j < r.n_stages(); ++j) {
        double acc = 0.0;
        int n = 0;
        for (int i = 0; i < r.n_tasks(); ++i) {
            if (r.first_stage(i) <= j) {
                acc += r.at(i, j);
                ++n;
            }
        }
        total += acc / n;
    }
    return total / r.n_stages();
}

Metrics compute_metrics(const SuccessMatrix& r) {
    Metrics m;
    m.auc = auc(r);
    m.fwt = fwt(r);
    m.nbt = nbt(r);
    m.faa = faa(r);
    m.aa = aa(r);
    for (int j = 0; j < r.n_stages(); ++j) {
        double acc_all = 0.0, acc_old = 0.0;
        int n_all = 0, n_old = 0;
        for (int i = 0; i < r.n_tasks(); ++i) {
            if (r.first_stage(i) <= j) {
                acc_all += r.at(i, j);
                ++n_all;
            }
            if (r.first_stage(i) < j) {
                acc_old += r.at(i, j);
                ++n_old;
            }
        }
        m.per_stage_all.push_back(acc_all / n_all);
        m.per_stage_old.push_back(n_old > 0 ? std::optional<double>(acc_old / n_old)
                                            : std::nullopt);
    }
    return m;
}

std::string metrics_json(const Metrics& m) {
    nlohmann::json j;
    j["auc"] = m.auc;
    j["fwt"] = m.fwt;
    j["nbt"] = m.nbt;
    j["faa"] = m.faa;
    j["aa"] = m.aa;
    j["per_stage_all"] = m.per_stage_all;
    nlohmann::json old = nlohmann::json::array();
    for (const auto& v : m.per_stage_old) {
        if (v) {
            old.push_back(*v);
        } else {
            old.push_back(nullptr);
        }
    }
    j["per_stage_old"] = std::move(old);
    return j.dump(2);
}

std::string metrics_table(const Metrics& m) {
    std::ostringstream os;
    char buf[64];
    os << "stage      ";
    for (size_t j = 1; j < m.per_stage_all.size(); ++j) {
        std::snprintf(buf, sizeof buf, "  step%-2zu(Old/All)", j);
        os << buf;
    }
    os << "\n";
    std::snprintf(buf, sizeof buf, "base %5.1f ", 100.0 * m.per_stage_all[0]);
    os << buf;
    for (size_t j = 1; j < m.per_stage_all.size(); ++j) {
        if (m.per_stage_old[j]) {
            std::snprintf(buf, sizeof buf, "   %5.1f / %-5.1f ", 100.0 * *m.per_stage_old[j],
                          100.0 * m.per_stage_all[j]);
        } else {
            std::snprintf(buf, sizeof buf, "      -  / %-5.1f ", 100.0 * m.per_stage_all[j]);
        }
        os << buf;
    }
    os << "\n";
    std::snprintf(buf, sizeof buf,
                  "AUC %.3f  FWT %.3f  NBT %+.3f  FAA %.3f  AA %.3f\n", m.auc, m.fwt, m.nbt,
                  m.faa, m.aa);
    os << buf;
    return os.str();
}

double attention_diffusion(const PolicyParameters& params,
                           const std::vector<std::pair<Observation, Instruction>>& probes) {
    if (probes.empty()) throw ContractError("attention_diffusion: empty probe set");
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& [obs, instr] : probes) {
        LatentPair lat = encode(obs, instr, params);
        double h = 0.0;
        for (double p : lat.attn.data()) {
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / probes.size();
}

std::vector<std::vector<double>> representation_similarity(
    const PolicyParameters& params,
    const std::vector<std::pair<Observation, Instruction>>& probes) {
    if (probes.empty()) throw ContractError("representation_similarity: empty probe set");
    NoGradGuard guard;
    std::vector<std::vector<double>> latents;
    for (const auto& [obs, instr] : probes) {
        latents.push_back(encode(obs, instr, params).z_fused.data());
    }
    const size_t n = latents.size();
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    auto norm = [](const std::vector<double>& v) {
        double s = 1e-24;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double d = 0.0;
            for (size_t k = 0; k < latents[i].size(); ++k) d += latents[i][k] * latents[j][k];
            sim[i][j] = d / (norm(latents[i]) * norm(latents[j]));
        }
    }
    return sim;
}

double similarity_drift(const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) throw ContractError("similarity_drift: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) throw ContractError("similarity_drift: size mismatch");
        for (size_t j = 0; j < a[i].size(); ++j) {
            const double d = a[i][j] - b[i][j];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

}  // namespace infovla
