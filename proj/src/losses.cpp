#include "infovla/losses.hpp"

#include <cmath>
#include <algorithm>
#include <utility>

#include "infovla/errors.hpp"

namespace infovla {

namespace {

Tensor init_weight(Shape shape, int fan_in, RngStream& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    int n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(-s, s);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

// log of the softmax denominator over a row of similarity logits, with max
// subtraction so saturated rows stay finite.
Tensor log_sum_exp(const Tensor& logits) {
    double mx = logits.data()[0];
    for (double v : logits.data()) mx = std::max(mx, v);
    Tensor shifted = add_scalar(logits, -mx);
    return add_scalar(log(sum(exp(shifted))), mx);
}

}  // namespace

MiEstimatorParameters MiEstimatorParameters::init(int d_latent, int k_bins, int joint_hidden,
                                                  RngStream& rng) {
    MiEstimatorParameters est;
    est.k_ = k_bins;
    est.params_["v_proj"] = init_weight({k_bins, d_latent}, d_latent, rng);
    est.params_["l_proj"] = init_weight({k_bins, d_latent}, d_latent, rng);
    est.params_["joint.w1"] = init_weight({joint_hidden, 2 * k_bins}, 2 * k_bins, rng);
    est.params_["joint.b1"] = init_weight({joint_hidden}, 2 * k_bins, rng);
    est.params_["joint.w2"] = init_weight({k_bins * k_bins, joint_hidden}, joint_hidden, rng);
    est.params_["joint.b2"] = init_weight({k_bins * k_bins}, joint_hidden, rng);
    return est;
}

Tensor MiEstimatorParameters::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown estimator parameter '" + name + "'");
    return it->second;
}

std::vector<std::pair<std::string, Tensor>> MiEstimatorParameters::trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : params_) out.emplace_back(name, t);
    return out;
}

void MiEstimatorParameters::zero_joint_mlp() {
    for (const char* name : {"joint.w1", "joint.b1", "joint.w2", "joint.b2"}) {
        auto& d = params_.at(name).mutable_data();
        for (double& x : d) x = 0.0;
    }
}

Tensor rac_loss(const std::vector<LatentPair>& student, const std::vector<LatentPair>& anchors,
                const std::vector<bool>& replay_mask, double tau_temp, RacNegatives negatives) {
    const size_t B = student.size();
    if (B < 2) throw ContractError("rac_loss: batch must contain at least 2 samples");
    if (anchors.size() != B || replay_mask.size() != B) {
        throw ContractError("rac_loss: student/anchor/mask lengths disagree");
    }
    if (tau_temp <= 0.0) throw DomainError("rac_loss: temperature must be positive");
    int n_replay = 0;
    for (bool m : replay_mask) n_replay += m ? 1 : 0;
    if (n_replay == 0) throw ContractError("rac_loss: replay mask selects no samples");

    std::vector<Tensor> v(B), u(B);
    for (size_t i = 0; i < B; ++i) {
        v[i] = l2_normalize(student[i].z_fused);
        u[i] = l2_normalize(anchors[i].z_fused.detach());
    }

    const double inv_tau = 1.0 / tau_temp;
    Tensor acc = Tensor::scalar(0.0);
    for (size_t i = 0; i < B; ++i) {
        if (!replay_mask[i]) continue;
        Tensor pos = mul_scalar(dot(v[i], u[i]), inv_tau);
        std::vector<Tensor> row;
        row.reserve(B);
        for (size_t j = 0; j < B; ++j) {
            if (negatives == RacNegatives::kAnchors) {
                row.push_back(mul_scalar(dot(v[i], u[j]), inv_tau));
            } else {
                // positive stays the anchor pair; negatives are the other
                // student representations in the batch
                row.push_back(j == i ? pos : mul_scalar(dot(v[i], v[j]), inv_tau));
            }
        }
        Tensor denom = log_sum_exp(concat(row));
        acc = add(acc, sub(denom, pos));
    }
    return mul_scalar(acc, 1.0 / static_cast<double>(n_replay));
}

Tensor project_F(const LatentPair& z, const MiEstimatorParameters& est) {
    Tensor v = matvec(est.param("v_proj"), z.z_v);
    Tensor l = matvec(est.param("l_proj"), z.z_l);
    const int k = est.k_bins();
    return softmax(reshape(outer(v, l), {k * k}));
}

Tensor joint_distribution(const LatentPair& z_old, const LatentPair& z_new,
                          const MiEstimatorParameters& est) {
    Tensor old_proj = matvec(est.param("v_proj"), z_old.z_fused.detach());
    Tensor new_proj = matvec(est.param("l_proj"), z_new.z_fused);
    Tensor x = concat({old_proj, new_proj});
    Tensor h = tanh(add(matvec(est.param("joint.w1"), x), est.param("joint.b1")));
    Tensor logits = add(matvec(est.param("joint.w2"), h), est.param("joint.b2"));
    return softmax(logits);
}

namespace {

void check_mi_batches(const std::vector<LatentPair>& batch_old,
                      const std::vector<LatentPair>& batch_new) {
    if (batch_old.empty() || batch_old.size() != batch_new.size()) {
        throw ContractError("mi/mc loss: batches must be nonempty and of equal length");
    }
}

Tensor batch_marginal(const std::vector<LatentPair>& batch, const MiEstimatorParameters& est,
                      bool detach_inputs) {
    Tensor acc;
    for (const LatentPair& z : batch) {
        LatentPair zz = z;
        if (detach_inputs) {
            zz.z_v = z.z_v.detach();
            zz.z_l = z.z_l.detach();
        }
        Tensor f = project_F(zz, est);
        acc = acc.defined() ? add(acc, f) : f;
    }
    return mul_scalar(acc, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace

Tensor mi_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
               const MiEstimatorParameters& est) {
    check_mi_batches(batch_old, batch_new);
    const int k = est.k_bins();

    // Product reference measure on the K x K grid: the old side contributes
    // its row factor, the student side its column factor.
    Tensor p_old = batch_marginal(batch_old, est, /*detach_inputs=*/true);
    Tensor p_new = batch_marginal(batch_new, est, /*detach_inputs=*/false);
    Tensor row_old = sum_axis(reshape(p_old, {k, k}), 1);
    Tensor col_new = sum_axis(reshape(p_new, {k, k}), 0);
    Tensor product = reshape(outer(row_old, col_new), {k * k});

    Tensor acc = Tensor::scalar(0.0);
    for (size_t i = 0; i < batch_old.size(); ++i) {
        Tensor joint = joint_distribution(batch_old[i], batch_new[i], est);
        acc = add(acc, kl_divergence(joint, product));
    }
    Tensor mi_estimate = mul_scalar(acc, 1.0 / static_cast<double>(batch_old.size()));
    return neg(mi_estimate);
}

Tensor mc_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
               const MiEstimatorParameters& est) {
    check_mi_batches(batch_old, batch_new);
    Tensor p_new = batch_marginal(batch_new, est, /*detach_inputs=*/false);
    Tensor p_old = batch_marginal(batch_old, est, /*detach_inputs=*/true).detach();
    return kl_divergence(p_new, p_old);
}

Tensor cmi_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
                const MiEstimatorParameters& est) {
    return add(mi_loss(batch_old, batch_new, est), mc_loss(batch_old, batch_new, est));
}

Tensor flow_matching_loss_latent_at(const ActionChunk& chunk, const LatentPair& latent,
                                    const PolicyParameters& params,
                                    const std::vector<double>& omega, double tau_flow) {
    const PolicyConfig& cfg = params.config();
    if (chunk.horizon != cfg.horizon || chunk.d_action != cfg.d_action) {
        throw ShapeError("flow_matching_loss: chunk does not match policy config");
    }
    if (omega.size() != chunk.a.size()) {
        throw ShapeError("flow_matching_loss: noise does not match chunk size");
    }

    std::vector<double> noised(chunk.a.size());
    std::vector<double> target(chunk.a.size());
    for (size_t i = 0; i < chunk.a.size(); ++i) {
        noised[i] = tau_flow * chunk.a[i] + (1.0 - tau_flow) * omega[i];
        target[i] = omega[i] - chunk.a[i];
    }

    Tensor pred = predict_velocity(Tensor::from_data({cfg.horizon, cfg.d_action}, noised, false),
                                   tau_flow, latent, params);
    return mse(pred, Tensor::from_data({cfg.horizon, cfg.d_action}, std::move(target), false));
}

Tensor flow_matching_loss_at(const ActionChunk& chunk, const Observation& obs,
                             const Instruction& instr, const PolicyParameters& params,
                             const std::vector<double>& omega, double tau_flow) {
    return flow_matching_loss_latent_at(chunk, encode(obs, instr, params), params, omega,
                                        tau_flow);
}

Tensor flow_matching_loss_latent(const ActionChunk& chunk, const LatentPair& latent,
                                 const PolicyParameters& params, RngStream& rng) {
    std::vector<double> omega(chunk.a.size());
    for (double& v : omega) v = rng.normal();
    const double tau = rng.uniform();
    return flow_matching_loss_latent_at(chunk, latent, params, omega, tau);
}

Tensor flow_matching_loss(const ActionChunk& chunk, const Observation& obs,
                          const Instruction& instr, const PolicyParameters& params,
                          RngStream& rng) {
    std::vector<double> omega(chunk.a.size());
    for (double& v : omega) v = rng.normal();
    const double tau = rng.uniform();
    return flow_matching_loss_at(chunk, obs, instr, params, omega, tau);
}

Tensor total_loss(const Tensor& loss_cl, const Tensor& loss_rac, const Tensor& loss_cmi,
                  double lambda_rac, double lambda_cmi) {
    if (!loss_cl.defined()) throw ContractError("total_loss: flow-matching term is required");
    Tensor total = loss_cl;
    if (lambda_rac != 0.0) {
        if (!loss_rac.defined()) throw ContractError("total_loss: RAC term missing");
        total = add(total, mul_scalar(loss_rac, lambda_rac));
    }
    if (lambda_cmi != 0.0) {
        if (!loss_cmi.defined()) throw ContractError("total_loss: CMI term missing");
        total = add(total, mul_scalar(loss_cmi, lambda_cmi));
    }
    return total;
}

std::map<std::string, std::vector<double>> fisher_diagonal(PolicyParameters& params,
                                                           const std::vector<StepSample>& dataset,
                                                           int n_samples, RngStream& rng) {
    if (dataset.empty()) throw ContractError("fisher_diagonal: dataset is empty");
    if (n_samples < 1) throw ContractError("fisher_diagonal: n_samples must be >= 1");

    std::map<std::string, std::vector<double>> fisher;
    auto trainable = params.trainable();
    for (auto& [name, t] : trainable) fisher[name].assign(t.numel(), 0.0);

    for (int s = 0; s < n_samples; ++s) {
        const StepSample& sample = dataset[rng.uniform_int(static_cast<int>(dataset.size()))];
        for (auto& [name, t] : trainable) t.zero_grad();
        Tensor loss = flow_matching_loss(sample.chunk, sample.obs, sample.instr, params, rng);
        backward(loss);
        for (auto& [name, t] : trainable) {
            if (!t.has_grad()) continue;
            const auto& g = t.grad();
            auto& f = fisher[name];
            for (size_t i = 0; i < g.size(); ++i) f[i] += g[i] * g[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(n_samples);
    for (auto& [name, f] : fisher) {
        for (double& x : f) x *= inv;
    }
    for (auto& [name, t] : trainable) t.zero_grad();
    return fisher;
}

Tensor ewc_penalty(const PolicyParameters& params, const EwcAnchor& anchor, double lambda_ewc) {
    Tensor acc = Tensor::scalar(0.0);
    for (const auto& [name, ref] : anchor.reference) {
        auto fit = anchor.fisher.find(name);
        if (fit == anchor.fisher.end()) continue;
        Tensor theta = params.param(name);
        if (static_cast<size_t>(theta.numel()) != ref.size()) {
            throw ShapeError("ewc_penalty: anchor shape mismatch for '" + name + "'");
        }
        Tensor delta = sub(reshape(theta, {theta.numel()}),
                           Tensor::from_data({theta.numel()}, ref, false));
        Tensor f = Tensor::from_data({static_cast<int>(fit->second.size())}, fit->second, false);
        acc = add(acc, sum(mul(f, mul(delta, delta))));
    }
    return mul_scalar(acc, 0.5 * lambda_ewc);
}

}  // namespace infovla
