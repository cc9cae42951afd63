#pragma once

#include <map>
#include <string>
#include <vector>

#include "infovla/data.hpp"
#include "infovla/policy.hpp"
#include "infovla/rng.hpp"
#include "infovla/tensor.hpp"

namespace infovla {

// Which representations fill the contrastive denominator: the teacher anchors
// (as the displayed objective writes it) or the other student representations
// in the batch (as the surrounding text describes); kAnchors is the default.
enum class RacNegatives { kAnchors, kStudents };

struct LossWeights {
    double lambda_rac = 0.1;
    double lambda_cmi = 0.1;
    double tau_temp = 0.07;
    double lambda_ewc = 1000.0;
    RacNegatives rac_negatives = RacNegatives::kAnchors;
};

// Shared projection + joint head for the mutual-information estimator.
// The projections are shared between teacher and student pathways; teacher
// latents entering them are detached, the estimator itself is trainable.
class MiEstimatorParameters {
  public:
    MiEstimatorParameters() = default;
    static MiEstimatorParameters init(int d_latent, int k_bins, int joint_hidden, RngStream& rng);

    int k_bins() const { return k_; }
    Tensor param(const std::string& name) const;
    std::vector<std::pair<std::string, Tensor>> trainable() const;

    // Zeroes the joint head; used by tests for the uniform-output identity.
    void zero_joint_mlp();

  private:
    int k_ = 0;
    std::map<std::string, Tensor> params_;
};

// InfoNCE-style contrastive alignment of replay-sample student latents to
// their frozen-teacher anchors, against in-batch negatives. Averages over the
// replay-masked indices only. Requires batch >= 2 and a nonempty mask.
Tensor rac_loss(const std::vector<LatentPair>& student, const std::vector<LatentPair>& anchors,
                const std::vector<bool>& replay_mask, double tau_temp,
                RacNegatives negatives = RacNegatives::kAnchors);

// F(z): project z_v and z_l to K bins each, flatten the outer product and
// softmax over the K*K grid.
Tensor project_F(const LatentPair& z, const MiEstimatorParameters& est);

// Joint distribution over the K*K grid from the concatenated (teacher,
// student) pair; the teacher side is gradient-detached.
Tensor joint_distribution(const LatentPair& z_old, const LatentPair& z_new,
                          const MiEstimatorParameters& est);

// Negative estimated mutual information between teacher and student latents:
// -mean_i KL(joint_i || product-of-marginals). Always <= ~0.
Tensor mi_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
               const MiEstimatorParameters& est);

// Marginal consistency: KL(p(Z_new) || p(Z_old)) over batch-mean marginals,
// teacher side detached.
Tensor mc_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
               const MiEstimatorParameters& est);

// Unified structural preservation objective: mi_loss + mc_loss.
Tensor cmi_loss(const std::vector<LatentPair>& batch_old, const std::vector<LatentPair>& batch_new,
                const MiEstimatorParameters& est);

// Conditional flow-matching regression with explicit draws, mean-squared over
// the horizon x d_action entries. The random-draw overload samples
// omega ~ N(0,I) and tau ~ U[0,1].
Tensor flow_matching_loss_at(const ActionChunk& chunk, const Observation& obs,
                             const Instruction& instr, const PolicyParameters& params,
                             const std::vector<double>& omega, double tau_flow);
Tensor flow_matching_loss(const ActionChunk& chunk, const Observation& obs,
                          const Instruction& instr, const PolicyParameters& params,
                          RngStream& rng);
// Variants reusing an already-encoded latent; arithmetic and draw order are
// identical to the encode-internally forms.
Tensor flow_matching_loss_latent_at(const ActionChunk& chunk, const LatentPair& latent,
                                    const PolicyParameters& params,
                                    const std::vector<double>& omega, double tau_flow);
Tensor flow_matching_loss_latent(const ActionChunk& chunk, const LatentPair& latent,
                                 const PolicyParameters& params, RngStream& rng);

// L = L_CL + lambda1 * L_RAC + lambda2 * L_CMI. Components with zero weight
// may be undefined tensors; with both lambdas zero the result is the L_CL
// tensor itself.
Tensor total_loss(const Tensor& loss_cl, const Tensor& loss_rac, const Tensor& loss_cmi,
                  double lambda_rac, double lambda_cmi);

// Empirical diagonal Fisher information of the flow-matching loss over
// sampled steps; nonnegative per-parameter arrays keyed like the parameters.
std::map<std::string, std::vector<double>> fisher_diagonal(PolicyParameters& params,
                                                           const std::vector<StepSample>& dataset,
                                                           int n_samples, RngStream& rng);

// (lambda/2) sum_i F_i (theta_i - theta*_i)^2 accumulated over anchors.
struct EwcAnchor {
    std::map<std::string, std::vector<double>> reference;  // theta* data
    std::map<std::string, std::vector<double>> fisher;
};
Tensor ewc_penalty(const PolicyParameters& params, const EwcAnchor& anchor, double lambda_ewc);

}  // namespace infovla
