#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "infovla/rng.hpp"
#include "infovla/tensor.hpp"

namespace infovla {

struct PolicyConfig {
    int image_c = 3;
    int image_h = 16;
    int image_w = 16;
    int patch = 4;       // square patch side
    int d_latent = 32;   // shared latent width for z_v, z_l, z_fused
    int d_proprio = 4;
    int n_verbs = 1;
    int n_objects = 3;
    int n_targets = 4;
    int horizon = 8;
    int d_action = 2;
    int expert_hidden = 64;

    int n_patches() const { return (image_h / patch) * (image_w / patch); }
    // pixels plus the normalized patch-center coordinates
    int patch_dim() const { return image_c * patch * patch + 2; }
    int chunk_dim() const { return horizon * d_action; }
};

// One camera frame plus the proprioceptive state
// (gripper x, gripper y, holding flag, heading).
struct Observation {
    std::vector<double> image;    // C*H*W row-major, values in [0,1]
    std::vector<double> proprio;  // length d_proprio
};

// Symbolic instruction triple, embedded through learned tables.
struct Instruction {
    int verb = 0;
    int object = 0;
    int target = 0;
};

// Horizon-H block of actions, each step in [-1,1]^d_action.
struct ActionChunk {
    int horizon = 0;
    int d_action = 0;
    std::vector<double> a;  // horizon*d_action row-major

    static ActionChunk zeros(int h, int d) { return {h, d, std::vector<double>(h * d, 0.0)}; }
};

// Fused vision-language representation tapped at the cross-attention layer.
struct LatentPair {
    Tensor z_v;      // attention-weighted patch summary
    Tensor z_l;      // instruction embedding
    Tensor z_fused;  // fused latent combining z_v, z_l and the proprio encoding
    Tensor attn;        // attention weights over patches, sums to 1
    Tensor z_pos;       // attention-weighted patch center, the spatial readout
    Tensor z_channels;  // per-channel soft-argmax (x, y, peak) image features
    Tensor proprio;     // raw q_t carried through for the action expert
};

// Named parameter set with a fixed encoder/head partition. The encoder half
// (patch embedding + instruction tables) freezes at the end of the base
// stage; the fusion attention and action expert stay trainable throughout.
class PolicyParameters {
  public:
    PolicyParameters() = default;
    static PolicyParameters init(const PolicyConfig& cfg, RngStream& rng);

    const PolicyConfig& config() const { return cfg_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor param(const std::string& name) const;

    bool encoder_frozen() const { return encoder_frozen_; }
    bool frozen_param(const std::string& name) const;
    void freeze_encoder();

    // (name, tensor) pairs currently eligible for optimizer updates.
    std::vector<std::pair<std::string, Tensor>> trainable() const;

    // Deep copy with every parameter detached from gradients; the copy never
    // trains and the source keeps training.
    PolicyParameters snapshot_teacher() const;
    bool is_teacher() const { return is_teacher_; }

    void save(const std::string& path) const;
    static PolicyParameters load(const std::string& path);

  private:
    PolicyConfig cfg_;
    std::map<std::string, Tensor> params_;
    std::set<std::string> encoder_names_;
    bool encoder_frozen_ = false;
    bool is_teacher_ = false;
};

// Deterministic encoder: patch embedding, instruction embedding, proprio
// encoding, and single-head dot-product attention over patches.
LatentPair encode(const Observation& obs, const Instruction& instr, const PolicyParameters& params);

// Action expert's estimate of the noise-minus-data flow residual for a noised
// chunk at flow time tau in [0,1]. Output shape [horizon, d_action].
Tensor predict_velocity(const Tensor& noised_chunk, double tau_flow, const LatentPair& latent,
                        const PolicyParameters& params);

// Draws a Gaussian seed chunk and integrates the learned field from tau=0 to
// 1 with n_steps forward-Euler steps; the result is clamped to [-1,1].
ActionChunk sample_actions(const Observation& obs, const Instruction& instr,
                           const PolicyParameters& params, int n_steps, RngStream& rng);

}  // namespace infovla
