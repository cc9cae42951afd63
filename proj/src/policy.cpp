#include "infovla/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <utility>

#include "infovla/errors.hpp"
#include "infovla/fileio.hpp"
#include "json.hpp"

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

void check_observation(const Observation& obs, const PolicyConfig& cfg) {
    const size_t expect = static_cast<size_t>(cfg.image_c) * cfg.image_h * cfg.image_w;
    if (obs.image.size() != expect) {
        throw ShapeError("encode: image size does not match policy config");
    }
    if (obs.proprio.size() != static_cast<size_t>(cfg.d_proprio)) {
        throw ShapeError("encode: proprio size does not match policy config");
    }
    for (double v : obs.image) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw ContractError("encode: image entries must be finite and in [0,1]");
        }
    }
    for (double v : obs.proprio) {
        if (!std::isfinite(v)) throw ContractError("encode: proprio entries must be finite");
    }
}

// Rearranges the C*H*W image into [n_patches, patch_dim] rows; each row ends
// with the patch center in normalized image coordinates so the attention
// summary can carry object locations.
Tensor patchify(const Observation& obs, const PolicyConfig& cfg) {
    const int ph = cfg.image_h / cfg.patch;
    const int pw = cfg.image_w / cfg.patch;
    const int pd = cfg.patch_dim();
    std::vector<double> out(static_cast<size_t>(ph) * pw * pd);
    size_t k = 0;
    for (int py = 0; py < ph; ++py) {
        for (int px = 0; px < pw; ++px) {
            for (int c = 0; c < cfg.image_c; ++c) {
                for (int dy = 0; dy < cfg.patch; ++dy) {
                    for (int dx = 0; dx < cfg.patch; ++dx) {
                        const int y = py * cfg.patch + dy;
                        const int x = px * cfg.patch + dx;
                        out[k++] = obs.image[(static_cast<size_t>(c) * cfg.image_h + y) * cfg.image_w + x];
                    }
                }
            }
            out[k++] = (px + 0.5) * cfg.patch / cfg.image_w;
            out[k++] = (py + 0.5) * cfg.patch / cfg.image_h;
        }
    }
    return Tensor::from_data({ph * pw, pd}, std::move(out), false);
}

// [n_patches, 2] constant of normalized patch centers
Tensor patch_centers(const PolicyConfig& cfg) {
    const int ph = cfg.image_h / cfg.patch;
    const int pw = cfg.image_w / cfg.patch;
    std::vector<double> out(static_cast<size_t>(ph) * pw * 2);
    size_t k = 0;
    for (int py = 0; py < ph; ++py) {
        for (int px = 0; px < pw; ++px) {
            out[k++] = (px + 0.5) * cfg.patch / cfg.image_w;
            out[k++] = (py + 0.5) * cfg.patch / cfg.image_h;
        }
    }
    return Tensor::from_data({ph * pw, 2}, std::move(out), false);
}

// Per-channel soft-argmax location, peak intensity and gripper-relative
// offset: a fixed feature map of the image,
// (x_c, y_c, peak_c, x_c - grip_x, y_c - grip_y) per channel.
Tensor channel_features(const Observation& obs, const PolicyConfig& cfg) {
    constexpr double kBeta = 25.0;
    const double grip_x = obs.proprio.size() > 0 ? obs.proprio[0] : 0.0;
    const double grip_y = obs.proprio.size() > 1 ? obs.proprio[1] : 0.0;
    std::vector<double> out(static_cast<size_t>(cfg.image_c) * 5, 0.0);
    for (int c = 0; c < cfg.image_c; ++c) {
        double wsum = 0.0, xs = 0.0, ys = 0.0, peak = 0.0, mx = 0.0;
        const size_t base = static_cast<size_t>(c) * cfg.image_h * cfg.image_w;
        for (int y = 0; y < cfg.image_h; ++y) {
            for (int x = 0; x < cfg.image_w; ++x) {
                mx = std::max(mx, obs.image[base + static_cast<size_t>(y) * cfg.image_w + x]);
            }
        }
        for (int y = 0; y < cfg.image_h; ++y) {
            for (int x = 0; x < cfg.image_w; ++x) {
                const double v = obs.image[base + static_cast<size_t>(y) * cfg.image_w + x];
                const double w = std::exp(kBeta * (v - mx));
                wsum += w;
                xs += w * (x + 0.5) / cfg.image_w;
                ys += w * (y + 0.5) / cfg.image_h;
                peak = std::max(peak, v);
            }
        }
        const double cx = xs / wsum;
        const double cy = ys / wsum;
        out[static_cast<size_t>(c) * 5 + 0] = cx;
        out[static_cast<size_t>(c) * 5 + 1] = cy;
        out[static_cast<size_t>(c) * 5 + 2] = peak;
        // offsets scaled to roughly action units so the head starts near the
        // sensitivity it needs
        out[static_cast<size_t>(c) * 5 + 3] = 8.0 * (cx - grip_x);
        out[static_cast<size_t>(c) * 5 + 4] = 8.0 * (cy - grip_y);
    }
    return Tensor::from_data({cfg.image_c * 5}, std::move(out), false);
}

}  // namespace

PolicyParameters PolicyParameters::init(const PolicyConfig& cfg, RngStream& rng) {
    PolicyParameters p;
    p.cfg_ = cfg;
    const int d = cfg.d_latent;
    const int pd = cfg.patch_dim();
    const int cd = cfg.chunk_dim();
    const int h = cfg.expert_hidden;
    const int cond_in = d + 2 + 5 * cfg.image_c + cfg.d_proprio;
    const int noise_in = cd + 2;
    const int h_noise = std::max(8, h / 2);

    p.params_["enc.patch_w"] = init_weight({pd, d}, pd, rng);
    p.params_["enc.patch_b"] = init_weight({d}, pd, rng);
    p.params_["enc.verb_table"] = init_weight({cfg.n_verbs, d}, d, rng);
    p.params_["enc.object_table"] = init_weight({cfg.n_objects, d}, d, rng);
    p.params_["enc.target_table"] = init_weight({cfg.n_targets, d}, d, rng);

    p.params_["fuse.key_w"] = init_weight({d, d}, d, rng);
    p.params_["fuse.query_w"] = init_weight({d, d}, d, rng);
    p.params_["fuse.gain"] = Tensor::full({1}, 8.0, true);
    p.params_["fuse.prop_w"] = init_weight({d, cfg.d_proprio}, cfg.d_proprio, rng);
    p.params_["fuse.prop_b"] = init_weight({d}, cfg.d_proprio, rng);
    p.params_["fuse.out_w"] = init_weight({d, 3 * d}, 3 * d, rng);
    p.params_["fuse.out_b"] = init_weight({d}, 3 * d, rng);

    // the expert splits into a conditioning trunk (observation and language
    // only) and a noise trunk (noised chunk and flow time); mixing the noised
    // chunk into the hidden layers that extract the data estimate drowns the
    // conditioning signal
    p.params_["expert.cond_w1"] = init_weight({h, cond_in}, cond_in, rng);
    p.params_["expert.cond_b1"] = init_weight({h}, cond_in, rng);
    p.params_["expert.cond_w2"] = init_weight({h, h}, h, rng);
    p.params_["expert.cond_b2"] = init_weight({h}, h, rng);
    p.params_["expert.noise_w1"] = init_weight({h_noise, noise_in}, noise_in, rng);
    p.params_["expert.noise_b1"] = init_weight({h_noise}, noise_in, rng);
    p.params_["expert.out_w"] = init_weight({cd, h + h_noise}, h + h_noise, rng);
    p.params_["expert.out_b"] = init_weight({cd}, h + h_noise, rng);
    p.params_["expert.skip"] = Tensor::zeros({cd}, true);

    for (const auto& [name, t] : p.params_) {
        if (name.rfind("enc.", 0) == 0) p.encoder_names_.insert(name);
    }
    return p;
}

Tensor PolicyParameters::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

bool PolicyParameters::frozen_param(const std::string& name) const {
    if (is_teacher_) return true;
    return encoder_frozen_ && encoder_names_.count(name) > 0;
}

void PolicyParameters::freeze_encoder() {
    encoder_frozen_ = true;
    for (auto& [name, t] : params_) {
        if (encoder_names_.count(name)) {
            t = t.detach();  // drops requires_grad; data preserved
        }
    }
}

std::vector<std::pair<std::string, Tensor>> PolicyParameters::trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (is_teacher_) return out;
    for (const auto& [name, t] : params_) {
        if (!frozen_param(name)) out.emplace_back(name, t);
    }
    return out;
}

PolicyParameters PolicyParameters::snapshot_teacher() const {
    PolicyParameters copy;
    copy.cfg_ = cfg_;
    copy.encoder_names_ = encoder_names_;
    copy.encoder_frozen_ = true;
    copy.is_teacher_ = true;
    for (const auto& [name, t] : params_) copy.params_[name] = t.detach();
    return copy;
}

void PolicyParameters::save(const std::string& path) const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = {{"image_c", cfg_.image_c},     {"image_h", cfg_.image_h},
                   {"image_w", cfg_.image_w},     {"patch", cfg_.patch},
                   {"d_latent", cfg_.d_latent},   {"d_proprio", cfg_.d_proprio},
                   {"n_verbs", cfg_.n_verbs},     {"n_objects", cfg_.n_objects},
                   {"n_targets", cfg_.n_targets}, {"horizon", cfg_.horizon},
                   {"d_action", cfg_.d_action},   {"expert_hidden", cfg_.expert_hidden}};
    j["encoder_frozen"] = encoder_frozen_;
    j["is_teacher"] = is_teacher_;
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, t] : params_) {
        params[name] = {{"shape", t.shape()}, {"data", t.data()}};
    }
    j["params"] = std::move(params);
    write_file_atomic(path, j.dump());
}

PolicyParameters PolicyParameters::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format_version", 0) != 1) {
        throw IoError("unsupported checkpoint format in '" + path + "'");
    }
    PolicyParameters p;
    const auto& c = j.at("config");
    p.cfg_.image_c = c.at("image_c");
    p.cfg_.image_h = c.at("image_h");
    p.cfg_.image_w = c.at("image_w");
    p.cfg_.patch = c.at("patch");
    p.cfg_.d_latent = c.at("d_latent");
    p.cfg_.d_proprio = c.at("d_proprio");
    p.cfg_.n_verbs = c.at("n_verbs");
    p.cfg_.n_objects = c.at("n_objects");
    p.cfg_.n_targets = c.at("n_targets");
    p.cfg_.horizon = c.at("horizon");
    p.cfg_.d_action = c.at("d_action");
    p.cfg_.expert_hidden = c.at("expert_hidden");
    p.encoder_frozen_ = j.value("encoder_frozen", false);
    p.is_teacher_ = j.value("is_teacher", false);
    for (const auto& [name, entry] : j.at("params").items()) {
        Shape shape = entry.at("shape").get<Shape>();
        std::vector<double> data = entry.at("data").get<std::vector<double>>();
        const bool frozen = p.is_teacher_ || (p.encoder_frozen_ && name.rfind("enc.", 0) == 0);
        p.params_[name] = Tensor::from_data(std::move(shape), std::move(data), !frozen);
        if (name.rfind("enc.", 0) == 0) p.encoder_names_.insert(name);
    }
    return p;
}

LatentPair encode(const Observation& obs, const Instruction& instr,
                  const PolicyParameters& params) {
    const PolicyConfig& cfg = params.config();
    check_observation(obs, cfg);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_latent));

    Tensor patches = patchify(obs, cfg);
    Tensor pf = tanh(add_row_broadcast(matmul(patches, params.param("enc.patch_w")),
                                       params.param("enc.patch_b")));

    Tensor z_l = add(add(embedding_row(params.param("enc.verb_table"), instr.verb),
                         embedding_row(params.param("enc.object_table"), instr.object)),
                     embedding_row(params.param("enc.target_table"), instr.target));

    Tensor q = Tensor::from_data({cfg.d_proprio}, obs.proprio, false);
    Tensor z_q = tanh(add(matvec(params.param("fuse.prop_w"), q), params.param("fuse.prop_b")));

    Tensor query = matvec(params.param("fuse.query_w"), add(z_l, z_q));
    Tensor keys = matmul(pf, transpose(params.param("fuse.key_w")));
    // learnable gain: lets the attention sharpen without waiting for the
    // key/query norms to grow
    Tensor logits =
        mul(mul_scalar(matvec(keys, query), inv_sqrt_d), params.param("fuse.gain"));
    Tensor attn = softmax(logits);

    Tensor attn_row = reshape(attn, {1, cfg.n_patches()});
    Tensor z_v = reshape(matmul(attn_row, pf), {cfg.d_latent});
    // spatial readout: expected patch center under the attention weights
    Tensor z_pos = reshape(matmul(attn_row, patch_centers(cfg)), {2});
    Tensor fused_in = concat({z_v, z_l, z_q});
    Tensor z_fused =
        tanh(add(matvec(params.param("fuse.out_w"), fused_in), params.param("fuse.out_b")));

    return LatentPair{z_v, z_l, z_fused, attn, z_pos, channel_features(obs, cfg), q};
}

Tensor predict_velocity(const Tensor& noised_chunk, double tau_flow, const LatentPair& latent,
                        const PolicyParameters& params) {
    const PolicyConfig& cfg = params.config();
    if (!(tau_flow >= 0.0 && tau_flow <= 1.0)) {
        throw DomainError("predict_velocity: tau_flow must lie in [0,1]");
    }
    if (noised_chunk.numel() != cfg.chunk_dim()) {
        throw ShapeError("predict_velocity: chunk does not match horizon x d_action");
    }
    if (!latent.proprio.defined() || latent.proprio.numel() != cfg.d_proprio) {
        throw ShapeError("predict_velocity: latent is missing the proprio conditioning");
    }
    // The head regresses the displacement to the data point,
    // r = (1 - tau) * (omega - a) = a_noised - a, which stays smooth in its
    // inputs for all tau; dividing by the remaining time recovers the
    // velocity-scale estimate of omega - a. The floor keeps the scale
    // bounded on the final integration steps. A per-coordinate linear
    // bypass on the noised chunk carries the identity part of r.
    const double remaining = std::max(1.0 - tau_flow, 0.05);
    Tensor chunk_flat = reshape(noised_chunk, {cfg.chunk_dim()});

    Tensor cond = concat({latent.z_fused, latent.z_pos, latent.z_channels, latent.proprio});
    Tensor hc1 =
        tanh(add(matvec(params.param("expert.cond_w1"), cond), params.param("expert.cond_b1")));
    Tensor hc2 =
        tanh(add(matvec(params.param("expert.cond_w2"), hc1), params.param("expert.cond_b2")));

    Tensor noise_in =
        concat({chunk_flat, Tensor::scalar(tau_flow), Tensor::scalar(0.05 / remaining)});
    Tensor hx = tanh(add(matvec(params.param("expert.noise_w1"), noise_in),
                         params.param("expert.noise_b1")));

    Tensor out = add(matvec(params.param("expert.out_w"), concat({hc2, hx})),
                     params.param("expert.out_b"));
    out = add(out, mul(params.param("expert.skip"), chunk_flat));
    return reshape(mul_scalar(out, 1.0 / remaining), {cfg.horizon, cfg.d_action});
}

ActionChunk sample_actions(const Observation& obs, const Instruction& instr,
                           const PolicyParameters& params, int n_steps, RngStream& rng) {
    const PolicyConfig& cfg = params.config();
    if (n_steps < 1) throw ContractError("sample_actions: n_steps must be >= 1");

    std::vector<double> x(static_cast<size_t>(cfg.chunk_dim()));
    for (double& v : x) v = rng.normal();

    NoGradGuard guard;
    LatentPair latent = encode(obs, instr, params);
    const double dt = 1.0 / static_cast<double>(n_steps);
    for (int k = 0; k < n_steps; ++k) {
        const double tau = static_cast<double>(k) * dt;
        Tensor chunk = Tensor::from_data({cfg.horizon, cfg.d_action}, x, false);
        Tensor vel = predict_velocity(chunk, tau, latent, params);
        const std::vector<double>& v = vel.data();
        // the expert regresses the noise-minus-data residual, so the path
        // velocity toward the data is its negation
        for (size_t i = 0; i < x.size(); ++i) x[i] -= dt * v[i];
    }

    ActionChunk out{cfg.horizon, cfg.d_action, std::move(x)};
    for (double& v : out.a) v = std::clamp(v, -1.0, 1.0);
    return out;
}

}  // namespace infovla
