#include "infovla/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "infovla/losses.hpp"
#include "infovla/policy.hpp"
#include "infovla/rng.hpp"
#include "infovla/tensor.hpp"

namespace infovla {

namespace {

constexpr double kStep = 1e-4;
constexpr double kThreshold = 1e-4;

Tensor rand_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
    int n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(-scale, scale);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

struct Probe {
    double max_rel_err = 0.0;
    int checked = 0;
};

// forward() rebuilds the graph from current leaf data; 5-point central
// differences at step 1e-4 against the reverse-mode result, skipping
// coordinates with |analytic| < 1e-8.
void probe_instance(const std::function<Tensor()>& forward, std::vector<Tensor> leaves,
                    Probe& probe) {
    for (Tensor& l : leaves) l.zero_grad();
    Tensor loss = forward();
    backward(loss);
    // agreement below the stencil's double-precision resolution counts as
    // exact; genuine gradient bugs sit orders of magnitude above it
    const double noise_floor = 1e-11 * (1.0 + std::abs(loss.value()));
    for (Tensor& leaf : leaves) {
        if (!leaf.has_grad()) continue;
        const std::vector<double> analytic = leaf.grad();
        auto& x = leaf.mutable_data();
        for (size_t i = 0; i < x.size(); ++i) {
            if (std::abs(analytic[i]) < 1e-8) continue;
            const double orig = x[i];
            auto eval = [&](double delta) {
                x[i] = orig + delta;
                return forward().value();
            };
            const double numeric =
                (8.0 * (eval(kStep) - eval(-kStep)) - (eval(2.0 * kStep) - eval(-2.0 * kStep))) /
                (12.0 * kStep);
            x[i] = orig;
            ++probe.checked;
            const double diff = std::abs(analytic[i] - numeric);
            if (diff <= noise_floor) continue;
            const double rel = diff / std::max(std::abs(analytic[i]), std::abs(numeric));
            probe.max_rel_err = std::max(probe.max_rel_err, rel);
        }
    }
}

LatentPair rand_latent(int d, RngStream& rng, bool requires_grad) {
    LatentPair z;
    z.z_v = rand_tensor({d}, rng);
    z.z_l = rand_tensor({d}, rng);
    z.z_fused = rand_tensor({d}, rng);
    if (!requires_grad) {
        z.z_v = z.z_v.detach();
        z.z_l = z.z_l.detach();
        z.z_fused = z.z_fused.detach();
    }
    z.attn = Tensor::from_data({2}, {0.5, 0.5}, false);
    return z;
}

PolicyConfig gradcheck_policy_config() {
    PolicyConfig cfg;
    cfg.image_c = 3;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.patch = 4;
    cfg.d_latent = 8;
    cfg.d_proprio = 4;
    cfg.horizon = 2;
    cfg.d_action = 2;
    cfg.expert_hidden = 8;
    return cfg;
}

Observation rand_observation(const PolicyConfig& cfg, RngStream& rng) {
    Observation obs;
    obs.image.resize(static_cast<size_t>(cfg.image_c) * cfg.image_h * cfg.image_w);
    for (double& v : obs.image) v = rng.uniform();
    obs.proprio = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(-1.0, 1.0)};
    return obs;
}

using InstanceFn = std::function<void(RngStream&, Probe&)>;

}  // namespace

std::vector<GradCheckEntry> run_gradient_suite(int instances, std::uint64_t seed,
                                               bool include_corrupt_fixture) {
    std::vector<std::pair<const char*, InstanceFn>> checks;

    auto simple = [](Shape shape, auto make_forward) {
        return [shape, make_forward](RngStream& rng, Probe& probe) {
            Tensor a = rand_tensor(shape, rng);
            Tensor b = rand_tensor(shape, rng);
            probe_instance([&] { return make_forward(a, b); }, {a, b}, probe);
        };
    };

    checks.emplace_back("add", simple({3, 2}, [](Tensor& a, Tensor& b) { return sum(add(a, b)); }));
    checks.emplace_back("sub", simple({4}, [](Tensor& a, Tensor& b) { return sum(sub(a, b)); }));
    checks.emplace_back("mul", simple({2, 3}, [](Tensor& a, Tensor& b) { return sum(mul(a, b)); }));
    checks.emplace_back("div", simple({5}, [](Tensor& a, Tensor& b) {
        return sum(div(a, add_scalar(mul(b, b), 1.0)));
    }));
    checks.emplace_back("scalar_ops", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({6}, rng);
        probe_instance([&] { return sum(add_scalar(mul_scalar(a, 1.7), -0.3)); }, {a}, probe);
    });
    checks.emplace_back("exp", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({5}, rng);
        probe_instance([&] { return sum(exp(a)); }, {a}, probe);
    });
    checks.emplace_back("log", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({5}, rng);
        probe_instance([&] { return sum(log(add_scalar(mul(a, a), 1.0))); }, {a}, probe);
    });
    checks.emplace_back("sqrt", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({5}, rng);
        probe_instance([&] { return sum(sqrt(add_scalar(mul(a, a), 0.5))); }, {a}, probe);
    });
    checks.emplace_back("tanh", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({6}, rng);
        probe_instance([&] { return sum(tanh(a)); }, {a}, probe);
    });
    checks.emplace_back("clamp_min", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({6}, rng);
        // keep perturbations away from the kink
        for (double& v : a.mutable_data()) {
            if (std::abs(v - 0.1) < 0.01) v += 0.05;
        }
        probe_instance([&] { return sum(mul(clamp_min(a, 0.1), a)); }, {a}, probe);
    });
    checks.emplace_back("sum", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({2, 4}, rng);
        probe_instance([&] { return sum(a); }, {a}, probe);
    });
    checks.emplace_back("mean", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({7}, rng);
        probe_instance([&] { return mean(mul(a, a)); }, {a}, probe);
    });
    checks.emplace_back("sum_axis", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({3, 4}, rng);
        probe_instance([&] { return dot(sum_axis(a, 0), sum_axis(transpose(a), 1)); }, {a}, probe);
    });
    checks.emplace_back("matmul", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({3, 4}, rng);
        Tensor b = rand_tensor({4, 2}, rng);
        probe_instance([&] { return sum(matmul(a, b)); }, {a, b}, probe);
    });
    checks.emplace_back("transpose", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({2, 5}, rng);
        probe_instance([&] { return sum(mul(transpose(a), transpose(a))); }, {a}, probe);
    });
    checks.emplace_back("reshape", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({2, 6}, rng);
        probe_instance([&] { return sum(mul(reshape(a, {3, 4}), reshape(a, {3, 4}))); }, {a}, probe);
    });
    checks.emplace_back("concat", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({3}, rng);
        Tensor b = rand_tensor({5}, rng);
        probe_instance(
            [&] {
                Tensor c = concat({a, b});
                return sum(mul(c, c));
            },
            {a, b}, probe);
    });
    checks.emplace_back("add_row_broadcast", [](RngStream& rng, Probe& probe) {
        Tensor m = rand_tensor({3, 4}, rng);
        Tensor r = rand_tensor({4}, rng);
        probe_instance(
            [&] {
                Tensor s = add_row_broadcast(m, r);
                return mean(mul(s, s));
            },
            {m, r}, probe);
    });
    checks.emplace_back("embedding_row", [](RngStream& rng, Probe& probe) {
        Tensor table = rand_tensor({5, 4}, rng);
        const int row = rng.uniform_int(5);
        probe_instance(
            [&] {
                Tensor e = embedding_row(table, row);
                return sum(mul(e, e));
            },
            {table}, probe);
    });
    checks.emplace_back("softmax", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({6}, rng, 3.0);
        Tensor w = rand_tensor({6}, rng).detach();
        probe_instance([&] { return sum(mul(w, softmax(a))); }, {a}, probe);
    });
    checks.emplace_back("softmax_2d", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({3, 4}, rng, 3.0);
        Tensor w = rand_tensor({3, 4}, rng).detach();
        probe_instance([&] { return sum(mul(w, softmax(a, 0))); }, {a}, probe);
    });
    checks.emplace_back("kl_divergence", [](RngStream& rng, Probe& probe) {
        Tensor lp = rand_tensor({6}, rng, 2.0);
        Tensor lq = rand_tensor({6}, rng, 2.0);
        probe_instance([&] { return kl_divergence(softmax(lp), softmax(lq)); }, {lp, lq}, probe);
    });
    checks.emplace_back("mse", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({2, 3}, rng);
        Tensor b = rand_tensor({2, 3}, rng);
        probe_instance([&] { return mse(a, b); }, {a, b}, probe);
    });
    checks.emplace_back("l2_normalize", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({5}, rng);
        Tensor w = rand_tensor({5}, rng).detach();
        probe_instance([&] { return dot(w, l2_normalize(a)); }, {a}, probe);
    });
    checks.emplace_back("cosine_similarity", [](RngStream& rng, Probe& probe) {
        Tensor a = rand_tensor({6}, rng);
        Tensor b = rand_tensor({6}, rng);
        probe_instance([&] { return cosine_similarity(a, b); }, {a, b}, probe);
    });

    // ---- losses ----
    checks.emplace_back("rac_loss", [](RngStream& rng, Probe& probe) {
        const int B = 3, d = 6;
        std::vector<LatentPair> students, anchors;
        std::vector<Tensor> leaves;
        for (int i = 0; i < B; ++i) {
            students.push_back(rand_latent(d, rng, true));
            anchors.push_back(rand_latent(d, rng, false));
            leaves.push_back(students.back().z_fused);
        }
        std::vector<bool> mask{true, false, true};
        probe_instance([&] { return rac_loss(students, anchors, mask, 0.2); }, leaves, probe);
    });
    checks.emplace_back("rac_loss_student_negatives", [](RngStream& rng, Probe& probe) {
        const int B = 3, d = 5;
        std::vector<LatentPair> students, anchors;
        std::vector<Tensor> leaves;
        for (int i = 0; i < B; ++i) {
            students.push_back(rand_latent(d, rng, true));
            anchors.push_back(rand_latent(d, rng, false));
            leaves.push_back(students.back().z_fused);
        }
        std::vector<bool> mask{true, true, false};
        probe_instance(
            [&] { return rac_loss(students, anchors, mask, 0.2, RacNegatives::kStudents); },
            leaves, probe);
    });
    checks.emplace_back("project_F", [](RngStream& rng, Probe& probe) {
        MiEstimatorParameters est = MiEstimatorParameters::init(5, 3, 6, rng);
        LatentPair z = rand_latent(5, rng, true);
        Tensor w = rand_tensor({9}, rng).detach();
        std::vector<Tensor> leaves{z.z_v, z.z_l, est.param("v_proj"), est.param("l_proj")};
        probe_instance([&] { return dot(w, project_F(z, est)); }, leaves, probe);
    });
    checks.emplace_back("mi_loss", [](RngStream& rng, Probe& probe) {
        MiEstimatorParameters est = MiEstimatorParameters::init(5, 3, 6, rng);
        std::vector<LatentPair> old_b, new_b;
        std::vector<Tensor> leaves;
        for (int i = 0; i < 3; ++i) {
            old_b.push_back(rand_latent(5, rng, false));
            new_b.push_back(rand_latent(5, rng, true));
            leaves.push_back(new_b.back().z_v);
            leaves.push_back(new_b.back().z_l);
            leaves.push_back(new_b.back().z_fused);
        }
        for (auto& [name, t] : est.trainable()) leaves.push_back(t);
        probe_instance([&] { return mi_loss(old_b, new_b, est); }, leaves, probe);
    });
    // the teacher marginal is a stop-gradient, so mc and cmi are probed
    // against the student-side inputs where central differences are valid
    checks.emplace_back("mc_loss", [](RngStream& rng, Probe& probe) {
        MiEstimatorParameters est = MiEstimatorParameters::init(5, 3, 6, rng);
        std::vector<LatentPair> old_b, new_b;
        std::vector<Tensor> leaves;
        for (int i = 0; i < 3; ++i) {
            old_b.push_back(rand_latent(5, rng, false));
            new_b.push_back(rand_latent(5, rng, true));
            leaves.push_back(new_b.back().z_v);
            leaves.push_back(new_b.back().z_l);
        }
        probe_instance([&] { return mc_loss(old_b, new_b, est); }, leaves, probe);
    });
    checks.emplace_back("cmi_loss", [](RngStream& rng, Probe& probe) {
        MiEstimatorParameters est = MiEstimatorParameters::init(4, 3, 6, rng);
        std::vector<LatentPair> old_b, new_b;
        std::vector<Tensor> leaves;
        for (int i = 0; i < 3; ++i) {
            old_b.push_back(rand_latent(4, rng, false));
            new_b.push_back(rand_latent(4, rng, true));
            leaves.push_back(new_b.back().z_v);
            leaves.push_back(new_b.back().z_l);
            leaves.push_back(new_b.back().z_fused);
        }
        probe_instance([&] { return cmi_loss(old_b, new_b, est); }, leaves, probe);
    });
    checks.emplace_back("flow_matching_loss", [](RngStream& rng, Probe& probe) {
        PolicyConfig cfg = gradcheck_policy_config();
        PolicyParameters params = PolicyParameters::init(cfg, rng);
        Observation obs = rand_observation(cfg, rng);
        Instruction instr{0, rng.uniform_int(cfg.n_objects), rng.uniform_int(cfg.n_targets)};
        ActionChunk chunk = ActionChunk::zeros(cfg.horizon, cfg.d_action);
        for (double& a : chunk.a) a = rng.uniform(-1.0, 1.0);
        std::vector<double> omega(chunk.a.size());
        for (double& w : omega) w = rng.normal();
        const double tau = rng.uniform();
        std::vector<Tensor> leaves;
        for (auto& [name, t] : params.trainable()) leaves.push_back(t);
        probe_instance(
            [&] { return flow_matching_loss_at(chunk, obs, instr, params, omega, tau); }, leaves,
            probe);
    });
    checks.emplace_back("total_loss", [](RngStream& rng, Probe& probe) {
        PolicyConfig cfg = gradcheck_policy_config();
        PolicyParameters params = PolicyParameters::init(cfg, rng);
        MiEstimatorParameters est = MiEstimatorParameters::init(cfg.d_latent, 3, 6, rng);
        Observation obs = rand_observation(cfg, rng);
        Instruction instr{0, 0, 1};
        ActionChunk chunk = ActionChunk::zeros(cfg.horizon, cfg.d_action);
        for (double& a : chunk.a) a = rng.uniform(-1.0, 1.0);
        std::vector<double> omega(chunk.a.size());
        for (double& w : omega) w = rng.normal();
        const double tau = rng.uniform();
        std::vector<LatentPair> anchors{rand_latent(cfg.d_latent, rng, false),
                                        rand_latent(cfg.d_latent, rng, false)};
        std::vector<bool> mask{true, true};
        std::vector<Tensor> leaves;
        for (auto& [name, t] : params.trainable()) leaves.push_back(t);
        auto forward = [&] {
            LatentPair lat = encode(obs, instr, params);
            Tensor cl = flow_matching_loss_latent_at(chunk, lat, params, omega, tau);
            std::vector<LatentPair> students{lat, lat};
            Tensor rac = rac_loss(students, anchors, mask, 0.2);
            Tensor cmi = cmi_loss(anchors, students, est);
            return total_loss(cl, rac, cmi, 0.1, 0.1);
        };
        probe_instance(forward, leaves, probe);
    });
    checks.emplace_back("ewc_penalty", [](RngStream& rng, Probe& probe) {
        PolicyConfig cfg = gradcheck_policy_config();
        PolicyParameters params = PolicyParameters::init(cfg, rng);
        EwcAnchor anchor;
        for (const auto& [name, t] : params.params()) {
            auto ref = t.data();
            std::vector<double> fi(ref.size());
            for (size_t i = 0; i < ref.size(); ++i) {
                ref[i] += rng.uniform(-0.3, 0.3);
                fi[i] = rng.uniform(0.1, 1.0);
            }
            anchor.reference[name] = std::move(ref);
            anchor.fisher[name] = std::move(fi);
        }
        std::vector<Tensor> leaves{params.param("expert.out_b"), params.param("fuse.out_b")};
        probe_instance([&] { return ewc_penalty(params, anchor, 2.0); }, leaves, probe);
    });

    std::vector<GradCheckEntry> entries;
    RngStream rng(RngStream::derive(seed, {0x96adc4ec}));
    for (auto& [op, fn] : checks) {
        Probe probe;
        for (int k = 0; k < instances; ++k) fn(rng, probe);
        GradCheckEntry e;
        e.op = op;
        e.max_rel_err = probe.max_rel_err;
        e.coordinates_checked = probe.checked;
        e.pass = probe.checked > 0 && probe.max_rel_err < kThreshold;
        entries.push_back(std::move(e));
    }

    if (include_corrupt_fixture) {
        // claims d(x.x)/dx = x instead of 2x; must be rejected
        Probe probe;
        for (int k = 0; k < instances; ++k) {
            Tensor x = rand_tensor({4}, rng);
            auto forward = [&] { return mul_scalar(dot(x, x), 0.5); };
            probe_instance(forward, {x}, probe);  // analytic is x, fd of 0.5*x.x is x -> ok
            // now corrupt: compare fd of x.x against the 0.5-scaled analytic
            auto corrupt_forward = [&] { return dot(x, x); };
            for (Tensor& l : std::vector<Tensor>{x}) l.zero_grad();
            backward(forward());
            const std::vector<double> analytic = x.grad();
            auto& data = x.mutable_data();
            for (size_t i = 0; i < data.size(); ++i) {
                if (std::abs(analytic[i]) < 1e-8) continue;
                const double orig = data[i];
                data[i] = orig + kStep;
                const double fp = corrupt_forward().value();
                data[i] = orig - kStep;
                const double fm = corrupt_forward().value();
                data[i] = orig;
                const double numeric = (fp - fm) / (2.0 * kStep);
                const double rel = std::abs(analytic[i] - numeric) /
                                   std::max(std::abs(analytic[i]), std::abs(numeric));
                probe.max_rel_err = std::max(probe.max_rel_err, rel);
                ++probe.checked;
            }
        }
        GradCheckEntry e;
        e.op = "corrupt_fixture";
        e.max_rel_err = probe.max_rel_err;
        e.coordinates_checked = probe.checked;
        e.pass = probe.checked > 0 && probe.max_rel_err < kThreshold;
        entries.push_back(std::move(e));
    }
    return entries;
}

bool gradient_suite_ok(const std::vector<GradCheckEntry>& entries) {
    for (const GradCheckEntry& e : entries) {
        if (!e.pass) return false;
    }
    return !entries.empty();
}

std::string gradient_suite_report(const std::vector<GradCheckEntry>& entries) {
    std::ostringstream os;
    char buf[128];
    for (const GradCheckEntry& e : entries) {
        std::snprintf(buf, sizeof buf, "%-28s max_rel_err %.3e  (%d coords)  %s\n", e.op.c_str(),
                      e.max_rel_err, e.coordinates_checked, e.pass ? "ok" : "FAIL");
        os << buf;
    }
    os << (gradient_suite_ok(entries) ? "gradient suite: all checks passed\n"
                                      : "gradient suite: FAILURES present\n");
    return os.str();
}

}  // namespace infovla
