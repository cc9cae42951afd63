#include "infovla/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "infovla/errors.hpp"
#include "infovla/rng.hpp"

using namespace infovla;

namespace {

LatentPair make_latent(int d, RngStream& rng, bool requires_grad = true) {
    auto vec = [&](double scale) {
        std::vector<double> v(static_cast<size_t>(d));
        for (double& x : v) x = rng.uniform(-scale, scale);
        return v;
    };
    LatentPair z;
    z.z_v = Tensor::from_data({d}, vec(1.0), requires_grad);
    z.z_l = Tensor::from_data({d}, vec(1.0), requires_grad);
    z.z_fused = Tensor::from_data({d}, vec(1.0), requires_grad);
    z.attn = Tensor::from_data({4}, {0.25, 0.25, 0.25, 0.25}, false);
    return z;
}

// ---- independent scalar re-implementations (plain loops, no Tensor) ----

std::vector<double> normalized(const std::vector<double>& v) {
    double ss = 1e-24;
    for (double x : v) ss += x * x;
    const double inv = 1.0 / std::sqrt(ss);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
    return out;
}

double dot_raw(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double rac_oracle(const std::vector<std::vector<double>>& students,
                  const std::vector<std::vector<double>>& anchors,
                  const std::vector<bool>& mask, double tau) {
    const size_t B = students.size();
    double total = 0.0;
    int n = 0;
    for (size_t i = 0; i < B; ++i) {
        if (!mask[i]) continue;
        const auto vi = normalized(students[i]);
        const double pos = dot_raw(vi, normalized(anchors[i])) / tau;
        double denom = 0.0;
        for (size_t j = 0; j < B; ++j) denom += std::exp(dot_raw(vi, normalized(anchors[j])) / tau);
        total += -(pos - std::log(denom));
        ++n;
    }
    return total / n;
}

std::vector<double> matvec_raw(const std::vector<double>& w, int rows, int cols,
                               const std::vector<double>& x) {
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) out[r] += w[static_cast<size_t>(r) * cols + c] * x[c];
    }
    return out;
}

std::vector<double> softmax_raw(std::vector<double> v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        z += x;
    }
    for (double& x : v) x /= z;
    return v;
}

std::vector<double> project_f_oracle(const LatentPair& z, const MiEstimatorParameters& est,
                                     int d) {
    const int k = est.k_bins();
    auto v = matvec_raw(est.param("v_proj").data(), k, d, z.z_v.data());
    auto l = matvec_raw(est.param("l_proj").data(), k, d, z.z_l.data());
    std::vector<double> logits(static_cast<size_t>(k) * k);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) logits[static_cast<size_t>(a) * k + b] = v[a] * l[b];
    }
    return softmax_raw(std::move(logits));
}

std::vector<double> joint_oracle(const LatentPair& z_old, const LatentPair& z_new,
                                 const MiEstimatorParameters& est, int d) {
    const int k = est.k_bins();
    auto po = matvec_raw(est.param("v_proj").data(), k, d, z_old.z_fused.data());
    auto pn = matvec_raw(est.param("l_proj").data(), k, d, z_new.z_fused.data());
    std::vector<double> x;
    x.insert(x.end(), po.begin(), po.end());
    x.insert(x.end(), pn.begin(), pn.end());
    const int h = est.param("joint.b1").numel();
    auto h1 = matvec_raw(est.param("joint.w1").data(), h, 2 * k, x);
    for (int i = 0; i < h; ++i) h1[i] = std::tanh(h1[i] + est.param("joint.b1").data()[i]);
    auto logits = matvec_raw(est.param("joint.w2").data(), k * k, h, h1);
    for (int i = 0; i < k * k; ++i) logits[i] += est.param("joint.b2").data()[i];
    return softmax_raw(std::move(logits));
}

double kl_raw(const std::vector<double>& p, const std::vector<double>& q) {
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        s += p[i] * (std::log(std::max(p[i], 1e-8)) - std::log(std::max(q[i], 1e-8)));
    }
    return s;
}

double mi_oracle(const std::vector<LatentPair>& old_batch, const std::vector<LatentPair>& new_batch,
                 const MiEstimatorParameters& est, int d) {
    const int k = est.k_bins();
    const size_t B = old_batch.size();
    std::vector<double> p_old(static_cast<size_t>(k) * k, 0.0), p_new(p_old);
    for (size_t i = 0; i < B; ++i) {
        auto fo = project_f_oracle(old_batch[i], est, d);
        auto fn = project_f_oracle(new_batch[i], est, d);
        for (size_t j = 0; j < fo.size(); ++j) {
            p_old[j] += fo[j] / B;
            p_new[j] += fn[j] / B;
        }
    }
    std::vector<double> row_old(k, 0.0), col_new(k, 0.0);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) {
            row_old[a] += p_old[static_cast<size_t>(a) * k + b];
            col_new[b] += p_new[static_cast<size_t>(a) * k + b];
        }
    }
    std::vector<double> product(static_cast<size_t>(k) * k);
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) product[static_cast<size_t>(a) * k + b] = row_old[a] * col_new[b];
    }
    double acc = 0.0;
    for (size_t i = 0; i < B; ++i) {
        acc += kl_raw(joint_oracle(old_batch[i], new_batch[i], est, d), product);
    }
    return -(acc / B);
}

double mc_oracle(const std::vector<LatentPair>& old_batch, const std::vector<LatentPair>& new_batch,
                 const MiEstimatorParameters& est, int d) {
    const int k = est.k_bins();
    const size_t B = old_batch.size();
    std::vector<double> p_old(static_cast<size_t>(k) * k, 0.0), p_new(p_old);
    for (size_t i = 0; i < B; ++i) {
        auto fo = project_f_oracle(old_batch[i], est, d);
        auto fn = project_f_oracle(new_batch[i], est, d);
        for (size_t j = 0; j < fo.size(); ++j) {
            p_old[j] += fo[j] / B;
            p_new[j] += fn[j] / B;
        }
    }
    return kl_raw(p_new, p_old);
}

PolicyConfig tiny_policy_config() {
    PolicyConfig cfg;
    cfg.image_c = 3;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.patch = 4;
    cfg.d_latent = 8;
    cfg.horizon = 2;
    cfg.d_action = 2;
    cfg.expert_hidden = 8;
    return cfg;
}

Observation tiny_obs(const PolicyConfig& cfg, RngStream& rng) {
    Observation obs;
    obs.image.resize(static_cast<size_t>(cfg.image_c) * cfg.image_h * cfg.image_w);
    for (double& v : obs.image) v = rng.uniform();
    obs.proprio = {0.2, -0.4, 1.0, 0.0};
    return obs;
}

}  // namespace

TEST_CASE("rac_loss equals ln B when all latents coincide") {
    RngStream rng(71);
    const int B = 4;
    LatentPair base = make_latent(6, rng);
    std::vector<LatentPair> students(B, base), anchors(B, base);
    std::vector<bool> mask(B, true);
    for (double tau : {0.07, 0.5, 2.0}) {
        Tensor loss = rac_loss(students, anchors, mask, tau);
        CHECK(loss.value() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
        Tensor prose = rac_loss(students, anchors, mask, tau, RacNegatives::kStudents);
        CHECK(prose.value() == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
}

TEST_CASE("rac_loss saturated positive pair is nearly zero") {
    LatentPair s1, s2, a1, a2;
    s1.z_fused = Tensor::from_data({2}, {1.0, 0.0}, true);
    a1.z_fused = Tensor::from_data({2}, {1.0, 0.0});   // cos = +1
    a2.z_fused = Tensor::from_data({2}, {-1.0, 0.0});  // cos = -1
    s2.z_fused = Tensor::from_data({2}, {0.0, 1.0}, true);
    std::vector<LatentPair> students{s1, s2}, anchors{a1, a2};
    std::vector<bool> mask{true, false};
    // tau = 0.1 puts the logits at +10 / -10
    Tensor loss = rac_loss(students, anchors, mask, 0.1);
    CHECK(loss.value() == doctest::Approx(2.0611536e-9).epsilon(1e-3));
}

TEST_CASE("rac_loss matches the direct-formula oracle on random batches") {
    RngStream rng(73);
    const int B = 5, d = 7;
    std::vector<LatentPair> students, anchors;
    std::vector<std::vector<double>> s_raw, a_raw;
    for (int i = 0; i < B; ++i) {
        students.push_back(make_latent(d, rng));
        anchors.push_back(make_latent(d, rng));
        s_raw.push_back(students.back().z_fused.data());
        a_raw.push_back(anchors.back().z_fused.data());
    }
    std::vector<bool> mask{true, false, true, true, false};
    Tensor loss = rac_loss(students, anchors, mask, 0.07);
    CHECK(loss.value() == doctest::Approx(rac_oracle(s_raw, a_raw, mask, 0.07)).epsilon(1e-10));
    CHECK(loss.value() >= 0.0);
}

TEST_CASE("rac_loss is invariant to positive rescaling of latents") {
    RngStream rng(79);
    const int B = 4;
    std::vector<LatentPair> students, anchors;
    for (int i = 0; i < B; ++i) {
        students.push_back(make_latent(6, rng));
        anchors.push_back(make_latent(6, rng));
    }
    std::vector<bool> mask{true, true, false, true};
    const double base = rac_loss(students, anchors, mask, 0.07).value();
    for (double c : {0.1, 10.0}) {
        std::vector<LatentPair> scaled = students;
        for (auto& z : scaled) z.z_fused = mul_scalar(z.z_fused, c);
        CHECK(std::abs(rac_loss(scaled, anchors, mask, 0.07).value() - base) < 1e-9);
    }
}

TEST_CASE("rac_loss contract errors") {
    RngStream rng(83);
    std::vector<LatentPair> one{make_latent(4, rng)};
    CHECK_THROWS_AS(rac_loss(one, one, {true}, 0.07), ContractError);
    std::vector<LatentPair> two{make_latent(4, rng), make_latent(4, rng)};
    CHECK_THROWS_AS(rac_loss(two, two, {false, false}, 0.07), ContractError);
}

TEST_CASE("rac_loss sends no gradient into the teacher anchors") {
    RngStream rng(89);
    std::vector<LatentPair> students{make_latent(5, rng), make_latent(5, rng)};
    std::vector<LatentPair> anchors{make_latent(5, rng), make_latent(5, rng)};
    Tensor loss = rac_loss(students, anchors, {true, true}, 0.07);
    backward(loss);
    for (const auto& z : anchors) CHECK_FALSE(z.z_fused.has_grad());
    for (const auto& z : students) CHECK(z.z_fused.has_grad());
}

TEST_CASE("rac_loss gradient matches finite differences (both negative modes)") {
    RngStream rng(97);
    const int B = 3, d = 5;
    std::vector<LatentPair> students, anchors;
    std::vector<Tensor> leaves;
    for (int i = 0; i < B; ++i) {
        students.push_back(make_latent(d, rng));
        anchors.push_back(make_latent(d, rng));
        leaves.push_back(students.back().z_fused);
    }
    std::vector<bool> mask{true, true, false};
    for (RacNegatives mode : {RacNegatives::kAnchors, RacNegatives::kStudents}) {
        auto res = fd::max_rel_grad_error(
            [&] { return rac_loss(students, anchors, mask, 0.2, mode); }, leaves);
        CHECK(res.checked > 0);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("project_F: zero projections give the uniform distribution") {
    RngStream rng(103);
    const int d = 6;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, 3, 8, rng);
    {
        auto& vd = est.param("v_proj").mutable_data();
        for (double& x : vd) x = 0.0;
    }
    LatentPair z = make_latent(d, rng);
    Tensor f = project_F(z, est);
    for (int i = 0; i < 9; ++i) CHECK(f.at(i) == doctest::Approx(1.0 / 9).epsilon(1e-12));
}

TEST_CASE("project_F outputs a distribution with rank-1 log structure") {
    RngStream rng(107);
    const int d = 6, k = 4;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 8, rng);
    for (int trial = 0; trial < 10; ++trial) {
        LatentPair z = make_latent(d, rng);
        Tensor f = project_F(z, est);
        double s = 0.0;
        for (int i = 0; i < k * k; ++i) s += f.at(i);
        CHECK(std::abs(s - 1.0) < 1e-9);

        // direct algebra: log F_ab - log F_cb = (V_a - V_c) * L_b
        auto v = matvec_raw(est.param("v_proj").data(), k, d, z.z_v.data());
        auto l = matvec_raw(est.param("l_proj").data(), k, d, z.z_l.data());
        for (int a = 0; a < k; ++a) {
            for (int c = 0; c < k; ++c) {
                for (int b = 0; b < k; ++b) {
                    const double lhs = std::log(f.at(a * k + b)) - std::log(f.at(c * k + b));
                    CHECK(lhs == doctest::Approx((v[a] - v[c]) * l[b]).epsilon(1e-8));
                }
            }
        }
    }
}

TEST_CASE("joint_distribution: valid distribution, uniform under zero head, deterministic") {
    RngStream rng(109);
    const int d = 6, k = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 8, rng);
    LatentPair zo = make_latent(d, rng), zn = make_latent(d, rng);
    Tensor j1 = joint_distribution(zo, zn, est);
    Tensor j2 = joint_distribution(zo, zn, est);
    CHECK(j1.data() == j2.data());
    double s = 0.0;
    for (int i = 0; i < k * k; ++i) {
        CHECK(j1.at(i) > 0.0);
        s += j1.at(i);
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
    CHECK(j1.data() == joint_oracle(zo, zn, est, d));

    est.zero_joint_mlp();
    Tensor ju = joint_distribution(zo, zn, est);
    for (int i = 0; i < k * k; ++i) CHECK(ju.at(i) == doctest::Approx(1.0 / (k * k)).epsilon(1e-12));
}

TEST_CASE("mi_loss: zero when joint equals the product of marginals") {
    RngStream rng(113);
    const int d = 5, k = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 6, rng);
    est.zero_joint_mlp();
    for (const char* name : {"v_proj", "l_proj"}) {
        auto& w = est.param(name).mutable_data();
        for (double& x : w) x = 0.0;
    }
    std::vector<LatentPair> old_b{make_latent(d, rng), make_latent(d, rng)};
    std::vector<LatentPair> new_b{make_latent(d, rng), make_latent(d, rng)};
    CHECK(std::abs(mi_loss(old_b, new_b, est).value()) <= 1e-9);
}

TEST_CASE("mi_loss and mc_loss keep the KL sign on random instances") {
    RngStream rng(127);
    const int d = 5, k = 3;
    for (int trial = 0; trial < 100; ++trial) {
        MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 6, rng);
        std::vector<LatentPair> old_b, new_b;
        const int B = 1 + rng.uniform_int(4);
        for (int i = 0; i < B; ++i) {
            old_b.push_back(make_latent(d, rng));
            new_b.push_back(make_latent(d, rng));
        }
        CHECK(mi_loss(old_b, new_b, est).value() <= 1e-9);
        CHECK(mc_loss(old_b, new_b, est).value() >= -1e-9);
    }
}

TEST_CASE("mi_loss matches the independent scalar oracle") {
    RngStream rng(131);
    const int d = 6, k = 3, B = 4;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 8, rng);
    std::vector<LatentPair> old_b, new_b;
    for (int i = 0; i < B; ++i) {
        old_b.push_back(make_latent(d, rng));
        new_b.push_back(make_latent(d, rng));
    }
    CHECK(mi_loss(old_b, new_b, est).value() ==
          doctest::Approx(mi_oracle(old_b, new_b, est, d)).epsilon(1e-10));
}

TEST_CASE("mc_loss: identity case, forced value, oracle") {
    RngStream rng(137);
    const int d = 6, k = 3, B = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 8, rng);
    std::vector<LatentPair> batch;
    for (int i = 0; i < B; ++i) batch.push_back(make_latent(d, rng));
    CHECK(std::abs(mc_loss(batch, batch, est).value()) <= 1e-9);

    // the forced K=2 arithmetic the marginal KL reduces to
    Tensor sharp = Tensor::from_data({4}, {1.0, 0.0, 0.0, 0.0});
    Tensor uniform = Tensor::from_data({4}, {0.25, 0.25, 0.25, 0.25});
    CHECK(kl_divergence(sharp, uniform).value() == doctest::Approx(std::log(4.0)));

    std::vector<LatentPair> other;
    for (int i = 0; i < B; ++i) other.push_back(make_latent(d, rng));
    CHECK(mc_loss(batch, other, est).value() ==
          doctest::Approx(mc_oracle(batch, other, est, d)).epsilon(1e-10));
}

TEST_CASE("mc_loss detaches the teacher marginal") {
    RngStream rng(139);
    const int d = 5;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, 3, 6, rng);
    std::vector<LatentPair> old_b{make_latent(d, rng), make_latent(d, rng)};
    std::vector<LatentPair> new_b{make_latent(d, rng), make_latent(d, rng)};
    backward(mc_loss(old_b, new_b, est));
    for (const auto& z : old_b) {
        CHECK_FALSE(z.z_v.has_grad());
        CHECK_FALSE(z.z_l.has_grad());
    }
    for (const auto& z : new_b) CHECK(z.z_v.has_grad());
}

TEST_CASE("cmi_loss equals the sum of its parts") {
    RngStream rng(149);
    const int d = 6, B = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, 3, 8, rng);
    std::vector<LatentPair> old_b, new_b;
    for (int i = 0; i < B; ++i) {
        old_b.push_back(make_latent(d, rng));
        new_b.push_back(make_latent(d, rng));
    }
    const double expect = mi_loss(old_b, new_b, est).value() + mc_loss(old_b, new_b, est).value();
    CHECK(cmi_loss(old_b, new_b, est).value() == doctest::Approx(expect).epsilon(1e-14));

    // student == teacher with factorized estimator stays at ~0
    MiEstimatorParameters flat = MiEstimatorParameters::init(d, 3, 8, rng);
    flat.zero_joint_mlp();
    for (const char* name : {"v_proj", "l_proj"}) {
        auto& w = flat.param(name).mutable_data();
        for (double& x : w) x = 0.0;
    }
    CHECK(std::abs(cmi_loss(old_b, old_b, flat).value()) <= 1e-9);
}

TEST_CASE("cmi gradients match finite differences on the student side") {
    RngStream rng(151);
    const int d = 5, B = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, 3, 6, rng);
    std::vector<LatentPair> old_b, new_b;
    std::vector<Tensor> leaves;
    for (int i = 0; i < B; ++i) {
        old_b.push_back(make_latent(d, rng, false));
        new_b.push_back(make_latent(d, rng));
        leaves.push_back(new_b.back().z_v);
        leaves.push_back(new_b.back().z_l);
        leaves.push_back(new_b.back().z_fused);
    }
    // teacher marginals do not depend on these leaves, so central differences
    // are valid here
    auto res = fd::max_rel_grad_error([&] { return cmi_loss(old_b, new_b, est); }, leaves);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("mi gradients match finite differences for the shared estimator") {
    RngStream rng(152);
    const int d = 5, B = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, 3, 6, rng);
    std::vector<LatentPair> old_b, new_b;
    for (int i = 0; i < B; ++i) {
        old_b.push_back(make_latent(d, rng, false));
        new_b.push_back(make_latent(d, rng));
    }
    std::vector<Tensor> leaves;
    for (auto& [name, t] : est.trainable()) leaves.push_back(t);
    auto res = fd::max_rel_grad_error([&] { return mi_loss(old_b, new_b, est); }, leaves);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("mc estimator gradient equals the frozen-reference surrogate") {
    // mc_loss stops gradients through the teacher marginal, so perturbing the
    // shared estimator invalidates a naive finite difference. Build the same
    // objective with the teacher marginal as a literal constant, fd-verify
    // that, and require mc_loss to produce identical estimator gradients.
    RngStream rng(153);
    const int d = 5, B = 3, k = 3;
    MiEstimatorParameters est = MiEstimatorParameters::init(d, k, 6, rng);
    std::vector<LatentPair> old_b, new_b;
    for (int i = 0; i < B; ++i) {
        old_b.push_back(make_latent(d, rng, false));
        new_b.push_back(make_latent(d, rng, false));
    }
    std::vector<double> p_old_const;
    {
        Tensor acc;
        for (const auto& z : old_b) {
            Tensor f = project_F(z, est);
            acc = acc.defined() ? add(acc, f) : f;
        }
        p_old_const = mul_scalar(acc, 1.0 / B).data();
    }
    auto surrogate = [&] {
        Tensor acc;
        for (const auto& z : new_b) {
            Tensor f = project_F(z, est);
            acc = acc.defined() ? add(acc, f) : f;
        }
        Tensor p_new = mul_scalar(acc, 1.0 / B);
        return kl_divergence(p_new, Tensor::from_data({k * k}, p_old_const, false));
    };

    std::vector<Tensor> leaves{est.param("v_proj"), est.param("l_proj")};
    auto res = fd::max_rel_grad_error(surrogate, leaves);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);

    std::vector<std::vector<double>> surrogate_grads;
    for (Tensor& l : leaves) surrogate_grads.push_back(l.grad());

    for (Tensor& l : leaves) l.zero_grad();
    Tensor loss = mc_loss(old_b, new_b, est);
    CHECK(loss.value() == doctest::Approx(surrogate().value()).epsilon(1e-12));
    backward(loss);
    for (size_t i = 0; i < leaves.size(); ++i) {
        const auto& g = leaves[i].grad();
        for (size_t j = 0; j < g.size(); ++j) {
            CHECK(g[j] == doctest::Approx(surrogate_grads[i][j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("flow_matching_loss: exact expert gives zero, zero expert gives noise norm") {
    PolicyConfig cfg = tiny_policy_config();
    RngStream rng(157);
    PolicyParameters params = PolicyParameters::init(cfg, rng);
    Observation obs = tiny_obs(cfg, rng);
    Instruction instr{0, 1, 2};
    ActionChunk chunk{cfg.horizon, cfg.d_action, {0.5, -0.5, 0.25, 0.0}};

    // zero expert: loss must equal |omega - a|^2 / (H * Da)
    for (const char* name :
         {"expert.cond_w1", "expert.cond_b1", "expert.cond_w2", "expert.cond_b2", "expert.noise_w1", "expert.noise_b1", "expert.out_w", "expert.out_b", "expert.skip"}) {
        auto& d = params.param(name).mutable_data();
        for (double& x : d) x = 0.0;
    }
    std::vector<double> omega{0.3, -1.2, 0.8, 0.1};
    double expect = 0.0;
    for (size_t i = 0; i < omega.size(); ++i) {
        const double e = omega[i] - chunk.a[i];
        expect += e * e;
    }
    expect /= static_cast<double>(omega.size());
    Tensor loss = flow_matching_loss_at(chunk, obs, instr, params, omega, 0.4);
    CHECK(loss.value() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(loss.value() >= 0.0);

    // random draws stay nonnegative
    for (int trial = 0; trial < 10; ++trial) {
        CHECK(flow_matching_loss(chunk, obs, instr, params, rng).value() >= 0.0);
    }
}

TEST_CASE("flow_matching_loss gradient matches finite differences") {
    PolicyConfig cfg = tiny_policy_config();
    RngStream rng(163);
    PolicyParameters params = PolicyParameters::init(cfg, rng);
    Observation obs = tiny_obs(cfg, rng);
    Instruction instr{0, 2, 1};
    ActionChunk chunk{cfg.horizon, cfg.d_action, {0.2, -0.7, 0.4, 0.9}};
    std::vector<double> omega{-0.3, 0.5, 1.1, -0.2};

    std::vector<Tensor> leaves;
    for (auto& [name, t] : params.trainable()) leaves.push_back(t);
    auto res = fd::max_rel_grad_error(
        [&] { return flow_matching_loss_at(chunk, obs, instr, params, omega, 0.35); }, leaves);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("total_loss: bitwise identity at zero weights and linearity") {
    RngStream rng(167);
    Tensor cl = Tensor::scalar(0.625);
    Tensor rac = Tensor::scalar(1.5);
    Tensor cmi = Tensor::scalar(-0.25);

    Tensor t0 = total_loss(cl, Tensor{}, Tensor{}, 0.0, 0.0);
    CHECK(t0.id() == cl.id());  // literally the same tensor

    Tensor t1 = total_loss(cl, rac, cmi, 0.1, 0.1);
    CHECK(t1.value() == doctest::Approx(0.625 + 0.15 - 0.025).epsilon(1e-14));

    const double l1a = total_loss(cl, rac, cmi, 0.2, 0.1).value();
    const double l1b = total_loss(cl, rac, cmi, 0.4, 0.1).value();
    CHECK(l1b - l1a == doctest::Approx(0.2 * rac.value()).epsilon(1e-12));

    CHECK_THROWS_AS(total_loss(cl, Tensor{}, Tensor{}, 0.1, 0.0), ContractError);
}

TEST_CASE("fisher_diagonal: nonnegative, zero off the bias path, matches hand computation") {
    PolicyConfig cfg = tiny_policy_config();
    RngStream init_rng(173);
    PolicyParameters params = PolicyParameters::init(cfg, init_rng);
    // zero expert weights: the prediction reduces to the output bias, so
    // dL/db3_i = -2 (omega_i - a_i) / n and every other expert grad is 0
    for (const char* name : {"expert.cond_w1", "expert.cond_b1", "expert.cond_w2", "expert.cond_b2",
                             "expert.noise_w1", "expert.noise_b1", "expert.out_w", "expert.out_b",
                             "expert.skip"}) {
        auto& d = params.param(name).mutable_data();
        for (double& x : d) x = 0.0;
    }
    Dataset data;
    RngStream drng(179);
    for (int i = 0; i < 3; ++i) {
        StepSample s;
        s.obs = tiny_obs(cfg, drng);
        s.instr = {0, i % cfg.n_objects, i % cfg.n_targets};
        s.chunk = ActionChunk{cfg.horizon, cfg.d_action,
                              {drng.uniform(-1, 1), drng.uniform(-1, 1), drng.uniform(-1, 1),
                               drng.uniform(-1, 1)}};
        data.push_back(std::move(s));
    }

    const int n_samples = 5;
    RngStream fisher_rng(42);
    auto fisher = fisher_diagonal(params, data, n_samples, fisher_rng);

    // replicate the draw sequence to hand-compute the output-bias entries;
    // with zero weights the prediction is out_b / max(1 - tau, 0.05)
    RngStream replay(42);
    const int n = cfg.chunk_dim();
    std::vector<double> expect(static_cast<size_t>(n), 0.0);
    for (int s = 0; s < n_samples; ++s) {
        const StepSample& sample = data[replay.uniform_int(static_cast<int>(data.size()))];
        std::vector<double> omega(static_cast<size_t>(n));
        for (double& v : omega) v = replay.normal();
        const double tau = replay.uniform();
        const double remaining = std::max(1.0 - tau, 0.05);
        for (int i = 0; i < n; ++i) {
            const double g = -2.0 * (omega[i] - sample.chunk.a[i]) / (n * remaining);
            expect[i] += g * g / n_samples;
        }
    }
    for (int i = 0; i < n; ++i) {
        CHECK(fisher.at("expert.out_b")[i] == doctest::Approx(expect[i]).epsilon(1e-10));
    }
    for (const auto& [name, f] : fisher) {
        for (double x : f) CHECK(x >= 0.0);
        if (name == "expert.cond_w2" || name == "expert.cond_b2" || name == "expert.out_w") {
            for (double x : f) CHECK(x == 0.0);
        }
    }
    CHECK_THROWS_AS(fisher_diagonal(params, Dataset{}, 1, fisher_rng), ContractError);
}

TEST_CASE("ewc_penalty: zero at anchor, forced value, direct-sum oracle") {
    PolicyConfig cfg = tiny_policy_config();
    RngStream rng(181);
    PolicyParameters params = PolicyParameters::init(cfg, rng);

    EwcAnchor anchor;
    for (const auto& [name, t] : params.params()) {
        anchor.reference[name] = t.data();
        anchor.fisher[name].assign(t.numel(), 1.0);
    }
    CHECK(ewc_penalty(params, anchor, 1000.0).value() == doctest::Approx(0.0).epsilon(1e-15));

    // single parameter offset 2 with unit fisher and lambda 1 -> penalty 2
    {
        auto& d = params.param("expert.out_b").mutable_data();
        d[0] += 2.0;
    }
    EwcAnchor single;
    single.reference["expert.out_b"] = anchor.reference["expert.out_b"];
    single.fisher["expert.out_b"] = anchor.fisher["expert.out_b"];
    CHECK(ewc_penalty(params, single, 1.0).value() == doctest::Approx(2.0).epsilon(1e-12));

    // random instance vs direct summation
    RngStream r2(191);
    EwcAnchor random_anchor;
    double expect = 0.0;
    const double lambda = 3.5;
    for (const auto& [name, t] : params.params()) {
        auto ref = t.data();
        std::vector<double> fi(ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            ref[i] += r2.uniform(-0.5, 0.5);
            fi[i] = r2.uniform(0.0, 2.0);
            const double delta = t.data()[i] - ref[i];
            expect += 0.5 * lambda * fi[i] * delta * delta;
        }
        random_anchor.reference[name] = std::move(ref);
        random_anchor.fisher[name] = std::move(fi);
    }
    CHECK(ewc_penalty(params, random_anchor, lambda).value() ==
          doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("ewc_penalty gradient matches finite differences") {
    PolicyConfig cfg = tiny_policy_config();
    RngStream rng(193);
    PolicyParameters params = PolicyParameters::init(cfg, rng);
    EwcAnchor anchor;
    RngStream r2(197);
    for (const auto& [name, t] : params.params()) {
        auto ref = t.data();
        std::vector<double> fi(ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            ref[i] += r2.uniform(-0.3, 0.3);
            fi[i] = r2.uniform(0.1, 1.0);
        }
        anchor.reference[name] = std::move(ref);
        anchor.fisher[name] = std::move(fi);
    }
    std::vector<Tensor> leaves{params.param("expert.out_b"), params.param("fuse.out_b")};
    auto res = fd::max_rel_grad_error([&] { return ewc_penalty(params, anchor, 2.0); }, leaves);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
}
