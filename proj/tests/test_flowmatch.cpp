#include "doctest.h"

#include "vox/flowmatch.h"

#include <cmath>

using namespace vox;

namespace {

FlowConfig small_flow(size_t dims = 36) {
    FlowConfig c;
    c.width = 32;
    c.heads = 2;
    c.acoustic_dims = dims;
    c.time_embed_dim = 32;
    return c;
}

}  // namespace

TEST_CASE("flow head: shapes and conditioning") {
    Rng rng(1);
    FlowHead head(small_flow(), rng);
    CHECK(FlowHead::inner_length == 3);
    NoGradGuard ng;
    Tensor x({3, 36}, rng.normal_vec(108));
    Tensor h({3, 32}, rng.normal_vec(96));
    Tensor v = head.forward(x, {0.1f, 0.5f, 0.9f}, h);
    CHECK(v.shape() == Shape{3, 36});
    Tensor vu = head.forward(x, {0.1f, 0.5f, 0.9f}, Tensor::zeros({3, 32}));
    double diff = 0;
    for (size_t i = 0; i < v.numel(); ++i) diff += std::abs(v[i] - vu[i]);
    CHECK(diff > 1e-3);
    CHECK_THROWS(head.forward(x, {0.1f, 0.5f, 1.5f}, h));
    CHECK_THROWS(head.forward(x, {0.1f, 0.5f}, h));
}

TEST_CASE("flow matching loss: perfect predictor, zero predictor, path endpoints") {
    Rng rng(2);
    Tensor x0({5, 36}, rng.normal_vec(180));
    Tensor x1({5, 36}, rng.normal_vec(180));
    CHECK(flow_matching_loss(sub(x1, x0), x0, x1).item() == doctest::Approx(0));

    const size_t n = 4000;
    Tensor z0 = Tensor::zeros({n, 36});
    Tensor z1({n, 36}, rng.normal_vec(n * 36));
    const double mc = flow_matching_loss(Tensor::zeros({n, 36}), z0, z1).item();
    CHECK(std::abs(mc - 36) / 36 < 0.05);

    std::vector<real> t0(5, 0), t1(5, 1);
    CHECK(interpolate_path(x0, x1, t0).to_vector() == x0.to_vector());
    auto e1 = interpolate_path(x0, x1, t1).to_vector();
    for (size_t i = 0; i < e1.size(); ++i) CHECK(e1[i] == doctest::Approx(x1[i]));
    // the regression target does not depend on t
    Tensor v({5, 36}, rng.normal_vec(180));
    CHECK(flow_matching_loss(v, x0, x1).item() == flow_matching_loss(v, x0, x1).item());
}

TEST_CASE("flow loss: conditioning dropout rate") {
    Rng rng(3);
    size_t dropped = 0;
    const size_t n = 20000;
    auto d = draw_flow_noise(n, 2, 0.1, rng);
    for (bool k : d.keep_h) dropped += !k;
    CHECK(std::abs(double(dropped) / n - 0.1) < 0.01);
    for (real t : d.t) {
        CHECK(t >= 0);
        CHECK(t <= 1);
    }
}

TEST_CASE("cfg velocity: combination rule") {
    CHECK(cfg_combine(Tensor::from({1.0}), Tensor::from({0.5}), 1.2).item() == doctest::Approx(1.1));
    Rng rng(4);
    FlowHead head(small_flow(), rng);
    NoGradGuard ng;
    Tensor x({2, 36}, rng.normal_vec(72));
    Tensor h({2, 32}, rng.normal_vec(64));
    Tensor vc = head.forward(x, {0.3f, 0.3f}, h);
    Tensor vu = head.forward(x, {0.3f, 0.3f}, Tensor::zeros({2, 32}));
    auto v1 = cfg_velocity(head, x, 0.3f, h, 1.0);
    auto v0 = cfg_velocity(head, x, 0.3f, h, 0.0);
    for (size_t i = 0; i < vc.numel(); ++i) {
        CHECK(v1[i] == doctest::Approx(vc[i]).epsilon(1e-5));
        CHECK(v0[i] == doctest::Approx(vu[i]).epsilon(1e-5));
    }
    // affine in alpha
    auto va = cfg_velocity(head, x, 0.3f, h, 0.5);
    auto vb = cfg_velocity(head, x, 0.3f, h, 1.2);
    auto vd = cfg_velocity(head, x, 0.3f, h, 2.0);
    for (size_t i = 0; i < vc.numel(); ++i) {
        const double slope = (double(vb[i]) - va[i]) / 0.7;
        CHECK(vd[i] == doctest::Approx(va[i] + slope * 1.5).epsilon(1e-3));
    }
}

TEST_CASE("sampler: telescoping and closed-form stubs") {
    Rng rng(5);
    Tensor x1({2, 36}, rng.normal_vec(72));
    Tensor h = Tensor::zeros({2, 4});
    SamplerConfig cfg;
    VelocityField constant = [&](const Tensor &, real, const Tensor &) { return x1; };
    auto r = sample_from(constant, x1, h, cfg);
    CHECK(r.steps == 8);
    for (real v : r.values.data()) CHECK(std::abs(v) < 1e-5);
    for (int i : r.indices) CHECK(i == 10);

    Tensor small = scale(x1, real(0.5));
    VelocityField linear = [](const Tensor & x, real, const Tensor &) { return x; };
    auto l = sample_from(linear, small, h, cfg);
    const double factor = std::pow(1.0 - 1.0 / 8.0, 8);
    CHECK(factor == doctest::Approx(0.3436).epsilon(1e-3));
    for (size_t i = 0; i < small.numel(); ++i) {
        CHECK(l.values[i] == doctest::Approx(std::clamp(small[i] * factor, -1.0, 1.0)).epsilon(1e-5));
    }

    VelocityField nan_field = [](const Tensor & x, real t, const Tensor &) {
        auto v = x.to_vector();
        if (t < 0.6) v[0] = std::nanf("");
        return Tensor(x.shape(), v);
    };
    CHECK_THROWS_WITH_AS(sample_from(nan_field, x1, h, cfg), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("sampler: 2 * nfe network evaluations per frame and per-frame independence") {
    Rng rng(6);
    FlowHead head(small_flow(), rng);
    Tensor h({3, 32}, rng.normal_vec(96));
    Tensor x1({3, 36}, rng.normal_vec(108));
    for (size_t nfe : {1u, 4u, 8u}) {
        const size_t before = head.evaluations();
        sample_from(cfg_field(head, 1.2), slice(x1, 0, 0, 1), slice(h, 0, 0, 1), {.nfe = nfe});
        CHECK(head.evaluations() - before == 2 * nfe);
    }
    auto joint = sample_from(cfg_field(head, 1.2), x1, h, {});
    for (size_t i = 0; i < 3; ++i) {
        auto alone = sample_from(cfg_field(head, 1.2), slice(x1, 0, i, 1), slice(h, 0, i, 1), {});
        for (size_t d = 0; d < 36; ++d) CHECK(alone.values[d] == doctest::Approx(joint.values[i * 36 + d]).epsilon(1e-5));
    }
}

TEST_CASE("flow head: learns a two-cluster distribution") {
    Rng rng(7);
    FlowConfig c = small_flow(2);
    c.cond_dropout = 0;
    FlowHead head(c, rng);
    Adam opt(head.params(), {.lr = real(2e-3)});
    const double sigma = 0.08;
    const std::vector<std::pair<double, double>> centres{{-0.5, -0.4}, {0.5, 0.4}};
    const size_t batch = 128;
    Tensor h = Tensor::zeros({batch, 32});
    for (int step = 0; step < 1500; ++step) {
        std::vector<real> x0;
        for (size_t i = 0; i < batch; ++i) {
            const auto & [cx, cy] = centres[rng.uniform_int(2)];
            x0.push_back(real(cx + sigma * rng.normal()));
            x0.push_back(real(cy + sigma * rng.normal()));
        }
        backward(fm_loss(head, Tensor({batch, 2}, x0), h, rng));
        opt.step();
    }
    const size_t n = 1000;
    auto s = sample(cfg_field(head, 1.0), Tensor::zeros({n, 32}), 2, {.nfe = 8}, rng);
    size_t near = 0, left = 0;
    for (size_t i = 0; i < n; ++i) {
        const double x = s.values[2 * i], y = s.values[2 * i + 1];
        double best = 1e9;
        for (auto [cx, cy] : centres) best = std::min(best, std::hypot(x - cx, y - cy));
        near += best < 3 * sigma;
        left += x < 0;
    }
    MESSAGE("within 3 sigma: " << near << " / " << n << ", left cluster " << left);
    CHECK(double(near) / n >= 0.95);
    CHECK(left > 300);
    CHECK(left < 700);
}

TEST_CASE("tts loss: semantic plus flow terms train together") {
    auto bc = BackboneConfig::toy();
    Rng rng(8);
    TtsModel model(bc, rng);
    TrainingSample s;
    for (int i = 0; i < 14; ++i) s.a1.push_back({uint16_t(i % 5), {1, 2, 3, 4}});
    s.t2 = byte_tokens("abc");
    for (int i = 0; i < 8; ++i) s.a2.push_back({uint16_t(i % 3), {uint8_t(i), 5, 10, 20}});
    s.vad.assign(8, true);
    auto seq = model.backbone.assemble(s);
    Adam opt(model.params(), {.lr = real(3e-3)});
    double first = 0, last = 0;
    for (int step = 0; step < 60; ++step) {
        auto l = tts_loss(model, seq, rng);
        if (step == 0) first = l.semantic.item();
        last = l.semantic.item();
        CHECK(std::isfinite(l.flow.item()));
        backward(l.total);
        opt.step();
    }
    CHECK(last < 0.5 * first);
}
