// Per-op gradient checks against central finite differences (double build).
#include "doctest.h"

#include "gradcheck.h"
#include "vox/nn.h"
#include "vox/ops.h"

#include <functional>
#include <string>

using namespace vox;

namespace {

struct OpCase {
    std::string name;
    // returns leaves and a loss closure over them
    std::function<std::pair<std::vector<Tensor>, std::function<Tensor()>>(Rng &)> build;
};

Tensor randn(Rng & rng, Shape s, double sd = 1.0) { return Tensor(s, rng.normal_vec(shape_numel(s), sd)); }

// values bounded away from zero so kinks stay outside the FD stencil
Tensor rand_away(Rng & rng, Shape s) {
    std::vector<real> v(shape_numel(s));
    for (auto & x : v) x = real((rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 2.0));
    return Tensor(s, v);
}

Tensor rand_pos(Rng & rng, Shape s) { return Tensor(s, rng.uniform_vec(shape_numel(s), 0.5, 2.0)); }

// projects an arbitrary output onto a fixed random direction
std::function<Tensor(const Tensor &)> projector(Rng & rng) {
    auto r = std::make_shared<Rng>(rng.split("proj"));
    auto cache = std::make_shared<Tensor>();
    return [r, cache](const Tensor & y) {
        if (!cache->defined() || cache->shape() != y.shape()) *cache = Tensor(y.shape(), r->normal_vec(y.numel()));
        return sum(mul(y, *cache));
    };
}

template <class F>
OpCase unary_case(std::string name, F f, bool away = false, bool positive = false) {
    return {name, [f, away, positive](Rng & rng) {
                Tensor x = positive ? rand_pos(rng, {3, 4}) : away ? rand_away(rng, {3, 4}) : randn(rng, {3, 4});
                auto proj = projector(rng);
                return std::make_pair(std::vector<Tensor>{x}, std::function<Tensor()>([=] { return proj(f(x)); }));
            }};
}

std::vector<OpCase> registry() {
    std::vector<OpCase> cases;
    auto binary = [&](std::string name, auto f, bool positive_b = false) {
        cases.push_back({name, [f, positive_b](Rng & rng) {
                             Tensor a = randn(rng, {2, 5});
                             Tensor b = positive_b ? rand_pos(rng, {2, 5}) : randn(rng, {2, 5});
                             auto proj = projector(rng);
                             return std::make_pair(std::vector<Tensor>{a, b},
                                                   std::function<Tensor()>([=] { return proj(f(a, b)); }));
                         }});
    };
    binary("add", [](auto & a, auto & b) { return add(a, b); });
    binary("sub", [](auto & a, auto & b) { return sub(a, b); });
    binary("mul", [](auto & a, auto & b) { return mul(a, b); });
    binary("div", [](auto & a, auto & b) { return div(a, b); }, true);
    binary("cosine_rows", [](auto & a, auto & b) { return cosine_rows(a, b); });

    cases.push_back(unary_case("neg", [](const Tensor & x) { return neg(x); }));
    cases.push_back(unary_case("scale", [](const Tensor & x) { return scale(x, real(-2.5)); }));
    cases.push_back(unary_case("add_scalar", [](const Tensor & x) { return add_scalar(x, real(3)); }));
    cases.push_back(unary_case("tanh", [](const Tensor & x) { return tanh(x); }));
    cases.push_back(unary_case("relu", [](const Tensor & x) { return relu(x); }, true));
    cases.push_back(unary_case("leaky_relu", [](const Tensor & x) { return leaky_relu(x, real(0.2)); }, true));
    cases.push_back(unary_case("silu", [](const Tensor & x) { return silu(x); }));
    cases.push_back(unary_case("sigmoid", [](const Tensor & x) { return sigmoid(x); }));
    cases.push_back(unary_case("softplus", [](const Tensor & x) { return softplus(x); }));
    cases.push_back(unary_case("log_sigmoid", [](const Tensor & x) { return log_sigmoid(x); }));
    cases.push_back(unary_case("exp", [](const Tensor & x) { return exp(x); }));
    cases.push_back(unary_case("log", [](const Tensor & x) { return log(x); }, false, true));
    cases.push_back(unary_case("sqrt", [](const Tensor & x) { return sqrt(x); }, false, true));
    cases.push_back(unary_case("abs", [](const Tensor & x) { return abs(x); }, true));
    cases.push_back(unary_case("square", [](const Tensor & x) { return square(x); }));
    cases.push_back(unary_case("sum", [](const Tensor & x) { return sum(x); }));
    cases.push_back(unary_case("mean", [](const Tensor & x) { return mean(x); }));
    cases.push_back(unary_case("sum_last", [](const Tensor & x) { return sum_last(x); }));
    cases.push_back(unary_case("mean_last", [](const Tensor & x) { return mean_last(x); }));
    cases.push_back(unary_case("softmax_last", [](const Tensor & x) { return softmax_last(x); }));
    cases.push_back(unary_case("log_softmax_last", [](const Tensor & x) { return log_softmax_last(x); }));
    cases.push_back(unary_case("layer_norm_last", [](const Tensor & x) { return layer_norm_last(x, real(1e-5)); }));
    cases.push_back(unary_case("rms_norm_last", [](const Tensor & x) { return rms_norm_last(x, real(1e-6)); }));
    cases.push_back(unary_case("transpose", [](const Tensor & x) { return transpose(x); }));
    cases.push_back(unary_case("reshape", [](const Tensor & x) { return reshape(x, {4, 3}); }));
    cases.push_back(unary_case("slice", [](const Tensor & x) { return slice(x, 1, 1, 2); }));
    cases.push_back(unary_case("concat", [](const Tensor & x) { return concat({x, square(x)}, 0); }));
    cases.push_back(unary_case("gather_rows", [](const Tensor & x) { return gather_rows(x, {2, 0, 2, 1}); }));
    cases.push_back(unary_case("pick", [](const Tensor & x) { return pick(x, {3, 0, 1}); }));

    cases.push_back({"add_bias/mul_bias", [](Rng & rng) {
                         Tensor a = randn(rng, {2, 3, 4}), b = randn(rng, {4}), c = randn(rng, {3, 4});
                         auto proj = projector(rng);
                         return std::make_pair(std::vector<Tensor>{a, b, c}, std::function<Tensor()>([=] {
                                                   return proj(mul_bias(add_bias(a, b), c));
                                               }));
                     }});
    cases.push_back({"matmul", [](Rng & rng) {
                         Tensor a = randn(rng, {2, 3, 4}), w = randn(rng, {4, 5});
                         auto proj = projector(rng);
                         return std::make_pair(std::vector<Tensor>{a, w},
                                               std::function<Tensor()>([=] { return proj(matmul(a, w)); }));
                     }});
    for (int variant = 0; variant < 3; ++variant) {
        cases.push_back({"attention#" + std::to_string(variant), [variant](Rng & rng) {
                             Tensor q = randn(rng, {2, 5, 4}), k = randn(rng, {2, 5, 4}), v = randn(rng, {2, 5, 4});
                             AttentionSpec spec;
                             spec.heads = 2;
                             spec.causal = variant != 2;
                             spec.window = variant == 1 ? 2 : 0;
                             if (variant == 1) spec.alibi = alibi_slopes(2);
                             auto proj = projector(rng);
                             return std::make_pair(std::vector<Tensor>{q, k, v}, std::function<Tensor()>([=] {
                                                       return proj(attention(q, k, v, spec));
                                                   }));
                         }});
    }
    cases.push_back({"conv1d", [](Rng & rng) {
                         Tensor x = randn(rng, {2, 7, 3}), w = randn(rng, {4, 3, 3}), b = randn(rng, {4});
                         auto proj = projector(rng);
                         return std::make_pair(std::vector<Tensor>{x, w, b}, std::function<Tensor()>([=] {
                                                   return proj(conv1d(x, w, b, 2, 2, 1));
                                               }));
                     }});
    cases.push_back({"conv_transpose1d", [](Rng & rng) {
                         Tensor x = randn(rng, {2, 4, 3}), w = randn(rng, {3, 4, 2}), b = randn(rng, {2});
                         auto proj = projector(rng);
                         return std::make_pair(std::vector<Tensor>{x, w, b}, std::function<Tensor()>([=] {
                                                   return proj(conv_transpose1d(x, w, b, 2, 2));
                                               }));
                     }});
    for (size_t fft : {16u, 15u}) {
        cases.push_back({"stft_mag/" + std::to_string(fft), [fft](Rng & rng) {
                             Tensor x = randn(rng, {40});
                             auto proj = projector(rng);
                             return std::make_pair(std::vector<Tensor>{x}, std::function<Tensor()>([=] {
                                                       return proj(stft_mag(x, fft, 4));
                                                   }));
                         }});
    }
    return cases;
}

}  // namespace

TEST_CASE("every registered op matches central finite differences over 20 seeds") {
    for (const auto & c : registry()) {
        double worst = 0;
        for (uint64_t seed = 0; seed < 20; ++seed) {
            Rng rng(1000 + seed);
            auto [leaves, fn] = c.build(rng);
            auto rep = gradcheck::check(leaves, fn);
            worst = std::max(worst, rep.max_rel);
        }
        INFO("op " << c.name << " worst relative error " << worst);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("straight-through: input gradient equals the numeric gradient at the quantized output") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        Tensor x = randn(rng, {6});
        std::vector<real> qv(6);
        for (size_t i = 0; i < 6; ++i) qv[i] = std::round(x[i] * 4) / 4;
        Tensor q({6}, qv);
        Tensor w = randn(rng, {6});
        x.set_requires_grad(true);
        backward(sum(square(mul(straight_through(x, q), w))));
        // d/dq sum((q*w)^2), evaluated numerically at q
        Tensor qq = q.clone();
        auto rep = gradcheck::check({qq}, [&] { return sum(square(mul(qq, w))); });
        CHECK(rep.max_rel < 1e-4);
        for (size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(qq.grad()[i]).epsilon(1e-9));
    }
}

TEST_CASE("gradcheck: kink stencils are skipped, wrong gradients are still caught") {
    // |x| evaluated right at its kink: one-sided slopes -1 and +1
    Tensor x({3}, {real(0), real(0.5), real(-0.7)});
    auto r = gradcheck::check({x}, [&] { return sum(abs(x)); }, 1e-6, 1e-8, 0, 0, true);
    CHECK(r.kinks == 1);
    CHECK(r.checked == 2);
    CHECK(r.max_rel < 1e-8);

    // forward is 2x, backward passes 1: smooth, so no skip can hide it
    Tensor y({4}, {real(0.1), real(-0.3), real(0.8), real(1.5)});
    auto w = gradcheck::check({y}, [&] { return sum(straight_through(y, detach(scale(y, 2)))); }, 1e-6, 1e-8, 0, 0, true);
    CHECK(w.kinks == 0);
    CHECK(w.max_rel > 0.4);
}
