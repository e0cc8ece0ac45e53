#include "doctest.h"

#include "vox/backbone.h"

#include <cmath>

using namespace vox;

namespace {

TokenFrame random_frame(Rng & rng, const BackboneConfig & c) {
    TokenFrame f{uint16_t(rng.uniform_int(c.semantic_k)), {}};
    for (size_t d = 0; d < c.acoustic_dims; ++d) f.acoustic.push_back(uint8_t(rng.uniform_int(c.acoustic_levels)));
    return f;
}

TrainingSample random_sample(Rng & rng, const BackboneConfig & c, size_t a1, size_t t2, size_t a2) {
    TrainingSample s;
    for (size_t i = 0; i < a1; ++i) s.a1.push_back(random_frame(rng, c));
    for (size_t i = 0; i < t2; ++i) s.t2.push_back(int(rng.uniform_int(c.text_vocab)));
    for (size_t i = 0; i < a2; ++i) s.a2.push_back(random_frame(rng, c));
    s.vad.assign(a2, true);
    return s;
}

void set_param(Backbone & b, const std::string & name, const std::function<void(std::span<real>)> & f) {
    ParamSet st = b.state();
    Tensor * t = st.find(name);
    REQUIRE(t != nullptr);
    f(t->mutable_data());
}

}  // namespace

TEST_CASE("assemble: layout and mask") {
    auto c = BackboneConfig::toy();
    Rng rng(1);
    Backbone b(c, rng);
    auto seq = b.assemble(random_sample(rng, c, 5, 3, 4));
    CHECK(seq.length == 14);
    CHECK(seq.next_pos() == 5);
    CHECK(seq.repeat_pos() == 9);
    size_t nonzero = 0;
    for (size_t p = 0; p < seq.length; ++p) {
        if (seq.weights[p] > 0) {
            ++nonzero;
            CHECK(p >= seq.repeat_pos());
        }
    }
    CHECK(nonzero == 5);
    CHECK(seq.targets[13] == int(c.eoa()));
    CHECK(seq.targets[9] == seq.sample.a2[0].semantic);
    CHECK(b.embed(seq).shape() == Shape{14, 64});

    auto bad = random_sample(rng, c, 2, 1, 1);
    bad.a2[0].semantic = uint16_t(c.semantic_k + 1);
    CHECK_THROWS_AS(b.assemble(bad), std::out_of_range);
    bad = random_sample(rng, c, 2, 1, 1);
    bad.t2[0] = 300;
    CHECK_THROWS_AS(b.assemble(bad), std::out_of_range);
}

TEST_CASE("vad weights") {
    VadPolicy p;
    CHECK(vad_weights(std::vector<bool>(20, true), p) == std::vector<real>(20, 1));
    std::vector<bool> m(70, true);
    for (size_t i = 10; i < 60; ++i) m[i] = false;  // 4 s
    auto w = vad_weights(m, p);
    for (size_t i = 0; i < 70; ++i) CHECK(w[i] == (i >= 10 && i < 60 ? 0 : 1));
    std::vector<bool> s(50, true);
    for (size_t i = 5; i < 42; ++i) s[i] = false;  // 37 frames = 2.96 s
    CHECK(vad_weights(s, p)[5] == real(0.2));
    s[42] = false;  // 38 frames = 3.04 s
    CHECK(vad_weights(s, p)[5] == 0);
}

TEST_CASE("semantic loss: extremes, normalisation, zero weights") {
    Tensor lg({2, 5}, {50, 0, 0, 0, 0, 0, 0, 0, 50, 0});
    CHECK(semantic_loss(lg, {0, 3}, {1, 1}).item() < 1e-6);
    Tensor uni = Tensor::zeros({3, 8193});
    CHECK(semantic_loss(uni, {0, 8192, 17}, {1, 0.2, 1}).item() == doctest::Approx(std::log(8193.0)).epsilon(1e-5));
    CHECK(std::log(8193.0) == doctest::Approx(9.011).epsilon(1e-4));
    Rng rng(2);
    Tensor r({4, 7}, rng.normal_vec(28));
    std::vector<int> t{1, 2, 6, 0};
    CHECK(semantic_loss(r, t, {1, 0.2, 0, 1}).item() == doctest::Approx(semantic_loss(r, t, {2, 0.4, 0, 2}).item()));
    const size_t before = semantic_loss_zero_weight_count();
    CHECK(semantic_loss(r, t, {0, 0, 0, 0}).item() == 0);
    CHECK(semantic_loss_zero_weight_count() == before + 1);
}

TEST_CASE("frame embedding is the sum of per-codebook lookups") {
    auto c = BackboneConfig::toy();
    Rng rng(3);
    Backbone b(c, rng);
    ParamSet st = b.state();
    const Tensor & table = *st.find("embed.audio");
    std::vector<TokenFrame> frames;
    for (int i = 0; i < 6; ++i) frames.push_back(random_frame(rng, c));
    Tensor e = b.embed_frames(frames);
    for (size_t i = 0; i < frames.size(); ++i) {
        for (size_t d = 0; d < c.width; ++d) {
            double s = table[frames[i].semantic * c.width + d];
            for (size_t a = 0; a < c.acoustic_dims; ++a) {
                s += table[(c.semantic_k + a * c.acoustic_levels + frames[i].acoustic[a]) * c.width + d];
            }
            CHECK(e[i * c.width + d] == doctest::Approx(s).epsilon(1e-6));
        }
    }
}

TEST_CASE("loss masking: zero-weight positions contribute no gradient") {
    auto c = BackboneConfig::toy();
    Rng rng(4);
    Backbone b(c, rng);
    auto seq = b.assemble(random_sample(rng, c, 6, 4, 5));
    seq.weights[2] = 0;  // audio prompt position with a (bogus) target
    seq.targets[2] = 7;

    Tensor logits = b.logits(b.hidden(seq)).clone();
    logits.set_requires_grad(true);
    backward(semantic_loss(logits, seq.targets, seq.weights));
    for (size_t p = 0; p < seq.length; ++p) {
        if (seq.weights[p] != 0) continue;
        for (size_t v = 0; v < c.vocab_out(); ++v) CHECK(logits.grad()[p * c.vocab_out() + v] == 0);
    }

    auto grads = [&](const std::vector<int> & targets) {
        ParamSet ps = b.params();
        ps.zero_grad();
        backward(semantic_loss(b.logits(b.hidden(seq)), targets, seq.weights));
        std::vector<std::vector<real>> g;
        for (auto & [n, t] : ps.items) g.emplace_back(t.grad().begin(), t.grad().end());
        ps.zero_grad();
        return g;
    };
    auto t2 = seq.targets;
    for (size_t p = 0; p < seq.length; ++p)
        if (seq.weights[p] == 0) t2[p] = int(rng.uniform_int(c.vocab_out()));
    CHECK(grads(seq.targets) == grads(t2));
}

TEST_CASE("frozen text embeddings stay bit-identical through training") {
    auto c = BackboneConfig::toy();
    Rng rng(5);
    Backbone b(c, rng);
    const auto text0 = b.text_table().to_vector();
    const auto audio0 = b.state().find("embed.audio")->to_vector();
    Adam opt(b.params(), {.lr = real(1e-2)});
    for (int step = 0; step < 10; ++step) {
        auto seq = b.assemble(random_sample(rng, c, 4, 6, 5));
        backward(semantic_loss(b.logits(b.hidden(seq)), seq.targets, seq.weights));
        opt.step();
    }
    CHECK(b.text_table().to_vector() == text0);
    CHECK(b.state().find("embed.audio")->to_vector() != audio0);
    CHECK_FALSE(b.text_table().requires_grad());
}

TEST_CASE("causality: logits at p ignore later tokens") {
    auto c = BackboneConfig::toy();
    Rng rng(6);
    Backbone b(c, rng);
    NoGradGuard ng;
    auto s = random_sample(rng, c, 4, 3, 6);
    auto l0 = b.logits(b.hidden(b.assemble(s)));
    auto s2 = s;
    s2.a2[3] = random_frame(rng, c);
    s2.a2[5] = random_frame(rng, c);
    auto l1 = b.logits(b.hidden(b.assemble(s2)));
    const size_t changed = 4 + 1 + 3 + 1 + 3;
    const size_t v = c.vocab_out();
    for (size_t i = 0; i < changed * v; ++i) REQUIRE(l0[i] == l1[i]);
    bool later = false;
    for (size_t i = changed * v; i < l0.numel(); ++i) later |= l0[i] != l1[i];
    CHECK(later);
}

TEST_CASE("kv cache matches the full forward") {
    auto c = BackboneConfig::toy();
    Rng rng(7);
    Backbone b(c, rng);
    auto s = random_sample(rng, c, 5, 7, 6);
    NoGradGuard ng;
    Tensor full = b.hidden(b.assemble(s));
    auto sess = b.start_session(s.a1, s.t2);
    const size_t r = 5 + 1 + 7;
    for (size_t i = 0; i <= s.a2.size(); ++i) {
        for (size_t d = 0; d < c.width; ++d) CHECK(sess.last_hidden[d] == doctest::Approx(full[(r + i) * c.width + d]).epsilon(1e-4));
        if (i < s.a2.size()) b.push_frame(sess, s.a2[i]);
    }
}

TEST_CASE("sampling: argmax, top-k and temperature") {
    Rng rng(8);
    std::vector<real> lg{0.1f, 2.0f, 2.0f, -1.0f};
    CHECK(sample_logits(lg, {.temperature = 0}, rng) == 1);
    CHECK(sample_logits(lg, {.temperature = 1.0, .top_k = 1}, rng) == 1);
    std::vector<real> two{1.0f, 0.0f, -5.0f};
    size_t zero = 0;
    const size_t n = 20000;
    for (size_t i = 0; i < n; ++i) zero += sample_logits(two, {.temperature = 0.5, .top_k = 2}, rng) == 0;
    const double expect = std::exp(2.0) / (std::exp(2.0) + 1.0);
    CHECK(std::abs(double(zero) / n - expect) < 0.01);
}

TEST_CASE("generate: EOA model, loop contract, acoustic discretisation") {
    auto c = BackboneConfig::toy();
    Rng rng(9);
    Backbone b(c, rng);
    std::vector<TokenFrame> prompt;
    for (int i = 0; i < 40; ++i) prompt.push_back(random_frame(rng, c));
    auto text = byte_tokens("hello");
    const std::vector<real> constant{0.33f, -0.9f, 0.0f, 0.99f};
    AcousticHead stub = [&](std::span<const real>) { return constant; };

    set_param(b, "head.weight", [](std::span<real> w) { std::fill(w.begin(), w.end(), real(0)); });
    set_param(b, "head.bias", [&](std::span<real> w) {
        std::fill(w.begin(), w.end(), real(0));
        w[c.eoa()] = 100;
    });
    auto r = b.generate(prompt, text, {}, stub, rng);
    CHECK(r.frames.empty());
    CHECK(r.steps == 1);
    CHECK_FALSE(r.truncated);

    // EOA with modest probability: steps = frames + 1
    set_param(b, "head.bias", [&](std::span<real> w) { w[c.eoa()] = 3.5; });
    auto expected = fsq_indices_of(constant, c.acoustic_levels);
    for (int trial = 0; trial < 5; ++trial) {
        auto g = b.generate(prompt, text, {.temperature = 1.0, .top_k = 0}, stub, rng);
        CHECK(g.steps == g.frames.size() + 1);
        CHECK_FALSE(g.truncated);
        for (const auto & f : g.frames) {
            CHECK(f.semantic < c.semantic_k);
            for (size_t d = 0; d < c.acoustic_dims; ++d) CHECK(int(f.acoustic[d]) == expected[d]);
        }
    }

    set_param(b, "head.bias", [&](std::span<real> w) { w[c.eoa()] = -100; });
    auto t = b.generate(prompt, text, {.max_frames = 7}, stub, rng);
    CHECK(t.truncated);
    CHECK(t.frames.size() == 7);

    std::vector<TokenFrame> short_prompt(prompt.begin(), prompt.begin() + 13);
    auto w = b.generate(short_prompt, text, {.max_frames = 1}, stub, rng);
    CHECK_FALSE(w.warnings.empty());
}
