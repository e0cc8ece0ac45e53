#include "doctest.h"

#include "vox/dpo.h"
#include "vox/errors.h"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace vox;

namespace {

const double ln2 = std::log(2.0);

TokenFrame random_frame(Rng & rng, const BackboneConfig & c) {
    TokenFrame f{uint16_t(rng.uniform_int(c.semantic_k)), {}};
    for (size_t d = 0; d < c.acoustic_dims; ++d) f.acoustic.push_back(uint8_t(rng.uniform_int(c.acoustic_levels)));
    return f;
}

PreferencePair random_pair(Rng & rng, const BackboneConfig & c, size_t nw = 6, size_t nl = 5) {
    PreferencePair p;
    p.id = "p" + std::to_string(rng.uniform_int(1000));
    for (int i = 0; i < 13; ++i) p.prompt.push_back(random_frame(rng, c));
    p.text = byte_tokens("hi there");
    for (size_t i = 0; i < nw; ++i) p.winner.push_back(random_frame(rng, c));
    for (size_t i = 0; i < nl; ++i) p.loser.push_back(random_frame(rng, c));
    return p;
}

double sigmoid(double x) { return 1 / (1 + std::exp(-x)); }

}  // namespace

TEST_CASE("semantic dpo: sigmoid identities") {
    auto s = [](double v) { return Tensor::scalar(real(v)); };
    CHECK(semantic_dpo_loss(s(-3), s(-5), s(-3), s(-5), 0.1).item() == doctest::Approx(ln2).epsilon(1e-6));
    CHECK(semantic_dpo_loss(s(0), s(-500), s(-4), s(-4), 0.1).item() < 1e-6);
    // margin is beta * ((pw - pl) - (rw - rl))
    CHECK(semantic_dpo_margin(s(-1), s(-4), s(-2), s(-2.5), 0.1).item() == doctest::Approx(0.25).epsilon(1e-6));
    const double a = semantic_dpo_loss(s(-1), s(-4), s(-2), s(-2.5), 0.1).item();
    const double b = semantic_dpo_loss(s(-4), s(-1), s(-2.5), s(-2), 0.1).item();
    CHECK(std::exp(-a) + std::exp(-b) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("flow dpo loss: arithmetic and monotonicity") {
    auto s = [](double v) { return Tensor::scalar(real(v)); };
    CHECK(flow_dpo_loss(s(3.5), s(3.5), 0.5).item() == doctest::Approx(ln2).epsilon(1e-6));
    const double v = flow_dpo_loss(s(1), s(3), 0.5).item();
    CHECK(v == doctest::Approx(-std::log(sigmoid(1))).epsilon(1e-6));
    CHECK(v == doctest::Approx(0.3133).epsilon(1e-3));
    double prev = 1e9;
    for (double gap = -4; gap <= 4; gap += 0.5) {
        const double l = flow_dpo_loss(s(0), s(gap), 0.5).item();  // gap = delta_ref - delta_policy
        CHECK(l < prev);
        prev = l;
    }
}

TEST_CASE("flow dpo delta: sums per position against a naive loop") {
    Rng rng(1);
    FlowConfig fc;
    fc.width = 32;
    fc.time_embed_dim = 32;
    fc.acoustic_dims = 4;
    FlowHead head(fc, rng);
    NoGradGuard ng;
    const size_t nw = 10, nl = 7;
    NoisePlan plan = draw_noise_plan(nw, 4, rng);
    Tensor xw({nw, 4}, rng.uniform_vec(nw * 4, -1, 1)), hw({nw, 32}, rng.normal_vec(nw * 32));
    Tensor xl({nl, 4}, rng.uniform_vec(nl * 4, -1, 1)), hl({nl, 32}, rng.normal_vec(nl * 32));

    auto naive = [&](const Tensor & x0, const Tensor & h) {
        double s = 0;
        for (size_t i = 0; i < x0.dim(0); ++i) {
            const real t = plan.t[i];
            std::vector<real> xt(4), u(4);
            for (size_t d = 0; d < 4; ++d) {
                const double a = x0[i * 4 + d], n = plan.x1[i * 4 + d];
                xt[d] = real((1 - t) * a + t * n);
                u[d] = real(n - a);
            }
            Tensor v = head.forward(Tensor({1, 4}, xt), {t}, slice(h, 0, i, 1));
            for (size_t d = 0; d < 4; ++d) s += (v[d] - u[d]) * (v[d] - u[d]);
        }
        return s;
    };
    const double sw = naive(xw, hw), sl = naive(xl, hl);
    const double delta = flow_dpo_delta(head, xw, hw, xl, hl, plan).item();
    CHECK(delta == doctest::Approx(sw - sl).epsilon(1e-4));
    // no length normalisation
    CHECK(flow_error_sum(head, xw, hw, plan).item() == doctest::Approx(sw).epsilon(1e-4));
    CHECK(std::abs(flow_error_sum(head, xw, hw, plan).item() - sw / nw) > 0.1 * sw);

    CHECK(flow_dpo_delta(head, xw, hw, xw, hw, plan).item() == 0);

    NoisePlan short_plan = draw_noise_plan(nw - 1, 4, rng);
    CHECK_THROWS_AS(flow_dpo_delta(head, xw, hw, xl, hl, short_plan), std::invalid_argument);
}

TEST_CASE("flow dpo delta: perfect winner, zero-output loser") {
    Rng rng(2);
    FlowConfig fc;
    fc.width = 32;
    fc.time_embed_dim = 32;
    fc.acoustic_dims = 3;
    FlowHead head(fc, rng);
    for (auto & [name, t] : head.params().items)
        if (name.rfind("out.", 0) == 0) std::fill(t.mutable_data().begin(), t.mutable_data().end(), real(0));
    NoGradGuard ng;
    NoisePlan plan = draw_noise_plan(2, 3, rng);
    // winner data equal to the noise: u = 0 and the zero field is exact
    Tensor xw = plan.x1.clone();
    Tensor xl({2, 3}, {0.5f, -0.2f, 0.1f, 0.9f, 0.0f, -1.0f});
    Tensor h = Tensor::zeros({2, 32});
    double ul = 0;
    for (size_t i = 0; i < 6; ++i) ul += std::pow(double(plan.x1[i]) - xl[i], 2);
    const double d = flow_dpo_delta(head, xw, h, xl, h, plan).item();
    CHECK(d == doctest::Approx(-ul).epsilon(1e-5));
    CHECK(d < 0);
}

TEST_CASE("pair loss: policy equals reference, frozen reference, plan consistency") {
    auto c = BackboneConfig::toy();
    Rng rng(3);
    TtsModel policy(c, rng);
    TtsModel ref = frozen_clone(policy);
    CHECK(ref.state().values_equal(policy.state()));
    for (auto & [n, t] : ref.state().items) CHECK_FALSE(t.requires_grad());
    // an independent copy, not an alias
    auto pw = policy.params().items[0].second;
    CHECK(pw.data().data() != ref.params().items[0].second.data().data());

    auto pair = random_pair(rng, c);
    DPOConfig cfg;
    NoisePlan plan = draw_noise_plan(6, c.acoustic_dims, rng);
    auto t = pair_dpo_loss(policy, ref, pair, plan, cfg);
    CHECK(t.semantic.item() == doctest::Approx(ln2).epsilon(1e-6));
    CHECK(t.flow.item() == doctest::Approx(ln2).epsilon(1e-6));
    CHECK(t.total.item() == doctest::Approx(2 * ln2).epsilon(1e-6));

    auto again = pair_dpo_loss(policy, ref, pair, plan, cfg);
    CHECK(again.total.item() == t.total.item());

    // reference receives no gradient even when its tensors would accept one
    ParamSet rs = ref.params();
    rs.set_requires_grad(true);
    ParamSet ps = policy.params();
    ps.zero_grad();
    rs.zero_grad();
    policy.params().items[0].second.mutable_data()[0] += real(0.1);
    backward(pair_dpo_loss(policy, ref, pair, plan, cfg).total);
    double ref_grad = 0, pol_grad = 0;
    for (auto & [n, x] : rs.items)
        for (real g : x.grad()) ref_grad += std::abs(g);
    for (auto & [n, x] : ps.items)
        for (real g : x.grad()) pol_grad += std::abs(g);
    CHECK(ref_grad == 0);
    CHECK(pol_grad > 0);

    CHECK_THROWS_AS(pair_dpo_loss(policy, ref, pair, draw_noise_plan(5, c.acoustic_dims, rng), cfg), std::invalid_argument);
}

TEST_CASE("sequence log-prob sums over response positions") {
    auto c = BackboneConfig::toy();
    Rng rng(4);
    Backbone b(c, rng);
    auto pair = random_pair(rng, c, 10, 3);
    TrainingSample s{pair.prompt, pair.text, pair.winner, std::vector<bool>(10, true)};
    auto seq = b.assemble(s);
    NoGradGuard ng;
    Tensor lg = b.logits(b.hidden(seq));
    double oracle = 0;
    const size_t v = c.vocab_out();
    for (size_t p = seq.repeat_pos(); p < seq.length; ++p) {
        double mx = -1e30, z = 0;
        for (size_t k = 0; k < v; ++k) mx = std::max(mx, double(lg[p * v + k]));
        for (size_t k = 0; k < v; ++k) z += std::exp(lg[p * v + k] - mx);
        oracle += lg[p * v + size_t(seq.targets[p])] - mx - std::log(z);
    }
    CHECK(sequence_logprob(lg, seq).item() == doctest::Approx(oracle).epsilon(1e-5));
    CHECK(sequence_logprob(lg, seq, true).item() == doctest::Approx(oracle / 11).epsilon(1e-5));
    CHECK_FALSE(DPOConfig{}.average_logprobs);
}

TEST_CASE("dpo trainer: margins grow, reference untouched") {
    auto c = BackboneConfig::toy();
    Rng rng(5);
    TtsModel policy(c, rng);
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 4; ++i) pairs.push_back(random_pair(rng, c, 5 + i % 3, 4 + i % 2));
    DPOConfig cfg;
    cfg.lr = 1e-3;
    DpoTrainer tr(policy, cfg, 11);
    const auto ref0 = frozen_clone(tr.reference());
    auto [s0, f0] = tr.mean_margins(pairs, 99);
    CHECK(s0 == doctest::Approx(0).epsilon(1e-9));
    CHECK(f0 == doctest::Approx(0).epsilon(1e-9));
    auto first = tr.step(pairs);
    CHECK(first.semantic + first.flow == doctest::Approx(2 * ln2).epsilon(1e-6));
    for (int i = 1; i < 50; ++i) tr.step(pairs);
    auto [s1, f1] = tr.mean_margins(pairs, 99);
    MESSAGE("margins after 50 steps: semantic " << s1 << ", flow " << f1);
    CHECK(s1 > s0);
    CHECK(f1 > f0);
    CHECK(tr.reference().state().values_equal(ref0.state()));
    CHECK_FALSE(policy.state().values_equal(ref0.state()));
}

TEST_CASE("dpo trainer: pretraining mixture interleaves batches") {
    auto c = BackboneConfig::toy();
    Rng rng(6);
    TtsModel policy(c, rng);
    std::vector<PreferencePair> pairs;
    for (int i = 0; i < 4; ++i) pairs.push_back(random_pair(rng, c));
    std::vector<AssembledSequence> pre;
    for (auto & p : pairs) pre.push_back(policy.backbone.assemble({p.prompt, p.text, p.winner, std::vector<bool>(p.winner.size(), true)}));
    DPOConfig cfg;
    cfg.pretrain_mixture = true;
    DpoTrainer tr(policy, cfg, 1);
    auto reps = tr.train(pairs, 2, pre);
    REQUIRE(reps.size() == 4);
    CHECK_FALSE(reps[0].pretrain_batch);
    CHECK(reps[1].pretrain_batch);
    CHECK(reps[1].pretrain > 0);
    CHECK_FALSE(reps[2].pretrain_batch);
    CHECK(reps[3].pretrain_batch);
}

TEST_CASE("build pairs: ranking, gate, scorer failures") {
    PairPrompt prompt{"a", {}, byte_tokens("hello world")};
    std::vector<double> quality{0.9, 0.1};
    CandidateGenerator gen = [&](const PairPrompt &, size_t k, Rng &) {
        Candidate c;
        c.frames.assign(k + 1, TokenFrame{uint16_t(k), {}});
        c.id = "s" + std::to_string(k + 1);
        return c;
    };
    Scorer q{"q", true, 1.0, std::nullopt, [&](const Candidate & c) { return quality[c.frames.size() - 1]; }};
    Rng rng(7);
    auto r = build_pairs({prompt}, gen, 2, {q}, rng);
    REQUIRE(r.pairs.size() == 1);
    CHECK(r.pairs[0].winner.size() == 1);
    CHECK(r.pairs[0].loser.size() == 2);

    q.gate = 0.95;
    CHECK(build_pairs({prompt}, gen, 2, {q}, rng).pairs.empty());

    quality = {0.9, 0.1, 0.5};
    Scorer flaky{"flaky", true, 1.0, std::nullopt, [](const Candidate & c) {
                     if (c.id == "s1") throw std::runtime_error("scorer crashed");
                     return 0.0;
                 }};
    q.gate.reset();
    auto f = build_pairs({prompt}, gen, 3, {q, flaky}, rng);
    REQUIRE(f.pairs.size() == 1);
    CHECK(f.pairs[0].winner.size() == 3);  // s1 excluded, s3 best of the rest
    CHECK(f.pairs[0].loser.size() == 2);
    REQUIRE(f.log.size() == 1);
    CHECK(f.log[0].find("s1") != std::string::npos);

    // lower-is-better flips the order
    Scorer low{"low", false, 1.0, std::nullopt, [&](const Candidate & c) { return quality[c.frames.size() - 1]; }};
    auto l = build_pairs({prompt}, gen, 2, {low}, rng);
    CHECK(l.pairs[0].winner.size() == 2);
    CHECK_THROWS_AS(build_pairs({prompt}, gen, 1, {q}, rng), ConfigError);
}

TEST_CASE("combined scores: weighted rank normalisation") {
    std::vector<Scorer> sc{{"a", true, 2.0, std::nullopt, {}}, {"b", false, 1.0, std::nullopt, {}}};
    std::vector<std::vector<double>> raw{{3, 5}, {1, 1}, {2, 5}, {2, 0}};
    auto c = combined_scores(raw, sc);
    // a ranks: 3 -> 1, 1 -> 0, 2 -> 0.5 (tie) ; b (lower better): 5 -> 1/6 (tie), 1 -> 2/3, 0 -> 1
    CHECK(c[0] == doctest::Approx(2 * 1.0 + 1.0 / 6));
    CHECK(c[1] == doctest::Approx(0 + 2.0 / 3));
    CHECK(c[2] == doctest::Approx(2 * 0.5 + 1.0 / 6));
    CHECK(c[3] == doctest::Approx(2 * 0.5 + 1.0));
}

TEST_CASE("built-in scorers") {
    const size_t n = 4000;
    std::vector<real> flat(n), taper(n);
    for (size_t i = 0; i < n; ++i) {
        const double s = std::sin(2 * M_PI * 8 * double(i) / 1000);
        flat[i] = real(0.5 * s);
        // linear gain from 1 in the first quarter down to 10 dB lower in the last
        double g = 1;
        if (i >= n / 4) g = std::pow(10.0, -0.5 * std::min(1.0, double(i - n / 4) / double(n / 2)));
        taper[i] = real(0.5 * g * s);
    }
    CHECK(rms_taper_db(flat) == doctest::Approx(0).epsilon(1e-3));
    CHECK(rms_taper_db(taper) == doctest::Approx(-10).epsilon(0.02));
    auto loud = loudness_consistency_scorer();
    Candidate a, b;
    a.wave = flat;
    b.wave = taper;
    CHECK(loud.score(a) > loud.score(b));
    Candidate silent;
    CHECK_THROWS(loud.score(silent));

    auto dur = duration_scorer(1.0);
    Candidate d;
    d.text_length = 10;
    d.frames.resize(10);
    CHECK(dur.score(d) == 0);
    d.frames.resize(20);
    CHECK(dur.score(d) == doctest::Approx(-std::log(2.0)));

    auto rep = repetition_scorer();
    Candidate r;
    for (int s : {1, 1, 1, 2, 3}) r.frames.push_back({uint16_t(s), {}});
    CHECK(rep.score(r) == doctest::Approx(0.5));
    CHECK_FALSE(rep.higher_is_better);

    auto path = std::filesystem::temp_directory_path() / "vox_scores.txt";
    {
        std::ofstream out(path);
        out << "x/0 0.25\nx/1 0.75\n";
    }
    auto ext = external_scorer("utmos", read_score_file(path), true);
    Candidate e;
    e.id = "x/1";
    CHECK(ext.score(e) == 0.75);
    e.id = "x/9";
    CHECK_THROWS(ext.score(e));
}

TEST_CASE("pair files: JSON lines round trip") {
    auto c = BackboneConfig::toy();
    Rng rng(8);
    std::vector<PreferencePair> pairs{random_pair(rng, c), random_pair(rng, c, 3, 9)};
    pairs[1].id = "prompt/7";
    auto dir = std::filesystem::temp_directory_path() / "vox_pairs";
    std::filesystem::remove_all(dir);
    save_pairs(pairs, dir / "pairs.jsonl", c.token_layout());
    auto back = load_pairs(dir / "pairs.jsonl", c.token_layout());
    REQUIRE(back.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        CHECK(back[i].id == pairs[i].id);
        CHECK(back[i].text == pairs[i].text);
        CHECK(back[i].prompt == pairs[i].prompt);
        CHECK(back[i].winner == pairs[i].winner);
        CHECK(back[i].loser == pairs[i].loser);
    }
    CHECK_THROWS_AS(load_pairs(dir / "missing.jsonl", c.token_layout()), IoError);
}
