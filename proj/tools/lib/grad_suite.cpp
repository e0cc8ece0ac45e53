// Model-loss gradient families, compiled against the double build.
#include "checks.h"
#include "gradcheck.h"

#include "vox/codec.h"
#include "vox/dpo.h"

#include <cmath>
#include <map>
#include <stdexcept>

using namespace vox;

namespace voxcheck {

namespace {

std::vector<Tensor> leaves_of(const ParamSet & ps) {
    std::vector<Tensor> out;
    for (const auto & [n, t] : ps.items) out.push_back(t);
    return out;
}

CodecConfig tiny_codec() {
    CodecConfig c = CodecConfig::toy();
    c.patch_size = 8;
    c.embed_dim = 16;
    c.semantic_dim = 4;
    c.acoustic_dim = 3;
    c.frame_ratio = 2;
    c.blocks = {{1, 4, 4, 2}};
    c.codebook_size = 8;
    c.asr_dim = 4;
    c.disc.fft_sizes = {32, 16};
    c.disc.channels = 4;
    c.disc.layers = 2;
    // keep the bottleneck continuous: no VQ snapping, dither instead of rounding
    c.vq.apply_prob = 0;
    c.fsq.p_quantize = 0;
    c.fsq.p_dither = 1;
    c.fsq.p_passthrough = 0;
    return c;
}

BackboneConfig tiny_backbone() {
    BackboneConfig c = BackboneConfig::toy();
    c.width = 16;
    c.heads = 2;
    c.layers = 1;
    c.semantic_k = 12;
    c.acoustic_dims = 3;
    c.acoustic_levels = 5;
    c.max_positions = 128;
    return c;
}

FlowConfig tiny_flow() {
    FlowConfig f;
    f.width = 16;
    f.heads = 2;
    f.layers = 3;
    f.acoustic_dims = 3;
    f.time_embed_dim = 8;
    return f;
}

TokenFrame random_frame(Rng & rng, const BackboneConfig & c) {
    TokenFrame f{uint16_t(rng.uniform_int(c.semantic_k)), {}};
    for (size_t d = 0; d < c.acoustic_dims; ++d) f.acoustic.push_back(uint8_t(rng.uniform_int(c.acoustic_levels)));
    return f;
}

std::vector<TokenFrame> frames(Rng & rng, const BackboneConfig & c, size_t n) {
    std::vector<TokenFrame> out;
    for (size_t i = 0; i < n; ++i) out.push_back(random_frame(rng, c));
    return out;
}

void jitter(const ParamSet & ps, Rng & rng, double sd) {
    for (auto & [n, t] : ps.items) {
        auto d = const_cast<Tensor &>(t).mutable_data();
        for (auto & v : d) v += real(sd * rng.normal());
    }
}

using Family = std::function<gradcheck::Report(int seed)>;

gradcheck::Report cosine_distillation(int seed) {
    Rng rng(100 + seed);
    const size_t f = 7, l = 4, dc = 5, d = 6;
    Tensor z({f, dc}, rng.normal_vec(f * dc));
    std::vector<real> a = rng.uniform_vec(l * f, 0.05, 1.0);
    for (size_t i = 0; i < l; ++i) {
        double s = 0;
        for (size_t j = 0; j < f; ++j) s += a[i * f + j];
        for (size_t j = 0; j < f; ++j) a[i * f + j] = real(a[i * f + j] / s);
    }
    Tensor align({l, f}, a), h({l, d}, rng.normal_vec(l * d));
    Linear proj(dc, d, rng);
    return gradcheck::check({z, proj.weight, proj.bias}, [&] { return asr_distill_loss(z, align, h, proj); });
}

// activations on both sides, |real - fake| kept away from the kink
gradcheck::Report feature_matching_direct(int seed) {
    Rng rng(200 + seed);
    std::vector<std::vector<Tensor>> real_acts(2), fake_acts(2);
    std::vector<Tensor> leaves;
    for (size_t r = 0; r < 2; ++r)
        for (size_t k = 0; k < 3; ++k) {
            const size_t n = 4 + k;
            Tensor fa({n, 3}, rng.normal_vec(n * 3));
            std::vector<real> ra = fa.to_vector();
            for (auto & v : ra) v += real((rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0));
            real_acts[r].push_back(Tensor({n, 3}, ra));
            fake_acts[r].push_back(fa);
            leaves.push_back(fa);
        }
    const bool mean_mode = seed % 2 == 0;
    return gradcheck::check(leaves, [&] { return feature_matching_loss(real_acts, fake_acts, mean_mode); });
}

gradcheck::Report feature_matching_discriminator(int seed) {
    Rng rng(250 + seed);
    DiscriminatorConfig dc;
    dc.fft_sizes = {32, 16};
    dc.channels = 4;
    dc.layers = 2;
    MultiResolutionDiscriminator disc(dc, rng);
    Tensor x({2, 64}, rng.normal_vec(128, 0.5)), x_hat({2, 64}, rng.normal_vec(128, 0.5));
    std::vector<std::vector<Tensor>> ra;
    {
        NoGradGuard ng;
        ra = disc(x);
    }
    auto pl = leaves_of(disc.params());
    pl.push_back(x_hat);
    return gradcheck::check(pl, [&] { return feature_matching_loss(ra, disc(x_hat)); }, 1e-6, 1e-8, 6, seed, true);
}

gradcheck::Report codec_composite(int seed) {
    Rng rng(300 + seed);
    CodecConfig cfg = tiny_codec();
    Codec codec(cfg, rng);
    MultiResolutionDiscriminator disc(cfg.disc, rng);
    const size_t f = 4, s = f * cfg.samples_per_frame();
    CodecBatch batch;
    std::vector<real> wave(2 * s);
    for (size_t i = 0; i < wave.size(); ++i) wave[i] = real(0.5 * std::sin(0.3 * double(i) + seed) + 0.1 * rng.normal());
    batch.waves = Tensor({2, s}, wave);
    for (int b = 0; b < 2; ++b) {
        std::vector<real> a(3 * f, real(1.0 / f));
        batch.asr.push_back({Tensor({3, f}, a), Tensor({3, cfg.asr_dim}, rng.normal_vec(3 * cfg.asr_dim))});
    }
    auto loss = [&] {
        Rng r(seed * 7 + 1);  // same dither draw on every evaluation
        return codec_objective(codec, disc, batch, 500.0, r, true).total;
    };
    return gradcheck::check(leaves_of(codec.params()), loss, 1e-6, 1e-8, 3, seed, true);
}

gradcheck::Report flow_matching(int seed) {
    Rng rng(400 + seed);
    FlowHead head(tiny_flow(), rng);
    const size_t b = 5;
    Tensor x0({b, 3}, rng.uniform_vec(b * 3, -1, 1)), h({b, 16}, rng.normal_vec(b * 16));
    FlowDraw draw = draw_flow_noise(b, 3, 0.3, rng);
    auto leaves = leaves_of(head.params());
    leaves.push_back(h);
    return gradcheck::check(leaves, [&] { return fm_loss(head, x0, h, draw); }, 1e-5, 1e-8, 4, seed);
}

gradcheck::Report semantic_ce(int seed) {
    Rng rng(500 + seed);
    Tensor logits({6, 9}, rng.normal_vec(54));
    std::vector<int> t{0, 3, 8, 2, 2, 5};
    std::vector<real> wts{0, 1, 0.2f, 1, 0, 0.2f};
    return gradcheck::check({logits}, [&] { return semantic_loss(logits, t, wts); });
}

gradcheck::Report tts_joint(int seed) {
    Rng rng(550 + seed);
    auto bc = tiny_backbone();
    TtsModel model(bc, rng);
    TrainingSample s{frames(rng, bc, 4), byte_tokens("ab"), frames(rng, bc, 3), {true, false, true}};
    auto seq = model.backbone.assemble(s);
    auto loss = [&] {
        Rng r(seed + 11);
        return tts_loss(model, seq, r).total;
    };
    return gradcheck::check(leaves_of(model.params()), loss, 1e-5, 1e-8, 3, seed);
}

struct DpoFixture {
    BackboneConfig bc = tiny_backbone();
    Rng rng;
    TtsModel policy, ref;
    PreferencePair pair;

    explicit DpoFixture(int seed) : rng(600 + seed), policy(bc, rng) {
        ref = frozen_clone(policy);
        jitter(policy.params(), rng, 0.05);
        pair = {"g", frames(rng, bc, 4), byte_tokens("hey"), frames(rng, bc, 4), frames(rng, bc, 3)};
    }
};

gradcheck::Report semantic_dpo(int seed) {
    DpoFixture fx(seed);
    auto & bc = fx.bc;
    auto assemble = [&](const std::vector<TokenFrame> & a2) {
        return fx.policy.backbone.assemble({fx.pair.prompt, fx.pair.text, a2, std::vector<bool>(a2.size(), true)});
    };
    auto sw = assemble(fx.pair.winner), sl = assemble(fx.pair.loser);
    Tensor lw({sw.length, bc.vocab_out()}, fx.rng.normal_vec(sw.length * bc.vocab_out()));
    Tensor ll({sl.length, bc.vocab_out()}, fx.rng.normal_vec(sl.length * bc.vocab_out()));
    Tensor rw = Tensor::scalar(real(-9.5)), rl = Tensor::scalar(real(-7.25));
    const bool avg = seed % 2;
    return gradcheck::check({lw, ll}, [&] {
               return semantic_dpo_loss(sequence_logprob(lw, sw, avg), sequence_logprob(ll, sl, avg), rw, rl, 0.1);
           });
}

gradcheck::Report flow_dpo(int seed) {
    DpoFixture fx(seed);
    auto & bc = fx.bc;
    FlowHead head(tiny_flow(), fx.rng);
    NoisePlan plan = draw_noise_plan(4, 3, fx.rng);
    Tensor xw = acoustic_targets(fx.pair.winner, bc.acoustic_levels), xl = acoustic_targets(fx.pair.loser, bc.acoustic_levels);
    Tensor hw({4, 16}, fx.rng.normal_vec(64)), hl({3, 16}, fx.rng.normal_vec(48));
    Tensor dref = Tensor::scalar(real(fx.rng.normal()));
    auto leaves = leaves_of(head.params());
    leaves.push_back(hw);
    leaves.push_back(hl);
    return gradcheck::check(leaves, [&] { return flow_dpo_loss(flow_dpo_delta(head, xw, hw, xl, hl, plan), dref, 0.5); },
                            1e-5, 1e-8, 4, seed);
}

// both terms end to end through the policy
gradcheck::Report pair_dpo(int seed) {
    DpoFixture fx(seed);
    NoisePlan plan = draw_noise_plan(4, fx.bc.acoustic_dims, fx.rng);
    DPOConfig cfg;
    return gradcheck::check(leaves_of(fx.policy.params()),
                            [&] { return pair_dpo_loss(fx.policy, fx.ref, fx.pair, plan, cfg).total; }, 1e-5, 1e-8, 3, seed);
}

const std::map<std::string, Family> & registry() {
    static const std::map<std::string, Family> r{
        {"cosine_distillation", cosine_distillation},
        {"feature_matching", feature_matching_direct},
        {"feature_matching_discriminator", feature_matching_discriminator},
        {"codec_composite", codec_composite},
        {"flow_matching", flow_matching},
        {"semantic_ce", semantic_ce},
        {"tts_joint", tts_joint},
        {"semantic_dpo", semantic_dpo},
        {"flow_dpo", flow_dpo},
        {"pair_dpo", pair_dpo},
    };
    return r;
}

}  // namespace

const std::vector<std::string> & gradient_families() {
    static const std::vector<std::string> names{
        "cosine_distillation", "feature_matching", "feature_matching_discriminator", "codec_composite", "flow_matching",
        "semantic_ce",         "tts_joint",        "semantic_dpo",                   "flow_dpo",        "pair_dpo"};
    return names;
}

GradFamily gradient_family(const std::string & name, int seeds) {
    auto it = registry().find(name);
    if (it == registry().end()) throw std::invalid_argument("unknown gradient family: " + name);
    GradFamily g{name, 0, seeds};
    for (int s = 0; s < seeds; ++s) {
        auto r = it->second(s);
        g.worst_rel = std::max(g.worst_rel, r.max_rel);
        g.checked += r.checked;
        g.kinks += r.kinks;
    }
    return g;
}

}  // namespace voxcheck
