#include "vox/codec.h"

#include "vox/signal.h"

#include <cmath>
#include <stdexcept>

VOX_BEGIN

Tensor combine_codec_loss(const CodecLossTerms & t, const LossWeights & w, double step) {
    const real g = real(w.gamma_at(step));
    Tensor total = scale(t.feature, real(w.alpha));
    total = add(total, scale(t.asr, real(w.beta)));
    total = add(total, scale(add(t.l1, t.stft), g));
    return add(total, scale(t.commit, real(w.delta)));
}

CodecLossTerms codec_objective(Codec & codec, const MultiResolutionDiscriminator & disc, const CodecBatch & batch,
                               double step, Rng & rng, bool training, Tensor * reconstruction) {
    const auto & cfg = codec.config();
    const Tensor & x = batch.waves;
    if (x.ndim() != 2 || x.dim(1) == 0 || x.dim(1) % cfg.samples_per_frame()) {
        throw std::invalid_argument("codec_objective: waves must be [B, S] with S a multiple of " +
                                    std::to_string(cfg.samples_per_frame()));
    }
    if (!batch.asr.empty() && batch.asr.size() != x.dim(0)) {
        throw std::invalid_argument("codec_objective: need one ASR target per batch item");
    }
    const size_t bsz = x.dim(0);
    Tensor latent = codec.encode_latent(patchify(x, cfg.patch_size));
    const size_t f = latent.dim(1);
    QuantizedLatent q = codec.quantize(latent, training, &rng);
    Tensor x_hat = codec.decode_latent(q.decoder_input);

    CodecLossTerms t;
    t.l1 = mean(abs(sub(x_hat, x)));
    t.stft = multires_stft_loss(x, x_hat, cfg.loss_fft_sizes());
    std::vector<std::vector<Tensor>> real_acts;
    {
        NoGradGuard ng;
        real_acts = disc(x);
    }
    t.feature = feature_matching_loss(real_acts, disc(x_hat), disc.cfg.feature_mean);
    t.asr = Tensor::scalar(0);
    if (!batch.asr.empty()) {
        for (size_t b = 0; b < bsz; ++b) {
            Tensor z = reshape(slice(q.semantic, 0, b, 1), {f, cfg.semantic_dim});
            t.asr = add(t.asr, asr_distill_loss(z, batch.asr[b].alignment, batch.asr[b].hidden, codec.asr_projector()));
        }
        t.asr = scale(t.asr, real(1) / real(bsz));
    }
    t.commit = q.commit;
    t.gamma_weight = cfg.weights.gamma_at(step);
    t.total = combine_codec_loss(t, cfg.weights, step);

    std::vector<real> sem;
    auto ld = latent.data();
    const size_t lat = cfg.latent_dim();
    for (size_t r = 0; r < bsz * f; ++r) {
        sem.insert(sem.end(), ld.begin() + long(r * lat), ld.begin() + long(r * lat + cfg.semantic_dim));
        t.semantic_indices.push_back(q.semantic_indices[r / f][r % f]);
    }
    t.semantic_latent = Tensor({bsz * f, cfg.semantic_dim}, sem);
    if (reconstruction) *reconstruction = x_hat;
    return t;
}

CodecTrainer::CodecTrainer(Codec & codec, MultiResolutionDiscriminator & disc, const CodecTrainerConfig & cfg,
                           uint64_t seed)
    : codec_(codec), disc_(disc), cfg_(cfg), gen_opt_(codec.params(), cfg.generator),
      disc_opt_(disc.params(), cfg.discriminator), rng_(seed) {}

CodecStepReport CodecTrainer::step(const CodecBatch & batch) {
    ParamSet dparams = disc_.params();
    dparams.set_requires_grad(false);
    Tensor x_hat;
    CodecLossTerms t = codec_objective(codec_, disc_, batch, double(step_), rng_, true, &x_hat);
    backward(t.total);
    gen_opt_.step();
    dparams.set_requires_grad(true);
    if (cfg_.ema_codebook) vq_ema_update(codec_.codebook(), t.semantic_latent, t.semantic_indices, rng_);

    Tensor dloss = discriminator_loss(disc_(batch.waves), disc_(detach(x_hat)));
    backward(dloss);
    disc_opt_.step();

    ++step_;
    CodecStepReport r;
    r.total = t.total.item();
    r.feature = t.feature.item();
    r.asr = t.asr.item();
    r.l1 = t.l1.item();
    r.stft = t.stft.item();
    r.commit = t.commit.item();
    r.disc = dloss.item();
    r.gamma_weight = t.gamma_weight;
    return r;
}

double mel_distance(std::span<const real> x, std::span<const real> x_hat, double sample_rate, size_t n_mels,
                    size_t fft_size, size_t hop) {
    if (x.size() != x_hat.size() || x.empty()) throw std::invalid_argument("mel_distance: signals must be equal and non-empty");
    auto a = log_mel(stft_magnitude(Tensor({x.size()}, std::vector<real>(x.begin(), x.end())), fft_size, hop), n_mels, sample_rate);
    auto b = log_mel(stft_magnitude(Tensor({x.size()}, std::vector<real>(x_hat.begin(), x_hat.end())), fft_size, hop), n_mels,
                     sample_rate);
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - b[i]);
    return s / double(a.size());
}

double stft_distance(std::span<const real> x, std::span<const real> x_hat, const std::vector<size_t> & fft_sizes) {
    if (x.size() != x_hat.size() || x.empty()) throw std::invalid_argument("stft_distance: signals must be equal and non-empty");
    NoGradGuard ng;
    Tensor a({1, x.size()}, std::vector<real>(x.begin(), x.end()));
    Tensor b({1, x.size()}, std::vector<real>(x_hat.begin(), x_hat.end()));
    return multires_stft_loss(a, b, fft_sizes).item();
}

VOX_END
