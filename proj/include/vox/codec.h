#pragma once

#include "vox/align.h"
#include "vox/nn.h"
#include "vox/quantize.h"

#include <filesystem>
#include <optional>
#include <vector>

VOX_BEGIN

struct CodecBlock {
    size_t layers = 2;
    size_t window = 16;  // attention window at this block's frame rate
    size_t kernel = 4;
    size_t stride = 2;
};

struct LossWeights {
    double alpha = 1.0;     // feature matching
    double beta = 1.0;      // ASR distillation
    double gamma = 0.9999;  // reconstruction weight is gamma^t
    double delta = 0.1;     // VQ commitment

    void validate() const;
    double gamma_at(double step) const;
};

struct DiscriminatorConfig {
    std::vector<size_t> fft_sizes{2296, 1418, 876, 542, 334, 206, 126, 76};
    size_t channels = 256;
    size_t layers = 4;       // stride-2 layers along frequency, then a logit layer
    size_t kernel = 5;
    real slope = real(0.2);
    // per-element mean inside the L1 norm; false sums |delta| over each layer
    bool feature_mean = true;

    void validate() const;
};

struct CodecConfig {
    size_t sample_rate = 24000;
    size_t patch_size = 240;
    size_t embed_dim = 1024;
    size_t semantic_dim = 256;
    size_t acoustic_dim = 36;
    size_t frame_ratio = 8;  // patch rate / latent rate
    size_t patch_kernel = 7;
    std::vector<CodecBlock> blocks{{2, 16, 4, 2}, {2, 8, 4, 2}, {2, 4, 4, 2}, {2, 2, 3, 1}};
    real layerscale_init = real(0.01);
    real qk_norm_eps = real(1e-6);
    size_t codebook_size = 8192;
    size_t fsq_levels = 21;
    size_t asr_dim = 1280;   // hidden width of the distillation teacher
    VQConfig vq;             // codebook_size and dim are filled from the fields above
    FSQConfig fsq;
    LossWeights weights;
    DiscriminatorConfig disc;
    std::vector<size_t> stft_sizes;  // empty: share the discriminator resolutions

    static CodecConfig paper();
    static CodecConfig toy();

    void validate() const;
    size_t latent_dim() const { return semantic_dim + acoustic_dim; }
    size_t heads() const { return std::max<size_t>(1, embed_dim / 64); }
    size_t samples_per_frame() const { return patch_size * frame_ratio; }
    double frame_rate() const { return double(sample_rate) / double(samples_per_frame()); }
    const std::vector<size_t> & loss_fft_sizes() const { return stft_sizes.empty() ? disc.fft_sizes : stft_sizes; }
    TokenLayout token_layout() const { return {codebook_size, acoustic_dim, fsq_levels}; }
    VQConfig vq_config() const;
    FSQConfig fsq_config() const;
};

struct LatentFrame {
    Tensor semantic;  // [semantic_dim]
    Tensor acoustic;  // [acoustic_dim]
};

// wave [..., S] with S a positive multiple of `patch` -> [..., S / patch, patch]
Tensor patchify(const Tensor & wave, size_t patch);
Tensor unpatchify(const Tensor & patches);
// zero-pads the tail to a multiple of `multiple` samples
std::vector<real> pad_to_multiple(std::span<const real> wave, size_t multiple);

struct QuantizedLatent {
    Tensor decoder_input;  // [B, F, latent]
    Tensor semantic;       // [B, F, semantic] after VQ (straight-through)
    Tensor commit;         // scalar
    std::vector<std::vector<int>> semantic_indices;  // [B][F]
};

class Codec {
public:
    Codec() = default;
    Codec(const CodecConfig & cfg, Rng & rng);

    const CodecConfig & config() const { return cfg_; }
    VQCodebook & codebook() { return book_; }
    const VQCodebook & codebook() const { return book_; }
    const Linear & asr_projector() const { return asr_proj_; }

    // patches [B, P, patch] -> pre-quantization latent [B, P / ratio, latent]
    Tensor encode_latent(const Tensor & patches) const;
    // latent [B, F, latent] -> waves [B, F * samples_per_frame]
    Tensor decode_latent(const Tensor & latent) const;
    // training draws the VQ / FSQ branches per batch item from rng
    QuantizedLatent quantize(const Tensor & latent, bool training, Rng * rng);

    // Inference helpers on a single mono wave. encode pads to whole frames.
    std::vector<TokenFrame> encode(std::span<const real> wave) const;
    std::vector<LatentFrame> encode_frames(std::span<const real> wave) const;
    Tensor tokens_to_latent(std::span<const TokenFrame> frames) const;  // [1, F, latent]
    // stops at the first EOA frame; out-of-range indices throw
    std::vector<real> decode(std::span<const TokenFrame> frames) const;
    // encode -> decode, trimmed to the input length
    std::vector<real> reconstruct(std::span<const real> wave) const;

    ParamSet params() const;     // trainable (codebook excluded, it follows EMA)
    ParamSet state() const;      // params plus codebook entries, for checkpoints

private:
    struct Block {
        std::vector<TransformerLayer> layers;
        Tensor conv_w, conv_b;
        size_t kernel = 0, stride = 1;
    };
    CodecConfig cfg_;
    Tensor in_w_, in_b_;
    std::vector<Block> enc_;
    Tensor dec_in_w_, dec_in_b_;
    std::vector<Block> dec_;
    Tensor out_w_, out_b_;
    VQCodebook book_;
    Linear asr_proj_;
};

// ---------------------------------------------------------------------------

// One STFT resolution: log-magnitude spectrogram -> 1-D conv stack over
// frequency (frames act as the batch) -> logits.
struct SpectralDiscriminator {
    size_t fft_size = 0;
    real slope = real(0.2);
    std::vector<Tensor> w, b;  // last pair is the logit layer

    SpectralDiscriminator() = default;
    SpectralDiscriminator(size_t fft, const DiscriminatorConfig & cfg, Rng & rng);
    // waves [B, S] -> activations of every layer, logits last
    std::vector<Tensor> operator()(const Tensor & waves) const;
    void collect(ParamSet & ps, const std::string & prefix) const;
};

struct MultiResolutionDiscriminator {
    DiscriminatorConfig cfg;
    std::vector<SpectralDiscriminator> discs;

    MultiResolutionDiscriminator() = default;
    MultiResolutionDiscriminator(const DiscriminatorConfig & cfg, Rng & rng);
    // [resolution][layer]
    std::vector<std::vector<Tensor>> operator()(const Tensor & waves) const;
    ParamSet params() const;
};

Tensor hinge_real(const Tensor & logits);  // mean max(0, 1 - D(x))
Tensor hinge_fake(const Tensor & logits);  // mean max(0, 1 + D(x_hat))
// mean over resolutions of the real + fake hinge losses
Tensor discriminator_loss(const std::vector<std::vector<Tensor>> & real_acts,
                          const std::vector<std::vector<Tensor>> & fake_acts);
// mean over resolutions and layers of the L1 activation distance; real side is detached
Tensor feature_matching_loss(const std::vector<std::vector<Tensor>> & real_acts,
                             const std::vector<std::vector<Tensor>> & fake_acts, bool per_element_mean = true);

// Mean over resolutions of the mean-absolute STFT magnitude error, averaged over the batch.
Tensor multires_stft_loss(const Tensor & x, const Tensor & x_hat, const std::vector<size_t> & fft_sizes);

// ---------------------------------------------------------------------------

struct AsrTarget {
    Tensor alignment;  // [L, F] at codec frame rate
    Tensor hidden;     // [L, asr_dim]
};

struct CodecBatch {
    Tensor waves;                  // [B, S], S a multiple of samples_per_frame
    std::vector<AsrTarget> asr;    // empty or one per item
};

struct CodecLossTerms {
    Tensor feature, asr, l1, stft, commit;
    Tensor total;
    double gamma_weight = 1;
    // pre-quantization semantic rows [B*F, semantic] and their nearest entries, for the EMA update
    Tensor semantic_latent;
    std::vector<int> semantic_indices;
};

// alpha * feature + beta * asr + gamma^t * (l1 + stft) + delta * commit
Tensor combine_codec_loss(const CodecLossTerms & terms, const LossWeights & w, double step);

// Generator-side objective. The discriminator is only read.
CodecLossTerms codec_objective(Codec & codec, const MultiResolutionDiscriminator & disc, const CodecBatch & batch,
                               double step, Rng & rng, bool training = true, Tensor * reconstruction = nullptr);

struct CodecTrainerConfig {
    AdamConfig generator{.lr = real(3e-4), .clip_norm = real(1.0)};
    AdamConfig discriminator{.lr = real(3e-4), .clip_norm = real(1.0)};
    bool ema_codebook = true;
};

struct CodecStepReport {
    double total = 0, feature = 0, asr = 0, l1 = 0, stft = 0, commit = 0, disc = 0, gamma_weight = 1;
};

// Alternating generator / discriminator updates in one thread.
class CodecTrainer {
public:
    CodecTrainer(Codec & codec, MultiResolutionDiscriminator & disc, const CodecTrainerConfig & cfg, uint64_t seed);
    CodecStepReport step(const CodecBatch & batch);
    size_t steps() const { return step_; }

private:
    Codec & codec_;
    MultiResolutionDiscriminator & disc_;
    CodecTrainerConfig cfg_;
    Adam gen_opt_, disc_opt_;
    Rng rng_;
    size_t step_ = 0;
};

// Reconstruction metrics on plain sample vectors (equal length).
double mel_distance(std::span<const real> x, std::span<const real> x_hat, double sample_rate, size_t n_mels = 80,
                    size_t fft_size = 1024, size_t hop = 256);
double stft_distance(std::span<const real> x, std::span<const real> x_hat, const std::vector<size_t> & fft_sizes);

// ---------------------------------------------------------------------------

struct Wav {
    size_t sample_rate = 24000;
    std::vector<real> samples;  // mono, [-1, 1]
};

// PCM 16-bit little-endian mono
Wav read_wav(const std::filesystem::path & path);
void write_wav(const std::filesystem::path & path, std::span<const real> samples, size_t sample_rate);

VOX_END
