#include "vox/codec.h"

#include "vox/errors.h"

#include <cmath>
#include <stdexcept>

VOX_BEGIN

void LossWeights::validate() const {
    if (alpha < 0 || beta < 0 || delta < 0 || gamma < 0) throw ConfigError("codec loss weights must be non-negative");
    if (gamma > 1) throw ConfigError("codec gamma base must be <= 1");
}

double LossWeights::gamma_at(double step) const { return std::pow(gamma, step); }

void DiscriminatorConfig::validate() const {
    if (fft_sizes.empty()) throw ConfigError("discriminator: need at least one FFT size");
    for (size_t n : fft_sizes)
        if (n < 8) throw ConfigError("discriminator: FFT size must be >= 8");
    if (channels == 0 || layers == 0 || kernel == 0) throw ConfigError("discriminator: channels, layers, kernel must be >= 1");
}

CodecConfig CodecConfig::paper() { return CodecConfig{}; }

CodecConfig CodecConfig::toy() {
    CodecConfig c;
    c.embed_dim = 64;
    c.semantic_dim = 16;
    c.acoustic_dim = 4;
    c.codebook_size = 64;
    c.asr_dim = 16;
    c.disc.channels = 16;
    return c;
}

VQConfig CodecConfig::vq_config() const {
    VQConfig v = vq;
    v.codebook_size = codebook_size;
    v.dim = semantic_dim;
    return v;
}

FSQConfig CodecConfig::fsq_config() const {
    FSQConfig f = fsq;
    f.num_dims = acoustic_dim;
    f.levels = fsq_levels;
    return f;
}

void CodecConfig::validate() const {
    if (sample_rate == 0 || patch_size == 0) throw ConfigError("codec: sample_rate and patch_size must be positive");
    if (embed_dim == 0 || embed_dim % heads() != 0) throw ConfigError("codec: embed_dim must divide into 64-wide heads");
    if (semantic_dim == 0 || acoustic_dim == 0) throw ConfigError("codec: latent split must be positive on both sides");
    if (blocks.empty()) throw ConfigError("codec: need at least one block");
    size_t prod = 1;
    for (const auto & b : blocks) {
        if (b.stride == 0 || b.kernel < b.stride) throw ConfigError("codec: each block needs kernel >= stride >= 1");
        prod *= b.stride;
    }
    if (prod != frame_ratio) {
        throw ConfigError("codec: product of block strides (" + std::to_string(prod) + ") must equal frame_ratio (" +
                          std::to_string(frame_ratio) + ")");
    }
    if (patch_kernel == 0) throw ConfigError("codec: patch_kernel must be >= 1");
    if (codebook_size == 0 || codebook_size > 65535) throw ConfigError("codec: codebook_size must be in [1, 65535]");
    if (asr_dim == 0) throw ConfigError("codec: asr_dim must be positive");
    fsq_config().validate();
    weights.validate();
    disc.validate();
    for (size_t n : stft_sizes)
        if (n < 8) throw ConfigError("codec: STFT loss size must be >= 8");
}

Tensor patchify(const Tensor & wave, size_t patch) {
    if (wave.ndim() == 0 || wave.numel() == 0) throw std::invalid_argument("patchify: empty wave");
    const size_t s = wave.shape().back();
    if (patch == 0 || s % patch) {
        throw std::invalid_argument("patchify: length " + std::to_string(s) + " is not a multiple of " + std::to_string(patch));
    }
    Shape sh = wave.shape();
    sh.back() = s / patch;
    sh.push_back(patch);
    return reshape(wave, sh);
}

Tensor unpatchify(const Tensor & patches) {
    if (patches.ndim() < 2) throw std::invalid_argument("unpatchify: need [..., frames, patch]");
    Shape sh = patches.shape();
    const size_t p = sh.back();
    sh.pop_back();
    sh.back() *= p;
    return reshape(patches, sh);
}

std::vector<real> pad_to_multiple(std::span<const real> wave, size_t multiple) {
    std::vector<real> out(wave.begin(), wave.end());
    const size_t n = std::max<size_t>(1, (wave.size() + multiple - 1) / multiple) * multiple;
    out.resize(n, 0);
    return out;
}

namespace {

Tensor conv_weight(size_t a, size_t k, size_t b, size_t fan_in, Rng & rng) {
    return init_uniform({a, k, b}, real(1.0 / std::sqrt(double(fan_in))), rng);
}

Tensor zero_param(size_t n) {
    Tensor t = Tensor::zeros({n});
    t.set_requires_grad(true);
    return t;
}

}  // namespace

Codec::Codec(const CodecConfig & cfg, Rng & rng_in) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = rng_in.split("codec");
    const size_t d = cfg_.embed_dim, lat = cfg_.latent_dim(), p = cfg_.patch_size;
    in_w_ = conv_weight(d, cfg_.patch_kernel, p, cfg_.patch_kernel * p, rng);
    in_b_ = zero_param(d);
    auto layer_cfg = [&](size_t window) {
        TransformerLayerConfig t;
        t.width = d;
        t.heads = cfg_.heads();
        t.causal = true;
        t.window = window;
        t.alibi = true;
        t.qk_norm = true;
        t.qk_norm_eps = cfg_.qk_norm_eps;
        t.layer_scale = cfg_.layerscale_init;
        return t;
    };
    const size_t nb = cfg_.blocks.size();
    for (size_t i = 0; i < nb; ++i) {
        const auto & spec = cfg_.blocks[i];
        Block b;
        for (size_t l = 0; l < spec.layers; ++l) b.layers.emplace_back(layer_cfg(spec.window), rng);
        const size_t out = i + 1 == nb ? lat : d;
        b.conv_w = conv_weight(out, spec.kernel, d, spec.kernel * d, rng);
        b.conv_b = zero_param(out);
        b.kernel = spec.kernel;
        b.stride = spec.stride;
        enc_.push_back(std::move(b));
    }
    dec_in_w_ = conv_weight(d, 3, lat, 3 * lat, rng);
    dec_in_b_ = zero_param(d);
    for (size_t i = 0; i < nb; ++i) {
        const auto & spec = cfg_.blocks[nb - 1 - i];
        Block b;
        b.conv_w = conv_weight(d, spec.kernel, d, spec.kernel * d / spec.stride, rng);
        b.conv_b = zero_param(d);
        b.kernel = spec.kernel;
        b.stride = spec.stride;
        for (size_t l = 0; l < spec.layers; ++l) b.layers.emplace_back(layer_cfg(spec.window), rng);
        dec_.push_back(std::move(b));
    }
    out_w_ = conv_weight(p, cfg_.patch_kernel, d, cfg_.patch_kernel * d, rng);
    out_b_ = zero_param(p);
    book_ = VQCodebook(cfg_.vq_config(), rng);
    asr_proj_ = Linear(cfg_.semantic_dim, cfg_.asr_dim, rng);
}

Tensor Codec::encode_latent(const Tensor & patches) const {
    if (patches.ndim() != 3 || patches.dim(2) != cfg_.patch_size) {
        throw std::invalid_argument("codec: patches must be [B, P, patch_size], got " + shape_str(patches.shape()));
    }
    if (patches.dim(1) == 0 || patches.dim(1) % cfg_.frame_ratio) {
        throw std::invalid_argument("codec: patch count must be a positive multiple of the frame ratio");
    }
    Tensor x = conv1d(patches, in_w_, in_b_, 1, cfg_.patch_kernel - 1, 0);
    for (const auto & b : enc_) {
        for (const auto & l : b.layers) x = l(x);
        x = conv1d(x, b.conv_w, b.conv_b, b.stride, b.kernel - b.stride, 0);
    }
    return x;
}

Tensor Codec::decode_latent(const Tensor & latent) const {
    if (latent.ndim() != 3 || latent.dim(2) != cfg_.latent_dim()) {
        throw std::invalid_argument("codec: latent must be [B, F, latent_dim], got " + shape_str(latent.shape()));
    }
    Tensor x = conv1d(latent, dec_in_w_, dec_in_b_, 1, 2, 0);
    for (const auto & b : dec_) {
        x = conv_transpose1d(x, b.conv_w, b.conv_b, b.stride, b.kernel - b.stride);
        for (const auto & l : b.layers) x = l(x);
    }
    x = conv1d(x, out_w_, out_b_, 1, cfg_.patch_kernel - 1, 0);
    return unpatchify(x);
}

QuantizedLatent Codec::quantize(const Tensor & latent, bool training, Rng * rng) {
    if (training && !rng) throw std::invalid_argument("codec: training quantization needs an rng");
    const size_t bsz = latent.dim(0), f = latent.dim(1), sd = cfg_.semantic_dim, ad = cfg_.acoustic_dim;
    const FSQConfig fsq = cfg_.fsq_config();
    QuantizedLatent q;
    std::vector<Tensor> items, sems;
    Tensor commit = Tensor::scalar(0);
    for (size_t b = 0; b < bsz; ++b) {
        Tensor z = reshape(slice(latent, 0, b, 1), {f, sd + ad});
        auto vq = vq_quantize(slice(z, 1, 0, sd), book_, training, rng);
        Tensor ac = slice(z, 1, sd, ad);
        Tensor acq = training ? fsq_train_forward(ac, fsq, *rng).values : fsq_quantize(ac, fsq.levels).values;
        commit = add(commit, vq.commit);
        sems.push_back(vq.z_q);
        items.push_back(concat({vq.z_q, acq}, 1));
        q.semantic_indices.push_back(vq.indices);
    }
    q.decoder_input = reshape(concat(items, 0), {bsz, f, sd + ad});
    q.semantic = reshape(concat(sems, 0), {bsz, f, sd});
    q.commit = scale(commit, real(1) / real(bsz));
    return q;
}

std::vector<LatentFrame> Codec::encode_frames(std::span<const real> wave) const {
    if (wave.empty()) throw std::invalid_argument("codec: empty wave");
    NoGradGuard ng;
    auto padded = pad_to_multiple(wave, cfg_.samples_per_frame());
    Tensor latent = encode_latent(patchify(Tensor({1, padded.size()}, padded), cfg_.patch_size));
    const size_t f = latent.dim(1), lat = cfg_.latent_dim(), sd = cfg_.semantic_dim;
    std::vector<LatentFrame> out;
    auto d = latent.data();
    for (size_t i = 0; i < f; ++i) {
        auto row = d.subspan(i * lat, lat);
        out.push_back({Tensor({sd}, std::vector<real>(row.begin(), row.begin() + long(sd))),
                       Tensor({lat - sd}, std::vector<real>(row.begin() + long(sd), row.end()))});
    }
    return out;
}

std::vector<TokenFrame> Codec::encode(std::span<const real> wave) const {
    std::vector<TokenFrame> frames;
    for (const auto & lf : encode_frames(wave)) {
        TokenFrame t;
        t.semantic = uint16_t(book_.nearest(lf.semantic.data()));
        for (real v : lf.acoustic.data()) t.acoustic.push_back(uint8_t(fsq_index(std::tanh(v), cfg_.fsq_levels)));
        frames.push_back(std::move(t));
    }
    return frames;
}

Tensor Codec::tokens_to_latent(std::span<const TokenFrame> frames) const {
    const TokenLayout layout = cfg_.token_layout();
    const size_t sd = cfg_.semantic_dim, lat = cfg_.latent_dim();
    std::vector<real> v;
    auto e = book_.entries.data();
    size_t f = 0;
    for (const auto & t : frames) {
        layout.validate(t);
        if (t.is_eoa(layout.semantic_k)) break;
        v.insert(v.end(), e.begin() + long(t.semantic * sd), e.begin() + long((t.semantic + 1) * sd));
        for (uint8_t a : t.acoustic) v.push_back(fsq_level(a, cfg_.fsq_levels));
        ++f;
    }
    if (f == 0) throw std::invalid_argument("codec: no audio frames to decode");
    return Tensor({1, f, lat}, v);
}

std::vector<real> Codec::decode(std::span<const TokenFrame> frames) const {
    NoGradGuard ng;
    return decode_latent(tokens_to_latent(frames)).to_vector();
}

std::vector<real> Codec::reconstruct(std::span<const real> wave) const {
    auto out = decode(encode(wave));
    out.resize(wave.size());
    return out;
}

ParamSet Codec::params() const {
    ParamSet ps;
    ps.add("enc.in.w", in_w_);
    ps.add("enc.in.b", in_b_);
    for (size_t i = 0; i < enc_.size(); ++i) {
        const std::string p = "enc." + std::to_string(i) + ".";
        for (size_t l = 0; l < enc_[i].layers.size(); ++l) enc_[i].layers[l].collect(ps, p + "layer" + std::to_string(l) + ".");
        ps.add(p + "conv.w", enc_[i].conv_w);
        ps.add(p + "conv.b", enc_[i].conv_b);
    }
    ps.add("dec.in.w", dec_in_w_);
    ps.add("dec.in.b", dec_in_b_);
    for (size_t i = 0; i < dec_.size(); ++i) {
        const std::string p = "dec." + std::to_string(i) + ".";
        ps.add(p + "conv.w", dec_[i].conv_w);
        ps.add(p + "conv.b", dec_[i].conv_b);
        for (size_t l = 0; l < dec_[i].layers.size(); ++l) dec_[i].layers[l].collect(ps, p + "layer" + std::to_string(l) + ".");
    }
    ps.add("dec.out.w", out_w_);
    ps.add("dec.out.b", out_b_);
    asr_proj_.collect(ps, "asr_proj.");
    return ps;
}

ParamSet Codec::state() const {
    ParamSet ps = params();
    ps.add("vq.entries", book_.entries);
    return ps;
}

VOX_END
