#include "vox/codec.h"

#include <cmath>
#include <stdexcept>

VOX_BEGIN

SpectralDiscriminator::SpectralDiscriminator(size_t fft, const DiscriminatorConfig & cfg, Rng & rng)
    : fft_size(fft), slope(cfg.slope) {
    size_t in = 1;
    for (size_t i = 0; i < cfg.layers; ++i) {
        w.push_back(init_uniform({cfg.channels, cfg.kernel, in}, real(1.0 / std::sqrt(double(cfg.kernel * in))), rng));
        Tensor bias = Tensor::zeros({cfg.channels});
        bias.set_requires_grad(true);
        b.push_back(bias);
        in = cfg.channels;
    }
    w.push_back(init_uniform({1, 3, in}, real(1.0 / std::sqrt(double(3 * in))), rng));
    Tensor bias = Tensor::zeros({1});
    bias.set_requires_grad(true);
    b.push_back(bias);
}

std::vector<Tensor> SpectralDiscriminator::operator()(const Tensor & waves) const {
    if (waves.ndim() != 2 || waves.dim(1) == 0) throw std::invalid_argument("discriminator: waves must be [B, S]");
    const size_t bsz = waves.dim(0), s = waves.dim(1);
    std::vector<Tensor> specs;
    for (size_t i = 0; i < bsz; ++i) {
        Tensor wave = reshape(slice(waves, 0, i, 1), {s});
        specs.push_back(log(add_scalar(stft_mag(wave, fft_size, fft_size / 4), 1)));
    }
    Tensor x = bsz == 1 ? specs[0] : concat(specs, 0);
    x = reshape(x, {x.dim(0), x.dim(1), 1});
    std::vector<Tensor> acts;
    for (size_t l = 0; l + 1 < w.size(); ++l) {
        const size_t k = w[l].dim(1);
        x = leaky_relu(conv1d(x, w[l], b[l], 2, k / 2, k / 2), slope);
        acts.push_back(x);
    }
    acts.push_back(conv1d(x, w.back(), b.back(), 1, 1, 1));
    return acts;
}

void SpectralDiscriminator::collect(ParamSet & ps, const std::string & prefix) const {
    for (size_t l = 0; l < w.size(); ++l) {
        ps.add(prefix + "conv" + std::to_string(l) + ".w", w[l]);
        ps.add(prefix + "conv" + std::to_string(l) + ".b", b[l]);
    }
}

MultiResolutionDiscriminator::MultiResolutionDiscriminator(const DiscriminatorConfig & c, Rng & rng_in) : cfg(c) {
    cfg.validate();
    Rng rng = rng_in.split("discriminator");
    for (size_t n : cfg.fft_sizes) discs.emplace_back(n, cfg, rng);
}

std::vector<std::vector<Tensor>> MultiResolutionDiscriminator::operator()(const Tensor & waves) const {
    std::vector<std::vector<Tensor>> out;
    for (const auto & d : discs) out.push_back(d(waves));
    return out;
}

ParamSet MultiResolutionDiscriminator::params() const {
    ParamSet ps;
    for (size_t i = 0; i < discs.size(); ++i) discs[i].collect(ps, "disc" + std::to_string(discs[i].fft_size) + ".");
    return ps;
}

Tensor hinge_real(const Tensor & logits) { return mean(relu(add_scalar(neg(logits), 1))); }
Tensor hinge_fake(const Tensor & logits) { return mean(relu(add_scalar(logits, 1))); }

Tensor discriminator_loss(const std::vector<std::vector<Tensor>> & real_acts,
                          const std::vector<std::vector<Tensor>> & fake_acts) {
    if (real_acts.size() != fake_acts.size() || real_acts.empty()) {
        throw std::invalid_argument("discriminator_loss: resolution count mismatch");
    }
    Tensor total = Tensor::scalar(0);
    for (size_t n = 0; n < real_acts.size(); ++n) {
        total = add(total, add(hinge_real(real_acts[n].back()), hinge_fake(fake_acts[n].back())));
    }
    return scale(total, real(1) / real(real_acts.size()));
}

Tensor feature_matching_loss(const std::vector<std::vector<Tensor>> & real_acts,
                             const std::vector<std::vector<Tensor>> & fake_acts, bool per_element_mean) {
    if (real_acts.size() != fake_acts.size() || real_acts.empty()) {
        throw std::invalid_argument("feature_matching_loss: resolution count mismatch");
    }
    Tensor total = Tensor::scalar(0);
    size_t terms = 0;
    for (size_t n = 0; n < real_acts.size(); ++n) {
        if (real_acts[n].size() != fake_acts[n].size()) throw std::invalid_argument("feature_matching_loss: layer count mismatch");
        for (size_t m = 0; m < real_acts[n].size(); ++m) {
            Tensor d = abs(sub(fake_acts[n][m], detach(real_acts[n][m])));
            total = add(total, per_element_mean ? mean(d) : sum(d));
            ++terms;
        }
    }
    return scale(total, real(1) / real(terms));
}

Tensor multires_stft_loss(const Tensor & x, const Tensor & x_hat, const std::vector<size_t> & fft_sizes) {
    if (x.shape() != x_hat.shape() || x.ndim() != 2) throw std::invalid_argument("stft loss: waves must be equal [B, S]");
    if (fft_sizes.empty()) throw std::invalid_argument("stft loss: no resolutions");
    const size_t bsz = x.dim(0), s = x.dim(1);
    Tensor total = Tensor::scalar(0);
    for (size_t b = 0; b < bsz; ++b) {
        Tensor xb = reshape(slice(x, 0, b, 1), {s});
        Tensor yb = reshape(slice(x_hat, 0, b, 1), {s});
        for (size_t n : fft_sizes) total = add(total, mean(abs(sub(stft_mag(yb, n, n / 4), detach(stft_mag(xb, n, n / 4))))));
    }
    return scale(total, real(1) / real(bsz * fft_sizes.size()));
}

VOX_END
