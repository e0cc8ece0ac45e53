#include "vox/signal.h"

#include "vox/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

VOX_BEGIN

Spectrogram stft_magnitude(const Tensor & wave, size_t fft_size, size_t hop) {
    if (hop == 0) hop = std::max<size_t>(1, fft_size / 4);
    return Spectrogram{fft_size, hop, stft_mag(wave, fft_size, hop)};
}

namespace {
double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }
}  // namespace

std::vector<real> mel_filterbank(size_t n_mels, size_t fft_size, double sample_rate, double fmin, double fmax) {
    if (fmax <= 0) fmax = sample_rate / 2;
    const size_t bins = fft_size / 2 + 1;
    std::vector<double> centers(n_mels + 2);
    const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
    for (size_t i = 0; i < centers.size(); ++i) {
        centers[i] = mel_to_hz(lo + (hi - lo) * double(i) / double(n_mels + 1));
    }
    std::vector<real> fb(n_mels * bins, real(0));
    for (size_t m = 0; m < n_mels; ++m) {
        const double l = centers[m], c = centers[m + 1], r = centers[m + 2];
        for (size_t k = 0; k < bins; ++k) {
            const double f = double(k) * sample_rate / double(fft_size);
            double w = 0;
            if (f > l && f <= c) w = (f - l) / (c - l);
            else if (f > c && f < r) w = (r - f) / (r - c);
            fb[m * bins + k] = real(w);
        }
    }
    return fb;
}

std::vector<real> log_mel(const Spectrogram & spec, size_t n_mels, double sample_rate) {
    const size_t frames = spec.frames(), bins = spec.bins();
    const auto fb = mel_filterbank(n_mels, spec.fft_size, sample_rate);
    auto mag = spec.magnitudes.data();
    std::vector<real> out(frames * n_mels);
    for (size_t f = 0; f < frames; ++f) {
        for (size_t m = 0; m < n_mels; ++m) {
            double e = 0;
            for (size_t k = 0; k < bins; ++k) e += double(fb[m * bins + k]) * mag[f * bins + k];
            out[f * n_mels + m] = real(std::log(e + 1e-5));
        }
    }
    return out;
}

DtwPath dtw_path(const Tensor & cost) {
    if (cost.ndim() != 2 || cost.dim(0) == 0 || cost.dim(1) == 0) {
        throw std::invalid_argument("dtw_path: cost must be a non-empty 2-D tensor");
    }
    const size_t m = cost.dim(0), n = cost.dim(1);
    auto c = cost.data();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> acc(m * n, inf);
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
            double best = (i == 0 && j == 0) ? 0.0 : inf;
            if (i > 0 && j > 0) best = std::min(best, acc[(i - 1) * n + j - 1]);
            if (i > 0) best = std::min(best, acc[(i - 1) * n + j]);
            if (j > 0) best = std::min(best, acc[i * n + j - 1]);
            acc[i * n + j] = best + double(c[i * n + j]);
        }
    }
    DtwPath path;
    size_t i = m - 1, j = n - 1;
    path.emplace_back(i, j);
    while (i > 0 || j > 0) {
        // preference on ties: diagonal, then up, then left
        double best = inf;
        size_t bi = i, bj = j;
        if (i > 0 && j > 0 && acc[(i - 1) * n + j - 1] < best) {
            best = acc[(i - 1) * n + j - 1];
            bi = i - 1;
            bj = j - 1;
        }
        if (i > 0 && acc[(i - 1) * n + j] < best) {
            best = acc[(i - 1) * n + j];
            bi = i - 1;
            bj = j;
        }
        if (j > 0 && acc[i * n + j - 1] < best) {
            bi = i;
            bj = j - 1;
        }
        i = bi;
        j = bj;
        path.emplace_back(i, j);
    }
    std::reverse(path.begin(), path.end());
    return path;
}

double path_cost(const Tensor & cost, const DtwPath & path) {
    const size_t n = cost.dim(1);
    auto c = cost.data();
    double total = 0;
    for (auto [i, j] : path) total += c[i * n + j];
    return total;
}

Tensor median_filter_1d(const Tensor & x, size_t width) {
    if (width % 2 == 0) throw std::invalid_argument("median_filter_1d: width must be odd");
    const size_t n = x.numel();
    if (width > n) throw std::invalid_argument("median_filter_1d: width exceeds length");
    auto src = x.data();
    const long half = long(width / 2);
    std::vector<real> out(n), win(width);
    for (size_t i = 0; i < n; ++i) {
        for (long k = -half; k <= half; ++k) {
            const long idx = std::clamp(long(i) + k, 0L, long(n) - 1);
            win[size_t(k + half)] = src[size_t(idx)];
        }
        std::nth_element(win.begin(), win.begin() + half, win.end());
        out[i] = win[size_t(half)];
    }
    return Tensor(x.shape(), std::move(out));
}

Tensor linear_interp(const Tensor & x, size_t target_len) {
    if (target_len == 0) throw std::invalid_argument("linear_interp: target_len must be >= 1");
    const size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("linear_interp: empty input");
    auto src = x.data();
    std::vector<real> out(target_len);
    if (n == 1 || target_len == 1) {
        std::fill(out.begin(), out.end(), src[0]);
        return Tensor({target_len}, std::move(out));
    }
    for (size_t i = 0; i < target_len; ++i) {
        const double pos = double(i) * double(n - 1) / double(target_len - 1);
        const size_t lo = std::min(size_t(pos), n - 1);
        const double frac = pos - double(lo);
        out[i] = frac == 0.0 ? src[lo] : real((1.0 - frac) * src[lo] + frac * src[lo + 1]);
    }
    return Tensor({target_len}, std::move(out));
}

std::vector<real> sinusoidal_embed_values(real t, size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embed: dim must be even");
    // t in [0, 1] is stretched to a position range of 1000 before encoding
    const double pos = double(t) * 1000.0;
    std::vector<real> out(dim);
    for (size_t i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * double(i) / double(dim));
        out[2 * i] = real(std::sin(pos * freq));
        out[2 * i + 1] = real(std::cos(pos * freq));
    }
    return out;
}

Tensor sinusoidal_embed(real t, size_t dim) { return Tensor({dim}, sinusoidal_embed_values(t, dim)); }

VOX_END
