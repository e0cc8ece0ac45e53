#pragma once

#include "vox/tensor.h"

#include <utility>
#include <vector>

VOX_BEGIN

struct Spectrogram {
    size_t fft_size = 0;
    size_t hop = 0;
    Tensor magnitudes;  // [frames, fft_size / 2 + 1]

    size_t frames() const { return magnitudes.dim(0); }
    size_t bins() const { return magnitudes.dim(1); }
};

// Periodic-Hann magnitude STFT. hop = 0 selects fft_size / 4.
Spectrogram stft_magnitude(const Tensor & wave, size_t fft_size, size_t hop = 0);

// [n_mels, fft/2 + 1] HTK-style triangular filterbank
std::vector<real> mel_filterbank(size_t n_mels, size_t fft_size, double sample_rate, double fmin = 0.0,
                                 double fmax = 0.0);
// log(mel energy + eps) of a magnitude spectrogram -> [frames, n_mels] (not differentiable)
std::vector<real> log_mel(const Spectrogram & spec, size_t n_mels, double sample_rate);

using DtwPath = std::vector<std::pair<size_t, size_t>>;

// Minimum-cost monotone path over steps (1,0), (0,1), (1,1) from (0,0) to (m-1,n-1).
DtwPath dtw_path(const Tensor & cost);
double path_cost(const Tensor & cost, const DtwPath & path);

// Same-length median filter with edge replication; width must be odd.
Tensor median_filter_1d(const Tensor & x, size_t width);
// Piecewise-linear resampling of a 1-D tensor keeping both endpoints.
Tensor linear_interp(const Tensor & x, size_t target_len);
// sin/cos encoding of t in [0, 1]: [sin(t*f_0), cos(t*f_0), sin(t*f_1), ...]
Tensor sinusoidal_embed(real t, size_t dim);
std::vector<real> sinusoidal_embed_values(real t, size_t dim);

VOX_END
