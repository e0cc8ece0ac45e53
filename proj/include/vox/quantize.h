#pragma once

#include "vox/ops.h"
#include "vox/rng.h"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

VOX_BEGIN

// ---------------------------------------------------------------------------
// Finite scalar quantization of the acoustic latent
// ---------------------------------------------------------------------------

struct FSQConfig {
    size_t num_dims = 36;
    size_t levels = 21;
    // training branch probabilities: quantize / dither / pass through
    double p_quantize = 0.5;
    double p_dither = 0.25;
    double p_passthrough = 0.25;
    // dither noise is uniform in [-a, a]; a <= 0 selects 1 / levels
    double dither_amplitude = 0;

    void validate() const;
    double amplitude() const { return dither_amplitude > 0 ? dither_amplitude : 1.0 / double(levels); }
};

// Centre of bin k when [-1, 1] is split into `levels` equal bins.
real fsq_level(size_t k, size_t levels);
// Nearest centre to a bounded value y (ties go to the lower index).
int fsq_index(real y, size_t levels);

struct FsqResult {
    std::vector<int> indices;  // one per element of x
    Tensor values;             // centre values; gradient passes straight through to tanh(x)
};

// tanh then snap each coordinate to its nearest bin centre.
FsqResult fsq_quantize(const Tensor & x, size_t levels);
// Same rounding applied to already-bounded values (values are clamped to [-1, 1]).
std::vector<int> fsq_indices_of(std::span<const real> bounded, size_t levels);
std::vector<real> fsq_values_of(std::span<const int> indices, size_t levels);

enum class FsqMode { Quantize, Dither, Passthrough };

struct FsqTrainResult {
    Tensor values;
    FsqMode mode;
};

// One branch draw for the whole sample `x`.
FsqTrainResult fsq_train_forward(const Tensor & x, const FSQConfig & cfg, Rng & rng);

// ---------------------------------------------------------------------------
// Vector quantization of the semantic latent
// ---------------------------------------------------------------------------

struct VQConfig {
    size_t codebook_size = 8192;
    size_t dim = 256;
    double apply_prob = 0.5;
    double ema_decay = 0.99;
    size_t dead_after = 200;   // steps unused before an entry is reseeded
};

struct VQCodebook {
    VQConfig cfg;
    Tensor entries;                      // [K, D]
    std::vector<uint64_t> usage;         // lifetime assignment counts
    std::vector<size_t> idle_steps;      // EMA steps since last assignment
    std::vector<double> ema_count;
    std::vector<double> ema_sum;         // [K * D]

    VQCodebook() = default;
    VQCodebook(const VQConfig & cfg, Rng & rng);
    VQCodebook(const VQConfig & cfg, Tensor entries);

    size_t size() const { return entries.defined() ? entries.dim(0) : 0; }
    size_t dim() const { return entries.dim(1); }
    // Euclidean nearest entry; ties go to the lowest index
    int nearest(std::span<const real> z) const;
};

struct VqResult {
    std::vector<int> indices;  // one per row of z_e
    Tensor z_q;                // [N, D]; straight-through when quantized, z_e otherwise
    Tensor commit;             // scalar mean over rows of ||z_e - sg(z_q)||^2 (0 when skipped)
    bool applied = true;
};

// z_e: [N, D] (or [D]). In training, the whole sample skips quantization with
// probability 1 - apply_prob.
VqResult vq_quantize(const Tensor & z_e, VQCodebook & book, bool training, Rng * rng);

// EMA codebook update from a batch of latents and their assignments, with
// dead-entry reseeding from batch rows.
void vq_ema_update(VQCodebook & book, const Tensor & z_e, std::span<const int> indices, Rng & rng);

// ---------------------------------------------------------------------------

double bitrate(double frame_rate_hz, double semantic_k, double acoustic_dims, double acoustic_levels);

// One 12.5 Hz frame. EOA frames carry semantic == K and no acoustic indices.
struct TokenFrame {
    uint16_t semantic = 0;
    std::vector<uint8_t> acoustic;

    bool is_eoa(size_t k) const { return semantic == k; }
    bool operator==(const TokenFrame &) const = default;
};

struct TokenLayout {
    size_t semantic_k = 8192;
    size_t acoustic_dims = 36;
    size_t acoustic_levels = 21;

    void validate(const TokenFrame & f) const;
    TokenFrame eoa() const { return TokenFrame{uint16_t(semantic_k), {}}; }
};

// u16 LE semantic followed by acoustic_dims u8 indices (none for EOA)
void write_token_frames(std::ostream & out, std::span<const TokenFrame> frames, const TokenLayout & layout);
std::vector<TokenFrame> read_token_frames(std::istream & in, const TokenLayout & layout);

VOX_END
