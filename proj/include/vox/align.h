#pragma once

#include "vox/nn.h"
#include "vox/signal.h"

#include <filesystem>
#include <optional>
#include <vector>

VOX_BEGIN

struct WordTimestamp {
    size_t token = 0;   // decoder token index
    double start = 0;   // seconds
    double end = 0;
};

// Cross-attention and last-layer hidden states of an external ASR decoder.
struct AttentionBundle {
    Tensor attn;     // [heads, L, F_enc], non-negative
    Tensor hidden;   // [L, d]
    std::vector<WordTimestamp> timestamps;
    double encoder_rate_hz = 50.0;

    size_t heads() const { return attn.dim(0); }
    size_t tokens() const { return attn.dim(1); }
    size_t encoder_frames() const { return attn.dim(2); }
    void validate() const;
};

struct AlignConfig {
    size_t median_width = 7;
    // true: each encoder-frame column is normalised over tokens (as written);
    // false: each token row is normalised over encoder frames
    bool normalize_over_tokens = true;
};

struct HeadScore {
    size_t head;
    double deviation;  // mean |predicted - reference midpoint| in seconds
};

// Scores every head by DTW agreement with the word timestamps (ascending).
std::vector<HeadScore> score_heads(const AttentionBundle & bundle);
std::vector<size_t> select_heads(const AttentionBundle & bundle, size_t top_k);

// Soft token-to-frame alignment at the codec frame rate: rows are convex weights.
Tensor build_alignment(const AttentionBundle & bundle, const std::vector<size_t> & heads, size_t codec_frames,
                       const AlignConfig & cfg = {});

// 1 - mean_l cos(sum_f A[l,f] proj(z_f), h_l). z: [F, d_c], A: [L, F], h: [L, d].
Tensor asr_distill_loss(const Tensor & z, const Tensor & alignment, const Tensor & hidden, const Linear & projector);

// Diagonal-ish synthetic bundle: `good_heads` follow the word timing, the rest are noisy.
struct SyntheticBundleSpec {
    size_t heads = 4;
    size_t tokens = 6;
    size_t encoder_frames = 60;
    size_t hidden_dim = 16;
    double encoder_rate_hz = 50.0;
    std::vector<size_t> good_heads{0};
    double sharpness = 4.0;
};
AttentionBundle synthetic_bundle(const SyntheticBundleSpec & spec, Rng & rng);

// Stored with the checkpoint format: tensors `attn`, `hidden`, `timestamps` ([n, 3]),
// and `encoder_rate` ([1]).
void save_bundle(const AttentionBundle & bundle, const std::filesystem::path & stem);
AttentionBundle load_bundle(const std::filesystem::path & stem);

VOX_END
