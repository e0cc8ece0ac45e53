#pragma once

#include "vox/nn.h"
#include "vox/quantize.h"

#include <atomic>
#include <functional>
#include <string>
#include <vector>

VOX_BEGIN

struct VadPolicy {
    double nonspeech_weight = 0.2;
    double long_silence_s = 3.0;  // non-speech runs longer than this get weight 0
    double frame_rate_hz = 12.5;
};

struct BackboneConfig {
    size_t width = 64;
    size_t layers = 2;
    size_t heads = 2;
    size_t mlp_ratio = 4;
    size_t text_vocab = 256;  // byte-level
    size_t semantic_k = 8192;
    size_t acoustic_dims = 36;
    size_t acoustic_levels = 21;
    size_t max_positions = 4096;
    bool freeze_text_embeddings = true;
    size_t min_prompt_frames = 13;   // 1 s at 12.5 Hz
    size_t max_audio_frames = 2250;  // 180 s
    VadPolicy vad;

    static BackboneConfig toy();
    void validate() const;
    size_t vocab_out() const { return semantic_k + 1; }
    size_t eoa() const { return semantic_k; }
    TokenLayout token_layout() const { return {semantic_k, acoustic_dims, acoustic_levels}; }
};

// special input tokens (their own embedding table)
enum Special : int { NEXT = 0, REPEAT = 1 };

struct TrainingSample {
    std::vector<TokenFrame> a1;  // voice reference
    std::vector<int> t2;         // text tokens (bytes)
    std::vector<TokenFrame> a2;  // target audio
    std::vector<bool> vad;       // per-A2-frame speech flag
};

std::vector<int> byte_tokens(const std::string & text);

// Per-frame loss weights from a speech mask.
std::vector<real> vad_weights(const std::vector<bool> & speech, const VadPolicy & policy);

// [A1][NEXT][T2][REPEAT][A2]. Position p predicts the semantic token at p + 1;
// the last A2 position predicts EOA.
struct AssembledSequence {
    TrainingSample sample;
    size_t length = 0;
    std::vector<int> targets;   // -1 where nothing is predicted
    std::vector<real> weights;  // 0 where nothing is predicted
    size_t next_pos() const { return sample.a1.size(); }
    size_t repeat_pos() const { return sample.a1.size() + 1 + sample.t2.size(); }
    size_t a2_start() const { return repeat_pos() + 1; }
};

// Weighted mean cross-entropy over rows with non-zero weight.
Tensor semantic_loss(const Tensor & logits, const std::vector<int> & targets, const std::vector<real> & weights);
// number of semantic_loss calls that saw only zero weights
size_t semantic_loss_zero_weight_count();

struct SamplerSettings {
    double temperature = 0.7;  // <= 0 selects argmax
    size_t top_k = 50;         // 0 keeps every class
    size_t max_frames = 2250;
};

// Maps a backbone hidden state [width] to continuous acoustic values [acoustic_dims].
using AcousticHead = std::function<std::vector<real>(std::span<const real> hidden)>;

struct GenerateResult {
    std::vector<TokenFrame> frames;        // without EOA
    std::vector<std::vector<real>> hidden; // hidden state that produced each frame
    size_t steps = 0;                      // semantic decisions made
    bool truncated = false;                // max_frames reached before EOA
    std::vector<std::string> warnings;
};

int sample_logits(std::span<const real> logits, const SamplerSettings & s, Rng & rng);

class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig & cfg, Rng & rng);

    const BackboneConfig & config() const { return cfg_; }

    AssembledSequence assemble(const TrainingSample & sample) const;
    // Sum of one semantic and acoustic_dims acoustic lookups per frame -> [n, width]
    Tensor embed_frames(const std::vector<TokenFrame> & frames) const;
    Tensor embed(const AssembledSequence & seq) const;  // [T, width], positions included
    Tensor hidden(const AssembledSequence & seq) const;  // [T, width]
    Tensor logits(const Tensor & hidden) const;          // [..., K + 1]

    // Autoregressive generation with a per-call KV cache.
    GenerateResult generate(const std::vector<TokenFrame> & prompt, const std::vector<int> & text,
                            const SamplerSettings & settings, const AcousticHead & head, Rng & rng) const;

    // Incremental decoding state, exposed for the serving path.
    struct Session {
        std::vector<KvCache> caches;
        size_t position = 0;
        std::vector<real> last_hidden;
    };
    Session start_session(const std::vector<TokenFrame> & prompt, const std::vector<int> & text) const;
    void push_frame(Session & s, const TokenFrame & frame) const;

    ParamSet params() const;  // trainable tensors (text table excluded when frozen)
    ParamSet state() const;   // everything, for checkpoints
    const Tensor & text_table() const { return text_embed_; }

private:
    Tensor run_cached(Session & s, const Tensor & x) const;

    BackboneConfig cfg_;
    Tensor text_embed_, special_embed_, audio_embed_, pos_embed_;
    std::vector<TransformerLayer> layers_;
    LayerNorm final_norm_;
    Linear head_;
};

VOX_END
