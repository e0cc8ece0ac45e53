#pragma once

#include "run_config.h"

#include "vox/synth.h"

#include "json.hpp"

#include <functional>

namespace voxtools {

using Json = nlohmann::ordered_json;
using LossLog = std::function<void(const Json &)>;

struct ToyUtterance {
    size_t speaker = 0;
    SynthUtterance audio;
};

struct ToyCorpus {
    std::vector<SynthVoice> voices;
    std::vector<SynthUtterance> prompts;  // one voice reference per speaker
    std::vector<ToyUtterance> items;
};

ToyCorpus make_corpus(const DataConfig & data, const CodecConfig & codec, Rng & rng);

// Stand-in ASR teacher: a fixed random hidden vector per character, aligned
// one-to-one with the frame that voices it.
Tensor teacher_table(size_t asr_dim, uint64_t seed);

// Frame-aligned random crops of `frames` frames with distillation targets.
CodecBatch sample_codec_batch(const ToyCorpus & corpus, const CodecConfig & cfg, const Tensor & teacher, size_t batch,
                              size_t frames, Rng & rng);

void train_codec(Codec & codec, MultiResolutionDiscriminator & disc, const ToyCorpus & corpus, const RunConfig & cfg,
                 const LossLog & log);

// Codec tokens for every corpus item, the speaker's reference as A1.
std::vector<TrainingSample> tokenize_corpus(const Codec & codec, const ToyCorpus & corpus);

void train_tts(TtsModel & model, const std::vector<TrainingSample> & samples, const RunConfig & cfg, const LossLog & log);

struct Synthesis {
    GenerateResult result;
    std::vector<real> wave;
};

Synthesis synthesize(const TtsModel & model, const Codec & codec, std::span<const real> prompt_wave, const std::string & text,
                     const RunConfig & cfg, Rng & rng);

}  // namespace voxtools
