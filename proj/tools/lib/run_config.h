#pragma once

#include "vox/dpo.h"

#include <filesystem>
#include <string>
#include <vector>

namespace voxtools {

using namespace vox;

struct DataConfig {
    size_t utterances = 32;
    size_t speakers = 4;
    size_t min_words = 1;
    size_t max_words = 3;
    size_t prompt_words = 6;  // voice-reference utterance per speaker
};

struct TrainConfig {
    size_t codec_steps = 30;
    size_t codec_batch = 2;
    size_t codec_frames = 8;  // crop length
    double codec_lr = 1e-3;
    size_t tts_steps = 800;
    size_t tts_batch = 4;
    double tts_lr = 3e-3;
    size_t log_every = 1;
};

struct DpoRunConfig {
    size_t prompts = 4;
    size_t num_samples = 4;
    size_t batch_size = 2;
};

struct SweepConfig {
    std::vector<size_t> nfe{2, 4, 8, 16, 32};
    std::vector<double> alpha{1.0, 1.2, 1.5, 2.0};
    size_t samples = 1000;
    size_t train_steps = 2000;
    size_t batch = 128;
};

struct ServeRunConfig {
    std::string scenario;  // YAML scenario file; empty: built-in calibrated scenario
    bool calibrate = false;  // refit the cost model to the published figures first
    bool trace = true;
};

struct RunConfig {
    std::string profile = "toy";  // toy | paper-shape
    uint64_t seed = 0;
    std::string output_dir = "runs/default";
    CodecConfig codec;
    BackboneConfig backbone;
    FlowConfig flow;
    SamplerConfig sampler;
    SamplerSettings decoding;
    DPOConfig dpo;
    DpoRunConfig dpo_run;
    DataConfig data;
    TrainConfig train;
    SweepConfig sweep;
    ServeRunConfig serve;

    // shapes the backbone and flow head take from the codec
    void sync();
    void validate() const;
};

RunConfig default_run_config(const std::string & profile);
// Missing file: IoError. Unknown keys, bad values: ConfigError.
RunConfig load_run_config(const std::filesystem::path & path);
RunConfig parse_run_config(const std::string & yaml);
std::string dump_run_config(const RunConfig & cfg);

}  // namespace voxtools
