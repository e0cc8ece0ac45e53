#pragma once

#include "vox/quantize.h"
#include "vox/tensor.h"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

VOX_BEGIN

// ---------------------------------------------------------------------------
// Bucketed fast path

struct BucketPlan {
    std::vector<size_t> buckets{1, 2, 4, 8};  // strictly increasing

    void validate() const;
};

struct BucketChoice {
    bool eager = false;
    size_t bucket = 0;  // padded batch size (the batch itself when eager)
    size_t pad = 0;
};

BucketChoice pad_to_bucket(size_t batch_size, const BucketPlan & plan);

// Pads rows of x [B, ...] with pad_value up to the bucket, runs f, slices the
// result back to B rows. Falls back to f(x) when B exceeds every bucket.
Tensor run_padded(const Tensor & x, const BucketPlan & plan, const std::function<Tensor(const Tensor &)> & f,
                  real pad_value = 0);

// ---------------------------------------------------------------------------
// Chunked streaming

struct StreamChunk {
    size_t request = 0;
    size_t start = 0, end = 0;  // payload frame range, overlap prefix included
    size_t overlap = 0;         // leading frames repeated from the previous chunk
    std::vector<TokenFrame> frames;
    double emit_time = 0;
    bool final = false;

    size_t new_frames() const { return end - start - overlap; }
};

// Per-request buffer. Emits once `chunk` new frames have accumulated; each
// payload carries up to `overlap` trailing frames of the previous emission.
class ChunkEmitter {
public:
    ChunkEmitter(size_t request, size_t chunk, size_t overlap);

    // `last` closes the stream: whatever is pending goes out marked final
    std::optional<StreamChunk> push(const TokenFrame & frame, double time = 0, bool last = false);
    // end of stream without a new frame
    std::optional<StreamChunk> flush(double time = 0);

    size_t total() const { return frames_.size(); }
    size_t pending() const { return frames_.size() - emitted_; }

private:
    StreamChunk make(double time, bool final);

    size_t request_, chunk_, overlap_;
    std::vector<TokenFrame> frames_;
    size_t emitted_ = 0;
};

std::vector<StreamChunk> chunk_stream(const std::vector<TokenFrame> & frames, size_t chunk, size_t overlap);
// Concatenates payloads without their overlap prefixes; throws on gaps or
// prefixes that disagree with earlier frames.
std::vector<TokenFrame> reassemble(const std::vector<StreamChunk> & chunks);

// ---------------------------------------------------------------------------
// Serving simulation

// Affine per-call costs in milliseconds.
struct CostModel {
    double backbone_fixed_ms = 1.5;
    double backbone_per_item_ms = 0.1;
    double fm_fast_fixed_ms = 0.3;   // one flow-head pass, captured fast path
    double fm_eager_fixed_ms = 1.1;  // one flow-head pass, eager launch overhead
    double fm_per_item_ms = 0.03;
    size_t nfe = 8;
    bool charge_padding = true;  // fast-path passes pay for padded lanes
    double prefill_fixed_ms = 4.0;
    double prefill_per_token_ms = 0.02;
    double codec_fixed_ms = 5.0;
    double codec_per_frame_ms = 0.1;

    void validate() const;
    double backbone(size_t b) const { return backbone_fixed_ms + backbone_per_item_ms * double(b); }
    double flow_pass(size_t b, const BucketPlan * plan) const;  // null plan: eager
    // one AR step for b requests: 1 backbone pass + 2 * nfe flow passes
    double step(size_t b, const BucketPlan * plan) const;
    double prefill(size_t tokens) const { return prefill_fixed_ms + prefill_per_token_ms * double(tokens); }
    double codec(size_t frames) const { return codec_fixed_ms + codec_per_frame_ms * double(frames); }
};

struct Scenario {
    std::vector<size_t> concurrency{1, 16, 32};
    size_t chars = 500;
    double prompt_seconds = 10;
    double frames_per_char = 1.0;
    double frame_rate_hz = 12.5;
    size_t requests_per_client = 1;
    size_t chunk = 25;
    size_t overlap = 2;
    BucketPlan plan{{1, 2, 4, 8, 16, 32}};
    bool fast_path = true;
    size_t channel_capacity = 64;  // chunks queued for the codec stage
    size_t codec_max_batch = 32;   // chunks per codec call
    double char_jitter = 0;        // relative, drawn per request
    double arrival_jitter_ms = 0;  // first-arrival stagger per client
    uint64_t seed = 0;
    CostModel cost;

    void validate() const;
    size_t frames_for(size_t chars) const;
    size_t prompt_frames() const;
};

Scenario load_scenario(const std::filesystem::path & path);  // YAML, unknown keys rejected
void save_scenario(const Scenario & s, const std::filesystem::path & path);

struct ServeMetrics {
    size_t concurrency = 0;
    double latency_ms = 0;      // mean first-audio latency
    double rtf = 0;             // mean over requests of wall time / audio duration
    double throughput = 0;      // characters per second
    double wait_rate = 0;       // stalled chunks / chunks
    size_t requests = 0, chunks = 0, stalled = 0;
    double makespan_ms = 0;
    double mean_batch = 0;      // mean AR batch size
    size_t eager_steps = 0, fast_steps = 0;
};

struct TraceEvent {
    double time_ms;
    size_t request;
    std::string event;
};

ServeMetrics simulate(const Scenario & s, size_t concurrency, std::vector<TraceEvent> * trace = nullptr);
std::vector<ServeMetrics> run_simulation(const Scenario & s, std::vector<TraceEvent> * trace = nullptr);

std::string metrics_json(const std::vector<ServeMetrics> & rows);
void write_trace_csv(const std::vector<TraceEvent> & trace, const std::filesystem::path & path);

// Published single-request figures the affine model is fitted to.
struct CalibrationTargets {
    double rtf_fast = 0.103;
    double rtf_eager = 0.258;
    double latency_fast_ms = 70;
    double latency_eager_ms = 133;  // only reported through implied_chunk
    double rtf_high = 0.302;  // at concurrency `high`, sets the per-item slope
    size_t high = 32;
};

struct Calibration {
    Scenario scenario;
    double implied_chunk = 0;  // chunk size the latency targets imply
};

// Solves the flow-head overheads, per-item slope and prefill cost for `base`
// (its chars, prompt, chunk and structural costs are kept).
Calibration calibrate(const Scenario & base, const CalibrationTargets & t = {});
// Calibrated scenario: 500 characters, 10 s prompts, concurrency 1/16/32.
Scenario table_calibration_scenario();

VOX_END
