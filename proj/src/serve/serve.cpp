#include "vox/serve.h"

#include "vox/errors.h"
#include "vox/ops.h"
#include "vox/rng.h"

#include "json.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <stdexcept>

VOX_BEGIN

void BucketPlan::validate() const {
    for (size_t i = 0; i < buckets.size(); ++i) {
        if (buckets[i] == 0) throw ConfigError("buckets must be >= 1");
        if (i && buckets[i] <= buckets[i - 1]) throw ConfigError("buckets must be strictly increasing");
    }
}

BucketChoice pad_to_bucket(size_t batch_size, const BucketPlan & plan) {
    if (batch_size == 0) throw std::invalid_argument("pad_to_bucket: batch size must be >= 1");
    plan.validate();
    auto it = std::lower_bound(plan.buckets.begin(), plan.buckets.end(), batch_size);
    if (it == plan.buckets.end()) return {true, batch_size, 0};
    return {false, *it, *it - batch_size};
}

Tensor run_padded(const Tensor & x, const BucketPlan & plan, const std::function<Tensor(const Tensor &)> & f,
                  real pad_value) {
    const size_t b = x.dim(0);
    auto c = pad_to_bucket(b, plan);
    if (c.eager || c.pad == 0) return f(x);
    Shape ps = x.shape();
    ps[0] = c.pad;
    Tensor y = f(concat({x, Tensor::full(ps, pad_value)}, 0));
    if (y.dim(0) != c.bucket) throw std::logic_error("run_padded: callee changed the batch size");
    return slice(y, 0, 0, b);
}

// ---------------------------------------------------------------------------

ChunkEmitter::ChunkEmitter(size_t request, size_t chunk, size_t overlap)
    : request_(request), chunk_(chunk), overlap_(overlap) {
    if (chunk_ == 0) throw ConfigError("chunk size must be >= 1");
}

StreamChunk ChunkEmitter::make(double time, bool final) {
    StreamChunk c;
    c.request = request_;
    c.overlap = std::min(overlap_, emitted_);
    c.start = emitted_ - c.overlap;
    c.end = frames_.size();
    c.frames.assign(frames_.begin() + long(c.start), frames_.end());
    c.emit_time = time;
    c.final = final;
    emitted_ = frames_.size();
    return c;
}

std::optional<StreamChunk> ChunkEmitter::push(const TokenFrame & frame, double time, bool last) {
    frames_.push_back(frame);
    if (last) return make(time, true);
    if (pending() >= chunk_) return make(time, false);
    return std::nullopt;
}

std::optional<StreamChunk> ChunkEmitter::flush(double time) {
    if (pending() == 0) return std::nullopt;
    return make(time, true);
}

std::vector<StreamChunk> chunk_stream(const std::vector<TokenFrame> & frames, size_t chunk, size_t overlap) {
    ChunkEmitter e(0, chunk, overlap);
    std::vector<StreamChunk> out;
    for (size_t i = 0; i < frames.size(); ++i)
        if (auto c = e.push(frames[i], 0, i + 1 == frames.size())) out.push_back(std::move(*c));
    return out;
}

std::vector<TokenFrame> reassemble(const std::vector<StreamChunk> & chunks) {
    std::vector<TokenFrame> out;
    for (const auto & c : chunks) {
        if (c.end - c.start != c.frames.size() || c.overlap > c.frames.size()) throw std::invalid_argument("reassemble: malformed chunk");
        if (c.start + c.overlap != out.size()) throw std::invalid_argument("reassemble: gap or reordering in chunk stream");
        for (size_t i = 0; i < c.overlap; ++i) {
            if (!(c.frames[i] == out[c.start + i])) throw std::invalid_argument("reassemble: overlap prefix differs");
        }
        out.insert(out.end(), c.frames.begin() + long(c.overlap), c.frames.end());
    }
    return out;
}

// ---------------------------------------------------------------------------

void CostModel::validate() const {
    for (double v : {backbone_fixed_ms, backbone_per_item_ms, fm_fast_fixed_ms, fm_eager_fixed_ms, fm_per_item_ms,
                     prefill_fixed_ms, prefill_per_token_ms, codec_fixed_ms, codec_per_frame_ms}) {
        if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("cost model: costs must be finite and non-negative");
    }
    if (nfe == 0) throw ConfigError("cost model: nfe must be >= 1");
}

double CostModel::flow_pass(size_t b, const BucketPlan * plan) const {
    if (plan) {
        auto c = pad_to_bucket(b, *plan);
        if (!c.eager) return fm_fast_fixed_ms + fm_per_item_ms * double(charge_padding ? c.bucket : b);
    }
    return fm_eager_fixed_ms + fm_per_item_ms * double(b);
}

double CostModel::step(size_t b, const BucketPlan * plan) const {
    return backbone(b) + 2.0 * double(nfe) * flow_pass(b, plan);
}

void Scenario::validate() const {
    if (concurrency.empty()) throw ConfigError("scenario: empty concurrency list");
    for (size_t c : concurrency)
        if (c == 0) throw ConfigError("scenario: concurrency must be >= 1");
    if (chars == 0) throw ConfigError("scenario: chars must be >= 1");
    if (!(prompt_seconds >= 0) || !(frames_per_char > 0) || !(frame_rate_hz > 0)) {
        throw ConfigError("scenario: prompt_seconds >= 0, frames_per_char > 0 and frame_rate_hz > 0 required");
    }
    if (requests_per_client == 0 || chunk == 0 || channel_capacity == 0 || codec_max_batch == 0) {
        throw ConfigError("scenario: requests_per_client, chunk, channel_capacity and codec_max_batch must be >= 1");
    }
    if (char_jitter < 0 || char_jitter >= 1 || arrival_jitter_ms < 0) throw ConfigError("scenario: bad jitter");
    plan.validate();
    cost.validate();
}

size_t Scenario::frames_for(size_t n) const {
    return std::max<size_t>(1, size_t(std::llround(double(n) * frames_per_char)));
}

size_t Scenario::prompt_frames() const { return size_t(std::llround(prompt_seconds * frame_rate_hz)); }

namespace {

struct Request {
    size_t client = 0;
    size_t chars = 0, frames = 0, generated = 0;
    double arrival = 0, first_audio = -1, done = -1;
    double play_clock = -1;
    size_t chunks = 0, stalled = 0;
    std::unique_ptr<ChunkEmitter> emitter;
};

enum class Ev { Arrival, PrefillDone, StepDone, CodecDone };

struct Event {
    double t;
    size_t seq;
    Ev kind;
    size_t a;  // request id for arrivals
    bool operator>(const Event & o) const { return t != o.t ? t > o.t : seq > o.seq; }
};

}  // namespace

ServeMetrics simulate(const Scenario & s, size_t concurrency, std::vector<TraceEvent> * trace) {
    s.validate();
    const double frame_ms = 1000.0 / s.frame_rate_hz;
    const BucketPlan * plan = s.fast_path ? &s.plan : nullptr;
    Rng rng = Rng(s.seed).split(concurrency);

    std::vector<Request> reqs;
    std::priority_queue<Event, std::vector<Event>, std::greater<>> q;
    size_t seq = 0;
    auto schedule = [&](double t, Ev k, size_t a = 0) { q.push({t, seq++, k, a}); };
    auto log = [&](double t, size_t r, const char * what) {
        if (trace) trace->push_back({t, r, what});
    };
    std::vector<size_t> issued(concurrency, 0);
    auto issue = [&](size_t client, double t) {
        Request r;
        r.client = client;
        const double j = s.char_jitter > 0 ? rng.uniform(-s.char_jitter, s.char_jitter) : 0.0;
        r.chars = std::max<size_t>(1, size_t(std::llround(double(s.chars) * (1 + j))));
        r.frames = s.frames_for(r.chars);
        r.arrival = t;
        r.emitter = std::make_unique<ChunkEmitter>(reqs.size(), s.chunk, s.overlap);
        reqs.push_back(std::move(r));
        ++issued[client];
        schedule(t, Ev::Arrival, reqs.size() - 1);
    };
    for (size_t c = 0; c < concurrency; ++c) issue(c, s.arrival_jitter_ms > 0 ? rng.uniform(0, s.arrival_jitter_ms) : 0.0);

    std::vector<size_t> waiting, admitting, active;
    std::deque<StreamChunk> codec_queue;
    std::vector<StreamChunk> in_codec;
    bool gen_busy = false, codec_busy = false;
    double now = 0;
    size_t batch_sum = 0, steps = 0;
    ServeMetrics m;
    m.concurrency = concurrency;

    auto try_codec = [&] {
        if (codec_busy || codec_queue.empty()) return;
        in_codec.clear();
        size_t frames = 0;
        while (!codec_queue.empty() && in_codec.size() < s.codec_max_batch) {
            frames += codec_queue.front().frames.size();
            in_codec.push_back(std::move(codec_queue.front()));
            codec_queue.pop_front();
        }
        codec_busy = true;
        schedule(now + s.cost.codec(frames), Ev::CodecDone);
    };
    auto try_gen = [&] {
        if (gen_busy) return;
        if (!waiting.empty()) {
            size_t tokens = 0;
            for (size_t r : waiting) tokens += s.prompt_frames() + reqs[r].chars + 2;
            admitting = std::move(waiting);
            waiting.clear();
            gen_busy = true;
            schedule(now + s.cost.prefill(tokens), Ev::PrefillDone);
            return;
        }
        if (active.empty()) return;
        // backpressure: the codec channel is full
        if (codec_queue.size() + active.size() > s.channel_capacity && !codec_queue.empty()) return;
        const size_t b = active.size();
        if (plan && !pad_to_bucket(b, *plan).eager) ++m.fast_steps; else ++m.eager_steps;
        batch_sum += b;
        ++steps;
        gen_busy = true;
        schedule(now + s.cost.step(b, plan), Ev::StepDone);
    };
    auto emit = [&](StreamChunk c) {
        log(now, c.request, "chunk_emit");
        codec_queue.push_back(std::move(c));
    };

    while (!q.empty()) {
        Event e = q.top();
        q.pop();
        now = e.t;
        switch (e.kind) {
        case Ev::Arrival:
            log(now, e.a, "arrive");
            waiting.push_back(e.a);
            break;
        case Ev::PrefillDone:
            for (size_t r : admitting) log(now, r, "prefill_done");
            active.insert(active.end(), admitting.begin(), admitting.end());
            admitting.clear();
            gen_busy = false;
            break;
        case Ev::StepDone: {
            std::vector<size_t> still;
            for (size_t r : active) {
                Request & rq = reqs[r];
                TokenFrame f{uint16_t(rq.generated % 65535), {}};
                ++rq.generated;
                const bool last = rq.generated == rq.frames;
                if (auto c = rq.emitter->push(f, now, last)) emit(std::move(*c));
                if (last) {
                    log(now, r, "generated");
                } else {
                    still.push_back(r);
                }
            }
            active = std::move(still);
            gen_busy = false;
            break;
        }
        case Ev::CodecDone:
            for (auto & c : in_codec) {
                Request & rq = reqs[c.request];
                log(now, c.request, "chunk_decoded");
                ++rq.chunks;
                if (rq.first_audio < 0) {
                    rq.first_audio = now;
                    rq.play_clock = now;
                } else if (now > rq.play_clock) {
                    ++rq.stalled;
                    log(now, c.request, "stall");
                    rq.play_clock = now;
                }
                rq.play_clock += double(c.new_frames()) * frame_ms;
                if (c.final) {
                    rq.done = now;
                    log(now, c.request, "done");
                    if (issued[rq.client] < s.requests_per_client) issue(rq.client, now);
                }
            }
            in_codec.clear();
            codec_busy = false;
            break;
        }
        try_codec();
        try_gen();
    }

    double first = 1e300, last = 0;
    for (const auto & r : reqs) {
        if (r.done < 0) throw std::logic_error("simulate: request did not complete");
        m.latency_ms += r.first_audio - r.arrival;
        m.rtf += (r.done - r.arrival) / (double(r.frames) * frame_ms);
        m.chunks += r.chunks;
        m.stalled += r.stalled;
        first = std::min(first, r.arrival);
        last = std::max(last, r.done);
        m.throughput += double(r.chars);
    }
    m.requests = reqs.size();
    m.latency_ms /= double(reqs.size());
    m.rtf /= double(reqs.size());
    m.makespan_ms = last - first;
    m.throughput /= m.makespan_ms / 1000.0;
    m.wait_rate = m.chunks ? double(m.stalled) / double(m.chunks) : 0.0;
    m.mean_batch = steps ? double(batch_sum) / double(steps) : 0.0;
    return m;
}

std::vector<ServeMetrics> run_simulation(const Scenario & s, std::vector<TraceEvent> * trace) {
    s.validate();
    std::vector<ServeMetrics> out;
    for (size_t c : s.concurrency) {
        std::vector<TraceEvent> t;
        out.push_back(simulate(s, c, trace ? &t : nullptr));
        if (trace) {
            for (auto & ev : t) ev.event = "c" + std::to_string(c) + ":" + ev.event;
            trace->insert(trace->end(), t.begin(), t.end());
        }
    }
    return out;
}

std::string metrics_json(const std::vector<ServeMetrics> & rows) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto & m : rows) {
        nlohmann::ordered_json j;
        j["concurrency"] = m.concurrency;
        j["latency_ms"] = m.latency_ms;
        j["rtf"] = m.rtf;
        j["throughput_chars_per_s"] = m.throughput;
        j["wait_rate"] = m.wait_rate;
        j["requests"] = m.requests;
        j["chunks"] = m.chunks;
        j["stalled_chunks"] = m.stalled;
        j["makespan_ms"] = m.makespan_ms;
        j["mean_batch"] = m.mean_batch;
        j["fast_steps"] = m.fast_steps;
        j["eager_steps"] = m.eager_steps;
        arr.push_back(j);
    }
    return arr.dump(2);
}

void write_trace_csv(const std::vector<TraceEvent> & trace, const std::filesystem::path & path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "time_ms,request,event\n";
    out.precision(10);
    for (const auto & e : trace) out << e.time_ms << "," << e.request << "," << e.event << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

namespace {

void check_keys(const YAML::Node & n, const std::set<std::string> & allowed, const std::string & where) {
    if (!n.IsMap()) throw ConfigError(where + ": expected a mapping");
    for (const auto & kv : n) {
        const auto k = kv.first.as<std::string>();
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    }
}

template <class T> void read(const YAML::Node & n, const char * key, T & dst) {
    if (n[key]) {
        try {
            dst = n[key].as<T>();
        } catch (const YAML::Exception & e) {
            throw ConfigError(std::string("scenario: bad value for '") + key + "': " + e.what());
        }
    }
}

}  // namespace

Scenario load_scenario(const std::filesystem::path & path) {
    YAML::Node root;
    try {
        root = YAML::LoadFile(path.string());
    } catch (const YAML::BadFile &) {
        throw IoError("cannot open scenario " + path.string());
    } catch (const YAML::Exception & e) {
        throw ConfigError("scenario " + path.string() + ": " + e.what());
    }
    Scenario s;
    check_keys(root, {"concurrency", "chars", "prompt_seconds", "frames_per_char", "frame_rate_hz", "requests_per_client",
                      "chunk", "overlap", "buckets", "fast_path", "channel_capacity", "codec_max_batch", "char_jitter",
                      "arrival_jitter_ms", "seed", "cost"},
               "scenario");
    read(root, "concurrency", s.concurrency);
    read(root, "chars", s.chars);
    read(root, "prompt_seconds", s.prompt_seconds);
    read(root, "frames_per_char", s.frames_per_char);
    read(root, "frame_rate_hz", s.frame_rate_hz);
    read(root, "requests_per_client", s.requests_per_client);
    read(root, "chunk", s.chunk);
    read(root, "overlap", s.overlap);
    read(root, "buckets", s.plan.buckets);
    read(root, "fast_path", s.fast_path);
    read(root, "channel_capacity", s.channel_capacity);
    read(root, "codec_max_batch", s.codec_max_batch);
    read(root, "char_jitter", s.char_jitter);
    read(root, "arrival_jitter_ms", s.arrival_jitter_ms);
    read(root, "seed", s.seed);
    if (auto c = root["cost"]) {
        check_keys(c, {"backbone_fixed_ms", "backbone_per_item_ms", "fm_fast_fixed_ms", "fm_eager_fixed_ms", "fm_per_item_ms",
                       "nfe", "charge_padding", "prefill_fixed_ms", "prefill_per_token_ms", "codec_fixed_ms",
                       "codec_per_frame_ms"},
                   "scenario.cost");
        auto & m = s.cost;
        read(c, "backbone_fixed_ms", m.backbone_fixed_ms);
        read(c, "backbone_per_item_ms", m.backbone_per_item_ms);
        read(c, "fm_fast_fixed_ms", m.fm_fast_fixed_ms);
        read(c, "fm_eager_fixed_ms", m.fm_eager_fixed_ms);
        read(c, "fm_per_item_ms", m.fm_per_item_ms);
        read(c, "nfe", m.nfe);
        read(c, "charge_padding", m.charge_padding);
        read(c, "prefill_fixed_ms", m.prefill_fixed_ms);
        read(c, "prefill_per_token_ms", m.prefill_per_token_ms);
        read(c, "codec_fixed_ms", m.codec_fixed_ms);
        read(c, "codec_per_frame_ms", m.codec_per_frame_ms);
    }
    s.validate();
    return s;
}

void save_scenario(const Scenario & s, const std::filesystem::path & path) {
    YAML::Emitter e;
    e.SetDoublePrecision(17);
    e << YAML::BeginMap;
    e << YAML::Key << "concurrency" << YAML::Value << YAML::Flow << s.concurrency;
    e << YAML::Key << "chars" << YAML::Value << s.chars;
    e << YAML::Key << "prompt_seconds" << YAML::Value << s.prompt_seconds;
    e << YAML::Key << "frames_per_char" << YAML::Value << s.frames_per_char;
    e << YAML::Key << "frame_rate_hz" << YAML::Value << s.frame_rate_hz;
    e << YAML::Key << "requests_per_client" << YAML::Value << s.requests_per_client;
    e << YAML::Key << "chunk" << YAML::Value << s.chunk;
    e << YAML::Key << "overlap" << YAML::Value << s.overlap;
    e << YAML::Key << "buckets" << YAML::Value << YAML::Flow << s.plan.buckets;
    e << YAML::Key << "fast_path" << YAML::Value << s.fast_path;
    e << YAML::Key << "channel_capacity" << YAML::Value << s.channel_capacity;
    e << YAML::Key << "codec_max_batch" << YAML::Value << s.codec_max_batch;
    e << YAML::Key << "char_jitter" << YAML::Value << s.char_jitter;
    e << YAML::Key << "arrival_jitter_ms" << YAML::Value << s.arrival_jitter_ms;
    e << YAML::Key << "seed" << YAML::Value << s.seed;
    const auto & m = s.cost;
    e << YAML::Key << "cost" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "backbone_fixed_ms" << YAML::Value << m.backbone_fixed_ms;
    e << YAML::Key << "backbone_per_item_ms" << YAML::Value << m.backbone_per_item_ms;
    e << YAML::Key << "fm_fast_fixed_ms" << YAML::Value << m.fm_fast_fixed_ms;
    e << YAML::Key << "fm_eager_fixed_ms" << YAML::Value << m.fm_eager_fixed_ms;
    e << YAML::Key << "fm_per_item_ms" << YAML::Value << m.fm_per_item_ms;
    e << YAML::Key << "nfe" << YAML::Value << m.nfe;
    e << YAML::Key << "charge_padding" << YAML::Value << m.charge_padding;
    e << YAML::Key << "prefill_fixed_ms" << YAML::Value << m.prefill_fixed_ms;
    e << YAML::Key << "prefill_per_token_ms" << YAML::Value << m.prefill_per_token_ms;
    e << YAML::Key << "codec_fixed_ms" << YAML::Value << m.codec_fixed_ms;
    e << YAML::Key << "codec_per_frame_ms" << YAML::Value << m.codec_per_frame_ms;
    e << YAML::EndMap << YAML::EndMap;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << e.c_str() << "\n";
}

// ---------------------------------------------------------------------------

Calibration calibrate(const Scenario & base, const CalibrationTargets & t) {
    base.validate();
    Scenario s = base;
    CostModel & m = s.cost;
    const double frame_ms = 1000.0 / s.frame_rate_hz;
    const size_t n = s.frames_for(s.chars), c = s.chunk;
    if (n <= c) throw ConfigError("calibrate: request must span more than one chunk");
    const size_t tokens = s.prompt_frames() + s.chars + 2;
    const size_t last_new = n % c ? n % c : c;
    const double tail1 = m.codec(last_new + std::min(s.overlap, n - last_new));
    const double audio = double(n) * frame_ms;

    // latency = prefill + c * step1 + codec(c);  wall = prefill + n * step1 + tail
    const double step_fast = (t.rtf_fast * audio - t.latency_fast_ms + m.codec(c) - tail1) / double(n - c);
    const double prefill = t.latency_fast_ms - double(c) * step_fast - m.codec(c);
    const double step_eager = (t.rtf_eager * audio - prefill - tail1) / double(n);
    const double passes = 2.0 * double(m.nfe);
    m.prefill_per_token_ms = (prefill - m.prefill_fixed_ms) / double(tokens);
    // b = 1 uses bucket 1 when it exists
    const size_t b1 = s.plan.buckets.empty() ? 1 : s.plan.buckets.front();
    const double flow1 = (step_fast - m.backbone(1)) / passes;  // fm_fast_fixed + fm_per_item * b1
    const double flow1_eager = (step_eager - m.backbone(1)) / passes;

    // all `high` requests run in lock step; their prefill is one batched call
    const double prefill_high = m.prefill_fixed_ms + m.prefill_per_token_ms * double(tokens * t.high);
    const double tail_high = m.codec(t.high * (last_new + std::min(s.overlap, n - last_new)));
    const double step_high = (t.rtf_high * audio - prefill_high - tail_high) / double(n);
    auto ch = pad_to_bucket(t.high, s.plan);
    const size_t lanes = ch.eager || !m.charge_padding ? t.high : ch.bucket;
    // step_high - step1 = (high - 1) * backbone_per_item + passes * fm_per_item * (lanes - b1), fast fixed cancels
    m.fm_per_item_ms = (step_high - step_fast - double(t.high - 1) * m.backbone_per_item_ms) / (passes * double(lanes - b1));
    m.fm_fast_fixed_ms = flow1 - m.fm_per_item_ms * double(b1);
    m.fm_eager_fixed_ms = flow1_eager - m.fm_per_item_ms;
    s.validate();

    Calibration out;
    out.scenario = s;
    out.implied_chunk = (t.latency_eager_ms - t.latency_fast_ms) / (step_eager - step_fast);
    return out;
}

Scenario table_calibration_scenario() {
    Scenario s;
    s.concurrency = {1, 16, 32};
    s.chars = 500;
    s.prompt_seconds = 10;
    s.chunk = 5;
    s.overlap = 2;
    s.plan.buckets = {1, 2, 4, 8, 16, 32};
    return calibrate(s).scenario;
}

VOX_END
