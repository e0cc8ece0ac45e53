#include "vox/backbone.h"

#include "vox/errors.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

VOX_BEGIN

BackboneConfig BackboneConfig::toy() {
    BackboneConfig c;
    c.semantic_k = 64;
    c.acoustic_dims = 4;
    c.max_positions = 1024;
    return c;
}

void BackboneConfig::validate() const {
    if (width == 0 || heads == 0 || width % heads) throw ConfigError("backbone: width must be a positive multiple of heads");
    if (layers == 0) throw ConfigError("backbone: need at least one layer");
    if (semantic_k == 0 || semantic_k > 65535) throw ConfigError("backbone: semantic_k must be in [1, 65535]");
    if (acoustic_dims == 0 || acoustic_levels < 2 || acoustic_levels > 256) {
        throw ConfigError("backbone: acoustic dims must be >= 1 and levels in [2, 256]");
    }
    if (text_vocab == 0) throw ConfigError("backbone: text_vocab must be positive");
    if (max_positions < 8) throw ConfigError("backbone: max_positions too small");
    if (vad.nonspeech_weight < 0 || vad.long_silence_s < 0 || vad.frame_rate_hz <= 0) {
        throw ConfigError("backbone: VAD policy values must be non-negative");
    }
}

std::vector<int> byte_tokens(const std::string & text) {
    std::vector<int> out;
    for (unsigned char c : text) out.push_back(int(c));
    return out;
}

std::vector<real> vad_weights(const std::vector<bool> & speech, const VadPolicy & policy) {
    std::vector<real> w(speech.size(), real(1));
    size_t i = 0;
    while (i < speech.size()) {
        if (speech[i]) {
            ++i;
            continue;
        }
        size_t j = i;
        while (j < speech.size() && !speech[j]) ++j;
        const double seconds = double(j - i) / policy.frame_rate_hz;
        const real v = seconds > policy.long_silence_s ? real(0) : real(policy.nonspeech_weight);
        for (size_t k = i; k < j; ++k) w[k] = v;
        i = j;
    }
    return w;
}

namespace {
std::atomic<size_t> g_zero_weight_calls{0};
}

size_t semantic_loss_zero_weight_count() { return g_zero_weight_calls.load(); }

Tensor semantic_loss(const Tensor & logits, const std::vector<int> & targets, const std::vector<real> & weights) {
    if (logits.ndim() != 2 || logits.dim(0) != targets.size() || targets.size() != weights.size()) {
        throw std::invalid_argument("semantic_loss: logits [N, V], targets and weights must agree");
    }
    double total = 0;
    std::vector<int> idx(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        if (weights[i] < 0) throw std::invalid_argument("semantic_loss: negative weight");
        if (weights[i] > 0 && (targets[i] < 0 || size_t(targets[i]) >= logits.dim(1))) {
            throw std::out_of_range("semantic_loss: target out of range");
        }
        idx[i] = weights[i] > 0 ? targets[i] : 0;
        total += weights[i];
    }
    if (total == 0) {
        ++g_zero_weight_calls;
        return Tensor::scalar(0);
    }
    Tensor ce = neg(pick(log_softmax_last(logits), idx));
    Tensor w({weights.size()}, std::vector<real>(weights.begin(), weights.end()));
    return scale(sum(mul(ce, w)), real(1.0 / total));
}

int sample_logits(std::span<const real> logits, const SamplerSettings & s, Rng & rng) {
    if (logits.empty()) throw std::invalid_argument("sample_logits: empty logits");
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[size_t(a)] > logits[size_t(b)]; });
    if (s.temperature <= 0) return order[0];
    const size_t k = s.top_k == 0 ? order.size() : std::min(s.top_k, order.size());
    std::vector<double> p(k);
    const double mx = logits[size_t(order[0])];
    double z = 0;
    for (size_t i = 0; i < k; ++i) {
        p[i] = std::exp((double(logits[size_t(order[i])]) - mx) / s.temperature);
        z += p[i];
    }
    double u = rng.uniform() * z;
    for (size_t i = 0; i < k; ++i) {
        u -= p[i];
        if (u < 0) return order[i];
    }
    return order[k - 1];
}

Backbone::Backbone(const BackboneConfig & cfg, Rng & rng_in) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = rng_in.split("backbone");
    const size_t w = cfg_.width;
    text_embed_ = init_normal({cfg_.text_vocab, w}, real(0.02), rng);
    text_embed_.set_requires_grad(!cfg_.freeze_text_embeddings);
    special_embed_ = init_normal({2, w}, real(0.02), rng);
    audio_embed_ = init_normal({cfg_.semantic_k + cfg_.acoustic_dims * cfg_.acoustic_levels, w}, real(0.02), rng);
    pos_embed_ = init_normal({cfg_.max_positions, w}, real(0.02), rng);
    TransformerLayerConfig lc;
    lc.width = w;
    lc.heads = cfg_.heads;
    lc.mlp_ratio = cfg_.mlp_ratio;
    lc.causal = true;
    for (size_t i = 0; i < cfg_.layers; ++i) layers_.emplace_back(lc, rng);
    final_norm_ = LayerNorm(w);
    head_ = Linear(w, cfg_.vocab_out(), rng);
}

AssembledSequence Backbone::assemble(const TrainingSample & sample) const {
    const TokenLayout layout = cfg_.token_layout();
    for (const auto * seq : {&sample.a1, &sample.a2}) {
        if (seq->size() > cfg_.max_audio_frames) throw std::invalid_argument("backbone: audio segment exceeds max_audio_frames");
        for (const auto & f : *seq) {
            layout.validate(f);
            if (f.is_eoa(cfg_.semantic_k)) throw std::out_of_range("backbone: EOA frame inside an audio segment");
        }
    }
    for (int t : sample.t2)
        if (t < 0 || size_t(t) >= cfg_.text_vocab) throw std::out_of_range("backbone: text token out of vocabulary");
    if (sample.vad.size() != sample.a2.size()) throw std::invalid_argument("backbone: vad mask must cover every A2 frame");

    AssembledSequence seq;
    seq.sample = sample;
    seq.length = sample.a1.size() + 1 + sample.t2.size() + 1 + sample.a2.size();
    if (seq.length > cfg_.max_positions) throw std::invalid_argument("backbone: sequence longer than max_positions");
    seq.targets.assign(seq.length, -1);
    seq.weights.assign(seq.length, 0);
    const auto w = vad_weights(sample.vad, cfg_.vad);
    const size_t r = seq.repeat_pos();
    for (size_t i = 0; i < sample.a2.size(); ++i) {
        seq.targets[r + i] = sample.a2[i].semantic;
        seq.weights[r + i] = w[i];
    }
    seq.targets[r + sample.a2.size()] = int(cfg_.eoa());
    seq.weights[r + sample.a2.size()] = 1;
    return seq;
}

Tensor Backbone::embed_frames(const std::vector<TokenFrame> & frames) const {
    const TokenLayout layout = cfg_.token_layout();
    const size_t cols = audio_embed_.dim(0);
    std::vector<real> counts(frames.size() * cols, 0);
    for (size_t i = 0; i < frames.size(); ++i) {
        layout.validate(frames[i]);
        if (frames[i].is_eoa(cfg_.semantic_k)) throw std::out_of_range("backbone: EOA frames are not embedded");
        counts[i * cols + frames[i].semantic] += 1;
        for (size_t d = 0; d < cfg_.acoustic_dims; ++d) {
            counts[i * cols + cfg_.semantic_k + d * cfg_.acoustic_levels + frames[i].acoustic[d]] += 1;
        }
    }
    return matmul(Tensor({frames.size(), cols}, counts), audio_embed_);
}

Tensor Backbone::embed(const AssembledSequence & seq) const {
    const auto & s = seq.sample;
    std::vector<Tensor> parts;
    if (!s.a1.empty()) parts.push_back(embed_frames(s.a1));
    parts.push_back(gather_rows(special_embed_, {NEXT}));
    if (!s.t2.empty()) parts.push_back(gather_rows(text_embed_, s.t2));
    parts.push_back(gather_rows(special_embed_, {REPEAT}));
    if (!s.a2.empty()) parts.push_back(embed_frames(s.a2));
    Tensor x = concat(parts, 0);
    std::vector<int> pos(seq.length);
    std::iota(pos.begin(), pos.end(), 0);
    return add(x, gather_rows(pos_embed_, pos));
}

Tensor Backbone::hidden(const AssembledSequence & seq) const {
    Tensor x = reshape(embed(seq), {1, seq.length, cfg_.width});
    for (const auto & l : layers_) x = l(x);
    return reshape(final_norm_(x), {seq.length, cfg_.width});
}

Tensor Backbone::logits(const Tensor & h) const { return head_(h); }

Tensor Backbone::run_cached(Session & s, const Tensor & x) const {
    const size_t n = x.dim(0);
    if (s.position + n > cfg_.max_positions) throw std::length_error("backbone: sequence exceeds max_positions");
    Tensor y = reshape(x, {1, n, cfg_.width});
    for (size_t i = 0; i < layers_.size(); ++i) y = layers_[i].forward_cached(y, s.caches[i]);
    y = reshape(final_norm_(y), {n, cfg_.width});
    auto d = y.data();
    s.last_hidden.assign(d.end() - long(cfg_.width), d.end());
    s.position += n;
    return y;
}

Backbone::Session Backbone::start_session(const std::vector<TokenFrame> & prompt, const std::vector<int> & text) const {
    NoGradGuard ng;
    TrainingSample prefix{prompt, text, {}, {}};
    AssembledSequence seq = assemble(prefix);
    Session s;
    s.caches.resize(layers_.size());
    // the assembled prefix ends with REPEAT; positions line up with a full forward
    run_cached(s, embed(seq));
    return s;
}

void Backbone::push_frame(Session & s, const TokenFrame & frame) const {
    NoGradGuard ng;
    if (s.position >= cfg_.max_positions) throw std::length_error("backbone: sequence exceeds max_positions");
    Tensor x = add(embed_frames({frame}), gather_rows(pos_embed_, {int(s.position)}));
    run_cached(s, x);
}

GenerateResult Backbone::generate(const std::vector<TokenFrame> & prompt, const std::vector<int> & text,
                                  const SamplerSettings & settings, const AcousticHead & head, Rng & rng) const {
    GenerateResult r;
    const double secs = double(prompt.size()) / cfg_.vad.frame_rate_hz;
    if (secs < 3.0 || secs > 25.0) {
        r.warnings.push_back("voice prompt is " + std::to_string(secs) + " s; prompts between 3 and 25 s work best");
    }
    NoGradGuard ng;
    Session s = start_session(prompt, text);
    while (true) {
        if (r.frames.size() >= settings.max_frames || s.position >= cfg_.max_positions) {
            r.truncated = true;
            r.warnings.push_back("frame cap reached before end of audio");
            break;
        }
        Tensor lg = head_(Tensor({1, cfg_.width}, s.last_hidden));
        const int sem = sample_logits(lg.data(), settings, rng);
        ++r.steps;
        if (size_t(sem) == cfg_.eoa()) break;
        auto values = head(s.last_hidden);
        if (values.size() != cfg_.acoustic_dims) throw std::runtime_error("generate: acoustic head returned the wrong size");
        TokenFrame f{uint16_t(sem), {}};
        for (int i : fsq_indices_of(values, cfg_.acoustic_levels)) f.acoustic.push_back(uint8_t(i));
        r.hidden.push_back(s.last_hidden);
        r.frames.push_back(f);
        push_frame(s, f);
    }
    return r;
}

ParamSet Backbone::params() const {
    ParamSet ps;
    if (!cfg_.freeze_text_embeddings) ps.add("embed.text", text_embed_);
    ps.add("embed.special", special_embed_);
    ps.add("embed.audio", audio_embed_);
    ps.add("embed.pos", pos_embed_);
    for (size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(ps, "layer" + std::to_string(i) + ".");
    final_norm_.collect(ps, "final_norm.");
    head_.collect(ps, "head.");
    return ps;
}

ParamSet Backbone::state() const {
    ParamSet ps = params();
    if (cfg_.freeze_text_embeddings) ps.items.insert(ps.items.begin(), {"embed.text", text_embed_});
    return ps;
}

VOX_END
