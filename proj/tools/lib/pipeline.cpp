#include "pipeline.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace voxtools {

ToyCorpus make_corpus(const DataConfig & data, const CodecConfig & codec, Rng & rng) {
    ToyCorpus c;
    Rng vr = rng.split("voices"), tr = rng.split("text"), nr = rng.split("noise");
    const size_t spf = codec.samples_per_frame();
    for (size_t s = 0; s < data.speakers; ++s) {
        c.voices.push_back(random_voice(vr));
        auto text = synth_text(tr, data.prompt_words, data.prompt_words);
        c.prompts.push_back(synth_speech(text, c.voices.back(), codec.sample_rate, spf, nr));
    }
    for (size_t i = 0; i < data.utterances; ++i) {
        const size_t spk = i % data.speakers;
        auto text = synth_text(tr, data.min_words, data.max_words);
        c.items.push_back({spk, synth_speech(text, c.voices[spk], codec.sample_rate, spf, nr)});
    }
    return c;
}

Tensor teacher_table(size_t asr_dim, uint64_t seed) {
    Rng rng = Rng(seed).split("teacher");
    return Tensor({256, asr_dim}, rng.normal_vec(256 * asr_dim));
}

CodecBatch sample_codec_batch(const ToyCorpus & corpus, const CodecConfig & cfg, const Tensor & teacher, size_t batch,
                              size_t frames, Rng & rng) {
    const size_t spf = cfg.samples_per_frame(), len = frames * spf, d = cfg.asr_dim;
    if (teacher.dim(1) != d) throw std::invalid_argument("teacher width does not match asr_dim");
    CodecBatch b;
    std::vector<real> waves(batch * len, 0);
    for (size_t i = 0; i < batch; ++i) {
        const auto & u = corpus.items[rng.uniform_int(corpus.items.size())].audio;
        const size_t n = u.text.size();
        const size_t start = n > frames ? rng.uniform_int(n - frames + 1) : 0;
        const size_t used = std::min(frames, n - start);
        std::copy_n(u.wave.begin() + long(start * spf), used * spf, waves.begin() + long(i * len));
        std::vector<real> align(used * frames, 0), hidden(used * d);
        for (size_t t = 0; t < used; ++t) {
            align[t * frames + t] = 1;
            const auto ch = size_t(static_cast<unsigned char>(u.text[start + t]));
            std::copy_n(teacher.data().begin() + long(ch * d), d, hidden.begin() + long(t * d));
        }
        b.asr.push_back({Tensor({used, frames}, align), Tensor({used, d}, hidden)});
    }
    b.waves = Tensor({batch, len}, waves);
    return b;
}

void train_codec(Codec & codec, MultiResolutionDiscriminator & disc, const ToyCorpus & corpus, const RunConfig & cfg,
                 const LossLog & log) {
    CodecTrainerConfig tc;
    tc.generator.lr = real(cfg.train.codec_lr);
    tc.discriminator.lr = real(cfg.train.codec_lr);
    CodecTrainer trainer(codec, disc, tc, Rng(cfg.seed).split("codec-train").seed());
    Rng rng = Rng(cfg.seed).split("codec-batches");
    const Tensor teacher = teacher_table(cfg.codec.asr_dim, cfg.seed);
    for (size_t step = 0; step < cfg.train.codec_steps; ++step) {
        auto batch = sample_codec_batch(corpus, cfg.codec, teacher, cfg.train.codec_batch, cfg.train.codec_frames, rng);
        auto r = trainer.step(batch);
        if (!std::isfinite(r.total)) throw std::runtime_error("codec training diverged at step " + std::to_string(step));
        if (log && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.codec_steps)) {
            log(Json{{"step", step},     {"total", r.total}, {"feature", r.feature}, {"asr", r.asr},
                     {"l1", r.l1},       {"stft", r.stft},   {"commit", r.commit},   {"disc", r.disc},
                     {"gamma_weight", r.gamma_weight}});
        }
    }
}

std::vector<TrainingSample> tokenize_corpus(const Codec & codec, const ToyCorpus & corpus) {
    NoGradGuard ng;
    std::vector<std::vector<TokenFrame>> refs;
    for (const auto & p : corpus.prompts) refs.push_back(codec.encode(p.wave));
    std::vector<TrainingSample> out;
    for (const auto & it : corpus.items) {
        TrainingSample s;
        s.a1 = refs[it.speaker];
        s.t2 = byte_tokens(it.audio.text);
        s.a2 = codec.encode(it.audio.wave);
        s.vad = it.audio.vad;
        s.vad.resize(s.a2.size(), true);
        out.push_back(std::move(s));
    }
    return out;
}

void train_tts(TtsModel & model, const std::vector<TrainingSample> & samples, const RunConfig & cfg, const LossLog & log) {
    if (samples.empty()) throw std::invalid_argument("train_tts: no samples");
    std::vector<AssembledSequence> seqs;
    for (const auto & s : samples) seqs.push_back(model.backbone.assemble(s));
    Adam opt(model.params(), {.lr = real(cfg.train.tts_lr), .clip_norm = real(1)});
    Rng rng = Rng(cfg.seed).split("tts-train");
    for (size_t step = 0; step < cfg.train.tts_steps; ++step) {
        Tensor total = Tensor::scalar(0);
        double sem = 0, flow = 0;
        for (size_t i = 0; i < cfg.train.tts_batch; ++i) {
            auto l = tts_loss(model, seqs[rng.uniform_int(seqs.size())], rng);
            total = add(total, l.total);
            sem += l.semantic.item();
            flow += l.flow.item();
        }
        const real inv = real(1) / real(cfg.train.tts_batch);
        total = scale(total, inv);
        const double value = total.item();
        if (!std::isfinite(value)) throw std::runtime_error("tts training diverged at step " + std::to_string(step));
        backward(total);
        opt.step();
        if (log && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.tts_steps)) {
            log(Json{{"step", step}, {"total", value}, {"semantic", sem * inv}, {"flow", flow * inv}});
        }
    }
}

Synthesis synthesize(const TtsModel & model, const Codec & codec, std::span<const real> prompt_wave, const std::string & text,
                     const RunConfig & cfg, Rng & rng) {
    NoGradGuard ng;
    Synthesis s;
    auto prompt = codec.encode(prompt_wave);
    Rng head_rng = rng.split("acoustic");
    auto head = make_acoustic_head(model.flow, cfg.sampler, head_rng);
    s.result = model.backbone.generate(prompt, byte_tokens(text), cfg.decoding, head, rng);
    if (!s.result.frames.empty()) s.wave = codec.decode(s.result.frames);
    return s;
}

}  // namespace voxtools
