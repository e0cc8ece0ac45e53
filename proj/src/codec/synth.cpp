#include "vox/synth.h"

#include <cmath>
#include <numbers>
#include <stdexcept>

VOX_BEGIN

SynthVoice random_voice(Rng & rng) {
    SynthVoice v;
    v.f0 = rng.uniform(100, 220);
    v.brightness = rng.uniform(0.4, 0.8);
    v.gain = rng.uniform(0.2, 0.4);
    return v;
}

std::string synth_text(Rng & rng, size_t min_words, size_t max_words) {
    if (min_words == 0 || max_words < min_words) throw std::invalid_argument("synth_text: bad word range");
    const std::string alphabet = kSynthAlphabet;
    const size_t words = min_words + rng.uniform_int(max_words - min_words + 1);
    std::string out;
    for (size_t w = 0; w < words; ++w) {
        if (w) out += ' ';
        const size_t len = 1 + rng.uniform_int(3);
        for (size_t i = 0; i < len; ++i) out += alphabet[rng.uniform_int(alphabet.size())];
    }
    return out;
}

SynthUtterance synth_speech(const std::string & text, const SynthVoice & voice, size_t sample_rate,
                            size_t samples_per_frame, Rng & rng) {
    if (sample_rate == 0 || samples_per_frame == 0) throw std::invalid_argument("synth_speech: zero rate");
    SynthUtterance u;
    u.text = text;
    u.wave.assign(text.size() * samples_per_frame, 0);
    const double sr = double(sample_rate);
    const size_t ramp = samples_per_frame / 10;
    double phase = 0;
    for (size_t c = 0; c < text.size(); ++c) {
        const bool voiced = text[c] != ' ';
        u.vad.push_back(voiced);
        const size_t base = c * samples_per_frame;
        if (!voiced) {
            for (size_t i = 0; i < samples_per_frame; ++i) u.wave[base + i] = real(0.002 * rng.normal());
            phase = 0;
            continue;
        }
        const int letter = std::max(0, text[c] - 'a');
        const double f0 = voice.f0 * std::pow(2.0, 2.0 * letter / 12.0);
        const bool word_start = c == 0 || text[c - 1] == ' ';
        const bool word_end = c + 1 == text.size() || text[c + 1] == ' ';
        for (size_t i = 0; i < samples_per_frame; ++i) {
            double s = 0;
            for (int k = 1; k <= 10 && k * f0 < sr / 2; ++k) s += std::exp(-(1 - voice.brightness) * k) * std::sin(k * phase);
            phase += 2 * std::numbers::pi * f0 / sr;
            double env = 1;
            if (word_start && i < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * double(i) / double(ramp));
            if (word_end && i + ramp >= samples_per_frame)
                env = 0.5 - 0.5 * std::cos(std::numbers::pi * double(samples_per_frame - 1 - i) / double(ramp));
            u.wave[base + i] = real(voice.gain * 0.5 * env * s + 0.002 * rng.normal());
        }
    }
    return u;
}

VOX_END
