#pragma once

#include "vox/rng.h"

#include <string>
#include <vector>

VOX_BEGIN

// Periodic "speech" for toy runs: every letter is one codec frame of a
// harmonic tone whose pitch follows the letter, spaces are short pauses.
struct SynthVoice {
    double f0 = 140;          // Hz for the letter 'a'
    double brightness = 0.6;  // harmonic roll-off, higher is brighter
    double gain = 0.3;
};

SynthVoice random_voice(Rng & rng);

// Words of 1-3 letters from a small alphabet.
std::string synth_text(Rng & rng, size_t min_words, size_t max_words);
constexpr const char * kSynthAlphabet = "abcdefgh";

struct SynthUtterance {
    std::string text;
    std::vector<real> wave;  // one frame per character
    std::vector<bool> vad;   // per frame, false on spaces
};

SynthUtterance synth_speech(const std::string & text, const SynthVoice & voice, size_t sample_rate,
                            size_t samples_per_frame, Rng & rng);

VOX_END
