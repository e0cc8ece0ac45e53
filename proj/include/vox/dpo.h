#pragma once

#include "vox/codec.h"
#include "vox/flowmatch.h"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

VOX_BEGIN

struct DPOConfig {
    double beta_semantic = 0.1;
    double beta_acoustic = 0.5;
    double lr = 1e-4;  // 8e-8 at full scale
    double semantic_weight = 1.0;
    double flow_weight = 1.0;
    bool pretrain_mixture = false;
    double mixture_ratio = 0.5;  // fraction of batches that are pretraining batches
    size_t epochs = 1;
    bool average_logprobs = false;  // semantic term only; sums by default

    void validate() const;
};

struct PreferencePair {
    std::string id;
    std::vector<TokenFrame> prompt;  // voice reference A1
    std::vector<int> text;           // T2
    std::vector<TokenFrame> winner, loser;

    void validate() const;
};

// One t and one noise row per sequence position, shared by winner, loser,
// policy and reference.
struct NoisePlan {
    std::vector<real> t;
    Tensor x1;  // [n, dims]

    size_t length() const { return t.size(); }
};
NoisePlan draw_noise_plan(size_t positions, size_t dims, Rng & rng);

// -log sigmoid(margin)
Tensor dpo_sigmoid_loss(const Tensor & margin);

// Sum over response positions (A2 and the EOA decision) of log p(target).
Tensor sequence_logprob(const Tensor & logits, const AssembledSequence & seq, bool average = false);

// beta * ((pw - pl) - (rw - rl))
Tensor semantic_dpo_margin(const Tensor & policy_w, const Tensor & policy_l, const Tensor & ref_w, const Tensor & ref_l,
                           double beta);
Tensor semantic_dpo_loss(const Tensor & policy_w, const Tensor & policy_l, const Tensor & ref_w, const Tensor & ref_l,
                         double beta);

// Sum over rows i < n of ||v(x_{i,t_i}, t_i | h_i) - (x1_i - x0_i)||^2 using plan row i.
Tensor flow_error_sum(const FlowHead & head, const Tensor & x0, const Tensor & h, const NoisePlan & plan);
// winner sum minus loser sum, no length normalisation
Tensor flow_dpo_delta(const FlowHead & head, const Tensor & x0_w, const Tensor & h_w, const Tensor & x0_l,
                      const Tensor & h_l, const NoisePlan & plan);
// -beta (delta_policy - delta_ref)
Tensor flow_dpo_margin(const Tensor & delta_policy, const Tensor & delta_ref, double beta);
Tensor flow_dpo_loss(const Tensor & delta_policy, const Tensor & delta_ref, double beta);

// FSQ levels of the acoustic indices, [n, dims]
Tensor acoustic_targets(const std::vector<TokenFrame> & frames, size_t levels);

struct DpoTerms {
    Tensor semantic, flow, total;
    double semantic_margin = 0, flow_margin = 0;
};

// Both DPO terms for one pair. The reference runs without a tape.
DpoTerms pair_dpo_loss(const TtsModel & policy, const TtsModel & reference, const PreferencePair & pair,
                       const NoisePlan & plan, const DPOConfig & cfg);

// Independent copy with every tensor frozen.
TtsModel frozen_clone(const TtsModel & model);

struct DpoStepReport {
    double semantic = 0, flow = 0, pretrain = 0, total = 0;
    double semantic_margin = 0, flow_margin = 0;  // batch means
    size_t step = 0;
    bool pretrain_batch = false;
};

class DpoTrainer {
public:
    DpoTrainer(TtsModel & policy, const DPOConfig & cfg, uint64_t seed);

    // One optimiser step on a batch of pairs (optionally mixed with pretraining samples).
    DpoStepReport step(const std::vector<PreferencePair> & batch,
                       const std::vector<AssembledSequence> * pretrain = nullptr);
    // Epoch loop: pairs in order, pretraining batches interleaved at mixture_ratio.
    std::vector<DpoStepReport> train(const std::vector<PreferencePair> & pairs, size_t batch_size,
                                     const std::vector<AssembledSequence> & pretrain = {});

    // Mean margins over pairs with a noise plan fixed by `seed`.
    std::pair<double, double> mean_margins(const std::vector<PreferencePair> & pairs, uint64_t seed) const;

    const TtsModel & reference() const { return reference_; }
    const DPOConfig & config() const { return cfg_; }

private:
    TtsModel & policy_;
    TtsModel reference_;
    DPOConfig cfg_;
    Adam opt_;
    Rng rng_;
    size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Rejection-sampling pair builder

struct PairPrompt {
    std::string id;
    std::vector<TokenFrame> voice;
    std::vector<int> text;
};

struct Candidate {
    std::string id;
    std::vector<TokenFrame> frames;
    std::vector<real> wave;  // optional decoded audio
    size_t text_length = 0;
};

struct Scorer {
    std::string name;
    bool higher_is_better = true;
    double weight = 1.0;
    std::optional<double> gate;  // the winner must reach this raw score
    // throws or returns a non-finite value when the sample cannot be scored
    std::function<double(const Candidate &)> score;
};

using CandidateGenerator = std::function<Candidate(const PairPrompt & prompt, size_t index, Rng & rng)>;

struct PairBuildResult {
    std::vector<PreferencePair> pairs;
    std::vector<std::string> log;  // excluded samples, dropped prompts
};

// Weighted sum of rank-normalised scores (1 = best); ties broken by scorer order.
std::vector<double> combined_scores(const std::vector<std::vector<double>> & raw, const std::vector<Scorer> & scorers);

PairBuildResult build_pairs(const std::vector<PairPrompt> & prompts, const CandidateGenerator & generate,
                            size_t num_samples, const std::vector<Scorer> & scorers, Rng & rng);

// Built-in scorers.
double rms_taper_db(std::span<const real> wave);  // 20 log10(rms(last quarter) / rms(first quarter))
Scorer loudness_consistency_scorer(double weight = 1.0);
Scorer duration_scorer(double frames_per_char = 0.8, double weight = 1.0);
Scorer repetition_scorer(double weight = 1.0);
// Scores keyed by candidate id, one "id score" pair per line.
std::map<std::string, double> read_score_file(const std::filesystem::path & path);
Scorer external_scorer(const std::string & name, std::map<std::string, double> scores, bool higher_is_better,
                       double weight = 1.0);

// Candidates from the TTS model; audio is decoded when a codec is given.
CandidateGenerator tts_candidate_generator(const TtsModel & model, const Codec * codec, SamplerSettings settings,
                                           SamplerConfig flow_sampler);

// JSON lines; token dumps live next to the index as <id>.{prompt,winner,loser}.tok
void save_pairs(const std::vector<PreferencePair> & pairs, const std::filesystem::path & jsonl,
                const TokenLayout & layout);
std::vector<PreferencePair> load_pairs(const std::filesystem::path & jsonl, const TokenLayout & layout);

VOX_END
