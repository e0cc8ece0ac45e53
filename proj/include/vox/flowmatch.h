#pragma once

#include "vox/backbone.h"
#include "vox/nn.h"

#include <atomic>
#include <functional>

VOX_BEGIN

struct FlowConfig {
    size_t width = 64;          // same as the backbone
    size_t layers = 3;
    size_t heads = 2;
    size_t mlp_ratio = 4;
    size_t acoustic_dims = 36;
    size_t time_embed_dim = 64;
    double cond_dropout = 0.1;

    void validate() const;
};

struct SamplerConfig {
    size_t nfe = 8;
    double cfg_alpha = 1.2;
    size_t levels = 21;

    void validate() const;
    double dt() const { return 1.0 / double(nfe); }
};

// Bidirectional transformer over the three-token sequence (h, t, x_t).
class FlowHead {
public:
    FlowHead() = default;
    FlowHead(const FlowConfig & cfg, Rng & rng);
    FlowHead(const FlowHead & other);
    FlowHead & operator=(const FlowHead & other);

    const FlowConfig & config() const { return cfg_; }
    static constexpr size_t inner_length = 3;

    // x_t [B, dims], t (B values in [0, 1]), h [B, width] -> velocity [B, dims]
    Tensor forward(const Tensor & x_t, const std::vector<real> & t, const Tensor & h) const;
    // number of per-frame network evaluations so far
    size_t evaluations() const { return evals_.load(); }

    ParamSet params() const;

private:
    FlowConfig cfg_;
    Linear h_proj_, t_proj_, x_proj_, out_;
    std::vector<TransformerLayer> layers_;
    LayerNorm norm_;
    mutable std::atomic<size_t> evals_{0};
};

// alpha * v_cond + (1 - alpha) * v_uncond
Tensor cfg_combine(const Tensor & v_cond, const Tensor & v_uncond, double alpha);
// Conditional and unconditional (h = 0) branches in one batched call of 2B rows.
Tensor cfg_velocity(const FlowHead & head, const Tensor & x_t, real t, const Tensor & h, double alpha);

// mean over rows of ||v - (x1 - x0)||^2
Tensor flow_matching_loss(const Tensor & v, const Tensor & x0, const Tensor & x1);

struct FlowDraw {
    Tensor x1;                 // [B, dims] standard normal
    std::vector<real> t;       // [B] uniform
    std::vector<bool> keep_h;  // false: conditioning dropped to zeros
};
FlowDraw draw_flow_noise(size_t rows, size_t dims, double cond_dropout, Rng & rng);

// x_t = (1 - t) x0 + t x1
Tensor interpolate_path(const Tensor & x0, const Tensor & x1, const std::vector<real> & t);

// Conditional flow-matching loss for data rows x0 [B, dims] and conditioning h [B, width].
Tensor fm_loss(const FlowHead & head, const Tensor & x0, const Tensor & h, const FlowDraw & draw);
Tensor fm_loss(const FlowHead & head, const Tensor & x0, const Tensor & h, Rng & rng);

// x_t [B, dims], t, h -> velocity [B, dims]
using VelocityField = std::function<Tensor(const Tensor & x_t, real t, const Tensor & h)>;
VelocityField cfg_field(const FlowHead & head, double alpha);

struct FlowSample {
    Tensor values;             // [B, dims] clamped to [-1, 1]
    std::vector<int> indices;  // FSQ indices, row-major
    size_t steps = 0;
};

// Euler integration from t = 1 (noise x1) down to t = 0, then clamp and discretise.
FlowSample sample_from(const VelocityField & field, const Tensor & x1, const Tensor & h, const SamplerConfig & cfg);
FlowSample sample(const VelocityField & field, const Tensor & h, size_t dims, const SamplerConfig & cfg, Rng & rng);

// ---------------------------------------------------------------------------

struct TtsModel {
    Backbone backbone;
    FlowHead flow;

    TtsModel() = default;
    TtsModel(const BackboneConfig & bcfg, Rng & rng);
    TtsModel(const BackboneConfig & bcfg, const FlowConfig & fcfg, Rng & rng);
    ParamSet params() const;
    ParamSet state() const;
};

FlowConfig flow_config_for(const BackboneConfig & b);

struct TtsLoss {
    Tensor total, semantic, flow;
};

// Semantic cross-entropy plus flow matching on the A2 frames. The flow head sees
// the hidden state of the position that predicts each frame.
TtsLoss tts_loss(const TtsModel & model, const AssembledSequence & seq, Rng & rng, double flow_weight = 1.0);

// Acoustic head for Backbone::generate backed by the CFG Euler sampler.
AcousticHead make_acoustic_head(const FlowHead & flow, const SamplerConfig & cfg, Rng & rng);

// ---------------------------------------------------------------------------
// Two-Gaussian toy problem in 2-D with the cluster as conditioning.

struct ClusterTask {
    std::vector<std::pair<double, double>> centres{{-0.5, -0.4}, {0.5, 0.4}};
    double sigma = 0.08;
};

// Conditioning rows [labels, width]: cluster k lights up the k-th slice of the width.
Tensor cluster_condition(const ClusterTask & task, size_t width, const std::vector<int> & labels);

struct ClusterTraining {
    size_t steps = 2000;
    size_t batch = 128;
    double lr = 2e-3;
};

// Trains a head with dims = 2; returns the per-step losses.
std::vector<double> train_cluster_head(FlowHead & head, const ClusterTask & task, const ClusterTraining & tr, Rng & rng);

struct ClusterEval {
    double within_3sigma = 0;  // nearest centre closer than 3 sigma
    double accuracy = 0;       // nearest centre is the conditioned one
};
ClusterEval evaluate_cluster_head(const FlowHead & head, const ClusterTask & task, size_t samples,
                                  const SamplerConfig & cfg, Rng & rng);

VOX_END
