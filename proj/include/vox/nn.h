#pragma once

#include "vox/ops.h"
#include "vox/rng.h"

#include <string>
#include <utility>
#include <vector>

VOX_BEGIN

// Named view of a model's trainable tensors (handles alias the model's own).
struct ParamSet {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string & name, const Tensor & t) { items.emplace_back(name, t); }
    void extend(const std::string & prefix, const ParamSet & other);
    size_t count() const;
    void zero_grad();
    void set_requires_grad(bool flag);
    // copies values (shapes and names must match)
    void copy_values_from(const ParamSet & other);
    bool values_equal(const ParamSet & other) const;
    Tensor * find(const std::string & name);
};

Tensor init_uniform(const Shape & shape, real bound, Rng & rng);
Tensor init_normal(const Shape & shape, real stddev, Rng & rng);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]

    Linear() = default;
    Linear(size_t in, size_t out, Rng & rng, bool with_bias = true);
    Tensor operator()(const Tensor & x) const;
    void collect(ParamSet & ps, const std::string & prefix) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    real eps = real(1e-5);

    LayerNorm() = default;
    explicit LayerNorm(size_t dim, real eps = real(1e-5));
    Tensor operator()(const Tensor & x) const;
    void collect(ParamSet & ps, const std::string & prefix) const;
};

struct Mlp {
    Linear up, down;

    Mlp() = default;
    Mlp(size_t dim, size_t hidden, Rng & rng);
    Tensor operator()(const Tensor & x) const;
    void collect(ParamSet & ps, const std::string & prefix) const;
};

struct TransformerLayerConfig {
    size_t width = 64;
    size_t heads = 1;
    size_t mlp_ratio = 4;
    bool causal = true;
    size_t window = 0;
    bool alibi = false;
    bool qk_norm = false;
    real qk_norm_eps = real(1e-6);
    // LayerScale initial value; <= 0 disables LayerScale
    real layer_scale = 0;
};

// Keys and values of the positions seen so far by one layer (batch 1).
struct KvCache {
    std::vector<real> k, v;  // [len, D]
    size_t len = 0;
    void clear() {
        k.clear();
        v.clear();
        len = 0;
    }
};

// Pre-norm transformer layer over [B, T, D].
struct TransformerLayer {
    TransformerLayerConfig cfg;
    LayerNorm norm1, norm2;
    Linear wq, wk, wv, wo;
    Mlp mlp;
    Tensor scale1, scale2;  // LayerScale, undefined when disabled

    TransformerLayer() = default;
    TransformerLayer(const TransformerLayerConfig & cfg, Rng & rng);
    Tensor operator()(const Tensor & x) const;
    // Inference only: x [1, n, D] are the next n positions after cache.len.
    Tensor forward_cached(const Tensor & x, KvCache & cache) const;
    AttentionSpec attention_spec() const;
    void collect(ParamSet & ps, const std::string & prefix) const;
};

// Geometric ALiBi slopes 2^(-8(i+1)/H).
std::vector<real> alibi_slopes(size_t heads);

struct AdamConfig {
    real lr = real(1e-3);
    real beta1 = real(0.9);
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real clip_norm = 0;  // 0 disables global-norm clipping
};

class Adam {
public:
    Adam(ParamSet params, AdamConfig cfg);
    // applies accumulated gradients then clears them; returns pre-clip grad norm
    real step();
    void zero_grad() { params_.zero_grad(); }
    AdamConfig & config() { return cfg_; }
    size_t steps() const { return t_; }

private:
    ParamSet params_;
    AdamConfig cfg_;
    std::vector<std::vector<real>> m_, v_;
    size_t t_ = 0;
};

VOX_END
