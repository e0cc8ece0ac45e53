#include "vox/nn.h"

#include <cmath>
#include <limits>
#include <stdexcept>

VOX_BEGIN

void ParamSet::extend(const std::string & prefix, const ParamSet & other) {
    for (const auto & [name, t] : other.items) items.emplace_back(prefix + name, t);
}

size_t ParamSet::count() const {
    size_t n = 0;
    for (const auto & [_, t] : items) n += t.numel();
    return n;
}

void ParamSet::zero_grad() {
    for (auto & [_, t] : items) t.zero_grad();
}

void ParamSet::set_requires_grad(bool flag) {
    for (auto & [_, t] : items) t.set_requires_grad(flag);
}

void ParamSet::copy_values_from(const ParamSet & other) {
    if (other.items.size() != items.size()) throw std::invalid_argument("ParamSet: parameter count mismatch");
    for (size_t i = 0; i < items.size(); ++i) {
        auto & dst = items[i].second;
        const auto & src = other.items[i].second;
        if (items[i].first != other.items[i].first || dst.shape() != src.shape()) {
            throw std::invalid_argument("ParamSet: mismatch at " + items[i].first);
        }
        auto s = src.data();
        std::copy(s.begin(), s.end(), dst.mutable_data().begin());
    }
}

bool ParamSet::values_equal(const ParamSet & other) const {
    if (other.items.size() != items.size()) return false;
    for (size_t i = 0; i < items.size(); ++i) {
        auto a = items[i].second.data(), b = other.items[i].second.data();
        if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin())) return false;
    }
    return true;
}

Tensor * ParamSet::find(const std::string & name) {
    for (auto & [n, t] : items)
        if (n == name) return &t;
    return nullptr;
}

Tensor init_uniform(const Shape & shape, real bound, Rng & rng) {
    return Tensor(shape, rng.uniform_vec(shape_numel(shape), -bound, bound), true);
}

Tensor init_normal(const Shape & shape, real stddev, Rng & rng) {
    return Tensor(shape, rng.normal_vec(shape_numel(shape), stddev), true);
}

Linear::Linear(size_t in, size_t out, Rng & rng, bool with_bias) {
    const real bound = real(1) / std::sqrt(real(in));
    weight = init_uniform({in, out}, bound, rng);
    if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor & x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
}

void Linear::collect(ParamSet & ps, const std::string & prefix) const {
    ps.add(prefix + "weight", weight);
    if (bias.defined()) ps.add(prefix + "bias", bias);
}

LayerNorm::LayerNorm(size_t dim, real eps_) : eps(eps_) {
    gamma = Tensor::full({dim}, real(1), true);
    beta = Tensor::zeros({dim}, true);
}

Tensor LayerNorm::operator()(const Tensor & x) const {
    return add_bias(mul_bias(layer_norm_last(x, eps), gamma), beta);
}

void LayerNorm::collect(ParamSet & ps, const std::string & prefix) const {
    ps.add(prefix + "gamma", gamma);
    ps.add(prefix + "beta", beta);
}

Mlp::Mlp(size_t dim, size_t hidden, Rng & rng) : up(dim, hidden, rng), down(hidden, dim, rng) {}

Tensor Mlp::operator()(const Tensor & x) const { return down(silu(up(x))); }

void Mlp::collect(ParamSet & ps, const std::string & prefix) const {
    up.collect(ps, prefix + "up.");
    down.collect(ps, prefix + "down.");
}

std::vector<real> alibi_slopes(size_t heads) {
    std::vector<real> s(heads);
    for (size_t i = 0; i < heads; ++i) s[i] = real(std::pow(2.0, -8.0 * double(i + 1) / double(heads)));
    return s;
}

TransformerLayer::TransformerLayer(const TransformerLayerConfig & c, Rng & rng)
    : cfg(c),
      norm1(c.width),
      norm2(c.width),
      wq(c.width, c.width, rng, false),
      wk(c.width, c.width, rng, false),
      wv(c.width, c.width, rng, false),
      wo(c.width, c.width, rng, false),
      mlp(c.width, c.width * c.mlp_ratio, rng) {
    if (c.heads == 0 || c.width % c.heads != 0) throw std::invalid_argument("TransformerLayer: width % heads != 0");
    if (c.layer_scale > 0) {
        scale1 = Tensor::full({c.width}, c.layer_scale, true);
        scale2 = Tensor::full({c.width}, c.layer_scale, true);
    }
}

AttentionSpec TransformerLayer::attention_spec() const {
    AttentionSpec spec;
    spec.heads = cfg.heads;
    spec.causal = cfg.causal;
    spec.window = cfg.window;
    if (cfg.alibi) spec.alibi = alibi_slopes(cfg.heads);
    return spec;
}

Tensor TransformerLayer::operator()(const Tensor & x) const {
    const size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
    Tensor h = norm1(x);
    Tensor q = wq(h), k = wk(h), v = wv(h);
    if (cfg.qk_norm) {
        const Shape split{B, T, cfg.heads, D / cfg.heads};
        q = reshape(rms_norm_last(reshape(q, split), cfg.qk_norm_eps), {B, T, D});
        k = reshape(rms_norm_last(reshape(k, split), cfg.qk_norm_eps), {B, T, D});
    }
    Tensor a = wo(attention(q, k, v, attention_spec()));
    if (scale1.defined()) a = mul_bias(a, scale1);
    Tensor y = add(x, a);
    Tensor m = mlp(norm2(y));
    if (scale2.defined()) m = mul_bias(m, scale2);
    return add(y, m);
}

Tensor TransformerLayer::forward_cached(const Tensor & x, KvCache & cache) const {
    if (x.ndim() != 3 || x.dim(0) != 1) throw std::invalid_argument("forward_cached: expected [1, n, D]");
    NoGradGuard ng;
    const size_t n = x.dim(1), D = x.dim(2), H = cfg.heads, dh = D / H;
    Tensor h = norm1(x);
    Tensor q = wq(h), k = wk(h), v = wv(h);
    if (cfg.qk_norm) {
        const Shape split{1, n, H, dh};
        q = reshape(rms_norm_last(reshape(q, split), cfg.qk_norm_eps), {1, n, D});
        k = reshape(rms_norm_last(reshape(k, split), cfg.qk_norm_eps), {1, n, D});
    }
    const size_t start = cache.len;
    cache.k.insert(cache.k.end(), k.data().begin(), k.data().end());
    cache.v.insert(cache.v.end(), v.data().begin(), v.data().end());
    cache.len += n;
    const AttentionSpec spec = attention_spec();
    const real inv_sqrt = real(1) / std::sqrt(real(dh));
    auto Q = q.data();
    std::vector<real> out(n * D, real(0));
    std::vector<real> scores(cache.len);
    for (size_t i = 0; i < n; ++i) {
        const size_t t = start + i;
        for (size_t hd = 0; hd < H; ++hd) {
            const real * qt = Q.data() + i * D + hd * dh;
            real mx = -std::numeric_limits<real>::infinity();
            for (size_t j = 0; j < cache.len; ++j) {
                const size_t dist = t > j ? t - j : j - t;
                scores[j] = -std::numeric_limits<real>::infinity();
                if ((spec.causal && j > t) || (spec.window > 0 && dist >= spec.window)) continue;
                const real * kj = cache.k.data() + j * D + hd * dh;
                double s = 0;
                for (size_t c = 0; c < dh; ++c) s += double(qt[c]) * kj[c];
                real sc = real(s) * inv_sqrt;
                if (!spec.alibi.empty()) sc -= spec.alibi[hd] * real(dist);
                scores[j] = sc;
                mx = std::max(mx, sc);
            }
            double z = 0;
            for (size_t j = 0; j < cache.len; ++j) {
                if (scores[j] == -std::numeric_limits<real>::infinity()) continue;
                z += std::exp(double(scores[j] - mx));
            }
            real * o = out.data() + i * D + hd * dh;
            for (size_t j = 0; j < cache.len; ++j) {
                if (scores[j] == -std::numeric_limits<real>::infinity()) continue;
                const real p = real(std::exp(double(scores[j] - mx)) / z);
                const real * vj = cache.v.data() + j * D + hd * dh;
                for (size_t c = 0; c < dh; ++c) o[c] += p * vj[c];
            }
        }
    }
    Tensor a = wo(Tensor({1, n, D}, out));
    if (scale1.defined()) a = mul_bias(a, scale1);
    Tensor y = add(x, a);
    Tensor m = mlp(norm2(y));
    if (scale2.defined()) m = mul_bias(m, scale2);
    return add(y, m);
}

void TransformerLayer::collect(ParamSet & ps, const std::string & prefix) const {
    norm1.collect(ps, prefix + "norm1.");
    wq.collect(ps, prefix + "wq.");
    wk.collect(ps, prefix + "wk.");
    wv.collect(ps, prefix + "wv.");
    wo.collect(ps, prefix + "wo.");
    norm2.collect(ps, prefix + "norm2.");
    mlp.collect(ps, prefix + "mlp.");
    if (scale1.defined()) {
        ps.add(prefix + "scale1", scale1);
        ps.add(prefix + "scale2", scale2);
    }
}

Adam::Adam(ParamSet params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto & [_, t] : params_.items) {
        m_.emplace_back(t.numel(), real(0));
        v_.emplace_back(t.numel(), real(0));
    }
}

real Adam::step() {
    ++t_;
    double sq = 0;
    for (auto & [_, t] : params_.items) {
        if (!t.has_grad()) continue;
        for (real g : t.grad()) sq += double(g) * g;
    }
    const real norm = real(std::sqrt(sq));
    real clip = 1;
    if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) clip = cfg_.clip_norm / norm;

    const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
    const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
    for (size_t p = 0; p < params_.items.size(); ++p) {
        auto & t = params_.items[p].second;
        if (!t.has_grad()) continue;
        auto g = t.grad();
        auto w = t.mutable_data();
        auto & m = m_[p];
        auto & v = v_[p];
        for (size_t i = 0; i < w.size(); ++i) {
            const real gi = g[i] * clip;
            m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
            const double mh = m[i] / bc1, vh = v[i] / bc2;
            w[i] -= real(cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
        }
    }
    params_.zero_grad();
    return norm;
}

VOX_END
