#include "vox/flowmatch.h"

#include "vox/errors.h"
#include "vox/signal.h"

#include <cmath>
#include <sstream>
#include <stdexcept>

VOX_BEGIN

void FlowConfig::validate() const {
    if (width == 0 || heads == 0 || width % heads) throw ConfigError("flow: width must be a positive multiple of heads");
    if (layers == 0 || acoustic_dims == 0) throw ConfigError("flow: layers and acoustic_dims must be positive");
    if (time_embed_dim == 0 || time_embed_dim % 2) throw ConfigError("flow: time_embed_dim must be even");
    if (cond_dropout < 0 || cond_dropout > 1) throw ConfigError("flow: cond_dropout must be in [0, 1]");
}

void SamplerConfig::validate() const {
    if (nfe == 0) throw ConfigError("sampler: nfe must be >= 1");
    if (cfg_alpha < 0) throw ConfigError("sampler: cfg_alpha must be >= 0");
    if (levels < 2) throw ConfigError("sampler: levels must be >= 2");
}

FlowHead::FlowHead(const FlowConfig & cfg, Rng & rng_in) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = rng_in.split("flow");
    h_proj_ = Linear(cfg_.width, cfg_.width, rng);
    t_proj_ = Linear(cfg_.time_embed_dim, cfg_.width, rng);
    x_proj_ = Linear(cfg_.acoustic_dims, cfg_.width, rng);
    TransformerLayerConfig lc;
    lc.width = cfg_.width;
    lc.heads = cfg_.heads;
    lc.mlp_ratio = cfg_.mlp_ratio;
    lc.causal = false;
    for (size_t i = 0; i < cfg_.layers; ++i) layers_.emplace_back(lc, rng);
    norm_ = LayerNorm(cfg_.width);
    out_ = Linear(cfg_.width, cfg_.acoustic_dims, rng);
}

FlowHead::FlowHead(const FlowHead & o)
    : cfg_(o.cfg_), h_proj_(o.h_proj_), t_proj_(o.t_proj_), x_proj_(o.x_proj_), out_(o.out_), layers_(o.layers_),
      norm_(o.norm_), evals_(o.evals_.load()) {}

FlowHead & FlowHead::operator=(const FlowHead & o) {
    cfg_ = o.cfg_;
    h_proj_ = o.h_proj_;
    t_proj_ = o.t_proj_;
    x_proj_ = o.x_proj_;
    out_ = o.out_;
    layers_ = o.layers_;
    norm_ = o.norm_;
    evals_ = o.evals_.load();
    return *this;
}

Tensor FlowHead::forward(const Tensor & x_t, const std::vector<real> & t, const Tensor & h) const {
    const size_t b = x_t.dim(0), w = cfg_.width;
    if (x_t.ndim() != 2 || x_t.dim(1) != cfg_.acoustic_dims) throw std::invalid_argument("flow: x_t must be [B, dims]");
    if (h.ndim() != 2 || h.dim(0) != b || h.dim(1) != w) throw std::invalid_argument("flow: h must be [B, width]");
    if (t.size() != b) throw std::invalid_argument("flow: need one t per row");
    std::vector<real> temb;
    temb.reserve(b * cfg_.time_embed_dim);
    for (real ti : t) {
        if (!(ti >= 0 && ti <= 1)) throw std::invalid_argument("flow: t must lie in [0, 1]");
        auto e = sinusoidal_embed_values(ti, cfg_.time_embed_dim);
        temb.insert(temb.end(), e.begin(), e.end());
    }
    Tensor th = t_proj_(Tensor({b, cfg_.time_embed_dim}, temb));
    Tensor seq = concat({reshape(h_proj_(h), {b, 1, w}), reshape(th, {b, 1, w}), reshape(x_proj_(x_t), {b, 1, w})}, 1);
    for (const auto & l : layers_) seq = l(seq);
    evals_ += b;
    return out_(norm_(reshape(slice(seq, 1, 2, 1), {b, w})));
}

ParamSet FlowHead::params() const {
    ParamSet ps;
    h_proj_.collect(ps, "h_proj.");
    t_proj_.collect(ps, "t_proj.");
    x_proj_.collect(ps, "x_proj.");
    for (size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(ps, "layer" + std::to_string(i) + ".");
    norm_.collect(ps, "norm.");
    out_.collect(ps, "out.");
    return ps;
}

Tensor cfg_combine(const Tensor & v_cond, const Tensor & v_uncond, double alpha) {
    return add(scale(v_cond, real(alpha)), scale(v_uncond, real(1 - alpha)));
}

Tensor cfg_velocity(const FlowHead & head, const Tensor & x_t, real t, const Tensor & h, double alpha) {
    const size_t b = x_t.dim(0);
    Tensor xx = concat({x_t, x_t}, 0);
    Tensor hh = concat({h, Tensor::zeros(h.shape())}, 0);
    Tensor v = head.forward(xx, std::vector<real>(2 * b, t), hh);
    return cfg_combine(slice(v, 0, 0, b), slice(v, 0, b, b), alpha);
}

Tensor flow_matching_loss(const Tensor & v, const Tensor & x0, const Tensor & x1) {
    if (v.shape() != x0.shape() || x0.shape() != x1.shape() || v.ndim() != 2) {
        throw std::invalid_argument("flow_matching_loss: v, x0, x1 must be equal [B, dims]");
    }
    return scale(sum(square(sub(v, sub(x1, x0)))), real(1) / real(v.dim(0)));
}

FlowDraw draw_flow_noise(size_t rows, size_t dims, double cond_dropout, Rng & rng) {
    FlowDraw d;
    d.x1 = Tensor({rows, dims}, rng.normal_vec(rows * dims));
    for (size_t i = 0; i < rows; ++i) {
        d.t.push_back(real(rng.uniform()));
        d.keep_h.push_back(!rng.bernoulli(cond_dropout));
    }
    return d;
}

Tensor interpolate_path(const Tensor & x0, const Tensor & x1, const std::vector<real> & t) {
    const size_t b = x0.dim(0), d = x0.dim(1);
    std::vector<real> a(b * d), c(b * d);
    for (size_t i = 0; i < b; ++i)
        for (size_t j = 0; j < d; ++j) {
            a[i * d + j] = 1 - t[i];
            c[i * d + j] = t[i];
        }
    return add(mul(x0, Tensor({b, d}, a)), mul(x1, Tensor({b, d}, c)));
}

Tensor fm_loss(const FlowHead & head, const Tensor & x0, const Tensor & h, const FlowDraw & draw) {
    const size_t b = x0.dim(0), w = h.dim(1);
    std::vector<real> keep(b * w);
    for (size_t i = 0; i < b; ++i) std::fill_n(keep.begin() + long(i * w), w, draw.keep_h[i] ? real(1) : real(0));
    Tensor hd = mul(h, Tensor({b, w}, keep));
    Tensor x0c = detach(x0);
    Tensor v = head.forward(interpolate_path(x0c, draw.x1, draw.t), draw.t, hd);
    return flow_matching_loss(v, x0c, draw.x1);
}

Tensor fm_loss(const FlowHead & head, const Tensor & x0, const Tensor & h, Rng & rng) {
    return fm_loss(head, x0, h, draw_flow_noise(x0.dim(0), x0.dim(1), head.config().cond_dropout, rng));
}

VelocityField cfg_field(const FlowHead & head, double alpha) {
    return [&head, alpha](const Tensor & x, real t, const Tensor & h) { return cfg_velocity(head, x, t, h, alpha); };
}

FlowSample sample_from(const VelocityField & field, const Tensor & x1, const Tensor & h, const SamplerConfig & cfg) {
    cfg.validate();
    NoGradGuard ng;
    Tensor x = x1.clone();
    const real dt = real(cfg.dt());
    FlowSample out;
    for (size_t i = 0; i < cfg.nfe; ++i) {
        const real t = real(1.0 - double(i) / double(cfg.nfe));
        Tensor v = field(x, t, h);
        size_t bad = 0;
        for (real e : v.data()) bad += !std::isfinite(double(e));
        if (bad) {
            std::ostringstream os;
            os << "flow sampler: " << bad << " non-finite velocity entries at step " << i << " (t = " << t << ")";
            throw std::runtime_error(os.str());
        }
        x = sub(x, scale(v, dt));
        ++out.steps;
    }
    std::vector<real> vals = x.to_vector();
    for (auto & e : vals) e = std::clamp(e, real(-1), real(1));
    out.indices = fsq_indices_of(vals, cfg.levels);
    out.values = Tensor(x.shape(), vals);
    return out;
}

FlowSample sample(const VelocityField & field, const Tensor & h, size_t dims, const SamplerConfig & cfg, Rng & rng) {
    const size_t b = h.dim(0);
    return sample_from(field, Tensor({b, dims}, rng.normal_vec(b * dims)), h, cfg);
}

// ---------------------------------------------------------------------------

FlowConfig flow_config_for(const BackboneConfig & b) {
    FlowConfig f;
    f.width = b.width;
    f.heads = b.heads;
    f.mlp_ratio = b.mlp_ratio;
    f.acoustic_dims = b.acoustic_dims;
    f.time_embed_dim = b.width % 2 ? b.width + 1 : b.width;
    return f;
}

TtsModel::TtsModel(const BackboneConfig & bcfg, Rng & rng) : backbone(bcfg, rng), flow(flow_config_for(bcfg), rng) {}

TtsModel::TtsModel(const BackboneConfig & bcfg, const FlowConfig & fcfg, Rng & rng) : backbone(bcfg, rng), flow(fcfg, rng) {
    if (fcfg.width != bcfg.width || fcfg.acoustic_dims != bcfg.acoustic_dims) {
        throw ConfigError("tts model: flow head width and dims must match the backbone");
    }
}

ParamSet TtsModel::params() const {
    ParamSet ps;
    ps.extend("backbone.", backbone.params());
    ps.extend("flow.", flow.params());
    return ps;
}

ParamSet TtsModel::state() const {
    ParamSet ps;
    ps.extend("backbone.", backbone.state());
    ps.extend("flow.", flow.params());
    return ps;
}

TtsLoss tts_loss(const TtsModel & model, const AssembledSequence & seq, Rng & rng, double flow_weight) {
    const auto & bc = model.backbone.config();
    Tensor hidden = model.backbone.hidden(seq);
    TtsLoss l;
    l.semantic = semantic_loss(model.backbone.logits(hidden), seq.targets, seq.weights);
    const size_t n = seq.sample.a2.size();
    if (n == 0) {
        l.flow = Tensor::scalar(0);
    } else {
        std::vector<real> x0;
        for (const auto & f : seq.sample.a2)
            for (uint8_t a : f.acoustic) x0.push_back(fsq_level(a, bc.acoustic_levels));
        Tensor h = slice(hidden, 0, seq.repeat_pos(), n);
        l.flow = fm_loss(model.flow, Tensor({n, bc.acoustic_dims}, x0), h, rng);
    }
    l.total = add(l.semantic, scale(l.flow, real(flow_weight)));
    return l;
}

AcousticHead make_acoustic_head(const FlowHead & flow, const SamplerConfig & cfg, Rng & rng) {
    cfg.validate();
    return [&flow, cfg, &rng](std::span<const real> h) {
        Tensor ht({1, h.size()}, std::vector<real>(h.begin(), h.end()));
        return sample(cfg_field(flow, cfg.cfg_alpha), ht, flow.config().acoustic_dims, cfg, rng).values.to_vector();
    };
}

// ---------------------------------------------------------------------------

Tensor cluster_condition(const ClusterTask & task, size_t width, const std::vector<int> & labels) {
    const size_t k = task.centres.size();
    if (width < k) throw std::invalid_argument("cluster_condition: width smaller than the number of clusters");
    const size_t part = width / k;
    std::vector<real> h(labels.size() * width, 0);
    for (size_t i = 0; i < labels.size(); ++i)
        for (size_t j = 0; j < part; ++j) h[i * width + size_t(labels[i]) * part + j] = 1;
    return Tensor({labels.size(), width}, h);
}

std::vector<double> train_cluster_head(FlowHead & head, const ClusterTask & task, const ClusterTraining & tr, Rng & rng) {
    if (head.config().acoustic_dims != 2) throw std::invalid_argument("cluster task: head must have 2 dims");
    Adam opt(head.params(), {.lr = real(tr.lr)});
    std::vector<double> losses;
    for (size_t step = 0; step < tr.steps; ++step) {
        std::vector<real> x0;
        std::vector<int> labels;
        for (size_t i = 0; i < tr.batch; ++i) {
            const int c = int(rng.uniform_int(task.centres.size()));
            labels.push_back(c);
            x0.push_back(real(task.centres[size_t(c)].first + task.sigma * rng.normal()));
            x0.push_back(real(task.centres[size_t(c)].second + task.sigma * rng.normal()));
        }
        Tensor loss = fm_loss(head, Tensor({tr.batch, 2}, x0), cluster_condition(task, head.config().width, labels), rng);
        losses.push_back(loss.item());
        backward(loss);
        opt.step();
    }
    return losses;
}

ClusterEval evaluate_cluster_head(const FlowHead & head, const ClusterTask & task, size_t samples,
                                  const SamplerConfig & cfg, Rng & rng) {
    std::vector<int> labels;
    for (size_t i = 0; i < samples; ++i) labels.push_back(int(i % task.centres.size()));
    auto s = sample(cfg_field(head, cfg.cfg_alpha), cluster_condition(task, head.config().width, labels), 2, cfg, rng);
    ClusterEval e;
    for (size_t i = 0; i < samples; ++i) {
        const double x = s.values[2 * i], y = s.values[2 * i + 1];
        double best = 1e300;
        int arg = -1;
        for (size_t c = 0; c < task.centres.size(); ++c) {
            const double d = std::hypot(x - task.centres[c].first, y - task.centres[c].second);
            if (d < best) {
                best = d;
                arg = int(c);
            }
        }
        e.within_3sigma += best < 3 * task.sigma;
        e.accuracy += arg == labels[i];
    }
    e.within_3sigma /= double(samples);
    e.accuracy /= double(samples);
    return e;
}

VOX_END
