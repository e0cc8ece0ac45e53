#include "vox/align.h"

#include "vox/checkpoint.h"
#include "vox/errors.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

VOX_BEGIN

void AttentionBundle::validate() const {
    if (!attn.defined() || attn.ndim() != 3) throw std::invalid_argument("attention bundle: attn must be [heads, L, F]");
    if (attn.dim(0) == 0 || attn.dim(1) == 0 || attn.dim(2) == 0) {
        throw std::invalid_argument("attention bundle: heads, L and F must be >= 1");
    }
    for (real v : attn.data())
        if (!(v >= 0)) throw std::invalid_argument("attention bundle: attention weights must be non-negative");
    if (hidden.defined() && (hidden.ndim() != 2 || hidden.dim(0) != attn.dim(1))) {
        throw std::invalid_argument("attention bundle: hidden must be [L, d]");
    }
    if (encoder_rate_hz <= 0) throw std::invalid_argument("attention bundle: encoder rate must be positive");
    for (const auto & ts : timestamps)
        if (ts.token >= tokens() || ts.end < ts.start) throw std::invalid_argument("attention bundle: bad timestamp");
}

namespace {

Tensor head_matrix(const AttentionBundle & b, size_t h) {
    const size_t l = b.tokens(), f = b.encoder_frames();
    auto d = b.attn.data().subspan(h * l * f, l * f);
    return Tensor({l, f}, std::vector<real>(d.begin(), d.end()));
}

double head_deviation(const AttentionBundle & b, size_t h) {
    const size_t l = b.tokens(), f = b.encoder_frames();
    Tensor a = head_matrix(b, h);
    std::vector<real> cost(l * f);
    for (size_t i = 0; i < l * f; ++i) cost[i] = real(1) - a[i];
    const DtwPath path = dtw_path(Tensor({l, f}, cost));
    std::vector<double> frame_sum(l, 0.0), frame_n(l, 0.0);
    for (auto [tok, fr] : path) {
        frame_sum[tok] += double(fr);
        frame_n[tok] += 1;
    }
    // time of a frame is taken at its centre
    const double period = 1.0 / b.encoder_rate_hz;
    double dev = 0;
    for (const auto & ts : b.timestamps) {
        const double predicted = (frame_sum[ts.token] / frame_n[ts.token] + 0.5) * period;
        dev += std::abs(predicted - 0.5 * (ts.start + ts.end));
    }
    return dev / double(b.timestamps.size());
}

}  // namespace

std::vector<HeadScore> score_heads(const AttentionBundle & bundle) {
    bundle.validate();
    if (bundle.timestamps.empty()) {
        throw std::invalid_argument("select_heads: bundle has no word timestamps; pass an explicit head list instead");
    }
    std::vector<HeadScore> scores;
    for (size_t h = 0; h < bundle.heads(); ++h) scores.push_back({h, head_deviation(bundle, h)});
    std::stable_sort(scores.begin(), scores.end(),
                     [](const HeadScore & a, const HeadScore & b) { return a.deviation < b.deviation; });
    return scores;
}

std::vector<size_t> select_heads(const AttentionBundle & bundle, size_t top_k) {
    if (top_k == 0) throw std::invalid_argument("select_heads: top_k must be >= 1");
    auto scores = score_heads(bundle);
    std::vector<size_t> out;
    for (size_t i = 0; i < std::min(top_k, scores.size()); ++i) out.push_back(scores[i].head);
    return out;
}

Tensor build_alignment(const AttentionBundle & bundle, const std::vector<size_t> & heads, size_t codec_frames,
                       const AlignConfig & cfg) {
    bundle.validate();
    if (heads.empty()) throw std::invalid_argument("build_alignment: no heads selected");
    if (codec_frames == 0) throw std::invalid_argument("build_alignment: codec frame count must be >= 1");
    const size_t l = bundle.tokens(), fe = bundle.encoder_frames();
    const size_t width = std::min(cfg.median_width, fe % 2 ? fe : fe - 1);
    std::vector<double> avg(l * fe, 0.0);
    for (size_t h : heads) {
        if (h >= bundle.heads()) throw std::out_of_range("build_alignment: head index out of range");
        const Tensor hm = head_matrix(bundle, h);
        std::vector<real> a(hm.data().begin(), hm.data().end());
        if (cfg.normalize_over_tokens) {
            for (size_t f = 0; f < fe; ++f) {
                double s = 0;
                for (size_t t = 0; t < l; ++t) s += a[t * fe + f];
                for (size_t t = 0; t < l; ++t) a[t * fe + f] = s > 0 ? real(a[t * fe + f] / s) : real(1.0 / double(l));
            }
        } else {
            for (size_t t = 0; t < l; ++t) {
                double s = 0;
                for (size_t f = 0; f < fe; ++f) s += a[t * fe + f];
                for (size_t f = 0; f < fe; ++f) a[t * fe + f] = s > 0 ? real(a[t * fe + f] / s) : real(1.0 / double(fe));
            }
        }
        for (size_t t = 0; t < l; ++t) {
            Tensor row({fe}, std::vector<real>(a.begin() + long(t * fe), a.begin() + long((t + 1) * fe)));
            Tensor filtered = width >= 1 ? median_filter_1d(row, width) : row;
            for (size_t f = 0; f < fe; ++f) avg[t * fe + f] += filtered[f] / double(heads.size());
        }
    }
    std::vector<real> out(l * codec_frames);
    for (size_t t = 0; t < l; ++t) {
        Tensor row({fe}, std::vector<real>(avg.begin() + long(t * fe), avg.begin() + long((t + 1) * fe)));
        Tensor r = linear_interp(row, codec_frames);
        double s = 0;
        for (size_t f = 0; f < codec_frames; ++f) s += std::max(real(0), r[f]);
        for (size_t f = 0; f < codec_frames; ++f) {
            out[t * codec_frames + f] = s > 0 ? real(std::max(real(0), r[f]) / s) : real(1.0 / double(codec_frames));
        }
    }
    return Tensor({l, codec_frames}, out);
}

Tensor asr_distill_loss(const Tensor & z, const Tensor & alignment, const Tensor & hidden, const Linear & projector) {
    if (z.ndim() != 2 || alignment.ndim() != 2 || hidden.ndim() != 2) {
        throw std::invalid_argument("asr_distill_loss: z, A and h must be matrices");
    }
    if (alignment.dim(1) != z.dim(0)) throw std::invalid_argument("asr_distill_loss: A columns must match codec frames");
    if (alignment.dim(0) != hidden.dim(0)) throw std::invalid_argument("asr_distill_loss: A rows must match tokens");
    if (projector.weight.dim(0) != z.dim(1) || projector.weight.dim(1) != hidden.dim(1)) {
        throw std::invalid_argument("asr_distill_loss: projector does not map codec dim to hidden dim");
    }
    Tensor pooled = matmul(alignment, projector(z));
    return add_scalar(neg(mean(cosine_rows(pooled, hidden))), 1);
}

AttentionBundle synthetic_bundle(const SyntheticBundleSpec & spec, Rng & rng) {
    if (spec.tokens == 0 || spec.encoder_frames < spec.tokens || spec.heads == 0) {
        throw std::invalid_argument("synthetic_bundle: need heads >= 1 and frames >= tokens >= 1");
    }
    AttentionBundle b;
    b.encoder_rate_hz = spec.encoder_rate_hz;
    const size_t l = spec.tokens, f = spec.encoder_frames;
    // random word boundaries: every token gets at least one frame
    std::vector<size_t> cuts{0};
    {
        std::vector<size_t> inner(f - 1);
        std::iota(inner.begin(), inner.end(), size_t(1));
        std::shuffle(inner.begin(), inner.end(), rng.engine());
        inner.resize(l - 1);
        std::sort(inner.begin(), inner.end());
        cuts.insert(cuts.end(), inner.begin(), inner.end());
        cuts.push_back(f);
    }
    for (size_t t = 0; t < l; ++t) {
        b.timestamps.push_back({t, double(cuts[t]) / spec.encoder_rate_hz, double(cuts[t + 1]) / spec.encoder_rate_hz});
    }
    std::vector<real> attn(spec.heads * l * f);
    for (size_t h = 0; h < spec.heads; ++h) {
        const bool good = std::find(spec.good_heads.begin(), spec.good_heads.end(), h) != spec.good_heads.end();
        for (size_t fr = 0; fr < f; ++fr) {
            size_t owner = 0;
            while (fr >= cuts[owner + 1]) ++owner;
            double total = 0;
            std::vector<double> col(l);
            for (size_t t = 0; t < l; ++t) {
                col[t] = good ? std::exp(-spec.sharpness * std::abs(double(t) - double(owner))) : rng.uniform();
                total += col[t];
            }
            for (size_t t = 0; t < l; ++t) attn[(h * l + t) * f + fr] = real(col[t] / total);
        }
    }
    b.attn = Tensor({spec.heads, l, f}, attn);
    b.hidden = Tensor({l, spec.hidden_dim}, rng.normal_vec(l * spec.hidden_dim));
    return b;
}

void save_bundle(const AttentionBundle & bundle, const std::filesystem::path & stem) {
    bundle.validate();
    std::map<std::string, Tensor> m;
    m["attn"] = bundle.attn;
    if (bundle.hidden.defined()) m["hidden"] = bundle.hidden;
    std::vector<real> ts;
    for (const auto & t : bundle.timestamps) {
        ts.push_back(real(t.token));
        ts.push_back(real(t.start));
        ts.push_back(real(t.end));
    }
    if (!ts.empty()) m["timestamps"] = Tensor({bundle.timestamps.size(), 3}, ts);
    m["encoder_rate"] = Tensor({1}, {real(bundle.encoder_rate_hz)});
    write_tensors(m, stem);
}

AttentionBundle load_bundle(const std::filesystem::path & stem) {
    auto m = read_checkpoint(stem);
    if (!m.count("attn")) throw IoError("attention bundle: missing tensor 'attn'");
    AttentionBundle b;
    b.attn = m["attn"];
    if (m.count("hidden")) b.hidden = m["hidden"];
    if (m.count("encoder_rate")) b.encoder_rate_hz = m["encoder_rate"][0];
    if (m.count("timestamps")) {
        const Tensor & ts = m["timestamps"];
        if (ts.numel() % 3) throw IoError("attention bundle: timestamps must be [n, 3]");
        for (size_t i = 0; i < ts.numel() / 3; ++i) {
            b.timestamps.push_back({size_t(std::lround(ts[3 * i])), ts[3 * i + 1], ts[3 * i + 2]});
        }
    }
    try {
        b.validate();
    } catch (const std::invalid_argument & e) {
        throw IoError(e.what());
    }
    return b;
}

VOX_END
