#include "vox/quantize.h"

#include "vox/errors.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>

VOX_BEGIN

void FSQConfig::validate() const {
    if (levels < 2) throw ConfigError("fsq: levels must be >= 2");
    if (levels > 256) throw ConfigError("fsq: levels must fit in one byte");
    if (num_dims == 0) throw ConfigError("fsq: num_dims must be >= 1");
    if (p_quantize < 0 || p_dither < 0 || p_passthrough < 0 ||
        std::abs(p_quantize + p_dither + p_passthrough - 1.0) > 1e-9) {
        throw ConfigError("fsq: branch probabilities must be non-negative and sum to 1");
    }
}

real fsq_level(size_t k, size_t levels) { return real(-1) + real(2 * k + 1) / real(levels); }

int fsq_index(real y, size_t levels) {
    const real c = std::clamp(y, real(-1), real(1));
    long k = long(std::floor((double(c) + 1.0) * double(levels) / 2.0));
    k = std::clamp(k, 0L, long(levels) - 1);
    int best = int(k);
    real best_d = std::abs(c - fsq_level(size_t(k), levels));
    for (long cand : {k - 1, k + 1}) {
        if (cand < 0 || cand >= long(levels)) continue;
        const real d = std::abs(c - fsq_level(size_t(cand), levels));
        if (d < best_d || (d == best_d && cand < best)) {
            best = int(cand);
            best_d = d;
        }
    }
    return best;
}

std::vector<int> fsq_indices_of(std::span<const real> bounded, size_t levels) {
    std::vector<int> idx(bounded.size());
    for (size_t i = 0; i < bounded.size(); ++i) idx[i] = fsq_index(bounded[i], levels);
    return idx;
}

std::vector<real> fsq_values_of(std::span<const int> indices, size_t levels) {
    std::vector<real> v(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || size_t(indices[i]) >= levels) throw std::out_of_range("fsq: index out of range");
        v[i] = fsq_level(size_t(indices[i]), levels);
    }
    return v;
}

FsqResult fsq_quantize(const Tensor & x, size_t levels) {
    Tensor y = tanh(x);
    FsqResult r;
    r.indices = fsq_indices_of(y.data(), levels);
    r.values = straight_through(y, Tensor(y.shape(), fsq_values_of(r.indices, levels)));
    return r;
}

FsqTrainResult fsq_train_forward(const Tensor & x, const FSQConfig & cfg, Rng & rng) {
    const double u = rng.uniform();
    if (u < cfg.p_quantize) return {fsq_quantize(x, cfg.levels).values, FsqMode::Quantize};
    Tensor y = tanh(x);
    if (u < cfg.p_quantize + cfg.p_dither) {
        const double a = cfg.amplitude();
        return {add(y, Tensor(y.shape(), rng.uniform_vec(y.numel(), -a, a))), FsqMode::Dither};
    }
    return {y, FsqMode::Passthrough};
}

VQCodebook::VQCodebook(const VQConfig & c, Rng & rng)
    : VQCodebook(c, Tensor({c.codebook_size, c.dim}, rng.normal_vec(c.codebook_size * c.dim, 1.0 / std::sqrt(double(c.dim))))) {}

VQCodebook::VQCodebook(const VQConfig & c, Tensor e) : cfg(c), entries(std::move(e)) {
    if (entries.ndim() != 2 || entries.dim(0) == 0) throw std::invalid_argument("vq: codebook must be non-empty [K, D]");
    cfg.codebook_size = entries.dim(0);
    cfg.dim = entries.dim(1);
    const size_t k = entries.dim(0);
    usage.assign(k, 0);
    idle_steps.assign(k, 0);
    ema_count.assign(k, 1.0);
    auto d = entries.data();
    ema_sum.assign(d.begin(), d.end());
}

int VQCodebook::nearest(std::span<const real> z) const {
    if (size() == 0) throw std::invalid_argument("vq: empty codebook");
    const size_t k = size(), d = dim();
    if (z.size() != d) throw std::invalid_argument("vq: latent dimension does not match codebook");
    auto e = entries.data();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < k; ++i) {
        double s = 0;
        for (size_t j = 0; j < d; ++j) {
            const double diff = double(z[j]) - e[i * d + j];
            s += diff * diff;
        }
        if (s < best_d) {
            best_d = s;
            best = int(i);
        }
    }
    return best;
}

VqResult vq_quantize(const Tensor & z_e_in, VQCodebook & book, bool training, Rng * rng) {
    if (book.size() == 0) throw std::invalid_argument("vq: empty codebook");
    const size_t d = book.dim();
    Tensor z_e = z_e_in.ndim() == 1 ? reshape(z_e_in, {1, z_e_in.numel()}) : z_e_in;
    if (z_e.ndim() != 2 || z_e.dim(1) != d) {
        throw std::invalid_argument("vq: latent shape " + shape_str(z_e_in.shape()) + " does not match codebook dim " +
                                    std::to_string(d));
    }
    const size_t n = z_e.dim(0);
    VqResult r;
    auto zd = z_e.data();
    r.indices.resize(n);
    std::vector<real> q(n * d);
    auto e = book.entries.data();
    for (size_t i = 0; i < n; ++i) {
        r.indices[i] = book.nearest(zd.subspan(i * d, d));
        const real * row = e.data() + size_t(r.indices[i]) * d;
        for (size_t j = 0; j < d; ++j) q[i * d + j] = row[j];
    }
    if (training) {
        if (!rng) throw std::invalid_argument("vq: training mode needs an rng");
        r.applied = rng->bernoulli(book.cfg.apply_prob);
    }
    Tensor zq_const({n, d}, q);
    if (!r.applied) {
        r.z_q = z_e;
        r.commit = Tensor::scalar(0);
        return r;
    }
    r.z_q = straight_through(z_e, zq_const);
    r.commit = scale(sum(square(sub(z_e, zq_const))), real(1) / real(n));
    for (int idx : r.indices) ++book.usage[size_t(idx)];
    return r;
}

void vq_ema_update(VQCodebook & book, const Tensor & z_e, std::span<const int> indices, Rng & rng) {
    const size_t k = book.size(), d = book.dim();
    const size_t n = z_e.numel() / d;
    if (indices.size() != n) throw std::invalid_argument("vq_ema_update: index count mismatch");
    auto z = z_e.data();
    std::vector<double> count(k, 0.0), acc(k * d, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const size_t c = size_t(indices[i]);
        count[c] += 1;
        for (size_t j = 0; j < d; ++j) acc[c * d + j] += z[i * d + j];
    }
    const double decay = book.cfg.ema_decay;
    auto e = book.entries.mutable_data();
    for (size_t c = 0; c < k; ++c) {
        book.ema_count[c] = decay * book.ema_count[c] + (1 - decay) * count[c];
        for (size_t j = 0; j < d; ++j) book.ema_sum[c * d + j] = decay * book.ema_sum[c * d + j] + (1 - decay) * acc[c * d + j];
        if (book.ema_count[c] > 1e-12) {
            for (size_t j = 0; j < d; ++j) e[c * d + j] = real(book.ema_sum[c * d + j] / book.ema_count[c]);
        }
        book.idle_steps[c] = count[c] > 0 ? 0 : book.idle_steps[c] + 1;
        if (book.idle_steps[c] >= book.cfg.dead_after && n > 0) {
            const size_t src = rng.uniform_int(n);
            for (size_t j = 0; j < d; ++j) {
                e[c * d + j] = z[src * d + j];
                book.ema_sum[c * d + j] = z[src * d + j];
            }
            book.ema_count[c] = 1.0;
            book.idle_steps[c] = 0;
        }
    }
}

double bitrate(double frame_rate_hz, double semantic_k, double acoustic_dims, double acoustic_levels) {
    if (frame_rate_hz <= 0 || semantic_k <= 0 || acoustic_dims < 0 || acoustic_levels <= 0) {
        throw std::invalid_argument("bitrate: arguments must be positive");
    }
    return frame_rate_hz * (std::log2(semantic_k) + acoustic_dims * std::log2(acoustic_levels));
}

void TokenLayout::validate(const TokenFrame & f) const {
    if (f.semantic == semantic_k) {
        if (!f.acoustic.empty()) throw std::out_of_range("token frame: EOA frame carries acoustic indices");
        return;
    }
    if (f.semantic > semantic_k) throw std::out_of_range("token frame: semantic index " + std::to_string(f.semantic) + " >= K");
    if (f.acoustic.size() != acoustic_dims) throw std::out_of_range("token frame: wrong acoustic count");
    for (uint8_t a : f.acoustic)
        if (a >= acoustic_levels) throw std::out_of_range("token frame: acoustic index out of range");
}

void write_token_frames(std::ostream & out, std::span<const TokenFrame> frames, const TokenLayout & layout) {
    for (const auto & f : frames) {
        layout.validate(f);
        const unsigned char lo = f.semantic & 0xff, hi = f.semantic >> 8;
        out.put(char(lo));
        out.put(char(hi));
        for (uint8_t a : f.acoustic) out.put(char(a));
    }
    if (!out) throw IoError("token frames: write failed");
}

std::vector<TokenFrame> read_token_frames(std::istream & in, const TokenLayout & layout) {
    std::vector<TokenFrame> frames;
    while (true) {
        const int lo = in.get();
        if (lo == std::char_traits<char>::eof()) break;
        const int hi = in.get();
        if (hi == std::char_traits<char>::eof()) throw IoError("token frames: truncated semantic index");
        TokenFrame f;
        f.semantic = uint16_t(lo | (hi << 8));
        if (f.semantic != layout.semantic_k) {
            f.acoustic.resize(layout.acoustic_dims);
            in.read(reinterpret_cast<char *>(f.acoustic.data()), std::streamsize(layout.acoustic_dims));
            if (in.gcount() != std::streamsize(layout.acoustic_dims)) throw IoError("token frames: truncated frame");
        }
        try {
            layout.validate(f);
        } catch (const std::out_of_range & e) {
            throw IoError(std::string("token frames: ") + e.what());
        }
        frames.push_back(std::move(f));
    }
    return frames;
}

VOX_END
