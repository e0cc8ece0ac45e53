#include "vox/ops.h"

#include "backend.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <stdexcept>

VOX_BEGIN

namespace {

void require_same_shape(const Tensor & a, const Tensor & b, const char * op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

TensorNode & parent(TensorNode & self, size_t i) { return *self.parents[i]; }

template <class Fwd, class Bwd>
Tensor unary(const Tensor & a, Fwd fwd, Bwd dydx) {
    auto src = a.data();
    std::vector<real> out(src.size());
    for (size_t i = 0; i < src.size(); ++i) {
        out[i] = fwd(src[i]);
    }
    return make_result(a.shape(), std::move(out), {a}, [dydx](TensorNode & self) {
        auto & p = parent(self, 0);
        if (!p.requires_grad) return;
        auto & g = p.grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * dydx(p.data[i], self.data[i]);
        }
    });
}

struct Split {
    size_t outer, axis, inner;
};

Split split_axis(const Shape & s, size_t axis) {
    Split r{1, s[axis], 1};
    for (size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

size_t last_dim(const Tensor & a, const char * op) {
    if (a.ndim() == 0) throw std::invalid_argument(std::string(op) + ": scalar input");
    return a.shape().back();
}

Shape drop_last(const Shape & s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

Tensor add(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "add");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode & self) {
        for (size_t k = 0; k < 2; ++k) {
            if (parent(self, k).requires_grad) parent(self, k).accumulate(self.grad);
        }
    });
}

Tensor sub(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "sub");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode & self) {
        if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
        auto & pb = parent(self, 1);
        if (pb.requires_grad) {
            auto & g = pb.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "mul");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode & self) {
        auto & pa = parent(self, 0);
        auto & pb = parent(self, 1);
        if (pa.requires_grad) {
            auto & g = pa.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto & g = pb.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

Tensor div(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "div");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode & self) {
        auto & pa = parent(self, 0);
        auto & pb = parent(self, 1);
        if (pa.requires_grad) {
            auto & g = pa.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            auto & g = pb.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / pb.data[i];
        }
    });
}

Tensor neg(const Tensor & a) { return scale(a, real(-1)); }

Tensor scale(const Tensor & a, real s) {
    return unary(a, [s](real x) { return x * s; }, [s](real, real) { return s; });
}

Tensor add_scalar(const Tensor & a, real s) {
    return unary(a, [s](real x) { return x + s; }, [](real, real) { return real(1); });
}

namespace {

size_t bias_period(const Tensor & a, const Tensor & b, const char * op) {
    const auto & sa = a.shape();
    const auto & sb = b.shape();
    if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - sb.size())) {
        throw std::invalid_argument(std::string(op) + ": bias shape " + shape_str(sb) +
                                    " is not a suffix of " + shape_str(sa));
    }
    return b.numel();
}

}  // namespace

Tensor add_bias(const Tensor & a, const Tensor & b) {
    const size_t period = bias_period(a, b, "add_bias");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i % period];
    return make_result(a.shape(), std::move(out), {a, b}, [period](TensorNode & self) {
        if (parent(self, 0).requires_grad) parent(self, 0).accumulate(self.grad);
        auto & pb = parent(self, 1);
        if (pb.requires_grad) {
            auto & g = pb.grad_buffer();
            for (size_t i = 0; i < self.grad.size(); ++i) g[i % period] += self.grad[i];
        }
    });
}

Tensor mul_bias(const Tensor & a, const Tensor & b) {
    const size_t period = bias_period(a, b, "mul_bias");
    auto x = a.data(), y = b.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i % period];
    return make_result(a.shape(), std::move(out), {a, b}, [period](TensorNode & self) {
        auto & pa = parent(self, 0);
        auto & pb = parent(self, 1);
        if (pa.requires_grad) {
            auto & g = pa.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i % period];
        }
        if (pb.requires_grad) {
            auto & g = pb.grad_buffer();
            for (size_t i = 0; i < self.grad.size(); ++i) g[i % period] += self.grad[i] * pa.data[i];
        }
    });
}

Tensor matmul(const Tensor & a, const Tensor & w) {
    if (w.ndim() != 2 || a.ndim() < 1 || a.shape().back() != w.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(w.shape()));
    }
    const size_t k = w.dim(0), m = w.dim(1), n = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = m;
    std::vector<real> out(n * m);
    backend::gemm(false, false, n, m, k, 1, a.data().data(), w.data().data(), 0, out.data());
    return make_result(out_shape, std::move(out), {a, w}, [n, m, k](TensorNode & self) {
        auto & pa = parent(self, 0);
        auto & pw = parent(self, 1);
        if (pa.requires_grad) {
            backend::gemm(false, true, n, k, m, 1, self.grad.data(), pw.data.data(), 1, pa.grad_buffer().data());
        }
        if (pw.requires_grad) {
            backend::gemm(true, false, k, m, n, 1, pa.data.data(), self.grad.data(), 1, pw.grad_buffer().data());
        }
    });
}

Tensor transpose(const Tensor & a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose: expected 2-D tensor");
    const size_t r = a.dim(0), c = a.dim(1);
    auto x = a.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return make_result({c, r}, std::move(out), {a}, [r, c](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

Tensor reshape(const Tensor & a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return make_result(std::move(shape), a.to_vector(), {a},
                       [](TensorNode & self) { parent(self, 0).accumulate(self.grad); });
}

Tensor concat(const std::vector<Tensor> & parts, size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) throw std::invalid_argument("concat: axis out of range");
    size_t total = 0;
    for (const auto & p : parts) {
        Shape s = p.shape();
        if (s.size() != shape.size()) throw std::invalid_argument("concat: rank mismatch");
        total += s[axis];
        s[axis] = shape[axis];
        if (s != shape) throw std::invalid_argument("concat: shape mismatch");
    }
    shape[axis] = total;
    const Split sp = split_axis(shape, axis);
    std::vector<real> out(shape_numel(shape));
    std::vector<size_t> offsets;
    size_t off = 0;
    for (const auto & p : parts) {
        offsets.push_back(off);
        const size_t len = p.dim(axis);
        auto src = p.data();
        for (size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(src.begin() + o * len * sp.inner, len * sp.inner,
                        out.begin() + (o * total + off) * sp.inner);
        }
        off += len;
    }
    return make_result(shape, std::move(out), parts, [sp, total, offsets](TensorNode & self) {
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto & p = parent(self, k);
            if (!p.requires_grad) continue;
            auto & g = p.grad_buffer();
            const size_t len = p.data.size() / (sp.outer * sp.inner);
            for (size_t o = 0; o < sp.outer; ++o) {
                const real * src = self.grad.data() + (o * total + offsets[k]) * sp.inner;
                real * dst = g.data() + o * len * sp.inner;
                for (size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor slice(const Tensor & a, size_t axis, size_t start, size_t len) {
    Shape shape = a.shape();
    if (axis >= shape.size() || start + len > shape[axis]) {
        throw std::invalid_argument("slice: range out of bounds for " + shape_str(shape));
    }
    const Split sp = split_axis(shape, axis);
    shape[axis] = len;
    std::vector<real> out(shape_numel(shape));
    auto src = a.data();
    for (size_t o = 0; o < sp.outer; ++o) {
        std::copy_n(src.begin() + (o * sp.axis + start) * sp.inner, len * sp.inner,
                    out.begin() + o * len * sp.inner);
    }
    return make_result(shape, std::move(out), {a}, [sp, start, len](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t o = 0; o < sp.outer; ++o) {
            const real * src = self.grad.data() + o * len * sp.inner;
            real * dst = g.data() + (o * sp.axis + start) * sp.inner;
            for (size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

Tensor gather_rows(const Tensor & table, const std::vector<int> & index) {
    if (table.ndim() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    const size_t rows = table.dim(0), d = table.dim(1);
    auto src = table.data();
    std::vector<real> out(index.size() * d);
    for (size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || size_t(index[i]) >= rows) {
            throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " outside [0, " +
                                    std::to_string(rows) + ")");
        }
        std::copy_n(src.begin() + size_t(index[i]) * d, d, out.begin() + i * d);
    }
    return make_result({index.size(), d}, std::move(out), {table}, [index, d](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < index.size(); ++i) {
            for (size_t j = 0; j < d; ++j) g[size_t(index[i]) * d + j] += self.grad[i * d + j];
        }
    });
}

Tensor pick(const Tensor & a, const std::vector<int> & index) {
    if (a.ndim() != 2 || a.dim(0) != index.size()) throw std::invalid_argument("pick: expected [n, V] with n indices");
    const size_t v = a.dim(1);
    auto src = a.data();
    std::vector<real> out(index.size());
    for (size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || size_t(index[i]) >= v) throw std::out_of_range("pick: index out of range");
        out[i] = src[i * v + size_t(index[i])];
    }
    return make_result({index.size()}, std::move(out), {a}, [index, v](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < index.size(); ++i) g[i * v + size_t(index[i])] += self.grad[i];
    });
}

Tensor detach(const Tensor & a) { return Tensor(a.shape(), a.to_vector()); }

Tensor straight_through(const Tensor & x, const Tensor & quantized) {
    require_same_shape(x, quantized, "straight_through");
    return make_result(x.shape(), quantized.to_vector(), {x},
                       [](TensorNode & self) { parent(self, 0).accumulate(self.grad); });
}

Tensor tanh(const Tensor & a) {
    return unary(a, [](real x) { return std::tanh(x); }, [](real, real y) { return 1 - y * y; });
}

Tensor relu(const Tensor & a) {
    return unary(a, [](real x) { return x > 0 ? x : real(0); }, [](real x, real) { return x > 0 ? real(1) : real(0); });
}

Tensor leaky_relu(const Tensor & a, real slope) {
    return unary(a, [slope](real x) { return x > 0 ? x : slope * x; },
                 [slope](real x, real) { return x > 0 ? real(1) : slope; });
}

namespace {
real sigmoid_scalar(real x) {
    if (x >= 0) return 1 / (1 + std::exp(-x));
    const real e = std::exp(x);
    return e / (1 + e);
}
real softplus_scalar(real x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
}  // namespace

Tensor silu(const Tensor & a) {
    return unary(a, [](real x) { return x * sigmoid_scalar(x); },
                 [](real x, real) {
                     const real s = sigmoid_scalar(x);
                     return s * (1 + x * (1 - s));
                 });
}

Tensor sigmoid(const Tensor & a) {
    return unary(a, [](real x) { return sigmoid_scalar(x); }, [](real, real y) { return y * (1 - y); });
}

Tensor softplus(const Tensor & a) {
    return unary(a, [](real x) { return softplus_scalar(x); }, [](real x, real) { return sigmoid_scalar(x); });
}

Tensor log_sigmoid(const Tensor & a) {
    return unary(a, [](real x) { return -softplus_scalar(-x); }, [](real x, real) { return sigmoid_scalar(-x); });
}

Tensor exp(const Tensor & a) {
    return unary(a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor log(const Tensor & a) {
    return unary(a, [](real x) { return std::log(x); }, [](real x, real) { return 1 / x; });
}

Tensor sqrt(const Tensor & a) {
    return unary(a, [](real x) { return std::sqrt(x); }, [](real, real y) { return y > 0 ? real(0.5) / y : real(0); });
}

Tensor abs(const Tensor & a) {
    return unary(a, [](real x) { return std::abs(x); },
                 [](real x, real) { return x > 0 ? real(1) : (x < 0 ? real(-1) : real(0)); });
}

Tensor square(const Tensor & a) {
    return unary(a, [](real x) { return x * x; }, [](real x, real) { return 2 * x; });
}

Tensor sum(const Tensor & a) {
    double acc = 0;
    for (real v : a.data()) acc += v;
    return make_result({}, {real(acc)}, {a}, [](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (auto & v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor & a) {
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), real(1) / real(a.numel()));
}

Tensor sum_last(const Tensor & a) {
    const size_t d = last_dim(a, "sum_last");
    const size_t n = a.numel() / std::max<size_t>(d, 1);
    auto x = a.data();
    std::vector<real> out(n);
    for (size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (size_t j = 0; j < d; ++j) acc += x[i * d + j];
        out[i] = real(acc);
    }
    return make_result(drop_last(a.shape()), std::move(out), {a}, [d, n](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i];
    });
}

Tensor mean_last(const Tensor & a) { return scale(sum_last(a), real(1) / real(last_dim(a, "mean_last"))); }

Tensor softmax_last(const Tensor & a) {
    const size_t d = last_dim(a, "softmax_last");
    const size_t n = a.numel() / d;
    auto x = a.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < n; ++i) {
        const real * row = x.data() + i * d;
        real mx = *std::max_element(row, row + d);
        double z = 0;
        for (size_t j = 0; j < d; ++j) {
            out[i * d + j] = std::exp(row[j] - mx);
            z += out[i * d + j];
        }
        for (size_t j = 0; j < d; ++j) out[i * d + j] = real(out[i * d + j] / z);
    }
    return make_result(a.shape(), std::move(out), {a}, [d, n](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
            double dot = 0;
            for (size_t j = 0; j < d; ++j) dot += self.grad[i * d + j] * self.data[i * d + j];
            for (size_t j = 0; j < d; ++j) {
                g[i * d + j] += self.data[i * d + j] * (self.grad[i * d + j] - real(dot));
            }
        }
    });
}

Tensor log_softmax_last(const Tensor & a) {
    const size_t d = last_dim(a, "log_softmax_last");
    const size_t n = a.numel() / d;
    auto x = a.data();
    std::vector<real> out(x.size());
    for (size_t i = 0; i < n; ++i) {
        const real * row = x.data() + i * d;
        real mx = *std::max_element(row, row + d);
        double z = 0;
        for (size_t j = 0; j < d; ++j) z += std::exp(double(row[j] - mx));
        const real lz = mx + real(std::log(z));
        for (size_t j = 0; j < d; ++j) out[i * d + j] = row[j] - lz;
    }
    return make_result(a.shape(), std::move(out), {a}, [d, n](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
            double gs = 0;
            for (size_t j = 0; j < d; ++j) gs += self.grad[i * d + j];
            for (size_t j = 0; j < d; ++j) {
                g[i * d + j] += self.grad[i * d + j] - std::exp(self.data[i * d + j]) * real(gs);
            }
        }
    });
}

Tensor layer_norm_last(const Tensor & a, real eps) {
    const size_t d = last_dim(a, "layer_norm_last");
    const size_t n = a.numel() / d;
    auto x = a.data();
    std::vector<real> out(x.size());
    std::vector<real> inv_std(n);
    for (size_t i = 0; i < n; ++i) {
        const real * row = x.data() + i * d;
        double mu = 0, var = 0;
        for (size_t j = 0; j < d; ++j) mu += row[j];
        mu /= double(d);
        for (size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= double(d);
        inv_std[i] = real(1.0 / std::sqrt(var + eps));
        for (size_t j = 0; j < d; ++j) out[i * d + j] = real((row[j] - mu) * inv_std[i]);
    }
    return make_result(a.shape(), std::move(out), {a}, [d, n, inv_std](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
            const real * gy = self.grad.data() + i * d;
            const real * y = self.data.data() + i * d;
            double mg = 0, mgy = 0;
            for (size_t j = 0; j < d; ++j) {
                mg += gy[j];
                mgy += gy[j] * y[j];
            }
            mg /= double(d);
            mgy /= double(d);
            for (size_t j = 0; j < d; ++j) g[i * d + j] += inv_std[i] * real(gy[j] - mg - y[j] * mgy);
        }
    });
}

Tensor rms_norm_last(const Tensor & a, real eps) {
    const size_t d = last_dim(a, "rms_norm_last");
    const size_t n = a.numel() / d;
    auto x = a.data();
    std::vector<real> out(x.size());
    std::vector<real> inv_rms(n);
    for (size_t i = 0; i < n; ++i) {
        double ms = 0;
        for (size_t j = 0; j < d; ++j) ms += double(x[i * d + j]) * x[i * d + j];
        inv_rms[i] = real(1.0 / std::sqrt(ms / double(d) + eps));
        for (size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] * inv_rms[i];
    }
    return make_result(a.shape(), std::move(out), {a}, [d, n, inv_rms](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        for (size_t i = 0; i < n; ++i) {
            const real * gy = self.grad.data() + i * d;
            const real * y = self.data.data() + i * d;
            double mgy = 0;
            for (size_t j = 0; j < d; ++j) mgy += gy[j] * y[j];
            mgy /= double(d);
            for (size_t j = 0; j < d; ++j) g[i * d + j] += inv_rms[i] * real(gy[j] - y[j] * mgy);
        }
    });
}

namespace {

bool key_visible(const AttentionSpec & spec, size_t t, size_t j) {
    if (spec.causal && j > t) return false;
    if (spec.window > 0) {
        const size_t dist = t > j ? t - j : j - t;
        if (dist >= spec.window) return false;
    }
    return true;
}

}  // namespace

Tensor attention(const Tensor & q, const Tensor & k, const Tensor & v, const AttentionSpec & spec) {
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    if (q.ndim() != 3) throw std::invalid_argument("attention: expected [B, T, D]");
    const size_t B = q.dim(0), T = q.dim(1), D = q.dim(2), H = spec.heads;
    if (H == 0 || D % H != 0) throw std::invalid_argument("attention: width not divisible by heads");
    if (!spec.alibi.empty() && spec.alibi.size() != H) throw std::invalid_argument("attention: alibi slopes != heads");
    const size_t dh = D / H;
    const real inv_sqrt = real(1) / std::sqrt(real(dh));

    auto Q = q.data(), K = k.data(), V = v.data();
    std::vector<real> out(q.numel(), real(0));
    auto probs = std::make_shared<std::vector<real>>(B * H * T * T, real(0));
    std::vector<real> scores(T);
    for (size_t b = 0; b < B; ++b) {
        for (size_t h = 0; h < H; ++h) {
            real * P = probs->data() + ((b * H + h) * T) * T;
            for (size_t t = 0; t < T; ++t) {
                const real * qt = Q.data() + (b * T + t) * D + h * dh;
                real mx = -std::numeric_limits<real>::infinity();
                for (size_t j = 0; j < T; ++j) {
                    if (!key_visible(spec, t, j)) continue;
                    const real * kj = K.data() + (b * T + j) * D + h * dh;
                    double s = 0;
                    for (size_t c = 0; c < dh; ++c) s += double(qt[c]) * kj[c];
                    real sc = real(s) * inv_sqrt;
                    if (!spec.alibi.empty()) {
                        const real dist = t > j ? real(t - j) : real(j - t);
                        sc -= spec.alibi[h] * dist;
                    }
                    scores[j] = sc;
                    mx = std::max(mx, sc);
                }
                double z = 0;
                for (size_t j = 0; j < T; ++j) {
                    if (!key_visible(spec, t, j)) continue;
                    P[t * T + j] = std::exp(scores[j] - mx);
                    z += P[t * T + j];
                }
                real * ot = out.data() + (b * T + t) * D + h * dh;
                for (size_t j = 0; j < T; ++j) {
                    if (!key_visible(spec, t, j)) continue;
                    P[t * T + j] = real(P[t * T + j] / z);
                    const real * vj = V.data() + (b * T + j) * D + h * dh;
                    for (size_t c = 0; c < dh; ++c) ot[c] += P[t * T + j] * vj[c];
                }
            }
        }
    }

    return make_result(q.shape(), std::move(out), {q, k, v}, [B, T, D, H, dh, inv_sqrt, probs](TensorNode & self) {
        auto & pq = parent(self, 0);
        auto & pk = parent(self, 1);
        auto & pv = parent(self, 2);
        std::vector<real> gq(pq.data.size(), 0), gk(pk.data.size(), 0), gv(pv.data.size(), 0);
        std::vector<real> dP(T), dS(T);
        for (size_t b = 0; b < B; ++b) {
            for (size_t h = 0; h < H; ++h) {
                const real * P = probs->data() + ((b * H + h) * T) * T;
                for (size_t t = 0; t < T; ++t) {
                    const real * go = self.grad.data() + (b * T + t) * D + h * dh;
                    double dot = 0;
                    for (size_t j = 0; j < T; ++j) {
                        const real p = P[t * T + j];
                        if (p == 0) {
                            dP[j] = 0;
                            continue;
                        }
                        const real * vj = pv.data.data() + (b * T + j) * D + h * dh;
                        real * gvj = gv.data() + (b * T + j) * D + h * dh;
                        double s = 0;
                        for (size_t c = 0; c < dh; ++c) {
                            s += double(go[c]) * vj[c];
                            gvj[c] += p * go[c];
                        }
                        dP[j] = real(s);
                        dot += double(p) * s;
                    }
                    const real * qt = pq.data.data() + (b * T + t) * D + h * dh;
                    real * gqt = gq.data() + (b * T + t) * D + h * dh;
                    for (size_t j = 0; j < T; ++j) {
                        const real p = P[t * T + j];
                        if (p == 0) continue;
                        const real ds = p * (dP[j] - real(dot)) * inv_sqrt;
                        const real * kj = pk.data.data() + (b * T + j) * D + h * dh;
                        real * gkj = gk.data() + (b * T + j) * D + h * dh;
                        for (size_t c = 0; c < dh; ++c) {
                            gqt[c] += ds * kj[c];
                            gkj[c] += ds * qt[c];
                        }
                    }
                }
            }
        }
        if (pq.requires_grad) pq.accumulate(gq);
        if (pk.requires_grad) pk.accumulate(gk);
        if (pv.requires_grad) pv.accumulate(gv);
    });
}

Tensor conv1d(const Tensor & x, const Tensor & w, const Tensor & bias, size_t stride, size_t pad_left,
              size_t pad_right) {
    if (x.ndim() != 3 || w.ndim() != 3 || w.dim(2) != x.dim(2) || stride == 0) {
        throw std::invalid_argument("conv1d: bad shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
    }
    const size_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const size_t Cout = w.dim(0), K = w.dim(1);
    if (T + pad_left + pad_right < K) throw std::invalid_argument("conv1d: input shorter than kernel");
    const size_t Tout = (T + pad_left + pad_right - K) / stride + 1;
    const size_t KC = K * Cin;
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout)) throw std::invalid_argument("conv1d: bias shape");

    auto cols = std::make_shared<std::vector<real>>(B * Tout * KC, real(0));
    auto X = x.data();
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < Tout; ++t) {
            real * col = cols->data() + (b * Tout + t) * KC;
            for (size_t kk = 0; kk < K; ++kk) {
                const long src = long(t * stride + kk) - long(pad_left);
                if (src < 0 || size_t(src) >= T) continue;
                std::copy_n(X.begin() + (b * T + size_t(src)) * Cin, Cin, col + kk * Cin);
            }
        }
    }
    std::vector<real> out(B * Tout * Cout);
    backend::gemm(false, true, B * Tout, Cout, KC, 1, cols->data(), w.data().data(), 0, out.data());
    if (bias.defined()) {
        auto bd = bias.data();
        for (size_t i = 0; i < B * Tout; ++i)
            for (size_t o = 0; o < Cout; ++o) out[i * Cout + o] += bd[o];
    }
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_result({B, Tout, Cout}, std::move(out), parents,
                       [=](TensorNode & self) {
                           auto & px = parent(self, 0);
                           auto & pw = parent(self, 1);
                           if (pw.requires_grad) {
                               backend::gemm(true, false, Cout, KC, B * Tout, 1, self.grad.data(), cols->data(), 1,
                                             pw.grad_buffer().data());
                           }
                           if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
                               auto & gb = parent(self, 2).grad_buffer();
                               for (size_t i = 0; i < B * Tout; ++i)
                                   for (size_t o = 0; o < Cout; ++o) gb[o] += self.grad[i * Cout + o];
                           }
                           if (px.requires_grad) {
                               std::vector<real> gcols(B * Tout * KC);
                               backend::gemm(false, false, B * Tout, KC, Cout, 1, self.grad.data(), pw.data.data(), 0,
                                             gcols.data());
                               auto & gx = px.grad_buffer();
                               for (size_t b = 0; b < B; ++b) {
                                   for (size_t t = 0; t < Tout; ++t) {
                                       const real * col = gcols.data() + (b * Tout + t) * KC;
                                       for (size_t kk = 0; kk < K; ++kk) {
                                           const long src = long(t * stride + kk) - long(pad_left);
                                           if (src < 0 || size_t(src) >= T) continue;
                                           real * dst = gx.data() + (b * T + size_t(src)) * Cin;
                                           for (size_t c = 0; c < Cin; ++c) dst[c] += col[kk * Cin + c];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor conv_transpose1d(const Tensor & x, const Tensor & w, const Tensor & bias, size_t stride, size_t trim_right) {
    if (x.ndim() != 3 || w.ndim() != 3 || w.dim(0) != x.dim(2) || stride == 0) {
        throw std::invalid_argument("conv_transpose1d: bad shapes x" + shape_str(x.shape()) + " w" +
                                    shape_str(w.shape()));
    }
    const size_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const size_t K = w.dim(1), Cout = w.dim(2);
    const size_t full = (T - 1) * stride + K;
    if (trim_right >= full) throw std::invalid_argument("conv_transpose1d: trim exceeds output");
    const size_t Tout = full - trim_right;
    const size_t KC = K * Cout;
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
        throw std::invalid_argument("conv_transpose1d: bias shape");
    }

    std::vector<real> cols(B * T * KC);
    backend::gemm(false, false, B * T, KC, Cin, 1, x.data().data(), w.data().data(), 0, cols.data());
    std::vector<real> out(B * Tout * Cout, real(0));
    for (size_t b = 0; b < B; ++b) {
        for (size_t t = 0; t < T; ++t) {
            const real * col = cols.data() + (b * T + t) * KC;
            for (size_t kk = 0; kk < K; ++kk) {
                const size_t dst = t * stride + kk;
                if (dst >= Tout) continue;
                real * o = out.data() + (b * Tout + dst) * Cout;
                for (size_t c = 0; c < Cout; ++c) o[c] += col[kk * Cout + c];
            }
        }
    }
    if (bias.defined()) {
        auto bd = bias.data();
        for (size_t i = 0; i < B * Tout; ++i)
            for (size_t o = 0; o < Cout; ++o) out[i * Cout + o] += bd[o];
    }
    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_result({B, Tout, Cout}, std::move(out), parents, [=](TensorNode & self) {
        auto & px = parent(self, 0);
        auto & pw = parent(self, 1);
        std::vector<real> gcols(B * T * KC, real(0));
        for (size_t b = 0; b < B; ++b) {
            for (size_t t = 0; t < T; ++t) {
                real * col = gcols.data() + (b * T + t) * KC;
                for (size_t kk = 0; kk < K; ++kk) {
                    const size_t dst = t * stride + kk;
                    if (dst >= Tout) continue;
                    std::copy_n(self.grad.data() + (b * Tout + dst) * Cout, Cout, col + kk * Cout);
                }
            }
        }
        if (px.requires_grad) {
            backend::gemm(false, true, B * T, Cin, KC, 1, gcols.data(), pw.data.data(), 1, px.grad_buffer().data());
        }
        if (pw.requires_grad) {
            backend::gemm(true, false, Cin, KC, B * T, 1, px.data.data(), gcols.data(), 1, pw.grad_buffer().data());
        }
        if (self.parents.size() > 2 && parent(self, 2).requires_grad) {
            auto & gb = parent(self, 2).grad_buffer();
            for (size_t i = 0; i < B * Tout; ++i)
                for (size_t o = 0; o < Cout; ++o) gb[o] += self.grad[i * Cout + o];
        }
    });
}

Tensor stft_mag(const Tensor & wave, size_t fft_size, size_t hop) {
    if (wave.ndim() != 1) throw std::invalid_argument("stft: wave must be 1-D");
    if (hop == 0 || fft_size < hop) throw std::invalid_argument("stft: require fft_size >= hop > 0");
    const size_t n = wave.numel();
    const size_t frames = n < fft_size ? 1 : 1 + (n - fft_size) / hop;
    const size_t bins = fft_size / 2 + 1;

    auto window = std::make_shared<std::vector<real>>(fft_size);
    for (size_t i = 0; i < fft_size; ++i) {
        (*window)[i] = real(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(fft_size)));
    }
    auto spec = std::make_shared<std::vector<std::complex<real>>>(frames * bins);
    std::vector<real> buf(fft_size);
    auto x = wave.data();
    std::vector<real> mag(frames * bins);
    for (size_t f = 0; f < frames; ++f) {
        for (size_t i = 0; i < fft_size; ++i) {
            const size_t s = f * hop + i;
            buf[i] = s < n ? x[s] * (*window)[i] : real(0);
        }
        backend::rfft(fft_size, buf.data(), spec->data() + f * bins);
        for (size_t k = 0; k < bins; ++k) mag[f * bins + k] = std::abs((*spec)[f * bins + k]);
    }
    return make_result({frames, bins}, std::move(mag), {wave}, [=](TensorNode & self) {
        auto & g = parent(self, 0).grad_buffer();
        std::vector<std::complex<real>> G(bins);
        std::vector<real> gy(fft_size);
        for (size_t f = 0; f < frames; ++f) {
            for (size_t k = 0; k < bins; ++k) {
                const real m = self.data[f * bins + k];
                const auto X = (*spec)[f * bins + k];
                G[k] = m > real(1e-20) ? std::conj(X) * (self.grad[f * bins + k] / m) : std::complex<real>(0);
                // c2r doubles interior bins through Hermitian symmetry
                G[k] = std::conj(G[k]);
                if (k != 0 && !(fft_size % 2 == 0 && k == fft_size / 2)) G[k] *= real(0.5);
            }
            backend::irfft_unscaled(fft_size, G.data(), gy.data());
            for (size_t i = 0; i < fft_size; ++i) {
                const size_t s = f * hop + i;
                if (s < n) g[s] += gy[i] * (*window)[i];
            }
        }
    });
}

Tensor cosine_rows(const Tensor & a, const Tensor & b) {
    require_same_shape(a, b, "cosine_rows");
    if (a.ndim() != 2) throw std::invalid_argument("cosine_rows: expected [n, d]");
    const size_t n = a.dim(0), d = a.dim(1);
    auto A = a.data(), Bv = b.data();
    std::vector<real> out(n);
    std::vector<real> na(n), nb(n);
    for (size_t i = 0; i < n; ++i) {
        double ab = 0, aa = 0, bb = 0;
        for (size_t j = 0; j < d; ++j) {
            ab += double(A[i * d + j]) * Bv[i * d + j];
            aa += double(A[i * d + j]) * A[i * d + j];
            bb += double(Bv[i * d + j]) * Bv[i * d + j];
        }
        na[i] = real(std::sqrt(aa));
        nb[i] = real(std::sqrt(bb));
        out[i] = (na[i] > 0 && nb[i] > 0) ? real(ab / (std::sqrt(aa) * std::sqrt(bb))) : real(0);
    }
    return make_result({n}, std::move(out), {a, b}, [n, d, na, nb](TensorNode & self) {
        auto & pa = parent(self, 0);
        auto & pb = parent(self, 1);
        for (size_t i = 0; i < n; ++i) {
            if (!(na[i] > 0 && nb[i] > 0)) continue;
            const real c = self.data[i], g = self.grad[i];
            for (size_t j = 0; j < d; ++j) {
                const real ua = pa.data[i * d + j] / na[i], ub = pb.data[i * d + j] / nb[i];
                if (pa.requires_grad) pa.grad_buffer()[i * d + j] += g * (ub - c * ua) / na[i];
                if (pb.requires_grad) pb.grad_buffer()[i * d + j] += g * (ua - c * ub) / nb[i];
            }
        }
    });
}

VOX_END
