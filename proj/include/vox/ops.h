#pragma once

#include "vox/tensor.h"

#include <vector>

VOX_BEGIN

// Elementwise (identical shapes)
Tensor add(const Tensor & a, const Tensor & b);
Tensor sub(const Tensor & a, const Tensor & b);
Tensor mul(const Tensor & a, const Tensor & b);
Tensor div(const Tensor & a, const Tensor & b);
Tensor neg(const Tensor & a);
Tensor scale(const Tensor & a, real s);
Tensor add_scalar(const Tensor & a, real s);

// b's shape equals the trailing dims of a; b is broadcast over the leading dims.
Tensor add_bias(const Tensor & a, const Tensor & b);
Tensor mul_bias(const Tensor & a, const Tensor & b);

// a [..., k] x w [k, m] -> [..., m]
Tensor matmul(const Tensor & a, const Tensor & w);
Tensor transpose(const Tensor & a);  // 2-D only
Tensor reshape(const Tensor & a, Shape shape);
Tensor concat(const std::vector<Tensor> & parts, size_t axis);
Tensor slice(const Tensor & a, size_t axis, size_t start, size_t len);
// rows of table [V, d] selected by index -> [n, d]
Tensor gather_rows(const Tensor & table, const std::vector<int> & index);
// out[i] = a[i, index[i]] for a [n, V]
Tensor pick(const Tensor & a, const std::vector<int> & index);
// gradient barrier
Tensor detach(const Tensor & a);
// value of `quantized`, gradient routed to `x` unchanged
Tensor straight_through(const Tensor & x, const Tensor & quantized);

Tensor tanh(const Tensor & a);
Tensor relu(const Tensor & a);
Tensor leaky_relu(const Tensor & a, real slope);
Tensor silu(const Tensor & a);
Tensor sigmoid(const Tensor & a);
Tensor softplus(const Tensor & a);
Tensor log_sigmoid(const Tensor & a);
Tensor exp(const Tensor & a);
Tensor log(const Tensor & a);
Tensor sqrt(const Tensor & a);
Tensor abs(const Tensor & a);
Tensor square(const Tensor & a);

Tensor sum(const Tensor & a);
Tensor mean(const Tensor & a);
// reduce the last axis
Tensor sum_last(const Tensor & a);
Tensor mean_last(const Tensor & a);

Tensor softmax_last(const Tensor & a);
Tensor log_softmax_last(const Tensor & a);
// normalisation over the last axis without affine parameters
Tensor layer_norm_last(const Tensor & a, real eps);
Tensor rms_norm_last(const Tensor & a, real eps);

struct AttentionSpec {
    size_t heads = 1;
    bool causal = true;
    size_t window = 0;            // 0 = unbounded; otherwise keys in (t - window, t]
    std::vector<real> alibi;      // per-head slope; empty disables the bias
};

// q, k, v: [B, T, D] with D = heads * head_dim -> [B, T, D]
Tensor attention(const Tensor & q, const Tensor & k, const Tensor & v, const AttentionSpec & spec);

// x [B, T, Cin], w [Cout, K, Cin], bias [Cout] or undefined -> [B, Tout, Cout]
Tensor conv1d(const Tensor & x, const Tensor & w, const Tensor & bias, size_t stride, size_t pad_left,
              size_t pad_right);
// x [B, T, Cin], w [Cin, K, Cout] -> [B, (T-1)*stride + K - trim_right, Cout]
Tensor conv_transpose1d(const Tensor & x, const Tensor & w, const Tensor & bias, size_t stride,
                        size_t trim_right);

// Hann-windowed magnitude STFT of a 1-D signal -> [frames, fft/2 + 1]
Tensor stft_mag(const Tensor & wave, size_t fft_size, size_t hop);

// Row-wise cosine similarity of [n, d] tensors -> [n]; zero-norm rows give 0.
Tensor cosine_rows(const Tensor & a, const Tensor & b);

VOX_END
