#pragma once

// BLAS and FFT entry points for the current scalar type.

#include "vox/prec.h"

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

VOX_BEGIN
namespace backend {

// C[M,N] = alpha * op(A) * op(B) + beta * C, row-major
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, real alpha, const real * a,
          const real * b, real beta, real * c);

// One-sided real DFT: `in` has n samples, `out` gets n/2 + 1 bins.
void rfft(size_t n, const real * in, std::complex<real> * out);

// Inverse of the one-sided layout without 1/n scaling:
// out[t] = Re(sum_k spec[k] * exp(+2*pi*i*k*t/n)) over the Hermitian extension.
void irfft_unscaled(size_t n, const std::complex<real> * spec, real * out);

}  // namespace backend
VOX_END
