#include "backend.h"

#include <cblas.h>
#include <fftw3.h>

#include <cstring>
#include <map>
#include <memory>
#include <mutex>

VOX_BEGIN
namespace backend {

void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k, real alpha, const real * a,
          const real * b, real beta, real * c) {
    if (m == 0 || n == 0) return;
    const int lda = static_cast<int>(trans_a ? m : k);
    const int ldb = static_cast<int>(trans_b ? k : n);
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
#ifdef VOX_DOUBLE
    cblas_dgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, lda, b, ldb, beta, c, int(n));
#else
    cblas_sgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, lda, b, ldb, beta, c, int(n));
#endif
}

namespace {

#ifdef VOX_DOUBLE
using fft_plan = fftw_plan;
using fft_complex = fftw_complex;
#define FFT(name) fftw_##name
#else
using fft_plan = fftwf_plan;
using fft_complex = fftwf_complex;
#define FFT(name) fftwf_##name
#endif

struct PlanPair {
    size_t n = 0;
    real * time = nullptr;
    fft_complex * freq = nullptr;
    fft_plan forward = nullptr;
    fft_plan inverse = nullptr;
    std::mutex mu;

    explicit PlanPair(size_t size) : n(size) {
        time = static_cast<real *>(FFT(malloc)(sizeof(real) * n));
        freq = static_cast<fft_complex *>(FFT(malloc)(sizeof(fft_complex) * (n / 2 + 1)));
        forward = FFT(plan_dft_r2c_1d)(int(n), time, freq, FFTW_ESTIMATE);
        inverse = FFT(plan_dft_c2r_1d)(int(n), freq, time, FFTW_ESTIMATE);
    }
    ~PlanPair() {
        FFT(destroy_plan)(forward);
        FFT(destroy_plan)(inverse);
        FFT(free)(time);
        FFT(free)(freq);
    }
};

PlanPair & plan_for(size_t n) {
    static std::mutex cache_mu;
    static std::map<size_t, std::unique_ptr<PlanPair>> cache;
    std::lock_guard<std::mutex> lock(cache_mu);
    auto & slot = cache[n];
    if (!slot) slot = std::make_unique<PlanPair>(n);
    return *slot;
}

}  // namespace

void rfft(size_t n, const real * in, std::complex<real> * out) {
    auto & p = plan_for(n);
    std::lock_guard<std::mutex> lock(p.mu);
    std::memcpy(p.time, in, sizeof(real) * n);
    FFT(execute)(p.forward);
    std::memcpy(static_cast<void *>(out), p.freq, sizeof(fft_complex) * (n / 2 + 1));
}

void irfft_unscaled(size_t n, const std::complex<real> * spec, real * out) {
    auto & p = plan_for(n);
    std::lock_guard<std::mutex> lock(p.mu);
    std::memcpy(p.freq, spec, sizeof(fft_complex) * (n / 2 + 1));
    FFT(execute)(p.inverse);
    std::memcpy(out, p.time, sizeof(real) * n);
}

#undef FFT

}  // namespace backend
VOX_END
