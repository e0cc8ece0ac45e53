#pragma once

// Scalar type of the tensor engine. The default build is 32-bit; the library
// is additionally compiled with VOX_DOUBLE for finite-difference gradient
// checking. The inline namespace keeps both builds linkable into one binary.

#ifdef VOX_DOUBLE
#define VOX_PREC_NS f64
#else
#define VOX_PREC_NS f32
#endif

#define VOX_BEGIN namespace vox { inline namespace VOX_PREC_NS {
#define VOX_END } }

VOX_BEGIN

#ifdef VOX_DOUBLE
using real = double;
#else
using real = float;
#endif

VOX_END
