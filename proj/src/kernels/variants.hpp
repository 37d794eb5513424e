#pragma once

#include "gos/kernels.hpp"

namespace gos::kernels {

const KernelTable& scalar_table();
#if defined(GOS_HAVE_AVX2_KERNELS)
const KernelTable& avx2_table();
#endif
#if defined(GOS_HAVE_NEON_KERNELS)
const KernelTable& neon_table();
#endif

}  // namespace gos::kernels
