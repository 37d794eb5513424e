#include <atomic>
#include <cstdlib>
#include <string>

#include "gos/errors.hpp"
#include "variants.hpp"

namespace gos::kernels {
namespace {

bool cpu_has(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(GOS_HAVE_AVX2_KERNELS)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::neon:
#if defined(GOS_HAVE_NEON_KERNELS)
      return true;
#else
      return false;
#endif
  }
  return false;
}

Backend best_backend() {
  if (cpu_has(Backend::avx2)) return Backend::avx2;
  if (cpu_has(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

Backend initial_backend() {
  if (const char* env = std::getenv("GOS_KERNELS"); env && *env) {
    const std::string_view v(env);
    if (v != "auto") {
      Backend b = parse_backend(v);
      if (!cpu_has(b)) throw ConfigError("GOS_KERNELS=" + std::string(v) + " is not supported here");
      return b;
    }
  }
  return best_backend();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> ptr{&table(initial_backend())};
  return ptr;
}

}  // namespace

bool supported(Backend b) { return cpu_has(b); }

std::vector<Backend> supported_backends() {
  std::vector<Backend> out;
  for (Backend b : {Backend::scalar, Backend::avx2, Backend::neon})
    if (cpu_has(b)) out.push_back(b);
  return out;
}

const KernelTable& table(Backend b) {
  switch (b) {
    case Backend::scalar:
      return scalar_table();
    case Backend::avx2:
#if defined(GOS_HAVE_AVX2_KERNELS)
      return avx2_table();
#else
      break;
#endif
    case Backend::neon:
#if defined(GOS_HAVE_NEON_KERNELS)
      return neon_table();
#else
      break;
#endif
  }
  throw ConfigError("kernel backend '" + std::string(backend_name(b)) + "' is not built");
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

void select(Backend b) {
  if (!cpu_has(b))
    throw ConfigError("kernel backend '" + std::string(backend_name(b)) + "' is not supported");
  current().store(&table(b), std::memory_order_relaxed);
}

Backend parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::scalar;
  if (name == "avx2") return Backend::avx2;
  if (name == "neon") return Backend::neon;
  throw ConfigError("unknown kernel backend '" + std::string(name) + "'");
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
    case Backend::neon:
      return "neon";
  }
  return "?";
}

ScopedBackend::ScopedBackend(Backend b) : previous_(active().backend) { select(b); }
ScopedBackend::~ScopedBackend() { select(previous_); }

}  // namespace gos::kernels
