#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "unibf/simd/kernels.hpp"

namespace unibf::simd {
namespace {

bool cpu_has(Isa isa) {
#if defined(__x86_64__) || defined(_M_X64)
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    case Isa::avx512:
      return __builtin_cpu_supports("avx512f") &&
             __builtin_cpu_supports("fma");
  }
  return false;
#else
  return isa == Isa::scalar;
#endif
}

Isa parse_isa(const std::string& name) {
  if (name == "scalar") return Isa::scalar;
  if (name == "avx2") return Isa::avx2;
  if (name == "avx512") return Isa::avx512;
  throw std::invalid_argument("unknown ISA '" + name + "'");
}

Isa detect() {
  if (const char* forced = std::getenv("UNIBF_ISA"); forced && *forced) {
    const Isa isa = parse_isa(forced);
    if (!cpu_has(isa))
      throw std::runtime_error(std::string("UNIBF_ISA=") + forced +
                               " is not supported by this CPU");
    return isa;
  }
  if (cpu_has(Isa::avx512)) return Isa::avx512;
  if (cpu_has(Isa::avx2)) return Isa::avx2;
  return Isa::scalar;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{&kernels_for(detect())};
  return slot;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::avx512: return "avx512";
  }
  return "unknown";
}

bool isa_supported(Isa isa) { return cpu_has(isa); }

const KernelTable& kernels_for(Isa isa) {
  if (!cpu_has(isa))
    throw std::runtime_error("ISA " + std::string(isa_name(isa)) +
                             " is not supported by this CPU");
  switch (isa) {
#if defined(__x86_64__) || defined(_M_X64)
    case Isa::avx2: return detail::kAvx2Table;
    case Isa::avx512: return detail::kAvx512Table;
#endif
    default: return detail::kScalarTable;
  }
}

const KernelTable& kernels() { return *active_slot().load(); }

void set_active_isa(Isa isa) { active_slot().store(&kernels_for(isa)); }

Isa active_isa() { return kernels().isa; }

}  // namespace unibf::simd
