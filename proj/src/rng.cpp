#include "prunekit/rng.hpp"

#include <cmath>
#include <numbers>

#include "prunekit/errors.hpp"

namespace prunekit {

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(root ^ splitmix64(h));
}

const char* to_string(LoadErrorKind kind) noexcept {
  switch (kind) {
    case LoadErrorKind::missing_file: return "missing file";
    case LoadErrorKind::malformed_manifest: return "malformed manifest";
    case LoadErrorKind::shape_mismatch: return "shape mismatch";
    case LoadErrorKind::non_finite: return "non-finite weights";
    case LoadErrorKind::version_mismatch: return "version mismatch";
    case LoadErrorKind::corrupt: return "corrupt file";
  }
  return "load error";
}

}  // namespace prunekit
