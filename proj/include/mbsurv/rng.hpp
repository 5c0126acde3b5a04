#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace mbsurv {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named substream of a root seed, so that
/// components (fold split, EM init, bank init, masking, ...) can be varied
/// without perturbing each other's random draws.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

inline Rng make_rng(std::uint64_t root, std::string_view stream) {
  return Rng{derive_seed(root, stream)};
}

/// Nondeterministic seed from the system entropy source.
std::uint64_t entropy_seed();

double uniform01(Rng& rng);

/// Draws an index from an unnormalized nonnegative weight vector.
std::size_t sample_categorical(std::span<const double> weights, Rng& rng);

}  // namespace mbsurv
