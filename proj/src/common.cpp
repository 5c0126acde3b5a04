#include "mbsurv/diagnostics.hpp"
#include "mbsurv/errors.hpp"
#include "mbsurv/rng.hpp"

#include <iostream>
#include <mutex>
#include <numeric>
#include <utility>

namespace mbsurv {

namespace {

std::mutex sink_mutex;

WarningSink& sink_slot() {
  static WarningSink sink = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return sink;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

WarningSink set_warning_sink(WarningSink sink) {
  std::lock_guard lock(sink_mutex);
  return std::exchange(sink_slot(), std::move(sink));
}

void warn(std::string_view message) {
  std::lock_guard lock(sink_mutex);
  if (sink_slot()) sink_slot()(message);
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) {
  // FNV-1a over the stream name
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(root) ^ h);
}

std::uint64_t entropy_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

double uniform01(Rng& rng) {
  // 53 random bits -> [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t sample_categorical(std::span<const double> weights, Rng& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("sample_categorical: weights must have positive mass");
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // rounding: fall back to the last state with positive weight
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0.0) return i;
  return weights.size() - 1;
}

}  // namespace mbsurv
