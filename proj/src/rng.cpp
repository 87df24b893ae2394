#include "tnpkr/rng.hpp"

#include <cmath>
#include <stdexcept>

#include "tnpkr/errors.hpp"

namespace tnpkr {

namespace {

constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ull;
constexpr uint64_t kSplitDomain = 0xA5A5B4B4C3C3D2D2ull;
constexpr uint64_t kLabelDomain = 0x1F83D9ABFB41BD6Bull;

uint64_t mix64(uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t keyed_hash(uint64_t key, uint64_t x) { return mix64(mix64(x) ^ key); }

}  // namespace

RngStream::RngStream(uint64_t seed) : key_(mix64(seed ^ kGolden)), counter_(0) {}

RngStream RngStream::restore(uint64_t key, uint64_t counter) {
  return RngStream(key, counter);
}

RngStream RngStream::split(uint64_t index) const {
  return RngStream(keyed_hash(key_ ^ kSplitDomain, index), 0);
}

RngStream RngStream::split(std::string_view label) const {
  uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return RngStream(keyed_hash(key_ ^ kLabelDomain, h), 0);
}

uint64_t RngStream::next_u64() { return keyed_hash(key_, counter_++); }

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RngStream::normal() {
  // Box-Muller; two words per sample, no cached spare so the stream position
  // stays a pure function of the draw count.
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

double RngStream::normal(double mean, double sd) { return mean + sd * normal(); }

int64_t RngStream::randint(int64_t lo, int64_t hi) {
  if (hi < lo) throw ConfigError("randint: empty range");
  const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(next_u64() % range);
}

double RngStream::gamma(double shape, double scale) {
  if (shape <= 0 || scale <= 0) throw ConfigError("gamma: shape and scale must be positive");
  if (shape < 1.0) {
    const double u = 1.0 - uniform();
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

double RngStream::beta(double a, double b) {
  const double x = gamma(a, 1.0);
  const double y = gamma(b, 1.0);
  return x / (x + y);
}

double RngStream::inv_gamma(double shape, double scale) {
  return 1.0 / gamma(shape, 1.0 / scale);
}

std::vector<int64_t> RngStream::sample_without_replacement(int64_t n, int64_t k) {
  if (k > n || k < 0) throw ConfigError("sample_without_replacement: need 0 <= k <= n");
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = randint(i, n - 1);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace tnpkr
