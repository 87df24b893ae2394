#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace tnpkr {

// Counter-based stream: output i is a keyed hash of (key, i), so streams can
// be split without shared mutable state and restored from (key, counter).
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(uint64_t seed);
  static RngStream restore(uint64_t key, uint64_t counter);

  RngStream split(uint64_t index) const;
  RngStream split(std::string_view label) const;

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();
  double normal(double mean, double sd);
  int64_t randint(int64_t lo, int64_t hi);  // inclusive on both ends
  double gamma(double shape, double scale);
  double beta(double a, double b);
  double inv_gamma(double shape, double scale);

  // k distinct values from {0, ..., n-1}, order randomized.
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k);

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  RngStream(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace tnpkr
