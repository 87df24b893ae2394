#include "tnpkr/memtrack.hpp"

#include <algorithm>
#include <atomic>
#include <string>

namespace tnpkr::memtrack {

namespace {

std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
std::atomic<std::size_t> g_score_live{0};
std::atomic<std::size_t> g_score_peak{0};
std::atomic<std::size_t> g_budget{0};

thread_local int t_score_depth = 0;

void raise_peak(std::atomic<std::size_t>& peak, std::size_t candidate) {
  std::size_t cur = peak.load(std::memory_order_relaxed);
  while (candidate > cur &&
         !peak.compare_exchange_weak(cur, candidate, std::memory_order_relaxed)) {
  }
}

}  // namespace

void note_alloc(std::size_t bytes, bool score) {
  const std::size_t limit = g_budget.load(std::memory_order_relaxed);
  const std::size_t live = g_live.load(std::memory_order_relaxed);
  if (limit != 0 && live + bytes > limit) {
    throw OomError("allocation of " + std::to_string(bytes) +
                   " bytes exceeds memory budget of " + std::to_string(limit) +
                   " (live " + std::to_string(live) + ")");
  }
  raise_peak(g_peak, g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes);
  if (score) {
    raise_peak(g_score_peak,
               g_score_live.fetch_add(bytes, std::memory_order_relaxed) + bytes);
  }
}

void note_free(std::size_t bytes, bool score) noexcept {
  g_live.fetch_sub(bytes, std::memory_order_relaxed);
  if (score) {
    g_score_live.fetch_sub(bytes, std::memory_order_relaxed);
  }
}

std::size_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
std::size_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
std::size_t score_live_bytes() { return g_score_live.load(std::memory_order_relaxed); }
std::size_t score_peak_bytes() { return g_score_peak.load(std::memory_order_relaxed); }

void set_budget(std::size_t bytes) { g_budget.store(bytes, std::memory_order_relaxed); }
std::size_t budget() { return g_budget.load(std::memory_order_relaxed); }

ScoreRegion::ScoreRegion() { ++t_score_depth; }
ScoreRegion::~ScoreRegion() { --t_score_depth; }

bool in_score_region() { return t_score_depth > 0; }

Scope::Scope()
    : entry_live_(g_live.load(std::memory_order_relaxed)),
      entry_score_live_(g_score_live.load(std::memory_order_relaxed)),
      saved_peak_(g_peak.load(std::memory_order_relaxed)),
      saved_score_peak_(g_score_peak.load(std::memory_order_relaxed)) {
  g_peak.store(entry_live_, std::memory_order_relaxed);
  g_score_peak.store(entry_score_live_, std::memory_order_relaxed);
}

Scope::~Scope() {
  raise_peak(g_peak, saved_peak_);
  raise_peak(g_score_peak, saved_score_peak_);
}

std::size_t Scope::peak_over_entry() const {
  const std::size_t p = g_peak.load(std::memory_order_relaxed);
  return p > entry_live_ ? p - entry_live_ : 0;
}

std::size_t Scope::score_peak_over_entry() const {
  const std::size_t p = g_score_peak.load(std::memory_order_relaxed);
  return p > entry_score_live_ ? p - entry_score_live_ : 0;
}

}  // namespace tnpkr::memtrack
