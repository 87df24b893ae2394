#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <type_traits>

#include "tnpkr/errors.hpp"

namespace tnpkr::memtrack {

// Lightweight accounting of tensor buffer allocations. Two ledgers: one for
// every tracked buffer, one for buffers tagged as attention score storage
// (allocated inside a ScoreRegion). The bench harness reads both to report
// peak transient bytes per engine call.

void note_alloc(std::size_t bytes, bool score);
void note_free(std::size_t bytes, bool score) noexcept;

std::size_t live_bytes();
std::size_t peak_bytes();
std::size_t score_live_bytes();
std::size_t score_peak_bytes();

// Budget in bytes; 0 disables the check. Exceeding it throws OomError from
// note_alloc before the allocation is counted.
void set_budget(std::size_t bytes);
std::size_t budget();

// Marks buffers constructed on the current thread as score storage.
struct ScoreRegion {
  ScoreRegion();
  ~ScoreRegion();
  ScoreRegion(const ScoreRegion&) = delete;
  ScoreRegion& operator=(const ScoreRegion&) = delete;
};

bool in_score_region();

// Measures allocation peaks relative to scope entry.
class Scope {
 public:
  Scope();
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;
  // Peak bytes above the live level at scope entry, observed so far.
  std::size_t peak_over_entry() const;
  std::size_t score_peak_over_entry() const;

 private:
  std::size_t entry_live_;
  std::size_t entry_score_live_;
  std::size_t saved_peak_;
  std::size_t saved_score_peak_;
};

// The score tag is captured when the allocator is constructed, so a buffer
// created inside a ScoreRegion stays on the score ledger until it is freed,
// wherever that happens.
template <typename T>
struct TrackingAllocator {
  using value_type = T;
  using propagate_on_container_copy_assignment = std::true_type;
  using propagate_on_container_move_assignment = std::true_type;
  using propagate_on_container_swap = std::true_type;

  bool score = false;

  TrackingAllocator() noexcept : score(in_score_region()) {}
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>& other) noexcept : score(other.score) {}

  T* allocate(std::size_t n) {
    note_alloc(n * sizeof(T), score);
    return static_cast<T*>(::operator new(n * sizeof(T)));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    note_free(n * sizeof(T), score);
    ::operator delete(p);
  }
  bool operator==(const TrackingAllocator& o) const noexcept { return score == o.score; }
  bool operator!=(const TrackingAllocator& o) const noexcept { return score != o.score; }
};

}  // namespace tnpkr::memtrack
