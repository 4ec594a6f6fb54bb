#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <list>
#include <optional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "moesim/core.hpp"

namespace moesim {

enum class Tier : std::uint8_t { kHigh, kLow };
enum class AccessResult : std::uint8_t { kHit, kMiss };

const char* to_string(Tier tier);

struct CacheEvent {
  enum class Kind : std::uint8_t { kHit, kMiss, kAdmit, kEvict, kPromote, kDemote };
  std::uint64_t time = 0;  // logical time supplied by the caller
  Kind kind = Kind::kHit;
  ExpertId expert;
  Tier tier = Tier::kLow;  // tier after the event (before it, for evictions)

  bool operator==(const CacheEvent&) const = default;
};

const char* to_string(CacheEvent::Kind kind);

/// Columns: time,event,layer,expert,tier
void write_cache_events(std::ostream& out, std::span<const CacheEvent> events);

/// Device-resident expert set with two LRU tiers.
///
/// Eviction drains the low tier first, least recent first, and falls back to
/// the high tier only once the low tier is empty. Pinned experts are never
/// chosen as victims.
class ExpertCache {
 public:
  /// Throws ConfigError when not even one expert fits.
  ExpertCache(std::uint64_t capacity_bytes, std::uint64_t expert_size_bytes);

  /// Hit: refreshes recency and promotes to the high tier. Miss: no state change.
  AccessResult access(ExpertId expert, std::uint64_t now);

  /// Inserts a non-resident expert, evicting as needed; returns the victims in
  /// eviction order. Throws std::logic_error if already resident and
  /// std::runtime_error if every resident is pinned.
  std::vector<ExpertId> admit(ExpertId expert, Tier tier, std::uint64_t now);

  /// Predicted experts and everything touched within the last `window` time
  /// units go to the high tier; the rest go low. Recency order is kept.
  void reassign_tiers(const std::unordered_set<ExpertId>& predicted, std::uint64_t window,
                      std::uint64_t now);

  /// Removes a resident expert; false if it was not resident. Ignores pins.
  bool erase(ExpertId expert);

  void pin(ExpertId expert);
  void unpin(ExpertId expert);
  void unpin_all();
  bool pinned(ExpertId expert) const;

  bool contains(ExpertId expert) const { return entries_.contains(expert); }
  std::optional<Tier> tier_of(ExpertId expert) const;
  /// True when `admit` would succeed without throwing.
  bool can_admit() const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t capacity_slots() const noexcept { return slots_; }
  std::uint64_t used_bytes() const noexcept { return entries_.size() * expert_size_; }
  std::uint64_t capacity_bytes() const noexcept { return slots_ * expert_size_; }

  /// Residents of one tier, least recent first.
  std::vector<ExpertId> order(Tier tier) const;
  std::vector<ExpertId> residents() const;

  std::uint64_t hits() const noexcept { return hits_; }
  std::uint64_t misses() const noexcept { return misses_; }
  std::uint64_t evictions() const noexcept { return evictions_; }

  /// Appends every state change to `log` until reset with nullptr.
  void set_event_log(std::vector<CacheEvent>* log) noexcept { log_ = log; }

 private:
  struct Entry {
    Tier tier = Tier::kLow;
    std::uint64_t last_access = 0;
    std::uint64_t touch = 0;  // global recency sequence, breaks ties within one time unit
    std::uint32_t pins = 0;
    std::list<ExpertId>::iterator pos;
  };

  std::list<ExpertId>& list_of(Tier tier) { return tier == Tier::kHigh ? high_ : low_; }
  void move_to_back(ExpertId expert, Entry& entry, Tier tier);
  std::optional<ExpertId> pick_victim() const;
  void log(std::uint64_t time, CacheEvent::Kind kind, ExpertId expert, Tier tier);

  std::uint64_t expert_size_;
  std::size_t slots_;
  std::list<ExpertId> high_;  // front = least recent
  std::list<ExpertId> low_;
  std::unordered_map<ExpertId, Entry> entries_;
  std::uint64_t touch_seq_ = 0;
  std::uint64_t hits_ = 0;
  std::uint64_t misses_ = 0;
  std::uint64_t evictions_ = 0;
  std::vector<CacheEvent>* log_ = nullptr;
};

enum class Direction : std::uint8_t { kIn, kOut };
/// Lower value is served first.
enum class Priority : std::uint8_t { kMiss = 0, kPrefetch = 1, kEvict = 2 };

const char* to_string(Priority priority);

struct TransferRequest {
  ExpertId expert;
  Direction direction = Direction::kIn;
  Priority priority = Priority::kPrefetch;
  Nanos enqueue_time{0};
  std::uint64_t sequence = 0;  // assigned by the queue

  bool operator==(const TransferRequest&) const = default;
};

/// Host-device transfer requests: miss before prefetch before eviction, FIFO
/// within a class.
class TransferQueue {
 public:
  /// Returns the assigned sequence number.
  std::uint64_t enqueue(TransferRequest request);
  std::optional<TransferRequest> pop();
  const TransferRequest* peek() const;

  /// Moves a pending inbound request for `expert` into a more urgent class,
  /// queued behind that class's current members. False if nothing was pending
  /// or it was already at least as urgent.
  bool promote(ExpertId expert, Priority to, Nanos now);
  /// Drops a pending inbound request; false if none was pending.
  bool cancel(ExpertId expert);

  bool pending(ExpertId expert) const { return pending_in_.contains(expert); }
  std::optional<Priority> pending_priority(ExpertId expert) const;
  std::size_t size() const noexcept;
  bool empty() const noexcept { return size() == 0; }

 private:
  std::deque<TransferRequest>& lane(Priority p) { return lanes_[static_cast<int>(p)]; }
  std::deque<TransferRequest> lanes_[3];
  std::unordered_map<ExpertId, Priority> pending_in_;
  std::uint64_t next_seq_ = 0;
};

/// Exponentially weighted estimate of the link bandwidth.
class BandwidthEstimator {
 public:
  /// `smoothing` is the weight of each new observation, in (0, 1].
  explicit BandwidthEstimator(double smoothing = 0.5);

  void observe(std::uint64_t bytes, Nanos elapsed);
  std::optional<double> estimate() const noexcept { return estimate_; }
  /// The estimate, or `fallback` before the first observation.
  std::uint64_t value_or(std::uint64_t fallback) const noexcept;

 private:
  double smoothing_;
  std::optional<double> estimate_;
};

}  // namespace moesim
