#include "moesim/memory.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

namespace moesim {

const char* to_string(Tier tier) { return tier == Tier::kHigh ? "high" : "low"; }

const char* to_string(CacheEvent::Kind kind) {
  switch (kind) {
    case CacheEvent::Kind::kHit: return "hit";
    case CacheEvent::Kind::kMiss: return "miss";
    case CacheEvent::Kind::kAdmit: return "admit";
    case CacheEvent::Kind::kEvict: return "evict";
    case CacheEvent::Kind::kPromote: return "promote";
    case CacheEvent::Kind::kDemote: return "demote";
  }
  return "?";
}

void write_cache_events(std::ostream& out, std::span<const CacheEvent> events) {
  out << "time,event,layer,expert,tier\n";
  for (const auto& e : events) {
    out << e.time << ',' << to_string(e.kind) << ',' << e.expert.layer() << ','
        << e.expert.expert() << ',' << to_string(e.tier) << '\n';
  }
}

ExpertCache::ExpertCache(std::uint64_t capacity_bytes, std::uint64_t expert_size_bytes)
    : expert_size_(expert_size_bytes),
      slots_(expert_size_bytes == 0 ? 0 : capacity_bytes / expert_size_bytes) {
  if (expert_size_bytes == 0) throw ConfigError("expert size must be positive");
  if (slots_ == 0) {
    throw ConfigError("cache of " + std::to_string(capacity_bytes) +
                      " bytes cannot hold one expert of " + std::to_string(expert_size_bytes));
  }
}

void ExpertCache::log(std::uint64_t time, CacheEvent::Kind kind, ExpertId expert, Tier tier) {
  if (log_) log_->push_back(CacheEvent{time, kind, expert, tier});
}

void ExpertCache::move_to_back(ExpertId expert, Entry& entry, Tier tier) {
  list_of(entry.tier).erase(entry.pos);
  entry.tier = tier;
  auto& dst = list_of(tier);
  entry.pos = dst.insert(dst.end(), expert);
}

AccessResult ExpertCache::access(ExpertId expert, std::uint64_t now) {
  const auto it = entries_.find(expert);
  if (it == entries_.end()) {
    ++misses_;
    log(now, CacheEvent::Kind::kMiss, expert, Tier::kLow);
    return AccessResult::kMiss;
  }
  ++hits_;
  auto& e = it->second;
  e.last_access = std::max(e.last_access, now);
  e.touch = ++touch_seq_;
  move_to_back(expert, e, Tier::kHigh);
  log(now, CacheEvent::Kind::kHit, expert, Tier::kHigh);
  return AccessResult::kHit;
}

std::optional<ExpertId> ExpertCache::pick_victim() const {
  for (const auto* tier : {&low_, &high_}) {
    for (const auto& id : *tier) {
      if (entries_.at(id).pins == 0) return id;
    }
  }
  return std::nullopt;
}

bool ExpertCache::can_admit() const { return entries_.size() < slots_ || pick_victim().has_value(); }

std::vector<ExpertId> ExpertCache::admit(ExpertId expert, Tier tier, std::uint64_t now) {
  if (entries_.contains(expert)) {
    throw std::logic_error("expert " + to_string(expert) + " is already resident");
  }
  std::vector<ExpertId> victims;
  while (entries_.size() >= slots_) {
    const auto victim = pick_victim();
    if (!victim) throw std::runtime_error("cache full and every resident expert is pinned");
    const auto& ve = entries_.at(*victim);
    log(now, CacheEvent::Kind::kEvict, *victim, ve.tier);
    list_of(ve.tier).erase(ve.pos);
    entries_.erase(*victim);
    ++evictions_;
    victims.push_back(*victim);
  }
  Entry e;
  e.tier = tier;
  e.last_access = now;
  e.touch = ++touch_seq_;
  auto& dst = list_of(tier);
  e.pos = dst.insert(dst.end(), expert);
  entries_.emplace(expert, e);
  log(now, CacheEvent::Kind::kAdmit, expert, tier);
  return victims;
}

void ExpertCache::reassign_tiers(const std::unordered_set<ExpertId>& predicted,
                                 std::uint64_t window, std::uint64_t now) {
  std::vector<std::pair<std::uint64_t, ExpertId>> by_touch;
  by_touch.reserve(entries_.size());
  for (const auto& [id, e] : entries_) by_touch.emplace_back(e.touch, id);
  std::sort(by_touch.begin(), by_touch.end());
  high_.clear();
  low_.clear();
  for (const auto& [touch, id] : by_touch) {
    auto& e = entries_.at(id);
    const bool recent = now < window || e.last_access >= now - window;
    const Tier next = predicted.contains(id) || recent ? Tier::kHigh : Tier::kLow;
    if (next != e.tier) {
      log(now, next == Tier::kHigh ? CacheEvent::Kind::kPromote : CacheEvent::Kind::kDemote, id,
          next);
    }
    e.tier = next;
    auto& dst = list_of(next);
    e.pos = dst.insert(dst.end(), id);
  }
}

bool ExpertCache::erase(ExpertId expert) {
  const auto it = entries_.find(expert);
  if (it == entries_.end()) return false;
  list_of(it->second.tier).erase(it->second.pos);
  entries_.erase(it);
  return true;
}

void ExpertCache::pin(ExpertId expert) {
  const auto it = entries_.find(expert);
  if (it == entries_.end()) throw std::logic_error("cannot pin non-resident " + to_string(expert));
  ++it->second.pins;
}

void ExpertCache::unpin(ExpertId expert) {
  const auto it = entries_.find(expert);
  if (it != entries_.end() && it->second.pins > 0) --it->second.pins;
}

void ExpertCache::unpin_all() {
  for (auto& [id, e] : entries_) e.pins = 0;
}

bool ExpertCache::pinned(ExpertId expert) const {
  const auto it = entries_.find(expert);
  return it != entries_.end() && it->second.pins > 0;
}

std::optional<Tier> ExpertCache::tier_of(ExpertId expert) const {
  const auto it = entries_.find(expert);
  if (it == entries_.end()) return std::nullopt;
  return it->second.tier;
}

std::vector<ExpertId> ExpertCache::order(Tier tier) const {
  const auto& l = tier == Tier::kHigh ? high_ : low_;
  return {l.begin(), l.end()};
}

std::vector<ExpertId> ExpertCache::residents() const {
  std::vector<ExpertId> out;
  out.reserve(entries_.size());
  for (const auto& [id, e] : entries_) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

const char* to_string(Priority priority) {
  switch (priority) {
    case Priority::kMiss: return "miss";
    case Priority::kPrefetch: return "prefetch";
    case Priority::kEvict: return "evict";
  }
  return "?";
}

std::uint64_t TransferQueue::enqueue(TransferRequest r) {
  r.sequence = next_seq_++;
  if (r.direction == Direction::kIn) {
    if (pending_in_.contains(r.expert)) {
      throw std::logic_error("duplicate inbound transfer for " + to_string(r.expert));
    }
    pending_in_.emplace(r.expert, r.priority);
  }
  lane(r.priority).push_back(r);
  return r.sequence;
}

std::optional<TransferRequest> TransferQueue::pop() {
  for (auto& l : lanes_) {
    if (l.empty()) continue;
    auto r = l.front();
    l.pop_front();
    if (r.direction == Direction::kIn) pending_in_.erase(r.expert);
    return r;
  }
  return std::nullopt;
}

const TransferRequest* TransferQueue::peek() const {
  for (const auto& l : lanes_) {
    if (!l.empty()) return &l.front();
  }
  return nullptr;
}

bool TransferQueue::promote(ExpertId expert, Priority to, Nanos now) {
  const auto it = pending_in_.find(expert);
  if (it == pending_in_.end() || it->second <= to) return false;
  auto& src = lane(it->second);
  const auto pos = std::find_if(src.begin(), src.end(), [&](const TransferRequest& r) {
    return r.direction == Direction::kIn && r.expert == expert;
  });
  auto r = *pos;
  src.erase(pos);
  r.priority = to;
  r.enqueue_time = now;
  r.sequence = next_seq_++;
  lane(to).push_back(r);
  it->second = to;
  return true;
}

bool TransferQueue::cancel(ExpertId expert) {
  const auto it = pending_in_.find(expert);
  if (it == pending_in_.end()) return false;
  auto& src = lane(it->second);
  src.erase(std::find_if(src.begin(), src.end(), [&](const TransferRequest& r) {
    return r.direction == Direction::kIn && r.expert == expert;
  }));
  pending_in_.erase(it);
  return true;
}

std::optional<Priority> TransferQueue::pending_priority(ExpertId expert) const {
  const auto it = pending_in_.find(expert);
  if (it == pending_in_.end()) return std::nullopt;
  return it->second;
}

std::size_t TransferQueue::size() const noexcept {
  return lanes_[0].size() + lanes_[1].size() + lanes_[2].size();
}

BandwidthEstimator::BandwidthEstimator(double smoothing) : smoothing_(smoothing) {
  if (!(smoothing > 0.0 && smoothing <= 1.0)) throw ConfigError("smoothing must lie in (0, 1]");
}

void BandwidthEstimator::observe(std::uint64_t bytes, Nanos elapsed) {
  if (elapsed <= Nanos::zero()) return;
  const double sample = static_cast<double>(bytes) * 1e9 / static_cast<double>(elapsed.count());
  estimate_ = estimate_ ? smoothing_ * sample + (1.0 - smoothing_) * *estimate_ : sample;
}

std::uint64_t BandwidthEstimator::value_or(std::uint64_t fallback) const noexcept {
  if (!estimate_) return fallback;
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(*estimate_)));
}

}  // namespace moesim
