#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moesim {

using Nanos = std::chrono::nanoseconds;

/// Raised for malformed inputs that a caller could have checked up front.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Static description of the MoE model being served.
struct ModelSpec {
  std::uint32_t num_layers = 1;
  std::uint32_t experts_per_layer = 1;
  std::uint64_t expert_size_bytes = 1;
  std::uint32_t top_k = 1;
  std::uint32_t vocab_size = 1;
  std::uint32_t embed_dim = 1;

  bool operator==(const ModelSpec&) const = default;
};

/// Host-device link and compute profile of one accelerator.
struct HardwareSpec {
  std::uint64_t link_bandwidth_bytes_per_sec = 1;
  Nanos layer_compute_time{1};
  std::uint64_t device_memory_bytes = 1;

  bool operator==(const HardwareSpec&) const = default;
};

/// (layer, expert) coordinate. Ordered layer-major so ties break deterministically.
class ExpertId {
 public:
  ExpertId() = default;
  /// Throws std::out_of_range when either index is outside the model.
  ExpertId(const ModelSpec& model, std::uint32_t layer, std::uint32_t expert);

  /// Trusted construction for indices already validated by the caller.
  static constexpr ExpertId unchecked(std::uint32_t layer, std::uint32_t expert) noexcept {
    ExpertId id;
    id.layer_ = layer;
    id.expert_ = expert;
    return id;
  }

  constexpr std::uint32_t layer() const noexcept { return layer_; }
  constexpr std::uint32_t expert() const noexcept { return expert_; }
  constexpr std::uint64_t packed() const noexcept {
    return (static_cast<std::uint64_t>(layer_) << 32) | expert_;
  }

  constexpr auto operator<=>(const ExpertId&) const = default;

 private:
  std::uint32_t layer_ = 0;
  std::uint32_t expert_ = 0;
};

std::string to_string(const ExpertId& id);

/// Root of all randomness. Sub-seeds are derived per module name so that one
/// module's draw count never shifts another module's stream.
struct Seed {
  std::uint64_t value = 0;

  Seed derive(std::string_view name) const noexcept;
  Seed derive(std::uint64_t index) const noexcept;

  bool operator==(const Seed&) const = default;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;

struct ValidationReport {
  std::vector<std::string> violations;
  std::vector<std::string> warnings;

  bool ok() const noexcept { return violations.empty(); }
};

/// Pure check of every ModelSpec/HardwareSpec invariant. Never throws.
ValidationReport validate(const ModelSpec& model, const HardwareSpec& hw);

/// Throws ConfigError listing every violation when the pair is invalid.
void require_valid(const ModelSpec& model, const HardwareSpec& hw);

struct DevicePreset {
  std::string_view name;
  std::uint64_t link_bandwidth_bytes_per_sec;
};

inline constexpr std::uint64_t kGB = 1'000'000'000ULL;
inline constexpr std::uint64_t kMB = 1'000'000ULL;

/// Host-device bandwidth of the reference devices, in decimal GB/s.
const std::vector<DevicePreset>& device_presets();

/// Case-insensitive lookup; ignores spaces, dashes and underscores.
std::optional<DevicePreset> find_preset(std::string_view name);

}  // namespace moesim

template <>
struct std::hash<moesim::ExpertId> {
  std::size_t operator()(const moesim::ExpertId& id) const noexcept {
    return std::hash<std::uint64_t>{}(moesim::splitmix64(id.packed()));
  }
};
