#include "moesim/core.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace moesim {

ExpertId::ExpertId(const ModelSpec& model, std::uint32_t layer, std::uint32_t expert)
    : layer_(layer), expert_(expert) {
  if (layer >= model.num_layers) {
    throw std::out_of_range("layer index " + std::to_string(layer) + " outside [0, " +
                            std::to_string(model.num_layers) + ")");
  }
  if (expert >= model.experts_per_layer) {
    throw std::out_of_range("expert index " + std::to_string(expert) + " outside [0, " +
                            std::to_string(model.experts_per_layer) + ")");
  }
}

std::string to_string(const ExpertId& id) {
  return "L" + std::to_string(id.layer()) + "E" + std::to_string(id.expert());
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Seed Seed::derive(std::string_view name) const noexcept {
  return Seed{splitmix64(value ^ splitmix64(fnv1a64(name)))};
}

Seed Seed::derive(std::uint64_t index) const noexcept {
  return Seed{splitmix64(splitmix64(value) + 0x632be59bd9b4e019ULL * (index + 1))};
}

ValidationReport validate(const ModelSpec& model, const HardwareSpec& hw) {
  ValidationReport report;
  auto violate = [&](bool bad, const char* what) {
    if (bad) report.violations.emplace_back(what);
  };
  violate(model.num_layers < 1, "num_layers >= 1");
  violate(model.experts_per_layer < 1, "experts_per_layer >= 1");
  violate(model.top_k < 1, "top_k >= 1");
  violate(model.top_k > model.experts_per_layer, "top_k <= experts_per_layer");
  violate(model.expert_size_bytes == 0, "expert_size_bytes > 0");
  violate(model.vocab_size < 1, "vocab_size >= 1");
  violate(model.embed_dim < 1, "embed_dim >= 1");
  violate(hw.link_bandwidth_bytes_per_sec == 0, "link_bandwidth_bytes_per_sec > 0");
  violate(hw.layer_compute_time <= Nanos::zero(), "layer_compute_time > 0");
  violate(hw.device_memory_bytes == 0, "device_memory_bytes > 0");
  violate(hw.device_memory_bytes < model.expert_size_bytes,
          "device_memory_bytes >= expert_size_bytes");

  // Below one full pass of top-k experts the cache must evict within a pass.
  const auto demand = static_cast<unsigned __int128>(model.num_layers) * model.top_k *
                      model.expert_size_bytes;
  if (report.ok() && hw.device_memory_bytes < demand) {
    std::ostringstream msg;
    msg << "device_memory_bytes (" << hw.device_memory_bytes
        << ") is below num_layers * top_k * expert_size_bytes ("
        << static_cast<std::uint64_t>(demand) << "); expect capacity-driven reloads";
    report.warnings.push_back(msg.str());
  }
  return report;
}

void require_valid(const ModelSpec& model, const HardwareSpec& hw) {
  const auto report = validate(model, hw);
  if (report.ok()) return;
  std::string msg = "invalid configuration:";
  for (const auto& v : report.violations) msg += " [" + v + "]";
  throw ConfigError(msg);
}

const std::vector<DevicePreset>& device_presets() {
  static const std::vector<DevicePreset> presets = {
      {"H20", 128 * kGB},     {"910B", 128 * kGB},    {"A100", 64 * kGB},
      {"A6000", 64 * kGB},    {"RTX4090", 32 * kGB},  {"ArcB580", 16 * kGB},
      {"RX6500XT", 8 * kGB},
  };
  return presets;
}

namespace {

std::string canonical_device_name(std::string_view name) {
  std::string out;
  for (char c : name) {
    if (c == ' ' || c == '-' || c == '_') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  // Accept vendor-prefixed spellings such as "NVIDIA A6000" or "Ascend 910B".
  for (std::string_view prefix : {"nvidia", "ascend", "intel", "amdradeon", "amd", "geforce"}) {
    if (out.starts_with(prefix) && out.size() > prefix.size()) out.erase(0, prefix.size());
  }
  return out;
}

}  // namespace

std::optional<DevicePreset> find_preset(std::string_view name) {
  const std::string wanted = canonical_device_name(name);
  for (const auto& preset : device_presets()) {
    if (canonical_device_name(preset.name) == wanted) return preset;
  }
  return std::nullopt;
}

}  // namespace moesim
