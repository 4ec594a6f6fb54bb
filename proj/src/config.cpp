#include "moesim/config.hpp"

#include <cmath>
#include <string>

namespace moesim {

void reject_unknown_keys(const Json& object, std::string_view section,
                         std::initializer_list<std::string_view> allowed) {
  if (!object.is_object()) {
    throw ConfigError(std::string(section) + ": expected an object");
  }
  for (const auto& [key, value] : object.items()) {
    bool known = false;
    for (auto name : allowed) known = known || key == name;
    if (!known) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
  }
}

ModelSpec model_from_json(const Json& j) {
  reject_unknown_keys(j, "model",
                      {"num_layers", "experts_per_layer", "expert_size_bytes", "top_k",
                       "vocab_size", "embed_dim"});
  ModelSpec m;
  m.num_layers = get_field<std::uint32_t>(j, "model", "num_layers");
  m.experts_per_layer = get_field<std::uint32_t>(j, "model", "experts_per_layer");
  m.expert_size_bytes = get_field<std::uint64_t>(j, "model", "expert_size_bytes");
  m.top_k = get_field<std::uint32_t>(j, "model", "top_k");
  m.vocab_size = get_field_or<std::uint32_t>(j, "model", "vocab_size", 32000);
  m.embed_dim = get_field_or<std::uint32_t>(j, "model", "embed_dim", 16);
  return m;
}

Json to_json(const ModelSpec& m) {
  return Json{{"num_layers", m.num_layers},
              {"experts_per_layer", m.experts_per_layer},
              {"expert_size_bytes", m.expert_size_bytes},
              {"top_k", m.top_k},
              {"vocab_size", m.vocab_size},
              {"embed_dim", m.embed_dim}};
}

HardwareSpec hardware_from_json(const Json& j) {
  reject_unknown_keys(j, "hardware",
                      {"preset", "link_bandwidth_bytes_per_sec", "layer_compute_time_sec",
                       "device_memory_bytes"});
  HardwareSpec hw;
  bool have_bandwidth = false;
  if (j.contains("preset")) {
    const auto name = get_field<std::string>(j, "hardware", "preset");
    const auto preset = find_preset(name);
    if (!preset) throw ConfigError("hardware: unknown device preset '" + name + "'");
    hw.link_bandwidth_bytes_per_sec = preset->link_bandwidth_bytes_per_sec;
    have_bandwidth = true;
  }
  if (j.contains("link_bandwidth_bytes_per_sec")) {
    hw.link_bandwidth_bytes_per_sec =
        get_field<std::uint64_t>(j, "hardware", "link_bandwidth_bytes_per_sec");
    have_bandwidth = true;
  }
  if (!have_bandwidth) {
    throw ConfigError("hardware: need either 'preset' or 'link_bandwidth_bytes_per_sec'");
  }
  const double seconds = get_field<double>(j, "hardware", "layer_compute_time_sec");
  if (!(seconds > 0.0) || !std::isfinite(seconds)) {
    throw ConfigError("hardware.layer_compute_time_sec: must be a positive number");
  }
  hw.layer_compute_time = Nanos(static_cast<std::int64_t>(std::llround(seconds * 1e9)));
  hw.device_memory_bytes = get_field<std::uint64_t>(j, "hardware", "device_memory_bytes");
  return hw;
}

Json to_json(const HardwareSpec& hw) {
  return Json{{"link_bandwidth_bytes_per_sec", hw.link_bandwidth_bytes_per_sec},
              {"layer_compute_time_sec", static_cast<double>(hw.layer_compute_time.count()) / 1e9},
              {"device_memory_bytes", hw.device_memory_bytes}};
}

}  // namespace moesim
