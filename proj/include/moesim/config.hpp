#pragma once

#include <initializer_list>
#include <string_view>

#include <json.hpp>

#include "moesim/core.hpp"

namespace moesim {

using Json = nlohmann::json;

/// Throws ConfigError naming the first key of `object` that is not in `allowed`.
void reject_unknown_keys(const Json& object, std::string_view section,
                         std::initializer_list<std::string_view> allowed);

/// Keys: num_layers, experts_per_layer, expert_size_bytes, top_k, vocab_size, embed_dim.
ModelSpec model_from_json(const Json& j);
Json to_json(const ModelSpec& model);

/// Keys: link_bandwidth_bytes_per_sec, layer_compute_time_sec, device_memory_bytes,
/// preset. A preset supplies the bandwidth; an explicit bandwidth overrides it.
/// Unknown presets raise ConfigError naming the preset.
HardwareSpec hardware_from_json(const Json& j);
Json to_json(const HardwareSpec& hw);

/// Fetches `key` as T, rewrapping type errors as ConfigError with the key path.
template <typename T>
T get_field(const Json& j, std::string_view section, std::string_view key) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) {
    throw ConfigError(std::string(section) + ": missing required key '" + std::string(key) + "'");
  }
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(section) + "." + std::string(key) + ": " + e.what());
  }
}

template <typename T>
T get_field_or(const Json& j, std::string_view section, std::string_view key, T fallback) {
  if (!j.contains(std::string(key))) return fallback;
  return get_field<T>(j, section, key);
}

}  // namespace moesim
