#include "moesim/activation_log.hpp"

#include <array>
#include <charconv>
#include <istream>
#include <ostream>
#include <string_view>

namespace moesim {

LogParseError::LogParseError(std::size_t line, std::string field, const std::string& what)
    : std::runtime_error("activation log line " + std::to_string(line) + ", field '" + field +
                         "': " + what),
      line_(line),
      field_(std::move(field)) {}

namespace {

constexpr std::array<std::string_view, 5> kFields = {
    "token_ids", "layer_idx", "predicted_experts", "actual_experts", "step_size"};

std::uint32_t parse_uint(std::string_view text, std::size_t line, std::string_view field) {
  std::uint32_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc{} || ptr != end) {
    throw LogParseError(line, std::string(field),
                        "expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::uint32_t> parse_list(std::string_view text, std::size_t line,
                                      std::string_view field) {
  std::vector<std::uint32_t> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(',', start);
    out.push_back(parse_uint(text.substr(start, pos - start), line, field));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

void check_experts(const std::vector<std::uint32_t>& experts, const ModelSpec& model,
                   std::size_t line, std::string_view field) {
  for (auto e : experts) {
    if (e >= model.experts_per_layer) {
      throw LogParseError(line, std::string(field),
                          "expert index " + std::to_string(e) + " >= experts_per_layer " +
                              std::to_string(model.experts_per_layer));
    }
  }
}

void append_list(std::string& out, const std::vector<std::uint32_t>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out.push_back(',');
    out += std::to_string(values[i]);
  }
}

}  // namespace

std::vector<Sample> parse_activation_log(std::istream& in, const ModelSpec& model) {
  std::vector<Sample> samples;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    std::array<std::string_view, kFields.size()> values;
    std::size_t start = 0;
    for (std::size_t f = 0; f < kFields.size(); ++f) {
      if (start > line.size()) {
        throw LogParseError(line_no, std::string(kFields[f]), "field missing");
      }
      const auto tab = line.find('\t', start);
      const auto item = line.substr(start, tab == std::string_view::npos ? line.npos : tab - start);
      const auto eq = item.find('=');
      if (eq == std::string_view::npos || item.substr(0, eq) != kFields[f]) {
        throw LogParseError(line_no, std::string(kFields[f]),
                            "expected '" + std::string(kFields[f]) + "=...', got '" +
                                std::string(item) + "'");
      }
      values[f] = item.substr(eq + 1);
      if (tab == std::string_view::npos) {
        start = line.size() + 1;
      } else {
        start = tab + 1;
      }
      if (f + 1 == kFields.size() && tab != std::string_view::npos) {
        throw LogParseError(line_no, "step_size", "unexpected trailing fields");
      }
    }

    Sample s;
    s.line = line_no;
    s.token_ids = parse_list(values[0], line_no, kFields[0]);
    s.layer_idx = parse_uint(values[1], line_no, kFields[1]);
    s.predicted_experts = parse_list(values[2], line_no, kFields[2]);
    s.actual_experts = parse_list(values[3], line_no, kFields[3]);
    s.step_size = parse_uint(values[4], line_no, kFields[4]);

    if (s.token_ids.empty()) throw LogParseError(line_no, "token_ids", "empty token list");
    for (auto t : s.token_ids) {
      if (t >= model.vocab_size) {
        throw LogParseError(line_no, "token_ids",
                            "token id " + std::to_string(t) + " >= vocab_size " +
                                std::to_string(model.vocab_size));
      }
    }
    if (s.layer_idx >= model.num_layers) {
      throw LogParseError(line_no, "layer_idx",
                          "layer " + std::to_string(s.layer_idx) + " >= num_layers " +
                              std::to_string(model.num_layers));
    }
    check_experts(s.predicted_experts, model, line_no, kFields[2]);
    check_experts(s.actual_experts, model, line_no, kFields[3]);
    if (s.actual_experts.empty()) {
      throw LogParseError(line_no, "actual_experts", "at least one expert must be active");
    }
    if (s.step_size < 1) throw LogParseError(line_no, "step_size", "step size must be >= 1");
    samples.push_back(std::move(s));
  }
  return samples;
}

std::string format_sample(const Sample& s) {
  std::string out = "token_ids=";
  append_list(out, s.token_ids);
  out += "\tlayer_idx=" + std::to_string(s.layer_idx);
  out += "\tpredicted_experts=";
  append_list(out, s.predicted_experts);
  out += "\tactual_experts=";
  append_list(out, s.actual_experts);
  out += "\tstep_size=" + std::to_string(s.step_size);
  return out;
}

void write_activation_log(std::ostream& out, std::span<const Sample> samples) {
  for (const auto& s : samples) out << format_sample(s) << '\n';
}

}  // namespace moesim
