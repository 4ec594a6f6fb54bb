#pragma once

// Line-oriented activation log. One record per line, tab-separated, fixed order:
//
//   token_ids=<ints>\tlayer_idx=<int>\tpredicted_experts=<ints>\tactual_experts=<ints>\tstep_size=<int>
//
// <ints> is a comma-separated list of decimal integers; predicted_experts may be
// empty. Blank lines and lines starting with '#' are ignored.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moesim/core.hpp"

namespace moesim {

struct Sample {
  std::vector<std::uint32_t> token_ids;
  std::uint32_t layer_idx = 0;
  std::vector<std::uint32_t> predicted_experts;
  std::vector<std::uint32_t> actual_experts;
  std::uint32_t step_size = 1;
  std::size_t line = 0;  // 1-based source line, 0 when synthesized

  bool same_record(const Sample& o) const {
    return token_ids == o.token_ids && layer_idx == o.layer_idx &&
           predicted_experts == o.predicted_experts && actual_experts == o.actual_experts &&
           step_size == o.step_size;
  }
};

class LogParseError : public std::runtime_error {
 public:
  LogParseError(std::size_t line, std::string field, const std::string& what);
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// Parses and bounds-checks every record against `model`.
std::vector<Sample> parse_activation_log(std::istream& in, const ModelSpec& model);

void write_activation_log(std::ostream& out, std::span<const Sample> samples);
std::string format_sample(const Sample& sample);

}  // namespace moesim
