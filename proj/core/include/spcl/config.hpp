#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spcl/encoder.hpp"
#include "spcl/trainer.hpp"

namespace spcl {

// Ordered `key = value` pairs.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Duplicate keys and lines without '=' are errors.
KeyValues parse_key_values(std::string_view text, std::string_view source = "<config>");
KeyValues load_key_values(const std::string& path);
std::string format_key_values(const KeyValues& kv);

struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Applies recognized keys; any unknown key or unparsable value throws
/// ConfigError naming it.
void apply_key_values(RunConfig& cfg, const KeyValues& kv);
// Every key with its current value, in a fixed order. Reals round-trip exactly.
KeyValues to_key_values(const RunConfig& cfg);
std::vector<std::string> known_config_keys();

}  // namespace spcl
