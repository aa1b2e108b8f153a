#include "spcl/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "spcl/error.hpp"

namespace spcl {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

template <class T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse integer from '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse number from '" + value + "'");
  }
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SPCL_SIZE_FIELD(section, name)                                                   \
  Field {                                                                                \
    #name, [](const RunConfig& c) { return std::to_string(c.section.name); },             \
        [](RunConfig& c, const std::string& v) {                                         \
          c.section.name = parse_integer<std::size_t>(#name, v);                         \
        }                                                                                \
  }
#define SPCL_INT_FIELD(section, name)                                                    \
  Field {                                                                                \
    #name, [](const RunConfig& c) { return std::to_string(c.section.name); },             \
        [](RunConfig& c, const std::string& v) {                                         \
          c.section.name = parse_integer<std::int64_t>(#name, v);                        \
        }                                                                                \
  }
#define SPCL_REAL_FIELD(section, name)                                                   \
  Field {                                                                                \
    #name, [](const RunConfig& c) { return fmt_double(c.section.name); },                 \
        [](RunConfig& c, const std::string& v) { c.section.name = parse_real(#name, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SPCL_SIZE_FIELD(encoder, depth),
      SPCL_SIZE_FIELD(encoder, dim),
      SPCL_SIZE_FIELD(encoder, heads),
      SPCL_SIZE_FIELD(encoder, mlp_ratio),
      SPCL_SIZE_FIELD(encoder, patch),
      SPCL_SIZE_FIELD(encoder, image),
      Field{"layer_norm_eps", [](const RunConfig& c) { return fmt_float(c.encoder.layer_norm_eps); },
            [](RunConfig& c, const std::string& v) {
              c.encoder.layer_norm_eps = static_cast<float>(parse_real("layer_norm_eps", v));
            }},
      Field{"pixel_mean", [](const RunConfig& c) { return fmt_float(c.encoder.pixels.mean); },
            [](RunConfig& c, const std::string& v) {
              c.encoder.pixels.mean = static_cast<float>(parse_real("pixel_mean", v));
            }},
      Field{"pixel_std", [](const RunConfig& c) { return fmt_float(c.encoder.pixels.std); },
            [](RunConfig& c, const std::string& v) {
              c.encoder.pixels.std = static_cast<float>(parse_real("pixel_std", v));
            }},
      SPCL_SIZE_FIELD(train, epochs),
      SPCL_SIZE_FIELD(train, batch_size),
      SPCL_SIZE_FIELD(train, accum_steps),
      SPCL_REAL_FIELD(train, lr_peak),
      SPCL_INT_FIELD(train, warmup_steps),
      SPCL_INT_FIELD(train, total_steps),
      SPCL_REAL_FIELD(train, weight_decay),
      SPCL_REAL_FIELD(train, beta1),
      SPCL_REAL_FIELD(train, beta2),
      SPCL_REAL_FIELD(train, adam_eps),
      SPCL_REAL_FIELD(train, mask_ratio),
      SPCL_REAL_FIELD(train, kappa),
      SPCL_REAL_FIELD(train, tau_init),
      SPCL_REAL_FIELD(train, tau_min),
      SPCL_REAL_FIELD(train, tau_max),
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v) { c.train.seed = parse_integer<std::uint64_t>("seed", v); }},
      SPCL_SIZE_FIELD(train, checkpoint_every),
      SPCL_SIZE_FIELD(train, threads),
  };
  return table;
}

#undef SPCL_SIZE_FIELD
#undef SPCL_INT_FIELD
#undef SPCL_REAL_FIELD

}  // namespace

KeyValues parse_key_values(std::string_view text, std::string_view source) {
  KeyValues out;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path);
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

void apply_key_values(RunConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    bool found = false;
    for (const auto& f : fields()) {
      if (key == f.key) {
        f.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key '" + key + "'");
  }
}

KeyValues to_key_values(const RunConfig& cfg) {
  KeyValues kv;
  for (const auto& f : fields()) kv.emplace_back(f.key, f.get(cfg));
  return kv;
}

std::vector<std::string> known_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

}  // namespace spcl
