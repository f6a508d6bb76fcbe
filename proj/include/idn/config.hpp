#pragma once

// Architecture description, read from / written to JSON. The schema is
// documented in docs/config.md.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "idn/ops.hpp"

namespace idn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageConfig {
  std::string name;
  std::size_t channels = 0;
  std::size_t stride = 1;
  std::size_t upsample = 1;
  std::string skip;  // name of an earlier stage whose output is concatenated
  bool inject = false;
};

struct FusionConfig {
  std::string source;  // stage whose feature map the head reuses
  std::vector<StageConfig> stages;
};

struct IinConfig {
  std::size_t embedding_dim = 512;
  std::size_t predictor_hidden1 = 64;
  std::size_t predictor_hidden2 = 64;
  std::size_t modulator_hidden = 128;
  std::size_t embedding_input = 112;  // square crop size the embedding provider expects
};

// Declared targets for the main network (fusion head excluded).
struct BudgetConfig {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct ArchConfig {
  std::string name = "idn";
  std::size_t input_size = 224;
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;
  std::size_t kernel = 3;
  Activation activation = Activation::leaky_relu;
  std::vector<StageConfig> stages;
  FusionConfig fusion;
  IinConfig iin;
  std::optional<BudgetConfig> budget;
  std::uint64_t seed = 0;  // static parameter initialisation
};

namespace detail {

template <typename V>
V json_get(const nlohmann::json& j, const char* key, const V& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

inline StageConfig parse_stage(const nlohmann::json& j, const std::string& fallback_name) {
  if (!j.is_object()) throw ConfigError("stage entry must be an object");
  StageConfig s;
  s.name = json_get<std::string>(j, "name", fallback_name);
  if (!j.contains("channels")) throw ConfigError("stage '" + s.name + "' is missing 'channels'");
  s.channels = json_get<std::size_t>(j, "channels", 0);
  s.stride = json_get<std::size_t>(j, "stride", 1);
  s.upsample = json_get<std::size_t>(j, "upsample", 1);
  s.skip = json_get<std::string>(j, "skip", "");
  s.inject = json_get<bool>(j, "inject", false);
  if (s.channels == 0) throw ConfigError("stage '" + s.name + "' needs channels > 0");
  if (s.stride == 0 || s.upsample == 0) throw ConfigError("stage '" + s.name + "' needs stride/upsample >= 1");
  return s;
}

inline nlohmann::json stage_json(const StageConfig& s) {
  nlohmann::json j{{"name", s.name}, {"channels", s.channels}};
  if (s.stride != 1) j["stride"] = s.stride;
  if (s.upsample != 1) j["upsample"] = s.upsample;
  if (!s.skip.empty()) j["skip"] = s.skip;
  if (s.inject) j["inject"] = true;
  return j;
}

}  // namespace detail

inline ArchConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("architecture config must be a JSON object");
  ArchConfig c;
  c.name = detail::json_get<std::string>(j, "name", c.name);
  c.input_size = detail::json_get<std::size_t>(j, "input_size", c.input_size);
  c.in_channels = detail::json_get<std::size_t>(j, "in_channels", c.in_channels);
  c.out_channels = detail::json_get<std::size_t>(j, "out_channels", c.out_channels);
  c.kernel = detail::json_get<std::size_t>(j, "kernel", c.kernel);
  c.seed = detail::json_get<std::uint64_t>(j, "seed", c.seed);
  try {
    c.activation = activation_from_string(detail::json_get<std::string>(j, "activation", "leaky_relu"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.kernel == 0 || c.kernel % 2 == 0) throw ConfigError("kernel must be odd and >= 1");

  if (!j.contains("stages") || !j.at("stages").is_array() || j.at("stages").empty()) {
    throw ConfigError("config needs a non-empty 'stages' array");
  }
  std::size_t idx = 0;
  for (const auto& s : j.at("stages")) c.stages.push_back(detail::parse_stage(s, "stage" + std::to_string(idx++)));

  if (!j.contains("fusion")) throw ConfigError("config needs a 'fusion' object");
  const auto& f = j.at("fusion");
  c.fusion.source = detail::json_get<std::string>(f, "source", c.stages.back().name);
  if (f.contains("stages")) {
    idx = 0;
    for (const auto& s : f.at("stages")) {
      c.fusion.stages.push_back(detail::parse_stage(s, "fusion" + std::to_string(idx++)));
    }
  }

  if (j.contains("iin")) {
    const auto& i = j.at("iin");
    c.iin.embedding_dim = detail::json_get<std::size_t>(i, "embedding_dim", c.iin.embedding_dim);
    c.iin.predictor_hidden1 = detail::json_get<std::size_t>(i, "predictor_hidden1", c.iin.predictor_hidden1);
    c.iin.predictor_hidden2 = detail::json_get<std::size_t>(i, "predictor_hidden2", c.iin.predictor_hidden2);
    c.iin.modulator_hidden = detail::json_get<std::size_t>(i, "modulator_hidden", c.iin.modulator_hidden);
    c.iin.embedding_input = detail::json_get<std::size_t>(i, "embedding_input", c.iin.embedding_input);
  }
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    c.budget = BudgetConfig{detail::json_get<std::uint64_t>(b, "params", 0), detail::json_get<std::uint64_t>(b, "macs", 0)};
  }
  return c;
}

inline nlohmann::json to_json(const ArchConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["input_size"] = c.input_size;
  j["in_channels"] = c.in_channels;
  j["out_channels"] = c.out_channels;
  j["kernel"] = c.kernel;
  j["activation"] = std::string(to_string(c.activation));
  j["seed"] = c.seed;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : c.stages) j["stages"].push_back(detail::stage_json(s));
  j["fusion"] = {{"source", c.fusion.source}, {"stages", nlohmann::json::array()}};
  for (const auto& s : c.fusion.stages) j["fusion"]["stages"].push_back(detail::stage_json(s));
  j["iin"] = {{"embedding_dim", c.iin.embedding_dim},
              {"predictor_hidden1", c.iin.predictor_hidden1},
              {"predictor_hidden2", c.iin.predictor_hidden2},
              {"modulator_hidden", c.iin.modulator_hidden},
              {"embedding_input", c.iin.embedding_input}};
  if (c.budget) j["budget"] = {{"params", c.budget->params}, {"macs", c.budget->macs}};
  return j;
}

inline ArchConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed config JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ArchConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace idn
