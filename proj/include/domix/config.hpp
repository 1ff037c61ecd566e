#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "domix/model.hpp"
#include "domix/training.hpp"

namespace domix {

struct DecodeConfig {
  std::size_t beam = 5;
  std::size_t max_len = 0;  // 0: model.max_len
  double alpha = 1.0;
};

struct RunPaths {
  std::filesystem::path train, valid, test, vocab;
  std::filesystem::path out_dir = "run";
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  RunPaths paths;
  int min_freq = 1;

  void validate() const;
};

// Flat JSON object with dotted keys ("model.d", "train.max_steps", ...).
// Unknown keys and ill-typed values raise ConfigError naming the key.
// Relative paths resolve against base_dir.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Dotted-key snapshot; parse_run_config(to_json(c)) == c.
nlohmann::ordered_json to_json(const RunConfig& config);

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument("config key '" + key + "': " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace domix
