#pragma once

#include <stdexcept>
#include <string>

#include "camforge/model.hpp"
#include "json.hpp"

namespace camforge {

/// A configuration value that could not be read; `key()` is the dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Strict reader over a JSON object: typed getters, and `finish()` rejects
/// keys that were never read.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& object, std::string path);

  bool has(const std::string& key) const;
  double number(const std::string& key, double fallback);
  std::size_t count(const std::string& key, std::size_t fallback);
  std::uint64_t seed(const std::string& key, std::uint64_t fallback);
  bool boolean(const std::string& key, bool fallback);
  std::string string(const std::string& key, const std::string& fallback);
  const nlohmann::json* child(const std::string& key);
  std::string path_of(const std::string& key) const;
  void finish() const;

 private:
  const nlohmann::json& object_;
  std::string path_;
  std::vector<std::string> seen_;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j, const std::string& path = "model",
                               const ModelSpec& defaults = {});

}  // namespace camforge
