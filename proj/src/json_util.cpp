#include "camforge/json_util.hpp"

#include <algorithm>
#include <cmath>

namespace camforge {

JsonReader::JsonReader(const nlohmann::json& object, std::string path)
    : object_(object), path_(std::move(path)) {
  if (!object_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
}

std::string JsonReader::path_of(const std::string& key) const {
  return path_.empty() ? key : path_ + "." + key;
}

bool JsonReader::has(const std::string& key) const { return object_.contains(key); }

double JsonReader::number(const std::string& key, double fallback) {
  seen_.push_back(key);
  if (!has(key)) return fallback;
  const auto& v = object_.at(key);
  if (!v.is_number()) throw ConfigError(path_of(key), "expected a number");
  return v.get<double>();
}

std::size_t JsonReader::count(const std::string& key, std::size_t fallback) {
  seen_.push_back(key);
  if (!has(key)) return fallback;
  const auto& v = object_.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(path_of(key), "expected a nonnegative integer");
  }
  return v.get<std::size_t>();
}

std::uint64_t JsonReader::seed(const std::string& key, std::uint64_t fallback) {
  return static_cast<std::uint64_t>(count(key, static_cast<std::size_t>(fallback)));
}

bool JsonReader::boolean(const std::string& key, bool fallback) {
  seen_.push_back(key);
  if (!has(key)) return fallback;
  const auto& v = object_.at(key);
  if (!v.is_boolean()) throw ConfigError(path_of(key), "expected true or false");
  return v.get<bool>();
}

std::string JsonReader::string(const std::string& key, const std::string& fallback) {
  seen_.push_back(key);
  if (!has(key)) return fallback;
  const auto& v = object_.at(key);
  if (!v.is_string()) throw ConfigError(path_of(key), "expected a string");
  return v.get<std::string>();
}

const nlohmann::json* JsonReader::child(const std::string& key) {
  seen_.push_back(key);
  return has(key) ? &object_.at(key) : nullptr;
}

void JsonReader::finish() const {
  for (const auto& [key, value] : object_.items()) {
    if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
      throw ConfigError(path_of(key), "unknown key");
    }
  }
}

nlohmann::json to_json(const ModelSpec& spec) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : spec.stages) {
    stages.push_back({{"num_blocks", s.num_blocks}, {"channels", s.channels}, {"stride", s.stride}});
  }
  return {{"in_channels", spec.in_channels},
          {"height", spec.height},
          {"width", spec.width},
          {"stem_channels", spec.stem_channels},
          {"stem_kernel", spec.stem_kernel},
          {"stem_stride", spec.stem_stride},
          {"stages", stages},
          {"dropout_rate", spec.dropout_rate},
          {"dropout_sites", spec.dropout_sites == DropoutSites::head_only ? "head_only" : "per_stage"}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j, const std::string& path, const ModelSpec& defaults) {
  JsonReader r(j, path);
  ModelSpec s = defaults;
  s.in_channels = r.count("in_channels", s.in_channels);
  s.height = r.count("height", s.height);
  s.width = r.count("width", s.width);
  s.stem_channels = r.count("stem_channels", s.stem_channels);
  s.stem_kernel = r.count("stem_kernel", s.stem_kernel);
  s.stem_stride = r.count("stem_stride", s.stem_stride);
  s.dropout_rate = r.number("dropout_rate", s.dropout_rate);
  const std::string sites = r.string("dropout_sites", s.dropout_sites == DropoutSites::head_only ? "head_only" : "per_stage");
  if (sites == "head_only") {
    s.dropout_sites = DropoutSites::head_only;
  } else if (sites == "per_stage") {
    s.dropout_sites = DropoutSites::per_stage;
  } else {
    throw ConfigError(r.path_of("dropout_sites"), "expected head_only or per_stage");
  }
  if (const auto* stages = r.child("stages")) {
    if (!stages->is_array()) throw ConfigError(r.path_of("stages"), "expected an array");
    s.stages.clear();
    for (std::size_t i = 0; i < stages->size(); ++i) {
      JsonReader sr((*stages)[i], r.path_of("stages") + "[" + std::to_string(i) + "]");
      StageSpec st;
      st.num_blocks = sr.count("num_blocks", st.num_blocks);
      st.channels = sr.count("channels", st.channels);
      st.stride = sr.count("stride", st.stride);
      sr.finish();
      s.stages.push_back(st);
    }
  }
  r.finish();
  return s;
}

}  // namespace camforge
