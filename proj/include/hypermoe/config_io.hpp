#pragma once

#include <string>

#include "json.hpp"

#include "hypermoe/config.hpp"

namespace hypermoe {

/// Config files are JSON objects with optional "model", "optimizer" and
/// "task" sections. Missing keys keep their defaults; unknown keys and values
/// of the wrong type raise ConfigError naming the key, and syntax errors
/// report line and column.
RunConfig parse_run_config(const std::string& text,
                           const std::string& origin = "<config>");
RunConfig load_run_config(const std::string& path);

nlohmann::json to_json(const ModelConfig& cfg);  // includes "optimizer"
nlohmann::json to_json(const TaskConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);

ModelConfig model_config_from_json(const nlohmann::json& j);
TaskConfig task_config_from_json(const nlohmann::json& j);

// First key whose value differs between two configs, or "" when identical.
std::string first_difference(const nlohmann::json& a, const nlohmann::json& b,
                             const std::string& prefix = "");

}  // namespace hypermoe
