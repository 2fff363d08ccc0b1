#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "growkit/data.hpp"
#include "growkit/error.hpp"
#include "growkit/eval.hpp"
#include "growkit/growth.hpp"
#include "growkit/model.hpp"
#include "growkit/train.hpp"

namespace growkit {

// Structured run configuration: a TOML-subset text format of [section]
// tables and key = value pairs (strings, integers, floats, booleans and
// flat scalar arrays; # comments). Keys are stored flattened as dotted
// paths and validated against a fixed schema, so typos fail loudly.

struct ConfigValue {
  enum class Kind { string, integer, floating, boolean, array };
  Kind kind = Kind::string;
  std::string s;
  int64_t i = 0;
  double f = 0.0;
  bool b = false;
  std::vector<ConfigValue> array;

  std::string serialize() const;
};

class RunConfig {
 public:
  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_string(const std::string& text, const std::string& origin = "<string>");

  // "section.key=value" with the same value grammar; bare words fall back
  // to strings.
  void apply_override(const std::string& assignment);

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  int64_t get_int(const std::string& key, int64_t fallback) const;
  int64_t require_int(const std::string& key) const;
  double get_float(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  std::vector<int> get_int_array(const std::string& key) const;
  std::vector<std::string> get_string_array(const std::string& key) const;

  // All keys under "prefix." with the prefix stripped.
  std::vector<std::string> keys_under(const std::string& prefix) const;

  // Rejects unknown keys; checks the sections `command` needs, including
  // that every referenced input path exists. Throws ConfigError naming the
  // offending field path.
  void validate(const std::string& command) const;

  // Sorted key=value rendering; the config hash is the SHA-256 of it.
  std::string canonical() const;
  std::string hash() const;

  const std::map<std::string, ConfigValue>& entries() const { return values_; }

 private:
  std::map<std::string, ConfigValue> values_;
};

// Typed views over the validated config.
ModelConfig model_config_from(const RunConfig& cfg);
GrowthPlan growth_plan_from(const RunConfig& cfg, const std::string& prefix = "growth.");
TrainConfig train_config_from(const RunConfig& cfg, uint64_t run_seed);
KtoConfig kto_config_from(const RunConfig& cfg);
std::vector<FilterRule> filter_rules_from(const RunConfig& cfg);
PromptTemplate prompt_template_from(const RunConfig& cfg);

}  // namespace growkit
