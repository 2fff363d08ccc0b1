#include "growkit/config.hpp"

#include <fmt/format.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "growkit/hash.hpp"

namespace growkit {

namespace {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

bool valid_key(std::string_view key) {
  if (key.empty()) return false;
  for (char c : key)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
      return false;
  return key.front() != '.' && key.back() != '.';
}

// Strips an unquoted trailing comment.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

ConfigValue parse_scalar(const std::string& raw, const std::string& where) {
  ConfigValue v;
  if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') {
    v.kind = ConfigValue::Kind::string;
    std::string out;
    for (size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) {
        ++i;
        switch (raw[i]) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          default:
            throw ConfigError(fmt::format("{}: unknown escape '\\{}'", where, raw[i]));
        }
      } else {
        out.push_back(raw[i]);
      }
    }
    v.s = std::move(out);
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = ConfigValue::Kind::boolean;
    v.b = raw == "true";
    return v;
  }
  // integer?
  {
    size_t pos = 0;
    bool ok = !raw.empty();
    if (ok && (raw[0] == '+' || raw[0] == '-')) pos = 1;
    ok = ok && pos < raw.size();
    for (size_t i = pos; ok && i < raw.size(); ++i)
      if (!std::isdigit(static_cast<unsigned char>(raw[i]))) ok = false;
    if (ok) {
      v.kind = ConfigValue::Kind::integer;
      v.i = std::stoll(raw);
      return v;
    }
  }
  // float?
  try {
    size_t used = 0;
    const double d = std::stod(raw, &used);
    if (used == raw.size()) {
      v.kind = ConfigValue::Kind::floating;
      v.f = d;
      return v;
    }
  } catch (...) {
  }
  throw ConfigError(fmt::format("{}: cannot parse value '{}'", where, raw));
}

ConfigValue parse_value(const std::string& raw, const std::string& where) {
  if (!raw.empty() && raw.front() == '[') {
    if (raw.back() != ']') throw ConfigError(fmt::format("{}: unterminated array", where));
    ConfigValue v;
    v.kind = ConfigValue::Kind::array;
    std::string body = raw.substr(1, raw.size() - 2);
    std::string item;
    bool in_str = false;
    auto flush = [&] {
      const std::string t = trim(item);
      if (!t.empty()) v.array.push_back(parse_scalar(t, where));
      item.clear();
    };
    for (char c : body) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        flush();
      } else {
        item.push_back(c);
      }
    }
    flush();
    return v;
  }
  return parse_scalar(raw, where);
}

}  // namespace

std::string ConfigValue::serialize() const {
  switch (kind) {
    case Kind::string: {
      std::string out = "\"";
      for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
          out += "\\n";
          continue;
        }
        out.push_back(c);
      }
      return out + "\"";
    }
    case Kind::integer: return std::to_string(i);
    case Kind::floating: return fmt::format("{}", f);
    case Kind::boolean: return b ? "true" : "false";
    case Kind::array: {
      std::string out = "[";
      for (size_t k = 0; k < array.size(); ++k) {
        if (k) out += ", ";
        out += array[k].serialize();
      }
      return out + "]";
    }
  }
  return "";
}

RunConfig RunConfig::parse_string(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::string section;
  int line_no = 0;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = fmt::format("{}:{}", origin, line_no);
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(fmt::format("{}: unterminated table header", where));
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_key(section))
        throw ConfigError(fmt::format("{}: bad table name '{}'", where, section));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(fmt::format("{}: expected 'key = value'", where));
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(fmt::format("{}: bad key '{}'", where, key));
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full))
      throw ConfigError(fmt::format("{}: duplicate key '{}'", where, full));
    cfg.values_[full] = parse_value(trim(line.substr(eq + 1)), where);
  }
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("config: cannot open '{}'", path));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_string(text, path);
}

void RunConfig::apply_override(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError(fmt::format("override '{}': expected key=value", assignment));
  const std::string key = trim(assignment.substr(0, eq));
  if (!valid_key(key)) throw ConfigError(fmt::format("override: bad key '{}'", key));
  const std::string raw = trim(assignment.substr(eq + 1));
  ConfigValue v;
  try {
    v = parse_value(raw, "override");
  } catch (const ConfigError&) {
    v.kind = ConfigValue::Kind::string;  // bare word
    v.s = raw;
  }
  values_[key] = std::move(v);
}

namespace {

[[noreturn]] void type_error(const std::string& key, const char* want) {
  throw ConfigError(fmt::format("config: '{}' must be a {}", key, want));
}

}  // namespace

int64_t RunConfig::get_int(const std::string& key, int64_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second.kind != ConfigValue::Kind::integer) type_error(key, "integer");
  return it->second.i;
}

int64_t RunConfig::require_int(const std::string& key) const {
  if (!has(key)) throw ConfigError(fmt::format("config: missing required key '{}'", key));
  return get_int(key, 0);
}

double RunConfig::get_float(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second.kind == ConfigValue::Kind::integer) return static_cast<double>(it->second.i);
  if (it->second.kind != ConfigValue::Kind::floating) type_error(key, "number");
  return it->second.f;
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second.kind != ConfigValue::Kind::boolean) type_error(key, "boolean");
  return it->second.b;
}

std::string RunConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second.kind != ConfigValue::Kind::string) type_error(key, "string");
  return it->second.s;
}

std::string RunConfig::require_string(const std::string& key) const {
  if (!has(key)) throw ConfigError(fmt::format("config: missing required key '{}'", key));
  return get_string(key, "");
}

std::vector<int> RunConfig::get_int_array(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return {};
  if (it->second.kind != ConfigValue::Kind::array) type_error(key, "array");
  std::vector<int> out;
  for (const auto& v : it->second.array) {
    if (v.kind != ConfigValue::Kind::integer) type_error(key, "integer array");
    out.push_back(static_cast<int>(v.i));
  }
  return out;
}

std::vector<std::string> RunConfig::get_string_array(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return {};
  if (it->second.kind != ConfigValue::Kind::array) type_error(key, "array");
  std::vector<std::string> out;
  for (const auto& v : it->second.array) {
    if (v.kind != ConfigValue::Kind::string) type_error(key, "string array");
    out.push_back(v.s);
  }
  return out;
}

std::vector<std::string> RunConfig::keys_under(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k.substr(prefix.size()));
  return out;
}

// ---- schema ----

namespace {

// key -> glob-free schema; "mix.ratio.*" style entries match one trailing
// component, "growth.stage*." entries match stage sub-tables.
const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys{
      "run.seed", "run.out_dir",
      "model.layers", "model.model_dim", "model.ffn_dim", "model.attn_heads", "model.kv_heads",
      "model.vocab_size", "model.head_dim", "model.rope_base", "model.rms_eps", "model.max_seq",
      "growth.base_checkpoint", "growth.depth_strategy", "growth.new_layers",
      "growth.insertion_positions", "growth.width_model_dim", "growth.width_ffn_dim",
      "growth.width_attn_heads", "growth.mask_steps", "growth.staggered_unmask",
      "growth.tolerance", "growth.stages",
      "data.input", "data.format", "data.strict", "data.rules", "data.min_length",
      "data.max_length", "data.charset_min_ratio", "data.ngram_n", "data.jaccard_threshold",
      "data.output",
      "mix.unit", "mix.chunk_tokens", "mix.budget", "mix.wrap",
      "train.checkpoint", "train.batch_size", "train.learning_rate", "train.steps",
      "train.neft_alpha", "train.optimizer", "train.beta1", "train.beta2", "train.eps",
      "train.weight_decay", "train.grad_clip", "train.seq_len", "train.corpus", "train.dataset",
      "train.mask_schedule",
      "kto.lambda_desired", "kto.lambda_undesired", "kto.beta", "kto.reference_kl_batch",
      "kto.dataset", "kto.cache", "kto.ref_checkpoint",
      "eval.checkpoint", "eval.dataset", "eval.dev", "eval.k", "eval.mode", "eval.threads",
      "eval.header", "eval.answer_cue",
      "report.input", "report.kind",
  };
  return keys;
}

bool key_known(const std::string& key) {
  for (const auto& k : known_keys())
    if (k == key) return true;
  // per-tag mixing ratios
  if (key.rfind("mix.ratio.", 0) == 0 && key.find('.', 10) == std::string::npos) return true;
  // staged growth sub-plans: growth.stage<N>.<plan key>
  if (key.rfind("growth.stage", 0) == 0) {
    const size_t dot = key.find('.', 12);
    if (dot != std::string::npos) {
      for (size_t i = 12; i < dot; ++i)
        if (!std::isdigit(static_cast<unsigned char>(key[i]))) return false;
      const std::string sub = "growth." + key.substr(dot + 1);
      for (const auto& k : known_keys())
        if (k == sub) return true;
    }
    return false;
  }
  return false;
}

void require_path(const RunConfig& cfg, const std::string& key) {
  const std::string p = cfg.require_string(key);
  if (!std::filesystem::exists(p))
    throw ConfigError(fmt::format("config: '{}' references missing path '{}'", key, p));
}

void require_path_if_set(const RunConfig& cfg, const std::string& key) {
  if (cfg.has(key)) require_path(cfg, key);
}

void require_model_source(const RunConfig& cfg, const std::string& ck_key) {
  if (cfg.has(ck_key)) {
    require_path(cfg, ck_key);
  } else if (!cfg.has("model.layers")) {
    throw ConfigError(fmt::format(
        "config: need either '{}' or a [model] section to build the model", ck_key));
  }
}

}  // namespace

void RunConfig::validate(const std::string& command) const {
  for (const auto& [key, v] : values_)
    if (!key_known(key)) throw ConfigError(fmt::format("config: unknown key '{}'", key));

  if (command == "grow") {
    require_path(*this, "growth.base_checkpoint");
  } else if (command == "filter") {
    require_path(*this, "data.input");
  } else if (command == "pretrain") {
    require_path(*this, "train.corpus");
    require_model_source(*this, "train.checkpoint");
    require_path_if_set(*this, "train.mask_schedule");
  } else if (command == "sft") {
    require_path(*this, "train.dataset");
    require_model_source(*this, "train.checkpoint");
  } else if (command == "kto") {
    require_path(*this, "kto.dataset");
    require_model_source(*this, "train.checkpoint");
    require_path_if_set(*this, "kto.ref_checkpoint");
    require_path_if_set(*this, "kto.cache");
  } else if (command == "cache-logits") {
    require_path(*this, "kto.dataset");
    require_model_source(*this, "train.checkpoint");
    if (!has("kto.cache"))
      throw ConfigError("config: missing required key 'kto.cache' (output store path)");
  } else if (command == "eval") {
    require_path(*this, "eval.dataset");
    require_path_if_set(*this, "eval.dev");
    require_model_source(*this, "eval.checkpoint");
  } else if (command == "report") {
    require_path(*this, "report.input");
  } else {
    throw ConfigError(fmt::format("config: unknown command '{}'", command));
  }
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += fmt::format("{}={}\n", k, v.serialize());
  return out;
}

std::string RunConfig::hash() const { return hex(sha256(canonical())); }

// ---- typed views ----

ModelConfig model_config_from(const RunConfig& cfg) {
  ModelConfig m;
  m.layers = static_cast<int>(cfg.require_int("model.layers"));
  m.model_dim = static_cast<int>(cfg.require_int("model.model_dim"));
  m.ffn_dim = static_cast<int>(cfg.require_int("model.ffn_dim"));
  m.attn_heads = static_cast<int>(cfg.require_int("model.attn_heads"));
  m.kv_heads = static_cast<int>(cfg.require_int("model.kv_heads"));
  m.vocab_size = static_cast<int>(cfg.get_int("model.vocab_size", kVocabSize));
  m.head_dim = static_cast<int>(cfg.get_int("model.head_dim", m.model_dim / m.attn_heads));
  m.rope_base = static_cast<float>(cfg.get_float("model.rope_base", 500000.0));
  m.rms_eps = static_cast<float>(cfg.get_float("model.rms_eps", 1e-5));
  m.max_seq = static_cast<int>(cfg.get_int("model.max_seq", 2048));
  m.validate();
  return m;
}

GrowthPlan growth_plan_from(const RunConfig& cfg, const std::string& prefix) {
  GrowthPlan plan;
  const std::string strategy = cfg.get_string(prefix + "depth_strategy", "none");
  if (strategy == "llamapro")
    plan.depth_strategy = DepthStrategy::llamapro;
  else if (strategy == "depthup")
    plan.depth_strategy = DepthStrategy::depthup;
  else if (strategy == "normal_init")
    plan.depth_strategy = DepthStrategy::normal_init;
  else if (strategy == "staged")
    plan.depth_strategy = DepthStrategy::staged;
  else if (strategy == "none")
    plan.depth_strategy = DepthStrategy::none;
  else
    throw ConfigError(fmt::format("config: unknown depth strategy '{}'", strategy));

  plan.new_layers = static_cast<int>(cfg.get_int(prefix + "new_layers", 0));
  plan.insertion_positions = cfg.get_int_array(prefix + "insertion_positions");
  if (cfg.has(prefix + "width_model_dim") || cfg.has(prefix + "width_ffn_dim") ||
      cfg.has(prefix + "width_attn_heads")) {
    WidthTargets t;
    t.model_dim = static_cast<int>(cfg.require_int(prefix + "width_model_dim"));
    t.ffn_dim = static_cast<int>(cfg.require_int(prefix + "width_ffn_dim"));
    t.attn_heads = static_cast<int>(cfg.require_int(prefix + "width_attn_heads"));
    plan.width_targets = t;
  }
  plan.mask_steps = static_cast<int>(cfg.get_int(prefix + "mask_steps", 100));
  plan.staggered_unmask = cfg.get_bool(prefix + "staggered_unmask", false);
  plan.seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  return plan;
}

TrainConfig train_config_from(const RunConfig& cfg, uint64_t run_seed) {
  TrainConfig t;
  t.batch_size = static_cast<int>(cfg.get_int("train.batch_size", 8));
  t.learning_rate = static_cast<float>(cfg.get_float("train.learning_rate", 1e-3));
  t.steps = static_cast<int>(cfg.get_int("train.steps", 100));
  t.neft_alpha = static_cast<float>(cfg.get_float("train.neft_alpha", 0.0));
  const std::string opt = cfg.get_string("train.optimizer", "adamw");
  if (opt == "sgd")
    t.optimizer.kind = OptimizerConfig::Kind::sgd;
  else if (opt == "adamw")
    t.optimizer.kind = OptimizerConfig::Kind::adamw;
  else
    throw ConfigError(fmt::format("config: unknown optimizer '{}'", opt));
  t.optimizer.beta1 = static_cast<float>(cfg.get_float("train.beta1", 0.9));
  t.optimizer.beta2 = static_cast<float>(cfg.get_float("train.beta2", 0.95));
  t.optimizer.eps = static_cast<float>(cfg.get_float("train.eps", 1e-8));
  t.optimizer.weight_decay = static_cast<float>(cfg.get_float("train.weight_decay", 0.0));
  const double clip = cfg.get_float("train.grad_clip", 1.0);
  t.grad_clip = clip > 0.0 ? std::optional<float>(static_cast<float>(clip)) : std::nullopt;
  t.seed = run_seed;
  t.validate();
  return t;
}

KtoConfig kto_config_from(const RunConfig& cfg) {
  KtoConfig k;
  k.lambda_desired = static_cast<float>(cfg.get_float("kto.lambda_desired", 1.375));
  k.lambda_undesired = static_cast<float>(cfg.get_float("kto.lambda_undesired", 1.0));
  k.beta = static_cast<float>(cfg.get_float("kto.beta", 0.1));
  k.reference_kl_batch = static_cast<int>(cfg.get_int("kto.reference_kl_batch", 8));
  k.validate();
  return k;
}

std::vector<FilterRule> filter_rules_from(const RunConfig& cfg) {
  std::vector<FilterRule> rules;
  for (const std::string& name : cfg.get_string_array("data.rules")) {
    FilterRule r;
    r.name = name;
    r.min_length = cfg.get_int("data.min_length", 1);
    r.max_length = cfg.get_int("data.max_length", 1 << 20);
    r.charset_min_ratio = cfg.get_float("data.charset_min_ratio", 0.5);
    r.ngram_n = static_cast<int>(cfg.get_int("data.ngram_n", 13));
    r.jaccard_threshold = cfg.get_float("data.jaccard_threshold", 0.8);
    rules.push_back(std::move(r));
  }
  return rules;
}

PromptTemplate prompt_template_from(const RunConfig& cfg) {
  PromptTemplate t;
  t.header = cfg.get_string("eval.header", "");
  t.answer_cue = cfg.get_string("eval.answer_cue", "Answer: ");
  return t;
}

}  // namespace growkit
