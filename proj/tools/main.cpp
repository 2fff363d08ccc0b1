// growkit command-line tool: config-driven model growth, data filtering,
// training and evaluation runs. Every command reads one structured config
// file (plus --set overrides), writes its artifacts under the run output
// directory and records a manifest with the config hash.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdlib>
#include <optional>
#include <filesystem>
#include <fstream>

#include "growkit/checkpoint.hpp"
#include "growkit/config.hpp"
#include "growkit/data.hpp"
#include "growkit/eval.hpp"
#include "growkit/growth.hpp"
#include "growkit/model.hpp"
#include "growkit/train.hpp"

#ifndef GROWKIT_VERSION
#define GROWKIT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace growkit;

namespace {

struct CommandArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_override;
};

fs::path resolve_out_dir(const RunConfig& cfg, const CommandArgs& args) {
  std::string out = args.out_override.empty() ? cfg.get_string("run.out_dir", "out") : args.out_override;
  fs::path p(out);
  if (const char* root = std::getenv("GROWKIT_OUT"); root && p.is_relative())
    p = fs::path(root) / p;
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot write '{}'", path.string()));
  f << content;
}

void write_manifest(const fs::path& out_dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::string>& artifacts) {
  json m{{"command", command},
         {"config_hash", cfg.hash()},
         {"version", GROWKIT_VERSION},
         {"artifacts", artifacts}};
  write_text(out_dir / "manifest.json", m.dump(2) + "\n");
}

struct ModelHandle {
  ModelConfig config;
  TransformerWeights weights;
};

ModelHandle model_from_config_or_checkpoint(const RunConfig& cfg, const std::string& ck_key,
                                            uint64_t seed) {
  if (cfg.has(ck_key)) {
    LoadedCheckpoint ck = load_checkpoint(cfg.require_string(ck_key));
    return {ck.config, std::move(ck.weights)};
  }
  ModelConfig mc = model_config_from(cfg);
  return {mc, init_model(mc, seed)};
}

TransformerWeights deep_copy(const TransformerWeights& w) {
  TransformerWeights out;
  out.layers.resize(w.layers.size());
  auto src = named_parameters(w);
  auto dst = named_parameters(out);
  for (size_t i = 0; i < src.size(); ++i) {
    *dst[i].second = src[i].second->clone();
    dst[i].second->set_requires_grad();
  }
  return out;
}

// ---- dataset loaders (token framing: prompts get BOS, targets get EOS) ----

std::vector<InstructionExample> load_instruction_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path));
  std::vector<InstructionExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    InstructionExample ex;
    ex.prompt = tokenize(j.at("prompt").get<std::string>(), false);
    ex.prompt.insert(ex.prompt.begin(), kBos);
    ex.response = tokenize(j.value("response", std::string()), false);
    if (!ex.response.empty()) ex.response.push_back(kEos);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PreferenceExample> load_preference_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}'", path));
  std::vector<PreferenceExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    PreferenceExample ex;
    ex.prompt = tokenize(j.at("prompt").get<std::string>(), false);
    ex.prompt.insert(ex.prompt.begin(), kBos);
    ex.completion = tokenize(j.at("completion").get<std::string>(), false);
    ex.completion.push_back(kEos);
    ex.desirable = j.at("desirable").get<bool>();
    out.push_back(std::move(ex));
  }
  return out;
}

std::string metrics_jsonl(const std::vector<StepMetrics>& log) {
  std::string out;
  for (const auto& m : log) out += m.to_json().dump() + "\n";
  return out;
}

std::string metrics_jsonl(const std::vector<KtoStepMetrics>& log) {
  std::string out;
  for (const auto& m : log) out += m.to_json().dump() + "\n";
  return out;
}

// Token sequences for pretraining: optionally language-mixed, then cut into
// seq_len windows.
std::vector<std::vector<int>> pretraining_sequences(const RunConfig& cfg, uint64_t seed) {
  const int seq_len = static_cast<int>(cfg.get_int("train.seq_len", 64));
  const int steps = static_cast<int>(cfg.get_int("train.steps", 100));
  const int batch = static_cast<int>(cfg.get_int("train.batch_size", 8));
  std::vector<Document> docs = ingest_all(cfg.require_string("train.corpus"), IngestFormat::jsonl,
                                          cfg.get_bool("data.strict", false));
  if (docs.empty()) throw ContractError("pretrain: corpus is empty");

  std::vector<std::vector<int>> seqs;
  const auto ratio_tags = cfg.keys_under("mix.ratio.");
  if (!ratio_tags.empty()) {
    MixSpec spec;
    for (const auto& tag : ratio_tags) spec.ratio[tag] = cfg.get_float("mix.ratio." + tag, 1.0);
    const std::string unit = cfg.get_string("mix.unit", "token");
    spec.unit = unit == "document" ? MixSpec::Unit::document : MixSpec::Unit::token;
    std::map<std::string, std::vector<Document>> corpora;
    for (const auto& d : docs) corpora[d.language_tag].push_back(d);
    const int64_t budget =
        cfg.get_int("mix.budget", static_cast<int64_t>(steps) * batch * seq_len);
    MixResult mixed = mix_sampler(corpora, spec, seed, budget,
                                  static_cast<int>(cfg.get_int("mix.chunk_tokens", seq_len)),
                                  cfg.get_bool("mix.wrap", true));
    for (auto& chunk : mixed.stream)
      if (chunk.tokens.size() >= 2) seqs.push_back(std::move(chunk.tokens));
  } else {
    for (const auto& d : docs) {
      const std::vector<int> toks = tokenize(d.text);
      for (size_t off = 0; off + 2 <= toks.size(); off += static_cast<size_t>(seq_len)) {
        const size_t end = std::min(toks.size(), off + static_cast<size_t>(seq_len));
        if (end - off < 2) break;
        seqs.emplace_back(toks.begin() + static_cast<std::ptrdiff_t>(off),
                          toks.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }
  }
  if (seqs.empty()) throw ContractError("pretrain: no usable sequences in corpus");
  return seqs;
}

// ---- commands ----

int cmd_grow(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  LoadedCheckpoint base = load_checkpoint(cfg.require_string("growth.base_checkpoint"));
  const float tolerance = static_cast<float>(cfg.get_float("growth.tolerance", 1e-4));

  TransformerWeights grown;
  ModelConfig grown_cfg;
  MaskSchedule schedule;
  json reports = json::array();
  float divergence = 0.0f;

  GrowthPlan plan = growth_plan_from(cfg);
  if (plan.depth_strategy == DepthStrategy::staged) {
    std::vector<GrowthPlan> stages;
    for (const std::string& name : cfg.get_string_array("growth.stages"))
      stages.push_back(growth_plan_from(cfg, "growth." + name + "."));
    StagedResult r = expand_staged(base.weights, base.config, stages);
    grown = std::move(r.weights);
    grown_cfg = r.config;
    schedule = std::move(r.schedule);
    for (const auto& rep : r.stage_reports) reports.push_back(rep.to_json());
    divergence = r.stage_reports.back().max_logit_divergence;
  } else {
    PipelineResult r = grow_pipeline(base.weights, base.config, plan);
    grown = std::move(r.weights);
    grown_cfg = r.config;
    schedule = std::move(r.schedule);
    reports.push_back(r.report.to_json());
    divergence = r.report.max_logit_divergence;
  }

  save_checkpoint((out_dir / "grown.ckpt").string(), grown, grown_cfg);
  std::vector<std::string> artifacts{"grown.ckpt", "growth_report.json"};
  if (!schedule.empty()) {
    write_text(out_dir / "mask_schedule.json", schedule.to_json().dump(2) + "\n");
    artifacts.push_back("mask_schedule.json");
  }
  json report_doc{{"plan", growth_plan_to_json(plan)},
                  {"reports", reports},
                  {"max_logit_divergence", divergence},
                  {"tolerance", tolerance}};
  write_text(out_dir / "growth_report.json", report_doc.dump(2) + "\n");
  write_manifest(out_dir, "grow", cfg, artifacts);

  fmt::print("grown model: {} -> {} params, max logit divergence {:.3g}\n",
             count_params(base.config), count_params(grown_cfg), divergence);
  if (divergence > tolerance) {
    fmt::print(stderr, "function preservation failed: divergence {:.3g} > tolerance {:.3g}\n",
               divergence, tolerance);
    return 1;
  }
  return 0;
}

int cmd_filter(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const std::string format = cfg.get_string("data.format", "jsonl");
  const IngestFormat fmt_kind = format == "txt-dir" ? IngestFormat::txt_dir : IngestFormat::jsonl;
  int64_t skipped = 0;
  std::vector<Document> docs = ingest_all(cfg.require_string("data.input"), fmt_kind,
                                          cfg.get_bool("data.strict", false), &skipped);
  if (skipped > 0)
    fmt::print(stderr, "warning: skipped {} malformed record(s) during ingestion\n", skipped);
  auto [filtered, report] = filter_chain(docs, filter_rules_from(cfg));

  std::string out_jsonl;
  for (const Document& d : filtered) {
    json j{{"id", d.id}, {"text", d.text}, {"source", d.source_tag}, {"lang", d.language_tag}};
    out_jsonl += j.dump() + "\n";
  }
  const std::string out_name = cfg.get_string("data.output", "filtered.jsonl");
  write_text(out_dir / out_name, out_jsonl);
  json rj = report.to_json();
  rj["ingest_skipped"] = skipped;
  write_text(out_dir / "filter_report.json", rj.dump(2) + "\n");
  write_manifest(out_dir, "filter", cfg, {out_name, "filter_report.json"});
  fmt::print("{}\n", report.summary());
  return 0;
}

int cmd_pretrain(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  ModelHandle model = model_from_config_or_checkpoint(cfg, "train.checkpoint", seed);
  TrainConfig tc = train_config_from(cfg, seed);

  MaskSchedule schedule;
  const MaskSchedule* sp = nullptr;
  if (cfg.has("train.mask_schedule")) {
    std::ifstream in(cfg.require_string("train.mask_schedule"));
    schedule = MaskSchedule::from_json(json::parse(in));
    sp = &schedule;
  }

  CyclingSequenceSource stream(pretraining_sequences(cfg, seed));
  auto log = pretrain(model.weights, model.config, tc, stream, sp);

  save_checkpoint((out_dir / "model.ckpt").string(), model.weights, model.config);
  write_text(out_dir / "metrics.jsonl", metrics_jsonl(log));
  write_manifest(out_dir, "pretrain", cfg, {"model.ckpt", "metrics.jsonl"});
  fmt::print("pretrain: {} steps, loss {:.4f} -> {:.4f}\n", log.size(), log.front().loss,
             log.back().loss);
  return 0;
}

int cmd_sft(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  ModelHandle model = model_from_config_or_checkpoint(cfg, "train.checkpoint", seed);
  TrainConfig tc = train_config_from(cfg, seed);
  auto dataset = load_instruction_jsonl(cfg.require_string("train.dataset"));

  SftResult r = sft(model.weights, model.config, tc, dataset);
  save_checkpoint((out_dir / "model.ckpt").string(), model.weights, model.config);
  write_text(out_dir / "metrics.jsonl", metrics_jsonl(r.log));
  write_manifest(out_dir, "sft", cfg, {"model.ckpt", "metrics.jsonl"});
  fmt::print("sft: {} steps, loss {:.4f} -> {:.4f}, skipped {} empty responses\n", r.log.size(),
             r.log.front().loss, r.log.back().loss, r.skipped_records);
  return 0;
}

int cmd_cache_logits(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  const std::string ck_key = cfg.has("kto.ref_checkpoint") ? "kto.ref_checkpoint" : "train.checkpoint";
  ModelHandle model = model_from_config_or_checkpoint(cfg, ck_key, seed);
  auto dataset = load_preference_jsonl(cfg.require_string("kto.dataset"));

  const std::string store = cfg.require_string("kto.cache");
  LogitCache cache = cache_ref_logits(model.weights, model.config, dataset, store);
  write_manifest(out_dir, "cache-logits", cfg, {store});
  fmt::print("cached {} completion log-prob entries to {}\n", cache.size(), store);
  return 0;
}

int cmd_kto(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  ModelHandle policy = model_from_config_or_checkpoint(cfg, "train.checkpoint", seed);
  TrainConfig tc = train_config_from(cfg, seed);
  // preference-optimization defaults when the config leaves them unset:
  // batch 128, lr 1e-6, no embedding noise
  if (!cfg.has("train.batch_size")) tc.batch_size = 128;
  if (!cfg.has("train.learning_rate")) tc.learning_rate = 1e-6f;
  KtoConfig kcfg = kto_config_from(cfg);
  auto dataset = load_preference_jsonl(cfg.require_string("kto.dataset"));

  // Reference model: explicit checkpoint, or the initial policy, frozen.
  TransformerWeights ref_weights;
  ModelConfig ref_cfg = policy.config;
  if (cfg.has("kto.ref_checkpoint")) {
    LoadedCheckpoint ck = load_checkpoint(cfg.require_string("kto.ref_checkpoint"));
    ref_weights = std::move(ck.weights);
    ref_cfg = ck.config;
  } else {
    ref_weights = deep_copy(policy.weights);
  }

  std::unique_ptr<RefLogitSource> ref;
  std::optional<LogitCache> cache;
  if (cfg.has("kto.cache")) {
    cache = LogitCache::open(cfg.require_string("kto.cache"), ref_cache_fingerprint(ref_weights));
    ref = std::make_unique<CachedRefSource>(*cache);
  } else {
    ref = std::make_unique<FrozenModelSource>(ref_weights, ref_cfg);
  }

  auto log = kto_train(policy.weights, policy.config, tc, kcfg, dataset, *ref);
  save_checkpoint((out_dir / "model.ckpt").string(), policy.weights, policy.config);
  write_text(out_dir / "metrics.jsonl", metrics_jsonl(log));
  write_manifest(out_dir, "kto", cfg, {"model.ckpt", "metrics.jsonl"});
  fmt::print("kto: {} steps, loss {:.4f} -> {:.4f}, frozen-model forwards: {}\n", log.size(),
             log.front().loss, log.back().loss, ref->forward_passes());
  return 0;
}

int cmd_eval(const RunConfig& cfg, const CommandArgs& args) {
  const fs::path out_dir = resolve_out_dir(cfg, args);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("run.seed", 0));
  ModelHandle model = model_from_config_or_checkpoint(cfg, "eval.checkpoint", seed);

  McqLoadResult loaded = load_mcq(cfg.require_string("eval.dataset"),
                                  cfg.get_bool("data.strict", false));
  std::vector<McqItem> dev_pool, test_items;
  if (cfg.has("eval.dev")) {
    dev_pool = load_mcq(cfg.require_string("eval.dev")).items;
    test_items = std::move(loaded.items);
  } else {
    for (auto& item : loaded.items)
      (item.split == "dev" ? dev_pool : test_items).push_back(std::move(item));
  }
  if (test_items.empty()) throw ContractError("eval: no test items");

  const std::string mode_s = cfg.get_string("eval.mode", "letter");
  const ScoringMode mode =
      mode_s == "continuation" ? ScoringMode::continuation : ScoringMode::letter;
  EvalReport report = evaluate(model.weights, model.config, test_items, dev_pool,
                               static_cast<int>(cfg.get_int("eval.k", 5)), mode, seed,
                               static_cast<int>(cfg.get_int("eval.threads", 1)),
                               prompt_template_from(cfg));

  write_text(out_dir / "eval_report.json", report.to_json().dump(2) + "\n");
  write_text(out_dir / "eval_report.txt", report.to_table());
  write_manifest(out_dir, "eval", cfg, {"eval_report.json", "eval_report.txt"});
  fmt::print("{}", report.to_table());
  return 0;
}

int cmd_report(const RunConfig& cfg, const CommandArgs&) {
  std::ifstream in(cfg.require_string("report.input"));
  json j = json::parse(in);
  std::string kind = cfg.get_string("report.kind", "");
  if (kind.empty()) {
    if (j.contains("overall_accuracy")) kind = "eval";
    else if (j.contains("max_logit_divergence")) kind = "growth";
    else if (j.contains("sample_reduction_pct")) kind = "filter";
    else throw ContractError("report: cannot determine report kind");
  }
  if (kind == "eval") {
    EvalReport r;
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    r.n_items = j.at("n_items").get<int>();
    r.k = j.at("k").get<int>();
    r.scoring_mode = j.at("scoring_mode").get<std::string>();
    for (auto& [s, a] : j.at("subject_accuracy").items())
      r.subject_accuracy[s] = a.get<double>();
    for (auto& [s, c] : j.at("subject_counts").items()) r.subject_counts[s] = c.get<int>();
    fmt::print("{}", r.to_table());
  } else if (kind == "growth") {
    const json stages = j.contains("reports") ? j.at("reports") : json::array({j});
    for (const auto& r : stages)
      fmt::print("strategy: {}\nparams: {} -> {}\nmax logit divergence: {:.6g}\n",
                 r.value("strategy", std::string("?")), r.value("base_param_count", 0LL),
                 r.value("grown_param_count", 0LL), r.value("max_logit_divergence", 0.0));
    if (j.contains("tolerance"))
      fmt::print("tolerance: {:.3g}\n", j.at("tolerance").get<double>());
  } else if (kind == "filter") {
    fmt::print("samples {} -> {} (-{:.2f}%)\nbytes {} -> {} (-{:.2f}%)\n",
               j.at("samples_in").get<int64_t>(), j.at("samples_out").get<int64_t>(),
               j.at("sample_reduction_pct").get<double>(), j.at("bytes_in").get<int64_t>(),
               j.at("bytes_out").get<int64_t>(), j.at("volume_reduction_pct").get<double>());
  } else {
    throw ContractError(fmt::format("report: unknown kind '{}'", kind));
  }
  return 0;
}

int dispatch(const std::string& command, const CommandArgs& args) {
  RunConfig cfg;
  try {
    cfg = RunConfig::parse_file(args.config_path);
    for (const auto& s : args.overrides) cfg.apply_override(s);
    cfg.validate(command);
  } catch (const std::exception& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 2;
  }
  try {
    if (command == "grow") return cmd_grow(cfg, args);
    if (command == "filter") return cmd_filter(cfg, args);
    if (command == "pretrain") return cmd_pretrain(cfg, args);
    if (command == "sft") return cmd_sft(cfg, args);
    if (command == "kto") return cmd_kto(cfg, args);
    if (command == "cache-logits") return cmd_cache_logits(cfg, args);
    if (command == "eval") return cmd_eval(cfg, args);
    if (command == "report") return cmd_report(cfg, args);
    fmt::print(stderr, "unknown command '{}'\n", command);
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"growkit: function-preserving decoder growth, training and evaluation"};
  app.set_version_flag("--version", std::string(GROWKIT_VERSION));
  app.require_subcommand(1);

  static const std::vector<std::string> commands{"grow",       "filter", "pretrain",
                                                 "sft",        "kto",    "cache-logits",
                                                 "eval",       "report"};
  std::map<std::string, CommandArgs> cmd_args;
  for (const std::string& name : commands) {
    CLI::App* sub = app.add_subcommand(name);
    CommandArgs& a = cmd_args[name];
    sub->add_option("-c,--config", a.config_path, "run configuration file")->required();
    sub->add_option("-s,--set", a.overrides, "override a config key (section.key=value)");
    sub->add_option("-o,--out", a.out_override, "output directory (overrides run.out_dir)");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  return dispatch(command, cmd_args[command]);
}
