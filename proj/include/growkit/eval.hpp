#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "growkit/model.hpp"

namespace growkit {

// k-shot multiple-choice evaluation: per-item prompts are assembled from
// same-subject dev exemplars, choices are scored by log-likelihood, and
// accuracy is reported per subject and overall. No sampling anywhere.

struct McqItem {
  std::string question;
  std::vector<std::string> choices;  // >= 2, distinct
  int answer_index = 0;
  std::string subject;
  std::string split;  // "dev" or "test"
};

struct McqLoadResult {
  std::vector<McqItem> items;
  // line number + reason for every rejected record (lenient mode)
  std::vector<std::pair<int, std::string>> rejected;
};

// JSONL records {question, choices, answer, subject, split}. In strict mode
// the first invalid record throws IoError naming the line; in lenient mode
// invalid records are collected in `rejected`. Duplicate questions (by
// hash) are rejected as duplicates.
McqLoadResult load_mcq(const std::string& path, bool strict = false);

// Prompt layout; templates are data and can be overridden per run.
struct PromptTemplate {
  std::string header;                  // once at the top
  std::string question_prefix = "";    // before each question line
  std::string question_suffix = "\n";  // after each question line
  std::string choice_suffix = "\n";    // after each "A. <choice>" line
  std::string answer_cue = "Answer: ";
  std::string exemplar_suffix = "\n";  // after each exemplar's answer letter
};

std::string choice_letter(int index);  // 0 -> "A"

// k solved same-subject exemplars followed by the target question and the
// answer cue. Exemplar choice is deterministic per (seed, subject); the
// target item never appears among its own exemplars.
std::vector<int> build_kshot_prompt(const McqItem& item, const std::vector<McqItem>& dev_pool,
                                    int k, uint64_t seed, const PromptTemplate& tmpl = {});

enum class ScoringMode { letter, continuation };

struct ChoiceScores {
  int chosen = 0;
  std::vector<float> scores;  // higher is better; ties -> lowest index
};

// letter mode: next-token logits of the choice letters after the prompt
// ("direct" selection). continuation mode: length-normalized sum of
// per-token log-probs of each full choice text.
ChoiceScores score_choices(const TransformerWeights& w, const ModelConfig& cfg,
                           std::span<const int> prompt_ids,
                           const std::vector<std::vector<int>>& choice_continuations,
                           ScoringMode mode);

struct EvalReport {
  std::map<std::string, double> subject_accuracy;
  std::map<std::string, int> subject_counts;
  double overall_accuracy = 0.0;
  int n_items = 0;
  int k = 0;
  std::string scoring_mode;
  std::vector<int> chosen;  // per-item decisions, input order

  nlohmann::json to_json() const;
  // aligned two-column table, subjects then the overall average
  std::string to_table() const;
};

// Scores every item; `threads` > 1 evaluates items concurrently with
// results identical to the serial order.
EvalReport evaluate(const TransformerWeights& w, const ModelConfig& cfg,
                    const std::vector<McqItem>& items, const std::vector<McqItem>& dev_pool,
                    int k, ScoringMode mode, uint64_t seed, int threads = 1,
                    const PromptTemplate& tmpl = {});

}  // namespace growkit
