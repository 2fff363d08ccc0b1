#include "growkit/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_set>

#include "growkit/data.hpp"
#include "growkit/hash.hpp"

namespace growkit {

using nlohmann::json;

McqLoadResult load_mcq(const std::string& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("load_mcq: cannot open '{}'", path));

  McqLoadResult out;
  std::unordered_set<uint64_t> seen_questions;
  std::string line;
  int line_no = 0;
  auto reject = [&](int ln, const std::string& why) {
    if (strict) throw IoError(fmt::format("load_mcq: '{}' line {}: {}", path, ln, why));
    out.rejected.emplace_back(ln, why);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) {
      reject(line_no, "not a JSON object");
      continue;
    }
    McqItem item;
    try {
      item.question = j.at("question").get<std::string>();
      item.choices = j.at("choices").get<std::vector<std::string>>();
      item.answer_index = j.at("answer").get<int>();
      item.subject = j.value("subject", std::string("default"));
      item.split = j.value("split", std::string("test"));
    } catch (const json::exception& e) {
      reject(line_no, fmt::format("bad record: {}", e.what()));
      continue;
    }
    if (item.choices.size() < 2) {
      reject(line_no, "fewer than 2 choices");
      continue;
    }
    if (item.answer_index < 0 || item.answer_index >= static_cast<int>(item.choices.size())) {
      reject(line_no, fmt::format("answer index {} out of range [0,{})", item.answer_index,
                                  item.choices.size()));
      continue;
    }
    std::unordered_set<std::string> distinct(item.choices.begin(), item.choices.end());
    if (distinct.size() != item.choices.size()) {
      reject(line_no, "duplicate choices");
      continue;
    }
    uint64_t qh = 0xcbf29ce484222325ull;
    for (unsigned char c : item.question) {
      qh ^= c;
      qh *= 0x100000001b3ull;
    }
    if (!seen_questions.insert(qh).second) {
      reject(line_no, "duplicate question");
      continue;
    }
    out.items.push_back(std::move(item));
  }
  return out;
}

std::string choice_letter(int index) {
  if (index < 0 || index >= 26)
    throw ContractError(fmt::format("choice letter index {} out of range", index));
  return std::string(1, static_cast<char>('A' + index));
}

namespace {

void append_question_block(std::string& text, const McqItem& item, const PromptTemplate& t) {
  text += t.question_prefix;
  text += item.question;
  text += t.question_suffix;
  for (size_t c = 0; c < item.choices.size(); ++c) {
    text += choice_letter(static_cast<int>(c));
    text += ". ";
    text += item.choices[c];
    text += t.choice_suffix;
  }
  text += t.answer_cue;
}

}  // namespace

std::vector<int> build_kshot_prompt(const McqItem& item, const std::vector<McqItem>& dev_pool,
                                    int k, uint64_t seed, const PromptTemplate& tmpl) {
  if (k < 0) throw ContractError("build_kshot_prompt: k must be >= 0");

  std::string text = tmpl.header;
  if (k > 0) {
    // Same-subject exemplars, the target itself excluded by question text.
    std::vector<size_t> pool;
    for (size_t i = 0; i < dev_pool.size(); ++i)
      if (dev_pool[i].subject == item.subject && dev_pool[i].question != item.question)
        pool.push_back(i);
    if (static_cast<int>(pool.size()) < k)
      throw ContractError(fmt::format(
          "build_kshot_prompt: subject '{}' has {} usable dev exemplars, need {}", item.subject,
          pool.size(), k));
    Rng rng(derive_seed(seed, "kshot." + item.subject));
    rng.shuffle(pool);
    for (int e = 0; e < k; ++e) {
      const McqItem& ex = dev_pool[pool[static_cast<size_t>(e)]];
      append_question_block(text, ex, tmpl);
      text += choice_letter(ex.answer_index);
      text += tmpl.exemplar_suffix;
    }
  }
  append_question_block(text, item, tmpl);

  std::vector<int> ids = tokenize(text, /*frame=*/false);
  ids.insert(ids.begin(), kBos);
  return ids;
}

ChoiceScores score_choices(const TransformerWeights& w, const ModelConfig& cfg,
                           std::span<const int> prompt_ids,
                           const std::vector<std::vector<int>>& choice_continuations,
                           ScoringMode mode) {
  if (choice_continuations.size() < 2)
    throw ContractError("score_choices: need at least 2 continuations");
  NoGradGuard ng;

  ChoiceScores out;
  if (mode == ScoringMode::letter) {
    ForwardOutput fo = forward(w, cfg, prompt_ids);
    const int S = fo.logits.dim(0), V = fo.logits.dim(1);
    const float* last = fo.logits.data().data() + static_cast<size_t>(S - 1) * V;
    for (const auto& cont : choice_continuations) {
      if (cont.empty()) throw ContractError("score_choices: empty continuation");
      if (cont[0] < 0 || cont[0] >= V)
        throw IndexError(fmt::format("score_choices: token {} out of range [0,{})", cont[0], V));
      out.scores.push_back(last[cont[0]]);
    }
  } else {
    for (const auto& cont : choice_continuations) {
      if (cont.empty()) throw ContractError("score_choices: empty continuation");
      std::vector<int> seq(prompt_ids.begin(), prompt_ids.end());
      seq.insert(seq.end(), cont.begin(), cont.end());
      ForwardOutput fo = forward(w, cfg, seq);
      const int start = static_cast<int>(prompt_ids.size()) - 1;
      const int count = static_cast<int>(cont.size());
      Tensor rows = slice_rows(fo.logits, start, count);
      Tensor logps = log_softmax_gather(
          rows, std::span<const int>(seq).subspan(static_cast<size_t>(start + 1)));
      float total = 0.0f;
      for (float v : logps.data()) total += v;
      out.scores.push_back(total / static_cast<float>(count));  // length-normalized
    }
  }

  out.chosen = 0;
  for (size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i] > out.scores[static_cast<size_t>(out.chosen)])
      out.chosen = static_cast<int>(i);  // ties keep the lowest index
  return out;
}

json EvalReport::to_json() const {
  return json{{"subject_accuracy", subject_accuracy},
              {"subject_counts", subject_counts},
              {"overall_accuracy", overall_accuracy},
              {"n_items", n_items},
              {"k", k},
              {"scoring_mode", scoring_mode}};
}

std::string EvalReport::to_table() const {
  size_t width = std::string("Average").size();
  for (const auto& [s, a] : subject_accuracy) width = std::max(width, s.size());
  std::string out;
  out += fmt::format("{:<{}}  Accuracy ({}-shot)\n", "Subject", width, k);
  out += fmt::format("{:-<{}}  {:-<17}\n", "", width, "");
  for (const auto& [s, a] : subject_accuracy)
    out += fmt::format("{:<{}}  {:.4f}\n", s, width, a);
  out += fmt::format("{:-<{}}  {:-<17}\n", "", width, "");
  out += fmt::format("{:<{}}  {:.4f}\n", "Average", width, overall_accuracy);
  out += fmt::format("items: {}, mode: {}\n", n_items, scoring_mode);
  return out;
}

EvalReport evaluate(const TransformerWeights& w, const ModelConfig& cfg,
                    const std::vector<McqItem>& items, const std::vector<McqItem>& dev_pool,
                    int k, ScoringMode mode, uint64_t seed, int threads,
                    const PromptTemplate& tmpl) {
  if (items.empty()) throw ContractError("evaluate: no items");
  if (threads < 1) throw ContractError("evaluate: threads must be >= 1");

  std::vector<int> chosen(items.size(), -1);
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto score_item = [&](size_t i) {
    const McqItem& item = items[i];
    const std::vector<int> prompt = build_kshot_prompt(item, dev_pool, k, seed, tmpl);
    std::vector<std::vector<int>> conts;
    for (size_t c = 0; c < item.choices.size(); ++c) {
      if (mode == ScoringMode::letter)
        conts.push_back({static_cast<int>('A') + static_cast<int>(c)});
      else
        conts.push_back(tokenize(item.choices[c], /*frame=*/false));
    }
    chosen[i] = score_choices(w, cfg, prompt, conts, mode).chosen;
  };

  if (threads == 1) {
    for (size_t i = 0; i < items.size(); ++i) score_item(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        while (true) {
          const size_t i = next.fetch_add(1);
          if (i >= items.size()) break;
          try {
            score_item(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            break;
          }
        }
      });
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  EvalReport report;
  report.n_items = static_cast<int>(items.size());
  report.k = k;
  report.scoring_mode = mode == ScoringMode::letter ? "letter" : "continuation";
  report.chosen = chosen;
  std::map<std::string, int> correct;
  for (size_t i = 0; i < items.size(); ++i) {
    report.subject_counts[items[i].subject] += 1;
    if (chosen[i] == items[i].answer_index) correct[items[i].subject] += 1;
  }
  int total_correct = 0;
  for (const auto& [subject, count] : report.subject_counts) {
    report.subject_accuracy[subject] =
        static_cast<double>(correct[subject]) / static_cast<double>(count);
    total_correct += correct[subject];
  }
  report.overall_accuracy = static_cast<double>(total_correct) / static_cast<double>(items.size());
  return report;
}

}  // namespace growkit
