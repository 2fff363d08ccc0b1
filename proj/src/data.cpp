#include "growkit/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "growkit/hash.hpp"
#include "growkit/rng.hpp"

namespace growkit {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- ingestion ----

struct DocumentStream::Impl {
  IngestFormat format;
  bool strict;
  std::string path;
  std::ifstream file;       // jsonl
  int64_t line_no = 0;
  std::vector<fs::path> txt_files;  // txt_dir
  size_t txt_idx = 0;
};

DocumentStream::DocumentStream(std::string path, IngestFormat format, bool strict)
    : impl_(new Impl{format, strict, path, {}, 0, {}, 0}) {
  if (format == IngestFormat::jsonl) {
    impl_->file.open(path);
    if (!impl_->file) {
      delete impl_;
      throw IoError(fmt::format("ingest: cannot open '{}'", path));
    }
  } else {
    if (!fs::is_directory(path)) {
      delete impl_;
      throw IoError(fmt::format("ingest: '{}' is not a directory", path));
    }
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".txt")
        impl_->txt_files.push_back(e.path());
    std::sort(impl_->txt_files.begin(), impl_->txt_files.end());
  }
}

DocumentStream::~DocumentStream() { delete impl_; }
DocumentStream::DocumentStream(DocumentStream&& o) noexcept
    : impl_(o.impl_), skipped_(o.skipped_) {
  o.impl_ = nullptr;
}
DocumentStream& DocumentStream::operator=(DocumentStream&& o) noexcept {
  std::swap(impl_, o.impl_);
  std::swap(skipped_, o.skipped_);
  return *this;
}

std::optional<Document> DocumentStream::next() {
  if (impl_->format == IngestFormat::jsonl) {
    std::string line;
    while (std::getline(impl_->file, line)) {
      ++impl_->line_no;
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
      const bool bad = j.is_discarded() || !j.is_object() || !j.contains("text") ||
                       !j.at("text").is_string() || j.at("text").get<std::string>().empty();
      if (bad) {
        if (impl_->strict)
          throw IoError(fmt::format("ingest: '{}' line {}: malformed record", impl_->path,
                                    impl_->line_no));
        ++skipped_;
        continue;
      }
      Document d;
      d.id = j.contains("id") && j.at("id").is_string() ? j.at("id").get<std::string>()
                                                        : fmt::format("line{}", impl_->line_no);
      d.text = j.at("text").get<std::string>();
      if (j.contains("source") && j.at("source").is_string())
        d.source_tag = j.at("source").get<std::string>();
      if (j.contains("lang") && j.at("lang").is_string())
        d.language_tag = j.at("lang").get<std::string>();
      return d;
    }
    return std::nullopt;
  }

  while (impl_->txt_idx < impl_->txt_files.size()) {
    const fs::path& p = impl_->txt_files[impl_->txt_idx++];
    std::ifstream f(p);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (text.empty()) {
      if (impl_->strict) throw IoError(fmt::format("ingest: '{}' is empty", p.string()));
      ++skipped_;
      continue;
    }
    Document d;
    d.id = p.stem().string();
    d.text = std::move(text);
    d.source_tag = "txt";
    return d;
  }
  return std::nullopt;
}

std::vector<Document> ingest_all(const std::string& path, IngestFormat format, bool strict,
                                 int64_t* skipped) {
  DocumentStream stream(path, format, strict);
  std::vector<Document> docs;
  while (auto d = stream.next()) docs.push_back(std::move(*d));
  if (skipped) *skipped = stream.skipped();
  return docs;
}

// ---- filtering ----

double FilterReport::sample_reduction_pct() const {
  if (samples_in == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(samples_out) / static_cast<double>(samples_in));
}

double FilterReport::volume_reduction_pct() const {
  if (bytes_in == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(bytes_out) / static_cast<double>(bytes_in));
}

json FilterReport::to_json() const {
  return json{{"samples_in", samples_in},
              {"samples_out", samples_out},
              {"bytes_in", bytes_in},
              {"bytes_out", bytes_out},
              {"sample_reduction_pct", sample_reduction_pct()},
              {"volume_reduction_pct", volume_reduction_pct()},
              {"removed_by_rule", removed_by_rule}};
}

std::string FilterReport::summary() const {
  return fmt::format("samples {} -> {} (-{:.2f}%), bytes {} -> {} (-{:.2f}%)", samples_in,
                     samples_out, sample_reduction_pct(), bytes_in, bytes_out,
                     volume_reduction_pct());
}

namespace {

// Trim plus collapse of ASCII whitespace runs to single spaces.
std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool in_ws = true;  // leading whitespace dropped
  for (char c : text) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (ws) {
      in_ws = true;
    } else {
      if (in_ws && !out.empty()) out.push_back(' ');
      out.push_back(c);
      in_ws = false;
    }
  }
  return out;
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Accepted bytes for the charset rule: alphanumerics, whitespace, common
// punctuation and anything non-ASCII (multibyte UTF-8 text).
bool accepted_byte(unsigned char c) {
  if (c >= 0x80) return true;
  if (std::isalnum(c) || std::isspace(c)) return true;
  return std::strchr(".,;:!?'\"()-", static_cast<char>(c)) != nullptr;
}

double charset_ratio(std::string_view text) {
  if (text.empty()) return 0.0;
  int64_t ok = 0;
  for (unsigned char c : text)
    if (accepted_byte(c)) ++ok;
  return static_cast<double>(ok) / static_cast<double>(text.size());
}

// MinHash signature over byte n-grams of the normalized text.
constexpr int kMinhashK = 64;

std::array<uint64_t, kMinhashK> minhash_signature(std::string_view normalized, int n) {
  std::array<uint64_t, kMinhashK> sig;
  sig.fill(UINT64_MAX);
  auto absorb = [&](uint64_t h) {
    for (int i = 0; i < kMinhashK; ++i) {
      // splitmix-style mixer keyed by lane index
      uint64_t z = h + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(i + 1);
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      z ^= z >> 31;
      sig[static_cast<size_t>(i)] = std::min(sig[static_cast<size_t>(i)], z);
    }
  };
  if (static_cast<int>(normalized.size()) < n) {
    absorb(fnv1a(normalized));
  } else {
    for (size_t i = 0; i + static_cast<size_t>(n) <= normalized.size(); ++i)
      absorb(fnv1a(normalized.substr(i, static_cast<size_t>(n))));
  }
  return sig;
}

double estimated_jaccard(const std::array<uint64_t, kMinhashK>& a,
                         const std::array<uint64_t, kMinhashK>& b) {
  int eq = 0;
  for (int i = 0; i < kMinhashK; ++i)
    if (a[static_cast<size_t>(i)] == b[static_cast<size_t>(i)]) ++eq;
  return static_cast<double>(eq) / kMinhashK;
}

constexpr int kLshBands = 16;  // 16 bands x 4 rows

struct NgramDedupState {
  std::vector<std::array<uint64_t, kMinhashK>> kept;
  std::unordered_map<uint64_t, std::vector<size_t>> buckets;  // band hash -> kept indices

  bool is_near_duplicate(const std::array<uint64_t, kMinhashK>& sig, double threshold) {
    std::unordered_set<size_t> candidates;
    for (int b = 0; b < kLshBands; ++b) {
      uint64_t h = 0xcbf29ce484222325ull ^ static_cast<uint64_t>(b);
      for (int r = 0; r < kMinhashK / kLshBands; ++r) {
        h ^= sig[static_cast<size_t>(b * (kMinhashK / kLshBands) + r)];
        h *= 0x100000001b3ull;
      }
      auto it = buckets.find(h);
      if (it != buckets.end())
        candidates.insert(it->second.begin(), it->second.end());
    }
    for (size_t c : candidates)
      if (estimated_jaccard(sig, kept[c]) >= threshold) return true;
    return false;
  }

  void keep(const std::array<uint64_t, kMinhashK>& sig) {
    const size_t idx = kept.size();
    kept.push_back(sig);
    for (int b = 0; b < kLshBands; ++b) {
      uint64_t h = 0xcbf29ce484222325ull ^ static_cast<uint64_t>(b);
      for (int r = 0; r < kMinhashK / kLshBands; ++r) {
        h ^= sig[static_cast<size_t>(b * (kMinhashK / kLshBands) + r)];
        h *= 0x100000001b3ull;
      }
      buckets[h].push_back(idx);
    }
  }
};

const std::unordered_set<std::string>& known_rules() {
  static const std::unordered_set<std::string> rules{"min_length", "max_length", "charset_ratio",
                                                     "exact_dedup", "ngram_dedup"};
  return rules;
}

}  // namespace

std::pair<std::vector<Document>, FilterReport> filter_chain(const std::vector<Document>& docs,
                                                            const std::vector<FilterRule>& rules) {
  for (const FilterRule& r : rules)
    if (!known_rules().count(r.name))
      throw ConfigError(fmt::format("filter: unknown rule '{}'", r.name));

  FilterReport report;
  std::vector<Document> out;
  std::unordered_set<uint64_t> seen_exact;
  std::unordered_map<size_t, NgramDedupState> ngram_states;  // per rule position

  for (const Document& d : docs) {
    report.samples_in += 1;
    report.bytes_in += static_cast<int64_t>(d.text.size());

    const std::string* rejected_by = nullptr;
    // Near-duplicate signatures are only registered if the doc survives the
    // whole chain, so dedup state never contains removed documents.
    std::vector<std::pair<size_t, std::array<uint64_t, kMinhashK>>> pending_sigs;
    std::vector<uint64_t> pending_exact;

    for (size_t ri = 0; ri < rules.size() && !rejected_by; ++ri) {
      const FilterRule& r = rules[ri];
      if (r.name == "min_length") {
        if (static_cast<int64_t>(d.text.size()) < r.min_length) rejected_by = &r.name;
      } else if (r.name == "max_length") {
        if (static_cast<int64_t>(d.text.size()) > r.max_length) rejected_by = &r.name;
      } else if (r.name == "charset_ratio") {
        if (charset_ratio(d.text) < r.charset_min_ratio) rejected_by = &r.name;
      } else if (r.name == "exact_dedup") {
        const uint64_t h = fnv1a(normalize_text(d.text));
        if (seen_exact.count(h))
          rejected_by = &r.name;
        else
          pending_exact.push_back(h);
      } else {  // ngram_dedup
        auto sig = minhash_signature(normalize_text(d.text), r.ngram_n);
        if (ngram_states[ri].is_near_duplicate(sig, r.jaccard_threshold))
          rejected_by = &r.name;
        else
          pending_sigs.emplace_back(ri, sig);
      }
    }

    if (rejected_by) {
      report.removed_by_rule[*rejected_by] += 1;
    } else {
      for (uint64_t h : pending_exact) seen_exact.insert(h);
      for (auto& [ri, sig] : pending_sigs) ngram_states[ri].keep(sig);
      report.samples_out += 1;
      report.bytes_out += static_cast<int64_t>(d.text.size());
      out.push_back(d);
    }
  }
  return {std::move(out), std::move(report)};
}

std::vector<Document> exact_dedup(const std::vector<Document>& docs) {
  std::vector<Document> out;
  std::unordered_set<uint64_t> seen;
  for (const Document& d : docs)
    if (seen.insert(fnv1a(normalize_text(d.text))).second) out.push_back(d);
  return out;
}

// ---- mixing ----

void MixSpec::validate() const {
  if (ratio.empty()) throw ConfigError("mix: spec needs at least one language tag");
  for (const auto& [tag, r] : ratio)
    if (r <= 0.0) throw ConfigError(fmt::format("mix: ratio for '{}' must be positive", tag));
}

MixResult mix_sampler(const std::map<std::string, std::vector<Document>>& corpora,
                      const MixSpec& spec, uint64_t seed, int64_t budget, int chunk_tokens,
                      bool wrap) {
  spec.validate();
  if (chunk_tokens < 1) throw ConfigError("mix: chunk_tokens must be >= 1");
  for (const auto& [tag, r] : spec.ratio)
    if (!corpora.count(tag))
      throw ConfigError(fmt::format("mix: spec tag '{}' missing from corpora", tag));

  double total_ratio = 0.0;
  for (const auto& [tag, r] : spec.ratio) total_ratio += r;

  // Per-tag queue of chunks for the current epoch.
  struct TagState {
    std::vector<MixChunk> queue;
    size_t pos = 0;
    int epoch = 0;
  };
  std::map<std::string, TagState> states;

  auto refill = [&](const std::string& tag, TagState& st) {
    const auto& docs = corpora.at(tag);
    if (docs.empty())
      throw ConfigError(fmt::format("mix: corpus for tag '{}' is empty", tag));
    std::vector<size_t> order(docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, fmt::format("mix.{}.epoch{}", tag, st.epoch)));
    rng.shuffle(order);
    st.queue.clear();
    st.pos = 0;
    for (size_t di : order) {
      const Document& doc = docs[di];
      if (spec.unit == MixSpec::Unit::document) {
        MixChunk c;
        c.tag = tag;
        c.doc_id = doc.id;
        c.epoch = st.epoch;
        c.tokens = tokenize(doc.text);
        st.queue.push_back(std::move(c));
      } else {
        const std::vector<int> toks = tokenize(doc.text);
        for (size_t off = 0; off < toks.size(); off += static_cast<size_t>(chunk_tokens)) {
          MixChunk c;
          c.tag = tag;
          c.doc_id = doc.id;
          c.epoch = st.epoch;
          const size_t end = std::min(toks.size(), off + static_cast<size_t>(chunk_tokens));
          c.tokens.assign(toks.begin() + static_cast<std::ptrdiff_t>(off),
                          toks.begin() + static_cast<std::ptrdiff_t>(end));
          st.queue.push_back(std::move(c));
        }
      }
    }
  };

  MixResult out;
  for (const auto& [tag, r] : spec.ratio) {
    refill(tag, states[tag]);
    out.emitted_units[tag] = 0;
    out.epochs[tag] = 0;
  }

  int64_t total = 0;
  while (total < budget) {
    // Largest-deficit schedule: the tag furthest below its target share
    // emits next. Ties break toward the larger target, then tag order.
    const std::string* pick = nullptr;
    double best = 0.0;
    for (const auto& [tag, r] : spec.ratio) {
      const double share = r / total_ratio;
      const double deficit = share * static_cast<double>(total) -
                             static_cast<double>(out.emitted_units.at(tag));
      if (!pick || deficit > best + 1e-12 ||
          (std::fabs(deficit - best) <= 1e-12 && share > spec.ratio.at(*pick) / total_ratio)) {
        pick = &tag;
        best = deficit;
      }
    }
    TagState& st = states[*pick];
    if (st.pos >= st.queue.size()) {
      if (!wrap) break;
      st.epoch += 1;
      out.epochs[*pick] = st.epoch;
      refill(*pick, st);
    }
    MixChunk chunk = st.queue[st.pos++];
    const int64_t units =
        spec.unit == MixSpec::Unit::document ? 1 : static_cast<int64_t>(chunk.tokens.size());
    out.emitted_units[*pick] += units;
    total += units;
    out.stream.push_back(std::move(chunk));
  }
  return out;
}

// ---- byte tokenizer ----

std::vector<int> tokenize(std::string_view text, bool frame) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  if (frame) ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  if (frame) ids.push_back(kEos);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize)
      throw IndexError(fmt::format("detokenize: id {} out of range [0,{})", id, kVocabSize));
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace growkit
