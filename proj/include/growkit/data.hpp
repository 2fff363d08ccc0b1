#pragma once

#include <cstdint>
#include <json.hpp>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "growkit/error.hpp"

namespace growkit {

struct Document {
  std::string id;
  std::string text;
  std::string source_tag;
  std::string language_tag;
};

enum class IngestFormat { jsonl, txt_dir };

// Streaming reader over a JSONL corpus ({id, text, source, lang}) or a
// directory of .txt files (sorted by filename). In lenient mode malformed
// records are skipped and counted; in strict mode they fail with the
// offending line/file named.
class DocumentStream {
 public:
  DocumentStream(std::string path, IngestFormat format, bool strict = false);
  ~DocumentStream();
  DocumentStream(DocumentStream&&) noexcept;
  DocumentStream& operator=(DocumentStream&&) noexcept;

  std::optional<Document> next();
  int64_t skipped() const { return skipped_; }

 private:
  struct Impl;
  Impl* impl_;
  int64_t skipped_ = 0;
};

std::vector<Document> ingest_all(const std::string& path, IngestFormat format,
                                 bool strict = false, int64_t* skipped = nullptr);

// ---- filtering ----

struct FilterRule {
  std::string name;  // min_length | max_length | charset_ratio | exact_dedup | ngram_dedup
  int64_t min_length = 1;          // min_length: bytes of text
  int64_t max_length = 1 << 20;    // max_length: bytes of text
  double charset_min_ratio = 0.5;  // charset_ratio: accepted-byte fraction
  int ngram_n = 13;                // ngram_dedup: character n-gram size
  double jaccard_threshold = 0.8;  // ngram_dedup: near-duplicate cutoff
};

struct FilterReport {
  int64_t samples_in = 0;
  int64_t samples_out = 0;
  int64_t bytes_in = 0;
  int64_t bytes_out = 0;
  // removal attributed to the first rule that fired, keyed by rule name
  std::map<std::string, int64_t> removed_by_rule;

  double sample_reduction_pct() const;
  double volume_reduction_pct() const;
  nlohmann::json to_json() const;
  // e.g. "samples 1000 -> 164 (-83.60%), bytes 52113 -> 31201 (-40.13%)"
  std::string summary() const;
};

// Applies rules in order to each document; survivors keep their input order.
std::pair<std::vector<Document>, FilterReport> filter_chain(const std::vector<Document>& docs,
                                                            const std::vector<FilterRule>& rules);

// First occurrence wins, keyed by a whitespace-collapsed text hash.
std::vector<Document> exact_dedup(const std::vector<Document>& docs);

// ---- language mixing ----

struct MixSpec {
  std::map<std::string, double> ratio;  // language tag -> positive weight
  enum class Unit { token, document } unit = Unit::token;
  void validate() const;
};

struct MixChunk {
  std::string tag;
  std::string doc_id;
  int epoch = 0;
  std::vector<int> tokens;
};

struct MixResult {
  std::vector<MixChunk> stream;
  std::map<std::string, int64_t> emitted_units;  // tokens or documents per tag
  std::map<std::string, int> epochs;             // wrap-arounds per tag
};

// Interleaves per-tag corpora so the realized unit ratio tracks the spec.
// Document order within a tag is shuffled per (seed, tag, epoch); the
// interleaving itself is a deterministic largest-deficit schedule. budget
// counts units (tokens or documents). When wrap is false the stream stops
// at the first exhausted tag.
MixResult mix_sampler(const std::map<std::string, std::vector<Document>>& corpora,
                      const MixSpec& spec, uint64_t seed, int64_t budget,
                      int chunk_tokens = 512, bool wrap = true);

// ---- byte-level tokenizer ----
// ids 0..255 are raw bytes; 256/257/258 are BOS/EOS/PAD.

inline constexpr int kVocabSize = 259;
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;

std::vector<int> tokenize(std::string_view text, bool frame = true);
std::string detokenize(std::span<const int> ids);

}  // namespace growkit
