#pragma once

// Preference corpus data model: ingestion from JSONL, worker-intersection filtering,
// hashed text featurization and per-worker train/test splitting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prefclust/errors.hpp"
#include "prefclust/linalg.hpp"
#include "prefclust/random.hpp"

namespace prefclust {

using FeatureVector = Vector;

/// One comparison. `chosen` is always the preferred response.
struct PreferenceRecord {
  std::string prompt_id;
  std::string worker_id;
  FeatureVector chosen;
  FeatureVector rejected;
  std::optional<std::string> prompt_text;
  std::optional<std::string> chosen_text;
  std::optional<std::string> rejected_text;

  bool operator==(const PreferenceRecord&) const = default;
};

struct WorkerDataset {
  std::string worker_id;
  std::vector<PreferenceRecord> records;

  bool operator==(const WorkerDataset&) const = default;
};

enum class SplitTag { train, test, unsplit };

inline std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::test: return "test";
    case SplitTag::unsplit: return "unsplit";
  }
  return "unsplit";
}

inline SplitTag parse_split_tag(std::string_view s) {
  if (s == "train") return SplitTag::train;
  if (s == "test") return SplitTag::test;
  if (s == "unsplit") return SplitTag::unsplit;
  throw DataError("unknown split tag '" + std::string(s) + "'");
}

struct Corpus {
  std::vector<WorkerDataset> workers;
  std::size_t feature_dim = 0;
  SplitTag split_tag = SplitTag::unsplit;
  /// Free-form origin marker; the simulator stamps it so ground truth can be matched.
  std::string provenance;

  std::size_t n_workers() const noexcept { return workers.size(); }

  std::size_t n_records() const noexcept {
    std::size_t n = 0;
    for (const auto& w : workers) n += w.records.size();
    return n;
  }

  const WorkerDataset* find(std::string_view worker_id) const noexcept {
    for (const auto& w : workers)
      if (w.worker_id == worker_id) return &w;
    return nullptr;
  }

  std::vector<std::string> worker_ids() const {
    std::vector<std::string> ids;
    ids.reserve(workers.size());
    for (const auto& w : workers) ids.push_back(w.worker_id);
    return ids;
  }

  /// All records, worker by worker, in stored order.
  std::vector<PreferenceRecord> all_records() const {
    std::vector<PreferenceRecord> out;
    out.reserve(n_records());
    for (const auto& w : workers) out.insert(out.end(), w.records.begin(), w.records.end());
    return out;
  }

  bool operator==(const Corpus&) const = default;
};

/// Throws if any Corpus invariant is violated.
inline void validate_corpus(const Corpus& corpus) {
  std::unordered_map<std::string, bool> seen;
  for (const auto& w : corpus.workers) {
    if (!seen.emplace(w.worker_id, true).second)
      throw DataError("duplicate worker_id '" + w.worker_id + "'");
    if (w.records.empty()) throw DataError("worker '" + w.worker_id + "' has no records");
    for (const auto& r : w.records) {
      if (r.worker_id != w.worker_id)
        throw DataError("record of worker '" + r.worker_id + "' stored under '" + w.worker_id +
                        "'");
      if (r.chosen.size() != corpus.feature_dim || r.rejected.size() != corpus.feature_dim)
        throw DimensionError("record '" + r.prompt_id + "' has feature length " +
                             std::to_string(r.chosen.size()) + "/" +
                             std::to_string(r.rejected.size()) + ", corpus dimension is " +
                             std::to_string(corpus.feature_dim));
      if (!all_finite(r.chosen) || !all_finite(r.rejected))
        throw DataError("record '" + r.prompt_id + "' has non-finite features");
    }
  }
}

/// Groups records by worker in order of first appearance.
inline Corpus make_corpus(std::vector<PreferenceRecord> records, std::size_t feature_dim,
                          SplitTag tag = SplitTag::unsplit, std::string provenance = {}) {
  Corpus corpus;
  corpus.feature_dim = feature_dim;
  corpus.split_tag = tag;
  corpus.provenance = std::move(provenance);
  std::unordered_map<std::string, std::size_t> index;
  for (auto& r : records) {
    auto [it, inserted] = index.emplace(r.worker_id, corpus.workers.size());
    if (inserted) corpus.workers.push_back(WorkerDataset{r.worker_id, {}});
    corpus.workers[it->second].records.push_back(std::move(r));
  }
  validate_corpus(corpus);
  return corpus;
}

// ---------------------------------------------------------------------------
// Featurization

struct FeaturizerConfig {
  std::size_t dim = 64;
  std::uint64_t seed = 0;
};

namespace detail {

inline void hash_ngrams(std::string_view tag, std::string_view text, std::uint64_t seed,
                        FeatureVector& out) {
  // \x02 and \x03 mark text boundaries so even empty strings contribute n-grams.
  std::string padded;
  padded.reserve(text.size() + 2);
  padded.push_back('\x02');
  padded.append(text);
  padded.push_back('\x03');

  const std::uint64_t base = fnv1a64(tag, mix64(seed) ^ 0xcbf29ce484222325ULL);
  for (std::size_t n = 1; n <= 3; ++n) {
    if (padded.size() < n) break;
    for (std::size_t i = 0; i + n <= padded.size(); ++i) {
      const std::uint64_t h = mix64(fnv1a64(std::string_view(padded).substr(i, n), base + n));
      const std::size_t slot = static_cast<std::size_t>(h % out.size());
      out[slot] += (h >> 63) ? 1.0 : -1.0;
    }
  }
}

}  // namespace detail

/// Signed hashed bag of character 1..3-grams over the prompt and response, L2-normalized.
inline FeatureVector featurize_text(std::string_view prompt, std::string_view response,
                                    const FeaturizerConfig& config) {
  if (config.dim == 0) throw ConfigError("featurizer dimension must be at least 1");
  FeatureVector v(config.dim, 0.0);
  detail::hash_ngrams("prompt", prompt, config.seed, v);
  detail::hash_ngrams("response", response, config.seed, v);
  const double n = norm(v);
  if (n == 0.0) {
    v[0] = 1.0;
    return v;
  }
  for (auto& x : v) x /= n;
  return v;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

namespace detail {

struct ParsedResponse {
  FeatureVector features;
  std::optional<std::string> text;
};

inline ParsedResponse parse_response(const nlohmann::json& value, const std::string& prompt,
                                     const FeaturizerConfig& config, std::size_t line) {
  const nlohmann::json* v = &value;
  if (v->is_object()) {
    if (!v->contains("text"))
      throw DataError("line " + std::to_string(line) + ": response object lacks 'text'");
    v = &(*v)["text"];
  }
  if (v->is_string()) {
    auto text = v->get<std::string>();
    return {featurize_text(prompt, text, config), std::move(text)};
  }
  if (v->is_array()) {
    FeatureVector f;
    f.reserve(v->size());
    for (const auto& x : *v) {
      if (!x.is_number())
        throw DataError("line " + std::to_string(line) + ": feature arrays must be numeric");
      f.push_back(x.get<double>());
    }
    if (!all_finite(f))
      throw DataError("line " + std::to_string(line) + ": non-finite feature value");
    return {std::move(f), std::nullopt};
  }
  throw DataError("line " + std::to_string(line) +
                  ": response must be a string, a numeric array or {\"text\": ...}");
}

inline std::string required_string(const nlohmann::json& obj, const char* key, std::size_t line) {
  if (!obj.contains(key) || !obj[key].is_string())
    throw DataError("line " + std::to_string(line) + ": missing string field '" + key + "'");
  return obj[key].get<std::string>();
}

inline std::optional<std::string> optional_string(const nlohmann::json& obj, const char* key) {
  if (obj.contains(key) && obj[key].is_string()) return obj[key].get<std::string>();
  return std::nullopt;
}

}  // namespace detail

/// Parses preference JSONL. Besides the native {"chosen", "rejected"} form, lines may encode
/// the preference by index: {"responses" | "summaries": [a, b], "choice": 0 | 1}.
/// `source` names the input in error messages.
inline Corpus parse_jsonl(std::istream& in, const FeaturizerConfig& config,
                          std::string_view source = "<stream>") {
  std::vector<PreferenceRecord> records;
  std::optional<std::size_t> dim;
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) -> DataError {
    return DataError(std::string(source) + ":" + std::to_string(line_no) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw fail(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!obj.is_object()) throw fail("expected a JSON object");

    try {
      PreferenceRecord rec;
      rec.worker_id = detail::required_string(obj, "worker_id", line_no);
      rec.prompt_id = obj.contains("prompt_id") && obj["prompt_id"].is_string()
                          ? obj["prompt_id"].get<std::string>()
                          : std::string(source) + "#" + std::to_string(line_no);
      rec.prompt_text = detail::optional_string(obj, "prompt");
      const std::string prompt = rec.prompt_text.value_or("");

      const nlohmann::json* chosen = nullptr;
      const nlohmann::json* rejected = nullptr;
      if (obj.contains("chosen") || obj.contains("rejected")) {
        if (!obj.contains("chosen") || !obj.contains("rejected"))
          throw fail("both 'chosen' and 'rejected' are required");
        chosen = &obj["chosen"];
        rejected = &obj["rejected"];
      } else {
        const char* key = obj.contains("responses") ? "responses" : "summaries";
        if (!obj.contains(key) || !obj[key].is_array() || obj[key].size() != 2)
          throw fail("missing 'chosen'/'rejected' (or a two-element 'responses' with 'choice')");
        if (!obj.contains("choice") || !obj["choice"].is_number_integer())
          throw fail("'choice' must be 0 or 1");
        const int choice = obj["choice"].get<int>();
        if (choice != 0 && choice != 1) throw fail("'choice' must be 0 or 1");
        chosen = &obj[key][choice];
        rejected = &obj[key][1 - choice];
      }

      auto c = detail::parse_response(*chosen, prompt, config, line_no);
      auto r = detail::parse_response(*rejected, prompt, config, line_no);
      if (c.features.size() != r.features.size())
        throw DimensionError("dimension mismatch: chosen has " +
                             std::to_string(c.features.size()) + " features, rejected has " +
                             std::to_string(r.features.size()));
      if (c.features.empty()) throw DimensionError("empty feature vector");
      if (dim && *dim != c.features.size())
        throw DimensionError("dimension mismatch: expected " + std::to_string(*dim) +
                             " features, got " + std::to_string(c.features.size()));
      dim = c.features.size();

      rec.chosen = std::move(c.features);
      rec.rejected = std::move(r.features);
      if (c.text) rec.chosen_text = std::move(c.text);
      else rec.chosen_text = detail::optional_string(obj, "chosen_text");
      if (r.text) rec.rejected_text = std::move(r.text);
      else rec.rejected_text = detail::optional_string(obj, "rejected_text");
      records.push_back(std::move(rec));
    } catch (const DimensionError& e) {
      throw DimensionError(std::string(source) + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
  }

  if (records.empty()) throw DataError(std::string(source) + ": empty corpus");
  return make_corpus(std::move(records), *dim);
}

inline Corpus ingest_jsonl(const std::filesystem::path& path, const FeaturizerConfig& config) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_jsonl(in, config, path.string());
}

// ---------------------------------------------------------------------------
// Corpus serialization: JSONL with array features plus a sidecar header.

inline nlohmann::ordered_json record_to_json(const PreferenceRecord& r) {
  nlohmann::ordered_json j;
  j["prompt_id"] = r.prompt_id;
  j["worker_id"] = r.worker_id;
  if (r.prompt_text) j["prompt"] = *r.prompt_text;
  j["chosen"] = r.chosen;
  j["rejected"] = r.rejected;
  if (r.chosen_text) j["chosen_text"] = *r.chosen_text;
  if (r.rejected_text) j["rejected_text"] = *r.rejected_text;
  return j;
}

inline void write_corpus_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const auto& w : corpus.workers)
    for (const auto& r : w.records) out << record_to_json(r).dump() << '\n';
}

inline nlohmann::ordered_json corpus_header(const Corpus& corpus) {
  nlohmann::ordered_json h;
  h["feature_dim"] = corpus.feature_dim;
  h["split_tag"] = to_string(corpus.split_tag);
  h["n_workers"] = corpus.n_workers();
  if (!corpus.provenance.empty()) h["provenance"] = corpus.provenance;
  return h;
}

/// corpus.jsonl -> corpus.header.json
inline std::filesystem::path header_path_for(const std::filesystem::path& jsonl) {
  auto p = jsonl;
  p.replace_extension(".header.json");
  return p;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& jsonl) {
  {
    std::ofstream out(jsonl, std::ios::binary);
    if (!out) throw DataError("cannot write " + jsonl.string());
    write_corpus_jsonl(corpus, out);
  }
  std::ofstream h(header_path_for(jsonl), std::ios::binary);
  if (!h) throw DataError("cannot write " + header_path_for(jsonl).string());
  h << corpus_header(corpus).dump(2) << '\n';
}

/// Reads a corpus written by write_corpus. The header is optional; when present its
/// dimension and worker count are checked against the data.
inline Corpus read_corpus(const std::filesystem::path& jsonl,
                          const FeaturizerConfig& config = {}) {
  const auto header_path = header_path_for(jsonl);
  std::optional<nlohmann::json> header;
  if (std::filesystem::exists(header_path)) {
    std::ifstream h(header_path);
    try {
      header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(header_path.string() + ": " + e.what());
    }
  }
  FeaturizerConfig fc = config;
  if (header && header->contains("feature_dim"))
    fc.dim = (*header)["feature_dim"].get<std::size_t>();
  Corpus corpus = ingest_jsonl(jsonl, fc);
  if (header) {
    if (header->contains("feature_dim") &&
        (*header)["feature_dim"].get<std::size_t>() != corpus.feature_dim)
      throw DimensionError(jsonl.string() + ": header feature_dim disagrees with data");
    if (header->contains("n_workers") &&
        (*header)["n_workers"].get<std::size_t>() != corpus.n_workers())
      throw DataError(jsonl.string() + ": header n_workers disagrees with data");
    if (header->contains("split_tag"))
      corpus.split_tag = parse_split_tag((*header)["split_tag"].get<std::string>());
    if (header->contains("provenance"))
      corpus.provenance = (*header)["provenance"].get<std::string>();
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Worker filtering and splitting

struct IngestReport {
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
  std::size_t train_workers = 0;
  std::size_t test_workers = 0;
  std::size_t filtered_train_examples = 0;
  std::size_t filtered_test_examples = 0;
  std::size_t final_workers = 0;

  bool operator==(const IngestReport&) const = default;
};

inline nlohmann::ordered_json to_json(const IngestReport& r) {
  nlohmann::ordered_json j;
  j["train_examples"] = r.train_examples;
  j["test_examples"] = r.test_examples;
  j["train_workers"] = r.train_workers;
  j["test_workers"] = r.test_workers;
  j["filtered_train_examples"] = r.filtered_train_examples;
  j["filtered_test_examples"] = r.filtered_test_examples;
  j["final_workers"] = r.final_workers;
  return j;
}

struct FilteredSplits {
  Corpus train;
  Corpus test;
  IngestReport report;
};

/// Keeps only workers present in both corpora, preserving each corpus' worker order.
inline FilteredSplits filter_common_workers(const Corpus& train, const Corpus& test) {
  require_same_size(train.feature_dim, test.feature_dim, "filter_common_workers");

  const auto keep = [](const Corpus& from, const Corpus& other) {
    Corpus out;
    out.feature_dim = from.feature_dim;
    out.split_tag = from.split_tag;
    out.provenance = from.provenance;
    for (const auto& w : from.workers)
      if (other.find(w.worker_id) != nullptr) out.workers.push_back(w);
    return out;
  };

  FilteredSplits result{keep(train, test), keep(test, train), {}};
  if (result.train.workers.empty())
    throw DataError("filter_common_workers: train and test share no workers");

  auto& rep = result.report;
  rep.train_examples = train.n_records();
  rep.test_examples = test.n_records();
  rep.train_workers = train.n_workers();
  rep.test_workers = test.n_workers();
  rep.filtered_train_examples = result.train.n_records();
  rep.filtered_test_examples = result.test.n_records();
  rep.final_workers = result.train.n_workers();
  return result;
}

struct SplitCorpus {
  Corpus train;
  Corpus test;
};

/// Stratified per-worker split: each worker keeps round(fraction * n) records for training,
/// clamped so both sides get at least one. Selected records keep their original order.
inline SplitCorpus split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must lie in (0, 1)");

  SplitCorpus out;
  for (Corpus* c : {&out.train, &out.test}) {
    c->feature_dim = corpus.feature_dim;
    c->provenance = corpus.provenance;
  }
  out.train.split_tag = SplitTag::train;
  out.test.split_tag = SplitTag::test;

  for (std::size_t wi = 0; wi < corpus.workers.size(); ++wi) {
    const auto& w = corpus.workers[wi];
    const std::size_t n = w.records.size();
    if (n < 2)
      throw DataError("cannot stratify worker '" + w.worker_id + "': needs at least 2 records");
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

    Rng rng(derive_seed(seed, wi));
    const auto perm = rng.permutation(n);
    std::vector<bool> in_train(n, false);
    for (std::size_t i = 0; i < n_train; ++i) in_train[perm[i]] = true;

    WorkerDataset tr{w.worker_id, {}};
    WorkerDataset te{w.worker_id, {}};
    for (std::size_t i = 0; i < n; ++i) (in_train[i] ? tr : te).records.push_back(w.records[i]);
    out.train.workers.push_back(std::move(tr));
    out.test.workers.push_back(std::move(te));
  }
  return out;
}

}  // namespace prefclust
