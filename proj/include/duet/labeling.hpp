#pragma once

#include <filesystem>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "duet/model.hpp"
#include "duet/verifier.hpp"

namespace duet::label {

enum class Kind { identical, neutral, divergent };
enum class Route { SLM, LLM };

// Routing decision for one training position. Only divergent steps route to
// the large model; identical and neutral ones stay on the small model.
struct RoutingLabel {
  Kind kind = Kind::identical;
  bool timeout = false;  // divergence declared because a continuation hit its cap

  Route route() const {
    return kind == Kind::divergent ? Route::LLM : Route::SLM;
  }
};

// The two verification branches grown from a differing position: the shared
// prefix plus each candidate token plus the large model's continuation.
struct ContinuationPair {
  TokenSequence after_slm;
  TokenSequence after_llm;
};

struct StepRecord {
  std::size_t query_index = 0;
  std::size_t position = 0;        // index into the response sequence
  std::uint64_t context_hash = 0;  // hash of the token ids before `position`
  Token slm_token;
  Token llm_token;
  // Top-k (token id, logit) pairs of the small model at this position,
  // sorted by logit descending (ties toward lower ids).
  std::vector<std::pair<std::int32_t, double>> topk;
  std::vector<double> hidden;  // small-model hidden state
  RoutingLabel label;
};

struct QueryInfo {
  std::string id;
  std::string category;
  std::size_t tokens = 0;
  std::size_t different = 0;
  std::size_t divergent = 0;
  bool finished = true;  // response reached EOS within the cap
  bool failed = false;
  std::string error;
};

struct DatasetStats {
  std::size_t queries = 0;
  std::size_t tokens = 0;
  std::size_t different = 0;
  std::size_t divergent = 0;
  double diff_rate = 0.0;
  double div_rate = 0.0;
};

struct LabelDataset {
  int k = 0;  // top-k length carried by every record
  ModelProfile slm_profile;
  ModelProfile llm_profile;
  std::string stop_desc = "sentence";
  std::uint64_t seed = 0;
  std::vector<QueryInfo> queries;
  std::vector<StepRecord> records;

  DatasetStats stats() const;

  void save(std::ostream& os) const;
  void save_file(const std::filesystem::path& p) const;
  static LabelDataset load(std::istream& is);
  static LabelDataset load_file(const std::filesystem::path& p);
};

struct PipelineConfig {
  StopCondition stop = StopCondition::sentence();
  int topk = 100;               // clamped to the vocabulary size
  int continuation_cap = 256;   // per-branch continuation budget
  int response_cap = kMaxGenerationCap;
  int parallelism = 1;          // labeling threads per query
  bool cache_continuations = true;
  std::uint64_t seed = 0;
  // Sampled labeling of the candidate tokens (greedy when temperature ~ 0).
  int samples = 1;
  double p_threshold = 0.5;  // divergent iff divergent fraction >= this
  double temperature = 0.0;
  double top_p = 1.0;
};

// Memoized large-model continuations, keyed by exact context + stop.
class ContinuationCache {
 public:
  struct Entry {
    std::vector<Token> cont;
    bool reached_stop = false;
    bool timeout = false;
  };
  std::optional<Entry> find(const std::string& key) const;
  void put(const std::string& key, Entry e);

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, Entry> map_;
};

struct Extension {
  TokenSequence seq;
  bool reached_stop = false;  // EOS or the requested sentence stop
  bool timeout = false;       // cap exhausted first
};

// prefix ⊕ first ⊕ large-model tokens until `stop`, EOS, or `cap` tokens.
// When `response` covers prefix⊕first, tokens are sliced from it instead of
// re-queried (byte-identical by greedy determinism).
Extension extend_with_llm(const Model& llm, const TokenSequence& prefix,
                          Token first, StopCondition stop,
                          const Detokenizer& detok, int cap,
                          const TokenSequence* response = nullptr,
                          ContinuationCache* cache = nullptr);

struct StepLabel {
  RoutingLabel label;
  std::optional<ContinuationPair> pair;  // absent for identical steps
};

// Label one position given both candidate tokens. Equal tokens short-circuit
// to identical; a capped continuation yields divergent-by-timeout; otherwise
// the verifier decides.
StepLabel label_candidates(const Model& llm, const TokenSequence& prefix,
                           Token slm_token, Token llm_token,
                           const verify::SequenceVerifier& verifier,
                           const Detokenizer& detok, StopCondition stop,
                           int continuation_cap,
                           const TokenSequence* response = nullptr,
                           std::size_t response_pos = 0,
                           ContinuationCache* cache = nullptr);

// Convenience wrapper that derives both candidates greedily from the prefix.
StepLabel label_step(const Model& slm, const Model& llm,
                     const TokenSequence& prefix,
                     const verify::SequenceVerifier& verifier,
                     const Detokenizer& detok, StopCondition stop,
                     int continuation_cap);

// Sampled variant: `samples` first-token pairs drawn at (temperature, top_p),
// greedy continuations, divergent iff the divergent fraction >= p_threshold.
// samples=1 at temperature 0 reduces exactly to label_step.
RoutingLabel label_step_sampled(const Model& slm, const Model& llm,
                                const TokenSequence& prefix,
                                const verify::SequenceVerifier& verifier,
                                const Detokenizer& detok, StopCondition stop,
                                int continuation_cap, int samples,
                                double p_threshold, double temperature,
                                double top_p, Rng& rng);

// The full pipeline: large-model responses, parallel small-model prefill
// diff, batched continuations, verification. Failures are isolated per
// query and recorded in the dataset's query table.
LabelDataset generate_labels(const Model& slm, const Model& llm,
                             std::span<const Query> queries,
                             const verify::SequenceVerifier& verifier,
                             const Detokenizer& detok,
                             const PipelineConfig& cfg);

// True iff the last token of `seq` completes a sentence.
bool detect_sentence_end(const TokenSequence& seq, const Detokenizer& detok);

std::string kind_to_string(Kind k);
Kind kind_from_string(const std::string& s);

}  // namespace duet::label
