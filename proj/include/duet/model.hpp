#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tokens.hpp"

namespace duet {

// Continuations are hard-capped so a cyclic backend cannot hang the caller.
inline constexpr int kMaxGenerationCap = 32768;
// Temperatures below this are treated as exact greedy decoding.
inline constexpr double kZeroTempEpsilon = 1e-6;

// Deterministic autoregressive backend. step() must be pure: the same
// sequence always yields the same output, and const methods are safe to call
// concurrently.
class Model {
 public:
  virtual ~Model() = default;

  virtual const ModelProfile& profile() const = 0;
  virtual Token eos() const = 0;

  // Logits + hidden state + greedy next token for the given context.
  // Throws InvalidToken for out-of-vocabulary ids in the context and
  // BackendUnavailable for unreachable remote backends.
  virtual StepOutput step(const TokenSequence& seq) const = 0;

  // Per-token embedding table, if the backend exposes one (remote backends
  // do not; callers fall back to zeros).
  virtual const EmbeddingTable* embeddings() const { return nullptr; }
};

struct StopCondition {
  enum class Kind { eos_only, sentence_end, n_sentences };
  Kind kind = Kind::eos_only;
  int n = 1;  // sentence count for n_sentences

  static StopCondition eos() { return {Kind::eos_only, 1}; }
  static StopCondition sentence() { return {Kind::sentence_end, 1}; }
  static StopCondition sentences(int n) { return {Kind::n_sentences, n}; }
};

// "eos", "sentence", or "sentences:N".
std::string stop_to_string(StopCondition stop);
StopCondition stop_from_string(const std::string& s);

// One labeled or generated task: a prompt with bookkeeping identifiers.
struct Query {
  std::string id;
  std::string category;
  TokenSequence prompt;
};

struct ContinueResult {
  TokenSequence seq;
  bool finished = false;   // reached EOS or the requested stop
  bool hit_cap = false;    // ran out of budget before any stop fired
  int sentences = 0;       // boundaries confirmed among generated tokens
};

// Greedy argmax with ties broken toward the lowest token id.
std::size_t argmax_lowest(std::span<const double> logits);

// One greedy step with context validation against the model's vocabulary.
StepOutput next_step(const Model& m, const TokenSequence& seq);

// Generate until EOS, a sentence stop, or `max_new` tokens. Sentence stops
// need a detokenizer; `sentences_done` pre-counts boundaries already credited
// toward an n_sentences stop.
ContinueResult continue_until(const Model& m, TokenSequence seq,
                              StopCondition stop,
                              const Detokenizer* detok = nullptr,
                              int max_new = kMaxGenerationCap,
                              int sentences_done = 0);

// Temperature + nucleus sampling of one step. Logits and hidden state in the
// result are the raw model outputs; only the chosen token is stochastic.
// temperature < kZeroTempEpsilon degrades to greedy; top_p must be in (0,1].
StepOutput sample_step(const Model& m, const TokenSequence& seq,
                       double temperature, double top_p, Rng& rng);

struct DiffPoint {
  std::size_t position;  // index into the response sequence
  Token slm_token;
  Token llm_token;
};

// SLM outputs at every generated position of `response`, teacher-forced on
// the response prefix (one highly parallelizable prefill pass).
std::vector<StepOutput> prefill_outputs(const Model& slm,
                                        const TokenSequence& response);

// Positions where the SLM's greedy choice differs from the response token.
std::vector<DiffPoint> prefill_diff(const Model& slm,
                                    const TokenSequence& response);

}  // namespace duet
