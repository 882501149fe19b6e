#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/labeling.hpp"
#include "duet/model.hpp"
#include "duet/router_net.hpp"
#include "duet/tokens.hpp"
#include "duet/verifier.hpp"

namespace duet::engine {

enum class Route { SLM, LLM };

// One emitted position: the drafting model's token, the router probability,
// and what was finally emitted (the LLM's token when routed there).
struct RoutingDecision {
  std::size_t position = 0;  // index into the full sequence, prompt included
  double probability = 0.0;
  Route routed_to = Route::SLM;
  Token slm_token{0};
  Token emitted_token{0};

  bool operator==(const RoutingDecision&) const = default;
};

struct GenerationTrace {
  std::string query_id;
  std::vector<RoutingDecision> decisions;
  TokenSequence output;  // prompt plus every emitted token, append-only
  bool finished = false;
  std::string error;  // non-empty when a backend failure aborted the trace

  std::size_t llm_tokens() const;
  double usage_rate() const;  // llm_tokens / decisions (0 for empty traces)
};

struct EngineConfig {
  double p_th = 0.5;
  std::size_t max_tokens = 32768;
  double temperature = 0.0;  // below the zero-temperature epsilon = greedy
  double top_p = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Divergence probability for one drafted step. Implementations must be pure
// functions of (prefix, step) so traces are reproducible and batch workers
// can share one router.
class Router {
 public:
  virtual ~Router() = default;
  virtual double probability(const TokenSequence& prefix,
                             const StepOutput& slm_step) const = 0;
};

// The trained network. Builds its sample from the drafted step: top-k logit
// values (descending), hidden state, and the embedding of the drafted token —
// the same token even if the LLM later overrides it.
class NeuralRouter : public Router {
 public:
  NeuralRouter(router::RouterWeights w, const EmbeddingTable* embeddings);
  double probability(const TokenSequence& prefix,
                     const StepOutput& slm_step) const override;
  const router::RouterWeights& weights() const { return weights_; }

 private:
  router::RouterWeights weights_;
  const EmbeddingTable* embeddings_;
};

// Runs the labeling decision at inference time: routes to the LLM exactly on
// divergent steps (probability 1) and stays on the drafting model otherwise
// (probability 0). This is the reference policy the trained router imitates.
class PathFollowingRouter : public Router {
 public:
  PathFollowingRouter(const Model& llm, const verify::SequenceVerifier& v,
                      const Detokenizer& detok, StopCondition stop,
                      int continuation_cap);
  double probability(const TokenSequence& prefix,
                     const StepOutput& slm_step) const override;

 private:
  const Model& llm_;
  const verify::SequenceVerifier& verifier_;
  const Detokenizer& detok_;
  StopCondition stop_;
  int cap_;
  mutable label::ContinuationCache cache_;
};

// Mixed decode: draft with the small model, consult the router, correct
// immediately with the large model when the probability exceeds p_th. The
// emitted token is final — no rollbacks. The large model's prefix state is
// tracked as a last-known position and extended in one span per invocation.
// The per-run rng is seeded from (cfg.seed, prompt content) so batching
// cannot change results. Backend failures end the trace early with the
// partial output preserved and `error` set.
GenerationTrace generate(const Model& slm, const Model& llm,
                         const Router& router, const TokenSequence& prompt,
                         const EngineConfig& cfg, std::string query_id = "");

// Throughput-only batching: per-job isolation, results identical to calling
// generate() per prompt in order.
std::vector<GenerationTrace> generate_batch(
    const Model& slm, const Model& llm, const Router& router,
    std::span<const TokenSequence> prompts, const EngineConfig& cfg,
    int parallelism = 1, std::span<const std::string> ids = {});

// Positions the large model was invoked at, in order.
std::vector<std::size_t> llm_positions(const GenerationTrace& trace);

// Trace persistence: a header line, one line per decision (full mode only),
// and a trailer with totals. Summary files keep only header + trailer and are
// terminal outputs; load_traces() requires full traces.
void save_trace(const GenerationTrace& trace, std::ostream& os,
                bool full = true);
void save_traces_file(std::span<const GenerationTrace> traces,
                      const std::filesystem::path& path, bool full = true);
std::vector<GenerationTrace> load_traces(std::istream& is);
std::vector<GenerationTrace> load_traces_file(const std::filesystem::path& path);

}  // namespace duet::engine
