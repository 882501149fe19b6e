#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "duet/engine.hpp"
#include "duet/labeling.hpp"
#include "duet/tokens.hpp"

namespace duet::metrics {

// Expected parameters activated per emitted token, in billions:
// drafting model + router + usage-weighted large model.
double avg_activated_params(double slm_b, double router_b, double llm_b,
                            double usage_rate);

// Activated parameters times thousands of output tokens — the latency proxy.
double cost_kb(double avg_params_b, double avg_tokens_k);

struct EfficiencyReport {
  double avg_params_b = 0.0;
  double cost_kb = 0.0;
  double usage_rate = 0.0;
  double avg_tokens_k = 0.0;
  std::size_t traces = 0;
  std::optional<double> total_flops_t;     // TFLOPs across all traces
  std::optional<double> total_mem_tb;      // TB of weight traffic
  std::optional<double> mem_per_token_gb;  // GB per emitted token
};

// Aggregate usage/size/cost over traces. Pass profiles to also fill the
// compute/memory fields.
EfficiencyReport summarize(std::span<const engine::GenerationTrace> traces,
                           double slm_b, double router_b, double llm_b);
EfficiencyReport summarize(std::span<const engine::GenerationTrace> traces,
                           const ModelProfile& slm, const ModelProfile& llm,
                           double router_b, std::size_t router_params,
                           double router_bytes_per_param = 4.0,
                           double kv_bytes_per_token = 0.0);

struct ComputeMemory {
  double flops = 0.0;
  double bytes = 0.0;
};

struct CostModelOptions {
  std::size_t router_params = 0;
  double router_bytes_per_param = 4.0;
  // Optional per-token cache-traffic surcharge added for every token a model
  // ingests; the default accounting covers weight traffic only.
  double kv_bytes_per_token = 0.0;
};

// Decode-step cost model over one trace. Every decision charges one drafting
// pass (2 x params FLOPs, one weights read) plus a router pass; a decision
// routed to the large model additionally charges a prefill over the span
// since its last invocation (2 x params x span FLOPs, one weights read).
// The large model starts cold: its first span covers the whole prefix.
ComputeMemory estimate_compute_memory(const engine::GenerationTrace& trace,
                                      const ModelProfile& slm,
                                      const ModelProfile& llm,
                                      const CostModelOptions& opt = {});

// Same cost model for a single model generating every token itself
// (prompt prefill + one decode step per token).
ComputeMemory estimate_single_model(std::size_t prompt_len,
                                    std::size_t gen_tokens,
                                    const ModelProfile& model,
                                    double kv_bytes_per_token = 0.0);

// Gaps between consecutive large-model invocations (in tokens); the first
// element is the distance from the start of generation.
std::vector<std::size_t> llm_intervals(const engine::GenerationTrace& trace);

// Pooled gap -> count histogram across traces.
std::map<std::size_t, std::size_t> interval_histogram(
    std::span<const engine::GenerationTrace> traces);

struct CategoryStats {
  std::string category;
  std::size_t queries = 0;
  std::size_t tokens = 0;
  std::size_t different = 0;
  std::size_t divergent = 0;
  double diff_rate = 0.0;
  double div_rate = 0.0;
};

struct StatsTable {
  std::vector<CategoryStats> rows;  // one per category, name-sorted
  CategoryStats total;              // category "all"
};

// Per-category and aggregate label counts and rates.
StatsTable dataset_stats(const label::LabelDataset& ds);

}  // namespace duet::metrics
