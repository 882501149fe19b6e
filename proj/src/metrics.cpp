#include "duet/metrics.hpp"

#include <algorithm>

namespace duet::metrics {

double avg_activated_params(double slm_b, double router_b, double llm_b,
                            double usage_rate) {
  if (usage_rate < 0.0 || usage_rate > 1.0)
    throw InvalidArgument("avg_activated_params: usage_rate must be in [0,1]");
  if (slm_b < 0.0 || router_b < 0.0 || llm_b < 0.0)
    throw InvalidArgument("avg_activated_params: negative parameter count");
  return slm_b + router_b + usage_rate * llm_b;
}

double cost_kb(double avg_params_b, double avg_tokens_k) {
  if (avg_params_b < 0.0 || avg_tokens_k < 0.0)
    throw InvalidArgument("cost_kb: negative input");
  return avg_params_b * avg_tokens_k;
}

namespace {

EfficiencyReport base_report(std::span<const engine::GenerationTrace> traces,
                             double slm_b, double router_b, double llm_b) {
  EfficiencyReport r;
  r.traces = traces.size();
  std::size_t decisions = 0, llm_count = 0;
  for (const auto& t : traces) {
    decisions += t.decisions.size();
    llm_count += t.llm_tokens();
  }
  r.usage_rate = decisions == 0 ? 0.0
                                : static_cast<double>(llm_count) /
                                      static_cast<double>(decisions);
  r.avg_tokens_k = traces.empty() ? 0.0
                                  : static_cast<double>(decisions) /
                                        static_cast<double>(traces.size()) /
                                        1000.0;
  r.avg_params_b = avg_activated_params(slm_b, router_b, llm_b, r.usage_rate);
  r.cost_kb = cost_kb(r.avg_params_b, r.avg_tokens_k);
  return r;
}

double params_abs(const ModelProfile& p) { return p.param_count_b * 1e9; }

}  // namespace

EfficiencyReport summarize(std::span<const engine::GenerationTrace> traces,
                           double slm_b, double router_b, double llm_b) {
  return base_report(traces, slm_b, router_b, llm_b);
}

EfficiencyReport summarize(std::span<const engine::GenerationTrace> traces,
                           const ModelProfile& slm, const ModelProfile& llm,
                           double router_b, std::size_t router_params,
                           double router_bytes_per_param,
                           double kv_bytes_per_token) {
  EfficiencyReport r =
      base_report(traces, slm.param_count_b, router_b, llm.param_count_b);
  CostModelOptions opt;
  opt.router_params = router_params;
  opt.router_bytes_per_param = router_bytes_per_param;
  opt.kv_bytes_per_token = kv_bytes_per_token;
  ComputeMemory total;
  std::size_t decisions = 0;
  for (const auto& t : traces) {
    const ComputeMemory cm = estimate_compute_memory(t, slm, llm, opt);
    total.flops += cm.flops;
    total.bytes += cm.bytes;
    decisions += t.decisions.size();
  }
  r.total_flops_t = total.flops / 1e12;
  r.total_mem_tb = total.bytes / 1e12;
  r.mem_per_token_gb =
      decisions == 0 ? 0.0 : total.bytes / static_cast<double>(decisions) / 1e9;
  return r;
}

ComputeMemory estimate_compute_memory(const engine::GenerationTrace& trace,
                                      const ModelProfile& slm,
                                      const ModelProfile& llm,
                                      const CostModelOptions& opt) {
  ComputeMemory cm;
  if (trace.decisions.empty()) return cm;
  const double slm_p = params_abs(slm);
  const double llm_p = params_abs(llm);
  const double router_p = static_cast<double>(opt.router_params);
  std::size_t llm_known = 0;
  for (const auto& d : trace.decisions) {
    cm.flops += 2.0 * slm_p;
    cm.bytes += slm_p * slm.bytes_per_param + opt.kv_bytes_per_token;
    if (router_p > 0) {
      cm.flops += 2.0 * router_p;
      cm.bytes += router_p * opt.router_bytes_per_param;
    }
    if (d.routed_to == engine::Route::LLM) {
      const auto span = static_cast<double>(d.position - llm_known);
      cm.flops += 2.0 * llm_p * span;
      cm.bytes += llm_p * llm.bytes_per_param + opt.kv_bytes_per_token * span;
      llm_known = d.position;
    }
  }
  return cm;
}

ComputeMemory estimate_single_model(std::size_t prompt_len,
                                    std::size_t gen_tokens,
                                    const ModelProfile& model,
                                    double kv_bytes_per_token) {
  ComputeMemory cm;
  if (gen_tokens == 0) return cm;
  const double p = params_abs(model);
  const auto total_ingested =
      static_cast<double>(prompt_len + gen_tokens - 1) + 1.0;
  cm.flops = 2.0 * p * total_ingested;
  // One weights pass for the prompt prefill, then one per decode step.
  cm.bytes = p * model.bytes_per_param * (1.0 + static_cast<double>(gen_tokens)) +
             kv_bytes_per_token * total_ingested;
  return cm;
}

std::vector<std::size_t> llm_intervals(const engine::GenerationTrace& trace) {
  std::vector<std::size_t> gaps;
  if (trace.decisions.empty()) return gaps;
  const std::size_t start = trace.decisions.front().position;
  std::size_t last = start;
  bool seen = false;
  for (const auto& d : trace.decisions) {
    if (d.routed_to != engine::Route::LLM) continue;
    gaps.push_back(seen ? d.position - last : d.position - start + 1);
    last = d.position;
    seen = true;
  }
  return gaps;
}

std::map<std::size_t, std::size_t> interval_histogram(
    std::span<const engine::GenerationTrace> traces) {
  std::map<std::size_t, std::size_t> hist;
  for (const auto& t : traces)
    for (std::size_t g : llm_intervals(t)) ++hist[g];
  return hist;
}

StatsTable dataset_stats(const label::LabelDataset& ds) {
  if (ds.queries.empty())
    throw InvalidArgument("dataset_stats: empty dataset");
  std::map<std::string, CategoryStats> by_cat;
  for (const auto& q : ds.queries) {
    CategoryStats& c = by_cat[q.category];
    c.category = q.category;
    ++c.queries;
    c.tokens += q.tokens;
    c.different += q.different;
    c.divergent += q.divergent;
  }
  StatsTable table;
  table.total.category = "all";
  for (auto& [name, c] : by_cat) {
    if (c.tokens > 0) {
      c.diff_rate = static_cast<double>(c.different) /
                    static_cast<double>(c.tokens);
      c.div_rate = static_cast<double>(c.divergent) /
                   static_cast<double>(c.tokens);
    }
    table.total.queries += c.queries;
    table.total.tokens += c.tokens;
    table.total.different += c.different;
    table.total.divergent += c.divergent;
    table.rows.push_back(c);
  }
  if (table.total.tokens > 0) {
    table.total.diff_rate = static_cast<double>(table.total.different) /
                            static_cast<double>(table.total.tokens);
    table.total.div_rate = static_cast<double>(table.total.divergent) /
                           static_cast<double>(table.total.tokens);
  }
  return table;
}

}  // namespace duet::metrics
