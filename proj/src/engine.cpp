#include "duet/engine.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <numeric>

#include <json.hpp>

#include "duet/hash.hpp"

namespace duet::engine {

using nlohmann::json;

std::size_t GenerationTrace::llm_tokens() const {
  std::size_t n = 0;
  for (const auto& d : decisions) n += d.routed_to == Route::LLM ? 1 : 0;
  return n;
}

double GenerationTrace::usage_rate() const {
  if (decisions.empty()) return 0.0;
  return static_cast<double>(llm_tokens()) /
         static_cast<double>(decisions.size());
}

void EngineConfig::validate() const {
  if (p_th < 0.0 || p_th > 1.0)
    throw InvalidArgument("engine config: p_th must be in [0,1]");
  if (max_tokens < 1)
    throw InvalidArgument("engine config: max_tokens must be >= 1");
  if (temperature < 0.0)
    throw InvalidArgument("engine config: temperature must be >= 0");
  if (top_p <= 0.0 || top_p > 1.0)
    throw InvalidArgument("engine config: top_p must be in (0,1]");
}

NeuralRouter::NeuralRouter(router::RouterWeights w,
                           const EmbeddingTable* embeddings)
    : weights_(std::move(w)), embeddings_(embeddings) {
  if (embeddings_ == nullptr)
    throw InvalidArgument("neural router: embedding table required");
  if (embeddings_->dim != weights_.cfg.embed_dim)
    throw ShapeMismatch("neural router: embedding dim does not match config");
}

double NeuralRouter::probability(const TokenSequence&,
                                 const StepOutput& slm_step) const {
  const auto k = static_cast<std::size_t>(weights_.cfg.topk);
  if (slm_step.logits.size() < k)
    throw ShapeMismatch("neural router: vocabulary smaller than top-k width");
  router::Sample s;
  std::vector<std::size_t> idx(slm_step.logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (slm_step.logits[a] != slm_step.logits[b])
      return slm_step.logits[a] > slm_step.logits[b];
    return a < b;
  });
  s.logits.reserve(k);
  for (std::size_t i = 0; i < k; ++i) s.logits.push_back(slm_step.logits[idx[i]]);
  s.hidden = slm_step.hidden;
  const auto row = embeddings_->row(slm_step.token);
  s.embed.assign(row.begin(), row.end());
  return router::forward(weights_, s);
}

PathFollowingRouter::PathFollowingRouter(const Model& llm,
                                         const verify::SequenceVerifier& v,
                                         const Detokenizer& detok,
                                         StopCondition stop,
                                         int continuation_cap)
    : llm_(llm), verifier_(v), detok_(detok), stop_(stop),
      cap_(continuation_cap) {}

double PathFollowingRouter::probability(const TokenSequence& prefix,
                                        const StepOutput& slm_step) const {
  const Token llm_tok = next_step(llm_, prefix).token;
  const label::StepLabel sl =
      label::label_candidates(llm_, prefix, slm_step.token, llm_tok, verifier_,
                              detok_, stop_, cap_, nullptr, 0, &cache_);
  return sl.label.route() == label::Route::LLM ? 1.0 : 0.0;
}

GenerationTrace generate(const Model& slm, const Model& llm,
                         const Router& router, const TokenSequence& prompt,
                         const EngineConfig& cfg, std::string query_id) {
  cfg.validate();
  if (slm.profile().vocab_size != llm.profile().vocab_size)
    throw InvalidArgument("engine: models must share one vocabulary");

  GenerationTrace trace;
  trace.query_id = query_id.empty() ? hex64(hash_ids(prompt.ids()))
                                    : std::move(query_id);
  trace.output = prompt;
  const bool greedy = cfg.temperature < kZeroTempEpsilon;
  Rng rng(mix_seed(cfg.seed, hash_ids(prompt.ids())));

  try {
    for (std::size_t step = 0; step < cfg.max_tokens; ++step) {
      const std::size_t pos = trace.output.size();
      const StepOutput drafted =
          greedy ? next_step(slm, trace.output)
                 : sample_step(slm, trace.output, cfg.temperature, cfg.top_p,
                               rng);
      const double p = router.probability(trace.output, drafted);
      RoutingDecision d;
      d.position = pos;
      d.probability = p;
      d.slm_token = drafted.token;
      d.emitted_token = drafted.token;
      if (p > cfg.p_th) {
        d.routed_to = Route::LLM;
        const StepOutput corrected =
            greedy ? next_step(llm, trace.output)
                   : sample_step(llm, trace.output, cfg.temperature, cfg.top_p,
                                 rng);
        d.emitted_token = corrected.token;
      }
      trace.decisions.push_back(d);
      trace.output.append(d.emitted_token);
      if (d.emitted_token == slm.eos() || d.emitted_token == llm.eos()) {
        trace.finished = true;
        break;
      }
    }
  } catch (const std::exception& e) {
    trace.error = e.what();
    trace.finished = false;
  }
  return trace;
}

std::vector<GenerationTrace> generate_batch(
    const Model& slm, const Model& llm, const Router& router,
    std::span<const TokenSequence> prompts, const EngineConfig& cfg,
    int parallelism, std::span<const std::string> ids) {
  if (prompts.empty()) throw InvalidArgument("generate_batch: no jobs");
  if (!ids.empty() && ids.size() != prompts.size())
    throw InvalidArgument("generate_batch: ids/prompts size mismatch");
  if (parallelism < 1)
    throw InvalidArgument("generate_batch: parallelism must be >= 1");

  std::vector<GenerationTrace> traces(prompts.size());
  auto work = [&](std::size_t j) {
    traces[j] = generate(slm, llm, router, prompts[j], cfg,
                         ids.empty() ? std::string{} : ids[j]);
  };
  if (parallelism == 1 || prompts.size() == 1) {
    for (std::size_t j = 0; j < prompts.size(); ++j) work(j);
    return traces;
  }
  std::atomic<std::size_t> next{0};
  const int threads =
      std::min<int>(parallelism, static_cast<int>(prompts.size()));
  std::vector<std::future<void>> futs;
  futs.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    futs.push_back(std::async(std::launch::async, [&] {
      for (;;) {
        const std::size_t j = next.fetch_add(1);
        if (j >= prompts.size()) return;
        work(j);
      }
    }));
  std::exception_ptr first;
  for (auto& f : futs) {
    try {
      f.get();
    } catch (...) {
      if (!first) first = std::current_exception();
    }
  }
  if (first) std::rethrow_exception(first);
  return traces;
}

std::vector<std::size_t> llm_positions(const GenerationTrace& trace) {
  std::vector<std::size_t> out;
  for (const auto& d : trace.decisions)
    if (d.routed_to == Route::LLM) out.push_back(d.position);
  return out;
}

void save_trace(const GenerationTrace& trace, std::ostream& os, bool full) {
  json header = {{"id", trace.query_id},
                 {"prompt", trace.output.prefix(trace.output.prompt_len()).ids()},
                 {"schema", "duet.trace.v1"}};
  os << header.dump() << "\n";
  if (full) {
    for (const auto& d : trace.decisions) {
      json jd = {{"p", d.probability},
                 {"pos", d.position},
                 {"route", d.routed_to == Route::LLM ? "llm" : "slm"},
                 {"slm", d.slm_token.id},
                 {"tok", d.emitted_token.id}};
      os << jd.dump() << "\n";
    }
  }
  std::vector<std::int32_t> generated;
  generated.reserve(trace.decisions.size());
  for (std::size_t i = trace.output.prompt_len(); i < trace.output.size(); ++i)
    generated.push_back(trace.output[i].id);
  json trailer = {{"error", trace.error},
                  {"finished", trace.finished},
                  {"llm_tokens", trace.llm_tokens()},
                  {"output", generated},
                  {"tokens", trace.decisions.size()},
                  {"usage", trace.usage_rate()}};
  os << trailer.dump() << "\n";
}

void save_traces_file(std::span<const GenerationTrace> traces,
                      const std::filesystem::path& path, bool full) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot write trace file: " + path.string());
  for (const auto& t : traces) save_trace(t, f, full);
}

std::vector<GenerationTrace> load_traces(std::istream& is) {
  std::vector<GenerationTrace> out;
  std::string line;
  GenerationTrace cur;
  bool in_trace = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw SchemaMismatch("trace: bad json line");
    if (j.contains("schema")) {
      if (j.at("schema").get<std::string>() != "duet.trace.v1")
        throw SchemaMismatch("trace: unknown schema");
      if (in_trace) throw SchemaMismatch("trace: header before trailer");
      cur = GenerationTrace{};
      cur.query_id = j.at("id").get<std::string>();
      const auto prompt = j.at("prompt").get<std::vector<std::int32_t>>();
      cur.output = TokenSequence::from_ids(prompt);
      in_trace = true;
    } else if (j.contains("route")) {
      if (!in_trace) throw SchemaMismatch("trace: decision before header");
      RoutingDecision d;
      d.position = j.at("pos").get<std::size_t>();
      d.probability = j.at("p").get<double>();
      d.routed_to =
          j.at("route").get<std::string>() == "llm" ? Route::LLM : Route::SLM;
      d.slm_token = Token{j.at("slm").get<std::int32_t>()};
      d.emitted_token = Token{j.at("tok").get<std::int32_t>()};
      cur.decisions.push_back(d);
    } else if (j.contains("finished")) {
      if (!in_trace) throw SchemaMismatch("trace: trailer before header");
      if (cur.decisions.empty() && j.at("tokens").get<std::size_t>() != 0)
        throw SchemaMismatch(
            "trace: summary-only trace cannot be reloaded (decisions missing)");
      cur.finished = j.at("finished").get<bool>();
      cur.error = j.at("error").get<std::string>();
      for (std::int32_t id : j.at("output").get<std::vector<std::int32_t>>())
        cur.output.append(Token{id});
      out.push_back(std::move(cur));
      cur = GenerationTrace{};
      in_trace = false;
    } else {
      throw SchemaMismatch("trace: unrecognized line");
    }
  }
  if (in_trace) throw SchemaMismatch("trace: missing trailer");
  return out;
}

std::vector<GenerationTrace> load_traces_file(
    const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FileError("cannot open trace file: " + path.string());
  return load_traces(f);
}

}  // namespace duet::engine
