#include "duet/labeling.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "duet/text.hpp"

namespace duet::label {

using nlohmann::json;

std::string kind_to_string(Kind k) {
  switch (k) {
    case Kind::identical: return "identical";
    case Kind::neutral: return "neutral";
    case Kind::divergent: return "divergent";
  }
  throw InvalidArgument("kind_to_string: bad kind");
}

Kind kind_from_string(const std::string& s) {
  if (s == "identical") return Kind::identical;
  if (s == "neutral") return Kind::neutral;
  if (s == "divergent") return Kind::divergent;
  throw SchemaMismatch("unknown label kind: " + s);
}

std::optional<ContinuationCache::Entry> ContinuationCache::find(
    const std::string& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = map_.find(key);
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

void ContinuationCache::put(const std::string& key, Entry e) {
  std::lock_guard<std::mutex> lock(mu_);
  map_.emplace(key, std::move(e));
}

namespace {

std::string cache_key(const TokenSequence& seq, StopCondition stop, int cap,
                      int sentences_done) {
  std::string key;
  key.reserve(seq.size() * 4 + 16);
  for (Token t : seq.tokens()) {
    const auto u = static_cast<std::uint32_t>(t.id);
    key.push_back(static_cast<char>(u & 0xff));
    key.push_back(static_cast<char>((u >> 8) & 0xff));
    key.push_back(static_cast<char>((u >> 16) & 0xff));
    key.push_back(static_cast<char>((u >> 24) & 0xff));
  }
  key += '/';
  key += stop_to_string(stop);
  key += '/';
  key += std::to_string(cap);
  key += '/';
  key += std::to_string(sentences_done);
  return key;
}

}  // namespace

Extension extend_with_llm(const Model& llm, const TokenSequence& prefix,
                          Token first, StopCondition stop,
                          const Detokenizer& detok, int cap,
                          const TokenSequence* response,
                          ContinuationCache* cache) {
  if (cap < 1) throw InvalidArgument("extend_with_llm: cap must be >= 1");
  Extension ext;
  ext.seq = prefix;
  ext.seq.append(first);
  if (first == llm.eos()) {
    ext.reached_stop = true;
    return ext;
  }

  const bool sentence_stop = stop.kind != StopCondition::Kind::eos_only;
  const int want = stop.kind == StopCondition::Kind::n_sentences ? stop.n : 1;
  text::SentenceCounter counter;
  int done = 0;
  if (sentence_stop) {
    counter.seed(detok.decode(prefix.tokens()));
    done = counter.feed(detok.piece(first));
    if (done >= want) {
      ext.reached_stop = true;
      return ext;
    }
  }

  std::string key;
  if (cache != nullptr) {
    key = cache_key(ext.seq, stop, cap, done);
    if (auto hit = cache->find(key)) {
      for (Token t : hit->cont) ext.seq.append(t);
      ext.reached_stop = hit->reached_stop;
      ext.timeout = hit->timeout;
      return ext;
    }
  }

  const std::size_t cont_from = ext.seq.size();
  int produced = 0;
  // Slice from the pre-generated response while it covers this branch.
  if (response != nullptr && prefix.size() < response->size() &&
      (*response)[prefix.size()] == first) {
    for (std::size_t i = prefix.size() + 1;
         i < response->size() && produced < cap; ++i) {
      const Token t = (*response)[i];
      ext.seq.append(t);
      ++produced;
      if (t == llm.eos()) {
        ext.reached_stop = true;
        break;
      }
      if (sentence_stop) {
        done += counter.feed(detok.piece(t));
        if (done >= want) {
          ext.reached_stop = true;
          break;
        }
      }
    }
  }
  // Generate whatever the slice did not cover.
  while (!ext.reached_stop && produced < cap) {
    const StepOutput out = next_step(llm, ext.seq);
    ext.seq.append(out.token);
    ++produced;
    if (out.token == llm.eos()) {
      ext.reached_stop = true;
      break;
    }
    if (sentence_stop) {
      done += counter.feed(detok.piece(out.token));
      if (done >= want) {
        ext.reached_stop = true;
        break;
      }
    }
  }
  ext.timeout = !ext.reached_stop;

  if (cache != nullptr) {
    ContinuationCache::Entry e;
    e.cont.assign(ext.seq.tokens().begin() +
                      static_cast<std::ptrdiff_t>(cont_from),
                  ext.seq.tokens().end());
    e.reached_stop = ext.reached_stop;
    e.timeout = ext.timeout;
    cache->put(key, std::move(e));
  }
  return ext;
}

StepLabel label_candidates(const Model& llm, const TokenSequence& prefix,
                           Token slm_token, Token llm_token,
                           const verify::SequenceVerifier& verifier,
                           const Detokenizer& detok, StopCondition stop,
                           int continuation_cap, const TokenSequence* response,
                           std::size_t response_pos, ContinuationCache* cache) {
  StepLabel out;
  if (slm_token == llm_token) {
    out.label = RoutingLabel{Kind::identical, false};
    return out;
  }
  const TokenSequence* slice =
      (response != nullptr && response_pos == prefix.size()) ? response
                                                             : nullptr;
  Extension ext_l = extend_with_llm(llm, prefix, llm_token, stop, detok,
                                    continuation_cap, slice, cache);
  Extension ext_s = extend_with_llm(llm, prefix, slm_token, stop, detok,
                                    continuation_cap, nullptr, cache);
  out.pair = ContinuationPair{ext_s.seq, ext_l.seq};
  if (ext_s.timeout || ext_l.timeout) {
    out.label = RoutingLabel{Kind::divergent, true};
    return out;
  }
  const verify::Verdict v = verifier.verify(ext_s.seq, ext_l.seq, prefix.size());
  out.label = RoutingLabel{v.divergent ? Kind::divergent : Kind::neutral, false};
  return out;
}

StepLabel label_step(const Model& slm, const Model& llm,
                     const TokenSequence& prefix,
                     const verify::SequenceVerifier& verifier,
                     const Detokenizer& detok, StopCondition stop,
                     int continuation_cap) {
  const Token s = next_step(slm, prefix).token;
  const Token l = next_step(llm, prefix).token;
  return label_candidates(llm, prefix, s, l, verifier, detok, stop,
                          continuation_cap);
}

RoutingLabel label_step_sampled(const Model& slm, const Model& llm,
                                const TokenSequence& prefix,
                                const verify::SequenceVerifier& verifier,
                                const Detokenizer& detok, StopCondition stop,
                                int continuation_cap, int samples,
                                double p_threshold, double temperature,
                                double top_p, Rng& rng) {
  if (samples < 1)
    throw InvalidArgument("label_step_sampled: samples must be >= 1");
  if (p_threshold < 0.0 || p_threshold > 1.0)
    throw InvalidArgument("label_step_sampled: p_threshold must be in [0,1]");
  int divergent_count = 0;
  bool any_timeout = false;
  bool all_identical = true;
  for (int i = 0; i < samples; ++i) {
    const Token s = sample_step(slm, prefix, temperature, top_p, rng).token;
    const Token l = sample_step(llm, prefix, temperature, top_p, rng).token;
    if (s == l) continue;
    all_identical = false;
    const StepLabel sl = label_candidates(llm, prefix, s, l, verifier, detok,
                                          stop, continuation_cap);
    if (sl.label.kind == Kind::divergent) {
      ++divergent_count;
      any_timeout = any_timeout || sl.label.timeout;
    }
  }
  const double frac =
      static_cast<double>(divergent_count) / static_cast<double>(samples);
  if (frac + 1e-12 >= p_threshold && divergent_count > 0)
    return RoutingLabel{Kind::divergent, any_timeout};
  if (all_identical) return RoutingLabel{Kind::identical, false};
  return RoutingLabel{Kind::neutral, false};
}

namespace {

std::vector<std::pair<std::int32_t, double>> topk_of(
    const std::vector<double>& logits, int k) {
  std::vector<std::int32_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) {
    if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)])
      return logits[static_cast<std::size_t>(a)] >
             logits[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<std::pair<std::int32_t, double>> out;
  const int take = std::min<int>(k, static_cast<int>(idx.size()));
  out.reserve(static_cast<std::size_t>(take));
  for (int i = 0; i < take; ++i)
    out.emplace_back(idx[static_cast<std::size_t>(i)],
                     logits[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
  return out;
}

void run_indexed(std::size_t n, int parallelism,
                 const std::function<void(std::size_t)>& work) {
  if (parallelism <= 1 || n <= 1) {
    for (std::size_t j = 0; j < n; ++j) work(j);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::future<void>> futs;
  const int threads = std::min<int>(parallelism, static_cast<int>(n));
  futs.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    futs.push_back(std::async(std::launch::async, [&] {
      for (;;) {
        const std::size_t j = next.fetch_add(1);
        if (j >= n) return;
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
}

}  // namespace

LabelDataset generate_labels(const Model& slm, const Model& llm,
                             std::span<const Query> queries,
                             const verify::SequenceVerifier& verifier,
                             const Detokenizer& detok,
                             const PipelineConfig& cfg) {
  if (cfg.topk < 1) throw InvalidArgument("pipeline: topk must be >= 1");
  if (cfg.continuation_cap < 1 || cfg.response_cap < 1)
    throw InvalidArgument("pipeline: caps must be >= 1");
  if (cfg.parallelism < 1)
    throw InvalidArgument("pipeline: parallelism must be >= 1");
  if (slm.profile().vocab_size != llm.profile().vocab_size)
    throw InvalidArgument("pipeline: models must share one vocabulary");

  LabelDataset ds;
  ds.k = std::min(cfg.topk, slm.profile().vocab_size);
  ds.slm_profile = slm.profile();
  ds.llm_profile = llm.profile();
  ds.stop_desc = stop_to_string(cfg.stop);
  ds.seed = cfg.seed;

  const bool sampled = cfg.samples > 1 || cfg.temperature >= kZeroTempEpsilon;

  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const Query& q = queries[qi];
    QueryInfo info;
    info.id = q.id;
    info.category = q.category;
    try {
      const ContinueResult rr = continue_until(llm, q.prompt,
                                               StopCondition::eos(), nullptr,
                                               cfg.response_cap);
      info.finished = rr.finished;
      const TokenSequence& response = rr.seq;
      const std::vector<StepOutput> outs = prefill_outputs(slm, response);
      const std::size_t n = outs.size();
      std::vector<StepRecord> recs(n);
      ContinuationCache cache;
      ContinuationCache* cache_ptr =
          cfg.cache_continuations ? &cache : nullptr;

      run_indexed(n, cfg.parallelism, [&](std::size_t j) {
        const std::size_t pos = response.prompt_len() + j;
        const TokenSequence prefix = response.prefix(pos);
        StepRecord r;
        r.query_index = qi;
        r.position = pos;
        r.context_hash = prefix.context_hash();
        r.slm_token = outs[j].token;
        r.llm_token = response[pos];
        r.topk = topk_of(outs[j].logits, ds.k);
        r.hidden = outs[j].hidden;
        if (sampled) {
          Rng rng(mix_seed(mix_seed(cfg.seed, qi), pos));
          r.label = label_step_sampled(slm, llm, prefix, verifier, detok,
                                       cfg.stop, cfg.continuation_cap,
                                       cfg.samples, cfg.p_threshold,
                                       cfg.temperature, cfg.top_p, rng);
        } else {
          r.label = label_candidates(llm, prefix, r.slm_token, r.llm_token,
                                     verifier, detok, cfg.stop,
                                     cfg.continuation_cap, &response, pos,
                                     cache_ptr)
                        .label;
        }
        recs[j] = std::move(r);
      });

      for (auto& r : recs) {
        ++info.tokens;
        if (r.label.kind != Kind::identical) ++info.different;
        if (r.label.kind == Kind::divergent) ++info.divergent;
        ds.records.push_back(std::move(r));
      }
    } catch (const std::exception& e) {
      info.failed = true;
      info.error = e.what();
    }
    ds.queries.push_back(std::move(info));
  }
  return ds;
}

bool detect_sentence_end(const TokenSequence& seq, const Detokenizer& detok) {
  if (seq.empty()) return false;
  text::SentenceCounter counter;
  int last = 0;
  for (Token t : seq.tokens()) last = counter.feed(detok.piece(t));
  return last > 0;
}

DatasetStats LabelDataset::stats() const {
  DatasetStats s;
  s.queries = queries.size();
  s.tokens = records.size();
  for (const auto& r : records) {
    if (r.label.kind != Kind::identical) ++s.different;
    if (r.label.kind == Kind::divergent) ++s.divergent;
  }
  if (s.tokens > 0) {
    s.diff_rate = static_cast<double>(s.different) / static_cast<double>(s.tokens);
    s.div_rate = static_cast<double>(s.divergent) / static_cast<double>(s.tokens);
  }
  return s;
}

namespace {

json profile_to_json(const ModelProfile& p) {
  return json{{"bytes_per_param", p.bytes_per_param},
              {"hidden", p.hidden_dim},
              {"name", p.name},
              {"params_b", p.param_count_b},
              {"vocab", p.vocab_size}};
}

ModelProfile profile_from_json(const json& j) {
  ModelProfile p;
  p.name = j.at("name").get<std::string>();
  p.param_count_b = j.at("params_b").get<double>();
  p.vocab_size = j.at("vocab").get<int>();
  p.hidden_dim = j.at("hidden").get<int>();
  p.bytes_per_param = j.at("bytes_per_param").get<double>();
  return p;
}

}  // namespace

void LabelDataset::save(std::ostream& os) const {
  json header = {{"k", k},
                 {"llm", profile_to_json(llm_profile)},
                 {"schema", "duet.labels.v1"},
                 {"seed", seed},
                 {"slm", profile_to_json(slm_profile)},
                 {"stop", stop_desc}};
  os << header.dump() << "\n";
  for (const auto& q : queries) {
    json jq = {{"category", q.category}, {"different", q.different},
               {"divergent", q.divergent}, {"error", q.error},
               {"failed", q.failed},       {"finished", q.finished},
               {"id", q.id},               {"tokens", q.tokens}};
    os << jq.dump() << "\n";
  }
  for (const auto& r : records) {
    json topk = json::array();
    for (const auto& [id, v] : r.topk) topk.push_back(json::array({id, v}));
    json jr = {{"ctx", hex64(r.context_hash)},
               {"hid", r.hidden},
               {"label", kind_to_string(r.label.kind)},
               {"llm", r.llm_token.id},
               {"pos", r.position},
               {"q", r.query_index},
               {"slm", r.slm_token.id},
               {"timeout", r.label.timeout},
               {"topk", topk}};
    os << jr.dump() << "\n";
  }
}

void LabelDataset::save_file(const std::filesystem::path& p) const {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw FileError("cannot write dataset file: " + p.string());
  save(f);
}

LabelDataset LabelDataset::load(std::istream& is) {
  std::string line;
  if (!std::getline(is, line))
    throw SchemaMismatch("label dataset: empty stream");
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema", "") != "duet.labels.v1")
    throw SchemaMismatch("label dataset: bad or missing schema header");

  LabelDataset ds;
  ds.k = header.at("k").get<int>();
  ds.seed = header.at("seed").get<std::uint64_t>();
  ds.slm_profile = profile_from_json(header.at("slm"));
  ds.llm_profile = profile_from_json(header.at("llm"));
  ds.stop_desc = header.at("stop").get<std::string>();

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.contains("pos")) {
      StepRecord r;
      r.query_index = j.at("q").get<std::size_t>();
      r.position = j.at("pos").get<std::size_t>();
      r.context_hash = parse_hex64(j.at("ctx").get<std::string>());
      r.slm_token = Token{j.at("slm").get<std::int32_t>()};
      r.llm_token = Token{j.at("llm").get<std::int32_t>()};
      for (const auto& pair : j.at("topk"))
        r.topk.emplace_back(pair.at(0).get<std::int32_t>(),
                            pair.at(1).get<double>());
      r.hidden = j.at("hid").get<std::vector<double>>();
      r.label.kind = kind_from_string(j.at("label").get<std::string>());
      r.label.timeout = j.at("timeout").get<bool>();
      ds.records.push_back(std::move(r));
    } else {
      QueryInfo q;
      q.id = j.at("id").get<std::string>();
      q.category = j.at("category").get<std::string>();
      q.tokens = j.at("tokens").get<std::size_t>();
      q.different = j.at("different").get<std::size_t>();
      q.divergent = j.at("divergent").get<std::size_t>();
      q.finished = j.at("finished").get<bool>();
      q.failed = j.at("failed").get<bool>();
      q.error = j.at("error").get<std::string>();
      ds.queries.push_back(std::move(q));
    }
  }
  return ds;
}

LabelDataset LabelDataset::load_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FileError("cannot open dataset file: " + p.string());
  return load(f);
}

}  // namespace duet::label
