#include "duet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "duet/text.hpp"

namespace duet {

std::string stop_to_string(StopCondition stop) {
  switch (stop.kind) {
    case StopCondition::Kind::eos_only:
      return "eos";
    case StopCondition::Kind::sentence_end:
      return "sentence";
    case StopCondition::Kind::n_sentences:
      return "sentences:" + std::to_string(stop.n);
  }
  throw InvalidArgument("stop_to_string: bad kind");
}

StopCondition stop_from_string(const std::string& s) {
  if (s == "eos") return StopCondition::eos();
  if (s == "sentence") return StopCondition::sentence();
  if (s.rfind("sentences:", 0) == 0) {
    const int n = std::stoi(s.substr(10));
    if (n < 1) throw InvalidArgument("stop: sentence count must be >= 1");
    return StopCondition::sentences(n);
  }
  throw InvalidArgument("unknown stop condition: " + s);
}

std::size_t argmax_lowest(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;  // strict: first max wins
  return best;
}

namespace {

void validate_context(const Model& m, const TokenSequence& seq) {
  if (seq.empty()) throw InvalidArgument("step on empty sequence");
  const int vocab = m.profile().vocab_size;
  for (Token t : seq.tokens())
    if (t.id < 0 || t.id >= vocab)
      throw InvalidToken("context token id out of vocabulary: " +
                         std::to_string(t.id));
}

}  // namespace

StepOutput next_step(const Model& m, const TokenSequence& seq) {
  validate_context(m, seq);
  StepOutput out = m.step(seq);
  for (double v : out.logits)
    if (!std::isfinite(v)) throw Error("model produced non-finite logits");
  return out;
}

ContinueResult continue_until(const Model& m, TokenSequence seq,
                              StopCondition stop, const Detokenizer* detok,
                              int max_new, int sentences_done) {
  if (max_new < 0 || max_new > kMaxGenerationCap)
    throw InvalidArgument("continue_until: max_new out of range");
  const bool sentence_stop = stop.kind != StopCondition::Kind::eos_only;
  if (sentence_stop && detok == nullptr)
    throw InvalidArgument("continue_until: sentence stop needs a detokenizer");
  const int want =
      stop.kind == StopCondition::Kind::n_sentences ? stop.n : 1;
  if (sentence_stop && want < 1)
    throw InvalidArgument("continue_until: sentence count must be >= 1");

  text::SentenceCounter counter;
  if (sentence_stop) counter.seed(detok->decode(seq.tokens()));

  ContinueResult r;
  r.sentences = 0;
  int done = sentences_done;
  for (int produced = 0; produced < max_new; ++produced) {
    const StepOutput out = next_step(m, seq);
    seq.append(out.token);
    if (out.token == m.eos()) {
      r.seq = std::move(seq);
      r.finished = true;
      return r;
    }
    if (sentence_stop) {
      const int confirmed = counter.feed(detok->piece(out.token));
      r.sentences += confirmed;
      done += confirmed;
      if (done >= want) {
        r.seq = std::move(seq);
        r.finished = true;
        return r;
      }
    }
  }
  r.seq = std::move(seq);
  r.finished = false;
  r.hit_cap = true;
  return r;
}

StepOutput sample_step(const Model& m, const TokenSequence& seq,
                       double temperature, double top_p, Rng& rng) {
  if (temperature < 0)
    throw InvalidArgument("sample_step: negative temperature");
  if (!(top_p > 0.0) || top_p > 1.0)
    throw InvalidArgument("sample_step: top_p must be in (0, 1]");
  StepOutput out = next_step(m, seq);
  if (temperature < kZeroTempEpsilon) return out;  // exact greedy

  const std::size_t n = out.logits.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.logits[a] != out.logits[b]) return out.logits[a] > out.logits[b];
    return a < b;  // deterministic nucleus membership under ties
  });

  // Softmax of temperature-scaled logits, in sorted order.
  const double max_logit = out.logits[order[0]];
  std::vector<double> p(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp((out.logits[order[i]] - max_logit) / temperature);
    z += p[i];
  }
  for (auto& v : p) v /= z;

  // Nucleus: smallest prefix of the sorted distribution reaching top_p.
  std::size_t keep = n;
  double cum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum += p[i];
    if (cum >= top_p - 1e-12) {
      keep = i + 1;
      break;
    }
  }
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept_mass += p[i];

  const double u = rng.uniform() * kept_mass;
  double acc = 0.0;
  std::size_t pick = keep - 1;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += p[i];
    if (u < acc) {
      pick = i;
      break;
    }
  }
  out.token = Token{static_cast<std::int32_t>(order[pick])};
  return out;
}

std::vector<StepOutput> prefill_outputs(const Model& slm,
                                        const TokenSequence& response) {
  std::vector<StepOutput> outs;
  outs.reserve(response.generated());
  for (std::size_t i = response.prompt_len(); i < response.size(); ++i)
    outs.push_back(next_step(slm, response.prefix(i)));
  return outs;
}

std::vector<DiffPoint> prefill_diff(const Model& slm,
                                    const TokenSequence& response) {
  std::vector<DiffPoint> diffs;
  const auto outs = prefill_outputs(slm, response);
  for (std::size_t j = 0; j < outs.size(); ++j) {
    const std::size_t pos = response.prompt_len() + j;
    if (outs[j].token != response[pos])
      diffs.push_back({pos, outs[j].token, response[pos]});
  }
  return diffs;
}

}  // namespace duet
