#include <doctest.h>

#include <atomic>
#include <map>
#include <vector>

#include "duet/labeling.hpp"
#include "duet/rng.hpp"
#include "duet/table_model.hpp"
#include "duet/world.hpp"

using namespace duet;
using label::Kind;

namespace {

// Forwarding backend that counts step() calls; used to observe cache reuse.
class CountingModel : public Model {
 public:
  explicit CountingModel(const Model& inner) : inner_(inner) {}
  const ModelProfile& profile() const override { return inner_.profile(); }
  Token eos() const override { return inner_.eos(); }
  StepOutput step(const TokenSequence& seq) const override {
    ++steps_;
    return inner_.step(seq);
  }
  const EmbeddingTable* embeddings() const override {
    return inner_.embeddings();
  }
  int steps() const { return steps_.load(); }

 private:
  const Model& inner_;
  mutable std::atomic<int> steps_{0};
};

// Naive reference continuation: prefix + first + greedy large-model tokens.
// Stops on EOS or after `want` pieces containing '.' (every sentence-closing
// piece in these worlds ends with one); `want` <= 0 means run to EOS.
TokenSequence naive_extend(const world::World& w, const TokenSequence& prefix,
                           Token first, int want) {
  TokenSequence s = prefix;
  s.append(first);
  int seen = first == w.eos() ? want : 0;  // EOS stops unconditionally
  if (want > 0 && w.detok.piece(first).find('.') != std::string::npos) ++seen;
  while ((want <= 0 || seen < want) && s.back() != w.eos()) {
    const Token t = next_step(*w.llm, s).token;
    s.append(t);
    if (t == w.eos()) break;
    if (want > 0 && w.detok.piece(t).find('.') != std::string::npos) ++seen;
  }
  return s;
}

// Naive reference verdict: run both branches, then apply the world's ground
// truth (answer-class equality for finished paths, class-mapped trailing
// contexts for fragments).
Kind naive_kind(const world::World& w, const TokenSequence& prefix,
                Token slm_tok, Token llm_tok, int want) {
  if (slm_tok == llm_tok) return Kind::identical;
  const auto a = naive_extend(w, prefix, slm_tok, want);
  const auto b = naive_extend(w, prefix, llm_tok, want);
  const bool fa = a.back() == w.eos();
  const bool fb = b.back() == w.eos();
  if (fa != fb) return Kind::divergent;
  if (fa && fb)
    return world::equivalent_answers(w, a, b) ? Kind::neutral : Kind::divergent;
  const auto tail = [&](const TokenSequence& s) {
    std::vector<std::int32_t> out;
    const std::size_t k = std::min<std::size_t>(s.size(), 2);
    for (std::size_t i = s.size() - k; i < s.size(); ++i)
      out.push_back(w.cls(s[i]));
    return out;
  };
  return tail(a) == tail(b) ? Kind::neutral : Kind::divergent;
}

// Exhaustive per-position map for one query under a given stop strength.
std::map<std::size_t, Kind> naive_map(const world::World& w,
                                      const TokenSequence& response,
                                      int want) {
  std::map<std::size_t, Kind> m;
  for (std::size_t pos = response.prompt_len(); pos < response.size(); ++pos) {
    const TokenSequence prefix = response.prefix(pos);
    const Token slm_tok = next_step(*w.slm, prefix).token;
    m[pos] = naive_kind(w, prefix, slm_tok, response[pos], want);
  }
  return m;
}

world::WorldConfig map_config(std::uint64_t seed) {
  world::WorldConfig cfg;
  cfg.seed = seed;
  cfg.stages = 8;
  cfg.symbols = 3;
  cfg.n_queries = 6;
  cfg.p_diff = 0.3;
  cfg.p_synonym = 0.5;
  cfg.sentence_every = 3;
  return cfg;
}

}  // namespace

TEST_CASE("identical candidate tokens short-circuit") {
  const auto w = world::make_world(map_config(3));
  const world::WorldOracle oracle(w);
  const auto prefix = w.queries[0].prompt;
  const Token t = next_step(*w.llm, prefix).token;
  const auto sl = label::label_candidates(*w.llm, prefix, t, t, oracle,
                                          w.detok, StopCondition::sentence(), 64);
  CHECK(sl.label.kind == Kind::identical);
  CHECK(sl.label.route() == label::Route::SLM);
  CHECK_FALSE(sl.pair.has_value());
}

TEST_CASE("differing candidates produce verified continuation pairs") {
  const auto w = world::make_world(map_config(4));
  const world::WorldOracle oracle(w);

  // Find a genuinely differing position on some query's response path.
  for (const auto& q : w.queries) {
    const auto response =
        continue_until(*w.llm, q.prompt, StopCondition::eos()).seq;
    const auto diffs = prefill_diff(*w.slm, response);
    if (diffs.empty()) continue;

    const auto& d = diffs.front();
    const auto prefix = response.prefix(d.position);
    const auto sl = label::label_candidates(
        *w.llm, prefix, d.slm_token, d.llm_token, oracle, w.detok,
        StopCondition::sentence(), 64);
    CHECK(sl.label.kind != Kind::identical);
    REQUIRE(sl.pair.has_value());
    // Both branches extend the shared prefix with their candidate token.
    CHECK(sl.pair->after_slm[d.position] == d.slm_token);
    CHECK(sl.pair->after_llm[d.position] == d.llm_token);
    CHECK(sl.pair->after_slm.prefix(d.position) == prefix);
    CHECK(sl.pair->after_llm.prefix(d.position) == prefix);
    CHECK((sl.label.route() == label::Route::LLM) ==
          (sl.label.kind == Kind::divergent));
    return;
  }
  FAIL("no differing position found in any query");
}

TEST_CASE("capped continuations are labeled divergent by timeout") {
  auto cfg = map_config(5);
  cfg.sentence_every = 100;  // no sentence piece before the answer stage
  const auto w = world::make_world(cfg);
  const world::WorldOracle oracle(w);

  for (const auto& q : w.queries) {
    const auto response =
        continue_until(*w.llm, q.prompt, StopCondition::eos()).seq;
    const auto diffs = prefill_diff(*w.slm, response);
    if (diffs.empty() || diffs.front().position > response.prompt_len() + 1)
      continue;
    const auto& d = diffs.front();
    const auto prefix = response.prefix(d.position);
    const auto sl = label::label_candidates(*w.llm, prefix, d.slm_token,
                                            d.llm_token, oracle, w.detok,
                                            StopCondition::sentence(), 1);
    CHECK(sl.label.kind == Kind::divergent);
    CHECK(sl.label.timeout);
    return;
  }
  FAIL("no early differing position found");
}

TEST_CASE("pipeline labels reproduce the exhaustive divergence map") {
  for (std::uint64_t seed : {11ULL, 12ULL}) {
    const auto w = world::make_world(map_config(seed));
    const world::WorldOracle oracle(w);

    struct StopCase {
      StopCondition stop;
      int want;  // naive sentence budget; <= 0 runs to EOS
    };
    for (const auto& sc :
         {StopCase{StopCondition::eos(), 0},
          StopCase{StopCondition::sentence(), 1},
          StopCase{StopCondition::sentences(2), 2}}) {
      label::PipelineConfig pc;
      pc.stop = sc.stop;
      pc.topk = 5;
      pc.continuation_cap = 64;
      pc.parallelism = 2;
      const auto ds = label::generate_labels(*w.slm, *w.llm, w.queries, oracle,
                                             w.detok, pc);

      std::size_t checked = 0;
      for (std::size_t qi = 0; qi < w.queries.size(); ++qi) {
        const auto response =
            continue_until(*w.llm, w.queries[qi].prompt, StopCondition::eos())
                .seq;
        const auto expected = naive_map(w, response, sc.want);
        for (const auto& r : ds.records) {
          if (r.query_index != qi) continue;
          REQUIRE(expected.count(r.position) == 1);
          CAPTURE(seed);
          CAPTURE(qi);
          CAPTURE(r.position);
          CHECK(r.label.kind == expected.at(r.position));
          CHECK((r.slm_token == r.llm_token) ==
                (r.label.kind == Kind::identical));
          ++checked;
        }
        CHECK(ds.queries[qi].finished);
      }
      // Every naive position was matched by exactly one record.
      std::size_t expected_total = 0;
      for (const auto& q : w.queries)
        expected_total +=
            continue_until(*w.llm, q.prompt, StopCondition::eos())
                .seq.generated();
      CHECK(checked == expected_total);
      CHECK(ds.records.size() == expected_total);
    }
  }
}

TEST_CASE("step records carry faithful router evidence") {
  const auto w = world::make_world(map_config(21));
  const world::WorldOracle oracle(w);
  label::PipelineConfig pc;
  pc.topk = 4;
  const auto ds = label::generate_labels(*w.slm, *w.llm, w.queries, oracle,
                                         w.detok, pc);
  REQUIRE_FALSE(ds.records.empty());
  CHECK(ds.k == 4);

  for (const auto& r : ds.records) {
    const auto response =
        continue_until(*w.llm, w.queries[r.query_index].prompt,
                       StopCondition::eos())
            .seq;
    const auto prefix = response.prefix(r.position);
    CHECK(r.context_hash == prefix.context_hash());
    const auto out = next_step(*w.slm, prefix);
    CHECK(r.slm_token == out.token);
    CHECK(r.llm_token == response[r.position]);
    CHECK(r.hidden == out.hidden);

    REQUIRE(r.topk.size() == 4);
    // Sorted by logit descending, values match the raw logits.
    for (std::size_t i = 1; i < r.topk.size(); ++i)
      CHECK(r.topk[i - 1].second >= r.topk[i].second);
    for (const auto& [id, v] : r.topk)
      CHECK(v == out.logits[static_cast<std::size_t>(id)]);
    // The first entry is the greedy token.
    CHECK(r.topk.front().first == out.token.id);
  }
}

TEST_CASE("identical model pair yields all-identical labels") {
  const auto w = world::make_world(map_config(9));
  const world::WorldOracle oracle(w);
  label::PipelineConfig pc;
  const auto ds = label::generate_labels(*w.llm, *w.llm, w.queries, oracle,
                                         w.detok, pc);
  const auto st = ds.stats();
  CHECK(st.tokens > 0);
  CHECK(st.different == 0);
  CHECK(st.divergent == 0);
  for (const auto& r : ds.records) CHECK(r.label.kind == Kind::identical);
}

TEST_CASE("dataset stats reconcile with per-query counts") {
  const auto w = world::make_world(map_config(14));
  const world::WorldOracle oracle(w);
  label::PipelineConfig pc;
  const auto ds = label::generate_labels(*w.slm, *w.llm, w.queries, oracle,
                                         w.detok, pc);
  const auto st = ds.stats();
  CHECK(st.divergent <= st.different);
  CHECK(st.different <= st.tokens);
  CHECK(st.queries == w.queries.size());

  std::size_t tokens = 0, different = 0, divergent = 0;
  for (const auto& q : ds.queries) {
    tokens += q.tokens;
    different += q.different;
    divergent += q.divergent;
    CHECK(q.divergent <= q.different);
    CHECK(q.different <= q.tokens);
    CHECK_FALSE(q.failed);
  }
  CHECK(tokens == st.tokens);
  CHECK(different == st.different);
  CHECK(divergent == st.divergent);
  CHECK(st.diff_rate ==
        doctest::Approx(static_cast<double>(different) / tokens));
  CHECK(st.div_rate ==
        doctest::Approx(static_cast<double>(divergent) / tokens));
}

TEST_CASE("divergent counts never increase with stop strength") {
  for (std::uint64_t seed : {31ULL, 32ULL, 33ULL}) {
    const auto w = world::make_world(map_config(seed));
    const world::WorldOracle oracle(w);
    std::vector<std::size_t> divergent;
    for (int n : {1, 2, 3}) {
      label::PipelineConfig pc;
      pc.stop = StopCondition::sentences(n);
      const auto ds = label::generate_labels(*w.slm, *w.llm, w.queries, oracle,
                                             w.detok, pc);
      divergent.push_back(ds.stats().divergent);
    }
    CAPTURE(seed);
    CHECK(divergent[0] >= divergent[1]);
    CHECK(divergent[1] >= divergent[2]);
  }
}

TEST_CASE("continuation caching and parallelism never change labels") {
  const auto w = world::make_world(map_config(41));
  const world::WorldOracle oracle(w);

  label::PipelineConfig base;
  base.topk = 6;
  const auto reference =
      label::generate_labels(*w.slm, *w.llm, w.queries, oracle, w.detok, base);

  for (const bool cache : {false, true}) {
    for (const int par : {1, 4}) {
      label::PipelineConfig pc = base;
      pc.cache_continuations = cache;
      pc.parallelism = par;
      const auto ds =
          label::generate_labels(*w.slm, *w.llm, w.queries, oracle, w.detok, pc);
      REQUIRE(ds.records.size() == reference.records.size());
      for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& a = reference.records[i];
        const auto& b = ds.records[i];
        CHECK(a.position == b.position);
        CHECK(a.query_index == b.query_index);
        CHECK(a.label.kind == b.label.kind);
        CHECK(a.topk == b.topk);
        CHECK(a.hidden == b.hidden);
      }
    }
  }
}

TEST_CASE("slicing from the response replaces regeneration exactly") {
  const auto w = world::make_world(map_config(8));
  const auto response =
      continue_until(*w.llm, w.queries[2].prompt, StopCondition::eos()).seq;
  REQUIRE(response.generated() >= 3);

  for (std::size_t pos = response.prompt_len(); pos < response.size(); ++pos) {
    const auto prefix = response.prefix(pos);
    const Token first = response[pos];
    const auto sliced =
        label::extend_with_llm(*w.llm, prefix, first, StopCondition::sentence(),
                               w.detok, 64, &response);
    const auto generated =
        label::extend_with_llm(*w.llm, prefix, first, StopCondition::sentence(),
                               w.detok, 64, nullptr);
    CHECK(sliced.seq == generated.seq);
    CHECK(sliced.reached_stop == generated.reached_stop);
    CHECK(sliced.timeout == generated.timeout);
  }
}

TEST_CASE("the continuation cache suppresses repeat backend calls") {
  const auto w = world::make_world(map_config(6));
  CountingModel counted(*w.llm);
  label::ContinuationCache cache;

  const auto prefix = w.queries[0].prompt;
  const Token first = next_step(*w.llm, prefix).token;

  const auto a = label::extend_with_llm(counted, prefix, first,
                                        StopCondition::eos(), w.detok, 64,
                                        nullptr, &cache);
  const int cold = counted.steps();
  CHECK(cold > 0);
  const auto b = label::extend_with_llm(counted, prefix, first,
                                        StopCondition::eos(), w.detok, 64,
                                        nullptr, &cache);
  CHECK(counted.steps() == cold);  // second call served from the cache
  CHECK(a.seq == b.seq);
  CHECK(a.reached_stop == b.reached_stop);
}

TEST_CASE("per-query failures are isolated") {
  const auto w = world::make_world(map_config(2));
  const world::WorldOracle oracle(w);
  auto queries = w.queries;
  // A prompt with an out-of-vocabulary token fails its own query only.
  queries[1].prompt = TokenSequence::from_ids(
      std::vector<std::int32_t>{0, w.cfg.vocab() + 5});

  label::PipelineConfig pc;
  const auto ds = label::generate_labels(*w.slm, *w.llm, queries, oracle,
                                         w.detok, pc);
  REQUIRE(ds.queries.size() == queries.size());
  CHECK(ds.queries[1].failed);
  CHECK_FALSE(ds.queries[1].error.empty());
  CHECK(ds.queries[1].tokens == 0);
  CHECK_FALSE(ds.queries[0].failed);
  CHECK(ds.queries[0].tokens > 0);
  for (const auto& r : ds.records) CHECK(r.query_index != 1);
}

TEST_CASE("sampled labeling with one sample at zero temperature is greedy") {
  auto cfg = map_config(17);
  const auto w = world::make_world(cfg);
  const world::WorldOracle oracle(w);

  const auto response =
      continue_until(*w.llm, w.queries[0].prompt, StopCondition::eos()).seq;
  for (std::size_t pos = response.prompt_len(); pos < response.size(); ++pos) {
    const auto prefix = response.prefix(pos);
    const auto greedy =
        label::label_step(*w.slm, *w.llm, prefix, oracle, w.detok,
                          StopCondition::sentence(), 64);
    Rng rng(pos);
    const auto sampled = label::label_step_sampled(
        *w.slm, *w.llm, prefix, oracle, w.detok, StopCondition::sentence(), 64,
        1, 0.5, 0.0, 1.0, rng);
    CHECK(sampled.kind == greedy.label.kind);
  }
}

TEST_CASE("near-delta worlds make sampled labeling seed-independent") {
  auto cfg = map_config(18);
  cfg.delta_logits = true;
  const auto w = world::make_world(cfg);
  const world::WorldOracle oracle(w);

  const auto response =
      continue_until(*w.llm, w.queries[1].prompt, StopCondition::eos()).seq;
  for (std::size_t pos = response.prompt_len(); pos < response.size(); ++pos) {
    const auto prefix = response.prefix(pos);
    const auto greedy =
        label::label_step(*w.slm, *w.llm, prefix, oracle, w.detok,
                          StopCondition::sentence(), 64);
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
      Rng rng(seed);
      const auto sampled = label::label_step_sampled(
          *w.slm, *w.llm, prefix, oracle, w.detok, StopCondition::sentence(),
          64, 1, 0.5, 1.0, 1.0, rng);
      CHECK(sampled.kind == greedy.label.kind);
    }
  }
}

namespace {

// Verifier whose verdict is a pure function of the candidate token: odd
// token ids diverge. Lets the sampling logic be replayed independently.
struct ParityVerifier : verify::SequenceVerifier {
  verify::Verdict verify(const TokenSequence& s_a, const TokenSequence&,
                         std::size_t diverge_pos) const override {
    return {s_a[diverge_pos].id % 2 == 1, ""};
  }
};

}  // namespace

TEST_CASE("sampled labeling applies the divergent-fraction threshold") {
  // SLM spreads mass over {2,3,4,5}; the LLM is (near) deterministic on 2.
  const int vocab = 8;
  TableModel slm(ModelProfile{"s", 0.1, vocab, 1, 2.0}, 1, Token{1});
  TableModel llm(ModelProfile{"l", 0.1, vocab, 1, 2.0}, 1, Token{1});
  TableModel::Row spread;
  spread.logits.assign(vocab, -30.0);
  for (int t : {2, 3, 4, 5}) spread.logits[static_cast<std::size_t>(t)] = 1.0;
  spread.hidden = {0.0};
  slm.set_row(std::array<std::int32_t, 1>{0}, spread);
  TableModel::Row delta;
  delta.logits.assign(vocab, -30.0);
  delta.logits[2] = 30.0;
  delta.hidden = {0.0};
  llm.set_row(std::array<std::int32_t, 1>{0}, delta);
  // Continuations end immediately: everything maps to EOS afterwards.
  TableModel::Row to_eos;
  to_eos.logits.assign(vocab, -30.0);
  to_eos.logits[1] = 30.0;
  to_eos.hidden = {0.0};
  llm.set_default_row(to_eos);

  const Detokenizer detok{{"", "", "a", "b", "c", "d", "", ""}};
  const ParityVerifier verifier;
  const auto prefix = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  const int k = 16;

  for (std::uint64_t seed : {100ULL, 101ULL, 102ULL}) {
    // Replay the exact draw sequence to predict the divergent fraction.
    Rng replay(seed);
    int divergent = 0, different = 0;
    for (int i = 0; i < k; ++i) {
      const Token s = sample_step(slm, prefix, 1.0, 1.0, replay).token;
      const Token l = sample_step(llm, prefix, 1.0, 1.0, replay).token;
      if (s == l) continue;
      ++different;
      if (s.id % 2 == 1) ++divergent;
    }
    REQUIRE(different > 0);
    const double frac = static_cast<double>(divergent) / k;

    for (double p_threshold : {0.05, 0.25, 0.5, 0.9}) {
      Rng rng(seed);
      const auto lab = label::label_step_sampled(
          slm, llm, prefix, verifier, detok, StopCondition::eos(), 64, k,
          p_threshold, 1.0, 1.0, rng);
      CAPTURE(seed);
      CAPTURE(p_threshold);
      const bool expect_divergent = divergent > 0 && frac >= p_threshold;
      CHECK((lab.kind == Kind::divergent) == expect_divergent);
      if (!expect_divergent) CHECK(lab.kind == Kind::neutral);
    }
  }
}

TEST_CASE("sampled labeling rejects invalid parameters") {
  const auto w = world::make_world(map_config(1));
  const world::WorldOracle oracle(w);
  Rng rng(1);
  CHECK_THROWS_AS(
      (void)label::label_step_sampled(*w.slm, *w.llm, w.queries[0].prompt,
                                      oracle, w.detok, StopCondition::eos(),
                                      64, 0, 0.5, 1.0, 1.0, rng),
      InvalidArgument);
  CHECK_THROWS_AS(
      (void)label::label_step_sampled(*w.slm, *w.llm, w.queries[0].prompt,
                                      oracle, w.detok, StopCondition::eos(),
                                      64, 1, 1.5, 1.0, 1.0, rng),
      InvalidArgument);
}

TEST_CASE("label kind strings round trip") {
  for (const auto k : {Kind::identical, Kind::neutral, Kind::divergent})
    CHECK(label::kind_from_string(label::kind_to_string(k)) == k);
  CHECK_THROWS_AS((void)label::kind_from_string("other"), SchemaMismatch);
}
