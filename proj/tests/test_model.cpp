#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "duet/model.hpp"
#include "duet/rng.hpp"
#include "duet/table_model.hpp"

using namespace duet;

namespace {

TableModel::Row row_peak(int vocab, int hidden, std::int32_t peak,
                         double lo = 0.0, double hi = 1.0) {
  TableModel::Row r;
  r.logits.assign(static_cast<std::size_t>(vocab), lo);
  r.logits[static_cast<std::size_t>(peak)] = hi;
  r.hidden.assign(static_cast<std::size_t>(hidden), 0.25);
  return r;
}

TableModel chain_model(const std::vector<std::int32_t>& emits, int vocab,
                       Token eos) {
  // Order-1 model: after the prompt token 0 it deterministically emits
  // `emits` then EOS.
  TableModel m(ModelProfile{"chain", 0.1, vocab, 2, 2.0}, 1, eos);
  std::int32_t prev = 0;
  for (std::int32_t e : emits) {
    m.set_row(std::array<std::int32_t, 1>{prev}, row_peak(vocab, 2, e));
    prev = e;
  }
  m.set_row(std::array<std::int32_t, 1>{prev}, row_peak(vocab, 2, eos.id));
  return m;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest id") {
  CHECK(argmax_lowest(std::vector<double>{0.1, 0.9, 0.3}) == 1);
  CHECK(argmax_lowest(std::vector<double>{1.0, 1.0, 1.0}) == 0);
  CHECK(argmax_lowest(std::vector<double>{-5.0, -1.0, -1.0}) == 1);
  CHECK_THROWS_AS(argmax_lowest(std::vector<double>{}), InvalidArgument);
}

TEST_CASE("table model delta rows force the next token") {
  TableModel m(ModelProfile{"m", 0.1, 10, 2, 2.0}, 1, Token{1});
  m.set_row(std::array<std::int32_t, 1>{3}, row_peak(10, 2, 7));

  const auto out = next_step(m, TokenSequence::from_ids(std::vector<std::int32_t>{3}));
  CHECK(out.token == Token{7});

  // Greedy choice cross-checked by a linear scan over the logits.
  std::size_t best = 0;
  for (std::size_t i = 1; i < out.logits.size(); ++i)
    if (out.logits[i] > out.logits[best]) best = i;
  CHECK(out.token.id == static_cast<std::int32_t>(best));
}

TEST_CASE("table model tie rows pick token 0") {
  TableModel m(ModelProfile{"m", 0.1, 4, 1, 2.0}, 1, Token{1});
  TableModel::Row r;
  r.logits = {2.0, 2.0, 2.0, 2.0};
  r.hidden = {0.0};
  m.set_row(std::array<std::int32_t, 1>{2}, r);
  const auto out = next_step(m, TokenSequence::from_ids(std::vector<std::int32_t>{2}));
  CHECK(out.token == Token{0});
}

TEST_CASE("table model context resolution and errors") {
  TableModel m(ModelProfile{"m", 0.1, 6, 1, 2.0}, 2, Token{1});
  m.set_row(std::array<std::int32_t, 2>{2, 3}, row_peak(6, 1, 4));
  m.set_row(std::array<std::int32_t, 1>{2}, row_peak(6, 1, 5));

  // Full order-2 context when available.
  auto s23 = TokenSequence::from_ids(std::vector<std::int32_t>{0, 2, 3});
  CHECK(next_step(m, s23).token == Token{4});
  // A one-token sequence uses the shorter context row.
  auto s2 = TokenSequence::from_ids(std::vector<std::int32_t>{2});
  CHECK(next_step(m, s2).token == Token{5});

  // Unknown context without a default row is an error ...
  auto s45 = TokenSequence::from_ids(std::vector<std::int32_t>{4, 5});
  CHECK_THROWS_AS((void)next_step(m, s45), UnknownContext);
  // ... and falls back once a default row exists.
  m.set_default_row(row_peak(6, 1, 1));
  CHECK(next_step(m, s45).token == Token{1});

  CHECK_THROWS_AS((void)next_step(m, TokenSequence{}), InvalidArgument);
  auto bad = TokenSequence::from_ids(std::vector<std::int32_t>{99});
  CHECK_THROWS_AS((void)next_step(m, bad), InvalidToken);
}

TEST_CASE("table model rejects malformed rows") {
  TableModel m(ModelProfile{"m", 0.1, 4, 2, 2.0}, 1, Token{1});
  TableModel::Row bad;
  bad.logits = {1.0, 2.0};  // wrong width
  bad.hidden = {0.0, 0.0};
  CHECK_THROWS_AS(m.set_row(std::array<std::int32_t, 1>{0}, bad), ShapeMismatch);
  bad.logits = {1.0, 2.0, 3.0, std::nan("")};
  CHECK_THROWS_AS(m.set_row(std::array<std::int32_t, 1>{0}, bad), InvalidArgument);
  bad.logits = {1.0, 2.0, 3.0, 4.0};
  bad.hidden = {0.0};
  CHECK_THROWS_AS(m.set_row(std::array<std::int32_t, 1>{0}, bad), ShapeMismatch);
  CHECK_THROWS_AS(m.set_row(std::array<std::int32_t, 1>{7}, row_peak(4, 2, 0)),
                  InvalidToken);
}

TEST_CASE("non-finite backend logits are rejected") {
  struct NanModel : Model {
    ModelProfile prof{"nan", 0.1, 3, 1, 2.0};
    const ModelProfile& profile() const override { return prof; }
    Token eos() const override { return Token{0}; }
    StepOutput step(const TokenSequence&) const override {
      return {{0.0, std::nan(""), 1.0}, {0.0}, Token{2}};
    }
  } m;
  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  CHECK_THROWS_AS((void)next_step(m, s), Error);
}

TEST_CASE("deterministic chains run to eos") {
  const Token eos{1};
  auto m = chain_model({5, 9}, 12, eos);
  auto start = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  const auto r = continue_until(m, start, StopCondition::eos());
  CHECK(r.finished);
  CHECK_FALSE(r.hit_cap);
  CHECK(r.seq.ids() == std::vector<std::int32_t>{0, 5, 9, 1});
  CHECK(r.seq.prompt_len() == 1);

  // Equivalent to manual stepwise composition.
  TokenSequence manual = start;
  for (int i = 0; i < 64; ++i) {
    const auto out = next_step(m, manual);
    manual.append(out.token);
    if (out.token == eos) break;
  }
  CHECK(manual == r.seq);
}

TEST_CASE("generation cap flags an unfinished sequence") {
  const Token eos{1};
  TableModel m(ModelProfile{"loop", 0.1, 4, 1, 2.0}, 1, eos);
  m.set_row(std::array<std::int32_t, 1>{0}, row_peak(4, 1, 2));
  m.set_row(std::array<std::int32_t, 1>{2}, row_peak(4, 1, 3));
  m.set_row(std::array<std::int32_t, 1>{3}, row_peak(4, 1, 2));  // 2<->3 cycle

  auto start = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  const auto r = continue_until(m, start, StopCondition::eos(), nullptr, 5);
  CHECK_FALSE(r.finished);
  CHECK(r.hit_cap);
  CHECK(r.seq.generated() == 5);
}

TEST_CASE("sentence stops halt at confirmed boundaries") {
  const Token eos{1};
  // Emits tokens decoding to "x" " y." " Then" " more." then EOS.
  auto m = chain_model({2, 3, 4, 5}, 8, eos);
  m.set_pieces({"Q", "", "x", " y.", " Then", " more.", "", ""});
  const Detokenizer detok = m.detokenizer();

  auto start = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  const auto one = continue_until(m, start, StopCondition::sentence(), &detok);
  CHECK(one.finished);
  CHECK(one.sentences == 1);
  // A letter-adjacent period confirms as soon as it arrives.
  CHECK(one.seq.ids() == std::vector<std::int32_t>{0, 2, 3});

  const auto two =
      continue_until(m, start, StopCondition::sentences(2), &detok);
  CHECK(two.finished);
  CHECK(two.sentences == 2);
  CHECK(two.seq.ids() == std::vector<std::int32_t>{0, 2, 3, 4, 5});

  // Boundaries already credited shorten the requested stop.
  const auto pre =
      continue_until(m, start, StopCondition::sentences(2), &detok,
                     kMaxGenerationCap, 1);
  CHECK(pre.seq == one.seq);

  CHECK_THROWS_AS(
      (void)continue_until(m, start, StopCondition::sentence(), nullptr),
      InvalidArgument);
}

TEST_CASE("digit-adjacent periods defer the sentence stop") {
  const Token eos{1};
  auto m = chain_model({2, 3}, 6, eos);
  m.set_pieces({"Q", "", "z = 4.", " Next.", "", ""});
  const Detokenizer detok = m.detokenizer();

  // "z = 4." cannot confirm until the following piece supplies whitespace;
  // that piece then confirms its own boundary too.
  const auto r =
      continue_until(m, TokenSequence::from_ids(std::vector<std::int32_t>{0}),
                     StopCondition::sentence(), &detok);
  CHECK(r.finished);
  CHECK(r.seq.ids() == std::vector<std::int32_t>{0, 2, 3});
  CHECK(r.sentences == 2);
}

TEST_CASE("stop condition strings round trip") {
  for (const auto* s : {"eos", "sentence", "sentences:3"})
    CHECK(stop_to_string(stop_from_string(s)) == s);
  CHECK(stop_from_string("sentences:1").n == 1);
  CHECK_THROWS_AS(stop_from_string("whenever"), InvalidArgument);
  CHECK_THROWS_AS(stop_from_string("sentences:0"), InvalidArgument);
}

TEST_CASE("zero temperature sampling is exact greedy") {
  TableModel m(ModelProfile{"m", 0.1, 5, 1, 2.0}, 1, Token{1});
  m.set_row(std::array<std::int32_t, 1>{0}, row_peak(5, 1, 3, -1.0, 2.0));
  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  Rng rng(1);
  const auto greedy = next_step(m, s);
  const auto sampled = sample_step(m, s, 0.0, 1.0, rng);
  CHECK(sampled.token == greedy.token);
  CHECK(sampled.logits == greedy.logits);
  CHECK(sampled.hidden == greedy.hidden);
}

TEST_CASE("sampling frequencies match the softmax within 0.02") {
  TableModel m(ModelProfile{"m", 0.1, 4, 1, 2.0}, 1, Token{0});
  TableModel::Row r;
  r.logits = {0.7, 0.7, 0.7, 0.7};  // uniform over the whole vocabulary
  r.hidden = {0.0};
  m.set_row(std::array<std::int32_t, 1>{2}, r);

  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{2});
  Rng rng(2024);
  std::array<int, 4> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ++counts[static_cast<std::size_t>(sample_step(m, s, 1.0, 1.0, rng).token.id)];
  for (int c : counts)
    CHECK(std::abs(static_cast<double>(c) / n - 0.25) < 0.02);
}

TEST_CASE("nucleus truncation keeps the smallest sufficient prefix") {
  TableModel m(ModelProfile{"m", 0.1, 3, 1, 2.0}, 1, Token{0});
  TableModel::Row r;
  // Softmax at temperature 1 recovers exactly [0.6, 0.3, 0.1].
  r.logits = {std::log(0.6), std::log(0.3), std::log(0.1)};
  r.hidden = {0.0};
  m.set_row(std::array<std::int32_t, 1>{1}, r);

  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{1});
  Rng rng(7);
  for (int i = 0; i < 500; ++i)
    CHECK(sample_step(m, s, 1.0, 0.5, rng).token == Token{0});

  // top_p = 0.9 admits exactly {0, 1}.
  Rng rng2(8);
  bool saw1 = false;
  for (int i = 0; i < 500; ++i) {
    const auto t = sample_step(m, s, 1.0, 0.9, rng2).token;
    CHECK(t != Token{2});
    saw1 |= t == Token{1};
  }
  CHECK(saw1);
}

TEST_CASE("sampling is reproducible under a fixed seed") {
  TableModel m(ModelProfile{"m", 0.1, 6, 1, 2.0}, 1, Token{0});
  TableModel::Row r;
  r.logits = {0.1, 0.5, 0.9, 0.2, 0.4, 0.3};
  r.hidden = {0.0};
  m.set_row(std::array<std::int32_t, 1>{3}, r);
  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{3});

  Rng a(77), b(77);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_step(m, s, 0.8, 0.95, a).token ==
          sample_step(m, s, 0.8, 0.95, b).token);
}

TEST_CASE("sampling parameter validation") {
  TableModel m(ModelProfile{"m", 0.1, 3, 1, 2.0}, 1, Token{0});
  m.set_default_row(row_peak(3, 1, 1));
  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  Rng rng(1);
  CHECK_THROWS_AS((void)sample_step(m, s, -1.0, 1.0, rng), InvalidArgument);
  CHECK_THROWS_AS((void)sample_step(m, s, 1.0, 0.0, rng), InvalidArgument);
  CHECK_THROWS_AS((void)sample_step(m, s, 1.0, 1.5, rng), InvalidArgument);
}

TEST_CASE("prefill diff on identical models is empty") {
  const Token eos{1};
  auto m = chain_model({4, 6, 2}, 8, eos);
  auto response =
      continue_until(m, TokenSequence::from_ids(std::vector<std::int32_t>{0}),
                     StopCondition::eos())
          .seq;
  CHECK(prefill_diff(m, response).empty());
}

TEST_CASE("prefill diff flags exactly the engineered disagreements") {
  const Token eos{1};
  const int vocab = 12;
  // SLM: after token t, always predict f(t).
  const auto f = [](std::int32_t t) {
    return static_cast<std::int32_t>(2 + (t * 7 + 3) % 10);
  };
  TableModel slm(ModelProfile{"slm", 0.1, vocab, 1, 2.0}, 1, eos);
  for (std::int32_t t = 0; t < vocab; ++t)
    slm.set_row(std::array<std::int32_t, 1>{t}, row_peak(vocab, 1, f(t)));

  // Response: follows f with probability 0.9, else a deliberate mismatch.
  Rng rng(314);
  TokenSequence response = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  std::vector<std::size_t> planted;
  std::vector<std::int32_t> planted_slm, planted_llm;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const std::int32_t agree = f(response.back().id);
    std::int32_t tok = agree;
    if (rng.uniform() < 0.1) {
      tok = static_cast<std::int32_t>(2 + rng.uniform_int(0, 9));
      if (tok == agree) tok = 2 + (tok - 2 + 1) % 10;
      planted.push_back(response.size());
      planted_slm.push_back(agree);
      planted_llm.push_back(tok);
    }
    response.append(Token{tok});
  }

  const auto diffs = prefill_diff(slm, response);
  REQUIRE(diffs.size() == planted.size());
  for (std::size_t j = 0; j < diffs.size(); ++j) {
    CHECK(diffs[j].position == planted[j]);
    CHECK(diffs[j].slm_token.id == planted_slm[j]);
    CHECK(diffs[j].llm_token.id == planted_llm[j]);
  }
  // Positions strictly increasing and within the generated range.
  for (std::size_t j = 1; j < diffs.size(); ++j)
    CHECK(diffs[j - 1].position < diffs[j].position);
  if (!diffs.empty()) {
    CHECK(diffs.front().position >= response.prompt_len());
    CHECK(diffs.back().position < response.size());
  }
  // The construction itself lands within 3 sigma of binomial(1000, 0.1).
  const double sigma = std::sqrt(n * 0.1 * 0.9);
  CHECK(std::abs(static_cast<double>(diffs.size()) - 100.0) <= 3.0 * sigma);
}

TEST_CASE("prefill outputs replay every generated position") {
  const Token eos{1};
  auto m = chain_model({3, 5, 7}, 10, eos);
  auto response =
      continue_until(m, TokenSequence::from_ids(std::vector<std::int32_t>{0}),
                     StopCondition::eos())
          .seq;
  const auto outs = prefill_outputs(m, response);
  REQUIRE(outs.size() == response.generated());
  for (std::size_t j = 0; j < outs.size(); ++j) {
    const auto direct = next_step(m, response.prefix(response.prompt_len() + j));
    CHECK(outs[j].token == direct.token);
    CHECK(outs[j].logits == direct.logits);
  }
}

TEST_CASE("step is deterministic") {
  const Token eos{1};
  auto m = chain_model({2, 9, 4}, 12, eos);
  auto s = TokenSequence::from_ids(std::vector<std::int32_t>{0});
  const auto a = next_step(m, s);
  const auto b = next_step(m, s);
  CHECK(a.token == b.token);
  CHECK(a.logits == b.logits);
  CHECK(a.hidden == b.hidden);
}
