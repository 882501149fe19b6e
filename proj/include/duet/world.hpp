#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duet/table_model.hpp"
#include "duet/verifier.hpp"

namespace duet::world {

// Randomized small/large model pairs with exactly computable ground truth.
//
// The vocabulary is banded into `stages` groups of `symbols` tokens plus a
// prompt token, per-query topic tokens, and EOS. Every transition moves to
// the next stage band, so all generations terminate within stages+1 tokens.
// Transition choices depend only on the *class-mapped* trailing context
// (synonym tokens share a class), which makes re-convergence absorbing and
// ground-truth divergence brute-forceable.
struct WorldConfig {
  std::uint64_t seed = 0;
  int stages = 8;
  int symbols = 4;
  int n_queries = 8;
  int hidden_dim = 4;
  int embed_dim = 4;
  double p_diff = 0.2;      // chance the SLM deviates at a context
  double p_synonym = 0.25;  // chance a stage carries a same-class token pair
  int sentence_every = 3;   // a '.' piece every this many stages
  bool delta_logits = false;  // near-one-hot rows: sampling == greedy
  double slm_params_b = 1.5;
  double llm_params_b = 32.0;

  int order() const { return 2; }
  int vocab() const { return 2 + stages * symbols + n_queries; }
};

struct World {
  WorldConfig cfg;
  std::shared_ptr<TableModel> slm;
  std::shared_ptr<TableModel> llm;
  Detokenizer detok;
  std::vector<std::int32_t> token_class;  // id -> class representative id
  std::vector<duet::Query> queries;

  Token eos() const { return llm->eos(); }
  std::int32_t cls(Token t) const {
    if (t.id < 0 || static_cast<std::size_t>(t.id) >= token_class.size())
      throw UnknownSequencePair("token outside world vocabulary: " +
                                std::to_string(t.id));
    return token_class[static_cast<std::size_t>(t.id)];
  }
};

World make_world(const WorldConfig& cfg);

// Final answer token (the one preceding EOS), if the sequence finished.
std::optional<Token> final_answer(const World& w, const TokenSequence& s);

// Full-sequence quality equivalence: both finished with answer tokens of the
// same class, or bitwise-equal sequences.
bool equivalent_answers(const World& w, const TokenSequence& a,
                        const TokenSequence& b);

// Ground-truth verdicts, deterministic, with no model calls:
//  - both sequences finished: neutral iff final answer classes match;
//  - one finished, one not: divergent;
//  - two fragments: neutral iff the class-mapped trailing contexts match
//    (the paths have re-converged and share all future transitions).
class WorldOracle : public verify::SequenceVerifier {
 public:
  explicit WorldOracle(const World& w) : w_(w) {}
  verify::Verdict verify(const TokenSequence& s_a, const TokenSequence& s_b,
                         std::size_t diverge_pos) const override;

 private:
  const World& w_;
};

}  // namespace duet::world
