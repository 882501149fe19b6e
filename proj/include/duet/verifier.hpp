#pragma once

#include <string>
#include <string_view>

#include "duet/remote_model.hpp"
#include "duet/tokens.hpp"

namespace duet::verify {

struct Verdict {
  bool divergent = false;
  std::string reasoning;
};

// Inputs for one judgment: the shared context plus the two candidate
// sentences, each carrying exactly one <<...>> divergence marker.
struct Request {
  std::string common_context;
  std::string sentence_a;
  std::string sentence_b;
};

// Substitute the request into the fixed prompt template. Throws
// MissingMarker if a sentence lacks its divergence marker.
std::string render_prompt(const Request& req);

// Parse a verifier answer. Accepted grammar: optional "Answer"/"Output"
// prefixes (with surrounding :,(,),-,* punctuation), a standalone 0 or 1,
// then optional reasoning (a leading "Reasoning:" label is stripped).
// Anything else throws UnparseableResponse.
Verdict parse_response(std::string_view response);

// Token-level verification used by the labeling pipeline. The two sequences
// share every position before `diverge_pos`.
class SequenceVerifier {
 public:
  virtual ~SequenceVerifier() = default;
  virtual Verdict verify(const TokenSequence& s_after_slm,
                         const TokenSequence& s_after_llm,
                         std::size_t diverge_pos) const = 0;
};

// Plain-text completion backend behind the LLM verifier.
class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string complete(const std::string& prompt) = 0;
};

// Render + complete + parse, retrying transport failures up to
// `max_retries` additional attempts. Parse failures are not retried.
Verdict verify_llm(TextBackend& backend, const Request& req,
                   int max_retries = 2);

// Build a Request from a continuation pair: the common context is the text
// before the sentence containing the divergence; the marker wraps each
// sentence from the first differing character to the end of that word.
Request make_request(const Detokenizer& detok, const TokenSequence& s_a,
                     const TokenSequence& s_b, std::size_t diverge_pos);

class LlmVerifier : public SequenceVerifier {
 public:
  LlmVerifier(TextBackend& backend, Detokenizer detok, int max_retries = 2)
      : backend_(backend), detok_(std::move(detok)), retries_(max_retries) {}

  Verdict verify(const TokenSequence& s_a, const TokenSequence& s_b,
                 std::size_t diverge_pos) const override {
    return verify_llm(backend_, make_request(detok_, s_a, s_b, diverge_pos),
                      retries_);
  }

 private:
  TextBackend& backend_;
  Detokenizer detok_;
  int retries_;
};

// HTTP adapter for remote judge models.
class HttpTextBackend : public TextBackend {
 public:
  explicit HttpTextBackend(RemoteConfig cfg, int max_tokens = 256,
                           double temperature = 0.0)
      : cfg_(std::move(cfg)), max_tokens_(max_tokens), temp_(temperature) {}

  std::string complete(const std::string& prompt) override {
    return remote_complete_text(cfg_, prompt, max_tokens_, temp_);
  }

 private:
  RemoteConfig cfg_;
  int max_tokens_;
  double temp_;
};

}  // namespace duet::verify
