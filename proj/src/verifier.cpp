#include "duet/verifier.hpp"

#include <algorithm>
#include <cctype>

#include "duet/text.hpp"
#include "duet/verifier_prompt.hpp"

namespace duet::verify {

namespace {

void check_marker(const std::string& sentence, const char* which) {
  const auto open = sentence.find("<<");
  const auto close = sentence.find(">>");
  if (open == std::string::npos || close == std::string::npos || close < open)
    throw MissingMarker(std::string("verifier request: ") + which +
                        " lacks a <<...>> divergence marker");
  if (sentence.find("<<", open + 2) != std::string::npos ||
      sentence.find(">>", close + 2) != std::string::npos)
    throw MissingMarker(std::string("verifier request: ") + which +
                        " has more than one divergence marker");
}

void replace_slot(std::string& text, std::string_view slot,
                  const std::string& value) {
  const auto at = text.find(slot);
  if (at == std::string::npos)
    throw Error("prompt template is missing slot " + std::string(slot));
  text.replace(at, slot.size(), value);
}

bool is_ws(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r';
}

}  // namespace

std::string render_prompt(const Request& req) {
  check_marker(req.sentence_a, "sentence 1");
  check_marker(req.sentence_b, "sentence 2");
  std::string text = kPromptTemplate;
  replace_slot(text, "{CONTEXT}", req.common_context);
  replace_slot(text, "{SENTENCE1}", req.sentence_a);
  replace_slot(text, "{SENTENCE2}", req.sentence_b);
  return text;
}

Verdict parse_response(std::string_view response) {
  std::size_t i = 0;
  const auto skip_filler = [&] {
    while (i < response.size() &&
           (is_ws(response[i]) || response[i] == ':' || response[i] == '(' ||
            response[i] == ')' || response[i] == '-' || response[i] == '*' ||
            response[i] == '#'))
      ++i;
  };
  const auto match_word = [&](std::string_view word) {
    if (response.size() - i < word.size()) return false;
    for (std::size_t j = 0; j < word.size(); ++j)
      if (std::tolower(static_cast<unsigned char>(response[i + j])) != word[j])
        return false;
    const std::size_t end = i + word.size();
    if (end < response.size() &&
        std::isalnum(static_cast<unsigned char>(response[end])))
      return false;
    i = end;
    return true;
  };

  skip_filler();
  while (match_word("answer") || match_word("output")) skip_filler();

  if (i >= response.size() || (response[i] != '0' && response[i] != '1'))
    throw UnparseableResponse("verifier response has no leading 0/1 verdict: " +
                              std::string(response.substr(0, 40)));
  if (i + 1 < response.size() &&
      std::isalnum(static_cast<unsigned char>(response[i + 1])))
    throw UnparseableResponse("verifier verdict digit is not standalone");
  Verdict v;
  v.divergent = response[i] == '1';
  ++i;

  // Optional reasoning remainder; strip one "Reasoning:" label if present.
  skip_filler();
  match_word("reasoning");
  skip_filler();
  v.reasoning = std::string(response.substr(i));
  while (!v.reasoning.empty() && is_ws(v.reasoning.back()))
    v.reasoning.pop_back();
  return v;
}

Verdict verify_llm(TextBackend& backend, const Request& req, int max_retries) {
  const std::string prompt = render_prompt(req);
  for (int attempt = 0;; ++attempt) {
    try {
      return parse_response(backend.complete(prompt));
    } catch (const BackendUnavailable&) {
      if (attempt >= max_retries) throw;
    }
  }
}

namespace {

// Wrap one marker around [d, end-of-word) of `s`.
std::string with_marker(const std::string& s, std::size_t d) {
  d = std::min(d, s.size());
  std::size_t e = d;
  while (e < s.size() && !is_ws(s[e])) ++e;
  if (e == d && e < s.size()) ++e;  // whitespace divergence: wrap one char
  std::string out = s;
  out.insert(e, ">>");
  out.insert(d, "<<");
  return out;
}

}  // namespace

Request make_request(const Detokenizer& detok, const TokenSequence& s_a,
                     const TokenSequence& s_b, std::size_t diverge_pos) {
  if (diverge_pos >= s_a.size() || diverge_pos >= s_b.size())
    throw InvalidArgument("make_request: divergence position out of range");
  const std::string prefix_text =
      detok.decode(s_a.prefix(diverge_pos).tokens());
  const std::size_t s0 = text::current_sentence_start(prefix_text);

  Request req;
  req.common_context = prefix_text.substr(0, s0);
  while (!req.common_context.empty() && is_ws(req.common_context.back()))
    req.common_context.pop_back();
  std::size_t lead = 0;
  while (lead < req.common_context.size() && is_ws(req.common_context[lead]))
    ++lead;
  req.common_context.erase(0, lead);

  const std::string a = detok.decode(s_a.tokens()).substr(s0);
  const std::string b = detok.decode(s_b.tokens()).substr(s0);
  std::size_t d = 0;
  const std::size_t limit = std::min(a.size(), b.size());
  while (d < limit && a[d] == b[d]) ++d;
  req.sentence_a = with_marker(a, d);
  req.sentence_b = with_marker(b, d);
  return req;
}

}  // namespace duet::verify
