#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "duet/errors.hpp"
#include "duet/hash.hpp"

namespace duet {

struct Token {
  std::int32_t id = 0;
  friend bool operator==(Token a, Token b) { return a.id == b.id; }
  friend bool operator!=(Token a, Token b) { return a.id != b.id; }
  friend bool operator<(Token a, Token b) { return a.id < b.id; }
};

// A prompt plus generated tokens. Append-only: positions never change once
// written, which keeps recorded step positions and context hashes stable.
class TokenSequence {
 public:
  TokenSequence() = default;
  explicit TokenSequence(std::vector<Token> prompt)
      : tokens_(std::move(prompt)), prompt_len_(tokens_.size()) {}

  static TokenSequence from_ids(std::span<const std::int32_t> ids) {
    std::vector<Token> t;
    t.reserve(ids.size());
    for (auto id : ids) t.push_back(Token{id});
    return TokenSequence(std::move(t));
  }

  void append(Token t) { tokens_.push_back(t); }

  std::size_t size() const { return tokens_.size(); }
  std::size_t prompt_len() const { return prompt_len_; }
  std::size_t generated() const { return tokens_.size() - prompt_len_; }
  bool empty() const { return tokens_.empty(); }

  Token operator[](std::size_t i) const { return tokens_[i]; }
  Token back() const { return tokens_.back(); }
  std::span<const Token> tokens() const { return tokens_; }
  std::span<const Token> generated_tokens() const {
    return std::span<const Token>(tokens_).subspan(prompt_len_);
  }

  // First n tokens as a new sequence; the prompt prefix is preserved.
  TokenSequence prefix(std::size_t n) const {
    TokenSequence s;
    s.tokens_.assign(tokens_.begin(),
                     tokens_.begin() + static_cast<std::ptrdiff_t>(n));
    s.prompt_len_ = prompt_len_ < n ? prompt_len_ : n;
    return s;
  }

  std::vector<std::int32_t> ids() const {
    std::vector<std::int32_t> out;
    out.reserve(tokens_.size());
    for (Token t : tokens_) out.push_back(t.id);
    return out;
  }

  std::uint64_t context_hash() const {
    auto v = ids();
    return hash_ids(v);
  }

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) {
    return a.prompt_len_ == b.prompt_len_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<Token> tokens_;
  std::size_t prompt_len_ = 0;
};

struct ModelProfile {
  std::string name;
  double param_count_b = 0.0;  // billions of parameters
  int vocab_size = 2;
  int hidden_dim = 1;
  double bytes_per_param = 2.0;

  void validate() const {
    if (name.empty()) throw InvalidArgument("model profile: empty name");
    if (param_count_b < 0)
      throw InvalidArgument("model profile: negative param count");
    if (vocab_size < 2) throw InvalidArgument("model profile: vocab_size < 2");
    if (hidden_dim < 1) throw InvalidArgument("model profile: hidden_dim < 1");
    if (bytes_per_param <= 0)
      throw InvalidArgument("model profile: bytes_per_param <= 0");
  }
};

// One decode step: full logits over the vocabulary, the last-layer hidden
// state, and the chosen next token.
struct StepOutput {
  std::vector<double> logits;
  std::vector<double> hidden;
  Token token;
};

// Token-id -> text pieces. Pieces carry their own leading whitespace, BPE
// style; decoding is plain concatenation.
struct Detokenizer {
  std::vector<std::string> pieces;

  const std::string& piece(Token t) const {
    if (t.id < 0 || static_cast<std::size_t>(t.id) >= pieces.size())
      throw InvalidToken("detokenizer: token id out of range: " +
                         std::to_string(t.id));
    return pieces[static_cast<std::size_t>(t.id)];
  }

  std::string decode(std::span<const Token> toks) const {
    std::string out;
    for (Token t : toks) out += piece(t);
    return out;
  }
};

// Dense per-token embeddings, row-major vocab x dim.
struct EmbeddingTable {
  int dim = 0;
  std::vector<double> data;  // vocab * dim

  int vocab() const {
    return dim == 0 ? 0 : static_cast<int>(data.size()) / dim;
  }

  std::span<const double> row(Token t) const {
    if (t.id < 0 || t.id >= vocab())
      throw InvalidToken("embedding table: token id out of range: " +
                         std::to_string(t.id));
    return std::span<const double>(data).subspan(
        static_cast<std::size_t>(t.id) * static_cast<std::size_t>(dim),
        static_cast<std::size_t>(dim));
  }

  // Deterministic pseudo-random table; rows depend only on (seed, id, dim).
  static EmbeddingTable derive(std::uint64_t seed, int vocab, int dim);
};

}  // namespace duet
