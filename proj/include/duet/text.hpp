#pragma once

#include <string>
#include <string_view>

namespace duet::text {

// Incremental sentence-boundary detector.
//
// Rule: a sentence ends at '.', '!', '?' or a line break, with the
// qualifications below. Pieces are fed in generation order; a boundary is
// counted the moment it is *confirmed*, which keeps counting monotone.
//
//  - '!' , '?' , '\n' confirm immediately (some non-whitespace must have
//    appeared since the previous boundary, so "!!" is one boundary).
//  - '.' directly between digits is a decimal point, never a boundary.
//  - '.' preceded by a digit is confirmed only once a whitespace character
//    follows ("x = 4." waits for the following space; "3.14" never fires).
//  - '.' preceded by a non-digit confirms at end of text or before
//    whitespace ("x ." fires as soon as the period arrives).
//  - '.' that is part of an ellipsis ("...") or closes a known abbreviation
//    ("e.g.", "Dr.", "etc.") is not a boundary.
class SentenceCounter {
 public:
  SentenceCounter() = default;

  // Absorb already-existing text: establishes scanner state (including a
  // pending unconfirmed period) without counting its boundaries.
  void seed(std::string_view prefix);

  // Append a piece; returns the number of boundaries confirmed by it.
  int feed(std::string_view piece);

  int count() const { return count_; }
  const std::string& text() const { return text_; }

  // Index just past the most recently confirmed boundary character; the
  // current (incomplete) sentence starts here. Zero if none seen yet.
  std::size_t current_sentence_start() const { return sentence_start_; }

 private:
  int scan(bool counting);

  std::string text_;
  std::size_t pos_ = 0;  // next index to examine
  std::size_t sentence_start_ = 0;
  bool content_seen_ = false;  // non-whitespace since last boundary
  int count_ = 0;
};

// True iff `word` (lowercased, no trailing period) is a known abbreviation.
bool is_abbreviation(std::string_view word);

// Start index of the (possibly incomplete) final sentence of `text`.
std::size_t current_sentence_start(std::string_view text);

}  // namespace duet::text
