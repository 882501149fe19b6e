#include "duet/text.hpp"

#include <array>
#include <cctype>

namespace duet::text {

namespace {

bool is_ws(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r';
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

bool is_word_char(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) != 0 || c == '.';
}

}  // namespace

bool is_abbreviation(std::string_view word) {
  static const std::array<std::string_view, 16> kAbbrev = {
      "e.g", "i.e", "etc",  "vs", "cf", "al",     "fig",  "eq",
      "dr",  "mr",  "mrs",  "ms", "st", "prof",   "no",   "approx"};
  std::string lower;
  lower.reserve(word.size());
  for (char c : word)
    lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  for (auto a : kAbbrev)
    if (lower == a) return true;
  return false;
}

void SentenceCounter::seed(std::string_view prefix) {
  text_.append(prefix);
  scan(false);
}

int SentenceCounter::feed(std::string_view piece) {
  text_.append(piece);
  return scan(true);
}

int SentenceCounter::scan(bool counting) {
  int confirmed = 0;
  while (pos_ < text_.size()) {
    const char c = text_[pos_];
    if (c == '!' || c == '?' || c == '\n') {
      if (content_seen_) {
        if (counting) ++count_;
        ++confirmed;
        content_seen_ = false;
        sentence_start_ = pos_ + 1;
      }
      ++pos_;
      continue;
    }
    if (c == '.') {
      const bool next_exists = pos_ + 1 < text_.size();
      const bool prev_dot = pos_ > 0 && text_[pos_ - 1] == '.';
      const bool next_dot = next_exists && text_[pos_ + 1] == '.';
      if (prev_dot || next_dot) {  // ellipsis; never a boundary
        content_seen_ = true;
        ++pos_;
        continue;
      }
      const bool prev_digit = pos_ > 0 && is_digit(text_[pos_ - 1]);
      if (prev_digit && next_exists && is_digit(text_[pos_ + 1])) {
        content_seen_ = true;  // decimal point
        ++pos_;
        continue;
      }
      if (prev_digit && !next_exists) break;  // wait for confirmation
      // Abbreviation check: word immediately before the period.
      std::size_t w = pos_;
      while (w > 0 && is_word_char(text_[w - 1])) --w;
      if (w < pos_ && is_abbreviation({text_.data() + w, pos_ - w})) {
        content_seen_ = true;
        ++pos_;
        continue;
      }
      const bool confirmed_here =
          prev_digit ? (next_exists && is_ws(text_[pos_ + 1]))
                     : (!next_exists || is_ws(text_[pos_ + 1]));
      if (confirmed_here) {
        if (content_seen_) {
          if (counting) ++count_;
          ++confirmed;
          content_seen_ = false;
          sentence_start_ = pos_ + 1;
        }
      } else {
        content_seen_ = true;  // "example.com" style mid-word period
      }
      ++pos_;
      continue;
    }
    if (!is_ws(c)) content_seen_ = true;
    ++pos_;
  }
  return confirmed;
}

std::size_t current_sentence_start(std::string_view text) {
  SentenceCounter c;
  c.seed(text);
  return c.current_sentence_start();
}

}  // namespace duet::text
