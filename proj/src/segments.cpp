#include "duet/segments.hpp"

#include <algorithm>
#include <cctype>

namespace duet::engine {

namespace {

bool word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0;
}

// Token index owning each character of the concatenated generated text.
struct TextMap {
  std::string text;
  std::vector<std::size_t> owner;  // text.size() entries
};

TextMap build_text(const GenerationTrace& trace, const Detokenizer& detok) {
  TextMap tm;
  for (std::size_t i = 0; i < trace.decisions.size(); ++i) {
    const std::string& piece =
        detok.piece(trace.output[trace.decisions[i].position]);
    tm.text += piece;
    tm.owner.insert(tm.owner.end(), piece.size(), i);
  }
  return tm;
}

}  // namespace

SegmentedTrace segment_trace(const GenerationTrace& trace,
                             const Detokenizer& detok,
                             const ThoughtMarkers& markers) {
  SegmentedTrace seg;
  const std::size_t n = trace.decisions.size();
  if (n == 0) return seg;

  const TextMap tm = build_text(trace, detok);

  std::size_t think_tokens = n;
  if (!markers.think_end.empty()) {
    const auto at = tm.text.find(markers.think_end);
    if (at != std::string::npos) {
      seg.has_think_end = true;
      // The thinking phase closes with the token holding the delimiter's
      // final character.
      think_tokens = tm.owner[at + markers.think_end.size() - 1] + 1;
    }
  }
  seg.thinking = {0, think_tokens};
  seg.reply = {think_tokens, n};

  // Thought starts: position 0 plus every boundary-word occurrence inside
  // the thinking text.
  std::vector<std::size_t> starts{0};
  const std::size_t think_chars =
      seg.has_think_end
          ? static_cast<std::size_t>(
                std::find(tm.owner.begin(), tm.owner.end(), think_tokens) -
                tm.owner.begin())
          : tm.text.size();
  for (const std::string& word : markers.boundaries) {
    if (word.empty()) continue;
    std::size_t from = 0;
    while (true) {
      const auto at = tm.text.find(word, from);
      if (at == std::string::npos || at >= think_chars) break;
      const bool boundary_before = at == 0 || !word_char(tm.text[at - 1]);
      const std::size_t after = at + word.size();
      const bool boundary_after =
          after >= tm.text.size() || !word_char(tm.text[after]);
      if (boundary_before && boundary_after) {
        const std::size_t tok = tm.owner[at];
        if (tok > 0 && tok < think_tokens) starts.push_back(tok);
      }
      from = at + 1;
    }
  }
  std::sort(starts.begin(), starts.end());
  starts.erase(std::unique(starts.begin(), starts.end()), starts.end());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t end =
        i + 1 < starts.size() ? starts[i + 1] : think_tokens;
    seg.thoughts.push_back({starts[i], end});
  }
  return seg;
}

namespace {

void accumulate(const GenerationTrace& trace, SegmentSpan span, int bins,
                std::vector<std::size_t>& llm, std::vector<std::size_t>& all) {
  const std::size_t len = span.length();
  if (len == 0) return;
  for (std::size_t j = span.begin; j < span.end; ++j) {
    const double center =
        (static_cast<double>(j - span.begin) + 0.5) / static_cast<double>(len);
    auto bin = static_cast<std::size_t>(center * bins);
    if (bin >= static_cast<std::size_t>(bins))
      bin = static_cast<std::size_t>(bins) - 1;
    ++all[bin];
    if (trace.decisions[j].routed_to == Route::LLM) ++llm[bin];
  }
}

std::vector<double> ratios(const std::vector<std::size_t>& llm,
                           const std::vector<std::size_t>& all) {
  std::vector<double> out(all.size(), 0.0);
  for (std::size_t b = 0; b < all.size(); ++b)
    if (all[b] > 0)
      out[b] = static_cast<double>(llm[b]) / static_cast<double>(all[b]);
  return out;
}

}  // namespace

std::vector<double> usage_histogram(const GenerationTrace& trace,
                                    SegmentSpan span, int bins) {
  if (bins < 1) throw InvalidArgument("usage_histogram: bins must be >= 1");
  if (span.end > trace.decisions.size() || span.begin > span.end)
    throw InvalidArgument("usage_histogram: span out of range");
  std::vector<std::size_t> llm(static_cast<std::size_t>(bins), 0);
  std::vector<std::size_t> all(static_cast<std::size_t>(bins), 0);
  accumulate(trace, span, bins, llm, all);
  return ratios(llm, all);
}

std::vector<double> usage_histogram_pooled(
    const GenerationTrace& trace, const std::vector<SegmentSpan>& spans,
    int bins) {
  if (bins < 1) throw InvalidArgument("usage_histogram: bins must be >= 1");
  std::vector<std::size_t> llm(static_cast<std::size_t>(bins), 0);
  std::vector<std::size_t> all(static_cast<std::size_t>(bins), 0);
  for (const auto& span : spans) {
    if (span.end > trace.decisions.size() || span.begin > span.end)
      throw InvalidArgument("usage_histogram: span out of range");
    accumulate(trace, span, bins, llm, all);
  }
  return ratios(llm, all);
}

}  // namespace duet::engine
