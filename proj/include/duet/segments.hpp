#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "duet/engine.hpp"
#include "duet/tokens.hpp"

namespace duet::engine {

// Text markers that structure a reasoning trace: a delimiter closing the
// thinking phase and words that open a new thought.
struct ThoughtMarkers {
  std::string think_end = "</think>";
  std::vector<std::string> boundaries = {"Wait", "Alternatively"};
};

// Half-open range of decision indices [begin, end).
struct SegmentSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  bool operator==(const SegmentSpan&) const = default;
};

struct SegmentedTrace {
  bool has_think_end = false;
  SegmentSpan thinking;  // up to and including the delimiter token
  SegmentSpan reply;     // everything after (empty without a delimiter)
  std::vector<SegmentSpan> thoughts;  // partition of the thinking span
};

// Splits a trace's generated text on the markers. Boundary words must start
// at a non-letter/digit boundary; a trace without markers yields a single
// thinking span covering everything, which is also its only thought.
SegmentedTrace segment_trace(const GenerationTrace& trace,
                             const Detokenizer& detok,
                             const ThoughtMarkers& markers = {});

// Fraction of decisions routed to the LLM per normalized-position bin within
// the span. Bins with no decisions report 0.
std::vector<double> usage_histogram(const GenerationTrace& trace,
                                    SegmentSpan span, int bins);

// Same histogram aggregated across spans: each span is normalized to [0,1]
// on its own, then counts are pooled per bin.
std::vector<double> usage_histogram_pooled(
    const GenerationTrace& trace, const std::vector<SegmentSpan>& spans,
    int bins);

}  // namespace duet::engine
