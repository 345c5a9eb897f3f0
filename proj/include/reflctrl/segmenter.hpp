#pragma once

#include <concepts>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"

namespace reflctrl {

struct SegmentationConfig {
  std::string delimiter = "\n\n";
  bool drop_empty_segments = true;

  void validate() const {
    if (delimiter.empty()) throw ConfigError("segmentation.delimiter must be non-empty");
  }
  friend bool operator==(const SegmentationConfig&, const SegmentationConfig&) = default;
};

inline nlohmann::json to_json(const SegmentationConfig& c) {
  return {{"delimiter", c.delimiter}, {"drop_empty_segments", c.drop_empty_segments}};
}

inline SegmentationConfig segmentation_from_json(const nlohmann::json& j) {
  SegmentationConfig c;
  c.delimiter = j.value("delimiter", c.delimiter);
  c.drop_empty_segments = j.value("drop_empty_segments", c.drop_empty_segments);
  c.validate();
  return c;
}

struct Segment {
  Span char_span;
  std::string text;
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Splits on every non-overlapping occurrence of the delimiter, left to right.
inline std::vector<Segment> segment_text(std::string_view text, const SegmentationConfig& config = {}) {
  config.validate();
  std::vector<Segment> out;
  if (text.empty()) return out;
  const std::string_view delim = config.delimiter;
  std::size_t begin = 0;
  while (true) {
    const std::size_t hit = text.find(delim, begin);
    const std::size_t end = hit == std::string_view::npos ? text.size() : hit;
    if (end > begin || !config.drop_empty_segments) {
      out.push_back({Span{static_cast<std::int64_t>(begin), static_cast<std::int64_t>(end)},
                     std::string(text.substr(begin, end - begin))});
    }
    if (hit == std::string_view::npos) break;
    begin = hit + delim.size();
  }
  return out;
}

// Substring containment: tokenizers merge punctuation with newlines (".\n\n").
inline bool is_step_delimiter_token(std::string_view token_text, const SegmentationConfig& config = {}) {
  return !config.delimiter.empty() && token_text.find(config.delimiter) != std::string_view::npos;
}

template <class F>
concept TokenTextFn = std::invocable<const F&, TokenId> &&
                      std::convertible_to<std::invoke_result_t<const F&, TokenId>, std::string_view>;

// Assigns token spans to segments of trace.thinking_text by incrementally
// decoding the thinking tokens; text is never re-encoded.
//
// Step k > 0 starts at the first token that begins inside its segment, so a
// token carrying the delimiter always closes the preceding step. Step 0 starts
// at the first thinking token and the last step runs to the end of the
// thinking span, so the spans partition the thinking region.
template <TokenTextFn Decode>
std::vector<Step> align_steps_to_tokens(const ReasoningTrace& trace, const std::vector<Segment>& segments,
                                        const Decode& token_text) {
  const Span think = trace.thinking_token_span;
  if (think.start < 0 || think.end > static_cast<std::int64_t>(trace.token_ids.size()) || think.start > think.end) {
    throw AlignmentError(0, "thinking_token_span is outside token_ids");
  }

  // Char offset where each thinking token starts; offsets[n] is the end.
  std::vector<std::int64_t> offsets;
  offsets.reserve(static_cast<std::size_t>(think.length()) + 1);
  std::int64_t off = 0;
  const std::string_view text = trace.thinking_text;
  for (std::int64_t i = think.start; i < think.end; ++i) {
    offsets.push_back(off);
    std::string_view piece = token_text(trace.token_ids[static_cast<std::size_t>(i)]);
    if (static_cast<std::size_t>(off) + piece.size() > text.size() ||
        text.substr(static_cast<std::size_t>(off), piece.size()) != piece) {
      // Report the first byte that disagrees.
      std::int64_t bad = off;
      while (static_cast<std::size_t>(bad - off) < piece.size() && static_cast<std::size_t>(bad) < text.size() &&
             text[static_cast<std::size_t>(bad)] == piece[static_cast<std::size_t>(bad - off)]) {
        ++bad;
      }
      throw AlignmentError(bad, "decoded token " + std::to_string(i) + " does not match thinking_text");
    }
    off += static_cast<std::int64_t>(piece.size());
  }
  offsets.push_back(off);
  if (off != static_cast<std::int64_t>(text.size())) {
    throw AlignmentError(off, "decoded thinking tokens end before thinking_text does");
  }

  std::vector<Step> steps;
  std::size_t tok = 0;  // relative to think.start
  const std::size_t n_tok = static_cast<std::size_t>(think.length());
  for (const Segment& seg : segments) {
    if (seg.char_span.empty()) continue;
    std::int64_t first;
    if (steps.empty()) {
      if (n_tok == 0) throw AlignmentError(seg.char_span.start, "no thinking tokens for first step");
      first = think.start;
      // Skip leading tokens that end before the segment only for locating tok;
      // the span itself still starts at the thinking start.
      while (tok < n_tok && offsets[tok + 1] <= seg.char_span.start) ++tok;
    } else {
      while (tok < n_tok && offsets[tok] < seg.char_span.start) ++tok;
      if (tok >= n_tok || offsets[tok] >= seg.char_span.end) {
        throw AlignmentError(seg.char_span.start, "no token begins inside this step");
      }
      first = think.start + static_cast<std::int64_t>(tok);
    }
    Step s;
    s.step_index = static_cast<int>(steps.size());
    s.char_span = seg.char_span;
    s.token_span = Span{first, think.end};
    s.first_token_index = first;
    if (!steps.empty()) steps.back().token_span.end = first;
    steps.push_back(std::move(s));
  }
  if (!steps.empty()) steps.back().is_final_step = true;
  return steps;
}

}  // namespace reflctrl
