#pragma once

// Keyword-based reflection labeling and per-trace reflection metrics.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/hash.hpp"

namespace reflctrl {

enum class MatchScope { whole_step, prefix_n_chars };

struct KeywordConfig {
  std::vector<std::string> keywords;
  bool case_sensitive = false;
  MatchScope match_scope = MatchScope::whole_step;
  std::size_t prefix_chars = 0;  // used when match_scope == prefix_n_chars

  void validate(std::string_view delimiter = "\n\n") const {
    if (keywords.empty()) throw ConfigError("keyword list is empty");
    for (const auto& k : keywords) {
      if (k.empty()) throw ConfigError("empty keyword in keyword list");
      if (!delimiter.empty() && k.find(delimiter) != std::string::npos) {
        throw ConfigError("keyword contains the step delimiter: '" + k + "'");
      }
    }
  }

  nlohmann::json to_json() const {
    return {{"keywords", keywords},
            {"case_sensitive", case_sensitive},
            {"match_scope", match_scope == MatchScope::whole_step ? "whole_step" : "prefix_n_chars"},
            {"prefix_chars", prefix_chars}};
  }

  std::string hash() const { return canonical_json_hash(to_json()); }

  // "wait" and "let me think" plus common reflection cues. This is an
  // approximation; data/keywords/default.txt holds the same list.
  static KeywordConfig defaults() {
    KeywordConfig c;
    c.keywords = {"wait",          "let me think",      "let me check",      "let me verify",
                  "double-check",  "double check",      "hmm",               "on second thought",
                  "hold on",       "let me reconsider", "let me re-examine", "alternatively"};
    return c;
  }
};

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// One keyword per line; '#' starts a comment; surrounding whitespace trimmed.
inline std::vector<std::string> parse_keyword_list(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(first, last - first + 1));
  }
  return out;
}

inline KeywordConfig load_keyword_file(const std::filesystem::path& path, bool case_sensitive = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open keyword file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  KeywordConfig c;
  c.keywords = parse_keyword_list(ss.str());
  c.case_sensitive = case_sensitive;
  c.validate();
  return c;
}

// First keyword (in list order) found within the configured scope of text.
inline std::optional<std::string> match_reflection_keyword(std::string_view step_text, const KeywordConfig& config) {
  std::string_view scope = step_text;
  if (config.match_scope == MatchScope::prefix_n_chars) scope = scope.substr(0, config.prefix_chars);
  const std::string haystack = config.case_sensitive ? std::string(scope) : ascii_lower(scope);
  for (const auto& kw : config.keywords) {
    const std::string needle = config.case_sensitive ? kw : ascii_lower(kw);
    if (haystack.find(needle) != std::string::npos) return kw;
  }
  return std::nullopt;
}

struct LabelingResult {
  std::vector<Step> steps;
  LabeledStepSet labels;
};

inline LabelingResult label_reflections(std::string_view trace_id, std::string_view thinking_text,
                                        const std::vector<Step>& steps, const KeywordConfig& config,
                                        bool include_in_step_set = true) {
  config.validate();
  LabelingResult out;
  out.labels.keyword_config_hash = config.hash();
  out.steps = steps;
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    Step& s = out.steps[i];
    if (s.char_span.start < 0 || s.char_span.end > static_cast<std::int64_t>(thinking_text.size())) {
      throw ValidationError("steps[" + std::to_string(i) + "].char_span", "outside thinking_text");
    }
    auto text = thinking_text.substr(static_cast<std::size_t>(s.char_span.start),
                                     static_cast<std::size_t>(s.char_span.length()));
    s.matched_keyword = match_reflection_keyword(text, config);
    s.is_reflection = s.matched_keyword.has_value();
    s.is_final_step = (i + 1 == out.steps.size());
    if (!include_in_step_set || s.is_final_step) continue;
    StepRef ref{std::string(trace_id), s.step_index};
    (*s.is_reflection ? out.labels.reflection_steps : out.labels.non_reflection_steps).insert(std::move(ref));
  }
  return out;
}

// Labels the trace's steps in place and returns its contribution to R / NR.
// Truncated traces are annotated but contribute nothing to the step set.
inline LabeledStepSet label_trace(ReasoningTrace& trace, const KeywordConfig& config) {
  auto r = label_reflections(trace.trace_id, trace.thinking_text, trace.steps, config, !trace.truncated());
  trace.steps = std::move(r.steps);
  return std::move(r.labels);
}

inline LabeledStepSet label_corpus(std::vector<ReasoningTrace>& traces, const KeywordConfig& config) {
  LabeledStepSet all;
  all.keyword_config_hash = config.hash();
  for (auto& t : traces) all.merge(label_trace(t, config));
  return all;
}

inline std::size_t count_reflection_steps(const ReasoningTrace& trace) {
  return static_cast<std::size_t>(std::count_if(trace.steps.begin(), trace.steps.end(),
                                                [](const Step& s) { return s.is_reflection.value_or(false); }));
}

inline double reflection_rate(const ReasoningTrace& trace) {
  if (trace.steps.empty()) throw UndefinedMetricError("reflection rate undefined for trace with zero steps: " + trace.trace_id);
  return static_cast<double>(count_reflection_steps(trace)) / static_cast<double>(trace.steps.size());
}

inline double reflection_token_share(const ReasoningTrace& trace) {
  if (trace.n_thinking_tokens <= 0) {
    throw UndefinedMetricError("reflection token share undefined with zero thinking tokens: " + trace.trace_id);
  }
  std::int64_t tokens = 0;
  for (const auto& s : trace.steps) {
    if (s.is_reflection.value_or(false)) tokens += s.token_span.length();
  }
  return static_cast<double>(tokens) / static_cast<double>(trace.n_thinking_tokens);
}

inline nlohmann::json labeled_step_set_to_json(const LabeledStepSet& s) {
  auto refs = [](const std::set<StepRef>& set) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : set) a.push_back({r.trace_id, r.step_index});
    return a;
  };
  return {{"keyword_config_hash", s.keyword_config_hash},
          {"reflection_steps", refs(s.reflection_steps)},
          {"non_reflection_steps", refs(s.non_reflection_steps)}};
}

inline LabeledStepSet labeled_step_set_from_json(const nlohmann::json& j) {
  LabeledStepSet s;
  s.keyword_config_hash = j.at("keyword_config_hash").get<std::string>();
  for (const auto& r : j.at("reflection_steps")) s.reflection_steps.insert({r[0].get<std::string>(), r[1].get<int>()});
  for (const auto& r : j.at("non_reflection_steps")) {
    s.non_reflection_steps.insert({r[0].get<std::string>(), r[1].get<int>()});
  }
  return s;
}

}  // namespace reflctrl
