#pragma once

// Shared data model: model description, reasoning traces, steps and the
// reflection / non-reflection partition, plus line-delimited JSON trace I/O.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/errors.hpp"

namespace reflctrl {

using TokenId = std::int32_t;

// Half-open [start, end) interval over characters (UTF-8 bytes) or tokens.
struct Span {
  std::int64_t start = 0;
  std::int64_t end = 0;

  constexpr std::int64_t length() const noexcept { return end - start; }
  constexpr bool empty() const noexcept { return end <= start; }
  constexpr bool contains(std::int64_t i) const noexcept { return i >= start && i < end; }
  constexpr bool overlaps(const Span& o) const noexcept {
    return start < o.end && o.start < end && !empty() && !o.empty();
  }
  friend constexpr bool operator==(const Span&, const Span&) = default;
};

// The two block outputs of a decoder layer that are added to the residual.
enum class Site : std::uint8_t { attn = 0, mlp = 1 };

inline std::string_view to_string(Site s) { return s == Site::attn ? "attn" : "mlp"; }

inline Site site_from_string(std::string_view s) {
  if (s == "attn") return Site::attn;
  if (s == "mlp") return Site::mlp;
  throw ConfigError("unknown site '" + std::string(s) + "' (expected attn or mlp)");
}

struct ModelSpec {
  std::string model_id;
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int head_dim = 0;
  std::string end_of_think_marker = "</think>";
  std::string step_delimiter = "\n\n";

  void validate() const {
    if (model_id.empty()) throw ValidationError("model_id", "must be non-empty");
    if (n_layers <= 0) throw ValidationError("n_layers", "must be positive");
    if (d_model <= 0) throw ValidationError("d_model", "must be positive");
    if (n_heads <= 0) throw ValidationError("n_heads", "must be positive");
    if (head_dim <= 0) throw ValidationError("head_dim", "must be positive");
    if (end_of_think_marker.empty()) throw ValidationError("end_of_think_marker", "must be non-empty");
    if (step_delimiter.empty()) throw ValidationError("step_delimiter", "must be non-empty");
  }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct DecodeParams {
  double temperature = 0.6;
  double top_p = 0.95;
  int max_tokens = 8192;
  std::uint64_t seed = 0;

  bool greedy() const noexcept { return temperature <= 0.0; }
  friend bool operator==(const DecodeParams&, const DecodeParams&) = default;
};

struct Step {
  int step_index = 0;
  Span char_span;
  Span token_span;
  std::int64_t first_token_index = 0;
  std::optional<bool> is_reflection;
  std::optional<std::string> matched_keyword;
  bool is_final_step = false;

  friend bool operator==(const Step&, const Step&) = default;
};

struct ReasoningTrace {
  std::string trace_id;
  std::string question_id;
  std::string prompt_text;
  std::string thinking_text;
  std::string answer_text;
  std::vector<TokenId> token_ids;
  Span thinking_token_span;
  std::optional<std::int64_t> end_of_think_index;
  std::vector<Step> steps;
  DecodeParams decode_params;
  std::optional<bool> correct;
  std::int64_t n_thinking_tokens = 0;

  // Generation hit max_tokens before the end-of-think marker.
  bool truncated() const noexcept { return !end_of_think_index.has_value(); }

  friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

struct StepRef {
  std::string trace_id;
  int step_index = 0;
  friend auto operator<=>(const StepRef&, const StepRef&) = default;
};

// R and NR: reflection and non-reflection steps used for direction extraction.
struct LabeledStepSet {
  std::set<StepRef> reflection_steps;
  std::set<StepRef> non_reflection_steps;
  std::string keyword_config_hash;

  void merge(const LabeledStepSet& other) {
    if (!keyword_config_hash.empty() && !other.keyword_config_hash.empty() &&
        keyword_config_hash != other.keyword_config_hash) {
      throw RefusalError("cannot merge step sets labeled with different keyword configs");
    }
    if (keyword_config_hash.empty()) keyword_config_hash = other.keyword_config_hash;
    reflection_steps.insert(other.reflection_steps.begin(), other.reflection_steps.end());
    non_reflection_steps.insert(other.non_reflection_steps.begin(), other.non_reflection_steps.end());
  }
  friend bool operator==(const LabeledStepSet&, const LabeledStepSet&) = default;
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string code;
  std::string field;
  std::string message;
};

inline std::vector<Violation> validate_trace(const ReasoningTrace& t, std::string_view delimiter = "\n\n") {
  std::vector<Violation> out;
  auto add = [&](std::string code, std::string field, std::string msg) {
    out.push_back({std::move(code), std::move(field), std::move(msg)});
  };

  if (t.trace_id.empty()) add("TRACE_ID_MISSING", "trace_id", "trace_id is empty");

  const auto n_tokens = static_cast<std::int64_t>(t.token_ids.size());
  const Span think = t.thinking_token_span;
  const bool think_ok = think.start >= 0 && think.start <= think.end && think.end <= n_tokens;
  if (!think_ok) {
    add("THINKING_SPAN_INVALID", "thinking_token_span", "span is inverted or exceeds token_ids");
  }
  if (t.n_thinking_tokens != think.length()) {
    add("TOKEN_COUNT_MISMATCH", "n_thinking_tokens", "must equal thinking_token_span length");
  }
  if (t.end_of_think_index && (*t.end_of_think_index != think.end || *t.end_of_think_index >= n_tokens)) {
    add("END_OF_THINK_MISPLACED", "end_of_think_index",
        "must index the marker token immediately after the thinking span");
  }
  if (t.correct.has_value() && t.answer_text.empty()) {
    add("ANSWER_MISSING", "answer_text", "correctness is set but answer_text is empty");
  }
  const auto& dp = t.decode_params;
  if (dp.temperature < 0.0 || !(dp.top_p > 0.0 && dp.top_p <= 1.0) || dp.max_tokens <= 0) {
    add("DECODE_PARAMS_INVALID", "decode_params", "temperature >= 0, top_p in (0,1], max_tokens > 0");
  }

  const auto text_len = static_cast<std::int64_t>(t.thinking_text.size());
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const Step& s = t.steps[i];
    const std::string field = "steps[" + std::to_string(i) + "]";
    if (s.step_index != static_cast<int>(i)) {
      add("STEP_INDEX_MISMATCH", field + ".step_index", "step_index must equal its position");
    }
    if (s.char_span.start < 0 || s.char_span.start > s.char_span.end || s.char_span.end > text_len) {
      add("CHAR_SPAN_OUT_OF_RANGE", field + ".char_span", "char span outside thinking_text");
    } else {
      auto text = std::string_view(t.thinking_text)
                      .substr(static_cast<std::size_t>(s.char_span.start),
                              static_cast<std::size_t>(s.char_span.length()));
      if (!delimiter.empty() && text.find(delimiter) != std::string_view::npos) {
        add("STEP_CONTAINS_DELIMITER", field + ".char_span", "step text contains the step delimiter");
      }
    }
    if (s.token_span.empty() || (think_ok && (s.token_span.start < think.start || s.token_span.end > think.end))) {
      add("TOKEN_SPAN_OUT_OF_RANGE", field + ".token_span", "token span empty or outside the thinking span");
    }
    if (s.first_token_index != s.token_span.start) {
      add("FIRST_TOKEN_MISMATCH", field + ".first_token_index", "must equal token_span.start");
    }
    if (s.matched_keyword.has_value() != (s.is_reflection.value_or(false))) {
      add("KEYWORD_LABEL_MISMATCH", field + ".matched_keyword",
          "matched_keyword must be present iff is_reflection is true");
    }
    if (s.is_final_step && i + 1 != t.steps.size()) {
      add("FINAL_STEP_MISPLACED", field + ".is_final_step", "only the last step may be final");
    }
    if (i > 0) {
      const Step& p = t.steps[i - 1];
      if (p.token_span.overlaps(s.token_span)) {
        add("STEP_SPAN_OVERLAP", field + ".token_span", "token span overlaps the previous step");
      } else if (s.token_span.start < p.token_span.start) {
        add("STEP_SPAN_UNORDERED", field + ".token_span", "token spans are not in increasing order");
      }
      if (p.char_span.overlaps(s.char_span)) {
        add("CHAR_SPAN_OVERLAP", field + ".char_span", "char span overlaps the previous step");
      } else if (s.char_span.start < p.char_span.start) {
        add("CHAR_SPAN_UNORDERED", field + ".char_span", "char spans are not in increasing order");
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON encoding. Field names are the on-disk contract (see docs/trace_format.md).

namespace detail {

inline nlohmann::json span_to_json(const Span& s) { return nlohmann::json::array({s.start, s.end}); }

inline Span span_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer()) {
    throw ValidationError(field, "expected [start, end] integer pair");
  }
  return Span{j[0].get<std::int64_t>(), j[1].get<std::int64_t>()};
}

template <class T>
T required(const nlohmann::json& j, const char* key, const std::string& prefix = "") {
  auto it = j.find(key);
  if (it == j.end()) throw ValidationError(prefix + key, "missing field");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(prefix + key, e.what());
  }
}

template <class T>
std::optional<T> optional_field(const nlohmann::json& j, const char* key, const std::string& prefix = "") {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(prefix + key, e.what());
  }
}

template <class T>
nlohmann::json opt_to_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline nlohmann::json decode_params_to_json(const DecodeParams& p) {
  return {{"temperature", p.temperature}, {"top_p", p.top_p}, {"max_tokens", p.max_tokens}, {"seed", p.seed}};
}

inline DecodeParams decode_params_from_json(const nlohmann::json& j, const std::string& prefix = "decode_params.") {
  DecodeParams p;
  p.temperature = detail::required<double>(j, "temperature", prefix);
  p.top_p = detail::required<double>(j, "top_p", prefix);
  p.max_tokens = detail::required<int>(j, "max_tokens", prefix);
  p.seed = detail::required<std::uint64_t>(j, "seed", prefix);
  return p;
}

inline nlohmann::json step_to_json(const Step& s) {
  return {{"step_index", s.step_index},
          {"char_span", detail::span_to_json(s.char_span)},
          {"token_span", detail::span_to_json(s.token_span)},
          {"first_token_index", s.first_token_index},
          {"is_reflection", detail::opt_to_json(s.is_reflection)},
          {"matched_keyword", detail::opt_to_json(s.matched_keyword)},
          {"is_final_step", s.is_final_step}};
}

inline Step step_from_json(const nlohmann::json& j, const std::string& prefix) {
  Step s;
  s.step_index = detail::required<int>(j, "step_index", prefix);
  s.char_span = detail::span_from_json(j.at("char_span"), prefix + "char_span");
  s.token_span = detail::span_from_json(j.at("token_span"), prefix + "token_span");
  s.first_token_index = detail::required<std::int64_t>(j, "first_token_index", prefix);
  s.is_reflection = detail::optional_field<bool>(j, "is_reflection", prefix);
  s.matched_keyword = detail::optional_field<std::string>(j, "matched_keyword", prefix);
  s.is_final_step = detail::required<bool>(j, "is_final_step", prefix);
  return s;
}

inline nlohmann::json trace_to_json(const ReasoningTrace& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) steps.push_back(step_to_json(s));
  return {{"trace_id", t.trace_id},
          {"question_id", t.question_id},
          {"prompt_text", t.prompt_text},
          {"thinking_text", t.thinking_text},
          {"answer_text", t.answer_text},
          {"token_ids", t.token_ids},
          {"thinking_token_span", detail::span_to_json(t.thinking_token_span)},
          {"end_of_think_index", detail::opt_to_json(t.end_of_think_index)},
          {"steps", std::move(steps)},
          {"decode_params", decode_params_to_json(t.decode_params)},
          {"correct", detail::opt_to_json(t.correct)},
          {"n_thinking_tokens", t.n_thinking_tokens}};
}

inline ReasoningTrace trace_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("<record>", "trace record must be a JSON object");
  ReasoningTrace t;
  t.trace_id = detail::required<std::string>(j, "trace_id");
  t.question_id = detail::required<std::string>(j, "question_id");
  t.prompt_text = detail::required<std::string>(j, "prompt_text");
  t.thinking_text = detail::required<std::string>(j, "thinking_text");
  t.answer_text = detail::required<std::string>(j, "answer_text");
  t.token_ids = detail::required<std::vector<TokenId>>(j, "token_ids");
  if (!j.contains("thinking_token_span")) throw ValidationError("thinking_token_span", "missing field");
  t.thinking_token_span = detail::span_from_json(j["thinking_token_span"], "thinking_token_span");
  t.end_of_think_index = detail::optional_field<std::int64_t>(j, "end_of_think_index");
  if (!j.contains("steps") || !j["steps"].is_array()) throw ValidationError("steps", "missing or not an array");
  for (std::size_t i = 0; i < j["steps"].size(); ++i) {
    t.steps.push_back(step_from_json(j["steps"][i], "steps[" + std::to_string(i) + "]."));
  }
  if (!j.contains("decode_params")) throw ValidationError("decode_params", "missing field");
  t.decode_params = decode_params_from_json(j["decode_params"]);
  t.correct = detail::optional_field<bool>(j, "correct");
  t.n_thinking_tokens = detail::required<std::int64_t>(j, "n_thinking_tokens");
  return t;
}

// One JSON line, no trailing newline. Throws ValidationError naming the first
// offending field when the trace violates an invariant.
inline std::string encode_trace(const ReasoningTrace& t, std::string_view delimiter = "\n\n") {
  auto violations = validate_trace(t, delimiter);
  if (!violations.empty()) {
    throw ValidationError(violations.front().field, violations.front().code + ": " + violations.front().message);
  }
  return trace_to_json(t).dump();
}

inline ReasoningTrace decode_trace(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("<record>", std::string("malformed JSON: ") + e.what());
  }
  return trace_from_json(j);
}

// ---------------------------------------------------------------------------
// Corpus files (.traces.jsonl)

inline std::vector<ReasoningTrace> read_trace_corpus(const std::filesystem::path& path,
                                                     std::string_view delimiter = "\n\n") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open trace corpus " + path.string());
  std::vector<ReasoningTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(decode_trace(line));
      auto v = validate_trace(out.back(), delimiter);
      if (!v.empty()) throw ValidationError(v.front().field, v.front().code);
    } catch (const ValidationError& e) {
      throw ValidationError(e.field(), path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_trace_corpus(const std::filesystem::path& path, const std::vector<ReasoningTrace>& traces,
                               std::string_view delimiter = "\n\n") {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    for (const auto& t : traces) out << encode_trace(t, delimiter) << '\n';
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void append_trace(const std::filesystem::path& path, const ReasoningTrace& t,
                         std::string_view delimiter = "\n\n") {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << encode_trace(t, delimiter) << '\n';
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace reflctrl
