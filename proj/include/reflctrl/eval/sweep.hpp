#pragma once

// Steered evaluation runs. A condition (steering mode, lambda, layer mask, or
// the NoWait ban) is run over n_samples per question; traces and injection
// logs are appended to JSON-lines files as they complete, so an interrupted
// run resumes where it stopped. Seeds depend only on (run_seed, question_id,
// sample_index), which pairs samples across conditions.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/direction_lab.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/eval/dataset.hpp"
#include "reflctrl/eval/grading.hpp"
#include "reflctrl/hash.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/reflection_labeler.hpp"
#include "reflctrl/steering.hpp"

namespace reflctrl {

inline std::uint64_t sample_seed(std::uint64_t run_seed, std::string_view question_id, int sample_index) {
  return splitmix64(hash_combine(hash_combine(run_seed, fnv1a64(question_id)), static_cast<std::uint64_t>(sample_index)));
}

struct Condition {
  std::string name;
  SteeringConfig steering;
  bool nowait = false;

  nlohmann::json to_json() const { return {{"name", name}, {"steering", steering.to_json()}, {"nowait", nowait}}; }
};

// Fixed-point rendering so file names and CSV cells are stable.
inline std::string format_number(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s == "-0" || s.find_first_not_of("-0.") == std::string::npos) s = s.front() == '-' ? s.substr(1) : s;
  return s;
}

inline std::string format_lambda(double lambda) {
  std::string s = format_number(lambda, 4);
  while (s.find('.') != std::string::npos && (s.back() == '0' || s.back() == '.')) {
    const bool dot = s.back() == '.';
    s.pop_back();
    if (dot) break;
  }
  return s;
}

inline Condition steering_condition(SteeringMode mode, double lambda, LayerMask mask = {}, std::vector<Site> sites = {Site::attn, Site::mlp}) {
  Condition c;
  c.steering.mode = mode;
  c.steering.lambda = lambda;
  c.steering.mask = mask;
  c.steering.sites = std::move(sites);
  c.name = std::string(to_string(mode)) + "_lam" + format_lambda(lambda);
  if (mask.skip_first != 6 || mask.skip_last != 6) {
    c.name += "_sf" + std::to_string(mask.skip_first) + "_sl" + std::to_string(mask.skip_last);
  }
  return c;
}

inline Condition nowait_condition() {
  Condition c;
  c.name = "nowait";
  c.nowait = true;
  return c;
}

struct RunSettings {
  DecodeParams decode;
  std::uint64_t run_seed = 0;
  int n_samples = 1;
  KeywordConfig keywords = KeywordConfig::defaults();
  SegmentationConfig segmentation;
  std::string config_hash;
  // Optional progress callback: (done, total).
  std::function<void(std::size_t, std::size_t)> progress;
};

struct ConditionFiles {
  std::filesystem::path traces;
  std::filesystem::path events;

  static ConditionFiles in(const std::filesystem::path& dir, const std::string& condition) {
    return {dir / (condition + ".traces.jsonl"), dir / (condition + ".events.jsonl")};
  }
};

inline std::string sample_trace_id(const std::string& condition, const std::string& question_id, int sample) {
  return condition + "/" + question_id + "/s" + std::to_string(sample);
}

// Reads a JSON-lines file, dropping (and truncating away) a torn final line
// left by an interrupted writer.
inline std::vector<nlohmann::json> read_jsonl_resumable(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  if (!std::filesystem::exists(path)) return out;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::uint64_t good_bytes = 0;
  bool torn = false;
  while (std::getline(in, line)) {
    const bool has_newline = !in.eof();
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !has_newline) {
      if (in.peek() != std::char_traits<char>::eof() && has_newline) {
        throw CorruptionError("malformed line in the middle of " + path.string());
      }
      torn = true;
      break;
    }
    out.push_back(std::move(j));
    good_bytes += line.size() + 1;
  }
  in.close();
  if (torn) std::filesystem::resize_file(path, good_bytes);
  return out;
}

inline void append_jsonl(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << j.dump() << '\n';
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

struct ConditionRun {
  Condition condition;
  std::vector<ReasoningTrace> traces;
  std::vector<InjectionEventLog> logs;
};

// Generates, labels and grades every (question, sample) of `items` that is
// not already in the condition's trace file.
inline ConditionRun run_condition(CausalLM& model, const DirectionSet* dirs, const std::vector<EvalItem>& items,
                                  const Condition& cond, const RunSettings& rs, const std::filesystem::path& dir) {
  const auto files = ConditionFiles::in(dir, cond.name);
  ConditionRun run;
  run.condition = cond;
  std::set<std::string> done;
  for (const auto& j : read_jsonl_resumable(files.traces)) {
    run.traces.push_back(trace_from_json(j));
    done.insert(run.traces.back().trace_id);
  }
  std::set<std::string> logged;
  for (const auto& j : read_jsonl_resumable(files.events)) {
    auto log = event_log_from_json(j);
    if (!done.contains(log.trace_id) || logged.contains(log.trace_id)) continue;
    logged.insert(log.trace_id);
    run.logs.push_back(std::move(log));
  }

  const bool steer = cond.steering.mode != SteeringMode::off;
  if (steer && dirs == nullptr) throw ConfigError("condition " + cond.name + " steers but no direction set was given");
  GenerateOptions opts;
  opts.segmentation = rs.segmentation;
  if (cond.nowait) opts.logit_processor = make_nowait_processor(build_banned_token_set(model.vocab(), rs.keywords.keywords));
  DirectionSet unused;
  if (!steer) {
    unused.model_id = model.spec().model_id;
    unused.n_layers = model.spec().n_layers;
    unused.d_model = model.spec().d_model;
  }

  const std::size_t total = items.size() * static_cast<std::size_t>(rs.n_samples);
  std::size_t n_done = 0;
  for (const auto& item : items) {
    const std::string prompt = build_prompt(item);
    for (int s = 0; s < rs.n_samples; ++s, ++n_done) {
      const auto id = sample_trace_id(cond.name, item.question_id, s);
      if (done.contains(id)) continue;
      DecodeParams dp = rs.decode;
      dp.seed = sample_seed(rs.run_seed, item.question_id, s);
      auto res = steered_generate(model, prompt, dp, cond.steering, steer ? *dirs : unused, {id, item.question_id}, {}, opts);
      ReasoningTrace& t = res.generation.trace;
      label_trace(t, rs.keywords);
      t.correct = grade_answer_text(item.gold_answer, t.answer_text, item.task_kind).correct;
      // events before the trace line, which marks the sample done
      append_jsonl(files.events, event_log_to_json(res.log));
      append_jsonl(files.traces, trace_to_json(t));
      run.traces.push_back(std::move(t));
      run.logs.push_back(std::move(res.log));
      done.insert(id);
      if (rs.progress) rs.progress(n_done + 1, total);
    }
  }
  return run;
}

// ---------------------------------------------------------------------------
// Aggregation

struct SweepRow {
  std::string condition;
  std::string mode;
  double lambda = 0.0;
  int skip_first = 6;
  int skip_last = 6;
  double accuracy = 0.0;
  double mean_thinking_tokens = 0.0;
  double mean_reflection_steps = 0.0;
  double mean_reflection_rate = 0.0;
  std::size_t n_questions = 0;
  std::size_t n_samples = 0;
  std::size_t n_truncated = 0;
  std::size_t n_format_failures = 0;
};

// Aggregates persisted traces. Format failures are re-derived from the answer
// text, so a row can be recomputed from the trace file alone.
inline SweepRow aggregate(const Condition& cond, const std::vector<ReasoningTrace>& traces) {
  SweepRow r;
  r.condition = cond.name;
  r.mode = cond.nowait ? "nowait" : std::string(to_string(cond.steering.mode));
  r.lambda = cond.nowait ? 0.0 : cond.steering.lambda;
  r.skip_first = cond.steering.mask.skip_first;
  r.skip_last = cond.steering.mask.skip_last;
  if (traces.empty()) return r;
  std::set<std::string> questions;
  double correct = 0.0, tokens = 0.0, refl = 0.0, rate = 0.0;
  std::size_t n_rate = 0;
  for (const auto& t : traces) {
    questions.insert(t.question_id);
    correct += t.correct.value_or(false) ? 1.0 : 0.0;
    tokens += static_cast<double>(t.n_thinking_tokens);
    refl += static_cast<double>(count_reflection_steps(t));
    if (!t.steps.empty()) {
      rate += reflection_rate(t);
      ++n_rate;
    }
    r.n_truncated += t.truncated() ? 1 : 0;
    r.n_format_failures += boxed_contents(t.answer_text).empty() ? 1 : 0;
  }
  const auto n = static_cast<double>(traces.size());
  r.accuracy = correct / n;
  r.mean_thinking_tokens = tokens / n;
  r.mean_reflection_steps = refl / n;
  r.mean_reflection_rate = n_rate ? rate / static_cast<double>(n_rate) : 0.0;
  r.n_questions = questions.size();
  r.n_samples = traces.size();
  return r;
}

inline std::string sweep_csv_header() {
  return "condition,mode,lambda,skip_first,skip_last,accuracy,mean_thinking_tokens,mean_reflection_steps,"
         "mean_reflection_rate,n_questions,n_samples,n_truncated,n_format_failures,config_hash\n";
}

inline std::string sweep_csv_row(const SweepRow& r, const std::string& config_hash) {
  std::ostringstream o;
  o << r.condition << ',' << r.mode << ',' << format_lambda(r.lambda) << ',' << r.skip_first << ',' << r.skip_last << ','
    << format_number(r.accuracy) << ',' << format_number(r.mean_thinking_tokens, 3) << ','
    << format_number(r.mean_reflection_steps, 4) << ',' << format_number(r.mean_reflection_rate) << ',' << r.n_questions
    << ',' << r.n_samples << ',' << r.n_truncated << ',' << r.n_format_failures << ',' << config_hash << '\n';
  return o.str();
}

// Strips the condition prefix so samples can be matched across conditions.
inline std::set<std::string> sample_keys(const std::vector<ReasoningTrace>& traces) {
  std::set<std::string> out;
  for (const auto& t : traces) {
    const auto slash = t.trace_id.find('/');
    out.insert(slash == std::string::npos ? t.trace_id : t.trace_id.substr(slash + 1));
  }
  return out;
}

struct ModeComparisonRow {
  double lambda = 0.0;
  SweepRow stepwise;
  SweepRow all_token;
  double accuracy_delta() const { return stepwise.accuracy - all_token.accuracy; }
};

// Pairs stepwise and all-token runs at each lambda; refuses runs that do not
// cover the same (question, sample) pairs.
inline std::vector<ModeComparisonRow> compare_modes(const std::vector<ConditionRun>& stepwise,
                                                    const std::vector<ConditionRun>& all_token) {
  std::map<double, const ConditionRun*> by_lambda;
  for (const auto& r : all_token) by_lambda[r.condition.steering.lambda] = &r;
  std::vector<ModeComparisonRow> out;
  for (const auto& s : stepwise) {
    auto it = by_lambda.find(s.condition.steering.lambda);
    if (it == by_lambda.end()) {
      throw RefusalError("no all-token run at lambda " + format_lambda(s.condition.steering.lambda));
    }
    if (sample_keys(s.traces) != sample_keys(it->second->traces)) {
      throw RefusalError("stepwise and all-token runs at lambda " + format_lambda(s.condition.steering.lambda) +
                         " cover different question/sample sets");
    }
    out.push_back({s.condition.steering.lambda, aggregate(s.condition, s.traces),
                   aggregate(it->second->condition, it->second->traces)});
  }
  return out;
}

inline std::string modes_csv(const std::vector<ModeComparisonRow>& rows, const std::string& config_hash) {
  std::ostringstream o;
  o << "lambda,stepwise_accuracy,all_token_accuracy,accuracy_delta,stepwise_mean_thinking_tokens,"
       "all_token_mean_thinking_tokens,stepwise_mean_reflection_steps,all_token_mean_reflection_steps,config_hash\n";
  for (const auto& r : rows) {
    o << format_lambda(r.lambda) << ',' << format_number(r.stepwise.accuracy) << ',' << format_number(r.all_token.accuracy)
      << ',' << format_number(r.accuracy_delta()) << ',' << format_number(r.stepwise.mean_thinking_tokens, 3) << ','
      << format_number(r.all_token.mean_thinking_tokens, 3) << ',' << format_number(r.stepwise.mean_reflection_steps, 4)
      << ',' << format_number(r.all_token.mean_reflection_steps, 4) << ',' << config_hash << '\n';
  }
  return o.str();
}

}  // namespace reflctrl
