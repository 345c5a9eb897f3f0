#pragma once

// Per-question difficulty buckets from sample accuracy, and how reflection
// rate relates to difficulty and correctness within each bucket.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "reflctrl/core_types.hpp"
#include "reflctrl/eval/sweep.hpp"
#include "reflctrl/reflection_labeler.hpp"

namespace reflctrl {

enum class Difficulty { easy, medium, hard };

inline std::string_view to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "Easy";
    case Difficulty::medium: return "Medium";
    case Difficulty::hard: return "Hard";
  }
  return "Medium";
}

// Easy above 0.8, Hard below 0.5, Medium otherwise (both bounds inclusive).
inline Difficulty classify_difficulty(double accuracy) {
  if (accuracy > 0.8) return Difficulty::easy;
  if (accuracy < 0.5) return Difficulty::hard;
  return Difficulty::medium;
}

struct BucketStats {
  Difficulty category = Difficulty::medium;
  std::vector<std::string> question_ids;
  std::size_t n_traces = 0;
  double mean_reflection_rate = 0.0;
  // Mean reflection rate of correct and of incorrect samples; nullopt if none.
  std::optional<double> rate_when_correct;
  std::optional<double> rate_when_wrong;
};

struct DifficultyAnalysis {
  std::map<std::string, double> question_accuracy;
  std::vector<BucketStats> buckets;  // Easy, Medium, Hard
  std::size_t min_samples_per_question = 0;
};

inline DifficultyAnalysis difficulty_analysis(const std::vector<ReasoningTrace>& traces) {
  struct Acc {
    double correct = 0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> per_q;
  for (const auto& t : traces) {
    auto& a = per_q[t.question_id];
    a.correct += t.correct.value_or(false) ? 1.0 : 0.0;
    ++a.n;
  }
  DifficultyAnalysis out;
  out.min_samples_per_question = per_q.empty() ? 0 : SIZE_MAX;
  for (const auto& [q, a] : per_q) {
    out.question_accuracy[q] = a.correct / static_cast<double>(a.n);
    out.min_samples_per_question = std::min(out.min_samples_per_question, a.n);
  }
  for (Difficulty d : {Difficulty::easy, Difficulty::medium, Difficulty::hard}) {
    BucketStats b;
    b.category = d;
    for (const auto& [q, acc] : out.question_accuracy) {
      if (classify_difficulty(acc) == d) b.question_ids.push_back(q);
    }
    double sum = 0, sum_c = 0, sum_w = 0;
    std::size_t n = 0, n_c = 0, n_w = 0;
    for (const auto& t : traces) {
      if (t.steps.empty() || classify_difficulty(out.question_accuracy.at(t.question_id)) != d) continue;
      const double r = reflection_rate(t);
      sum += r;
      ++n;
      if (t.correct.value_or(false)) {
        sum_c += r;
        ++n_c;
      } else {
        sum_w += r;
        ++n_w;
      }
    }
    b.n_traces = n;
    b.mean_reflection_rate = n ? sum / static_cast<double>(n) : 0.0;
    if (n_c) b.rate_when_correct = sum_c / static_cast<double>(n_c);
    if (n_w) b.rate_when_wrong = sum_w / static_cast<double>(n_w);
    out.buckets.push_back(std::move(b));
  }
  return out;
}

inline std::string difficulty_csv(const DifficultyAnalysis& a, const std::string& config_hash) {
  std::ostringstream o;
  o << "bucket,n_questions,n_traces,mean_reflection_rate,reflection_rate_correct,reflection_rate_wrong,config_hash\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  for (const auto& b : a.buckets) {
    o << to_string(b.category) << ',' << b.question_ids.size() << ',' << b.n_traces << ','
      << format_number(b.mean_reflection_rate) << ',' << opt(b.rate_when_correct) << ',' << opt(b.rate_when_wrong) << ','
      << config_hash << '\n';
  }
  return o.str();
}

}  // namespace reflctrl
