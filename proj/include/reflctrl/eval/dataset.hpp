#pragma once

// Evaluation datasets. On-disk layout under a data root:
//   gsm8k/<split>.jsonl          {"question": ..., "answer": "... #### 72"}
//   math500/<split>.jsonl        {"problem": ..., "answer": ..., "unique_id"?: ...}
//   mmlu/<subset>/<split>.jsonl  {"question": ..., "choices": [4 strings], "answer": 0-3 or "A"-"D"}
// An optional "id" field overrides the positional question id.

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/eval/grading.hpp"

namespace reflctrl {

struct EvalItem {
  std::string question_id;
  std::string question_text;
  std::string gold_answer;
  TaskKind task_kind = TaskKind::numeric;
  std::string dataset_id;
  std::vector<std::string> choices;  // letter tasks only
};

inline constexpr std::string_view kMathPromptSuffix =
    "Please reason step by step, and put your final answer within \\boxed{}";
inline constexpr std::string_view kLetterPromptSuffix =
    "Please reason step by step, and put your final answer (only the letter) within \\boxed{}.";

inline TaskKind task_kind_for(std::string_view dataset_id) {
  if (dataset_id == "gsm8k" || dataset_id == "math500") return TaskKind::numeric;
  if (dataset_id.starts_with("mmlu:") && dataset_id.size() > 5) return TaskKind::letter;
  throw ConfigError("unknown dataset id: " + std::string(dataset_id));
}

inline std::filesystem::path dataset_file(const std::filesystem::path& root, std::string_view dataset_id,
                                          std::string_view split) {
  task_kind_for(dataset_id);
  if (dataset_id.starts_with("mmlu:")) {
    return root / "mmlu" / std::string(dataset_id.substr(5)) / (std::string(split) + ".jsonl");
  }
  return root / std::string(dataset_id) / (std::string(split) + ".jsonl");
}

inline std::vector<EvalItem> load_dataset(const std::filesystem::path& root, std::string_view dataset_id,
                                          std::string_view split) {
  const TaskKind kind = task_kind_for(dataset_id);
  const auto path = dataset_file(root, dataset_id, split);
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open dataset file " + path.string());
  std::vector<EvalItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      EvalItem it;
      it.dataset_id = std::string(dataset_id);
      it.task_kind = kind;
      const std::string prefix = std::string(dataset_id) + "-" + std::string(split) + "-";
      it.question_id = j.contains("id") ? j.at("id").get<std::string>() : prefix + std::to_string(items.size());
      if (dataset_id == "gsm8k") {
        it.question_text = j.at("question").get<std::string>();
        const auto ans = j.at("answer").get<std::string>();
        const auto mark = ans.rfind("####");
        if (mark == std::string::npos) throw IngestionError(where + ": GSM8k answer has no '####' marker");
        it.gold_answer = normalize_numeric(std::string_view(ans).substr(mark + 4));
      } else if (dataset_id == "math500") {
        it.question_text = j.at("problem").get<std::string>();
        it.gold_answer = normalize_numeric(j.at("answer").get<std::string>());
        if (j.contains("unique_id") && !j.contains("id")) it.question_id = j.at("unique_id").get<std::string>();
      } else {
        it.question_text = j.at("question").get<std::string>();
        it.choices = j.at("choices").get<std::vector<std::string>>();
        if (it.choices.size() < 2 || it.choices.size() > 26) throw IngestionError(where + ": bad choice count");
        const auto& a = j.at("answer");
        if (a.is_number_integer()) {
          const int k = a.get<int>();
          if (k < 0 || k >= static_cast<int>(it.choices.size())) throw IngestionError(where + ": answer index out of range");
          it.gold_answer = std::string(1, static_cast<char>('A' + k));
        } else {
          it.gold_answer = normalize_letter(a.get<std::string>());
        }
      }
      if (it.gold_answer.empty()) throw IngestionError(where + ": empty gold answer");
      if (it.question_text.empty()) throw IngestionError(where + ": empty question");
      items.push_back(std::move(it));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(where + ": " + e.what());
    }
  }
  if (items.empty()) throw IngestionError("dataset file has no items: " + path.string());
  return items;
}

inline std::string build_prompt(const EvalItem& item) {
  std::string p = item.question_text;
  if (item.task_kind == TaskKind::letter) {
    for (std::size_t i = 0; i < item.choices.size(); ++i) {
      p += "\n";
      p += static_cast<char>('A' + i);
      p += ". " + item.choices[i];
    }
    p += "\n";
    p += kLetterPromptSuffix;
  } else {
    p += "\n";
    p += kMathPromptSuffix;
  }
  return p;
}

inline bool grade(const EvalItem& item, const std::optional<std::string>& extracted) {
  return extracted && answers_match(item.gold_answer, *extracted, item.task_kind);
}

}  // namespace reflctrl
