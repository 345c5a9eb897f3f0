#pragma once

// Run configuration (JSON). Relative paths resolve against the directory of
// the config file; a relative model path resolves against $REFLCTRL_MODEL_CACHE
// when that variable is set. The config hash covers every setting except the
// output directory, plus the content of the keyword file.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/eval/dataset.hpp"
#include "reflctrl/hash.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/model/mock_model.hpp"
#include "reflctrl/model/transformer.hpp"
#include "reflctrl/reflection_labeler.hpp"
#include "reflctrl/segmenter.hpp"
#include "reflctrl/steering.hpp"
#include "reflctrl/uncertainty_probe.hpp"

namespace reflctrl {

inline constexpr const char* kModelCacheEnv = "REFLCTRL_MODEL_CACHE";

struct DatasetRef {
  std::string id = "gsm8k";
  std::string split = "test";
  int n_questions = 0;  // 0 = every item

  nlohmann::json to_json() const { return {{"id", id}, {"split", split}, {"n_questions", n_questions}}; }
  static DatasetRef from_json(const nlohmann::json& j, DatasetRef d) {
    d.id = j.value("id", d.id);
    d.split = j.value("split", d.split);
    d.n_questions = j.value("n_questions", d.n_questions);
    return d;
  }
};

struct ModelConfig {
  std::string kind = "mock";  // "mock" or "transformer"
  std::string path;           // transformer container directory
  MockModelOptions mock;
};

struct SweepSettings {
  std::vector<double> lambdas{0.48, 0.0, -0.48, -0.96};
  std::vector<SteeringMode> modes{SteeringMode::stepwise, SteeringMode::all_token};
  int n_samples = 3;
  bool nowait = true;
  std::vector<int> ablation_k{0, 2, 4, 6, 8, 10};
  double ablation_lambda = -0.48;
  int ablation_n_questions = 0;  // 0 = same questions as the sweep
};

struct ProbeSettings {
  DatasetRef train{"gsm8k", "train", 300};
  DatasetRef test{"gsm8k", "test", 150};
  int n_samples = 1;
  ProbeHyperparams hyper;
};

struct RunConfig {
  ModelConfig model;
  std::filesystem::path data_root = "data";
  DatasetRef extract_data{"gsm8k", "train", 100};
  int extract_samples = 1;
  DatasetRef eval_data{"gsm8k", "test", 50};
  std::filesystem::path keyword_file;  // empty = built-in list
  SegmentationConfig segmentation;
  DecodeParams decode;
  SteeringConfig steering;
  SweepSettings sweep;
  ProbeSettings probe;
  std::filesystem::path output_dir = "results";
  std::uint64_t run_seed = 0;

  std::filesystem::path base_dir = ".";  // directory of the config file

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return (p.is_absolute() ? p : base_dir / p).lexically_normal();
  }

  std::filesystem::path model_path() const {
    std::filesystem::path p = model.path;
    if (p.is_absolute()) return p;
    if (const char* cache = std::getenv(kModelCacheEnv); cache && *cache) return std::filesystem::path(cache) / p;
    return resolve(p);
  }

  KeywordConfig keywords() const {
    if (keyword_file.empty()) return KeywordConfig::defaults();
    return load_keyword_file(resolve(keyword_file));
  }

  nlohmann::json to_json() const {
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : sweep.modes) modes.push_back(to_string(m));
    return {{"model", {{"kind", model.kind}, {"path", model.path}, {"mock", model.mock.to_json()}}},
            {"data_root", data_root.generic_string()},
            {"extract", {{"dataset", extract_data.to_json()}, {"n_samples", extract_samples}}},
            {"eval", eval_data.to_json()},
            {"keyword_file", keyword_file.generic_string()},
            {"segmentation", reflctrl::to_json(segmentation)},
            {"decode", decode_params_to_json(decode)},
            {"steering", steering.to_json()},
            {"sweep",
             {{"lambdas", sweep.lambdas},
              {"modes", modes},
              {"n_samples", sweep.n_samples},
              {"nowait", sweep.nowait},
              {"ablation_k", sweep.ablation_k},
              {"ablation_lambda", sweep.ablation_lambda},
              {"ablation_n_questions", sweep.ablation_n_questions}}},
            {"probe",
             {{"train", probe.train.to_json()},
              {"test", probe.test.to_json()},
              {"n_samples", probe.n_samples},
              {"hyperparams", probe.hyper.to_json()}}},
            {"output_dir", output_dir.generic_string()},
            {"run_seed", run_seed}};
  }

  std::string hash() const {
    auto j = to_json();
    j.erase("output_dir");
    j["keyword_config_hash"] = keywords().hash();
    return canonical_json_hash(j);
  }

  // Every referenced input exists and every setting is in range.
  void validate() const {
    if (model.kind != "mock" && model.kind != "transformer") throw ConfigError("model.kind must be mock or transformer");
    if (model.kind == "transformer" && !std::filesystem::exists(model_path() / "model.json")) {
      throw ConfigError("model container not found at " + model_path().string() + " (set " + kModelCacheEnv +
                        " or model.path)");
    }
    if (!keyword_file.empty() && !std::filesystem::exists(resolve(keyword_file))) {
      throw ConfigError("keyword file not found: " + resolve(keyword_file).string());
    }
    keywords().validate(segmentation.delimiter);
    segmentation.validate();
    for (const auto* d : {&extract_data, &eval_data, &probe.train, &probe.test}) {
      const auto f = dataset_file(resolve(data_root), d->id, d->split);
      if (!std::filesystem::exists(f)) throw ConfigError("dataset file not found: " + f.string());
      if (d->n_questions < 0) throw ConfigError("n_questions must be >= 0");
    }
    if (decode.temperature < 0 || !(decode.top_p > 0 && decode.top_p <= 1) || decode.max_tokens <= 0) {
      throw ConfigError("decode parameters out of range");
    }
    if (sweep.lambdas.empty()) throw ConfigError("sweep.lambdas is empty");
    for (double l : sweep.lambdas) {
      if (!std::isfinite(l)) throw ConfigError("sweep lambda must be finite");
    }
    if (sweep.n_samples < 1 || extract_samples < 1 || probe.n_samples < 1) throw ConfigError("n_samples must be >= 1");
  }
};

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  RunConfig c;
  c.base_dir = base_dir;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model.kind = m.value("kind", c.model.kind);
      c.model.path = m.value("path", c.model.path);
      if (m.contains("mock")) c.model.mock = MockModelOptions::from_json(m.at("mock"));
    }
    c.data_root = j.value("data_root", c.data_root.string());
    if (j.contains("extract")) {
      c.extract_data = DatasetRef::from_json(j.at("extract").value("dataset", nlohmann::json::object()), c.extract_data);
      c.extract_samples = j.at("extract").value("n_samples", c.extract_samples);
    }
    if (j.contains("eval")) c.eval_data = DatasetRef::from_json(j.at("eval"), c.eval_data);
    c.keyword_file = j.value("keyword_file", std::string());
    if (j.contains("segmentation")) c.segmentation = segmentation_from_json(j.at("segmentation"));
    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      c.decode.temperature = d.value("temperature", c.decode.temperature);
      c.decode.top_p = d.value("top_p", c.decode.top_p);
      c.decode.max_tokens = d.value("max_tokens", c.decode.max_tokens);
      c.decode.seed = d.value("seed", c.decode.seed);
    }
    if (j.contains("steering")) c.steering = SteeringConfig::from_json(j.at("steering"));
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      c.sweep.lambdas = s.value("lambdas", c.sweep.lambdas);
      if (s.contains("modes")) {
        c.sweep.modes.clear();
        for (const auto& m : s.at("modes")) c.sweep.modes.push_back(steering_mode_from_string(m.get<std::string>()));
      }
      c.sweep.n_samples = s.value("n_samples", c.sweep.n_samples);
      c.sweep.nowait = s.value("nowait", c.sweep.nowait);
      c.sweep.ablation_k = s.value("ablation_k", c.sweep.ablation_k);
      c.sweep.ablation_lambda = s.value("ablation_lambda", c.sweep.ablation_lambda);
      c.sweep.ablation_n_questions = s.value("ablation_n_questions", c.sweep.ablation_n_questions);
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      if (p.contains("train")) c.probe.train = DatasetRef::from_json(p.at("train"), c.probe.train);
      if (p.contains("test")) c.probe.test = DatasetRef::from_json(p.at("test"), c.probe.test);
      c.probe.n_samples = p.value("n_samples", c.probe.n_samples);
      if (p.contains("hyperparams")) c.probe.hyper = ProbeHyperparams::from_json(p.at("hyperparams"));
    }
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.run_seed = j.value("run_seed", c.run_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  auto j = nlohmann::json::parse(io::read_file(path), nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  auto base = std::filesystem::absolute(path).parent_path();
  return run_config_from_json(j, base);
}

inline std::unique_ptr<CausalLM> load_model(const RunConfig& cfg) {
  if (cfg.model.kind == "mock") return std::make_unique<MockReasoningModel>(cfg.model.mock);
  const auto dir = cfg.model_path();
  if (!std::filesystem::exists(dir / "model.json")) {
    throw AdapterError("model container not found at " + dir.string() + "; convert a checkpoint with "
                       "tools/convert_hf_model.py and point model.path or " + kModelCacheEnv + " at it");
  }
  return std::make_unique<TransformerModel>(TransformerModel::load(dir));
}

}  // namespace reflctrl
