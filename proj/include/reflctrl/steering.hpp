#pragma once

// Adds lambda * d to attention/MLP block outputs while the model is thinking,
// either on every thinking token or only on tokens that open a new step, and
// the NoWait baseline that bans reflection-cue tokens instead.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/direction_lab.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/model/generate.hpp"
#include "reflctrl/reflection_labeler.hpp"
#include "reflctrl/segmenter.hpp"

namespace reflctrl {

enum class SteeringMode { off, stepwise, all_token };

inline std::string_view to_string(SteeringMode m) {
  switch (m) {
    case SteeringMode::off: return "off";
    case SteeringMode::stepwise: return "stepwise";
    case SteeringMode::all_token: return "all_token";
  }
  return "off";
}

inline SteeringMode steering_mode_from_string(std::string_view s) {
  if (s == "off") return SteeringMode::off;
  if (s == "stepwise") return SteeringMode::stepwise;
  if (s == "all_token" || s == "all-token") return SteeringMode::all_token;
  throw ConfigError("unknown steering mode: " + std::string(s));
}

struct LayerMask {
  int skip_first = 6;
  int skip_last = 6;

  bool allows(int layer, int n_layers) const { return layer >= skip_first && layer < n_layers - skip_last; }

  std::vector<int> layers(int n_layers) const {
    std::vector<int> out;
    for (int l = 0; l < n_layers; ++l) {
      if (allows(l, n_layers)) out.push_back(l);
    }
    return out;
  }
};

struct SteeringConfig {
  double lambda = 0.0;
  SteeringMode mode = SteeringMode::off;
  LayerMask mask;
  std::vector<Site> sites{Site::attn, Site::mlp};
  std::string direction_ref;
  // Also inject on the first thinking token, treating the start of thinking
  // as a step boundary.
  bool inject_at_think_start = false;

  void validate(int n_layers) const {
    if (!std::isfinite(lambda)) throw ConfigError("lambda must be finite");
    if (mask.skip_first < 0 || mask.skip_last < 0) throw ConfigError("layer mask skips must be non-negative");
    if (mode != SteeringMode::off && mask.skip_first + mask.skip_last >= n_layers) {
      throw ConfigError("layer mask skips " + std::to_string(mask.skip_first) + " + " + std::to_string(mask.skip_last) +
                        " leave no layer of " + std::to_string(n_layers));
    }
    if (mode != SteeringMode::off && sites.empty()) throw ConfigError("steering selects no site");
  }

  nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::array();
    for (Site x : sites) s.push_back(to_string(x));
    return {{"lambda", lambda},
            {"mode", to_string(mode)},
            {"skip_first", mask.skip_first},
            {"skip_last", mask.skip_last},
            {"sites", s},
            {"direction_ref", direction_ref},
            {"inject_at_think_start", inject_at_think_start}};
  }

  static SteeringConfig from_json(const nlohmann::json& j) {
    SteeringConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.mode = steering_mode_from_string(j.value("mode", std::string("off")));
    c.mask.skip_first = j.value("skip_first", c.mask.skip_first);
    c.mask.skip_last = j.value("skip_last", c.mask.skip_last);
    if (j.contains("sites")) {
      c.sites.clear();
      for (const auto& s : j.at("sites")) c.sites.push_back(site_from_string(s.get<std::string>()));
    }
    c.direction_ref = j.value("direction_ref", std::string());
    c.inject_at_think_start = j.value("inject_at_think_start", false);
    return c;
  }
};

// z + lambda * d, elementwise.
inline std::vector<float> apply_steering(std::span<const float> z, std::span<const float> d, double lambda) {
  if (z.size() != d.size()) {
    throw ValidationError("d", "dimension mismatch: z has " + std::to_string(z.size()) + ", d has " + std::to_string(d.size()));
  }
  std::vector<float> out(z.begin(), z.end());
  const auto lam = static_cast<float>(lambda);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += lam * d[i];
  return out;
}

inline void apply_steering_in_place(std::span<float> z, std::span<const float> d, double lambda) {
  if (z.size() != d.size()) {
    throw ValidationError("d", "dimension mismatch: z has " + std::to_string(z.size()) + ", d has " + std::to_string(d.size()));
  }
  const auto lam = static_cast<float>(lambda);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += lam * d[i];
}

// True when the previously generated token closes a step, i.e. the pass about
// to run processes the first token of a new step.
inline bool stepwise_trigger(std::string_view last_token_text, const SegmentationConfig& seg = {}) {
  return is_step_delimiter_token(last_token_text, seg);
}

inline bool stepwise_trigger(const PassContext& ctx, const SteeringConfig& cfg, const SegmentationConfig& seg = {}) {
  if (!ctx.in_thinking) return false;
  if (ctx.first_thinking_token) return cfg.inject_at_think_start;
  return ctx.previous_token_text && stepwise_trigger(*ctx.previous_token_text, seg);
}

struct InjectionEvent {
  std::int64_t token_index = 0;
  std::vector<int> layers;
  SteeringMode mode = SteeringMode::off;
  friend bool operator==(const InjectionEvent&, const InjectionEvent&) = default;
};

struct InjectionEventLog {
  std::string trace_id;
  std::vector<InjectionEvent> events;

  std::set<std::int64_t> token_indices() const {
    std::set<std::int64_t> out;
    for (const auto& e : events) out.insert(e.token_index);
    return out;
  }
};

inline nlohmann::json event_log_to_json(const InjectionEventLog& log) {
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& e : log.events) ev.push_back({{"token_index", e.token_index}, {"layers", e.layers}, {"mode", to_string(e.mode)}});
  return {{"trace_id", log.trace_id}, {"events", ev}};
}

inline InjectionEventLog event_log_from_json(const nlohmann::json& j) {
  InjectionEventLog log;
  log.trace_id = j.at("trace_id").get<std::string>();
  for (const auto& e : j.at("events")) {
    log.events.push_back({e.at("token_index").get<std::int64_t>(), e.at("layers").get<std::vector<int>>(),
                          steering_mode_from_string(e.at("mode").get<std::string>())});
  }
  return log;
}

struct SteeredResult {
  GenerationResult generation;
  InjectionEventLog log;
};

// Checks that `dirs` belongs to `model` and covers every (layer, site) the
// config would steer.
inline void check_steering_compatibility(const CausalLM& model, const DirectionSet& dirs, const SteeringConfig& cfg) {
  const auto& spec = model.spec();
  if (dirs.model_id != spec.model_id) {
    throw RefusalError("direction set was extracted from '" + dirs.model_id + "' but the loaded model is '" +
                       spec.model_id + "'");
  }
  if (dirs.d_model != spec.d_model || dirs.n_layers != spec.n_layers) {
    throw RefusalError("direction set shape does not match the loaded model");
  }
  if (cfg.mode == SteeringMode::off) return;
  for (int l : cfg.mask.layers(spec.n_layers)) {
    for (Site s : cfg.sites) {
      if (!dirs.contains(l, s)) {
        throw ConfigError("direction set has no vector for layer " + std::to_string(l) + " " + std::string(to_string(s)));
      }
    }
  }
}

inline SteeredResult steered_generate(CausalLM& model, std::string_view prompt, const DecodeParams& params,
                                      const SteeringConfig& cfg, const DirectionSet& dirs, const TraceIdentity& id,
                                      HookPlan capture = {}, const GenerateOptions& options = {}) {
  const auto& spec = model.spec();
  cfg.validate(spec.n_layers);
  check_steering_compatibility(model, dirs, cfg);

  SteeredResult out;
  out.log.trace_id = id.trace_id;
  capture.injection = nullptr;
  if (cfg.mode != SteeringMode::off) {
    std::vector<const std::vector<float>*> table(static_cast<std::size_t>(spec.n_layers) * 2, nullptr);
    for (int l : cfg.mask.layers(spec.n_layers)) {
      for (Site s : cfg.sites) table[static_cast<std::size_t>(l) * 2 + static_cast<std::size_t>(s)] = &dirs.at(l, s);
    }
    auto* log = &out.log;
    const SegmentationConfig seg = options.segmentation;
    capture.injection = [cfg, table, log, seg](const PassContext& ctx, int layer, Site site, std::span<float> z) {
      if (!ctx.in_thinking) return;
      if (cfg.mode == SteeringMode::stepwise && !stepwise_trigger(ctx, cfg, seg)) return;
      const auto* d = table[static_cast<std::size_t>(layer) * 2 + static_cast<std::size_t>(site)];
      if (d == nullptr) return;
      apply_steering_in_place(z, *d, cfg.lambda);
      if (log->events.empty() || log->events.back().token_index != ctx.token_index) {
        log->events.push_back({ctx.token_index, {}, cfg.mode});
      }
      auto& layers = log->events.back().layers;
      if (layers.empty() || layers.back() != layer) layers.push_back(layer);
    };
  }
  out.generation = generate(model, prompt, params, capture, id, options);
  return out;
}

// ---------------------------------------------------------------------------
// NoWait baseline

inline void nowait_suppress(std::span<float> logits, const std::set<TokenId>& banned) {
  for (TokenId t : banned) {
    if (t >= 0 && static_cast<std::size_t>(t) < logits.size()) {
      logits[static_cast<std::size_t>(t)] = -std::numeric_limits<float>::infinity();
    }
  }
}

inline std::vector<float> nowait_suppressed(std::vector<float> logits, const std::set<TokenId>& banned) {
  nowait_suppress(logits, banned);
  return logits;
}

// Tokens to ban for a keyword list: each keyword as written, with its first
// letter upper-cased, and both with a leading space. A form that is a single
// token is banned as is; otherwise its first token is banned, unless that
// token is a lone character.
inline std::set<TokenId> build_banned_token_set(const Vocabulary& vocab, const std::vector<std::string>& keywords) {
  std::set<TokenId> out;
  for (const auto& kw : keywords) {
    if (kw.empty()) continue;
    std::string cap = kw;
    cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
    for (const std::string& form : {kw, cap, " " + kw, " " + cap}) {
      if (auto id = vocab.find(form)) {
        out.insert(*id);
        continue;
      }
      std::vector<TokenId> ids;
      try {
        ids = vocab.encode(form);
      } catch (const AdapterError&) {
        continue;
      }
      if (ids.empty()) continue;
      std::string_view first = vocab.text(ids.front());
      if (!first.empty() && first.front() == ' ') first.remove_prefix(1);
      if (first.size() >= 2) out.insert(ids.front());
    }
  }
  return out;
}

inline LogitProcessor make_nowait_processor(std::set<TokenId> banned) {
  if (banned.empty()) {
    std::cerr << "warning: NoWait banned token set is empty; logits pass through unchanged\n";
    return nullptr;
  }
  return [banned = std::move(banned)](std::span<float> logits) { nowait_suppress(logits, banned); };
}

}  // namespace reflctrl
