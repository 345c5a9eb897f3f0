#pragma once

// Model-agnostic generation loop with activation capture, injection hooks and
// logit processing, plus teacher-forced recapture over stored token ids.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/model/activation_record.hpp"
#include "reflctrl/model/causal_lm.hpp"
#include "reflctrl/segmenter.hpp"

namespace reflctrl {

// Per-pass information handed to injection callbacks and logit processors.
struct PassContext {
  std::int64_t token_index = 0;          // position of the token being processed
  bool in_thinking = false;              // token lies inside the thinking region
  bool first_thinking_token = false;
  std::optional<std::string_view> previous_token_text;  // previous generated thinking token, if any
};

using InjectionCallback = std::function<void(const PassContext&, int layer, Site site, std::span<float> z)>;
// Applied to logits before sampling a token that will fall inside the thinking region.
using LogitProcessor = std::function<void(std::span<float> logits)>;

enum class CapturePositions { none, step_starts, end_of_think, all_thinking, explicit_set };

struct HookPlan {
  CapturePositions positions = CapturePositions::none;
  std::set<std::int64_t> explicit_positions;
  std::vector<Site> sites{Site::attn, Site::mlp};
  std::vector<int> layers;  // empty means every layer
  bool capture_heads = false;
  bool capture_final_residual = false;
  InjectionCallback injection;

  bool capturing() const noexcept { return positions != CapturePositions::none; }

  void validate(const ModelSpec& spec) const {
    if (!capturing()) return;
    if (sites.empty()) throw ConfigError("hook plan captures but selects no site");
    for (int l : layers) {
      if (l < 0 || l >= spec.n_layers) throw ConfigError("hook plan layer out of range: " + std::to_string(l));
    }
  }

  bool wants(int layer, Site site) const {
    return std::find(sites.begin(), sites.end(), site) != sites.end() &&
           (layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end());
  }
};

struct TraceIdentity {
  std::string trace_id;
  std::string question_id;
};

struct GenerateOptions {
  SegmentationConfig segmentation;
  LogitProcessor logit_processor;
};

struct GenerationResult {
  ReasoningTrace trace;
  std::vector<ActivationRecord> records;
  std::vector<HeadActivationRecord> head_records;
  std::vector<ResidualRecord> residual_records;
};

class Sampler {
 public:
  explicit Sampler(const DecodeParams& params) : params_(params), rng_(params.seed) {}

  TokenId sample(std::span<const float> logits) {
    if (logits.empty()) throw AdapterError("empty logits");
    for (float l : logits) {
      if (std::isnan(l)) throw AdapterError("NaN logit");
    }
    if (params_.greedy()) {
      return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    const float max_logit = *std::max_element(logits.begin(), logits.end());
    if (!std::isfinite(max_logit)) throw AdapterError("no finite logit to sample from");
    std::vector<double> probs(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      probs[i] = std::exp((static_cast<double>(logits[i]) - max_logit) / params_.temperature);
    }
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    double kept = 0.0;
    std::size_t n_keep = 0;
    while (n_keep < order.size()) {
      kept += probs[order[n_keep++]];
      if (kept >= params_.top_p * total) break;
    }
    const double u = unit() * kept;
    double acc = 0.0;
    for (std::size_t k = 0; k < n_keep; ++k) {
      acc += probs[order[k]];
      if (u < acc) return static_cast<TokenId>(order[k]);
    }
    return static_cast<TokenId>(order[n_keep - 1]);
  }

 private:
  double unit() { return static_cast<double>(rng_() >> 11) * (1.0 / 9007199254740992.0); }

  DecodeParams params_;
  std::mt19937_64 rng_;
};

namespace detail {

// Builds the hooks for one forward pass: injection first, then capture of the
// (possibly modified) block output that actually enters the residual.
inline ForwardHooks make_pass_hooks(const HookPlan& plan, const PassContext& ctx, bool capture,
                                    const std::string& trace_id, GenerationResult& out) {
  ForwardHooks hooks;
  const bool inject = plan.injection && ctx.in_thinking;
  if (inject || capture) {
    hooks.on_block_output = [&plan, &out, &trace_id, ctx, inject, capture](int layer, Site site, std::span<float> z) {
      if (inject) plan.injection(ctx, layer, site, z);
      if (capture && plan.wants(layer, site)) {
        out.records.push_back({trace_id, ctx.token_index, layer, site, std::vector<float>(z.begin(), z.end())});
      }
    };
  }
  if (capture && plan.capture_heads) {
    hooks.on_head_output = [&plan, &out, &trace_id, ctx](int layer, int head, std::span<const float> v) {
      if (plan.wants(layer, Site::attn)) {
        out.head_records.push_back({trace_id, ctx.token_index, layer, head, std::vector<float>(v.begin(), v.end())});
      }
    };
  }
  if (capture && plan.capture_final_residual) {
    hooks.on_final_residual = [&out, &trace_id, ctx](std::span<const float> v) {
      out.residual_records.push_back({trace_id, ctx.token_index, std::vector<float>(v.begin(), v.end())});
    };
  }
  return hooks;
}

}  // namespace detail

// Generates one response. Thinking runs from the first generated token up to
// (excluding) the end-of-think marker; everything after the marker up to EOS
// is the answer. Without injection and with greedy decoding the output is a
// pure function of (model, prompt).
inline GenerationResult generate(CausalLM& model, std::string_view prompt, const DecodeParams& params,
                                 const HookPlan& plan, const TraceIdentity& id, const GenerateOptions& options = {}) {
  if (prompt.empty()) throw ConfigError("prompt must be non-empty");
  if (params.max_tokens <= 0) throw ConfigError("max_tokens must be positive");
  const ModelSpec& spec = model.spec();
  plan.validate(spec);

  GenerationResult out;
  ReasoningTrace& trace = out.trace;
  trace.trace_id = id.trace_id;
  trace.question_id = id.question_id;
  trace.prompt_text = std::string(prompt);
  trace.decode_params = params;

  model.reset();
  trace.token_ids = model.encode_prompt(prompt);
  if (trace.token_ids.empty()) throw AdapterError("prompt encoded to zero tokens");
  const TokenId eot = model.end_of_think_token();
  const TokenId eos = model.eos_token();

  std::vector<float> logits;
  for (std::size_t i = 0; i < trace.token_ids.size(); ++i) {
    PassContext ctx{static_cast<std::int64_t>(i), false, false, std::nullopt};
    const bool capture = plan.positions == CapturePositions::explicit_set && plan.explicit_positions.count(ctx.token_index);
    logits = model.forward(trace.token_ids[i], detail::make_pass_hooks(plan, ctx, capture, trace.trace_id, out));
  }

  const auto thinking_start = static_cast<std::int64_t>(trace.token_ids.size());
  Sampler sampler(params);
  bool in_thinking = true;
  bool ended_with_eos = false;
  for (int generated = 0; generated < params.max_tokens;) {
    if (in_thinking && options.logit_processor) options.logit_processor(logits);
    const TokenId tok = sampler.sample(logits);
    trace.token_ids.push_back(tok);
    ++generated;
    const auto idx = static_cast<std::int64_t>(trace.token_ids.size()) - 1;
    if (tok == eos) {
      ended_with_eos = true;
      break;
    }
    if (in_thinking && tok == eot) {
      trace.end_of_think_index = idx;
      in_thinking = false;
    }
    if (generated == params.max_tokens) break;

    PassContext ctx;
    ctx.token_index = idx;
    ctx.in_thinking = in_thinking;
    ctx.first_thinking_token = idx == thinking_start;
    if (idx > thinking_start) ctx.previous_token_text = model.token_text(trace.token_ids[static_cast<std::size_t>(idx - 1)]);

    bool capture = false;
    switch (plan.positions) {
      case CapturePositions::none: break;
      case CapturePositions::step_starts:
        capture = ctx.in_thinking &&
                  (ctx.first_thinking_token ||
                   (ctx.previous_token_text && is_step_delimiter_token(*ctx.previous_token_text, options.segmentation)));
        break;
      case CapturePositions::end_of_think: capture = trace.end_of_think_index == idx; break;
      case CapturePositions::all_thinking: capture = ctx.in_thinking; break;
      case CapturePositions::explicit_set: capture = plan.explicit_positions.count(idx) > 0; break;
    }
    logits = model.forward(tok, detail::make_pass_hooks(plan, ctx, capture, trace.trace_id, out));
  }

  const auto n_total = static_cast<std::int64_t>(trace.token_ids.size());
  const std::int64_t gen_end = ended_with_eos ? n_total - 1 : n_total;
  const std::int64_t thinking_end = trace.end_of_think_index.value_or(gen_end);
  trace.thinking_token_span = Span{thinking_start, thinking_end};
  trace.n_thinking_tokens = thinking_end - thinking_start;
  const auto& ids = trace.token_ids;
  auto slice = [&](std::int64_t a, std::int64_t b) {
    return std::span<const TokenId>(ids.data() + a, static_cast<std::size_t>(std::max<std::int64_t>(0, b - a)));
  };
  trace.thinking_text = model.vocab().decode(slice(thinking_start, thinking_end));
  if (trace.end_of_think_index) trace.answer_text = model.vocab().decode(slice(*trace.end_of_think_index + 1, gen_end));

  auto segments = segment_text(trace.thinking_text, options.segmentation);
  trace.steps = align_steps_to_tokens(trace, segments, [&](TokenId t) -> std::string_view { return model.token_text(t); });
  return out;
}

struct CaptureRequest {
  std::set<std::int64_t> positions;
  std::vector<Site> sites{Site::attn, Site::mlp};
  std::vector<int> layers;  // empty means every layer
  bool heads = false;
  bool final_residual = false;
};

// Replays stored token ids through the model and captures at the requested
// positions. Uses the same per-token forward path as generate().
inline GenerationResult teacher_forced_capture(CausalLM& model, std::span<const TokenId> tokens,
                                               const CaptureRequest& req, const std::string& trace_id) {
  GenerationResult out;
  if (req.positions.empty()) return out;
  const auto last = *req.positions.rbegin();
  if (*req.positions.begin() < 0 || last >= static_cast<std::int64_t>(tokens.size())) {
    throw ConfigError("capture position outside the token sequence of " + trace_id);
  }
  HookPlan plan;
  plan.positions = CapturePositions::explicit_set;
  plan.sites = req.sites;
  plan.layers = req.layers;
  plan.capture_heads = req.heads;
  plan.capture_final_residual = req.final_residual;
  plan.validate(model.spec());
  out.trace.trace_id = trace_id;

  model.reset();
  for (std::int64_t i = 0; i <= last; ++i) {
    PassContext ctx{i, false, false, std::nullopt};
    const bool capture = req.positions.count(i) > 0;
    model.forward(tokens[static_cast<std::size_t>(i)], detail::make_pass_hooks(plan, ctx, capture, out.trace.trace_id, out));
  }
  return out;
}

// Block outputs at the first token of the selected steps (all steps when
// step_indices is empty), via teacher forcing over the stored token ids.
inline std::vector<ActivationRecord> capture_step_start_activations(CausalLM& model, const ReasoningTrace& trace,
                                                                    const std::vector<Site>& sites,
                                                                    const std::vector<int>& layers,
                                                                    const std::vector<int>& step_indices = {}) {
  CaptureRequest req;
  req.sites = sites;
  req.layers = layers;
  if (step_indices.empty()) {
    for (const auto& s : trace.steps) req.positions.insert(s.first_token_index);
  } else {
    for (int i : step_indices) {
      if (i < 0 || static_cast<std::size_t>(i) >= trace.steps.size()) {
        throw ConfigError("step index " + std::to_string(i) + " out of range for trace " + trace.trace_id);
      }
      req.positions.insert(trace.steps[static_cast<std::size_t>(i)].first_token_index);
    }
  }
  return teacher_forced_capture(model, trace.token_ids, req, trace.trace_id).records;
}

}  // namespace reflctrl
