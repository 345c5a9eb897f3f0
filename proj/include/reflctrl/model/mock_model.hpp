#pragma once

// Deterministic scripted reasoning model for pipeline tests and CI runs with
// no weights. It answers small arithmetic word problems with a chain of
// "\n\n"-separated steps, some of which are reflections ("Wait, ..."), then
// "</think>" and a boxed answer.
//
// Every stochastic choice is exposed as a next-token distribution, so decoding
// parameters, seeds and logit processors behave as they do for a real model:
//   * at each step boundary: start a reflection, a plain step, or the final step;
//   * at the first answer digit: the correct digit or a wrong one.
//
// Block outputs are synthetic: seeded noise plus a planted per-(layer, site)
// unit direction u whose weight is large at the first token of a reflection
// step, tracks the question's difficulty at every token, and tracks the
// model's answer uncertainty at the end-of-think token. Injected edits are
// read back through u: their projection accumulates into a latent that shifts
// the reflection odds at later boundaries, and their magnitude accumulates
// into a drift term that lowers answer accuracy. Both persist only through
// the session state, the analogue of the KV cache.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/hash.hpp"
#include "reflctrl/model/causal_lm.hpp"

namespace reflctrl {

struct MockModelOptions {
  std::uint64_t seed = 7;
  int n_layers = 28;
  int d_model = 32;
  int n_heads = 4;
  double noise = 1.0;
  double reflection_signal = 3.0;
  double difficulty_signal = 0.6;
  double uncertainty_signal = 6.0;
  double reflection_bias = -0.8;
  double reflection_difficulty_gain = 1.6;
  double reflection_fatigue = 0.45;
  double steer_gain = 5.0;
  double accuracy_bias = 4.2;
  double accuracy_difficulty_gain = 4.0;
  double accuracy_reflection_gain = 0.08;
  double drift_penalty = 0.03;
  int max_reflections = 8;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"n_layers", n_layers},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"noise", noise},
            {"reflection_signal", reflection_signal},
            {"difficulty_signal", difficulty_signal},
            {"uncertainty_signal", uncertainty_signal},
            {"reflection_bias", reflection_bias},
            {"reflection_difficulty_gain", reflection_difficulty_gain},
            {"reflection_fatigue", reflection_fatigue},
            {"steer_gain", steer_gain},
            {"accuracy_bias", accuracy_bias},
            {"accuracy_difficulty_gain", accuracy_difficulty_gain},
            {"accuracy_reflection_gain", accuracy_reflection_gain},
            {"drift_penalty", drift_penalty},
            {"max_reflections", max_reflections}};
  }

  static MockModelOptions from_json(const nlohmann::json& j) {
    MockModelOptions o;
    o.seed = j.value("seed", o.seed);
    o.n_layers = j.value("n_layers", o.n_layers);
    o.d_model = j.value("d_model", o.d_model);
    o.n_heads = j.value("n_heads", o.n_heads);
    o.noise = j.value("noise", o.noise);
    o.reflection_signal = j.value("reflection_signal", o.reflection_signal);
    o.difficulty_signal = j.value("difficulty_signal", o.difficulty_signal);
    o.uncertainty_signal = j.value("uncertainty_signal", o.uncertainty_signal);
    o.reflection_bias = j.value("reflection_bias", o.reflection_bias);
    o.reflection_difficulty_gain = j.value("reflection_difficulty_gain", o.reflection_difficulty_gain);
    o.reflection_fatigue = j.value("reflection_fatigue", o.reflection_fatigue);
    o.steer_gain = j.value("steer_gain", o.steer_gain);
    o.accuracy_bias = j.value("accuracy_bias", o.accuracy_bias);
    o.accuracy_difficulty_gain = j.value("accuracy_difficulty_gain", o.accuracy_difficulty_gain);
    o.accuracy_reflection_gain = j.value("accuracy_reflection_gain", o.accuracy_reflection_gain);
    o.drift_penalty = j.value("drift_penalty", o.drift_penalty);
    o.max_reflections = j.value("max_reflections", o.max_reflections);
    return o;
  }
};

// Integer arithmetic word problem as the mock reads it: the first number is
// the starting amount, later numbers are added or subtracted depending on the
// verb right before them.
struct MockQuestion {
  long long answer = 0;
  int n_operations = 0;
  double difficulty = 0.0;  // in [0, 1]
  int plain_steps = 3;
};

inline MockQuestion mock_parse_question(std::string_view text) {
  static constexpr std::array<std::string_view, 9> kSubtract = {"away", "loses", "eats", "spends", "sells",
                                                                "uses", "breaks", "donates", "lost"};
  MockQuestion q;
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  bool first = true;
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& w = words[i];
    if (w.empty() || !std::all_of(w.begin(), w.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      continue;
    }
    const long long v = std::stoll(w.substr(0, 15));
    if (first) {
      q.answer = v;
      first = false;
      continue;
    }
    const std::string& prev = i > 0 ? words[i - 1] : w;
    const bool sub = std::find(kSubtract.begin(), kSubtract.end(), prev) != kSubtract.end();
    q.answer += sub ? -v : v;
    ++q.n_operations;
  }
  const double h = unit_double(splitmix64(fnv1a64(text)));
  q.difficulty = std::clamp(0.1 + 0.18 * q.n_operations + 0.4 * h, 0.0, 1.0);
  q.plain_steps = 2 + q.n_operations + (h > 0.5 ? 1 : 0);
  return q;
}

class MockReasoningModel final : public CausalLM {
 public:
  explicit MockReasoningModel(MockModelOptions opt = {}) : opt_(opt) {
    if (opt_.n_layers <= 0 || opt_.d_model <= 0 || opt_.n_heads <= 0) throw ConfigError("mock dimensions must be positive");
    spec_.model_id = "mock-reasoner-" + std::to_string(opt_.n_layers) + "l-seed" + std::to_string(opt_.seed);
    spec_.n_layers = opt_.n_layers;
    spec_.d_model = opt_.d_model;
    spec_.n_heads = opt_.n_heads;
    spec_.head_dim = std::max(1, opt_.d_model / opt_.n_heads);
    spec_.validate();

    std::vector<std::string> v = {"<eos>", "<user>", "<assistant>", "<think>", "</think>", "\n\n", ".\n\n",
                                  "Wait", "Hmm", "First", "Next", "Then", "So", "The", ",", ".", " ",
                                  " let", " me", " check", " that", " again", " verify", " the", " result",
                                  " maybe", " I", " made", " a", " mistake", " we", " read", " numbers",
                                  " compute", " partial", " carry", " digits", " combine", " terms",
                                  " total", " is", " answer", "\\boxed{", "}"};
    for (int b = 0; b < 256; ++b) v.emplace_back(1, static_cast<char>(b));
    vocab_ = Vocabulary(std::move(v));
    auto id = [&](std::string_view s) { return *vocab_.find(s); };
    eos_ = id("<eos>");
    user_ = id("<user>");
    assistant_ = id("<assistant>");
    think_ = id("<think>");
    eot_ = id("</think>");
    wait_ = id("Wait");
    hmm_ = id("Hmm");
    so_ = id("So");

    auto enc = [&](std::initializer_list<std::string_view> toks) {
      std::vector<TokenId> out;
      for (auto t : toks) out.push_back(id(t));
      return out;
    };
    plain_ = {enc({"First", ",", " we", " read", " the", " numbers", ".\n\n"}),
              enc({"Next", ",", " we", " compute", " the", " partial", " result", ".\n\n"}),
              enc({"Then", " we", " carry", " the", " digits", ".\n\n"}),
              enc({"Next", ",", " we", " combine", " the", " terms", ".\n\n"})};
    reflect_ = {enc({"Wait", ",", " let", " me", " check", " that", " again", ".\n\n"}),
                enc({"Hmm", ",", " let", " me", " verify", " the", " result", ".\n\n"}),
                enc({"Wait", ",", " maybe", " I", " made", " a", " mistake", ".\n\n"})};
    final_head_ = enc({"So", " the", " total", " is", " "});
    answer_head_ = enc({"\n\n", "The", " answer", " is", " ", "\\boxed{"});

    // Planted unit directions per (layer, site) and per-head signal shares.
    const auto d = static_cast<std::size_t>(opt_.d_model);
    planted_.resize(static_cast<std::size_t>(opt_.n_layers) * 2);
    for (std::size_t k = 0; k < planted_.size(); ++k) {
      std::vector<float> u(d);
      double n2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        u[i] = static_cast<float>(gauss(hash_combine(opt_.seed ^ 0x5eedULL, k * 1000 + i)));
        n2 += static_cast<double>(u[i]) * u[i];
      }
      for (auto& x : u) x = static_cast<float>(x / std::sqrt(n2));
      planted_[k] = std::move(u);
    }
    head_share_.resize(static_cast<std::size_t>(opt_.n_layers));
    for (int l = 0; l < opt_.n_layers; ++l) {
      std::vector<double> w(static_cast<std::size_t>(opt_.n_heads));
      std::size_t carrier = 0;
      for (int h = 0; h < opt_.n_heads; ++h) {
        const double r = unit_double(hash_combine(opt_.seed ^ 0x4eadULL, static_cast<std::uint64_t>(l * 64 + h)));
        w[static_cast<std::size_t>(h)] = 0.1 + 0.4 * r;
        if (w[static_cast<std::size_t>(h)] > w[carrier]) carrier = static_cast<std::size_t>(h);
      }
      // One head per layer carries most of the signal, more so in deep layers.
      w[carrier] += 1.0 + 2.0 * l / opt_.n_layers;
      double total = 0.0;
      for (double x : w) total += x;
      for (auto& x : w) x /= total;
      head_share_[static_cast<std::size_t>(l)] = std::move(w);
    }
    reset();
  }

  const ModelSpec& spec() const override { return spec_; }
  const Vocabulary& vocab() const override { return vocab_; }
  TokenId eos_token() const override { return eos_; }
  bool supports_head_decomposition() const override { return true; }
  const MockModelOptions& options() const noexcept { return opt_; }

  // Unit direction planted at (layer, site); exposed for tests.
  const std::vector<float>& planted_direction(int layer, Site site) const {
    return planted_[static_cast<std::size_t>(layer) * 2 + static_cast<std::size_t>(site)];
  }

  std::vector<TokenId> encode_prompt(std::string_view user_prompt) const override {
    std::vector<TokenId> ids{user_};
    auto body = vocab_.encode(user_prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(assistant_);
    ids.push_back(think_);
    return ids;
  }

  void reset() override { s_ = Session{}; }

  std::vector<float> forward(TokenId token, const ForwardHooks& hooks) override {
    if (token < 0 || static_cast<std::size_t>(token) >= vocab_.size()) {
      throw AdapterError("token id out of range: " + std::to_string(token));
    }
    s_.prefix_hash = hash_combine(s_.prefix_hash, static_cast<std::uint64_t>(token) + 1);
    const bool reflection_start = consume(token);
    const bool at_eot = token == eot_ && s_.phase == Phase::answer && s_.phrase_pos == 0;

    if (!hooks.empty()) run_hooks(hooks, token, reflection_start, at_eot);
    ++s_.pos;
    return next_logits();
  }

 private:
  enum class Phase { prompt, thinking, answer, done };
  enum class Kind { plain, reflect, final_step, answer };

  struct Session {
    Phase phase = Phase::prompt;
    std::string prompt;
    MockQuestion question;
    std::vector<TokenId> phrase;
    std::size_t phrase_pos = 0;
    Kind kind = Kind::plain;
    bool awaiting_decision = false;
    bool digits_pending = false;
    std::string digits;
    int plain_done = 0;
    int reflections = 0;
    double steer = 0.0;
    double drift = 0.0;
    double p_correct = 1.0;
    std::uint64_t prefix_hash = 0x9e3779b97f4a7c15ULL;
    std::int64_t pos = 0;
  };

  static double gauss(std::uint64_t h) {
    // Irwin-Hall(4) approximation, unit variance.
    double s = 0.0;
    for (int i = 0; i < 4; ++i) {
      h = splitmix64(h);
      s += unit_double(h);
    }
    return (s - 2.0) * std::sqrt(3.0);
  }

  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  std::string wrong_answer(const std::string& right) const {
    std::string w = right;
    if (w.empty()) return "1";
    if (w[0] == '-') return w.substr(1);
    const int d = w[0] - '0';
    w[0] = static_cast<char>('0' + (w.size() > 1 ? d % 9 + 1 : (d + 1) % 10));
    return w;
  }

  double reflection_probability() const {
    if (s_.reflections >= opt_.max_reflections) return 0.0;
    return sigmoid(opt_.reflection_bias + opt_.reflection_difficulty_gain * s_.question.difficulty -
                   opt_.reflection_fatigue * s_.reflections + opt_.steer_gain * s_.steer);
  }

  double correct_probability() const {
    return sigmoid(opt_.accuracy_bias - opt_.accuracy_difficulty_gain * s_.question.difficulty +
                   opt_.accuracy_reflection_gain * std::min(s_.reflections, 3) - opt_.drift_penalty * s_.drift);
  }

  // Advances the script with the token just fed; returns true when it opens a
  // reflection step.
  bool consume(TokenId token) {
    switch (s_.phase) {
      case Phase::prompt:
        if (token == think_) {
          s_.question = mock_parse_question(s_.prompt);
          s_.phase = Phase::thinking;
          s_.kind = Kind::plain;
          s_.phrase = plain_[0];
          s_.phrase_pos = 0;
          s_.plain_done = 1;
        } else if (token != user_ && token != assistant_) {
          s_.prompt += vocab_.text(token);
        }
        return false;
      case Phase::thinking:
        if (token == eot_) {
          s_.phase = Phase::answer;
          s_.kind = Kind::answer;
          s_.phrase = answer_head_;
          for (char c : s_.digits) s_.phrase.push_back(*vocab_.find(std::string(1, c)));
          s_.phrase.push_back(*vocab_.find("}"));
          s_.phrase.push_back(*vocab_.find("."));
          s_.phrase.push_back(eos_);
          s_.phrase_pos = 0;
          return false;
        }
        if (s_.awaiting_decision) {
          s_.awaiting_decision = false;
          s_.phrase_pos = 1;
          if (token == wait_ || token == hmm_) {
            const int t = token == hmm_ ? 1 : (s_.reflections % 3 == 2 ? 2 : 0);
            s_.kind = Kind::reflect;
            s_.phrase = reflect_[static_cast<std::size_t>(t)];
            ++s_.reflections;
            return true;
          }
          if (token == so_) {
            s_.kind = Kind::final_step;
            s_.phrase = final_head_;
            s_.digits_pending = true;
            return false;
          }
          s_.kind = Kind::plain;
          s_.phrase = plain_[static_cast<std::size_t>(s_.plain_done % 4)];
          ++s_.plain_done;
          return false;
        }
        if (s_.kind == Kind::final_step && s_.digits_pending && s_.phrase_pos == s_.phrase.size()) {
          const std::string right = std::to_string(s_.question.answer);
          s_.digits = vocab_.text(token) == right.substr(0, 1) ? right : wrong_answer(right);
          for (char c : s_.digits) s_.phrase.push_back(*vocab_.find(std::string(1, c)));
          s_.phrase.push_back(*vocab_.find("."));
          s_.digits_pending = false;
        }
        ++s_.phrase_pos;
        return false;
      case Phase::answer:
        ++s_.phrase_pos;
        if (s_.phrase_pos >= s_.phrase.size()) s_.phase = Phase::done;
        return false;
      case Phase::done:
        return false;
    }
    return false;
  }

  std::vector<float> next_logits() {
    constexpr float kOff = -1.0e4f;
    std::vector<float> logits(vocab_.size(), kOff);
    auto put = [&](TokenId t, double p) {
      logits[static_cast<std::size_t>(t)] = p > 0.0 ? static_cast<float>(std::log(p)) : kOff;
    };
    switch (s_.phase) {
      case Phase::prompt:
      case Phase::done:
        put(eos_, 1.0);
        return logits;
      case Phase::answer:
        put(s_.phrase_pos < s_.phrase.size() ? s_.phrase[s_.phrase_pos] : eos_, 1.0);
        return logits;
      case Phase::thinking:
        break;
    }
    if (s_.phrase_pos < s_.phrase.size()) {
      put(s_.phrase[s_.phrase_pos], 1.0);
      return logits;
    }
    if (s_.kind == Kind::final_step) {
      if (s_.digits_pending) {
        s_.p_correct = correct_probability();
        const std::string right = std::to_string(s_.question.answer);
        put(*vocab_.find(right.substr(0, 1)), s_.p_correct);
        put(*vocab_.find(wrong_answer(right).substr(0, 1)), 1.0 - s_.p_correct);
      } else {
        put(eot_, 1.0);
      }
      return logits;
    }
    s_.awaiting_decision = true;
    const double pr = reflection_probability();
    const TokenId refl = s_.reflections % 3 == 1 ? hmm_ : wait_;
    put(refl, pr);
    if (s_.plain_done < s_.question.plain_steps) {
      put(plain_[static_cast<std::size_t>(s_.plain_done % 4)][0], 1.0 - pr);
    } else {
      put(so_, 1.0 - pr);
    }
    return logits;
  }

  void run_hooks(const ForwardHooks& hooks, TokenId token, bool reflection_start, bool at_eot) {
    const auto d = static_cast<std::size_t>(opt_.d_model);
    const int L = opt_.n_layers;
    const double alpha_ref = opt_.reflection_signal;
    std::vector<float> residual(d), z(d), before(d);
    const std::uint64_t tok_h = hash_combine(opt_.seed, static_cast<std::uint64_t>(token) * 7919 + 17);
    for (std::size_t i = 0; i < d; ++i) residual[i] = static_cast<float>(gauss(hash_combine(tok_h, i)));

    const double difficulty_term = opt_.difficulty_signal * (2.0 * s_.question.difficulty - 1.0);
    const double uncertainty_term = at_eot ? opt_.uncertainty_signal * (1.0 - s_.p_correct) : 0.0;
    for (int l = 0; l < L; ++l) {
      const double depth = L > 1 ? static_cast<double>(l) / (L - 1) : 1.0;
      for (Site site : {Site::attn, Site::mlp}) {
        const auto k = static_cast<std::size_t>(l) * 2 + static_cast<std::size_t>(site);
        const auto& u = planted_[k];
        const double signal = (reflection_start ? opt_.reflection_signal * (0.15 + 0.85 * depth * depth) : 0.0) +
                              difficulty_term + uncertainty_term * (0.5 + 0.5 * depth);
        const std::uint64_t base = hash_combine(s_.prefix_hash, k + 1);
        for (std::size_t i = 0; i < d; ++i) {
          z[i] = static_cast<float>(opt_.noise * gauss(hash_combine(base, i)) + signal * u[i]);
        }
        if (site == Site::attn && hooks.on_head_output) emit_heads(hooks, l, z, signal, base);
        if (hooks.on_block_output) {
          before = z;
          hooks.on_block_output(l, site, std::span<float>(z));
          double proj = 0.0, norm2 = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const double delta = static_cast<double>(z[i]) - before[i];
            proj += delta * u[i];
            norm2 += delta * delta;
          }
          s_.steer += proj / (alpha_ref * 2.0 * L);
          s_.drift += std::sqrt(norm2) / (alpha_ref * 2.0 * L);
        }
        for (std::size_t i = 0; i < d; ++i) residual[i] += z[i];
      }
    }
    if (hooks.on_final_residual) hooks.on_final_residual(std::span<const float>(residual));
  }

  void emit_heads(const ForwardHooks& hooks, int layer, const std::vector<float>& z, double signal, std::uint64_t base) {
    const auto d = z.size();
    const int H = opt_.n_heads;
    const auto& u = planted_[static_cast<std::size_t>(layer) * 2];
    const auto& share = head_share_[static_cast<std::size_t>(layer)];
    std::vector<float> head(d), rest = z;
    const double head_noise = opt_.noise / std::sqrt(static_cast<double>(H));
    for (int h = 0; h < H; ++h) {
      if (h == H - 1) {
        head = rest;
      } else {
        const std::uint64_t hb = hash_combine(base, 0xABCDULL + static_cast<std::uint64_t>(h));
        for (std::size_t i = 0; i < d; ++i) {
          head[i] = static_cast<float>(head_noise * gauss(hash_combine(hb, i)) + share[static_cast<std::size_t>(h)] * signal * u[i]);
          rest[i] -= head[i];
        }
      }
      hooks.on_head_output(layer, h, std::span<const float>(head));
    }
  }

  MockModelOptions opt_;
  ModelSpec spec_;
  Vocabulary vocab_;
  TokenId eos_{}, user_{}, assistant_{}, think_{}, eot_{}, wait_{}, hmm_{}, so_{};
  std::vector<std::vector<TokenId>> plain_, reflect_;
  std::vector<TokenId> final_head_, answer_head_;
  std::vector<std::vector<float>> planted_;
  std::vector<std::vector<double>> head_share_;
  Session s_;
};

}  // namespace reflctrl
