#pragma once

// Contract every model backend implements: token-at-a-time forward passes
// with hook points on the attention and MLP block outputs (the two addends of
// the residual update), optional per-head attention decomposition, and the
// final residual stream.

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"

namespace reflctrl {

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) continue;
      index_.try_emplace(tokens_[i], static_cast<TokenId>(i));
      max_len_ = std::max(max_len_, tokens_[i].size());
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  const std::string& text(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw AdapterError("token id out of range: " + std::to_string(id));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::optional<TokenId> find(std::string_view s) const {
    auto it = index_.find(s);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Greedy longest-prefix match. Exact for vocabularies where every byte is a
  // token; an approximation of BPE merges otherwise.
  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - pos);
      for (; len > 0; --len) {
        if (auto it = index_.find(text.substr(pos, len)); it != index_.end()) {
          out.push_back(it->second);
          break;
        }
      }
      if (len == 0) {
        throw AdapterError("cannot encode byte at offset " + std::to_string(pos) + " with this vocabulary");
      }
      pos += len;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) out += text(id);
    return out;
  }

  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> index_;
  std::size_t max_len_ = 0;
};

// Hook points invoked during one forward pass. on_block_output may modify the
// block output in place; the modified vector is what enters the residual.
struct ForwardHooks {
  std::function<void(int layer, Site site, std::span<float> block_output)> on_block_output;
  // Head output embedded into model space through its slice of the output
  // projection; heads of a layer sum to the attention output minus its bias.
  std::function<void(int layer, int head, std::span<const float> embedded)> on_head_output;
  // Residual stream after the last decoder layer, before the final norm.
  std::function<void(std::span<const float> residual)> on_final_residual;

  bool empty() const noexcept { return !on_block_output && !on_head_output && !on_final_residual; }
};

class CausalLM {
 public:
  virtual ~CausalLM() = default;

  virtual const ModelSpec& spec() const = 0;
  virtual const Vocabulary& vocab() const = 0;
  virtual TokenId eos_token() const = 0;

  // Full prompt token sequence for a user message, ending where the model
  // starts generating its thinking.
  virtual std::vector<TokenId> encode_prompt(std::string_view user_prompt) const = 0;

  // Clears the session (KV cache and any per-sequence state).
  virtual void reset() = 0;

  // Processes the next position of the current sequence and returns logits
  // over the vocabulary for the following token.
  virtual std::vector<float> forward(TokenId token, const ForwardHooks& hooks) = 0;

  virtual bool supports_head_decomposition() const { return false; }

  TokenId end_of_think_token() const {
    auto id = vocab().find(spec().end_of_think_marker);
    if (!id) throw AdapterError("end-of-think marker is not a single token: " + spec().end_of_think_marker);
    return *id;
  }
  const std::string& token_text(TokenId id) const { return vocab().text(id); }
};

}  // namespace reflctrl
