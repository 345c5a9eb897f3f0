#pragma once

// Pre-norm decoder-only transformer running on the CPU, one token per forward
// pass with a KV cache. Covers GPT-style (LayerNorm, GELU) and Qwen2/Llama-style
// (RMSNorm, RoPE, SwiGLU, grouped-query attention, qkv bias) layers, so both
// hand-built toy models and converted checkpoints run through the same code.
//
// Layer l computes
//   attn_l = Attn(Norm(x_l)),  x~_l = x_l + attn_l
//   mlp_l  = MLP(Norm(x~_l)),  x_{l+1} = x~_l + mlp_l
// and exposes attn_l / mlp_l to ForwardHooks before each residual addition.

#include <Eigen/Dense>

#include <bit>
#include <limits>
#include <map>
#include <span>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/model/causal_lm.hpp"

namespace reflctrl {

enum class NormKind { layernorm, rmsnorm, none };
enum class MlpKind { gelu, swiglu };

struct TransformerConfig {
  std::string model_id = "tiny-transformer";
  int d_model = 16;
  int n_layers = 2;
  int n_heads = 2;
  int n_kv_heads = 2;
  int head_dim = 8;
  int d_ff = 32;
  NormKind norm = NormKind::layernorm;
  float norm_eps = 1e-5f;
  MlpKind mlp = MlpKind::gelu;
  bool rope = false;
  float rope_theta = 10000.0f;
  bool qkv_bias = false;
  bool o_bias = false;
  bool mlp_bias = false;
  bool tie_embeddings = false;

  std::string end_of_think_marker = "</think>";
  std::string step_delimiter = "\n\n";
  std::string eos_text = "<eos>";
  std::string chat_prefix = "<user>";
  std::string chat_suffix = "<assistant><think>";

  void validate(std::size_t vocab_size) const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0 || head_dim <= 0 || d_ff <= 0) {
      throw ConfigError("transformer dimensions must be positive");
    }
    if (n_heads % n_kv_heads != 0) throw ConfigError("n_heads must be a multiple of n_kv_heads");
    if (rope && head_dim % 2 != 0) throw ConfigError("rope requires an even head_dim");
    if (vocab_size == 0) throw ConfigError("empty vocabulary");
  }
};

struct TransformerLayerWeights {
  std::vector<float> attn_norm_w, attn_norm_b;
  std::vector<float> wq, bq, wk, bk, wv, bv;  // [n_heads*hd, d], [n_kv*hd, d]
  std::vector<float> wo, bo;                  // [d, n_heads*hd]
  std::vector<float> mlp_norm_w, mlp_norm_b;
  std::vector<float> w_gate;                  // swiglu only, [d_ff, d]
  std::vector<float> w_up, b_up;              // [d_ff, d]
  std::vector<float> w_down, b_down;          // [d, d_ff]
};

struct TransformerWeights {
  std::vector<float> embed;  // [V, d]
  std::vector<TransformerLayerWeights> layers;
  std::vector<float> final_norm_w, final_norm_b;
  std::vector<float> lm_head;  // [V, d]; empty when tied to embed
};

// Byte-level vocabulary with a handful of chat/control tokens; every byte
// string is encodable.
inline std::vector<std::string> default_byte_vocab() {
  std::vector<std::string> v = {"<eos>", "<user>", "<assistant>", "<think>", "</think>", "\n\n", ".\n\n"};
  for (int b = 0; b < 256; ++b) v.emplace_back(1, static_cast<char>(b));
  return v;
}

class TransformerModel final : public CausalLM {
 public:
  TransformerModel(TransformerConfig cfg, Vocabulary vocab, TransformerWeights w)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), w_(std::move(w)) {
    cfg_.validate(vocab_.size());
    check_shapes();
    spec_.model_id = cfg_.model_id;
    spec_.n_layers = cfg_.n_layers;
    spec_.d_model = cfg_.d_model;
    spec_.n_heads = cfg_.n_heads;
    spec_.head_dim = cfg_.head_dim;
    spec_.end_of_think_marker = cfg_.end_of_think_marker;
    spec_.step_delimiter = cfg_.step_delimiter;
    spec_.validate();
    auto eos = vocab_.find(cfg_.eos_text);
    if (!eos) throw AdapterError("eos token '" + cfg_.eos_text + "' not in vocabulary");
    eos_ = *eos;
    end_of_think_token();  // throws if the marker is not a single token
    reset();
  }

  // Weights drawn from N(0, std^2) with unit norm gains and zero biases.
  static TransformerModel random(TransformerConfig cfg, std::uint64_t seed, float std = 0.08f,
                                 std::vector<std::string> vocab = default_byte_vocab()) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd(0.0f, std);
    const auto V = vocab.size();
    auto fill = [&](std::size_t n) {
      std::vector<float> v(n);
      for (auto& x : v) x = nd(rng);
      return v;
    };
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t qd = static_cast<std::size_t>(cfg.n_heads * cfg.head_dim);
    const std::size_t kvd = static_cast<std::size_t>(cfg.n_kv_heads * cfg.head_dim);
    const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
    TransformerWeights w;
    w.embed = fill(V * d);
    for (int l = 0; l < cfg.n_layers; ++l) {
      TransformerLayerWeights L;
      L.attn_norm_w.assign(d, 1.0f);
      L.attn_norm_b.assign(d, 0.0f);
      L.wq = fill(qd * d);
      L.wk = fill(kvd * d);
      L.wv = fill(kvd * d);
      if (cfg.qkv_bias) {
        L.bq = fill(qd);
        L.bk = fill(kvd);
        L.bv = fill(kvd);
      }
      L.wo = fill(d * qd);
      if (cfg.o_bias) L.bo = fill(d);
      L.mlp_norm_w.assign(d, 1.0f);
      L.mlp_norm_b.assign(d, 0.0f);
      if (cfg.mlp == MlpKind::swiglu) L.w_gate = fill(ff * d);
      L.w_up = fill(ff * d);
      L.w_down = fill(d * ff);
      if (cfg.mlp_bias) {
        L.b_up = fill(ff);
        L.b_down = fill(d);
      }
      w.layers.push_back(std::move(L));
    }
    w.final_norm_w.assign(d, 1.0f);
    w.final_norm_b.assign(d, 0.0f);
    if (!cfg.tie_embeddings) w.lm_head = fill(V * d);
    return TransformerModel(std::move(cfg), Vocabulary(std::move(vocab)), std::move(w));
  }

  // model.json (config, vocabulary, tensor index) next to model.bin (raw
  // little-endian float32 tensors).
  static TransformerModel load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  const ModelSpec& spec() const override { return spec_; }
  const Vocabulary& vocab() const override { return vocab_; }
  TokenId eos_token() const override { return eos_; }
  bool supports_head_decomposition() const override { return true; }
  const TransformerConfig& config() const noexcept { return cfg_; }
  const TransformerWeights& weights() const noexcept { return w_; }

  std::vector<TokenId> encode_prompt(std::string_view user_prompt) const override {
    std::vector<TokenId> ids = vocab_.encode(cfg_.chat_prefix);
    auto body = vocab_.encode(user_prompt);
    auto tail = vocab_.encode(cfg_.chat_suffix);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.insert(ids.end(), tail.begin(), tail.end());
    return ids;
  }

  void reset() override {
    pos_ = 0;
    k_cache_.assign(static_cast<std::size_t>(cfg_.n_layers), {});
    v_cache_.assign(static_cast<std::size_t>(cfg_.n_layers), {});
  }

  std::vector<float> forward(TokenId token, const ForwardHooks& hooks) override {
    using Vec = Eigen::VectorXf;
    const int d = cfg_.d_model;
    const int hd = cfg_.head_dim;
    const int nh = cfg_.n_heads;
    const int group = cfg_.n_heads / cfg_.n_kv_heads;
    if (token < 0 || static_cast<std::size_t>(token) >= vocab_.size()) {
      throw AdapterError("token id out of range: " + std::to_string(token));
    }

    Vec x = Eigen::Map<const Vec>(w_.embed.data() + static_cast<std::size_t>(token) * d, d);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = w_.layers[static_cast<std::size_t>(l)];
      Vec h = norm(x, L.attn_norm_w, L.attn_norm_b);
      Vec q = matvec(L.wq, L.bq, h, nh * hd);
      Vec k = matvec(L.wk, L.bk, h, cfg_.n_kv_heads * hd);
      Vec v = matvec(L.wv, L.bv, h, cfg_.n_kv_heads * hd);
      if (cfg_.rope) {
        rope(q, nh);
        rope(k, cfg_.n_kv_heads);
      }
      auto& kc = k_cache_[static_cast<std::size_t>(l)];
      auto& vc = v_cache_[static_cast<std::size_t>(l)];
      kc.insert(kc.end(), k.data(), k.data() + k.size());
      vc.insert(vc.end(), v.data(), v.data() + v.size());
      const int n_pos = pos_ + 1;
      const int kv_stride = cfg_.n_kv_heads * hd;

      Vec heads(nh * hd);
      const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
      std::vector<float> scores(static_cast<std::size_t>(n_pos));
      for (int head = 0; head < nh; ++head) {
        const int kvh = head / group;
        const float* qh = q.data() + head * hd;
        float max_s = -std::numeric_limits<float>::infinity();
        for (int p = 0; p < n_pos; ++p) {
          const float* kp = kc.data() + static_cast<std::size_t>(p) * kv_stride + kvh * hd;
          float s = 0.0f;
          for (int i = 0; i < hd; ++i) s += qh[i] * kp[i];
          s *= scale;
          scores[static_cast<std::size_t>(p)] = s;
          max_s = std::max(max_s, s);
        }
        float denom = 0.0f;
        for (auto& s : scores) {
          s = std::exp(s - max_s);
          denom += s;
        }
        float* out = heads.data() + head * hd;
        std::fill(out, out + hd, 0.0f);
        for (int p = 0; p < n_pos; ++p) {
          const float a = scores[static_cast<std::size_t>(p)] / denom;
          const float* vp = vc.data() + static_cast<std::size_t>(p) * kv_stride + kvh * hd;
          for (int i = 0; i < hd; ++i) out[i] += a * vp[i];
        }
      }

      Vec attn = matvec(L.wo, L.bo, heads, d);
      if (hooks.on_head_output) {
        Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wo(L.wo.data(), d, nh * hd);
        for (int head = 0; head < nh; ++head) {
          Vec e = wo.middleCols(head * hd, hd) * heads.segment(head * hd, hd);
          hooks.on_head_output(l, head, std::span<const float>(e.data(), static_cast<std::size_t>(d)));
        }
      }
      if (hooks.on_block_output) hooks.on_block_output(l, Site::attn, std::span<float>(attn.data(), static_cast<std::size_t>(d)));
      x += attn;

      Vec h2 = norm(x, L.mlp_norm_w, L.mlp_norm_b);
      Vec mlp;
      if (cfg_.mlp == MlpKind::swiglu) {
        Vec g = matvec(L.w_gate, {}, h2, cfg_.d_ff);
        Vec u = matvec(L.w_up, {}, h2, cfg_.d_ff);
        for (int i = 0; i < cfg_.d_ff; ++i) g[i] = g[i] / (1.0f + std::exp(-g[i])) * u[i];
        mlp = matvec(L.w_down, {}, g, d);
      } else {
        Vec u = matvec(L.w_up, L.b_up, h2, cfg_.d_ff);
        for (int i = 0; i < cfg_.d_ff; ++i) u[i] = 0.5f * u[i] * (1.0f + std::erf(u[i] / std::sqrt(2.0f)));
        mlp = matvec(L.w_down, L.b_down, u, d);
      }
      if (hooks.on_block_output) hooks.on_block_output(l, Site::mlp, std::span<float>(mlp.data(), static_cast<std::size_t>(d)));
      x += mlp;
    }
    if (hooks.on_final_residual) hooks.on_final_residual(std::span<const float>(x.data(), static_cast<std::size_t>(d)));
    ++pos_;

    Vec hf = norm(x, w_.final_norm_w, w_.final_norm_b);
    const auto& head_w = cfg_.tie_embeddings ? w_.embed : w_.lm_head;
    Vec logits = matvec(head_w, {}, hf, static_cast<int>(vocab_.size()));
    return std::vector<float>(logits.data(), logits.data() + logits.size());
  }

 private:
  using Vec = Eigen::VectorXf;

  static Vec matvec(const std::vector<float>& w, const std::vector<float>& b, const Vec& x, int rows) {
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data(), rows, x.size());
    Vec y = m * x;
    if (!b.empty()) y += Eigen::Map<const Vec>(b.data(), rows);
    return y;
  }

  Vec norm(const Vec& x, const std::vector<float>& w, const std::vector<float>& b) const {
    const auto d = static_cast<float>(x.size());
    Vec y;
    switch (cfg_.norm) {
      case NormKind::none: return x;
      case NormKind::rmsnorm: {
        const float ms = x.squaredNorm() / d;
        y = x * (1.0f / std::sqrt(ms + cfg_.norm_eps));
        break;
      }
      case NormKind::layernorm: {
        const float mean = x.sum() / d;
        Vec c = x.array() - mean;
        const float var = c.squaredNorm() / d;
        y = c * (1.0f / std::sqrt(var + cfg_.norm_eps));
        break;
      }
    }
    if (!w.empty()) y = y.cwiseProduct(Eigen::Map<const Vec>(w.data(), x.size()));
    if (!b.empty() && cfg_.norm == NormKind::layernorm) y += Eigen::Map<const Vec>(b.data(), x.size());
    return y;
  }

  // Rotate-half convention: dimension i pairs with i + head_dim/2.
  void rope(Vec& v, int n) const {
    const int hd = cfg_.head_dim;
    const int half = hd / 2;
    for (int i = 0; i < half; ++i) {
      const double inv_freq = 1.0 / std::pow(static_cast<double>(cfg_.rope_theta), (2.0 * i) / hd);
      const float angle = static_cast<float>(pos_) * static_cast<float>(inv_freq);
      const float c = std::cos(angle);
      const float s = std::sin(angle);
      for (int head = 0; head < n; ++head) {
        float* p = v.data() + head * hd;
        const float a = p[i];
        const float b = p[i + half];
        p[i] = a * c - b * s;
        p[i + half] = b * c + a * s;
      }
    }
  }

  void check_shapes() const {
    const std::size_t V = vocab_.size();
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t qd = static_cast<std::size_t>(cfg_.n_heads * cfg_.head_dim);
    const std::size_t kvd = static_cast<std::size_t>(cfg_.n_kv_heads * cfg_.head_dim);
    const std::size_t ff = static_cast<std::size_t>(cfg_.d_ff);
    auto need = [](const std::vector<float>& v, std::size_t n, const std::string& name, bool optional = false) {
      if (optional && v.empty()) return;
      if (v.size() != n) {
        throw AdapterError("tensor " + name + " has " + std::to_string(v.size()) + " values, expected " + std::to_string(n));
      }
    };
    need(w_.embed, V * d, "embed");
    if (w_.layers.size() != static_cast<std::size_t>(cfg_.n_layers)) throw AdapterError("layer count mismatch");
    for (std::size_t l = 0; l < w_.layers.size(); ++l) {
      const auto& L = w_.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      need(L.attn_norm_w, d, p + "attn_norm.w", true);
      need(L.attn_norm_b, d, p + "attn_norm.b", true);
      need(L.wq, qd * d, p + "wq");
      need(L.wk, kvd * d, p + "wk");
      need(L.wv, kvd * d, p + "wv");
      need(L.bq, qd, p + "bq", true);
      need(L.bk, kvd, p + "bk", true);
      need(L.bv, kvd, p + "bv", true);
      // The attention output projection must map n_heads * head_dim to d_model.
      need(L.wo, d * qd, p + "wo");
      need(L.bo, d, p + "bo", true);
      need(L.mlp_norm_w, d, p + "mlp_norm.w", true);
      need(L.mlp_norm_b, d, p + "mlp_norm.b", true);
      if (cfg_.mlp == MlpKind::swiglu) need(L.w_gate, ff * d, p + "w_gate");
      need(L.w_up, ff * d, p + "w_up");
      need(L.b_up, ff, p + "b_up", true);
      need(L.w_down, d * ff, p + "w_down");
      need(L.b_down, d, p + "b_down", true);
    }
    need(w_.final_norm_w, d, "final_norm.w", true);
    need(w_.final_norm_b, d, "final_norm.b", true);
    if (!cfg_.tie_embeddings) need(w_.lm_head, V * d, "lm_head");
  }

  TransformerConfig cfg_;
  Vocabulary vocab_;
  TransformerWeights w_;
  ModelSpec spec_;
  TokenId eos_ = 0;
  int pos_ = 0;
  std::vector<std::vector<float>> k_cache_, v_cache_;
};

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::string norm_name(NormKind k) {
  return k == NormKind::layernorm ? "layernorm" : k == NormKind::rmsnorm ? "rmsnorm" : "none";
}
inline NormKind norm_from(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  if (s == "none") return NormKind::none;
  throw ConfigError("unknown norm kind " + s);
}

}  // namespace detail

inline void TransformerModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::array();
  std::ofstream bin(dir / "model.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw Error("cannot write " + (dir / "model.bin").string());
  std::uint64_t offset = 0;
  auto put = [&](const std::string& name, const std::vector<float>& v) {
    if (v.empty()) return;
    tensors.push_back({{"name", name}, {"offset", offset}, {"count", v.size()}});
    io::write_f32_le(bin, v);
    offset += v.size() * sizeof(float);
  };
  put("embed", w_.embed);
  for (std::size_t l = 0; l < w_.layers.size(); ++l) {
    const auto& L = w_.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    put(p + "attn_norm.w", L.attn_norm_w);
    put(p + "attn_norm.b", L.attn_norm_b);
    put(p + "wq", L.wq);
    put(p + "bq", L.bq);
    put(p + "wk", L.wk);
    put(p + "bk", L.bk);
    put(p + "wv", L.wv);
    put(p + "bv", L.bv);
    put(p + "wo", L.wo);
    put(p + "bo", L.bo);
    put(p + "mlp_norm.w", L.mlp_norm_w);
    put(p + "mlp_norm.b", L.mlp_norm_b);
    put(p + "w_gate", L.w_gate);
    put(p + "w_up", L.w_up);
    put(p + "b_up", L.b_up);
    put(p + "w_down", L.w_down);
    put(p + "b_down", L.b_down);
  }
  put("final_norm.w", w_.final_norm_w);
  put("final_norm.b", w_.final_norm_b);
  put("lm_head", w_.lm_head);

  nlohmann::json vocab = nlohmann::json::array();
  for (const auto& t : vocab_.tokens()) vocab.push_back(io::to_hex(t));
  nlohmann::json j = {
      {"format", "reflctrl-transformer"},
      {"schema_version", 1},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"config",
       {{"model_id", cfg_.model_id},
        {"d_model", cfg_.d_model},
        {"n_layers", cfg_.n_layers},
        {"n_heads", cfg_.n_heads},
        {"n_kv_heads", cfg_.n_kv_heads},
        {"head_dim", cfg_.head_dim},
        {"d_ff", cfg_.d_ff},
        {"norm", detail::norm_name(cfg_.norm)},
        {"norm_eps", cfg_.norm_eps},
        {"mlp", cfg_.mlp == MlpKind::gelu ? "gelu" : "swiglu"},
        {"rope", cfg_.rope},
        {"rope_theta", cfg_.rope_theta},
        {"qkv_bias", cfg_.qkv_bias},
        {"o_bias", cfg_.o_bias},
        {"mlp_bias", cfg_.mlp_bias},
        {"tie_embeddings", cfg_.tie_embeddings},
        {"end_of_think_marker", cfg_.end_of_think_marker},
        {"step_delimiter", cfg_.step_delimiter},
        {"eos_text", cfg_.eos_text},
        {"chat_prefix", cfg_.chat_prefix},
        {"chat_suffix", cfg_.chat_suffix}}},
      {"vocab_hex", vocab},
      {"tensors", tensors}};
  std::ofstream js(dir / "model.json", std::ios::trunc);
  js << j.dump(1) << '\n';
}

inline TransformerModel TransformerModel::load(const std::filesystem::path& dir) {
  std::ifstream js(dir / "model.json");
  if (!js) throw AdapterError("cannot open " + (dir / "model.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("model.json: " + std::string(e.what()));
  }
  if (j.value("format", "") != "reflctrl-transformer" || j.value("dtype", "") != "float32") {
    throw CorruptionError("model.json is not a float32 reflctrl-transformer container");
  }
  const auto& c = j.at("config");
  TransformerConfig cfg;
  cfg.model_id = c.at("model_id").get<std::string>();
  cfg.d_model = c.at("d_model").get<int>();
  cfg.n_layers = c.at("n_layers").get<int>();
  cfg.n_heads = c.at("n_heads").get<int>();
  cfg.n_kv_heads = c.at("n_kv_heads").get<int>();
  cfg.head_dim = c.at("head_dim").get<int>();
  cfg.d_ff = c.at("d_ff").get<int>();
  cfg.norm = detail::norm_from(c.at("norm").get<std::string>());
  cfg.norm_eps = c.at("norm_eps").get<float>();
  cfg.mlp = c.at("mlp").get<std::string>() == "swiglu" ? MlpKind::swiglu : MlpKind::gelu;
  cfg.rope = c.at("rope").get<bool>();
  cfg.rope_theta = c.at("rope_theta").get<float>();
  cfg.qkv_bias = c.at("qkv_bias").get<bool>();
  cfg.o_bias = c.at("o_bias").get<bool>();
  cfg.mlp_bias = c.at("mlp_bias").get<bool>();
  cfg.tie_embeddings = c.at("tie_embeddings").get<bool>();
  cfg.end_of_think_marker = c.at("end_of_think_marker").get<std::string>();
  cfg.step_delimiter = c.at("step_delimiter").get<std::string>();
  cfg.eos_text = c.at("eos_text").get<std::string>();
  cfg.chat_prefix = c.at("chat_prefix").get<std::string>();
  cfg.chat_suffix = c.at("chat_suffix").get<std::string>();

  std::vector<std::string> vocab;
  for (const auto& h : j.at("vocab_hex")) vocab.push_back(io::from_hex(h.get<std::string>()));

  std::ifstream bin(dir / "model.bin", std::ios::binary);
  if (!bin) throw AdapterError("cannot open " + (dir / "model.bin").string());
  std::map<std::string, std::vector<float>> tensors;
  for (const auto& t : j.at("tensors")) {
    bin.seekg(static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    tensors[t.at("name").get<std::string>()] = io::read_f32_le(bin, t.at("count").get<std::size_t>());
  }
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    return it == tensors.end() ? std::vector<float>{} : std::move(it->second);
  };
  TransformerWeights w;
  w.embed = take("embed");
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    TransformerLayerWeights L;
    L.attn_norm_w = take(p + "attn_norm.w");
    L.attn_norm_b = take(p + "attn_norm.b");
    L.wq = take(p + "wq");
    L.bq = take(p + "bq");
    L.wk = take(p + "wk");
    L.bk = take(p + "bk");
    L.wv = take(p + "wv");
    L.bv = take(p + "bv");
    L.wo = take(p + "wo");
    L.bo = take(p + "bo");
    L.mlp_norm_w = take(p + "mlp_norm.w");
    L.mlp_norm_b = take(p + "mlp_norm.b");
    L.w_gate = take(p + "w_gate");
    L.w_up = take(p + "w_up");
    L.b_up = take(p + "b_up");
    L.w_down = take(p + "w_down");
    L.b_down = take(p + "b_down");
    w.layers.push_back(std::move(L));
  }
  w.final_norm_w = take("final_norm.w");
  w.final_norm_b = take("final_norm.b");
  w.lm_head = take("lm_head");
  return TransformerModel(std::move(cfg), Vocabulary(std::move(vocab)), std::move(w));
}

}  // namespace reflctrl
