#pragma once

// Reflection directions: for each (layer, site), the mean block output at the
// first token of reflection steps minus the mean at the first token of
// non-reflection steps. Also per-head attribution of the attention output
// onto the direction, and summary statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/core_types.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/model/activation_record.hpp"

namespace reflctrl {

struct LayerSite {
  int layer = 0;
  Site site = Site::attn;
  friend auto operator<=>(const LayerSite&, const LayerSite&) = default;
};

inline std::vector<LayerSite> all_layer_sites(int n_layers, const std::vector<Site>& sites = {Site::attn, Site::mlp}) {
  std::vector<LayerSite> out;
  for (Site s : sites) {
    for (int l = 0; l < n_layers; ++l) out.push_back({l, s});
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct DirectionSet {
  std::string model_id;
  int n_layers = 0;
  int d_model = 0;
  std::map<LayerSite, std::vector<float>> directions;  // raw, not normalized
  std::int64_t n_reflection = 0;
  std::int64_t n_non_reflection = 0;
  std::string corpus_hash;
  std::string keyword_config_hash;
  std::string config_hash;

  bool contains(int layer, Site site) const { return directions.contains({layer, site}); }

  const std::vector<float>& at(int layer, Site site) const {
    auto it = directions.find({layer, site});
    if (it == directions.end()) {
      throw NotFoundError("no direction for layer " + std::to_string(layer) + " " + std::string(to_string(site)));
    }
    return it->second;
  }

  void validate() const {
    if (model_id.empty()) throw ValidationError("model_id", "direction set has no model_id");
    if (n_reflection < 1 || n_non_reflection < 1) throw ValidationError("counts", "both step counts must be >= 1");
    for (const auto& [ls, v] : directions) {
      if (ls.layer < 0 || ls.layer >= n_layers) throw ValidationError("directions", "layer out of range");
      if (v.size() != static_cast<std::size_t>(d_model)) throw ValidationError("directions", "vector length != d_model");
    }
  }

  friend bool operator==(const DirectionSet&, const DirectionSet&) = default;
};

struct DirectionMeta {
  std::string model_id;
  int n_layers = 0;
  int d_model = 0;
  std::string corpus_hash;
  std::string keyword_config_hash;
  std::string config_hash;
};

// Running (sum, count) per (layer, site) and class, in 64-bit floats. Partial
// accumulators over disjoint record partitions merge into the same result.
class DirectionAccumulator {
 public:
  explicit DirectionAccumulator(int d_model) : d_model_(d_model) {
    if (d_model <= 0) throw ConfigError("d_model must be positive");
  }

  void add(const LayerSite& ls, std::span<const float> v, bool reflection) {
    if (v.size() != static_cast<std::size_t>(d_model_)) {
      throw ValidationError("vector", "record length " + std::to_string(v.size()) + " != d_model " +
                                          std::to_string(d_model_));
    }
    auto& cell = cells_[ls];
    auto& sum = reflection ? cell.sum_r : cell.sum_nr;
    if (sum.empty()) sum.assign(static_cast<std::size_t>(d_model_), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) sum[i] += static_cast<double>(v[i]);
    ++(reflection ? cell.n_r : cell.n_nr);
  }

  void merge(const DirectionAccumulator& other) {
    if (other.d_model_ != d_model_) throw ValidationError("d_model", "cannot merge accumulators of different width");
    for (const auto& [ls, c] : other.cells_) {
      auto& mine = cells_[ls];
      auto add_into = [](std::vector<double>& dst, const std::vector<double>& src) {
        if (src.empty()) return;
        if (dst.empty()) dst.assign(src.size(), 0.0);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
      };
      add_into(mine.sum_r, c.sum_r);
      add_into(mine.sum_nr, c.sum_nr);
      mine.n_r += c.n_r;
      mine.n_nr += c.n_nr;
    }
  }

  DirectionSet finish(const DirectionMeta& meta) const {
    if (cells_.empty()) throw ExtractionError("no activations were accumulated");
    DirectionSet out;
    out.model_id = meta.model_id;
    out.n_layers = meta.n_layers;
    out.d_model = d_model_;
    out.corpus_hash = meta.corpus_hash;
    out.keyword_config_hash = meta.keyword_config_hash;
    out.config_hash = meta.config_hash;
    std::optional<std::pair<std::int64_t, std::int64_t>> counts;
    for (const auto& [ls, c] : cells_) {
      if (c.n_r == 0) throw ExtractionError("reflection step set is empty");
      if (c.n_nr == 0) throw ExtractionError("non-reflection step set is empty");
      if (!counts) counts = {c.n_r, c.n_nr};
      if (*counts != std::pair{c.n_r, c.n_nr}) {
        throw CoverageError("layer " + std::to_string(ls.layer) + " " + std::string(to_string(ls.site)) +
                            " has a different number of records than other layer/site pairs");
      }
      std::vector<float> d(static_cast<std::size_t>(d_model_));
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = static_cast<float>(c.sum_r[i] / static_cast<double>(c.n_r) - c.sum_nr[i] / static_cast<double>(c.n_nr));
      }
      out.directions.emplace(ls, std::move(d));
    }
    out.n_reflection = counts->first;
    out.n_non_reflection = counts->second;
    return out;
  }

 private:
  struct Cell {
    std::vector<double> sum_r, sum_nr;
    std::int64_t n_r = 0, n_nr = 0;
  };
  int d_model_;
  std::map<LayerSite, Cell> cells_;
};

// Where each step of a corpus starts, and whether it is a final step.
struct StepLocation {
  std::int64_t first_token_index = 0;
  bool is_final_step = false;
};
using StepLocator = std::map<StepRef, StepLocation>;

inline StepLocator locate_steps(const std::vector<ReasoningTrace>& traces) {
  StepLocator out;
  for (const auto& t : traces) {
    for (const auto& s : t.steps) out[{t.trace_id, s.step_index}] = {s.first_token_index, s.is_final_step};
  }
  return out;
}

namespace detail {

inline void check_labels(const LabeledStepSet& labels, const StepLocator& where) {
  for (const auto& r : labels.reflection_steps) {
    if (labels.non_reflection_steps.contains(r)) {
      throw ExtractionError("step " + r.trace_id + "#" + std::to_string(r.step_index) + " is in both R and NR");
    }
  }
  for (const auto* set : {&labels.reflection_steps, &labels.non_reflection_steps}) {
    for (const auto& r : *set) {
      auto it = where.find(r);
      if (it == where.end()) {
        throw CoverageError("labeled step " + r.trace_id + "#" + std::to_string(r.step_index) + " is not in the corpus");
      }
      if (it->second.is_final_step) {
        throw ExtractionError("final step " + r.trace_id + "#" + std::to_string(r.step_index) + " must not be labeled");
      }
    }
  }
}

}  // namespace detail

// Adds the records belonging to labeled steps to `acc`. Every labeled step in
// `only_traces` (all labeled steps when empty) must have a record for every
// pair in `required`.
inline void accumulate_step_records(DirectionAccumulator& acc, const std::vector<ActivationRecord>& records,
                                    const LabeledStepSet& labels, const StepLocator& where,
                                    const std::vector<LayerSite>& required,
                                    const std::set<std::string>& only_traces = {}) {
  detail::check_labels(labels, where);
  std::map<ActivationKey, const ActivationRecord*> by_key;
  for (const auto& r : records) by_key[key_of(r)] = &r;
  std::vector<std::string> gaps;
  std::size_t n_gaps = 0;
  for (bool reflection : {true, false}) {
    for (const auto& ref : reflection ? labels.reflection_steps : labels.non_reflection_steps) {
      if (!only_traces.empty() && !only_traces.contains(ref.trace_id)) continue;
      const auto tok = where.at(ref).first_token_index;
      for (const auto& ls : required) {
        auto it = by_key.find({ref.trace_id, tok, ls.layer, ls.site});
        if (it == by_key.end()) {
          if (++n_gaps <= 5) {
            gaps.push_back(ref.trace_id + "#" + std::to_string(ref.step_index) + " (token " + std::to_string(tok) +
                           ", layer " + std::to_string(ls.layer) + ", " + std::string(to_string(ls.site)) + ")");
          }
          continue;
        }
        acc.add(ls, it->second->vector, reflection);
      }
    }
  }
  if (n_gaps > 0) {
    std::string msg = std::to_string(n_gaps) + " missing activation record(s):";
    for (const auto& g : gaps) msg += " " + g;
    if (n_gaps > gaps.size()) msg += " ...";
    throw CoverageError(msg);
  }
}

inline DirectionSet extract_direction(const std::vector<ActivationRecord>& records, const LabeledStepSet& labels,
                                      const StepLocator& where, const std::vector<LayerSite>& required,
                                      DirectionMeta meta) {
  if (labels.reflection_steps.empty()) throw ExtractionError("reflection step set is empty");
  if (labels.non_reflection_steps.empty()) throw ExtractionError("non-reflection step set is empty");
  if (required.empty()) throw ConfigError("no (layer, site) pairs requested");
  if (meta.d_model <= 0) {
    if (records.empty()) throw CoverageError("no activation records");
    meta.d_model = static_cast<int>(records.front().vector.size());
  }
  if (meta.keyword_config_hash.empty()) meta.keyword_config_hash = labels.keyword_config_hash;
  DirectionAccumulator acc(meta.d_model);
  accumulate_step_records(acc, records, labels, where, required);
  return acc.finish(meta);
}

// ---------------------------------------------------------------------------
// Head attribution

class HeadMeanAccumulator {
 public:
  HeadMeanAccumulator(int n_layers, int n_heads, int d_model) : n_layers_(n_layers), n_heads_(n_heads), d_model_(d_model) {
    sums_.assign(static_cast<std::size_t>(n_layers * n_heads), std::vector<double>(static_cast<std::size_t>(d_model), 0.0));
    counts_.assign(static_cast<std::size_t>(n_layers * n_heads), 0);
  }

  void add(const HeadActivationRecord& r) {
    if (r.layer < 0 || r.layer >= n_layers_ || r.head < 0 || r.head >= n_heads_) {
      throw ValidationError("head", "head record outside the model's layer/head range");
    }
    if (r.vector.size() != static_cast<std::size_t>(d_model_)) throw ValidationError("vector", "head vector length != d_model");
    auto& s = sums_[idx(r.layer, r.head)];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += static_cast<double>(r.vector[i]);
    ++counts_[idx(r.layer, r.head)];
  }

  void merge(const HeadMeanAccumulator& o) {
    if (o.n_layers_ != n_layers_ || o.n_heads_ != n_heads_ || o.d_model_ != d_model_) {
      throw ValidationError("shape", "cannot merge head accumulators of different shape");
    }
    for (std::size_t k = 0; k < sums_.size(); ++k) {
      for (std::size_t i = 0; i < sums_[k].size(); ++i) sums_[k][i] += o.sums_[k][i];
      counts_[k] += o.counts_[k];
    }
  }

  std::vector<double> mean(int layer, int head) const {
    const auto k = idx(layer, head);
    if (counts_[k] == 0) {
      throw CoverageError("no head outputs for layer " + std::to_string(layer) + " head " + std::to_string(head));
    }
    std::vector<double> m = sums_[k];
    for (auto& x : m) x /= static_cast<double>(counts_[k]);
    return m;
  }

  int n_layers() const noexcept { return n_layers_; }
  int n_heads() const noexcept { return n_heads_; }
  std::int64_t count(int layer, int head) const { return counts_[idx(layer, head)]; }

 private:
  std::size_t idx(int l, int h) const { return static_cast<std::size_t>(l * n_heads_ + h); }
  int n_layers_, n_heads_, d_model_;
  std::vector<std::vector<double>> sums_;
  std::vector<std::int64_t> counts_;
};

struct HeadAttribution {
  std::string model_id;
  int n_layers = 0;
  int n_heads = 0;
  // rows[l] is empty when the layer's attention direction has zero norm.
  std::vector<std::optional<std::vector<double>>> rows;

  std::optional<double> at(int layer, int head) const {
    const auto& r = rows.at(static_cast<std::size_t>(layer));
    if (!r) return std::nullopt;
    return r->at(static_cast<std::size_t>(head));
  }

  // Layer with the largest mean |projection| over its heads.
  std::optional<int> strongest_layer() const {
    std::optional<int> best;
    double best_v = -1.0;
    for (int l = 0; l < n_layers; ++l) {
      if (!rows[static_cast<std::size_t>(l)]) continue;
      double m = 0.0;
      for (double x : *rows[static_cast<std::size_t>(l)]) m += std::abs(x);
      m /= static_cast<double>(n_heads);
      if (m > best_v) {
        best_v = m;
        best = l;
      }
    }
    return best;
  }
};

// Entry (l, h): scalar projection of the mean embedded head output onto the
// unit attention direction of layer l.
inline HeadAttribution head_attribution(const HeadMeanAccumulator& means, const DirectionSet& dirs) {
  HeadAttribution out;
  out.model_id = dirs.model_id;
  out.n_layers = means.n_layers();
  out.n_heads = means.n_heads();
  if (dirs.n_layers != means.n_layers()) throw ValidationError("n_layers", "direction set and head means disagree on depth");
  out.rows.resize(static_cast<std::size_t>(out.n_layers));
  for (int l = 0; l < out.n_layers; ++l) {
    const auto& d = dirs.at(l, Site::attn);
    double n2 = 0.0;
    for (float x : d) n2 += static_cast<double>(x) * x;
    if (n2 == 0.0) continue;
    const double inv = 1.0 / std::sqrt(n2);
    std::vector<double> row(static_cast<std::size_t>(out.n_heads));
    for (int h = 0; h < out.n_heads; ++h) {
      const auto m = means.mean(l, h);
      if (m.size() != d.size()) throw ValidationError("d_model", "head output width != direction width");
      double dot = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i) dot += m[i] * static_cast<double>(d[i]) * inv;
      row[static_cast<std::size_t>(h)] = dot;
    }
    out.rows[static_cast<std::size_t>(l)] = std::move(row);
  }
  return out;
}

// A non-empty config_hash adds a trailing column carrying it.
inline std::string head_attribution_csv(const HeadAttribution& a, const std::string& config_hash = "") {
  std::ostringstream out;
  out.precision(9);
  out << "layer";
  for (int h = 0; h < a.n_heads; ++h) out << ",head_" << h;
  if (!config_hash.empty()) out << ",config_hash";
  out << '\n';
  for (int l = 0; l < a.n_layers; ++l) {
    out << l;
    for (int h = 0; h < a.n_heads; ++h) {
      out << ',';
      if (auto v = a.at(l, h)) out << *v;
      else out << "undefined";
    }
    if (!config_hash.empty()) out << ',' << config_hash;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Statistics

struct DirectionStats {
  std::map<LayerSite, double> norms;
  // cosine[site][i][j] between layers i and j; empty when either norm is zero.
  std::map<Site, std::vector<std::vector<std::optional<double>>>> cross_layer_cosine;
};

inline double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

inline std::optional<double> cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ValidationError("vector", "cosine of vectors with different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline DirectionStats direction_stats(const DirectionSet& dirs) {
  if (dirs.directions.empty()) throw ValidationError("directions", "empty direction set");
  DirectionStats out;
  for (const auto& [ls, v] : dirs.directions) out.norms[ls] = l2_norm(v);
  for (Site s : {Site::attn, Site::mlp}) {
    std::vector<int> layers;
    for (const auto& [ls, _] : dirs.directions) {
      if (ls.site == s) layers.push_back(ls.layer);
    }
    if (layers.empty()) continue;
    const auto n = static_cast<std::size_t>(dirs.n_layers);
    std::vector<std::vector<std::optional<double>>> m(n, std::vector<std::optional<double>>(n));
    for (int i : layers) {
      for (int j : layers) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = cosine(dirs.at(i, s), dirs.at(j, s));
    }
    out.cross_layer_cosine[s] = std::move(m);
  }
  return out;
}

inline std::string direction_stats_csv(const DirectionStats& st, const std::string& config_hash = "") {
  std::ostringstream out;
  out.precision(9);
  out << "layer,site,norm,cosine_with_next_layer" << (config_hash.empty() ? "" : ",config_hash") << '\n';
  for (const auto& [ls, norm] : st.norms) {
    out << ls.layer << ',' << to_string(ls.site) << ',' << norm << ',';
    const auto& m = st.cross_layer_cosine.at(ls.site);
    const auto next = static_cast<std::size_t>(ls.layer) + 1;
    if (next < m.size() && m[static_cast<std::size_t>(ls.layer)][next]) out << *m[static_cast<std::size_t>(ls.layer)][next];
    if (!config_hash.empty()) out << ',' << config_hash;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Persistence: `<base>.bin` (float32 little-endian payload) + `<base>.json`.

inline constexpr int kDirectionSetSchema = 1;

inline void save_direction_set(const DirectionSet& dirs, const std::filesystem::path& base) {
  dirs.validate();
  auto bin = base, side = base;
  bin += ".bin";
  side += ".json";
  std::ostringstream payload;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t off = 0;
  for (const auto& [ls, v] : dirs.directions) {
    io::write_f32_le(payload, v);
    entries.push_back({{"layer", ls.layer}, {"site", to_string(ls.site)}, {"offset", off}});
    off += v.size() * 4;
  }
  io::atomic_write(bin, payload.str());
  nlohmann::json j = {{"schema_version", kDirectionSetSchema},
                      {"kind", "direction_set"},
                      {"model_id", dirs.model_id},
                      {"n_layers", dirs.n_layers},
                      {"d_model", dirs.d_model},
                      {"dtype", "float32"},
                      {"endianness", "little"},
                      {"normalized", false},
                      {"counts", {{"reflection", dirs.n_reflection}, {"non_reflection", dirs.n_non_reflection}}},
                      {"corpus_hash", dirs.corpus_hash},
                      {"keyword_config_hash", dirs.keyword_config_hash},
                      {"config_hash", dirs.config_hash},
                      {"entries", entries}};
  io::atomic_write(side, j.dump(2));
}

inline DirectionSet load_direction_set(const std::filesystem::path& base) {
  auto bin = base, side = base;
  bin += ".bin";
  side += ".json";
  if (!std::filesystem::exists(side)) throw NotFoundError("no direction set at " + base.string());
  DirectionSet d;
  try {
    const auto j = nlohmann::json::parse(io::read_file(side));
    if (j.at("schema_version").get<int>() != kDirectionSetSchema || j.at("kind") != "direction_set") {
      throw CorruptionError("not a direction set sidecar: " + side.string());
    }
    if (j.at("dtype") != "float32" || j.at("endianness") != "little") throw CorruptionError("unsupported payload encoding");
    d.model_id = j.at("model_id").get<std::string>();
    d.n_layers = j.at("n_layers").get<int>();
    d.d_model = j.at("d_model").get<int>();
    d.n_reflection = j.at("counts").at("reflection").get<std::int64_t>();
    d.n_non_reflection = j.at("counts").at("non_reflection").get<std::int64_t>();
    d.corpus_hash = j.at("corpus_hash").get<std::string>();
    d.keyword_config_hash = j.at("keyword_config_hash").get<std::string>();
    d.config_hash = j.value("config_hash", "");
    std::ifstream in(bin, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + bin.string());
    const auto size = std::filesystem::file_size(bin);
    for (const auto& e : j.at("entries")) {
      const auto off = e.at("offset").get<std::uint64_t>();
      if (off + static_cast<std::uint64_t>(d.d_model) * 4 > size) throw CorruptionError("direction entry past end of payload");
      in.seekg(static_cast<std::streamoff>(off));
      d.directions[{e.at("layer").get<int>(), site_from_string(e.at("site").get<std::string>())}] =
          io::read_f32_le(in, static_cast<std::size_t>(d.d_model));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("malformed direction sidecar " + side.string() + ": " + e.what());
  }
  d.validate();
  return d;
}

}  // namespace reflctrl
