#pragma once

// Subcommand implementations. Each stage writes into <output_dir>/<stage>/
// and finishes with a manifest.json carrying the config hash and the SHA-256
// of every artifact it produced. Later stages refuse inputs whose manifest
// hash differs from the current config.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/activation_store.hpp"
#include "reflctrl/config.hpp"
#include "reflctrl/direction_lab.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/eval/analytics.hpp"
#include "reflctrl/eval/dataset.hpp"
#include "reflctrl/eval/sweep.hpp"
#include "reflctrl/hash.hpp"
#include "reflctrl/io.hpp"
#include "reflctrl/model/generate.hpp"
#include "reflctrl/reflection_labeler.hpp"
#include "reflctrl/report/svg.hpp"
#include "reflctrl/steering.hpp"
#include "reflctrl/uncertainty_probe.hpp"

namespace reflctrl::pipeline {

namespace fs = std::filesystem;

class Context {
 public:
  Context(RunConfig cfg, std::optional<fs::path> out_override = std::nullopt, bool quiet = false)
      : cfg_(std::move(cfg)), quiet_(quiet) {
    cfg_.validate();
    if (cfg_.model.kind == "mock") cfg_.steering.validate(cfg_.model.mock.n_layers);
    hash_ = cfg_.hash();
    keywords_ = cfg_.keywords();
    out_ = out_override ? fs::absolute(*out_override).lexically_normal() : cfg_.resolve(cfg_.output_dir);
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const std::string& config_hash() const noexcept { return hash_; }
  const KeywordConfig& keywords() const noexcept { return keywords_; }
  fs::path stage_dir(std::string_view stage) const { return out_ / std::string(stage); }
  const fs::path& output_dir() const noexcept { return out_; }

  CausalLM& model() {
    if (!model_) {
      model_ = load_model(cfg_);
      cfg_.steering.validate(model_->spec().n_layers);
    }
    return *model_;
  }

  void log(const std::string& msg) const {
    if (!quiet_) std::cerr << msg << '\n';
  }

  RunSettings run_settings(int n_samples) const {
    RunSettings rs;
    rs.decode = cfg_.decode;
    rs.run_seed = cfg_.run_seed;
    rs.n_samples = n_samples;
    rs.keywords = keywords_;
    rs.segmentation = cfg_.segmentation;
    rs.config_hash = hash_;
    return rs;
  }

  std::vector<EvalItem> items(const DatasetRef& ref) const {
    auto all = load_dataset(cfg_.resolve(cfg_.data_root), ref.id, ref.split);
    if (ref.n_questions > 0 && static_cast<std::size_t>(ref.n_questions) < all.size()) {
      all.resize(static_cast<std::size_t>(ref.n_questions));
    }
    return all;
  }

 private:
  RunConfig cfg_;
  std::string hash_;
  KeywordConfig keywords_;
  fs::path out_;
  bool quiet_;
  std::unique_ptr<CausalLM> model_;
};

// ---------------------------------------------------------------------------
// Manifests

inline constexpr std::string_view kManifest = "manifest.json";

inline void write_text(const fs::path& path, std::string_view text) { io::atomic_write(path, text); }

inline void write_manifest(Context& ctx, std::string_view stage, const std::vector<std::string>& artifacts,
                           nlohmann::json extra = nlohmann::json::object()) {
  const auto dir = ctx.stage_dir(stage);
  nlohmann::json files = nlohmann::json::object();
  for (const auto& a : artifacts) files[a] = sha256_hex(io::read_file(dir / a));
  nlohmann::json m = {{"stage", stage},
                      {"config_hash", ctx.config_hash()},
                      {"model_id", ctx.model().spec().model_id},
                      {"artifacts", files},
                      {"details", std::move(extra)}};
  write_text(dir / kManifest, m.dump(2) + "\n");
}

inline std::optional<nlohmann::json> read_manifest(const Context& ctx, std::string_view stage) {
  const auto p = ctx.stage_dir(stage) / kManifest;
  if (!fs::exists(p)) return std::nullopt;
  auto j = nlohmann::json::parse(io::read_file(p), nullptr, false);
  if (j.is_discarded()) throw CorruptionError("manifest is not valid JSON: " + p.string());
  return j;
}

// Manifest of a finished prerequisite stage produced under the current config.
inline nlohmann::json require_stage(const Context& ctx, std::string_view stage, std::string_view command) {
  auto m = read_manifest(ctx, stage);
  if (!m) {
    throw NotFoundError("missing " + std::string(stage) + " artifacts in " + ctx.stage_dir(stage).string() +
                        "; run `reflctrl " + std::string(command) + " --config <same config>` first");
  }
  const auto h = m->value("config_hash", std::string());
  if (h != ctx.config_hash()) {
    throw RefusalError(std::string(stage) + " artifacts were produced with config hash " + h +
                       " but the current config hashes to " + ctx.config_hash() + "; re-run `reflctrl " +
                       std::string(command) + "`");
  }
  return *m;
}

// ---------------------------------------------------------------------------
// generate

inline constexpr std::string_view kBaseCondition = "base";

inline void cmd_generate(Context& ctx, bool store_activations = false) {
  auto& model = ctx.model();
  const auto items = ctx.items(ctx.config().extract_data);
  auto rs = ctx.run_settings(ctx.config().extract_samples);
  rs.progress = [&](std::size_t d, std::size_t n) {
    if (d % 25 == 0 || d == n) ctx.log("[generate] " + std::to_string(d) + "/" + std::to_string(n));
  };
  Condition base;
  base.name = std::string(kBaseCondition);
  const auto dir = ctx.stage_dir("generate");
  auto run = run_condition(model, nullptr, items, base, rs, dir);

  std::vector<std::string> artifacts{"base.traces.jsonl", "base.events.jsonl"};
  std::size_t truncated = 0;
  for (const auto& t : run.traces) truncated += t.truncated() ? 1 : 0;
  if (store_activations) {
    const int L = model.spec().n_layers;
    std::vector<int> layers(static_cast<std::size_t>(L));
    std::iota(layers.begin(), layers.end(), 0);
    ActivationStoreWriter w(dir / "activations", model.spec().d_model);
    for (const auto& t : run.traces) {
      if (t.truncated() || t.steps.empty()) continue;
      if (w.contains({t.trace_id, t.steps.back().first_token_index, L - 1, Site::mlp})) continue;
      w.write(capture_step_start_activations(model, t, {Site::attn, Site::mlp}, layers));
    }
    w.flush();
    artifacts.push_back("activations.json");
    artifacts.push_back("activations.bin");
  }
  write_manifest(ctx, "generate", artifacts,
                 {{"n_traces", run.traces.size()}, {"n_truncated", truncated}, {"dataset", ctx.config().extract_data.to_json()}});
  ctx.log("[generate] " + std::to_string(run.traces.size()) + " traces in " + dir.string());
}

// ---------------------------------------------------------------------------
// label

inline void cmd_label(Context& ctx) {
  require_stage(ctx, "generate", "generate");
  auto traces = read_trace_corpus(ctx.stage_dir("generate") / "base.traces.jsonl");
  const auto labels = label_corpus(traces, ctx.keywords());
  const auto dir = ctx.stage_dir("label");
  write_trace_corpus(dir / "traces.jsonl", traces);
  write_text(dir / "labels.json", labeled_step_set_to_json(labels).dump() + "\n");
  std::ostringstream csv;
  csv << "trace_id,n_steps,n_reflection_steps,reflection_rate,truncated,config_hash\n";
  for (const auto& t : traces) {
    csv << t.trace_id << ',' << t.steps.size() << ',' << count_reflection_steps(t) << ','
        << (t.steps.empty() ? std::string() : format_number(reflection_rate(t))) << ',' << (t.truncated() ? 1 : 0) << ','
        << ctx.config_hash() << '\n';
  }
  write_text(dir / "label_stats.csv", csv.str());
  write_manifest(ctx, "label", {"traces.jsonl", "labels.json", "label_stats.csv"},
                 {{"n_reflection_steps", labels.reflection_steps.size()},
                  {"n_non_reflection_steps", labels.non_reflection_steps.size()},
                  {"keyword_config_hash", labels.keyword_config_hash}});
  ctx.log("[label] R=" + std::to_string(labels.reflection_steps.size()) +
          " NR=" + std::to_string(labels.non_reflection_steps.size()));
}

struct LabeledCorpus {
  std::vector<ReasoningTrace> traces;
  LabeledStepSet labels;
};

inline LabeledCorpus load_labeled(const Context& ctx) {
  require_stage(ctx, "label", "label");
  LabeledCorpus c;
  c.traces = read_trace_corpus(ctx.stage_dir("label") / "traces.jsonl");
  c.labels = labeled_step_set_from_json(nlohmann::json::parse(io::read_file(ctx.stage_dir("label") / "labels.json")));
  if (c.labels.keyword_config_hash != ctx.keywords().hash()) {
    throw RefusalError("labels were produced with a different keyword configuration; re-run `reflctrl label`");
  }
  return c;
}

// Labeled step indices (R and NR) of one trace.
inline std::vector<int> labeled_steps_of(const LabeledStepSet& labels, const std::string& trace_id) {
  std::vector<int> out;
  for (const auto* set : {&labels.reflection_steps, &labels.non_reflection_steps}) {
    for (auto it = set->lower_bound({trace_id, INT32_MIN}); it != set->end() && it->trace_id == trace_id; ++it) {
      out.push_back(it->step_index);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline LabeledStepSet labels_of(const LabeledStepSet& labels, const std::string& trace_id) {
  LabeledStepSet out;
  out.keyword_config_hash = labels.keyword_config_hash;
  for (auto it = labels.reflection_steps.lower_bound({trace_id, INT32_MIN});
       it != labels.reflection_steps.end() && it->trace_id == trace_id; ++it) {
    out.reflection_steps.insert(*it);
  }
  for (auto it = labels.non_reflection_steps.lower_bound({trace_id, INT32_MIN});
       it != labels.non_reflection_steps.end() && it->trace_id == trace_id; ++it) {
    out.non_reflection_steps.insert(*it);
  }
  return out;
}

// ---------------------------------------------------------------------------
// extract

inline void cmd_extract(Context& ctx) {
  auto& model = ctx.model();
  const auto corpus = load_labeled(ctx);
  if (corpus.labels.reflection_steps.empty()) {
    throw ExtractionError("the labeled corpus has no reflection steps; a direction needs at least one");
  }
  if (corpus.labels.non_reflection_steps.empty()) {
    throw ExtractionError("the labeled corpus has no non-reflection steps; a direction needs at least one");
  }
  const auto& spec = model.spec();
  const auto required = all_layer_sites(spec.n_layers);
  std::vector<int> layers(static_cast<std::size_t>(spec.n_layers));
  std::iota(layers.begin(), layers.end(), 0);

  const auto store_base = ctx.stage_dir("generate") / "activations";
  std::optional<ActivationStoreReader> store;
  if (fs::exists(StorePaths::of(store_base).sidecar)) store.emplace(store_base, spec.d_model);

  DirectionAccumulator acc(spec.d_model);
  std::size_t done = 0;
  for (const auto& t : corpus.traces) {
    const auto steps = labeled_steps_of(corpus.labels, t.trace_id);
    if (steps.empty()) continue;
    std::vector<ActivationRecord> recs;
    if (store) {
      for (int s : steps) {
        for (const auto& ls : required) {
          recs.push_back(store->read({t.trace_id, t.steps.at(static_cast<std::size_t>(s)).first_token_index, ls.layer, ls.site}));
        }
      }
    } else {
      recs = capture_step_start_activations(model, t, {Site::attn, Site::mlp}, layers, steps);
    }
    accumulate_step_records(acc, recs, labels_of(corpus.labels, t.trace_id), locate_steps({t}), required);
    if (++done % 25 == 0) ctx.log("[extract] " + std::to_string(done) + " traces");
  }
  const auto dir = ctx.stage_dir("extract");
  DirectionMeta meta{spec.model_id, spec.n_layers, spec.d_model,
                     sha256_hex(io::read_file(ctx.stage_dir("label") / "traces.jsonl")),
                     corpus.labels.keyword_config_hash, ctx.config_hash()};
  const auto dirs = acc.finish(meta);
  save_direction_set(dirs, dir / "directions");
  write_text(dir / "direction_stats.csv", direction_stats_csv(direction_stats(dirs), ctx.config_hash()));
  write_manifest(ctx, "extract", {"directions.json", "directions.bin", "direction_stats.csv"},
                 {{"n_reflection", dirs.n_reflection},
                  {"n_non_reflection", dirs.n_non_reflection},
                  {"source", store ? "activation_store" : "teacher_forced_recapture"}});
  ctx.log("[extract] directions from |R|=" + std::to_string(dirs.n_reflection) +
          " |NR|=" + std::to_string(dirs.n_non_reflection));
}

inline DirectionSet load_directions(const Context& ctx) {
  require_stage(ctx, "extract", "extract");
  return load_direction_set(ctx.stage_dir("extract") / "directions");
}

// ---------------------------------------------------------------------------
// steer

struct SteerOptions {
  std::optional<double> lambda;
  std::optional<SteeringMode> mode;
  std::optional<std::string> dataset;
  std::optional<std::string> split;
  std::optional<int> n_questions;
  std::optional<int> n_samples;
};

inline SweepRow cmd_steer(Context& ctx, const SteerOptions& opt = {}) {
  auto& model = ctx.model();
  const auto dirs = load_directions(ctx);
  SteeringConfig sc = ctx.config().steering;
  if (opt.lambda) sc.lambda = *opt.lambda;
  if (opt.mode) sc.mode = *opt.mode;
  DatasetRef ref = ctx.config().eval_data;
  if (opt.dataset) ref.id = *opt.dataset;
  if (opt.split) ref.split = *opt.split;
  if (opt.n_questions) ref.n_questions = *opt.n_questions;
  auto cond = steering_condition(sc.mode, sc.lambda, sc.mask, sc.sites);
  cond.steering.inject_at_think_start = sc.inject_at_think_start;
  auto rs = ctx.run_settings(opt.n_samples.value_or(ctx.config().sweep.n_samples));
  const auto dir = ctx.stage_dir("steer");
  auto run = run_condition(model, &dirs, ctx.items(ref), cond, rs, dir);
  const auto row = aggregate(cond, run.traces);
  const auto summary = cond.name + ".summary.csv";
  write_text(dir / summary, sweep_csv_header() + sweep_csv_row(row, ctx.config_hash()));
  std::vector<std::string> artifacts;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name != kManifest && !name.ends_with(".tmp")) artifacts.push_back(name);
  }
  std::sort(artifacts.begin(), artifacts.end());
  write_manifest(ctx, "steer", artifacts, {{"last_condition", cond.to_json()}, {"dataset", ref.to_json()}});
  ctx.log("[steer] " + cond.name + ": accuracy " + format_number(row.accuracy, 4) + ", mean thinking tokens " +
          format_number(row.mean_thinking_tokens, 1));
  return row;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepConditions {
  std::vector<Condition> main;      // modes x lambdas
  std::optional<Condition> nowait;
  std::vector<std::pair<std::string, Condition>> ablation;  // (family, condition)
};

inline SweepConditions sweep_conditions(const RunConfig& cfg, int n_layers) {
  SweepConditions out;
  for (auto mode : cfg.sweep.modes) {
    for (double l : cfg.sweep.lambdas) {
      out.main.push_back(steering_condition(mode, l, cfg.steering.mask, cfg.steering.sites));
      out.main.back().steering.inject_at_think_start = cfg.steering.inject_at_think_start;
    }
  }
  if (cfg.sweep.nowait) out.nowait = nowait_condition();
  for (int k : cfg.sweep.ablation_k) {
    if (k < 0 || k >= n_layers) continue;
    out.ablation.emplace_back("skip_first", steering_condition(SteeringMode::stepwise, cfg.sweep.ablation_lambda, {k, 0},
                                                               cfg.steering.sites));
    out.ablation.emplace_back("skip_last", steering_condition(SteeringMode::stepwise, cfg.sweep.ablation_lambda, {0, k},
                                                              cfg.steering.sites));
  }
  return out;
}

inline std::string ablation_csv(const std::vector<std::pair<std::string, SweepRow>>& rows, const std::string& hash) {
  std::ostringstream o;
  o << "family,k,skip_first,skip_last,lambda,accuracy,mean_thinking_tokens,mean_reflection_steps,n_samples,config_hash\n";
  for (const auto& [family, r] : rows) {
    o << family << ',' << (family == "skip_first" ? r.skip_first : r.skip_last) << ',' << r.skip_first << ','
      << r.skip_last << ',' << format_lambda(r.lambda) << ',' << format_number(r.accuracy) << ','
      << format_number(r.mean_thinking_tokens, 3) << ',' << format_number(r.mean_reflection_steps, 4) << ','
      << r.n_samples << ',' << hash << '\n';
  }
  return o.str();
}

struct SweepOutputs {
  std::vector<SweepRow> rows;
  std::vector<ModeComparisonRow> modes;
  std::optional<SweepRow> nowait;
  std::vector<std::pair<std::string, SweepRow>> ablation;
  DifficultyAnalysis difficulty;
};

// Aggregates persisted sweep traces into every sweep table. Used by both
// `sweep` and `report`, so the two always agree.
inline SweepOutputs aggregate_sweep(const Context& ctx, const SweepConditions& conds,
                                    const std::map<std::string, ConditionRun>& runs) {
  SweepOutputs out;
  std::vector<ConditionRun> stepwise, all_token;
  for (const auto& c : conds.main) {
    const auto& run = runs.at(c.name);
    out.rows.push_back(aggregate(c, run.traces));
    (c.steering.mode == SteeringMode::stepwise ? stepwise : all_token).push_back(run);
  }
  if (!stepwise.empty() && !all_token.empty()) out.modes = compare_modes(stepwise, all_token);
  if (conds.nowait) out.nowait = aggregate(*conds.nowait, runs.at(conds.nowait->name).traces);
  for (const auto& [family, c] : conds.ablation) out.ablation.emplace_back(family, aggregate(c, runs.at(c.name).traces));
  // Difficulty buckets come from the unsteered samples.
  for (const auto& c : conds.main) {
    if (c.steering.lambda == 0.0) {
      out.difficulty = difficulty_analysis(runs.at(c.name).traces);
      break;
    }
  }
  (void)ctx;
  return out;
}

inline std::map<std::string, ConditionRun> load_sweep_runs(const Context& ctx, const SweepConditions& conds) {
  std::map<std::string, ConditionRun> runs;
  auto load = [&](const Condition& c) {
    if (runs.contains(c.name)) return;
    const auto files = ConditionFiles::in(ctx.stage_dir("sweep") / "traces", c.name);
    if (!fs::exists(files.traces)) throw NotFoundError("missing sweep traces " + files.traces.string() + "; run `reflctrl sweep`");
    ConditionRun r;
    r.condition = c;
    r.traces = read_trace_corpus(files.traces);
    runs.emplace(c.name, std::move(r));
  };
  for (const auto& c : conds.main) load(c);
  if (conds.nowait) load(*conds.nowait);
  for (const auto& [_, c] : conds.ablation) load(c);
  return runs;
}

inline std::string nowait_csv(const std::optional<SweepRow>& nowait, const std::vector<SweepRow>& rows,
                              const std::string& hash) {
  std::string s = sweep_csv_header();
  if (nowait) s += sweep_csv_row(*nowait, hash);
  for (const auto& r : rows) {
    if (r.lambda == 0.0 && r.mode == "stepwise") s += sweep_csv_row(r, hash);
  }
  return s;
}

inline void write_sweep_tables(const Context& ctx, const fs::path& dir, const SweepOutputs& o) {
  std::string sweep = sweep_csv_header();
  for (const auto& r : o.rows) sweep += sweep_csv_row(r, ctx.config_hash());
  write_text(dir / "sweep.csv", sweep);
  write_text(dir / "modes.csv", modes_csv(o.modes, ctx.config_hash()));
  write_text(dir / "nowait.csv", nowait_csv(o.nowait, o.rows, ctx.config_hash()));
  write_text(dir / "ablation.csv", ablation_csv(o.ablation, ctx.config_hash()));
  write_text(dir / "difficulty.csv", difficulty_csv(o.difficulty, ctx.config_hash()));
}

inline SweepOutputs cmd_sweep(Context& ctx) {
  auto& model = ctx.model();
  const auto dirs = load_directions(ctx);
  const auto conds = sweep_conditions(ctx.config(), model.spec().n_layers);
  const auto items = ctx.items(ctx.config().eval_data);
  auto ablation_items = items;
  if (ctx.config().sweep.ablation_n_questions > 0 &&
      static_cast<std::size_t>(ctx.config().sweep.ablation_n_questions) < items.size()) {
    ablation_items.resize(static_cast<std::size_t>(ctx.config().sweep.ablation_n_questions));
  }
  const auto trace_dir = ctx.stage_dir("sweep") / "traces";
  std::map<std::string, ConditionRun> runs;
  auto run_one = [&](const Condition& c, const std::vector<EvalItem>& its) {
    if (runs.contains(c.name)) return;
    auto rs = ctx.run_settings(ctx.config().sweep.n_samples);
    ctx.log("[sweep] " + c.name);
    runs.emplace(c.name, run_condition(model, &dirs, its, c, rs, trace_dir));
  };
  for (const auto& c : conds.main) run_one(c, items);
  if (conds.nowait) run_one(*conds.nowait, items);
  for (const auto& [_, c] : conds.ablation) run_one(c, ablation_items);

  const auto out = aggregate_sweep(ctx, conds, runs);
  const auto dir = ctx.stage_dir("sweep");
  write_sweep_tables(ctx, dir, out);
  nlohmann::json cj = nlohmann::json::array();
  std::vector<std::string> artifacts{"sweep.csv", "modes.csv", "nowait.csv", "ablation.csv", "difficulty.csv"};
  for (const auto& [name, run] : runs) {
    cj.push_back(run.condition.to_json());
    artifacts.push_back("traces/" + name + ".traces.jsonl");
    artifacts.push_back("traces/" + name + ".events.jsonl");
  }
  write_manifest(ctx, "sweep", artifacts, {{"conditions", cj}, {"dataset", ctx.config().eval_data.to_json()}});
  return out;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeRow {
  std::string feature_set;
  std::size_t n_features = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  ProbeMetrics metrics;
};

inline std::string probe_csv(const std::vector<ProbeRow>& rows, const std::string& hash) {
  std::ostringstream o;
  o << "feature_set,n_features,n_train,n_test,auroc,f1,accuracy,config_hash\n";
  for (const auto& r : rows) {
    o << r.feature_set << ',' << r.n_features << ',' << r.n_train << ',' << r.n_test << ',' << format_number(r.metrics.auroc)
      << ',' << format_number(r.metrics.f1) << ',' << format_number(r.metrics.accuracy) << ',' << hash << '\n';
  }
  return o.str();
}

struct ProbeData {
  std::vector<ProbeFeature> reflection;
  std::vector<ProbeFeature> baseline;
};

// Generates unsteered answers for one split, capturing the end-of-think token,
// and appends one feature line per response. Truncated responses are logged
// as excluded.
inline ProbeData probe_split(Context& ctx, const DirectionSet& dirs, const DatasetRef& ref, const std::string& split_name) {
  auto& model = ctx.model();
  const auto& spec = model.spec();
  const auto dir = ctx.stage_dir("probe");
  const auto path = dir / (split_name + ".features.jsonl");
  ProbeData out;
  std::set<std::string> done;
  auto take = [&](const nlohmann::json& j) {
    done.insert(j.at("trace_id").get<std::string>());
    if (j.value("excluded", std::string()).size()) return;
    auto r = probe_feature_from_json(j.at("reflection"));
    auto b = probe_feature_from_json(j.at("baseline"));
    out.reflection.push_back(std::move(r));
    out.baseline.push_back(std::move(b));
  };
  for (const auto& j : read_jsonl_resumable(path)) take(j);

  const auto items = ctx.items(ref);
  const int n_samples = ctx.config().probe.n_samples;
  HookPlan plan;
  plan.positions = CapturePositions::end_of_think;
  plan.capture_final_residual = true;
  GenerateOptions opts;
  opts.segmentation = ctx.config().segmentation;
  std::size_t n = 0;
  for (const auto& item : items) {
    const auto prompt = build_prompt(item);
    for (int s = 0; s < n_samples; ++s) {
      const auto id = sample_trace_id("probe-" + split_name, item.question_id, s);
      if (done.contains(id)) continue;
      DecodeParams dp = ctx.config().decode;
      dp.seed = sample_seed(ctx.config().run_seed, item.question_id, s);
      auto res = generate(model, prompt, dp, plan, {id, item.question_id}, opts);
      auto& t = res.trace;
      nlohmann::json line = {{"trace_id", id}, {"question_id", item.question_id}};
      if (t.truncated()) {
        line["excluded"] = "truncated";
      } else {
        const bool ok = grade_answer_text(item.gold_answer, t.answer_text, item.task_kind).correct;
        if (res.residual_records.size() != 1) throw CoverageError("expected one final-residual capture for " + id);
        auto r = compute_probe_features(id, res.records, dirs, spec, ok);
        auto b = baseline_features(id, res.residual_records.front(), spec, ok);
        line["label"] = ok;
        line["reflection"] = probe_feature_to_json(r);
        line["baseline"] = probe_feature_to_json(b);
      }
      append_jsonl(path, line);
      take(line);
      if (++n % 50 == 0) ctx.log("[probe] " + split_name + " " + std::to_string(n));
    }
  }
  return out;
}

inline std::vector<ProbeRow> cmd_probe(Context& ctx) {
  const auto dirs = load_directions(ctx);
  check_steering_compatibility(ctx.model(), dirs, SteeringConfig{});
  const auto train = probe_split(ctx, dirs, ctx.config().probe.train, "train");
  const auto test = probe_split(ctx, dirs, ctx.config().probe.test, "test");
  const auto& hp = ctx.config().probe.hyper;
  const auto dir = ctx.stage_dir("probe");

  std::vector<ProbeRow> rows;
  auto fit = [&](const std::string& name, const std::vector<ProbeFeature>& tr, const std::vector<ProbeFeature>& te,
                 const std::string& baseline_note) {
    auto model = train_probe(tr, hp);
    model.training_meta["dataset"] = ctx.config().probe.train.to_json();
    model.training_meta["test_dataset"] = ctx.config().probe.test.to_json();
    model.training_meta["n_test"] = te.size();
    model.training_meta["feature_set"] = name;
    model.training_meta["features"] = baseline_note;
    write_text(dir / (name + "_probe.json"), model.to_json().dump(2) + "\n");
    ProbeRow r;
    r.feature_set = name;
    r.n_features = model.n_features();
    r.n_train = tr.size();
    r.n_test = te.size();
    r.metrics = evaluate_probe(model, te);
    rows.push_back(r);
  };
  fit("reflection_direction", train.reflection, test.reflection,
      "cosine of each attention and MLP block output with the reflection direction at the end-of-think token, "
      "attention layers first");
  fit("final_layer_baseline", train.baseline, test.baseline,
      "final-layer residual stream at the end-of-think token");
  write_text(dir / "probe.csv", probe_csv(rows, ctx.config_hash()));
  write_manifest(ctx, "probe",
                 {"probe.csv", "reflection_direction_probe.json", "final_layer_baseline_probe.json", "train.features.jsonl",
                  "test.features.jsonl"},
                 {{"n_train", train.reflection.size()}, {"n_test", test.reflection.size()}});
  for (const auto& r : rows) {
    ctx.log("[probe] " + r.feature_set + ": AUROC " + format_number(r.metrics.auroc, 4) + ", F1 " +
            format_number(r.metrics.f1, 4));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// attribute-heads

inline HeadAttribution cmd_attribute_heads(Context& ctx) {
  auto& model = ctx.model();
  if (!model.supports_head_decomposition()) {
    throw AdapterError("model '" + model.spec().model_id + "' does not expose per-head attention outputs");
  }
  const auto dirs = load_directions(ctx);
  check_steering_compatibility(model, dirs, SteeringConfig{});
  const auto corpus = load_labeled(ctx);
  const auto& spec = model.spec();
  HeadMeanAccumulator acc(spec.n_layers, spec.n_heads, spec.d_model);
  for (const auto& t : corpus.traces) {
    const auto steps = labeled_steps_of(corpus.labels, t.trace_id);
    if (steps.empty()) continue;
    CaptureRequest req;
    req.sites = {Site::attn};
    req.heads = true;
    for (int s : steps) req.positions.insert(t.steps.at(static_cast<std::size_t>(s)).first_token_index);
    for (const auto& h : teacher_forced_capture(model, t.token_ids, req, t.trace_id).head_records) acc.add(h);
  }
  const auto attr = head_attribution(acc, dirs);
  const auto dir = ctx.stage_dir("heads");
  write_text(dir / "heads.csv", head_attribution_csv(attr, ctx.config_hash()));
  svg::Heatmap hm;
  hm.title = "Head projection onto the reflection direction (" + spec.model_id + ")";
  hm.x_label = "head";
  hm.y_label = "layer";
  for (int l = 0; l < attr.n_layers; ++l) {
    hm.row_labels.push_back(std::to_string(l));
    std::vector<std::optional<double>> row;
    for (int h = 0; h < attr.n_heads; ++h) row.push_back(attr.at(l, h));
    hm.values.push_back(std::move(row));
  }
  for (int h = 0; h < attr.n_heads; ++h) hm.col_labels.push_back(std::to_string(h));
  write_text(dir / "heads.svg", svg::render(hm));
  nlohmann::json details = {{"statistic", "scalar projection of the mean embedded head output at step-start tokens "
                                          "onto the unit attention direction"}};
  if (auto s = attr.strongest_layer()) details["strongest_layer"] = *s;
  write_manifest(ctx, "heads", {"heads.csv", "heads.svg"}, details);
  return attr;
}

// ---------------------------------------------------------------------------
// report

inline std::string figure_csv(const std::vector<svg::Series>& series, const std::string& hash) {
  std::ostringstream o;
  o << "series,x,y,config_hash\n";
  for (const auto& s : series) {
    for (auto [x, y] : s.points) o << s.name << ',' << format_number(x) << ',' << format_number(y) << ',' << hash << '\n';
  }
  return o.str();
}

inline void emit_figure(const Context& ctx, const fs::path& dir, const std::string& name, svg::LinePlot plot) {
  write_text(dir / (name + ".csv"), figure_csv(plot.series, ctx.config_hash()));
  write_text(dir / (name + ".svg"), svg::render(plot));
}

inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(io::read_file(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::string md_table(const std::vector<std::vector<std::string>>& rows, std::size_t drop_last_cols = 0) {
  std::ostringstream o;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto n = rows[i].size() > drop_last_cols ? rows[i].size() - drop_last_cols : 0;
    o << '|';
    for (std::size_t c = 0; c < n; ++c) o << ' ' << rows[i][c] << " |";
    o << '\n';
    if (i == 0) {
      o << '|';
      for (std::size_t c = 0; c < n; ++c) o << "---|";
      o << '\n';
    }
  }
  return o.str();
}

inline void cmd_report(Context& ctx) {
  auto& model = ctx.model();
  const auto extract_m = require_stage(ctx, "extract", "extract");
  const auto sweep_m = require_stage(ctx, "sweep", "sweep");
  const auto probe_m = require_stage(ctx, "probe", "probe");
  std::optional<nlohmann::json> heads_m = read_manifest(ctx, "heads");
  if (heads_m) require_stage(ctx, "heads", "attribute-heads");
  for (const auto& s : {"generate", "label", "steer"}) {
    if (auto m = read_manifest(ctx, s); m && m->value("config_hash", "") != ctx.config_hash()) {
      throw RefusalError(std::string(s) + " artifacts in " + ctx.output_dir().string() +
                         " come from a different config; refusing to mix them into one report");
    }
  }

  const auto conds = sweep_conditions(ctx.config(), model.spec().n_layers);
  const auto runs = load_sweep_runs(ctx, conds);
  const auto out = aggregate_sweep(ctx, conds, runs);
  const auto dir = ctx.stage_dir("report");
  const auto fig = dir / "figures";
  const auto& hash = ctx.config_hash();

  auto by_mode = [&](auto value) {
    std::vector<svg::Series> series;
    for (auto mode : ctx.config().sweep.modes) {
      svg::Series s;
      s.name = std::string(to_string(mode));
      for (const auto& r : out.rows) {
        if (r.mode == s.name) s.points.emplace_back(r.lambda, value(r));
      }
      std::sort(s.points.begin(), s.points.end());
      series.push_back(std::move(s));
    }
    return series;
  };
  emit_figure(ctx, fig, "accuracy_vs_lambda",
              {"Accuracy vs intervention strength", "lambda", "accuracy", by_mode([](const SweepRow& r) { return r.accuracy; })});
  emit_figure(ctx, fig, "tokens_vs_lambda",
              {"Thinking tokens vs intervention strength", "lambda", "mean thinking tokens",
               by_mode([](const SweepRow& r) { return r.mean_thinking_tokens; })});
  emit_figure(ctx, fig, "reflection_steps_vs_lambda",
              {"Reflection steps vs intervention strength", "lambda", "mean reflection steps",
               by_mode([](const SweepRow& r) { return r.mean_reflection_steps; })});
  {
    std::vector<svg::Series> series;
    for (auto mode : ctx.config().sweep.modes) {
      svg::Series s;
      s.name = std::string(to_string(mode));
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : out.rows) {
        if (r.mode == s.name) pts.emplace_back(r.lambda, 0.0);
      }
      std::vector<const SweepRow*> sorted;
      for (const auto& r : out.rows) {
        if (r.mode == s.name) sorted.push_back(&r);
      }
      std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->lambda < b->lambda; });
      for (auto* r : sorted) s.points.emplace_back(r->mean_thinking_tokens, r->accuracy);
      series.push_back(std::move(s));
    }
    if (out.nowait) series.push_back({"nowait", {{out.nowait->mean_thinking_tokens, out.nowait->accuracy}}, false});
    emit_figure(ctx, fig, "accuracy_vs_tokens", {"Accuracy vs thinking tokens", "mean thinking tokens", "accuracy", series});
  }
  {
    std::vector<svg::Series> series(2);
    series[0].name = "skip_first";
    series[1].name = "skip_last";
    for (const auto& [family, r] : out.ablation) {
      auto& s = family == "skip_first" ? series[0] : series[1];
      s.points.emplace_back(family == "skip_first" ? r.skip_first : r.skip_last, r.accuracy);
    }
    emit_figure(ctx, fig, "layer_ablation",
                {"Layer mask ablation at lambda " + format_lambda(ctx.config().sweep.ablation_lambda), "layers skipped (k)",
                 "accuracy", series});
  }
  const auto dirs = load_directions(ctx);
  {
    const auto st = direction_stats(dirs);
    std::vector<svg::Series> series(2);
    series[0].name = "attn";
    series[1].name = "mlp";
    for (const auto& [ls, norm] : st.norms) series[ls.site == Site::attn ? 0 : 1].points.emplace_back(ls.layer, norm);
    emit_figure(ctx, fig, "direction_norms", {"Reflection direction norm per layer", "layer", "L2 norm", series});
  }

  std::ostringstream md;
  md << "# Reflection steering report\n\n";
  md << "- model: `" << model.spec().model_id << "`\n";
  md << "- config hash: `" << hash << "`\n";
  md << "- evaluation set: " << ctx.config().eval_data.id << " / " << ctx.config().eval_data.split << ", "
     << (out.rows.empty() ? 0 : out.rows.front().n_questions) << " questions x " << ctx.config().sweep.n_samples
     << " samples\n";
  md << "- directions: |R| = " << dirs.n_reflection << ", |NR| = " << dirs.n_non_reflection
     << " step-start tokens; injected raw (not normalized), skipping the first " << ctx.config().steering.mask.skip_first
     << " and last " << ctx.config().steering.mask.skip_last << " layers\n";
  md << "- lambda values are in units of the raw direction of this model and are not comparable across models\n\n";
  md << "## Intervention strength sweep\n\n" << md_table(read_csv_rows(ctx.stage_dir("sweep") / "sweep.csv"), 1) << '\n';
  md << "Figures: `figures/accuracy_vs_lambda.svg`, `figures/tokens_vs_lambda.svg`, "
        "`figures/reflection_steps_vs_lambda.svg`, `figures/accuracy_vs_tokens.svg`.\n\n";
  md << "## Stepwise vs all-token steering\n\n" << md_table(read_csv_rows(ctx.stage_dir("sweep") / "modes.csv"), 1) << '\n';
  md << "## NoWait baseline\n\n" << md_table(read_csv_rows(ctx.stage_dir("sweep") / "nowait.csv"), 1) << '\n';
  md << "## Layer mask ablation\n\n" << md_table(read_csv_rows(ctx.stage_dir("sweep") / "ablation.csv"), 1) << '\n';
  md << "## Difficulty buckets\n\nEasy: accuracy > 0.8, Medium: 0.5 to 0.8 inclusive, Hard: < 0.5 (unsteered samples).\n\n"
     << md_table(read_csv_rows(ctx.stage_dir("sweep") / "difficulty.csv"), 1) << '\n';
  md << "## Correctness probe\n\nLogistic regression on end-of-think features; the baseline uses the final-layer "
        "residual stream.\n\n"
     << md_table(read_csv_rows(ctx.stage_dir("probe") / "probe.csv"), 1) << '\n';
  md << "## Head attribution\n\n";
  if (heads_m) {
    md << "Statistic: scalar projection of each head's mean output (embedded through its slice of the output "
          "projection) at step-start tokens onto the unit attention direction of its layer.\n\n";
    if (heads_m->at("details").contains("strongest_layer")) {
      md << "Layer with the largest mean |projection|: " << heads_m->at("details").at("strongest_layer").get<int>()
         << " of " << model.spec().n_layers << ".\n\n";
    }
    write_text(fig / "head_heatmap.svg", io::read_file(ctx.stage_dir("heads") / "heads.svg"));
    write_text(fig / "head_heatmap.csv", io::read_file(ctx.stage_dir("heads") / "heads.csv"));
    md << "Heatmap: `figures/head_heatmap.svg`.\n";
  } else {
    md << "Not produced; run `reflctrl attribute-heads`.\n";
  }
  write_text(dir / "report.md", md.str());

  std::vector<std::string> artifacts{"report.md"};
  for (const auto& e : fs::directory_iterator(fig)) artifacts.push_back("figures/" + e.path().filename().string());
  std::sort(artifacts.begin(), artifacts.end());
  write_manifest(ctx, "report", artifacts,
                 {{"inputs",
                   {{"extract", extract_m.at("config_hash")},
                    {"sweep", sweep_m.at("config_hash")},
                    {"probe", probe_m.at("config_hash")}}}});
  ctx.log("[report] " + (dir / "report.md").string());
}

}  // namespace reflctrl::pipeline
