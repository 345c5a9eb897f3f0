#pragma once

// Correctness probe read at the end-of-think token. The reflection-direction
// feature vector holds cos(d_l, z_l) for every attention block (layers
// 0..L-1) followed by every MLP block; the baseline feature vector is the
// final-layer residual stream at the same token. Both feed an L2-regularized
// logistic regression fitted by Newton's method.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "reflctrl/direction_lab.hpp"
#include "reflctrl/errors.hpp"
#include "reflctrl/model/activation_record.hpp"

namespace reflctrl {

struct ProbeFeature {
  std::string trace_id;
  std::vector<double> values;
  bool label = false;                    // answer correct
  std::vector<int> degenerate_components;  // zero-norm z or d, value forced to 0

  bool degenerate() const noexcept { return !degenerate_components.empty(); }
};

// Cosine features at the end-of-think token. `records` must hold that token's
// attention and MLP outputs for every layer.
inline ProbeFeature compute_probe_features(const std::string& trace_id, const std::vector<ActivationRecord>& records,
                                           const DirectionSet& dirs, const ModelSpec& spec, bool label) {
  const int L = spec.n_layers;
  if (dirs.n_layers != L) throw ValidationError("n_layers", "direction set depth differs from the model");
  std::map<LayerSite, const ActivationRecord*> by_site;
  for (const auto& r : records) by_site[{r.layer, r.site}] = &r;

  ProbeFeature f;
  f.trace_id = trace_id;
  f.label = label;
  f.values.assign(static_cast<std::size_t>(2 * L), 0.0);
  for (Site s : {Site::attn, Site::mlp}) {
    for (int l = 0; l < L; ++l) {
      const int k = (s == Site::attn ? 0 : L) + l;
      auto it = by_site.find({l, s});
      if (it == by_site.end()) {
        throw CoverageError("no end-of-think capture for " + trace_id + " layer " + std::to_string(l) + " " +
                            std::string(to_string(s)));
      }
      const auto c = cosine(dirs.at(l, s), it->second->vector);
      if (!c) {
        f.degenerate_components.push_back(k);
        continue;
      }
      f.values[static_cast<std::size_t>(k)] = std::clamp(*c, -1.0, 1.0);
    }
  }
  if (f.values.size() != static_cast<std::size_t>(2 * spec.n_layers)) throw ValidationError("values", "feature length");
  return f;
}

// Final-layer residual stream at the end-of-think token.
inline ProbeFeature baseline_features(const std::string& trace_id, const ResidualRecord& residual, const ModelSpec& spec,
                                      bool label) {
  if (residual.vector.size() != static_cast<std::size_t>(spec.d_model)) {
    throw CoverageError("residual capture for " + trace_id + " has the wrong width");
  }
  ProbeFeature f;
  f.trace_id = trace_id;
  f.label = label;
  f.values.assign(residual.vector.begin(), residual.vector.end());
  if (std::all_of(f.values.begin(), f.values.end(), [](double x) { return x == 0.0; })) {
    f.degenerate_components.resize(f.values.size());
    std::iota(f.degenerate_components.begin(), f.degenerate_components.end(), 0);
  }
  return f;
}

struct ProbeHyperparams {
  double l2 = 1.0;  // penalty on the non-bias weights, in standardized units
  int max_iter = 100;
  double tol = 1e-10;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const { return {{"l2", l2}, {"max_iter", max_iter}, {"tol", tol}, {"seed", seed}}; }
  static ProbeHyperparams from_json(const nlohmann::json& j) {
    ProbeHyperparams h;
    h.l2 = j.value("l2", h.l2);
    h.max_iter = j.value("max_iter", h.max_iter);
    h.tol = j.value("tol", h.tol);
    h.seed = j.value("seed", h.seed);
    return h;
  }
};

struct ProbeModel {
  std::vector<double> weights;  // [bias, w_1, ..., w_n] over raw features
  nlohmann::json training_meta = nlohmann::json::object();

  std::size_t n_features() const { return weights.empty() ? 0 : weights.size() - 1; }

  double score(const std::vector<double>& x) const {
    if (x.size() != n_features()) {
      throw ValidationError("features", "probe expects " + std::to_string(n_features()) + " features, got " +
                                            std::to_string(x.size()));
    }
    double z = weights[0];
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i + 1] * x[i];
    return 1.0 / (1.0 + std::exp(-z));
  }

  nlohmann::json to_json() const { return {{"weights", weights}, {"training_meta", training_meta}}; }
  static ProbeModel from_json(const nlohmann::json& j) {
    ProbeModel m;
    m.weights = j.at("weights").get<std::vector<double>>();
    m.training_meta = j.value("training_meta", nlohmann::json::object());
    for (double w : m.weights) {
      if (!std::isfinite(w)) throw CorruptionError("probe weights are not finite");
    }
    return m;
  }
};

// Features are standardized for the fit; the returned weights act on raw
// features.
inline ProbeModel train_probe(const std::vector<ProbeFeature>& data, const ProbeHyperparams& hp = {}) {
  if (data.empty()) throw TrainingError("no training examples");
  const std::size_t n = data.size(), p = data.front().values.size();
  std::size_t n_pos = 0;
  for (const auto& f : data) {
    if (f.values.size() != p) throw TrainingError("feature vectors have different lengths");
    for (double x : f.values) {
      if (!std::isfinite(x)) throw TrainingError("non-finite feature in " + f.trace_id);
    }
    n_pos += f.label ? 1 : 0;
  }
  if (n_pos == 0 || n_pos == n) throw TrainingError("training labels contain a single class");
  if (!(hp.l2 >= 0.0)) throw TrainingError("l2 must be non-negative");

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  Eigen::VectorXd sd = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p));
  for (const auto& f : data) {
    for (std::size_t j = 0; j < p; ++j) mean[static_cast<Eigen::Index>(j)] += f.values[j];
  }
  mean /= static_cast<double>(n);
  for (std::size_t j = 0; j < p; ++j) {
    double v = 0.0;
    for (const auto& f : data) v += (f.values[j] - mean[static_cast<Eigen::Index>(j)]) * (f.values[j] - mean[static_cast<Eigen::Index>(j)]);
    v /= static_cast<double>(n);
    sd[static_cast<Eigen::Index>(j)] = v > 1e-24 ? std::sqrt(v) : 1.0;
  }
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p + 1));
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    X(r, 0) = 1.0;
    for (std::size_t j = 0; j < p; ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      X(r, c + 1) = (data[i].values[j] - mean[c]) / sd[c];
    }
    y[r] = data[i].label ? 1.0 : 0.0;
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p + 1));
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(p + 1), hp.l2);
  penalty[0] = 0.0;
  int iter = 0;
  bool converged = false;
  for (; iter < hp.max_iter; ++iter) {
    const Eigen::VectorXd z = X * w;
    Eigen::VectorXd prob(z.size()), weight(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      prob[i] = 1.0 / (1.0 + std::exp(-z[i]));
      weight[i] = std::max(prob[i] * (1.0 - prob[i]), 1e-12);
    }
    const Eigen::VectorXd grad = X.transpose() * (prob - y) + penalty.cwiseProduct(w);
    Eigen::MatrixXd H = X.transpose() * weight.asDiagonal() * X;
    H.diagonal() += penalty;
    H.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    if (!step.allFinite()) throw TrainingError("Newton step is not finite");
    w -= step;
    if (step.norm() < hp.tol * (1.0 + w.norm())) {
      converged = true;
      ++iter;
      break;
    }
  }

  ProbeModel m;
  m.weights.assign(p + 1, 0.0);
  m.weights[0] = w[0];
  for (std::size_t j = 0; j < p; ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    m.weights[j + 1] = w[c + 1] / sd[c];
    m.weights[0] -= w[c + 1] * mean[c] / sd[c];
  }
  for (double x : m.weights) {
    if (!std::isfinite(x)) throw TrainingError("fitted weights are not finite");
  }
  m.training_meta = {{"n_train", n},
                     {"n_positive", n_pos},
                     {"n_features", p},
                     {"hyperparams", hp.to_json()},
                     {"iterations", iter},
                     {"converged", converged}};
  return m;
}

// Area under the ROC curve as the Mann-Whitney U statistic with midranks for
// tied scores.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("labels", "scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (bool b : labels) n_pos += b ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUROC needs both classes");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum_pos += midrank;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct ProbeMetrics {
  double auroc = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t n_positive = 0;
};

// F1 treats "answer correct" as the positive class, thresholded at 0.5.
inline ProbeMetrics evaluate_probe(const ProbeModel& model, const std::vector<ProbeFeature>& data) {
  std::vector<double> scores;
  std::vector<bool> labels;
  std::size_t tp = 0, fp = 0, fn = 0, hit = 0;
  for (const auto& f : data) {
    const double s = model.score(f.values);
    scores.push_back(s);
    labels.push_back(f.label);
    const bool pred = s >= 0.5;
    tp += pred && f.label;
    fp += pred && !f.label;
    fn += !pred && f.label;
    hit += pred == f.label;
  }
  ProbeMetrics m;
  m.n = data.size();
  m.n_positive = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  m.auroc = auroc(scores, labels);
  m.f1 = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  m.accuracy = data.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(data.size());
  return m;
}

inline nlohmann::json probe_feature_to_json(const ProbeFeature& f) {
  return {{"trace_id", f.trace_id}, {"values", f.values}, {"label", f.label}, {"degenerate", f.degenerate_components}};
}

inline ProbeFeature probe_feature_from_json(const nlohmann::json& j) {
  ProbeFeature f;
  f.trace_id = j.at("trace_id").get<std::string>();
  f.values = j.at("values").get<std::vector<double>>();
  f.label = j.at("label").get<bool>();
  f.degenerate_components = j.value("degenerate", std::vector<int>{});
  return f;
}

}  // namespace reflctrl
