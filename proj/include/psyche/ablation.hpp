// SPDX-License-Identifier: Apache-2.0
//
// Head/normalisation ablation on a synthetic regression corpus, plus the
// ridge baseline on the same split.
#pragma once

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "psyche/corpus.hpp"
#include "psyche/features.hpp"
#include "psyche/models.hpp"
#include "psyche/trainer.hpp"

namespace psyche::trainer {

struct AblationConfig {
  std::uint64_t seed = 42;
  std::uint64_t n = 8000;
  std::uint32_t vocab_size = 200;
  // A wide length range gives the count-driven targets a multiplicative
  // length component that l2-normalised TF-IDF cannot see linearly.
  std::uint32_t min_doc_len = 2;
  std::uint32_t max_doc_len = 200;
  std::size_t n_targets = 2;
  double target_r2 = 0.6;
  std::size_t max_features = 5000;
  std::uint32_t min_df = 2;
  std::size_t hidden = 64;
  double init_std = 0.3;
  std::uint64_t steps = 4000;
  std::uint64_t batch_size = 32;
  double learning_rate = 0.003;
  OptimizerKind optimizer = OptimizerKind::adam;
  ScheduleKind schedule = ScheduleKind::constant;
  std::optional<double> grad_clip;
  double raw_scale = 100.0;  // multiplier applied to targets in the raw row
  double lo = -3.0;
  double hi = 3.0;
  double ridge_lambda = 1.0;
};

/// Dense TF-IDF features and targets, split into train and held-out test.
struct RegressionCorpus {
  models::RegressionData train, test;
  double oracle_r2 = 0.0;
  features::TfIdfModel tfidf;
  std::vector<std::string> target_names;
};

inline RegressionCorpus make_regression_corpus(const AblationConfig& cfg) {
  corpus::SyntheticConfig sc;
  sc.n = cfg.n;
  sc.vocab_size = cfg.vocab_size;
  sc.min_doc_len = cfg.min_doc_len;
  sc.max_doc_len = cfg.max_doc_len;
  sc.n_targets = cfg.n_targets;
  sc.seed = cfg.seed;
  auto syn = corpus::gen_synthetic_with_r2(sc, cfg.target_r2);
  auto parts = corpus::split(cfg.n, {0.8, 0.1, 0.1, cfg.seed});

  auto take = [&](const std::vector<std::uint64_t>& idx, std::vector<std::string>& docs, std::vector<double>& y) {
    for (auto i : idx) {
      docs.push_back(corpus::clean_text(syn.records[i].text));
      y.insert(y.end(), syn.records[i].targets.begin(), syn.records[i].targets.end());
    }
  };
  std::vector<std::string> train_docs, test_docs;
  std::vector<double> ytr, yte;
  take(parts.train, train_docs, ytr);
  take(parts.test, test_docs, yte);

  RegressionCorpus rc;
  rc.tfidf = features::TfIdfModel::fit(train_docs, cfg.max_features, cfg.min_df);
  const std::size_t d = rc.tfidf.dim(), T = cfg.n_targets;
  rc.train.X = Tensor({train_docs.size(), d}, features::transform_dense(rc.tfidf, train_docs));
  rc.train.Y = Tensor({train_docs.size(), T}, std::move(ytr));
  rc.test.X = Tensor({test_docs.size(), d}, features::transform_dense(rc.tfidf, test_docs));
  rc.test.Y = Tensor({test_docs.size(), T}, std::move(yte));
  rc.oracle_r2 = syn.oracle_r2;
  rc.target_names = syn.manifest.target_names;
  return rc;
}

struct AblationRow {
  std::string config_name;
  double final_avg_r2 = 0.0;  // -inf when predictions are not finite
  std::vector<double> r2;
  bool diverged = false;
  std::uint64_t final_step = 0;
};

struct AblationReport {
  std::uint64_t seed = 0;
  double oracle_r2 = 0.0;
  std::vector<AblationRow> rows;  // unbounded+raw, unbounded+normalized, bounded+normalized
  double ridge_avg_r2 = 0.0;
  double seconds = 0.0;

  bool ordering_holds() const {
    return rows.size() == 3 && rows[0].final_avg_r2 < rows[1].final_avg_r2 &&
           rows[1].final_avg_r2 < rows[2].final_avg_r2;
  }

  json to_json() const {
    json j = {{"seed", seed}, {"oracle_r2", oracle_r2}, {"ridge_avg_r2", ridge_avg_r2}, {"seconds", seconds},
              {"ordering_holds", ordering_holds()}};
    j["rows"] = json::array();
    for (const auto& r : rows) {
      j["rows"].push_back({{"config", r.config_name},
                           {"final_avg_r2", std::isfinite(r.final_avg_r2) ? json(r.final_avg_r2) : json(nullptr)},
                           {"r2", r.r2},
                           {"diverged", r.diverged},
                           {"final_step", r.final_step}});
    }
    return j;
  }
};

/// Held-out R^2 of an MLP trained on (optionally standardised, optionally
/// rescaled) targets. Predictions are mapped back to the original units.
inline AblationRow ablation_row(const AblationConfig& cfg, const RegressionCorpus& rc, models::HeadKind head,
                                bool normalize, std::string name) {
  const std::size_t T = cfg.n_targets;
  models::RegressionData tr = rc.train;
  models::TargetScaler scaler;
  double factor = 1.0;
  if (normalize) {
    scaler = models::TargetScaler::fit(tr.Y.data, T, rc.target_names);
    tr.Y.data = scaler.transform(tr.Y.data);
  } else {
    factor = cfg.raw_scale;
    for (double& y : tr.Y.data) y *= factor;
  }

  models::MlpConfig mc;
  mc.input_dim = tr.X.cols();
  mc.hidden = cfg.hidden;
  mc.targets = T;
  mc.head = head;
  mc.lo = cfg.lo;
  mc.hi = cfg.hi;
  mc.init_std = cfg.init_std;
  mc.seed = cfg.seed;
  models::MlpRegressor model(mc);

  TrainerConfig tc;
  tc.max_steps = cfg.steps;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.optimizer = cfg.optimizer;
  tc.schedule = cfg.schedule;
  tc.grad_clip = cfg.grad_clip;
  tc.save_steps = 0;
  tc.eval_steps = 0;
  tc.seed = cfg.seed;
  auto rep = train(tc, model, tr, static_cast<const models::RegressionData*>(nullptr), nullptr);

  AblationRow row;
  row.config_name = std::move(name);
  row.diverged = rep.diverged;
  row.final_step = rep.final_step;
  Tensor pred = model.predict(rc.test.X);
  std::vector<double> p = pred.data;
  if (normalize)
    p = scaler.inverse(p);
  else
    for (double& v : p) v /= factor;
  bool finite = std::all_of(p.begin(), p.end(), [](double v) { return std::isfinite(v); });
  if (!finite) {
    row.diverged = true;
    row.final_avg_r2 = -std::numeric_limits<double>::infinity();
    return row;
  }
  auto m = models::regression_report(rc.test.Y.data, p, T);
  row.r2 = m.r2;
  row.final_avg_r2 = m.avg_r2;
  return row;
}

inline double ridge_avg_r2(const AblationConfig& cfg, const RegressionCorpus& rc) {
  const std::size_t T = cfg.n_targets;
  auto ridge = models::RidgeRegressor::fit(rc.train.X.data, rc.train.X.rows(), rc.train.X.cols(), rc.train.Y.data,
                                           T, cfg.ridge_lambda);
  auto p = ridge.predict(rc.test.X.data);
  return models::regression_report(rc.test.Y.data, p, T).avg_r2;
}

inline AblationReport run_ablation(const AblationConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  auto rc = make_regression_corpus(cfg);
  AblationReport rep;
  rep.seed = cfg.seed;
  rep.oracle_r2 = rc.oracle_r2;
  using models::HeadKind;
  rep.rows.push_back(ablation_row(cfg, rc, HeadKind::unbounded, false, "unbounded+raw"));
  rep.rows.push_back(ablation_row(cfg, rc, HeadKind::unbounded, true, "unbounded+normalized"));
  rep.rows.push_back(ablation_row(cfg, rc, HeadKind::bounded, true, "bounded+normalized"));
  rep.ridge_avg_r2 = ridge_avg_r2(cfg, rc);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline AblationReport run_ablation(std::uint64_t seed) {
  AblationConfig cfg;
  cfg.seed = seed;
  return run_ablation(cfg);
}

}  // namespace psyche::trainer
