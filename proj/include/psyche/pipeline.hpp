// SPDX-License-Identifier: Apache-2.0
//
// Store-to-bundle training runs: split a dataset store, fit TF-IDF and the
// target scaler on the training part, train the MLP with checkpoints, and
// sweep a run's checkpoints against its validation split.
//
// Run directory layout:
//   run.json        the RunConfig used, so sweep can rebuild the features
//   checkpoints/    checkpoint-<step> directories
//   report.json     TrainReport plus held-out metrics
//   curve.csv       step,train_loss,val_loss
//   bundle/         final model bundle
#pragma once

#include <json.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psyche/bundle.hpp"
#include "psyche/corpus.hpp"
#include "psyche/features.hpp"
#include "psyche/models.hpp"
#include "psyche/trainer.hpp"

namespace psyche::pipeline {

using json = nlohmann::json;
using ad::Tensor;

struct RunConfig {
  std::string name = "mlp";
  trainer::TrainerConfig trainer;
  std::size_t hidden = 64;
  models::HeadKind head = models::HeadKind::bounded;
  double init_std = 0.3;
  double lo = -3.0;
  double hi = 3.0;
  std::uint32_t max_features = features::TfIdfModel::kDefaultMaxFeatures;
  std::uint32_t min_df = features::TfIdfModel::kDefaultMinDf;
  corpus::SplitSpec split;

  json to_json() const {
    return {{"name", name},
            {"trainer", trainer.to_json()},
            {"model", {{"hidden", hidden}, {"head", models::head_name(head)}, {"init_std", init_std}, {"lo", lo},
                       {"hi", hi}}},
            {"features", {{"max_features", max_features}, {"min_df", min_df}}},
            {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}, {"seed", split.seed}}}};
  }

  /// Every section and key is optional.
  static RunConfig from_json(const json& j) {
    RunConfig c;
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    try {
      c.name = j.value("name", c.name);
      if (j.contains("trainer")) c.trainer = trainer::TrainerConfig::from_json(j["trainer"]);
      if (j.contains("model")) {
        const auto& m = j["model"];
        c.hidden = m.value("hidden", c.hidden);
        c.head = models::parse_head(m.value("head", std::string("bounded")));
        c.init_std = m.value("init_std", c.init_std);
        c.lo = m.value("lo", c.lo);
        c.hi = m.value("hi", c.hi);
      }
      if (j.contains("features")) {
        c.max_features = j["features"].value("max_features", c.max_features);
        c.min_df = j["features"].value("min_df", c.min_df);
      }
      if (j.contains("split")) {
        const auto& s = j["split"];
        c.split = {s.value("train", c.split.train), s.value("val", c.split.val), s.value("test", c.split.test),
                   s.value("seed", c.split.seed)};
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("run config: ") + e.what());
    }
    if (c.name.empty()) throw ConfigError("run config: name must not be empty");
    if (c.hidden == 0) throw ConfigError("run config: model.hidden must be > 0");
    if (!(c.lo < c.hi)) throw ConfigError("run config: model.lo must be < model.hi");
    return c;
  }
};

/// Train and validation targets are standardised; test targets stay raw.
struct PreparedData {
  features::TfIdfModel tfidf;
  models::TargetScaler scaler;
  models::RegressionData train, val, test;
  std::vector<std::string> target_names;
};

inline PreparedData prepare(const corpus::MmapStore& store, const RunConfig& cfg) {
  if (corpus::is_classification(store.task()))
    throw ConfigError("training runs need a regression store, got " + std::string(corpus::task_name(store.task())));
  auto parts = corpus::split(store, cfg.split);
  if (parts.train.empty() || parts.val.empty()) throw ValidationError("store too small for the configured split");
  const std::size_t T = store.target_count();

  auto gather = [&](const std::vector<std::uint64_t>& idx, std::vector<std::string>& docs, std::vector<double>& y) {
    for (auto i : idx) {
      docs.emplace_back(store.text_view(i));
      auto t = store.targets(i);
      y.insert(y.end(), t.begin(), t.end());
    }
  };
  std::vector<std::string> dtr, dva, dte;
  std::vector<double> ytr, yva, yte;
  gather(parts.train, dtr, ytr);
  gather(parts.val, dva, yva);
  gather(parts.test, dte, yte);

  PreparedData p;
  p.target_names = store.manifest().target_names;
  p.tfidf = features::TfIdfModel::fit(dtr, cfg.max_features, cfg.min_df);
  p.scaler = models::TargetScaler::fit(ytr, T, p.target_names);
  const std::size_t d = p.tfidf.dim();
  auto data = [&](const std::vector<std::string>& docs, std::vector<double> y, bool scale) {
    models::RegressionData r;
    r.X = Tensor({docs.size(), d}, features::transform_dense(p.tfidf, docs));
    r.Y = Tensor({docs.size(), T}, scale ? p.scaler.transform(y) : std::move(y));
    return r;
  };
  p.train = data(dtr, std::move(ytr), true);
  p.val = data(dva, std::move(yva), true);
  p.test = data(dte, std::move(yte), false);
  return p;
}

inline models::MlpRegressor make_model(const RunConfig& cfg, const PreparedData& p) {
  models::MlpConfig mc;
  mc.input_dim = p.tfidf.dim();
  mc.hidden = cfg.hidden;
  mc.targets = p.target_names.size();
  mc.head = cfg.head;
  mc.lo = cfg.lo;
  mc.hi = cfg.hi;
  mc.init_std = cfg.init_std;
  mc.seed = cfg.trainer.seed;
  return models::MlpRegressor(mc);
}

inline std::string curve_csv(const trainer::TrainReport& r) {
  std::map<std::uint64_t, std::pair<std::optional<double>, std::optional<double>>> rows;
  for (auto& [s, l] : r.train_loss) rows[s].first = l;
  for (auto& [s, l] : r.val_loss) rows[s].second = l;
  std::string out = "step,train_loss,val_loss\n";
  char buf[96];
  for (auto& [s, v] : rows) {
    out += std::to_string(s) + ",";
    if (v.first) {
      std::snprintf(buf, sizeof buf, "%.17g", *v.first);
      out += buf;
    }
    out += ",";
    if (v.second) {
      std::snprintf(buf, sizeof buf, "%.17g", *v.second);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

struct RunResult {
  trainer::TrainReport report;
  std::optional<models::MetricsReport> test_metrics;  // absent when the run was killed
};

/// Trains into `out`. With resume, continues from the newest valid checkpoint
/// in out/checkpoints; otherwise starts from step 0 and refuses a directory
/// that already holds checkpoints.
inline RunResult run_training(const RunConfig& cfg, const corpus::MmapStore& store, const fs::path& out,
                              bool resume) {
  trainer::CheckpointStore ckpts(out / "checkpoints", cfg.trainer.save_total_limit);
  if (!resume && !ckpts.list().empty())
    throw ConfigError("run directory " + out.string() + " already has checkpoints; pass --resume or use a new directory");
  fs::create_directories(out);
  write_file_atomic(out / "run.json", cfg.to_json().dump(2));

  auto data = prepare(store, cfg);
  auto model = make_model(cfg, data);
  RunResult res;
  res.report = trainer::train(cfg.trainer, model, data.train, &data.val, &ckpts, resume);

  json rep = res.report.to_json();
  if (!res.report.killed) {
    auto bundle = models::RegressorBundle::from_mlp(cfg.name, data.tfidf, model, data.scaler, data.target_names);
    if (!data.test.X.data.empty()) {
      auto pred = data.scaler.inverse(model.predict(data.test.X).data);
      res.test_metrics = models::regression_report(data.test.Y.data, pred, data.target_names.size());
      rep["test"] = res.test_metrics->to_json();
    }
    models::save_bundle(bundle, out / "bundle");
  }
  write_file_atomic(out / "report.json", rep.dump(2));
  write_file_atomic(out / "curve.csv", curve_csv(res.report));
  return res;
}

/// Validation loss of every verifiable checkpoint of a run directory.
inline trainer::SweepResult sweep_run(const fs::path& run_dir, const corpus::MmapStore& store) {
  const fs::path cfg_path = run_dir / "run.json";
  if (!fs::exists(cfg_path)) throw IoError("not a run directory (no run.json): " + run_dir.string());
  json j;
  try {
    j = json::parse(read_text_file(cfg_path));
  } catch (const json::exception& e) {
    throw FormatError("run.json: " + std::string(e.what()));
  }
  auto cfg = RunConfig::from_json(j);
  auto data = prepare(store, cfg);
  auto model = make_model(cfg, data);
  return trainer::sweep_checkpoints(run_dir / "checkpoints", model, data.val);
}

}  // namespace psyche::pipeline
