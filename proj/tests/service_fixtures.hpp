// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>

#include <rapidjson/document.h>
#include <rapidjson/schema.h>
#include <rapidjson/stringbuffer.h>

#include "psyche/ablation.hpp"
#include "psyche/bundle.hpp"
#include "psyche/services.hpp"

namespace psyche::testing {

/// Canned service answering /predict, /chat and /health after a fixed delay.
/// The delay is interruptible so a stalled stub shuts down immediately.
class StubService {
 public:
  StubService(std::string name, std::chrono::milliseconds delay) : name_(std::move(name)), delay_ms_(delay.count()) {
    auto& s = svc_.server();
    auto reply = [this](const httplib::Request& req, httplib::Response& res, services::json body) {
      ++hits_;
      if (!pause()) return;
      (void)req;
      services::send_json(res, 200, body);
    };
    s.Post("/predict", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(req, res, {{"model", name_}, {"scores", {{"valence", 0.25}, {"arousal", -0.5}}}});
    });
    s.Post("/chat", [this, reply](const httplib::Request& req, httplib::Response& res) {
      auto j = services::json::parse(req.body, nullptr, false);
      std::string msg = j.is_object() ? j.value("message", std::string()) : std::string();
      reply(req, res, {{"reply", "echo " + msg}, {"tokens", 2}});
    });
    s.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      services::send_json(res, 200, {{"status", "ok"}, {"model", name_}});
    });
    port_ = svc_.start("127.0.0.1:0");
  }

  ~StubService() { shutdown(); }

  void shutdown() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    svc_.stop();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int port() const { return port_; }
  int hits() const { return hits_; }
  void set_delay(std::chrono::milliseconds d) { delay_ms_ = d.count(); }

  services::Endpoint endpoint(services::EndpointKind kind, std::uint64_t timeout_ms) const {
    return {name_, url(), kind, timeout_ms};
  }

 private:
  bool pause() {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, std::chrono::milliseconds(delay_ms_.load()), [this] { return stopping_; });
    return !stopping_;
  }

  std::string name_;
  std::atomic<long long> delay_ms_;
  std::atomic<int> hits_{0};
  std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  services::HttpService svc_;
  int port_ = 0;
};

/// A port with nothing listening on it.
inline int closed_port() {
  StubService s("gone", std::chrono::milliseconds(0));
  int p = s.port();
  s.shutdown();
  return p;
}

/// Validates `doc` against one definition of the published API schema.
class ApiSchema {
 public:
  explicit ApiSchema(const fs::path& path) : text_(read_text_file(path)) {}

  /// Empty string when valid, otherwise a description of the first violation.
  std::string check(const nlohmann::json& doc, const std::string& definition) const {
    auto schema_json = nlohmann::json::parse(text_);
    schema_json["$ref"] = "#/definitions/" + definition;
    rapidjson::Document sd;
    sd.Parse(schema_json.dump().c_str());
    rapidjson::SchemaDocument schema(sd);
    rapidjson::Document d;
    d.Parse(doc.dump().c_str());
    rapidjson::SchemaValidator v(schema);
    if (d.Accept(v)) return {};
    rapidjson::StringBuffer schema_ptr, doc_ptr;
    v.GetInvalidSchemaPointer().StringifyUriFragment(schema_ptr);
    v.GetInvalidDocumentPointer().StringifyUriFragment(doc_ptr);
    return std::string("keyword '") + v.GetInvalidSchemaKeyword() + "' at schema " + schema_ptr.GetString() +
           ", document " + doc_ptr.GetString();
  }

 private:
  std::string text_;
};

/// Small trained regression bundle on the synthetic corpus.
inline models::RegressorBundle small_bundle(models::ModelKind kind, std::uint64_t seed = 1,
                                            models::HeadKind head = models::HeadKind::bounded) {
  trainer::AblationConfig cfg;
  cfg.seed = seed;
  cfg.n = 400;
  cfg.vocab_size = 80;
  cfg.min_doc_len = 5;
  cfg.max_doc_len = 30;
  auto rc = trainer::make_regression_corpus(cfg);
  if (kind == models::ModelKind::ridge) {
    auto r = models::RidgeRegressor::fit(rc.train.X.data, rc.train.X.rows(), rc.train.X.cols(), rc.train.Y.data,
                                         cfg.n_targets, 1.0);
    return models::RegressorBundle::from_ridge("ridge-" + std::to_string(seed), rc.tfidf, std::move(r),
                                               rc.target_names);
  }
  auto scaler = models::TargetScaler::fit(rc.train.Y.data, cfg.n_targets, rc.target_names);
  models::RegressionData tr = rc.train;
  tr.Y.data = scaler.transform(tr.Y.data);
  models::MlpConfig mc;
  mc.input_dim = tr.X.cols();
  mc.hidden = 16;
  mc.targets = cfg.n_targets;
  mc.head = head;
  mc.init_std = 0.3;
  mc.seed = seed;
  models::MlpRegressor mlp(mc);
  trainer::TrainerConfig tc;
  tc.max_steps = 200;
  tc.optimizer = trainer::OptimizerKind::adam;
  tc.learning_rate = 0.01;
  tc.save_steps = 0;
  tc.eval_steps = 0;
  trainer::train(tc, mlp, tr, static_cast<const models::RegressionData*>(nullptr), nullptr);
  return models::RegressorBundle::from_mlp("mlp-" + std::to_string(seed), rc.tfidf, std::move(mlp), scaler,
                                           rc.target_names);
}

}  // namespace psyche::testing
