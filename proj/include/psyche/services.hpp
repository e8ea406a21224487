// SPDX-License-Identifier: Apache-2.0
//
// HTTP layer: one predictor service per regression bundle, a generative chat
// service, and the orchestrator that fans a request out to all predictors
// with an independent deadline per endpoint.
#pragma once

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "psyche/bundle.hpp"
#include "psyche/common.hpp"
#include "psyche/persona.hpp"

namespace psyche::services {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

inline constexpr std::size_t kMaxBodyBytes = 64 * 1024;
inline constexpr std::uint64_t kPredictorTimeoutMs = 2000;
inline constexpr std::uint64_t kGenerativeTimeoutMs = 30000;
inline constexpr std::uint64_t kMaxChatTokens = 256;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Addresses

struct HostPort {
  std::string host;
  int port = 0;
};

/// "host:port"; port 0 binds an ephemeral port.
inline HostPort parse_listen(std::string_view s) {
  auto colon = s.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw ConfigError("listen address must be host:port, got '" + std::string(s) + "'");
  HostPort hp{std::string(s.substr(0, colon)), 0};
  try {
    std::size_t used = 0;
    hp.port = std::stoi(std::string(s.substr(colon + 1)), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError("bad port in listen address '" + std::string(s) + "'");
  }
  if (hp.port < 0 || hp.port > 65535) throw ConfigError("port out of range in '" + std::string(s) + "'");
  return hp;
}

struct Url {
  std::string host;
  int port = 80;
  std::string prefix;  // path prepended to the endpoint route, no trailing slash
};

/// http://host[:port][/prefix]
inline Url parse_url(std::string_view s) {
  constexpr std::string_view scheme = "http://";
  if (s.substr(0, scheme.size()) != scheme) throw ConfigError("endpoint url must start with http://, got '" + std::string(s) + "'");
  std::string_view rest = s.substr(scheme.size());
  auto slash = rest.find('/');
  std::string_view authority = rest.substr(0, slash);
  Url u;
  if (slash != std::string_view::npos) u.prefix = std::string(rest.substr(slash));
  while (!u.prefix.empty() && u.prefix.back() == '/') u.prefix.pop_back();
  auto colon = authority.rfind(':');
  if (colon == std::string_view::npos) {
    u.host = std::string(authority);
  } else {
    u.host = std::string(authority.substr(0, colon));
    u.port = parse_listen("x:" + std::string(authority.substr(colon + 1))).port;
  }
  if (u.host.empty()) throw ConfigError("endpoint url has no host: '" + std::string(s) + "'");
  return u;
}

// ---------------------------------------------------------------------------
// Server plumbing

inline json error_body(int status, std::string_view message) {
  return {{"error", {{"status", status}, {"message", message}}}};
}

inline void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

/// Parses a request body as a JSON object or answers 400.
inline std::optional<json> json_object_body(const httplib::Request& req, httplib::Response& res) {
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) {
    send_json(res, 400, error_body(400, "request body is not valid JSON"));
    return std::nullopt;
  }
  if (!j.is_object()) {
    send_json(res, 400, error_body(400, "request body must be a JSON object"));
    return std::nullopt;
  }
  return j;
}

struct ServerOptions {
  std::string cors_origin = "*";
  std::optional<fs::path> request_log;
};

/// httplib::Server with JSON error envelopes, the body size limit, CORS and an
/// optional JSON-lines request log. start() serves on a background thread.
class HttpService {
 public:
  explicit HttpService(ServerOptions opt = {}) : opt_(std::move(opt)) {
    server_.set_payload_max_length(kMaxBodyBytes);
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        std::string msg = res.status == 413 ? "request body exceeds 64 KiB" : httplib::status_message(res.status);
        send_json(res, res.status, error_body(res.status, msg));
      }
      return httplib::Server::HandlerResponse::Handled;
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      send_json(res, 500, error_body(500, msg));
    });
    const std::string origin = opt_.cors_origin;
    server_.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server_.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    if (opt_.request_log) {
      server_.set_logger([this](const httplib::Request& req, const httplib::Response& res) {
        json line = {{"method", req.method}, {"path", req.path}, {"status", res.status},
                     {"request_bytes", req.body.size()}, {"response_bytes", res.body.size()}};
        std::lock_guard lock(log_mu_);
        std::ofstream(*opt_.request_log, std::ios::app) << line.dump() << '\n';
      });
    }
  }

  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;
  ~HttpService() { stop(); }

  httplib::Server& server() { return server_; }

  /// Binds and serves in the background; returns the bound port.
  int start(const std::string& listen) {
    auto hp = parse_listen(listen);
    int port = hp.port;
    if (port == 0) {
      port = server_.bind_to_any_port(hp.host);
      if (port < 0) throw IoError("cannot bind " + listen);
    } else if (!server_.bind_to_port(hp.host, port)) {
      throw IoError("cannot bind " + listen);
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    port_ = port;
    return port;
  }

  /// Binds and serves on the calling thread until stop().
  void run(const std::string& listen) {
    auto hp = parse_listen(listen);
    if (!server_.listen(hp.host, hp.port)) throw IoError("cannot listen on " + listen);
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

 private:
  ServerOptions opt_;
  httplib::Server server_;
  std::thread thread_;
  std::mutex log_mu_;
  int port_ = 0;
};

// ---------------------------------------------------------------------------
// Predictor service

/// POST /predict {"text"} -> {"model", "scores": {target: value}};
/// GET /health -> {"status": "ok", "model"}.
inline std::unique_ptr<HttpService> make_model_service(std::shared_ptr<models::RegressorBundle> bundle,
                                                       ServerOptions opt = {}) {
  auto svc = std::make_unique<HttpService>(std::move(opt));
  auto& s = svc->server();
  s.Get("/health", [bundle](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"model", bundle->name()}});
  });
  s.Post("/predict", [bundle](const httplib::Request& req, httplib::Response& res) {
    auto body = json_object_body(req, res);
    if (!body) return;
    auto it = body->find("text");
    if (it == body->end() || !it->is_string()) {
      send_json(res, 400, error_body(400, "field 'text' (string) is required"));
      return;
    }
    auto scores = bundle->predict_one(it->get<std::string>());
    for (auto& [k, v] : scores)
      if (!std::isfinite(v)) throw Error("model produced a non-finite score for '" + k + "'");
    send_json(res, 200, {{"model", bundle->name()}, {"scores", scores}});
  });
  return svc;
}

// ---------------------------------------------------------------------------
// Generative service

struct ChatRequest {
  persona::PersonaProfile profile;
  std::string message;
  persona::GenerateOptions options;
};

/// Validates a /chat body. Throws ValidationError with a client-facing message.
inline ChatRequest parse_chat_request(const json& j) {
  ChatRequest r;
  auto p = j.find("profile");
  if (p == j.end()) throw ValidationError("field 'profile' is required");
  r.profile = persona::PersonaProfile::from_json(*p);
  auto m = j.find("message");
  if (m == j.end() || !m->is_string()) throw ValidationError("field 'message' (string) is required");
  r.message = m->get<std::string>();
  if (auto s = j.find("seed"); s != j.end() && !s->is_null()) {
    if (!s->is_number_unsigned()) throw ValidationError("'seed' must be a non-negative integer");
    r.options.seed = s->get<std::uint64_t>();
  } else {
    r.options.seed = std::random_device{}();
  }
  if (auto t = j.find("max_tokens"); t != j.end() && !t->is_null()) {
    if (!t->is_number_unsigned() || t->get<std::uint64_t>() < 1 || t->get<std::uint64_t>() > kMaxChatTokens)
      throw ValidationError("'max_tokens' must be an integer in [1, " + std::to_string(kMaxChatTokens) + "]");
    r.options.max_tokens = t->get<std::size_t>();
  }
  if (auto t = j.find("temperature"); t != j.end() && !t->is_null()) {
    if (!t->is_number() || !(t->get<double>() > 0.0)) throw ValidationError("'temperature' must be > 0");
    r.options.temperature = t->get<double>();
  }
  if (auto k = j.find("top_k"); k != j.end() && !k->is_null()) {
    if (!k->is_number_unsigned() || k->get<std::uint64_t>() < 1) throw ValidationError("'top_k' must be >= 1");
    r.options.top_k = k->get<std::size_t>();
  }
  return r;
}

/// POST /chat {"profile", "message", "seed"?, "max_tokens"?} -> {"reply", "tokens"}.
inline std::unique_ptr<HttpService> make_generative_service(std::shared_ptr<persona::TinyLM> model,
                                                            std::string name, ServerOptions opt = {}) {
  auto svc = std::make_unique<HttpService>(std::move(opt));
  auto& s = svc->server();
  s.Get("/health", [name](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"model", name}});
  });
  s.Post("/chat", [model](const httplib::Request& req, httplib::Response& res) {
    auto body = json_object_body(req, res);
    if (!body) return;
    ChatRequest cr;
    try {
      cr = parse_chat_request(*body);
    } catch (const ValidationError& e) {
      send_json(res, 400, error_body(400, e.what()));
      return;
    }
    auto g = persona::generate(*model, cr.profile, cr.message, cr.options);
    send_json(res, 200, {{"reply", g.reply}, {"tokens", g.tokens}});
  });
  return svc;
}

// ---------------------------------------------------------------------------
// Orchestrator configuration

enum class EndpointKind { predictor, generative };

inline std::string_view endpoint_kind_name(EndpointKind k) {
  return k == EndpointKind::predictor ? "predictor" : "generative";
}

inline EndpointKind parse_endpoint_kind(std::string_view s) {
  if (s == "predictor") return EndpointKind::predictor;
  if (s == "generative") return EndpointKind::generative;
  throw ConfigError("endpoint kind must be 'predictor' or 'generative', got '" + std::string(s) + "'");
}

struct Endpoint {
  std::string name;
  std::string url;
  EndpointKind kind = EndpointKind::predictor;
  std::uint64_t timeout_ms = kPredictorTimeoutMs;
};

struct ServiceConfig {
  std::vector<Endpoint> endpoints;
  std::string listen_address = "127.0.0.1:8080";
  std::optional<std::string> request_log_path;
  std::string cors_origin = "*";

  /// Names unique, timeouts positive, URLs well formed, at least one
  /// predictor and at most one generative endpoint.
  void validate() const {
    std::set<std::string> names;
    std::size_t predictors = 0, generative = 0;
    for (const auto& e : endpoints) {
      if (e.name.empty()) throw ConfigError("endpoint name must not be empty");
      if (!names.insert(e.name).second) throw ConfigError("duplicate endpoint name '" + e.name + "'");
      if (e.timeout_ms == 0) throw ConfigError("endpoint '" + e.name + "': timeout_ms must be > 0");
      parse_url(e.url);
      (e.kind == EndpointKind::predictor ? predictors : generative) += 1;
    }
    if (predictors == 0) throw ConfigError("at least one predictor endpoint must be configured");
    if (generative > 1) throw ConfigError("at most one generative endpoint may be configured");
    parse_listen(listen_address);
  }

  const Endpoint* generative() const {
    for (const auto& e : endpoints)
      if (e.kind == EndpointKind::generative) return &e;
    return nullptr;
  }

  /// Missing timeouts default by kind: 2000 ms for predictors, 30000 ms for
  /// the generative endpoint.
  static ServiceConfig from_json(const json& j) {
    ServiceConfig c;
    try {
      for (const auto& e : j.at("endpoints")) {
        Endpoint ep;
        ep.name = e.at("name").get<std::string>();
        ep.url = e.at("url").get<std::string>();
        ep.kind = parse_endpoint_kind(e.value("kind", std::string("predictor")));
        ep.timeout_ms = e.contains("timeout_ms") ? e.at("timeout_ms").get<std::uint64_t>()
                        : ep.kind == EndpointKind::generative ? kGenerativeTimeoutMs
                                                               : kPredictorTimeoutMs;
        c.endpoints.push_back(std::move(ep));
      }
      c.listen_address = j.value("listen_address", c.listen_address);
      if (j.contains("request_log_path") && !j.at("request_log_path").is_null())
        c.request_log_path = j.at("request_log_path").get<std::string>();
      c.cors_origin = j.value("cors_origin", c.cors_origin);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("service config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static ServiceConfig load(const fs::path& p) {
    json j = json::parse(read_text_file(p), nullptr, false);
    if (j.is_discarded()) throw ConfigError(p.string() + ": not valid JSON");
    return from_json(j);
  }

  json to_json() const {
    json eps = json::array();
    for (const auto& e : endpoints)
      eps.push_back({{"name", e.name}, {"url", e.url}, {"kind", endpoint_kind_name(e.kind)}, {"timeout_ms", e.timeout_ms}});
    json j = {{"endpoints", eps}, {"listen_address", listen_address}, {"cors_origin", cors_origin}};
    j["request_log_path"] = request_log_path ? json(*request_log_path) : json(nullptr);
    return j;
  }
};

// ---------------------------------------------------------------------------
// Outbound calls

enum class CallStatus { ok, timeout, error };

inline std::string_view call_status_name(CallStatus s) {
  switch (s) {
    case CallStatus::ok: return "ok";
    case CallStatus::timeout: return "timeout";
    case CallStatus::error: return "error";
  }
  return "error";
}

struct CallResult {
  std::string name;
  CallStatus status = CallStatus::error;
  double latency_ms = 0.0;
  std::optional<json> payload;  // present exactly when status is ok
  std::string error;
  std::optional<int> http_status;

  json to_json() const {
    json j = {{"name", name}, {"status", call_status_name(status)}, {"latency_ms", latency_ms}};
    if (payload) j["payload"] = *payload;
    if (status != CallStatus::ok) j["error"] = error;
    if (http_status) j["http_status"] = *http_status;
    return j;
  }
};

/// One HTTP call bounded by `timeout`. The request runs on a worker thread;
/// at the deadline the client's socket is shut down so the worker returns
/// promptly and is joined before this function returns.
inline CallResult call_endpoint(const Endpoint& ep, const std::string& route, const std::optional<std::string>& body,
                                std::chrono::milliseconds timeout) {
  CallResult r;
  r.name = ep.name;
  const auto t0 = Clock::now();
  Url url;
  try {
    url = parse_url(ep.url);
  } catch (const std::exception& e) {
    r.error = e.what();
    return r;
  }
  auto client = std::make_shared<httplib::Client>(url.host, url.port);
  client->set_connection_timeout(timeout);
  client->set_read_timeout(timeout);
  client->set_write_timeout(timeout);
  client->set_keep_alive(false);

  struct Outcome {
    int status = -1;
    std::string body;
    std::string error;
  };
  std::promise<Outcome> promise;
  auto future = promise.get_future();
  const std::string path = url.prefix + route;
  std::thread worker([client, path, body, p = std::move(promise)]() mutable {
    Outcome o;
    auto res = body ? client->Post(path, *body, "application/json") : client->Get(path);
    if (res) {
      o.status = res->status;
      o.body = std::move(res->body);
    } else {
      o.error = httplib::to_string(res.error());
    }
    p.set_value(std::move(o));
  });

  if (future.wait_until(t0 + timeout) == std::future_status::timeout) {
    client->stop();
    worker.join();
    r.status = CallStatus::timeout;
    r.latency_ms = ms_since(t0);
    r.error = "no response within " + std::to_string(timeout.count()) + " ms";
    return r;
  }
  worker.join();
  Outcome o = future.get();
  r.latency_ms = ms_since(t0);
  if (o.status < 0) {
    // httplib reports its own read timeout as an error; classify by elapsed time.
    r.status = r.latency_ms >= static_cast<double>(timeout.count()) ? CallStatus::timeout : CallStatus::error;
    r.error = o.error;
    return r;
  }
  r.http_status = o.status;
  json parsed = json::parse(o.body, nullptr, false);
  if (o.status != 200) {
    r.error = "upstream returned HTTP " + std::to_string(o.status);
    if (!parsed.is_discarded() && parsed.contains("error") && parsed["error"].contains("message"))
      r.error += ": " + parsed["error"]["message"].get<std::string>();
    return r;
  }
  if (parsed.is_discarded()) {
    r.error = "upstream response is not valid JSON";
    return r;
  }
  r.status = CallStatus::ok;
  r.payload = std::move(parsed);
  return r;
}

// ---------------------------------------------------------------------------
// Orchestration

struct AnalysisResponse {
  std::vector<CallResult> services;  // config order, predictors only
  double overall_elapsed_ms = 0.0;

  json to_json() const {
    json arr = json::array();
    for (const auto& s : services) arr.push_back(s.to_json());
    return {{"services", arr}, {"overall_elapsed_ms", overall_elapsed_ms}};
  }
};

/// Runs fn over the endpoints concurrently, one thread each; results keep
/// the input order.
template <class Fn>
std::vector<CallResult> fan_out(const std::vector<const Endpoint*>& eps, Fn fn) {
  std::vector<CallResult> out(eps.size());
  std::vector<std::thread> threads;
  threads.reserve(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) threads.emplace_back([&, i] { out[i] = fn(*eps[i]); });
  for (auto& t : threads) t.join();
  return out;
}

/// Sends {"text"} to every predictor at once. Never throws on partial
/// failure: each entry carries its own status.
inline AnalysisResponse orchestrate_analyze(const ServiceConfig& cfg, std::string_view text) {
  const auto t0 = Clock::now();
  std::vector<const Endpoint*> eps;
  for (const auto& e : cfg.endpoints)
    if (e.kind == EndpointKind::predictor) eps.push_back(&e);
  const std::string body = json{{"text", text}}.dump();
  AnalysisResponse r;
  r.services = fan_out(eps, [&](const Endpoint& e) {
    return call_endpoint(e, "/predict", body, std::chrono::milliseconds(e.timeout_ms));
  });
  r.overall_elapsed_ms = ms_since(t0);
  return r;
}

/// Proxies a /chat body to the generative endpoint under its own timeout.
inline CallResult orchestrate_chat(const ServiceConfig& cfg, const json& request) {
  const Endpoint* g = cfg.generative();
  if (!g) {
    CallResult r;
    r.name = "generative";
    r.error = "no generative endpoint configured";
    return r;
  }
  return call_endpoint(*g, "/chat", request.dump(), std::chrono::milliseconds(g->timeout_ms));
}

/// GET /health on every endpoint concurrently. Probes use the endpoint's
/// timeout capped at the predictor default.
inline json orchestrate_services(const ServiceConfig& cfg) {
  const auto t0 = Clock::now();
  std::vector<const Endpoint*> eps;
  for (const auto& e : cfg.endpoints) eps.push_back(&e);
  auto results = fan_out(eps, [](const Endpoint& e) {
    return call_endpoint(e, "/health", std::nullopt,
                         std::chrono::milliseconds(std::min<std::uint64_t>(e.timeout_ms, kPredictorTimeoutMs)));
  });
  json arr = json::array();
  for (std::size_t i = 0; i < eps.size(); ++i) {
    json j = results[i].to_json();
    j["kind"] = endpoint_kind_name(eps[i]->kind);
    j["url"] = eps[i]->url;
    j["timeout_ms"] = eps[i]->timeout_ms;
    arr.push_back(std::move(j));
  }
  return {{"services", arr}, {"overall_elapsed_ms", ms_since(t0)}};
}

/// POST /analyze, POST /chat, GET /services, GET /health. Holds no model
/// state; every answer to a well-formed request is HTTP 200 with per-service
/// statuses.
inline std::unique_ptr<HttpService> make_orchestrator(ServiceConfig cfg) {
  cfg.validate();
  ServerOptions opt;
  opt.cors_origin = cfg.cors_origin;
  if (cfg.request_log_path) opt.request_log = *cfg.request_log_path;
  auto svc = std::make_unique<HttpService>(std::move(opt));
  auto shared = std::make_shared<const ServiceConfig>(std::move(cfg));
  auto& s = svc->server();
  s.Get("/health", [shared](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"model", "orchestrator"}, {"endpoints", shared->endpoints.size()}});
  });
  s.Get("/services", [shared](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, orchestrate_services(*shared));
  });
  s.Post("/analyze", [shared](const httplib::Request& req, httplib::Response& res) {
    auto body = json_object_body(req, res);
    if (!body) return;
    auto it = body->find("text");
    if (it == body->end() || !it->is_string()) {
      send_json(res, 400, error_body(400, "field 'text' (string) is required"));
      return;
    }
    send_json(res, 200, orchestrate_analyze(*shared, it->get<std::string>()).to_json());
  });
  s.Post("/chat", [shared](const httplib::Request& req, httplib::Response& res) {
    auto body = json_object_body(req, res);
    if (!body) return;
    send_json(res, 200, orchestrate_chat(*shared, *body).to_json());
  });
  return svc;
}

}  // namespace psyche::services
