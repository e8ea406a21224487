// SPDX-License-Identifier: Apache-2.0
//
// Resumable training loop, checkpoint directories with rotation, and the
// post-hoc checkpoint sweep.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/common.hpp"
#include "psyche/random.hpp"

namespace psyche::trainer {

using json = nlohmann::json;
using ad::Parameter;
using ad::Shape;
using ad::shape_numel;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Configuration

enum class OptimizerKind { sgd, adam };
enum class ScheduleKind { constant, linear_decay };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected sgd or adam)");
}

inline std::string_view schedule_name(ScheduleKind k) {
  return k == ScheduleKind::constant ? "constant" : "linear_decay";
}
inline ScheduleKind parse_schedule(std::string_view s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "linear_decay") return ScheduleKind::linear_decay;
  throw ConfigError("unknown schedule '" + std::string(s) + "' (expected constant or linear_decay)");
}

struct TrainerConfig {
  std::uint64_t max_steps = 500;
  std::uint64_t batch_size = 32;
  double learning_rate = 0.01;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  ScheduleKind schedule = ScheduleKind::constant;
  std::uint64_t save_steps = 100;  // 0 disables checkpointing
  std::uint64_t save_total_limit = 3;
  std::uint64_t eval_steps = 100;  // 0 disables periodic evaluation
  std::uint64_t seed = 0;
  std::optional<double> grad_clip;
  std::optional<std::uint64_t> kill_after_steps;

  void validate() const {
    if (max_steps == 0) throw ConfigError("max_steps must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be > 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (save_steps > max_steps) throw ConfigError("save_steps must not exceed max_steps");
    if (save_total_limit == 0) throw ConfigError("save_total_limit must be >= 1");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0,1)");
  }

  /// Learning rate applied at (1-based) `step`.
  double lr_at(std::uint64_t step) const {
    if (schedule == ScheduleKind::constant) return learning_rate;
    return learning_rate * static_cast<double>(max_steps - (step - 1)) / static_cast<double>(max_steps);
  }

  json to_json() const {
    json j = {{"max_steps", max_steps},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"optimizer", optimizer_name(optimizer)},
              {"beta1", beta1},
              {"beta2", beta2},
              {"adam_eps", adam_eps},
              {"schedule", schedule_name(schedule)},
              {"save_steps", save_steps},
              {"save_total_limit", save_total_limit},
              {"eval_steps", eval_steps},
              {"seed", seed}};
    j["grad_clip"] = grad_clip ? json(*grad_clip) : json(nullptr);
    j["kill_after_steps"] = kill_after_steps ? json(*kill_after_steps) : json(nullptr);
    return j;
  }

  static TrainerConfig from_json(const json& j) {
    TrainerConfig c;
    try {
      c.max_steps = j.value("max_steps", c.max_steps);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.optimizer = parse_optimizer(j.value("optimizer", std::string("sgd")));
      c.beta1 = j.value("beta1", c.beta1);
      c.beta2 = j.value("beta2", c.beta2);
      c.adam_eps = j.value("adam_eps", c.adam_eps);
      c.schedule = parse_schedule(j.value("schedule", std::string("constant")));
      c.save_steps = j.value("save_steps", c.save_steps);
      c.save_total_limit = j.value("save_total_limit", c.save_total_limit);
      c.eval_steps = j.value("eval_steps", c.eval_steps);
      c.seed = j.value("seed", c.seed);
      if (j.contains("grad_clip") && !j["grad_clip"].is_null()) c.grad_clip = j["grad_clip"].get<double>();
      if (j.contains("kill_after_steps") && !j["kill_after_steps"].is_null())
        c.kill_after_steps = j["kill_after_steps"].get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("trainer config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Checkpoint state

struct NamedTensor {
  std::string name;
  Tensor value;
  bool operator==(const NamedTensor&) const = default;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  std::uint64_t t = 0;        // number of updates applied
  std::vector<Tensor> m, v;   // Adam moments, one per parameter; empty for SGD
  bool operator==(const OptimizerState&) const = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::vector<NamedTensor> parameters;
  OptimizerState optimizer;
  ScheduleKind schedule = ScheduleKind::constant;
  double base_lr = 0.0;
  std::uint64_t schedule_horizon = 0;
  std::string rng_state;        // generator state before the current epoch's shuffle
  std::uint64_t epoch = 0;
  std::uint64_t data_cursor = 0;  // position inside the epoch permutation
  std::string checksum;           // filled on save and load
  fs::path path;
};

namespace detail {

inline constexpr std::string_view kPrefix = "checkpoint-";
inline constexpr std::uint32_t kFormat = 1;

inline std::optional<std::uint64_t> step_of(const fs::path& dir) {
  std::string name = dir.filename().string();
  if (name.rfind(kPrefix, 0) != 0) return std::nullopt;
  std::string_view digits(name);
  digits.remove_prefix(kPrefix.size());
  if (digits.empty()) return std::nullopt;
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
  if (ec != std::errc() || p != digits.data() + digits.size()) return std::nullopt;
  return v;
}

inline void put_tensors(ByteWriter& w, std::span<const Tensor> ts) {
  for (const auto& t : ts) w.put_array<double>(t.data);
}

inline std::vector<Tensor> get_tensors(ByteReader& r, std::span<const Shape> shapes) {
  std::vector<Tensor> out;
  for (const auto& s : shapes) out.emplace_back(s, r.get_array<double>(shape_numel(s)));
  return out;
}

struct Blobs {
  std::vector<std::byte> params, optim;
  std::string rng;
};

inline Blobs encode(const Checkpoint& c) {
  Blobs b;
  ByteWriter pw;
  for (const auto& p : c.parameters) pw.put_array<double>(p.value.data);
  b.params = std::move(pw.bytes());
  ByteWriter ow;
  put_tensors(ow, c.optimizer.m);
  put_tensors(ow, c.optimizer.v);
  b.optim = std::move(ow.bytes());
  b.rng = c.rng_state;
  return b;
}

inline json manifest_of(const Checkpoint& c, const Blobs& b) {
  json params = json::array();
  for (const auto& p : c.parameters) params.push_back({{"name", p.name}, {"shape", p.value.shape}});
  return {{"format", kFormat},
          {"step", c.step},
          {"parameters", params},
          {"optimizer", {{"kind", optimizer_name(c.optimizer.kind)}, {"t", c.optimizer.t},
                         {"moments", !c.optimizer.m.empty()}}},
          {"schedule", {{"kind", schedule_name(c.schedule)}, {"base_lr", c.base_lr},
                        {"horizon", c.schedule_horizon}, {"position", c.step}}},
          {"epoch", c.epoch},
          {"data_cursor", c.data_cursor},
          {"files", {{"params.bin", sha256_hex(b.params)},
                     {"optim.bin", sha256_hex(b.optim)},
                     {"rng.txt", Sha256().update(b.rng).hex()}}}};
}

}  // namespace detail

/// Reads and verifies one checkpoint directory. Any mismatch names the file.
inline Checkpoint load_checkpoint(const fs::path& dir) {
  auto fail = [&](const std::string& file, const std::string& why) -> CheckpointError {
    return CheckpointError((dir / file).string() + ": " + why);
  };
  auto read = [&](const char* file) {
    try {
      return read_file(dir / file);
    } catch (const IoError&) {
      throw fail(file, "missing or unreadable");
    }
  };
  auto manifest_bytes = read("manifest.json");
  auto checksum_bytes = read("checksum.sha256");
  std::string expected(reinterpret_cast<const char*>(checksum_bytes.data()), checksum_bytes.size());
  while (!expected.empty() && std::isspace(static_cast<unsigned char>(expected.back()))) expected.pop_back();
  const std::string actual = sha256_hex(manifest_bytes);
  if (expected != actual) throw fail("manifest.json", "checksum mismatch");

  json m;
  try {
    m = json::parse(reinterpret_cast<const char*>(manifest_bytes.data()),
                    reinterpret_cast<const char*>(manifest_bytes.data()) + manifest_bytes.size());
  } catch (const json::exception& e) {
    throw fail("manifest.json", e.what());
  }

  Checkpoint c;
  c.path = dir;
  c.checksum = actual;
  std::vector<Shape> shapes;
  try {
    if (m.at("format").get<std::uint32_t>() != detail::kFormat) throw fail("manifest.json", "unsupported format");
    c.step = m.at("step").get<std::uint64_t>();
    for (const auto& p : m.at("parameters")) {
      shapes.push_back(p.at("shape").get<Shape>());
      c.parameters.push_back({p.at("name").get<std::string>(), Tensor()});
    }
    const auto& o = m.at("optimizer");
    c.optimizer.kind = parse_optimizer(o.at("kind").get<std::string>());
    c.optimizer.t = o.at("t").get<std::uint64_t>();
    const auto& s = m.at("schedule");
    c.schedule = parse_schedule(s.at("kind").get<std::string>());
    c.base_lr = s.at("base_lr").get<double>();
    c.schedule_horizon = s.at("horizon").get<std::uint64_t>();
    c.epoch = m.at("epoch").get<std::uint64_t>();
    c.data_cursor = m.at("data_cursor").get<std::uint64_t>();

    const auto& files = m.at("files");
    for (const char* f : {"params.bin", "optim.bin", "rng.txt"}) {
      auto bytes = read(f);
      if (sha256_hex(bytes) != files.at(f).get<std::string>()) throw fail(f, "checksum mismatch");
      if (std::string_view(f) == "params.bin") {
        ByteReader r(bytes);
        for (std::size_t i = 0; i < shapes.size(); ++i)
          c.parameters[i].value = Tensor(shapes[i], r.get_array<double>(shape_numel(shapes[i])));
        if (r.remaining() != 0) throw fail(f, "trailing bytes");
      } else if (std::string_view(f) == "optim.bin") {
        ByteReader r(bytes);
        if (o.at("moments").get<bool>()) {
          c.optimizer.m = detail::get_tensors(r, shapes);
          c.optimizer.v = detail::get_tensors(r, shapes);
        }
        if (r.remaining() != 0) throw fail(f, "trailing bytes");
      } else {
        c.rng_state.assign(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      }
    }
  } catch (const json::exception& e) {
    throw fail("manifest.json", e.what());
  } catch (const FormatError& e) {
    throw fail("params.bin", e.what());
  }
  if (detail::step_of(dir) != c.step) throw fail("manifest.json", "step does not match directory name");
  return c;
}

/// Directory of `checkpoint-<step>` subdirectories with bounded retention.
class CheckpointStore {
 public:
  /// Called with a stage name after each file lands in the temp directory.
  /// Throwing from it simulates a crash mid-save.
  using FaultHook = std::function<void(std::string_view stage)>;

  explicit CheckpointStore(fs::path dir, std::uint64_t save_total_limit = 3)
      : dir_(std::move(dir)), limit_(save_total_limit) {
    if (limit_ == 0) throw ConfigError("save_total_limit must be >= 1");
  }

  const fs::path& directory() const { return dir_; }
  std::uint64_t save_total_limit() const { return limit_; }
  void set_fault_hook(FaultHook h) { fault_ = std::move(h); }

  /// Checkpoint directories present, ascending by step. Temp and quarantined
  /// directories are not listed.
  std::vector<std::pair<std::uint64_t, fs::path>> list() const {
    std::vector<std::pair<std::uint64_t, fs::path>> out;
    if (!fs::exists(dir_)) return out;
    for (const auto& e : fs::directory_iterator(dir_)) {
      if (!e.is_directory()) continue;
      if (auto s = detail::step_of(e.path())) out.emplace_back(*s, e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<fs::path> retained() const {
    std::vector<fs::path> out;
    for (auto& [s, p] : list()) out.push_back(p);
    return out;
  }

  /// Writes into a temp directory, then renames it into place and rotates.
  fs::path save(Checkpoint c) {
    fs::create_directories(dir_);
    const fs::path final_dir = dir_ / (std::string(detail::kPrefix) + std::to_string(c.step));
    const fs::path tmp = dir_ / (".tmp-" + final_dir.filename().string() + "-" + std::to_string(::getpid()));
    std::error_code ec;
    fs::remove_all(tmp, ec);
    try {
      fs::create_directory(tmp);
      auto blobs = detail::encode(c);
      const std::string manifest = detail::manifest_of(c, blobs).dump(2) + "\n";
      write_file_synced(tmp / "params.bin", blobs.params);
      hook("params.bin");
      write_file_synced(tmp / "optim.bin", blobs.optim);
      hook("optim.bin");
      write_file_synced(tmp / "rng.txt", blobs.rng);
      hook("rng.txt");
      write_file_synced(tmp / "manifest.json", manifest);
      hook("manifest.json");
      write_file_synced(tmp / "checksum.sha256", sha256_hex(std::span(
                                                      reinterpret_cast<const std::byte*>(manifest.data()),
                                                      manifest.size())) + "\n");
      hook("checksum.sha256");
      if (fs::exists(final_dir)) quarantine(final_dir);
      fs::rename(tmp, final_dir);
      hook("rename");
    } catch (...) {
      fs::remove_all(tmp, ec);
      throw;
    }
    rotate();
    return final_dir;
  }

  /// Highest-step checkpoint that verifies; invalid ones are skipped with a
  /// warning.
  std::optional<Checkpoint> latest() const {
    auto all = list();
    for (auto it = all.rbegin(); it != all.rend(); ++it) {
      try {
        return load_checkpoint(it->second);
      } catch (const CheckpointError& e) {
        warn(std::string("skipping invalid checkpoint: ") + e.what());
      }
    }
    return std::nullopt;
  }

  /// Removes all but the `save_total_limit` highest-step directories.
  void rotate() const {
    auto all = list();
    if (all.size() <= limit_) return;
    for (std::size_t i = 0; i + limit_ < all.size(); ++i) fs::remove_all(all[i].second);
  }

 private:
  void hook(std::string_view stage) {
    if (fault_) fault_(stage);
  }

  // A directory already holding this step can only be a leftover that failed
  // to verify (resume never rewinds past a valid one). Keep it for inspection.
  void quarantine(const fs::path& p) {
    for (int k = 0;; ++k) {
      fs::path q = dir_ / ("." + p.filename().string() + ".invalid-" + std::to_string(k));
      if (!fs::exists(q)) {
        warn("moving aside unverifiable " + p.string() + " to " + q.string());
        fs::rename(p, q);
        return;
      }
    }
  }

  fs::path dir_;
  std::uint64_t limit_;
  FaultHook fault_;
};

inline std::optional<Checkpoint> latest_checkpoint(const CheckpointStore& store) { return store.latest(); }

// ---------------------------------------------------------------------------
// Training loop

template <class M>
concept TrainableModel = requires(M m, Tape& tape, const typename M::Data& d, std::span<const std::size_t> rows) {
  { m.parameters() } -> std::convertible_to<std::vector<Parameter*>>;
  { m.loss(tape, d, rows) } -> std::same_as<Var>;
  { d.size() } -> std::convertible_to<std::size_t>;
};

struct TrainReport {
  std::uint64_t start_step = 0;  // step restored from (0 when fresh)
  std::uint64_t final_step = 0;
  std::vector<std::pair<std::uint64_t, double>> train_loss;
  std::vector<std::pair<std::uint64_t, double>> val_loss;
  std::vector<fs::path> saved;
  bool killed = false;
  bool diverged = false;
  std::string divergence;

  json to_json() const {
    json j = {{"start_step", start_step}, {"final_step", final_step}, {"killed", killed},
              {"diverged", diverged}, {"divergence", divergence}};
    j["train_loss"] = json::array();
    for (auto& [s, l] : train_loss) j["train_loss"].push_back({s, std::isfinite(l) ? json(l) : json(nullptr)});
    j["val_loss"] = json::array();
    for (auto& [s, l] : val_loss) j["val_loss"].push_back({s, std::isfinite(l) ? json(l) : json(nullptr)});
    j["saved"] = json::array();
    for (auto& p : saved) j["saved"].push_back(p.string());
    return j;
  }
};

inline constexpr double kDivergenceThreshold = 1e12;

/// Mean loss over the whole dataset in natural row order; used both for
/// periodic evaluation and the sweep so the two agree bit for bit.
template <TrainableModel M>
double evaluate(M& model, const typename M::Data& data) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  auto rows = iota_indices(data.size());
  Tape tape;
  return model.loss(tape, data, rows).value().item();
}

/// Copies checkpointed values into the model's parameters, by position, with
/// name and shape checks.
template <TrainableModel M>
void load_parameters(M& model, const std::vector<NamedTensor>& values) {
  auto params = model.parameters();
  if (params.size() != values.size())
    throw CheckpointError("checkpoint has " + std::to_string(values.size()) + " parameters, model has " +
                          std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != values[i].name || params[i]->value.shape != values[i].value.shape)
      throw CheckpointError("checkpoint parameter '" + values[i].name + "' does not match model parameter '" +
                            params[i]->name + "'");
    params[i]->value = values[i].value;
  }
}

/// Runs from the latest valid checkpoint in `store` (or step 0) to
/// config.max_steps. Pass store = nullptr to train without checkpoints.
template <TrainableModel M>
TrainReport train(const TrainerConfig& cfg, M& model, const typename M::Data& train_data,
                  const typename M::Data* val_data, CheckpointStore* store, bool resume = true) {
  cfg.validate();
  const std::size_t n = train_data.size();
  if (n == 0) throw ContractError("train: empty training set");
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, n);

  auto params = model.parameters();
  OptimizerState opt;
  opt.kind = cfg.optimizer;
  if (cfg.optimizer == OptimizerKind::adam)
    for (auto* p : params) {
      opt.m.push_back(Tensor::zeros(p->value.shape));
      opt.v.push_back(Tensor::zeros(p->value.shape));
    }

  Rng rng(cfg.seed);
  std::uint64_t epoch = 0, cursor = 0, step = 0;
  std::string epoch_rng = rng.state();
  std::vector<std::size_t> perm;

  TrainReport report;
  if (store && resume) {
    bool any = !store->list().empty();
    auto ck = store->latest();
    if (!ck && any)
      throw CheckpointError("refusing to resume: no checkpoint in " + store->directory().string() +
                            " verifies (see warnings for the failing files)");
    if (ck) {
      load_parameters(model, ck->parameters);
      if (ck->optimizer.kind != cfg.optimizer) throw CheckpointError("checkpoint optimizer differs from config");
      opt = ck->optimizer;
      step = ck->step;
      epoch = ck->epoch;
      cursor = ck->data_cursor;
      epoch_rng = ck->rng_state;
      rng.set_state(epoch_rng);
      perm = iota_indices(n);
      rng.shuffle(perm);
    }
  }
  report.start_step = step;
  report.final_step = step;
  if (perm.empty()) {
    perm = iota_indices(n);
    rng.shuffle(perm);
  }

  auto snapshot = [&]() {
    Checkpoint c;
    c.step = step;
    for (auto* p : params) c.parameters.push_back({p->name, p->value});
    c.optimizer = opt;
    c.schedule = cfg.schedule;
    c.base_lr = cfg.learning_rate;
    c.schedule_horizon = cfg.max_steps;
    c.rng_state = epoch_rng;
    c.epoch = epoch;
    c.data_cursor = cursor;
    return c;
  };

  std::uint64_t done = 0;
  std::vector<std::size_t> rows(batch);
  while (step < cfg.max_steps) {
    if (cursor + batch > n) {
      ++epoch;
      cursor = 0;
      epoch_rng = rng.state();
      perm = iota_indices(n);
      rng.shuffle(perm);
    }
    std::copy_n(perm.begin() + static_cast<std::ptrdiff_t>(cursor), batch, rows.begin());
    cursor += batch;
    ++step;

    for (auto* p : params) p->zero_grad();
    Tape tape;
    Var loss = model.loss(tape, train_data, rows);
    const double lv = loss.value().item();
    report.train_loss.emplace_back(step, lv);
    report.final_step = step;
    if (!std::isfinite(lv) || std::abs(lv) > kDivergenceThreshold) {
      report.diverged = true;
      report.divergence = "loss " + std::to_string(lv) + " at step " + std::to_string(step);
      warn("training diverged: " + report.divergence);
      return report;
    }
    tape.backward(loss);

    if (cfg.grad_clip) {
      double sq = 0.0;
      for (auto* p : params)
        for (double g : p->grad.data) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > *cfg.grad_clip) {
        const double f = *cfg.grad_clip / norm;
        for (auto* p : params)
          for (double& g : p->grad.data) g *= f;
      }
    }

    const double lr = cfg.lr_at(step);
    ++opt.t;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto* p = params[k];
      if (!p->trainable) continue;
      if (cfg.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) p->value.data[i] -= lr * p->grad.data[i];
      } else {
        auto& m = opt.m[k].data;
        auto& v = opt.v[k].data;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
          const double g = p->grad.data[i];
          m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
          v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
          p->value.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
        }
      }
    }

    if (val_data && cfg.eval_steps && step % cfg.eval_steps == 0)
      report.val_loss.emplace_back(step, evaluate(model, *val_data));
    if (store && cfg.save_steps && step % cfg.save_steps == 0) report.saved.push_back(store->save(snapshot()));

    ++done;
    if (cfg.kill_after_steps && done >= *cfg.kill_after_steps && step < cfg.max_steps) {
      report.killed = true;
      return report;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepResult {
  std::uint64_t best_step = 0;
  double best_loss = 0.0;
  std::vector<std::pair<std::uint64_t, double>> losses;  // ascending by step

  std::string to_csv() const {
    std::string out = "step,val_loss\n";
    char buf[64];
    for (auto& [s, l] : losses) {
      std::snprintf(buf, sizeof buf, "%llu,%.17g\n", static_cast<unsigned long long>(s), l);
      out += buf;
    }
    return out;
  }
};

/// Global minimum of a loss curve; ties go to the earliest step.
inline SweepResult select_best(std::vector<std::pair<std::uint64_t, double>> losses) {
  if (losses.empty()) throw ContractError("sweep: no valid checkpoints");
  std::sort(losses.begin(), losses.end());
  SweepResult r;
  r.losses = std::move(losses);
  r.best_step = r.losses.front().first;
  r.best_loss = r.losses.front().second;
  for (auto& [s, l] : r.losses)
    if (l < r.best_loss) {
      r.best_loss = l;
      r.best_step = s;
    }
  return r;
}

/// Evaluates every verifiable checkpoint in `dir` with `evaluator`.
inline SweepResult sweep_checkpoints(const fs::path& dir, const std::function<double(const Checkpoint&)>& evaluator) {
  CheckpointStore store(dir);
  std::vector<std::pair<std::uint64_t, double>> losses;
  for (auto& [step, path] : store.list()) {
    try {
      auto ck = load_checkpoint(path);
      losses.emplace_back(step, evaluator(ck));
    } catch (const CheckpointError& e) {
      warn(std::string("sweep skipping invalid checkpoint: ") + e.what());
    }
  }
  if (losses.empty()) throw ContractError("sweep: no valid checkpoints in " + dir.string());
  return select_best(std::move(losses));
}

template <TrainableModel M>
SweepResult sweep_checkpoints(const fs::path& dir, M& model, const typename M::Data& val_data) {
  return sweep_checkpoints(dir, [&](const Checkpoint& ck) {
    load_parameters(model, ck.parameters);
    return evaluate(model, val_data);
  });
}

}  // namespace psyche::trainer
