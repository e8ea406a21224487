// SPDX-License-Identifier: Apache-2.0
//
// Self-validating model bundles for the regression predictors: the fitted
// TF-IDF model, the target scaler and the weights, optionally 4-bit encoded.
#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psyche/common.hpp"
#include "psyche/corpus.hpp"
#include "psyche/features.hpp"
#include "psyche/models.hpp"
#include "psyche/quant.hpp"

namespace psyche::models {

inline constexpr int kBundleFormat = 1;

enum class ModelKind { mlp, ridge };

inline std::string_view model_kind_name(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "ridge"; }

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "mlp") return ModelKind::mlp;
  if (s == "ridge") return ModelKind::ridge;
  throw FormatError("unknown model kind '" + std::string(s) + "'");
}

/// A text regressor ready to serve: cleans, featurises, predicts and maps
/// predictions back to target units. Prediction only reads parameters (the
/// tape copies them), so one bundle can serve concurrent requests.
class RegressorBundle {
 public:
  RegressorBundle() = default;

  static RegressorBundle from_mlp(std::string name, features::TfIdfModel tfidf, MlpRegressor model,
                                  std::optional<TargetScaler> scaler, std::vector<std::string> target_names) {
    RegressorBundle b;
    b.kind_ = ModelKind::mlp;
    b.init(std::move(name), std::move(tfidf), std::move(scaler), std::move(target_names), model.config().targets);
    if (model.config().input_dim != b.tfidf_.dim()) throw ShapeError("bundle: model input width differs from tfidf dim");
    b.mlp_ = std::move(model);
    return b;
  }

  static RegressorBundle from_ridge(std::string name, features::TfIdfModel tfidf, RidgeRegressor model,
                                    std::vector<std::string> target_names) {
    RegressorBundle b;
    b.kind_ = ModelKind::ridge;
    b.init(std::move(name), std::move(tfidf), std::nullopt, std::move(target_names), model.targets());
    if (model.input_dim() != b.tfidf_.dim()) throw ShapeError("bundle: model input width differs from tfidf dim");
    b.ridge_ = std::move(model);
    return b;
  }

  const std::string& name() const { return name_; }
  ModelKind kind() const { return kind_; }
  const std::vector<std::string>& target_names() const { return target_names_; }
  const features::TfIdfModel& tfidf() const { return tfidf_; }
  const std::optional<TargetScaler>& scaler() const { return scaler_; }
  MlpRegressor& mlp() { return mlp_; }
  const RidgeRegressor& ridge() const { return ridge_; }

  /// Predictions in target units for a batch of raw texts, row-major [n, t].
  std::vector<double> predict(const std::vector<std::string>& texts) {
    std::vector<std::string> cleaned;
    for (const auto& t : texts) cleaned.push_back(corpus::clean_text(t));
    auto X = features::transform_dense(tfidf_, cleaned);
    std::vector<double> y;
    if (kind_ == ModelKind::ridge) {
      y = ridge_.predict(X);
    } else {
      y = mlp_.predict(Tensor({texts.size(), tfidf_.dim()}, std::move(X))).data;
    }
    if (scaler_) y = scaler_->inverse(y);
    return y;
  }

  std::map<std::string, double> predict_one(std::string_view text) {
    auto y = predict({std::string(text)});
    std::map<std::string, double> out;
    for (std::size_t t = 0; t < target_names_.size(); ++t) out[target_names_[t]] = y[t];
    return out;
  }

  /// Interval every prediction of target t falls in, when the head is bounded.
  std::optional<std::pair<double, double>> output_bounds(std::size_t t) const {
    if (kind_ != ModelKind::mlp || mlp_.config().head != HeadKind::bounded) return std::nullopt;
    double lo = mlp_.config().lo, hi = mlp_.config().hi;
    if (scaler_) {
      lo = lo * scaler_->stddev()[t] + scaler_->mean()[t];
      hi = hi * scaler_->stddev()[t] + scaler_->mean()[t];
    }
    return std::make_pair(lo, hi);
  }

 private:
  void init(std::string name, features::TfIdfModel tfidf, std::optional<TargetScaler> scaler,
            std::vector<std::string> names, std::size_t targets) {
    if (name.empty()) throw ConfigError("bundle name must not be empty");
    if (names.size() != targets) throw ShapeError("bundle: target names do not match model outputs");
    if (scaler && scaler->size() != targets) throw ShapeError("bundle: scaler width does not match model outputs");
    name_ = std::move(name);
    tfidf_ = std::move(tfidf);
    scaler_ = std::move(scaler);
    target_names_ = std::move(names);
  }

  std::string name_;
  ModelKind kind_ = ModelKind::ridge;
  features::TfIdfModel tfidf_;
  std::optional<TargetScaler> scaler_;
  std::vector<std::string> target_names_;
  MlpRegressor mlp_;
  RidgeRegressor ridge_;
};

namespace detail {

struct BlobEntry {
  std::string name;
  Tensor value;
  bool quantizable = false;
};

inline std::vector<BlobEntry> bundle_tensors(RegressorBundle& b) {
  std::vector<BlobEntry> out;
  if (b.kind() == ModelKind::mlp) {
    for (Parameter* p : b.mlp().parameters()) out.push_back({p->name, p->value, p->value.shape.size() == 2});
  } else {
    const auto& r = b.ridge();
    out.push_back({"ridge.weight", Tensor({r.input_dim(), r.targets()}, r.weights()), true});
    out.push_back({"ridge.intercept", Tensor({r.targets()}, r.intercept()), false});
  }
  return out;
}

inline json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace detail

/// Writes manifest.json, weights.bin and checksum.sha256 (the manifest's
/// digest). With quantize = true every weight matrix is stored as 4-bit codes
/// plus f32 block scales; vectors stay f64.
inline void save_bundle(RegressorBundle& b, const fs::path& dir, bool quantize = false,
                        std::size_t block_size = 32) {
  fs::create_directories(dir);
  ByteWriter w;
  json tensors = json::array();
  for (auto& e : detail::bundle_tensors(b)) {
    const std::size_t offset = w.bytes().size();
    const bool q = quantize && e.quantizable;
    if (q) {
      auto blob = quantize_weights(e.value, block_size).serialize();
      w.bytes().insert(w.bytes().end(), blob.begin(), blob.end());
    } else {
      w.put_array<double>(e.value.data);
    }
    tensors.push_back({{"name", e.name},
                       {"shape", e.value.shape},
                       {"encoding", q ? "q4" : "f64"},
                       {"offset", offset},
                       {"length", w.bytes().size() - offset}});
  }
  json m = {{"kind", "regressor"},
            {"format", kBundleFormat},
            {"name", b.name()},
            {"model", model_kind_name(b.kind())},
            {"target_names", b.target_names()},
            {"scaler", b.scaler() ? b.scaler()->to_json() : json(nullptr)},
            {"tfidf", b.tfidf().to_json()},
            {"tensors", tensors},
            {"weights_sha256", sha256_hex(w.bytes())}};
  if (b.kind() == ModelKind::mlp) {
    const auto& c = b.mlp().config();
    m["architecture"] = {{"input_dim", c.input_dim}, {"hidden", c.hidden}, {"targets", c.targets},
                         {"head", head_name(c.head)}, {"lo", c.lo},         {"hi", c.hi}};
  }
  const std::string manifest = m.dump(2) + "\n";
  write_file_atomic(dir / "weights.bin", w.bytes());
  write_file_atomic(dir / "manifest.json", std::string_view(manifest));
  write_file_atomic(dir / "checksum.sha256", std::string_view(sha256_hex(std::string_view(manifest)) + "\n"));
}

/// Loads and verifies a bundle; any checksum or shape mismatch is an error
/// naming the offending file.
inline RegressorBundle load_bundle(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json", wpath = dir / "weights.bin", cpath = dir / "checksum.sha256";
  for (const auto& p : {mpath, wpath, cpath})
    if (!fs::exists(p)) throw IoError(p.string() + ": missing");
  const std::string manifest_text = read_text_file(mpath);
  std::string expected = read_text_file(cpath);
  while (!expected.empty() && std::isspace(static_cast<unsigned char>(expected.back()))) expected.pop_back();
  if (sha256_hex(std::string_view(manifest_text)) != expected) throw ValidationError(mpath.string() + ": checksum mismatch");
  const json m = detail::read_json_file(mpath);
  if (m.value("kind", "") != "regressor") throw FormatError(dir.string() + " is not a regressor bundle");
  if (m.value("format", 0) != kBundleFormat) throw FormatError(mpath.string() + ": unsupported format");
  const auto bytes = read_file(wpath);
  if (sha256_hex(bytes) != m.at("weights_sha256").get<std::string>())
    throw ValidationError(wpath.string() + ": checksum mismatch");

  try {
    std::map<std::string, Tensor> tensors;
    for (const auto& t : m.at("tensors")) {
      const auto shape = t.at("shape").get<ad::Shape>();
      const auto offset = t.at("offset").get<std::size_t>(), length = t.at("length").get<std::size_t>();
      if (offset > bytes.size() || length > bytes.size() - offset)
        throw FormatError(wpath.string() + ": tensor '" + t.at("name").get<std::string>() + "' out of range");
      std::span<const std::byte> blob(bytes.data() + offset, length);
      Tensor value;
      if (t.at("encoding") == "q4") {
        value = QuantizedLinear::deserialize(blob).dequantize();
      } else {
        ByteReader r(blob);
        value = Tensor(shape, r.get_array<double>(ad::shape_numel(shape)));
        if (r.remaining() != 0) throw FormatError(wpath.string() + ": tensor length mismatch");
      }
      if (value.shape != shape) throw FormatError(wpath.string() + ": tensor shape mismatch");
      tensors.emplace(t.at("name").get<std::string>(), std::move(value));
    }
    auto take = [&](const std::string& name) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw FormatError(mpath.string() + ": missing tensor '" + name + "'");
      return it->second;
    };

    auto tfidf = features::TfIdfModel::from_json(m.at("tfidf"));
    auto names = m.at("target_names").get<std::vector<std::string>>();
    std::string name = m.at("name").get<std::string>();
    if (parse_model_kind(m.at("model").get<std::string>()) == ModelKind::ridge) {
      Tensor w = take("ridge.weight"), b = take("ridge.intercept");
      return RegressorBundle::from_ridge(std::move(name), std::move(tfidf),
                                         RidgeRegressor(w.shape.at(0), b.numel(), w.data, b.data), std::move(names));
    }
    const auto& a = m.at("architecture");
    MlpConfig cfg;
    cfg.input_dim = a.at("input_dim").get<std::size_t>();
    cfg.hidden = a.at("hidden").get<std::size_t>();
    cfg.targets = a.at("targets").get<std::size_t>();
    cfg.head = parse_head(a.at("head").get<std::string>());
    cfg.lo = a.at("lo").get<double>();
    cfg.hi = a.at("hi").get<double>();
    MlpRegressor mlp(cfg);
    for (Parameter* p : mlp.parameters()) {
      Tensor v = take(p->name);
      if (v.shape != p->value.shape) throw FormatError(mpath.string() + ": shape mismatch for '" + p->name + "'");
      p->value = std::move(v);
    }
    std::optional<TargetScaler> scaler;
    if (!m.at("scaler").is_null()) scaler = TargetScaler::from_json(m.at("scaler"));
    return RegressorBundle::from_mlp(std::move(name), std::move(tfidf), std::move(mlp), std::move(scaler),
                                     std::move(names));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
}

/// Bytes used by the weight blob of a saved bundle.
inline std::uintmax_t bundle_weight_bytes(const fs::path& dir) { return fs::file_size(dir / "weights.bin"); }

}  // namespace psyche::models
