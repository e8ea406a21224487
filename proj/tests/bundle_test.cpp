// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "service_fixtures.hpp"
#include "test_util.hpp"

namespace psyche::models {
namespace {

using testing::TempDir;

const std::vector<std::string> kTexts = {"tok1 tok2 tok3 tok3", "", "tok7 http://example.com tok40", "unknown words"};

void append_byte(const fs::path& p) {
  std::ofstream f(p, std::ios::app | std::ios::binary);
  f << 'x';
}

TEST(Bundle, RoundtripReproducesPredictionsExactly) {
  TempDir dir;
  for (auto kind : {ModelKind::mlp, ModelKind::ridge}) {
    auto b = testing::small_bundle(kind);
    auto expected = b.predict(kTexts);
    const fs::path path = dir / std::string(model_kind_name(kind));
    save_bundle(b, path);
    auto loaded = load_bundle(path);
    EXPECT_EQ(loaded.name(), b.name());
    EXPECT_EQ(loaded.kind(), kind);
    EXPECT_EQ(loaded.target_names(), b.target_names());
    EXPECT_EQ(loaded.predict(kTexts), expected);
  }
}

TEST(Bundle, EmptyTextPredictsTheZeroVectorOutput) {
  auto b = testing::small_bundle(ModelKind::mlp);
  Tensor zero = Tensor::zeros({1, b.tfidf().dim()});
  auto raw = b.mlp().predict(zero).data;
  auto expected = b.scaler()->inverse(raw);
  EXPECT_EQ(b.predict({""}), expected);
}

TEST(Bundle, QuantizedRoundtripIsCloseAndSmall) {
  TempDir dir;
  auto b = testing::small_bundle(ModelKind::mlp);
  save_bundle(b, dir / "q", true);
  auto q = load_bundle(dir / "q");

  // Each stored matrix dequantizes within half a block scale.
  auto params = b.mlp().parameters();
  auto qparams = q.mlp().parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& w = params[i]->value;
    if (w.shape.size() != 2) {
      EXPECT_EQ(qparams[i]->value, w);
      continue;
    }
    auto ql = quantize_weights(w, 32);
    for (std::size_t k = 0; k < w.numel(); ++k) {
      ASSERT_LE(std::abs(qparams[i]->value.data[k] - w.data[k]), ql.scales[k / 32] / 2);
    }
  }

  auto manifest = nlohmann::json::parse(read_text_file(dir / "q" / "manifest.json"));
  std::size_t q4_bytes = 0, q4_elems = 0;
  // Codes and scales only; each blob also carries a 16-byte header plus 8 bytes per dimension.
  for (const auto& t : manifest["tensors"])
    if (t["encoding"] == "q4") {
      const auto shape = t["shape"].get<ad::Shape>();
      q4_bytes += t["length"].get<std::size_t>() - (16 + 8 * shape.size());
      q4_elems += ad::shape_numel(shape);
    }
  ASSERT_GT(q4_elems, 0u);
  EXPECT_LE(static_cast<double>(q4_bytes), 0.32 * 2.0 * static_cast<double>(q4_elems));

  // Predictions on random documents stay strongly correlated with the f64 model.
  Rng rng(8);
  std::vector<std::string> docs(200);
  for (auto& d : docs)
    for (int k = 0; k < 20; ++k) d += "tok" + std::to_string(rng.bounded(80)) + " ";
  auto full = b.predict(docs), approx = q.predict(docs);
  const std::size_t T = b.target_names().size();
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> a, f;
    for (std::size_t i = t; i < full.size(); i += T) {
      a.push_back(approx[i]);
      f.push_back(full[i]);
    }
    double r2 = r_squared(f, a);
    EXPECT_GT(r2, 0.9);
  }
}

TEST(Bundle, TamperingIsDetectedAndNamesTheFile) {
  TempDir dir;
  auto b = testing::small_bundle(ModelKind::ridge);
  for (const char* file : {"weights.bin", "manifest.json", "checksum.sha256"}) {
    const fs::path path = dir / file;
    save_bundle(b, path);
    append_byte(path / file);
    try {
      load_bundle(path);
      FAIL() << "tampered " << file << " loaded";
    } catch (const ValidationError& e) {
      const std::string expect = std::string(file) == "weights.bin" ? "weights.bin" : "manifest.json";
      EXPECT_NE(std::string(e.what()).find(expect), std::string::npos) << e.what();
    }
  }
  fs::remove(dir / "weights.bin" / "weights.bin");
  EXPECT_THROW(load_bundle(dir / "weights.bin"), IoError);
}

TEST(Bundle, BoundedPredictionsStayInsideUnscaledBounds) {
  auto b = testing::small_bundle(ModelKind::mlp, 3);
  // Blow the head up so the sigmoid saturates.
  for (auto* p : b.mlp().parameters())
    for (double& v : p->value.data) v *= 1e4;
  std::vector<std::string> texts = kTexts;
  std::string many;
  for (int i = 0; i < 500; ++i) many += "tok" + std::to_string(i % 80) + " ";
  texts.push_back(many);
  auto y = b.predict(texts);
  const std::size_t T = b.target_names().size();
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto [lo, hi] = *b.output_bounds(i % T);
    EXPECT_GT(y[i], lo);
    EXPECT_LT(y[i], hi);
  }
}

TEST(Bundle, ConstructionValidatesShapes) {
  auto b = testing::small_bundle(ModelKind::ridge);
  EXPECT_THROW(RegressorBundle::from_ridge("x", b.tfidf(), b.ridge(), {"only-one"}), ShapeError);
  EXPECT_THROW(RegressorBundle::from_ridge("", b.tfidf(), b.ridge(), b.target_names()), ConfigError);
}

}  // namespace
}  // namespace psyche::models
