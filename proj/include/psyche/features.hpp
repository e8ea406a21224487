// SPDX-License-Identifier: Apache-2.0
//
// TF-IDF with smoothed idf: idf(t) = ln((1 + N) / (1 + df(t))) + 1, followed by
// l2 normalisation of each document vector.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psyche/common.hpp"

namespace psyche::features {

using json = nlohmann::json;

struct SparseVector {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  std::vector<double> dense(std::size_t dim) const {
    std::vector<double> out(dim, 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k) out[indices[k]] = values[k];
    return out;
  }
};

struct Vocabulary {
  std::unordered_map<std::string, std::uint32_t> token_to_id;
  std::vector<std::string> tokens;
  std::vector<std::uint32_t> document_frequency;
  std::uint64_t n_docs = 0;

  std::size_t size() const { return tokens.size(); }
};

template <class F>
void for_each_token(std::string_view doc, F&& f) {
  std::size_t i = 0;
  while (i < doc.size()) {
    while (i < doc.size() && doc[i] == ' ') ++i;
    std::size_t start = i;
    while (i < doc.size() && doc[i] != ' ') ++i;
    if (i > start) f(doc.substr(start, i - start));
  }
}

class TfIdfModel {
 public:
  static constexpr std::uint32_t kDefaultMaxFeatures = 5000;
  static constexpr std::uint32_t kDefaultMinDf = 2;

  /// Keeps the max_features tokens with the highest corpus count among those
  /// with df >= min_df (ties lexicographic); ids follow lexicographic order.
  template <class Docs>
  static TfIdfModel fit(const Docs& docs, std::uint32_t max_features = kDefaultMaxFeatures,
                        std::uint32_t min_df = kDefaultMinDf) {
    if (std::ranges::empty(docs)) throw FitError("fit_tfidf needs at least one document");
    struct Stat {
      std::uint64_t count = 0;
      std::uint32_t df = 0;
      std::uint64_t last_doc = ~std::uint64_t{0};
    };
    std::unordered_map<std::string, Stat> stats;
    std::uint64_t n_docs = 0;
    for (const auto& d : docs) {
      for_each_token(std::string_view(d), [&](std::string_view tok) {
        auto& s = stats[std::string(tok)];
        ++s.count;
        if (s.last_doc != n_docs) {
          ++s.df;
          s.last_doc = n_docs;
        }
      });
      ++n_docs;
    }

    std::vector<std::pair<std::string, Stat>> eligible;
    for (auto& [tok, s] : stats)
      if (s.df >= min_df) eligible.emplace_back(tok, s);
    if (eligible.empty()) throw FitError("fit_tfidf: empty vocabulary after min_df filter");
    std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
      if (a.second.count != b.second.count) return a.second.count > b.second.count;
      return a.first < b.first;
    });
    if (eligible.size() > max_features) eligible.resize(max_features);
    std::sort(eligible.begin(), eligible.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    TfIdfModel m;
    m.max_features_ = max_features;
    m.min_df_ = min_df;
    m.vocab_.n_docs = n_docs;
    for (auto& [tok, s] : eligible) {
      auto id = static_cast<std::uint32_t>(m.vocab_.tokens.size());
      m.vocab_.token_to_id.emplace(tok, id);
      m.vocab_.tokens.push_back(tok);
      m.vocab_.document_frequency.push_back(s.df);
      m.idf_.push_back(std::log((1.0 + static_cast<double>(n_docs)) / (1.0 + s.df)) + 1.0);
    }
    return m;
  }

  /// count * idf per known token, l2-normalised. All-unknown docs map to zero.
  SparseVector transform(std::string_view doc) const {
    std::map<std::uint32_t, double> counts;
    for_each_token(doc, [&](std::string_view tok) {
      auto it = vocab_.token_to_id.find(std::string(tok));
      if (it != vocab_.token_to_id.end()) counts[it->second] += 1.0;
    });
    SparseVector v;
    double ss = 0.0;
    for (auto [id, c] : counts) {
      double x = c * idf_[id];
      v.indices.push_back(id);
      v.values.push_back(x);
      ss += x * x;
    }
    if (ss > 0.0) {
      double inv = 1.0 / std::sqrt(ss);
      for (auto& x : v.values) x *= inv;
    }
    return v;
  }

  std::size_t dim() const { return vocab_.size(); }
  const Vocabulary& vocabulary() const { return vocab_; }
  const std::vector<double>& idf() const { return idf_; }
  std::uint32_t max_features() const { return max_features_; }
  std::uint32_t min_df() const { return min_df_; }

  double idf_of(std::string_view token) const {
    auto it = vocab_.token_to_id.find(std::string(token));
    if (it == vocab_.token_to_id.end()) throw BoundsError("token not in vocabulary");
    return idf_[it->second];
  }

  json to_json() const {
    return {{"tokens", vocab_.tokens},
            {"idf", idf_},
            {"document_frequency", vocab_.document_frequency},
            {"n_docs", vocab_.n_docs},
            {"max_features", max_features_},
            {"min_df", min_df_}};
  }

  static TfIdfModel from_json(const json& j) {
    TfIdfModel m;
    m.vocab_.tokens = j.at("tokens").get<std::vector<std::string>>();
    m.idf_ = j.at("idf").get<std::vector<double>>();
    m.vocab_.document_frequency =
        j.value("document_frequency", std::vector<std::uint32_t>(m.vocab_.tokens.size(), 0));
    m.vocab_.n_docs = j.value("n_docs", std::uint64_t{0});
    m.max_features_ = j.value("max_features", kDefaultMaxFeatures);
    m.min_df_ = j.value("min_df", kDefaultMinDf);
    if (m.idf_.size() != m.vocab_.tokens.size())
      throw FormatError("tfidf model: token and idf arrays differ in length");
    for (std::uint32_t i = 0; i < m.vocab_.tokens.size(); ++i)
      m.vocab_.token_to_id.emplace(m.vocab_.tokens[i], i);
    return m;
  }

 private:
  Vocabulary vocab_;
  std::vector<double> idf_;
  std::uint32_t max_features_ = kDefaultMaxFeatures;
  std::uint32_t min_df_ = kDefaultMinDf;
};

/// Dense row-major [docs, dim] feature matrix.
template <class Docs>
std::vector<double> transform_dense(const TfIdfModel& model, const Docs& docs) {
  std::vector<double> out;
  const std::size_t dim = model.dim();
  for (const auto& d : docs) {
    auto v = model.transform(std::string_view(d));
    std::size_t base = out.size();
    out.resize(base + dim, 0.0);
    for (std::size_t k = 0; k < v.indices.size(); ++k) out[base + v.indices[k]] = v.values[k];
  }
  return out;
}

}  // namespace psyche::features
