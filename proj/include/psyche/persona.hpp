// SPDX-License-Identifier: Apache-2.0
//
// Percentile personality levels, the persona instruction prompt, and a small
// next-token language model with LoRA fine-tuning and seeded sampling.
#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "psyche/autodiff.hpp"
#include "psyche/common.hpp"
#include "psyche/lora.hpp"
#include "psyche/models.hpp"
#include "psyche/random.hpp"
#include "psyche/trainer.hpp"

namespace psyche::persona {

using json = nlohmann::json;
using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Traits and levels

inline constexpr std::size_t kTraitCount = 5;
inline constexpr std::array<std::string_view, kTraitCount> kTraits = {
    "Openness", "Conscientiousness", "Extraversion", "Agreeableness", "Neuroticism"};

enum class Level { Low, Medium, High };

inline std::string_view level_name(Level l) {
  switch (l) {
    case Level::Low: return "Low";
    case Level::Medium: return "Medium";
    case Level::High: return "High";
  }
  return "?";
}

inline constexpr std::string_view kValidLevels = "High, Medium, Low";

inline Level parse_level(std::string_view s) {
  if (s == "High") return Level::High;
  if (s == "Medium") return Level::Medium;
  if (s == "Low") return Level::Low;
  throw ValidationError("invalid trait level '" + std::string(s) + "'; valid levels: " + std::string(kValidLevels));
}

inline std::size_t trait_index(std::string_view name) {
  for (std::size_t i = 0; i < kTraitCount; ++i)
    if (kTraits[i] == name) return i;
  throw ValidationError("unknown trait '" + std::string(name) + "'");
}

struct Threshold {
  double p34 = 0.0;
  double p66 = 0.0;
};

using TraitThresholds = std::array<Threshold, kTraitCount>;

/// Nearest-rank percentile: the value at 1-based rank ceil(q/100 * n) of the
/// ascending sample.
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  // q/100*n computed as q*n/100 so integral products stay exact.
  auto rank = static_cast<std::size_t>(std::ceil(q * n / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

inline Threshold compute_threshold(const std::vector<double>& scores, std::string_view trait = "trait") {
  if (scores.empty()) throw ValidationError(std::string(trait) + ": empty score column");
  if (scores.size() < 3) throw ValidationError(std::string(trait) + ": need at least 3 scores");
  for (double s : scores)
    if (!std::isfinite(s)) throw ValidationError(std::string(trait) + ": non-finite score");
  return {nearest_rank(scores, 34.0), nearest_rank(scores, 66.0)};
}

inline TraitThresholds compute_thresholds(const std::array<std::vector<double>, kTraitCount>& scores) {
  TraitThresholds t;
  for (std::size_t i = 0; i < kTraitCount; ++i) t[i] = compute_threshold(scores[i], kTraits[i]);
  return t;
}

/// Strictly above p66 is High, strictly below p34 is Low, anything else Medium.
inline Level categorize(double score, const Threshold& t) {
  if (score > t.p66) return Level::High;
  if (score < t.p34) return Level::Low;
  return Level::Medium;
}

struct PersonaProfile {
  std::array<Level, kTraitCount> levels{Level::Medium, Level::Medium, Level::Medium, Level::Medium, Level::Medium};

  static PersonaProfile from_scores(const std::array<double, kTraitCount>& scores, const TraitThresholds& t) {
    PersonaProfile p;
    for (std::size_t i = 0; i < kTraitCount; ++i) p.levels[i] = categorize(scores[i], t[i]);
    return p;
  }

  /// {"Openness": "High", ...}; every trait required.
  static PersonaProfile from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("profile must be an object mapping trait to level");
    PersonaProfile p;
    for (std::size_t i = 0; i < kTraitCount; ++i) {
      auto it = j.find(std::string(kTraits[i]));
      if (it == j.end()) throw ValidationError("profile is missing trait '" + std::string(kTraits[i]) + "'");
      if (!it->is_string())
        throw ValidationError("level for '" + std::string(kTraits[i]) + "' must be one of: " + std::string(kValidLevels));
      p.levels[i] = parse_level(it->get<std::string>());
    }
    for (auto it = j.begin(); it != j.end(); ++it) trait_index(it.key());
    return p;
  }

  json to_json() const {
    json j = json::object();
    for (std::size_t i = 0; i < kTraitCount; ++i) j[std::string(kTraits[i])] = level_name(levels[i]);
    return j;
  }

  bool operator==(const PersonaProfile&) const = default;
};

inline std::string build_prompt(const PersonaProfile& p) {
  std::string s = "You are a chatbot. Your personality is: ";
  for (std::size_t i = 0; i < kTraitCount; ++i) {
    if (i) s += ", ";
    s += kTraits[i];
    s += ": ";
    s += level_name(p.levels[i]);
  }
  s += ". Respond as yourself.";
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Whitespace word vocabulary: <unk>, <bos>, <eos>, then the most frequent
/// words (ties lexicographic), at most max_size entries in total.
class Vocab {
 public:
  static constexpr std::size_t kUnk = 0, kBos = 1, kEos = 2;

  Vocab() : tokens_{"<unk>", "<bos>", "<eos>"} { reindex(); }

  template <class Texts>
  static Vocab build(const Texts& texts, std::size_t max_size = 2000) {
    if (max_size < 4) throw ConfigError("vocabulary needs room for at least one word");
    std::map<std::string, std::uint64_t> counts;
    for (const auto& t : texts)
      for (auto& w : split_words(t)) ++counts[w];
    std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });
    Vocab v;
    for (auto& [w, c] : ranked) {
      if (v.tokens_.size() >= max_size) break;
      if (w == "<unk>" || w == "<bos>" || w == "<eos>") continue;
      v.tokens_.push_back(w);
    }
    v.reindex();
    return v;
  }

  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 3 || tokens[0] != "<unk>" || tokens[1] != "<bos>" || tokens[2] != "<eos>")
      throw FormatError("vocabulary must start with <unk>, <bos>, <eos>");
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw BoundsError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::size_t id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> out;
    for (auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  /// Joins tokens with single spaces; control tokens are dropped.
  std::string decode(std::span<const std::size_t> ids) const {
    std::string s;
    for (auto id : ids) {
      if (id == kBos || id == kEos) continue;
      if (!s.empty()) s.push_back(' ');
      s += token(id);
    }
    return s;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Training examples

/// Next-token examples: each row is k context ids (left-padded with <bos>)
/// and the id that follows.
struct LmData {
  std::size_t context = 8;
  std::vector<std::size_t> contexts;  // [n, context]
  std::vector<std::size_t> targets;   // [n]

  std::size_t size() const { return targets.size(); }

  /// Adds the positions of `seq` from `first` onwards (a trailing <eos> is
  /// appended to seq first).
  void add_sequence(std::vector<std::size_t> seq, std::size_t first = 0) {
    seq.push_back(Vocab::kEos);
    for (std::size_t pos = first; pos < seq.size(); ++pos) {
      for (std::size_t k = 0; k < context; ++k) {
        const std::size_t back = context - k;
        contexts.push_back(pos >= back ? seq[pos - back] : Vocab::kBos);
      }
      targets.push_back(seq[pos]);
    }
  }
};

// ---------------------------------------------------------------------------
// TinyLM

struct TinyLmConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden = 64;
  std::size_t context = 8;
  std::uint64_t seed = 0;
};

/// logits = tanh(concat(embeddings) H) O. No biases; O starts at zero so an
/// untrained model predicts the uniform distribution.
class TinyLM {
 public:
  using Data = LmData;

  TinyLM() = default;
  TinyLM(Vocab vocab, const TinyLmConfig& cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    if (cfg.embed_dim == 0 || cfg.hidden == 0 || cfg.context == 0) throw ConfigError("tinylm: zero dimension");
    Rng rng(cfg.seed);
    const std::size_t V = vocab_.size(), in = cfg.context * cfg.embed_dim;
    embedding_ = Parameter("lm.embedding", Tensor::randn({V, cfg.embed_dim}, rng, 1.0));
    hidden_ = Parameter("lm.hidden", Tensor::randn({in, cfg.hidden}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    output_ = Parameter("lm.output", Tensor::zeros({cfg.hidden, V}));
  }

  const Vocab& vocab() const { return vocab_; }
  const TinyLmConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_.size(); }

  std::vector<Parameter*> parameters() { return {&embedding_, &hidden_, &output_}; }
  std::size_t parameter_count() const { return embedding_.numel() + hidden_.numel() + output_.numel(); }

  Parameter& embedding() { return embedding_; }
  Parameter& hidden() { return hidden_; }
  Parameter& output() { return output_; }
  const Parameter& embedding() const { return embedding_; }
  const Parameter& hidden() const { return hidden_; }
  const Parameter& output() const { return output_; }

  /// Flattened [n, context] ids -> [n, context*embed_dim] input rows.
  Var embed(Var table, std::span<const std::size_t> ids) const {
    check_ids(ids);
    const std::size_t n = ids.size() / cfg_.context;
    return ad::reshape(ad::embedding(table, ids), {n, cfg_.context * cfg_.embed_dim});
  }

  Var logits(Tape& tape, std::span<const std::size_t> ids) {
    Var x = embed(tape.param(embedding_), ids);
    Var h = ad::tanh(ad::matmul(x, tape.param(hidden_)));
    return ad::matmul(h, tape.param(output_));
  }

  Var loss(Tape& tape, const Data& data, std::span<const std::size_t> rows) {
    auto [ids, targets] = gather(data, rows, cfg_.context);
    return ad::cross_entropy(logits(tape, ids), targets);
  }

  static std::pair<std::vector<std::size_t>, std::vector<std::size_t>> gather(const Data& data,
                                                                              std::span<const std::size_t> rows,
                                                                              std::size_t k) {
    if (data.context != k) throw ShapeError("lm data context does not match model context");
    std::vector<std::size_t> ids, targets;
    ids.reserve(rows.size() * k);
    for (auto r : rows) {
      ids.insert(ids.end(), data.contexts.begin() + static_cast<std::ptrdiff_t>(r * k),
                 data.contexts.begin() + static_cast<std::ptrdiff_t>((r + 1) * k));
      targets.push_back(data.targets[r]);
    }
    return {std::move(ids), std::move(targets)};
  }

  void check_ids(std::span<const std::size_t> ids) const {
    if (ids.size() % cfg_.context != 0) throw ShapeError("context ids must come in groups of " + std::to_string(cfg_.context));
    for (auto id : ids)
      if (id >= vocab_.size())
        throw BoundsError("token id " + std::to_string(id) + " >= vocabulary size " + std::to_string(vocab_.size()));
  }

 private:
  Vocab vocab_;
  TinyLmConfig cfg_;
  Parameter embedding_, hidden_, output_;
};

/// Next-token logits for exactly `context` ids.
inline std::vector<double> lm_step(TinyLM& model, std::span<const std::size_t> context) {
  if (context.size() != model.config().context)
    throw ShapeError("lm_step needs exactly " + std::to_string(model.config().context) + " context ids");
  Tape tape;
  return model.logits(tape, context).value().data;
}

/// Mean next-token negative log-likelihood over all examples.
inline double mean_nll(TinyLM& model, const LmData& data) { return trainer::evaluate(model, data); }

// ---------------------------------------------------------------------------
// Instruction data

struct InstructionPair {
  std::string prompt;
  std::string response;
};

/// Loss positions cover the response and its closing <eos> only.
inline LmData instruction_data(const Vocab& vocab, std::span<const InstructionPair> pairs, std::size_t context) {
  LmData d;
  d.context = context;
  for (const auto& p : pairs) {
    auto seq = vocab.encode(p.prompt);
    const std::size_t first = seq.size();
    auto resp = vocab.encode(p.response);
    seq.insert(seq.end(), resp.begin(), resp.end());
    d.add_sequence(std::move(seq), first);
  }
  return d;
}

inline LmData plain_data(const Vocab& vocab, std::span<const std::string> texts, std::size_t context) {
  LmData d;
  d.context = context;
  for (const auto& t : texts) d.add_sequence(vocab.encode(t));
  return d;
}

// ---------------------------------------------------------------------------
// LoRA fine-tuning

/// TinyLM with frozen weights and adapters on the hidden and output matrices.
/// Holds transposed copies of the base; the base model is never written.
class LoraLM {
 public:
  using Data = LmData;

  LoraLM(const TinyLM& base, models::LoraConfig cfg)
      : vocab_size_(base.vocab_size()),
        lm_cfg_(base.config()),
        embedding_("lm.embedding", base.embedding().value, false),
        hidden_(transposed(base.hidden().value), named(cfg, "lora.hidden", 0)),
        output_(transposed(base.output().value), named(cfg, "lora.output", 1)) {}

  std::vector<Parameter*> parameters() {
    auto a = hidden_.trainable_parameters();
    auto b = output_.trainable_parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  std::size_t trainable_count() const { return hidden_.trainable_count() + output_.trainable_count(); }

  Var logits(Tape& tape, std::span<const std::size_t> ids) {
    const std::size_t n = ids.size() / lm_cfg_.context;
    for (auto id : ids)
      if (id >= vocab_size_) throw BoundsError("token id " + std::to_string(id) + " out of range");
    Var x = ad::reshape(ad::embedding(tape.param(embedding_), ids), {n, lm_cfg_.context * lm_cfg_.embed_dim});
    return output_.forward(tape, ad::tanh(hidden_.forward(tape, x)));
  }

  Var loss(Tape& tape, const Data& data, std::span<const std::size_t> rows) {
    auto [ids, targets] = TinyLM::gather(data, rows, lm_cfg_.context);
    return ad::cross_entropy(logits(tape, ids), targets);
  }

  /// Base model with the adapters folded into its weights.
  TinyLM merged(const TinyLM& base) const {
    TinyLM out = base;
    out.hidden().value = transposed(hidden_.merge());
    out.output().value = transposed(output_.merge());
    return out;
  }

  models::LoraAdapter& hidden_adapter() { return hidden_; }
  models::LoraAdapter& output_adapter() { return output_; }

 private:
  static Tensor transposed(const Tensor& m) {
    const std::size_t r = m.rows(), c = m.cols();
    Tensor t = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) t.data[j * r + i] = m.data[i * c + j];
    return t;
  }
  static models::LoraConfig named(models::LoraConfig c, const char* name, std::uint64_t salt) {
    c.name = name;
    c.seed = c.seed * 2 + salt;
    return c;
  }

  std::size_t vocab_size_;
  TinyLmConfig lm_cfg_;
  Parameter embedding_;
  models::LoraAdapter hidden_, output_;
};

struct FinetuneResult {
  TinyLM model;  // merged
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  std::size_t trainable_parameters = 0;
  std::size_t base_parameters = 0;
  trainer::TrainReport report;
};

inline FinetuneResult finetune_lora(const TinyLM& base, std::span<const InstructionPair> train_pairs,
                                    std::span<const InstructionPair> val_pairs, const trainer::TrainerConfig& cfg,
                                    const models::LoraConfig& lora = {}) {
  if (train_pairs.empty()) throw ValidationError("fine-tuning corpus is empty");
  if (val_pairs.empty()) throw ValidationError("fine-tuning validation set is empty");
  const std::size_t k = base.config().context;
  auto train_data = instruction_data(base.vocab(), train_pairs, k);
  auto val_data = instruction_data(base.vocab(), val_pairs, k);

  LoraLM adapted(base, lora);
  FinetuneResult r;
  r.initial_val_loss = trainer::evaluate(adapted, val_data);
  r.report = trainer::train(cfg, adapted, train_data, &val_data, nullptr);
  r.final_val_loss = trainer::evaluate(adapted, val_data);
  r.trainable_parameters = adapted.trainable_count();
  r.base_parameters = base.parameter_count();
  r.model = adapted.merged(base);
  return r;
}

// ---------------------------------------------------------------------------
// Generation

struct GenerateOptions {
  std::size_t max_tokens = 32;
  double temperature = 1.0;
  std::size_t top_k = 10;
  std::uint64_t seed = 0;
};

struct Generation {
  std::string reply;
  std::size_t tokens = 0;
};

/// Samples a reply to build_prompt(profile) followed by the user message.
/// <bos> and <unk> are never produced; <eos> is allowed from the second token
/// on, so every reply has between 1 and max_tokens tokens.
inline Generation generate(TinyLM& model, const PersonaProfile& profile, std::string_view message,
                           const GenerateOptions& opt) {
  if (!(opt.temperature > 0.0) || !std::isfinite(opt.temperature)) throw ValidationError("temperature must be > 0");
  if (opt.top_k == 0) throw ValidationError("top_k must be >= 1");
  const auto& vocab = model.vocab();
  const std::size_t k = model.config().context, V = vocab.size();

  std::string prompt = build_prompt(profile);
  if (!message.empty()) {
    prompt.push_back(' ');
    prompt.append(message);
  }
  std::vector<std::size_t> seq = vocab.encode(prompt);
  Rng rng(opt.seed);
  std::vector<std::size_t> reply;
  std::vector<std::size_t> ctx(k);
  std::vector<std::size_t> order(V);
  while (reply.size() < opt.max_tokens) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t back = k - j;
      ctx[j] = seq.size() >= back ? seq[seq.size() - back] : Vocab::kBos;
    }
    auto logits = lm_step(model, ctx);
    auto allowed = [&](std::size_t id) {
      return id != Vocab::kBos && id != Vocab::kUnk && !(id == Vocab::kEos && reply.empty());
    };
    std::size_t m = 0;
    for (std::size_t id = 0; id < V; ++id)
      if (allowed(id)) order[m++] = id;
    if (m == 0) break;
    const std::size_t kk = std::min(opt.top_k, m);
    // Highest logits first; ties by lower id so results do not depend on sort internals.
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk),
                      order.begin() + static_cast<std::ptrdiff_t>(m), [&](std::size_t a, std::size_t b) {
                        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                      });
    std::size_t pick = order[0];
    if (kk > 1) {
      const double top = logits[order[0]] / opt.temperature;
      std::vector<double> w(kk);
      double total = 0.0;
      for (std::size_t i = 0; i < kk; ++i) total += w[i] = std::exp(logits[order[i]] / opt.temperature - top);
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < kk; ++i) {
        pick = order[i];
        if ((u -= w[i]) < 0.0) break;
      }
    }
    if (pick == Vocab::kEos) break;
    reply.push_back(pick);
    seq.push_back(pick);
  }
  return {vocab.decode(reply), reply.size()};
}

// ---------------------------------------------------------------------------
// Persona corpus

/// One JSON-lines row: trait scores plus a response written in that persona.
struct PersonaExample {
  std::array<double, kTraitCount> scores{};
  std::string text;

  json to_json() const {
    json s = json::object();
    for (std::size_t i = 0; i < kTraitCount; ++i) s[std::string(kTraits[i])] = scores[i];
    return {{"scores", s}, {"text", text}};
  }
  static PersonaExample from_json(const json& j) {
    PersonaExample e;
    try {
      const auto& s = j.at("scores");
      for (std::size_t i = 0; i < kTraitCount; ++i) e.scores[i] = s.at(std::string(kTraits[i])).get<double>();
      e.text = j.at("text").get<std::string>();
    } catch (const json::exception& ex) {
      throw FormatError(std::string("persona row: ") + ex.what());
    }
    return e;
  }
};

namespace detail {

// Phrase per (trait, level), indexed [trait][Low, Medium, High].
inline constexpr std::array<std::array<std::string_view, 3>, kTraitCount> kPhrases = {{
    {"i prefer familiar things and plain facts", "i like some new things but keep my routines",
     "i love exploring strange ideas and new art"},
    {"i often leave my work to the last minute", "i try to stay organized on most days",
     "i always plan ahead and finish every task"},
    {"i would rather stay home with a good book", "i enjoy friends but also need quiet nights",
     "i love big parties and meeting new people"},
    {"i do not trust people very easily", "i am friendly but i speak my mind",
     "i care about others and like to help"},
    {"i stay calm even under real pressure", "i get nervous sometimes but recover fast",
     "i worry a lot and feel stressed often"},
}};

inline constexpr std::array<std::string_view, 4> kOpeners = {"well", "honestly", "to be fair", "you know"};

}  // namespace detail

/// Response text for a profile: one phrase per trait, Neuroticism first so the
/// levels nearest the end of the prompt lead the reply.
inline std::string persona_response(const PersonaProfile& p, Rng& rng) {
  std::string s(detail::kOpeners[rng.bounded(detail::kOpeners.size())]);
  for (std::size_t i = kTraitCount; i-- > 0;) {
    s += ' ';
    s += detail::kPhrases[i][static_cast<std::size_t>(p.levels[i])];
  }
  return s;
}

/// n rows with scores uniform on [0, 100] and responses matching the levels
/// implied by the population's own thresholds.
inline std::vector<PersonaExample> make_persona_corpus(std::size_t n, std::uint64_t seed) {
  if (n < 3) throw ConfigError("persona corpus needs at least 3 rows");
  Rng rng(seed);
  std::vector<PersonaExample> rows(n);
  std::array<std::vector<double>, kTraitCount> cols;
  for (auto& r : rows)
    for (std::size_t i = 0; i < kTraitCount; ++i) {
      r.scores[i] = std::round(rng.uniform(0.0, 100.0) * 100.0) / 100.0;
      cols[i].push_back(r.scores[i]);
    }
  auto th = compute_thresholds(cols);
  for (auto& r : rows) r.text = persona_response(PersonaProfile::from_scores(r.scores, th), rng);
  return rows;
}

inline TraitThresholds thresholds_of(std::span<const PersonaExample> rows) {
  std::array<std::vector<double>, kTraitCount> cols;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < kTraitCount; ++i) cols[i].push_back(r.scores[i]);
  return compute_thresholds(cols);
}

inline std::vector<InstructionPair> instruction_pairs(std::span<const PersonaExample> rows, const TraitThresholds& th) {
  std::vector<InstructionPair> out;
  for (const auto& r : rows) out.push_back({build_prompt(PersonaProfile::from_scores(r.scores, th)), r.text});
  return out;
}

inline std::vector<PersonaExample> load_persona_jsonl(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<PersonaExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(PersonaExample::from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_persona_jsonl(const fs::path& path, std::span<const PersonaExample> rows) {
  std::string s;
  for (const auto& r : rows) s += r.to_json().dump() + "\n";
  write_file_atomic(path, std::string_view(s));
}

// ---------------------------------------------------------------------------
// Bundle

/// Directory with manifest.json (vocabulary, dims, checksum) and weights.bin
/// (little-endian f64: embedding, hidden, output).
inline void save_tinylm(const TinyLM& m, const fs::path& dir, std::string_view name = "persona-lm") {
  fs::create_directories(dir);
  ByteWriter w;
  for (const Parameter* p : {&m.embedding(), &m.hidden(), &m.output()}) w.put_array<double>(p->value.data);
  const auto& c = m.config();
  json manifest = {{"kind", "tinylm"},
                   {"name", name},
                   {"format", 1},
                   {"embed_dim", c.embed_dim},
                   {"hidden", c.hidden},
                   {"context", c.context},
                   {"vocab", m.vocab().tokens()},
                   {"weights_sha256", sha256_hex(w.bytes())}};
  write_file_atomic(dir / "weights.bin", w.bytes());
  write_file_atomic(dir / "manifest.json", std::string_view(manifest.dump(2) + "\n"));
}

inline TinyLM load_tinylm(const fs::path& dir, std::string* name = nullptr) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.value("kind", "") != "tinylm") throw FormatError(dir.string() + " is not a language-model bundle");
  auto bytes = read_file(dir / "weights.bin");
  if (sha256_hex(bytes) != manifest.at("weights_sha256").get<std::string>())
    throw ValidationError((dir / "weights.bin").string() + ": checksum mismatch");
  TinyLmConfig cfg;
  cfg.embed_dim = manifest.at("embed_dim").get<std::size_t>();
  cfg.hidden = manifest.at("hidden").get<std::size_t>();
  cfg.context = manifest.at("context").get<std::size_t>();
  TinyLM m(Vocab::from_tokens(manifest.at("vocab").get<std::vector<std::string>>()), cfg);
  ByteReader r(bytes);
  for (Parameter* p : m.parameters()) p->value.data = r.get_array<double>(p->numel());
  if (r.remaining() != 0) throw FormatError((dir / "weights.bin").string() + ": trailing bytes");
  if (name) *name = manifest.value("name", "persona-lm");
  return m;
}

}  // namespace psyche::persona
