// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "psyche/persona.hpp"
#include "test_util.hpp"

namespace psyche::persona {
namespace {

using testing::TempDir;

std::vector<double> one_to(std::size_t n) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 1.0);
  return v;
}

PersonaProfile all(Level l) {
  PersonaProfile p;
  p.levels.fill(l);
  return p;
}

TEST(Thresholds, NearestRankOnOneToHundred) {
  auto t = compute_threshold(one_to(100));
  EXPECT_EQ(t.p34, 34.0);
  EXPECT_EQ(t.p66, 66.0);
  EXPECT_EQ(categorize(80, t), Level::High);
  EXPECT_EQ(categorize(34, t), Level::Medium);
  EXPECT_EQ(categorize(66, t), Level::Medium);
  EXPECT_EQ(categorize(10, t), Level::Low);
}

TEST(Thresholds, SmallAndDegenerateSamples) {
  auto t = compute_threshold({3, 1, 2});
  EXPECT_EQ(t.p34, 2.0);
  EXPECT_EQ(t.p66, 2.0);
  auto flat = compute_threshold({5, 5, 5, 5});
  EXPECT_EQ(flat.p34, 5.0);
  EXPECT_EQ(flat.p66, 5.0);
  EXPECT_EQ(categorize(5, flat), Level::Medium);
  EXPECT_THROW(compute_threshold({}), ValidationError);
  EXPECT_THROW(compute_threshold({1, 2}), ValidationError);
}

TEST(Thresholds, OrderedAndLevelMonotoneOverRandomSamples) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(3 + rng.bounded(200));
    for (double& v : s) v = std::round(rng.uniform(0, 100));
    auto t = compute_threshold(s);
    ASSERT_LE(t.p34, t.p66);
    int prev = -1;
    for (double x = -1; x <= 101; x += 0.5) {
      int l = static_cast<int>(categorize(x, t));
      ASSERT_GE(l, prev) << "level fell when the score rose to " << x;
      prev = l;
    }
  }
}

TEST(Prompt, AllMediumTemplateIsExact) {
  EXPECT_EQ(build_prompt(all(Level::Medium)),
            "You are a chatbot. Your personality is: Openness: Medium, Conscientiousness: Medium, Extraversion: "
            "Medium, Agreeableness: Medium, Neuroticism: Medium. Respond as yourself.");
}

TEST(Prompt, InjectiveOverAllProfiles) {
  std::set<std::string> seen;
  for (int code = 0; code < 243; ++code) {
    PersonaProfile p;
    int c = code;
    for (auto& l : p.levels) {
      l = static_cast<Level>(c % 3);
      c /= 3;
    }
    EXPECT_EQ(build_prompt(p), build_prompt(p));
    seen.insert(build_prompt(p));
  }
  EXPECT_EQ(seen.size(), 243u);
}

TEST(Profile, JsonRoundtripAndValidation) {
  PersonaProfile p = all(Level::Low);
  p.levels[2] = Level::High;
  EXPECT_EQ(PersonaProfile::from_json(p.to_json()), p);

  json bad = p.to_json();
  bad["Openness"] = "Very High";
  try {
    PersonaProfile::from_json(bad);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("High, Medium, Low"), std::string::npos);
  }
  json missing = p.to_json();
  missing.erase("Neuroticism");
  EXPECT_THROW(PersonaProfile::from_json(missing), ValidationError);
  json extra = p.to_json();
  extra["Humor"] = "High";
  EXPECT_THROW(PersonaProfile::from_json(extra), ValidationError);
}

TEST(VocabTest, SpecialsFirstAndCapRespected) {
  std::vector<std::string> texts = {"b a a c", "a b d", "e"};
  auto v = Vocab::build(texts, 5);
  ASSERT_EQ(v.size(), 5u);
  EXPECT_EQ(v.token(0), "<unk>");
  EXPECT_EQ(v.token(1), "<bos>");
  EXPECT_EQ(v.token(2), "<eos>");
  EXPECT_EQ(v.token(3), "a");
  EXPECT_EQ(v.token(4), "b");
  EXPECT_EQ(v.id("zzz"), Vocab::kUnk);
  EXPECT_EQ(v.encode("a  b\tq"), (std::vector<std::size_t>{3, 4, 0}));
}

TEST(VocabTest, RoundtripOverKnownWords) {
  auto rows = make_persona_corpus(50, 3);
  std::vector<std::string> texts;
  for (auto& r : rows) texts.push_back(r.text);
  auto v = Vocab::build(texts);
  for (auto& t : texts) EXPECT_EQ(v.decode(v.encode(t)), t);
}

TEST(LmDataTest, ContextsAreLeftPaddedWithBos) {
  LmData d;
  d.context = 3;
  d.add_sequence({5, 6}, 1);
  // positions 1 (target 6) and 2 (target <eos>)
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.targets, (std::vector<std::size_t>{6, Vocab::kEos}));
  EXPECT_EQ(d.contexts, (std::vector<std::size_t>{1, 1, 5, 1, 5, 6}));
}

TinyLM small_lm(std::size_t words, std::uint64_t seed) {
  std::vector<std::string> toks = {"<unk>", "<bos>", "<eos>"};
  for (std::size_t i = 0; i < words; ++i) toks.push_back("w" + std::to_string(i));
  TinyLmConfig c;
  c.seed = seed;
  return TinyLM(Vocab::from_tokens(toks), c);
}

TEST(TinyLmTest, UntrainedModelIsUniform) {
  auto m = small_lm(20, 1);
  std::vector<std::size_t> ctx = {1, 1, 1, 4, 5, 6, 7, 8};
  auto logits = lm_step(m, ctx);
  ASSERT_EQ(logits.size(), m.vocab_size());
  for (double z : logits) EXPECT_EQ(z, 0.0);
  EXPECT_EQ(lm_step(m, ctx), logits);

  LmData d;
  d.add_sequence({4, 5, 6, 7});
  EXPECT_NEAR(mean_nll(m, d), std::log(static_cast<double>(m.vocab_size())), 1e-12);
}

TEST(TinyLmTest, RejectsBadContexts) {
  auto m = small_lm(5, 1);
  std::vector<std::size_t> shortc(7, 1);
  EXPECT_THROW(lm_step(m, shortc), ShapeError);
  std::vector<std::size_t> oob(8, 1);
  oob[3] = m.vocab_size();
  EXPECT_THROW(lm_step(m, oob), BoundsError);
}

TEST(TinyLmTest, GradientCheckThroughFullStep) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = small_lm(9, seed);
    Rng rng(seed + 100);
    m.output().value = Tensor::randn(m.output().value.shape, rng, 0.3);
    std::vector<std::size_t> ids(3 * 8), targets(3);
    for (auto& i : ids) i = rng.bounded(m.vocab_size());
    for (auto& t : targets) t = rng.bounded(m.vocab_size());
    auto forward = [&](Tape&, std::span<const Var> in) {
      Var x = m.embed(in[0], ids);
      Var h = ad::tanh(ad::matmul(x, in[1]));
      return ad::cross_entropy(ad::matmul(h, in[2]), targets);
    };
    std::vector<Tensor> point = {m.embedding().value, m.hidden().value, m.output().value};
    auto value = [&] {
      Tape tape;
      std::vector<Var> in;
      for (auto& t : point) in.push_back(tape.input(t));
      return forward(tape, in).value().item();
    };
    Tape tape;
    std::vector<Var> in;
    for (auto& t : point) in.push_back(tape.input(t));
    tape.backward(forward(tape, in));

    // Low-probability tokens give output gradients near 1e-9, below what a
    // difference quotient at eps = 1e-5 resolves (~1e-11 per step). Those are
    // held to an absolute bound; everything else to 1e-6 relative.
    const double eps = 1e-5;
    std::size_t relative_checked = 0;
    for (std::size_t k = 0; k < point.size(); ++k) {
      Tensor g = tape.grad(in[k]);
      for (std::size_t i = 0; i < point[k].numel(); ++i) {
        const double orig = point[k].data[i];
        point[k].data[i] = orig + eps;
        const double fp = value();
        point[k].data[i] = orig - eps;
        const double fm = value();
        point[k].data[i] = orig;
        const double numeric = (fp - fm) / (2 * eps), a = g.data[i];
        if (std::abs(a) >= 1e-4) {
          ++relative_checked;
          ASSERT_LT(std::abs(a - numeric) / std::abs(a), 1e-6) << "seed " << seed << " tensor " << k << " at " << i;
        } else {
          ASSERT_LT(std::abs(a - numeric), 1e-10) << "seed " << seed << " tensor " << k << " at " << i;
        }
      }
    }
    EXPECT_GT(relative_checked, 1000u);
  }
}

TEST(LoraLmTest, TrainableFractionBelowFivePercentAtFullVocabulary) {
  auto base = small_lm(1997, 0);
  ASSERT_EQ(base.vocab_size(), 2000u);
  LoraLM lm(base, {});
  const std::size_t V = 2000;
  EXPECT_EQ(lm.trainable_count(), 1536 + 4 * V);
  EXPECT_EQ(base.parameter_count(), 96 * V + 16384);
  EXPECT_LT(static_cast<double>(lm.trainable_count()) / static_cast<double>(base.parameter_count()), 0.05);
}

std::vector<InstructionPair> pairs_for(std::span<const PersonaExample> rows) {
  return instruction_pairs(rows, thresholds_of(rows));
}

TinyLM pretrained_base(std::span<const PersonaExample> rows, std::uint64_t steps) {
  std::vector<std::string> texts;
  for (auto& r : rows) texts.push_back(r.text);
  auto prompts = pairs_for(rows);
  std::vector<std::string> vocab_texts = texts;
  for (auto& p : prompts) vocab_texts.push_back(p.prompt);
  TinyLM base(Vocab::build(vocab_texts), {});
  auto data = plain_data(base.vocab(), texts, base.config().context);
  trainer::TrainerConfig tc;
  tc.max_steps = steps;
  tc.optimizer = trainer::OptimizerKind::adam;
  tc.learning_rate = 0.01;
  tc.save_steps = 0;
  tc.eval_steps = 0;
  trainer::train(tc, base, data, static_cast<const LmData*>(nullptr), nullptr);
  return base;
}

TEST(LoraLmTest, InitMatchesBaseAndMergeMatchesForward) {
  auto rows = make_persona_corpus(60, 5);
  auto base = pretrained_base(rows, 50);
  LoraLM lm(base, {});
  Rng rng(9);
  const std::size_t V = base.vocab_size();
  auto random_ids = [&] {
    std::vector<std::size_t> ids(4 * 8);
    for (auto& i : ids) i = rng.bounded(V);
    return ids;
  };
  for (int trial = 0; trial < 20; ++trial) {
    auto ids = random_ids();
    Tape t1, t2;
    EXPECT_EQ(lm.logits(t1, ids).value(), base.logits(t2, ids).value());
  }

  // Perturb the adapters as training would, then compare merged and adapter forwards.
  for (Parameter* p : lm.parameters()) p->value = Tensor::randn(p->value.shape, rng, 0.1);
  auto merged = lm.merged(base);
  for (int trial = 0; trial < 100; ++trial) {
    auto ids = random_ids();
    Tape t1, t2;
    auto a = lm.logits(t1, ids).value();
    auto b = merged.logits(t2, ids).value();
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.data[i], b.data[i], 1e-10);
  }
}

TEST(LoraLmTest, FinetuneLowersPerplexityAndLeavesBaseUntouched) {
  auto rows = make_persona_corpus(240, 7);
  std::span<const PersonaExample> all_rows(rows);
  auto th = thresholds_of(all_rows);
  auto train_pairs = instruction_pairs(all_rows.subspan(0, 200), th);
  auto val_pairs = instruction_pairs(all_rows.subspan(200), th);
  auto base = pretrained_base(all_rows.subspan(0, 200), 300);

  std::vector<std::vector<double>> before;
  for (auto* p : base.parameters()) before.push_back(p->value.data);

  trainer::TrainerConfig tc;
  tc.max_steps = 500;
  tc.optimizer = trainer::OptimizerKind::adam;
  tc.learning_rate = 0.01;
  tc.save_steps = 0;
  tc.eval_steps = 0;
  auto r = finetune_lora(base, train_pairs, val_pairs, tc);

  auto val = instruction_data(base.vocab(), val_pairs, 8);
  EXPECT_EQ(r.initial_val_loss, mean_nll(base, val));
  EXPECT_LT(models::perplexity(r.final_val_loss), models::perplexity(r.initial_val_loss));
  EXPECT_NEAR(mean_nll(r.model, val), r.final_val_loss, 1e-9);

  auto params = base.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ASSERT_EQ(params[i]->value.data.size(), before[i].size());
    EXPECT_EQ(std::memcmp(params[i]->value.data.data(), before[i].data(), before[i].size() * sizeof(double)), 0)
        << params[i]->name;
  }
  EXPECT_THROW(finetune_lora(base, {}, val_pairs, tc), ValidationError);
}

TEST(Generate, SeededGreedyAndLengthContracts) {
  auto rows = make_persona_corpus(60, 5);
  auto base = pretrained_base(rows, 100);
  auto p = all(Level::High);
  GenerateOptions o;
  o.max_tokens = 12;
  o.seed = 4;
  auto a = generate(base, p, "hello there", o);
  auto b = generate(base, p, "hello there", o);
  EXPECT_EQ(a.reply, b.reply);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_GE(a.tokens, 1u);
  EXPECT_LE(a.tokens, 12u);
  EXPECT_EQ(split_words(a.reply).size(), a.tokens);
  for (auto& w : split_words(a.reply)) {
    EXPECT_NE(w, "<unk>");
    EXPECT_NE(w, "<bos>");
  }

  o.top_k = 1;
  auto g1 = generate(base, p, "hi", o);
  o.seed = 999;
  EXPECT_EQ(generate(base, p, "hi", o).reply, g1.reply);

  o.max_tokens = 1;
  o.top_k = 10;
  for (std::uint64_t s = 0; s < 10; ++s) {
    o.seed = s;
    EXPECT_EQ(generate(base, p, "", o).tokens, 1u);
  }

  o.temperature = 0;
  EXPECT_THROW(generate(base, p, "", o), ValidationError);
  o.temperature = 1;
  o.top_k = 0;
  EXPECT_THROW(generate(base, p, "", o), ValidationError);
}

TEST(Corpus, JsonlRoundtripAndBundle) {
  TempDir dir;
  auto rows = make_persona_corpus(30, 1);
  write_persona_jsonl(dir / "p.jsonl", rows);
  auto back = load_persona_jsonl(dir / "p.jsonl");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].scores, rows[i].scores);
    EXPECT_EQ(back[i].text, rows[i].text);
  }

  auto m = pretrained_base(rows, 20);
  save_tinylm(m, dir / "lm", "persona");
  std::string name;
  auto loaded = load_tinylm(dir / "lm", &name);
  EXPECT_EQ(name, "persona");
  EXPECT_EQ(loaded.vocab().tokens(), m.vocab().tokens());
  auto lp = loaded.parameters();
  auto mp = m.parameters();
  for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_EQ(lp[i]->value, mp[i]->value);

  {
    std::ofstream f(dir / "lm" / "weights.bin", std::ios::app | std::ios::binary);
    f << 'x';
  }
  EXPECT_THROW(load_tinylm(dir / "lm"), ValidationError);
}

}  // namespace
}  // namespace psyche::persona
