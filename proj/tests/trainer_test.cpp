// SPDX-License-Identifier: Apache-2.0
#include "psyche/trainer.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "test_util.hpp"
#include "train_fixtures.hpp"

namespace psyche::trainer {
namespace {

using psyche::testing::TempDir;

/// Captures warnings for the lifetime of the object.
class WarningCapture {
 public:
  WarningCapture() : saved_(warning_sink()) {
    warning_sink() = [this](std::string_view m) { messages.emplace_back(m); };
  }
  ~WarningCapture() { warning_sink() = saved_; }
  std::vector<std::string> messages;

 private:
  WarningSink saved_;
};

bool bit_identical(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].size() != b[i].size() || std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(double)) != 0)
      return false;
  return true;
}

std::vector<std::uint64_t> steps_in(const CheckpointStore& s) {
  std::vector<std::uint64_t> out;
  for (auto& [step, p] : s.list()) out.push_back(step);
  return out;
}

TrainerConfig adam_config() {
  TrainerConfig c;
  c.max_steps = 500;
  c.batch_size = 16;
  c.learning_rate = 0.01;
  c.optimizer = OptimizerKind::adam;
  c.save_steps = 50;
  c.eval_steps = 50;
  c.seed = 11;
  return c;
}

// ---------------------------------------------------------------------------
// Config

TEST(TrainerConfig, JsonRoundtripAndValidation) {
  TrainerConfig c = adam_config();
  c.grad_clip = 2.5;
  c.schedule = ScheduleKind::linear_decay;
  auto back = TrainerConfig::from_json(json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());

  TrainerConfig bad = c;
  bad.save_steps = 600;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.save_total_limit = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(TrainerConfig::from_json(json{{"optimizer", "rmsprop"}}), ConfigError);
}

TEST(TrainerConfig, LinearDecayReachesLastStepAboveZero) {
  TrainerConfig c;
  c.max_steps = 4;
  c.learning_rate = 1.0;
  c.schedule = ScheduleKind::linear_decay;
  EXPECT_DOUBLE_EQ(c.lr_at(1), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_at(2), 0.75);
  EXPECT_DOUBLE_EQ(c.lr_at(4), 0.25);
  c.schedule = ScheduleKind::constant;
  EXPECT_DOUBLE_EQ(c.lr_at(4), 1.0);
}

// ---------------------------------------------------------------------------
// Training and resume

TEST(Train, FreshRunCoversEveryStepAndLearns) {
  auto data = psyche::testing::small_regression(128, 4, 2, 1);
  auto model = psyche::testing::small_mlp(4, 2, 2);
  TempDir dir;
  CheckpointStore store(dir.path());
  auto cfg = adam_config();
  double before = evaluate(model, data);
  auto rep = train(cfg, model, data, &data, &store);
  ASSERT_EQ(rep.train_loss.size(), 500u);
  EXPECT_EQ(rep.train_loss.front().first, 1u);
  EXPECT_EQ(rep.train_loss.back().first, 500u);
  EXPECT_EQ(rep.start_step, 0u);
  EXPECT_EQ(rep.final_step, 500u);
  EXPECT_FALSE(rep.killed);
  EXPECT_FALSE(rep.diverged);
  EXPECT_EQ(rep.val_loss.size(), 10u);
  EXPECT_LT(evaluate(model, data), 0.5 * before);
  EXPECT_EQ(steps_in(store), (std::vector<std::uint64_t>{400, 450, 500}));
}

TEST(Train, SameSeedIsDeterministic) {
  auto data = psyche::testing::small_regression(64, 3, 1, 4);
  auto cfg = adam_config();
  cfg.max_steps = 120;
  cfg.save_steps = 0;
  auto a = psyche::testing::small_mlp(3, 1, 5);
  auto b = psyche::testing::small_mlp(3, 1, 5);
  train(cfg, a, data, static_cast<const models::RegressionData*>(nullptr), nullptr);
  train(cfg, b, data, static_cast<const models::RegressionData*>(nullptr), nullptr);
  EXPECT_TRUE(bit_identical(psyche::testing::parameter_buffers(a), psyche::testing::parameter_buffers(b)));
}

class ResumeEquivalence : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(ResumeEquivalence, KillAndResumeMatchesUninterruptedRunBitForBit) {
  const std::uint64_t kill = GetParam();
  auto data = psyche::testing::small_regression(100, 4, 2, 21);  // 100 % 16 != 0: epochs straddle saves
  auto cfg = adam_config();

  auto reference = psyche::testing::small_mlp(4, 2, 3);
  TempDir ref_dir;
  CheckpointStore ref_store(ref_dir.path());
  train(cfg, reference, data, &data, &ref_store);

  TempDir dir;
  CheckpointStore store(dir.path());
  auto first = psyche::testing::small_mlp(4, 2, 3);
  auto killed_cfg = cfg;
  killed_cfg.kill_after_steps = kill;
  auto r1 = train(killed_cfg, first, data, &data, &store);
  EXPECT_TRUE(r1.killed);
  EXPECT_EQ(r1.final_step, kill);

  // A fresh process: new model object with the original init.
  auto second = psyche::testing::small_mlp(4, 2, 3);
  auto r2 = train(cfg, second, data, &data, &store);
  EXPECT_EQ(r2.start_step, (kill / cfg.save_steps) * cfg.save_steps);
  ASSERT_FALSE(r2.train_loss.empty());
  EXPECT_EQ(r2.train_loss.front().first, r2.start_step + 1);
  EXPECT_EQ(r2.final_step, cfg.max_steps);
  EXPECT_TRUE(bit_identical(psyche::testing::parameter_buffers(reference),
                            psyche::testing::parameter_buffers(second)));

  // Optimizer moments and data position agree as well.
  auto a = ref_store.latest();
  auto b = store.latest();
  ASSERT_TRUE(a && b);
  EXPECT_EQ(a->optimizer, b->optimizer);
  EXPECT_EQ(a->rng_state, b->rng_state);
  EXPECT_EQ(a->data_cursor, b->data_cursor);
  EXPECT_EQ(a->checksum, b->checksum);
}

INSTANTIATE_TEST_SUITE_P(KillPoints, ResumeEquivalence, ::testing::Values(50, 237, 499, 13));

TEST(Train, KillBeforeFirstSaveRestartsFromScratch) {
  auto data = psyche::testing::small_regression(64, 3, 1, 8);
  auto cfg = adam_config();
  cfg.max_steps = 100;
  cfg.kill_after_steps = 30;
  TempDir dir;
  CheckpointStore store(dir.path());
  auto m = psyche::testing::small_mlp(3, 1, 1);
  train(cfg, m, data, &data, &store);
  EXPECT_TRUE(store.list().empty());
  cfg.kill_after_steps.reset();
  auto m2 = psyche::testing::small_mlp(3, 1, 1);
  auto rep = train(cfg, m2, data, &data, &store);
  EXPECT_EQ(rep.start_step, 0u);
}

TEST(Train, ResumeRefusesWhenEveryCheckpointIsCorrupt) {
  auto data = psyche::testing::small_regression(64, 3, 1, 8);
  auto cfg = adam_config();
  cfg.max_steps = 100;
  TempDir dir;
  CheckpointStore store(dir.path());
  auto m = psyche::testing::small_mlp(3, 1, 1);
  train(cfg, m, data, &data, &store);
  for (auto& p : store.retained()) fs::resize_file(p / "params.bin", 8);

  WarningCapture cap;
  auto m2 = psyche::testing::small_mlp(3, 1, 1);
  try {
    train(cfg, m2, data, &data, &store);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("refusing to resume"), std::string::npos);
  }
  ASSERT_FALSE(cap.messages.empty());
  EXPECT_NE(cap.messages.front().find("params.bin"), std::string::npos);
}

TEST(Train, DivergenceIsReportedNotSilent) {
  auto data = psyche::testing::small_regression(64, 3, 1, 8);
  for (double& y : data.Y.data) y *= 1e4;
  models::MlpConfig mc;
  mc.input_dim = 3;
  mc.hidden = 8;
  mc.targets = 1;
  mc.head = models::HeadKind::unbounded;
  mc.seed = 1;
  models::MlpRegressor m(mc);
  TrainerConfig cfg;
  cfg.max_steps = 200;
  cfg.learning_rate = 1.0;
  cfg.save_steps = 0;
  WarningCapture cap;
  auto rep = train(cfg, m, data, static_cast<const models::RegressionData*>(nullptr), nullptr);
  EXPECT_TRUE(rep.diverged);
  EXPECT_LT(rep.final_step, 200u);
  EXPECT_FALSE(rep.divergence.empty());
  EXPECT_FALSE(cap.messages.empty());
}

TEST(Train, ValidationLossMatchesSweepAtEverySavedStep) {
  auto data = psyche::testing::small_regression(96, 4, 2, 30);
  auto val = psyche::testing::small_regression(40, 4, 2, 31);
  auto cfg = adam_config();
  cfg.max_steps = 300;
  cfg.save_total_limit = 10;
  TempDir dir;
  CheckpointStore store(dir.path(), cfg.save_total_limit);
  auto m = psyche::testing::small_mlp(4, 2, 9);
  auto rep = train(cfg, m, data, &val, &store);
  auto probe = psyche::testing::small_mlp(4, 2, 0);
  auto sweep = sweep_checkpoints(dir.path(), probe, val);
  ASSERT_EQ(sweep.losses.size(), rep.val_loss.size());
  for (std::size_t i = 0; i < rep.val_loss.size(); ++i) {
    EXPECT_EQ(sweep.losses[i].first, rep.val_loss[i].first);
    EXPECT_NEAR(sweep.losses[i].second, rep.val_loss[i].second, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints and rotation

Checkpoint scalar_checkpoint(std::uint64_t step, double v) {
  Checkpoint c;
  c.step = step;
  c.parameters.push_back({"p", Tensor::scalar(v)});
  c.rng_state = Rng(step).state();
  return c;
}

TEST(Checkpoints, RotationKeepsHighestSteps) {
  TempDir dir;
  CheckpointStore store(dir.path(), 3);
  for (std::uint64_t s = 100; s <= 1000; s += 100) store.save(scalar_checkpoint(s, 0.0));
  EXPECT_EQ(steps_in(store), (std::vector<std::uint64_t>{800, 900, 1000}));

  TempDir one;
  CheckpointStore single(one.path(), 1);
  for (std::uint64_t s = 1; s <= 5; ++s) single.save(scalar_checkpoint(s, 0.0));
  EXPECT_EQ(steps_in(single), (std::vector<std::uint64_t>{5}));
}

TEST(Checkpoints, RotationInvariantOverRandomSaveSequences) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    TempDir dir;
    const std::uint64_t limit = 1 + rng.bounded(4);
    CheckpointStore store(dir.path(), limit);
    std::vector<std::uint64_t> saved;
    std::uint64_t step = 0;
    const auto saves = 1 + rng.bounded(8);
    for (std::uint64_t k = 0; k < saves; ++k) {
      step += 1 + rng.bounded(50);
      store.save(scalar_checkpoint(step, 0.0));
      saved.push_back(step);
      std::vector<std::uint64_t> expect(saved.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(limit, saved.size())),
                                        saved.end());
      ASSERT_EQ(steps_in(store), expect);
    }
  }
}

TEST(Checkpoints, LoadThenSaveReproducesChecksum) {
  TempDir dir;
  CheckpointStore store(dir.path());
  auto c = scalar_checkpoint(7, 1.25);
  c.optimizer.kind = OptimizerKind::adam;
  c.optimizer.t = 7;
  c.optimizer.m = {Tensor::scalar(0.5)};
  c.optimizer.v = {Tensor::scalar(0.25)};
  c.data_cursor = 3;
  auto path = store.save(c);
  auto loaded = load_checkpoint(path);
  TempDir other;
  CheckpointStore store2(other.path());
  auto again = load_checkpoint(store2.save(loaded));
  EXPECT_EQ(again.checksum, loaded.checksum);
  EXPECT_EQ(again.parameters, c.parameters);
  EXPECT_EQ(again.optimizer, c.optimizer);
  EXPECT_EQ(again.data_cursor, 3u);
}

TEST(Checkpoints, LatestSkipsTruncatedWithWarning) {
  TempDir dir;
  CheckpointStore store(dir.path());
  EXPECT_FALSE(latest_checkpoint(store).has_value());
  for (std::uint64_t s : {300, 400, 500}) store.save(scalar_checkpoint(s, static_cast<double>(s)));
  EXPECT_EQ(latest_checkpoint(store)->step, 500u);

  fs::resize_file(dir / "checkpoint-500" / "params.bin", 3);
  WarningCapture cap;
  auto latest = latest_checkpoint(store);
  ASSERT_TRUE(latest.has_value());
  EXPECT_EQ(latest->step, 400u);
  ASSERT_EQ(cap.messages.size(), 1u);
  EXPECT_NE(cap.messages[0].find("checkpoint-500"), std::string::npos);
  EXPECT_NE(cap.messages[0].find("params.bin"), std::string::npos);
}

TEST(Checkpoints, EachFileIsVerified) {
  for (const char* file : {"params.bin", "optim.bin", "rng.txt", "manifest.json", "checksum.sha256"}) {
    TempDir dir;
    CheckpointStore store(dir.path());
    auto p = store.save(scalar_checkpoint(10, 2.0));
    {
      std::ofstream out(p / file, std::ios::app);
      out << "x";
    }
    try {
      load_checkpoint(p);
      ADD_FAILURE() << "tampered " << file << " accepted";
    } catch (const CheckpointError& e) {
      std::string what = e.what();
      std::string expected = std::string(file) == "checksum.sha256" ? "manifest.json" : file;
      EXPECT_NE(what.find(expected), std::string::npos) << what;
    }
  }
}

TEST(Checkpoints, FaultMidSaveLeavesPreviousLatestIntact) {
  for (const char* stage : {"params.bin", "optim.bin", "rng.txt", "manifest.json", "checksum.sha256"}) {
    TempDir dir;
    CheckpointStore store(dir.path(), 3);
    for (std::uint64_t s : {100, 200, 300}) store.save(scalar_checkpoint(s, 1.0));
    store.set_fault_hook([&](std::string_view st) {
      if (st == stage) throw IoError("injected failure");
    });
    EXPECT_THROW(store.save(scalar_checkpoint(400, 1.0)), IoError);
    EXPECT_EQ(steps_in(store), (std::vector<std::uint64_t>{100, 200, 300})) << stage;
    auto latest = store.latest();
    ASSERT_TRUE(latest.has_value());
    EXPECT_EQ(latest->step, 300u);
    for (auto& e : fs::directory_iterator(dir.path()))
      EXPECT_EQ(e.path().filename().string().rfind(".tmp-", 0), std::string::npos) << "temp dir left behind";
  }
}

TEST(Checkpoints, StepCollisionNeverOverwritesInPlace) {
  TempDir dir;
  CheckpointStore store(dir.path());
  store.save(scalar_checkpoint(5, 1.0));
  fs::resize_file(dir / "checkpoint-5" / "params.bin", 1);
  WarningCapture cap;
  store.save(scalar_checkpoint(5, 2.0));
  EXPECT_EQ(load_checkpoint(dir / "checkpoint-5").parameters[0].value.item(), 2.0);
  EXPECT_TRUE(fs::exists(dir / ".checkpoint-5.invalid-0"));
}

// ---------------------------------------------------------------------------
// Sweep

TEST(Sweep, GlobalMinimumBeatsEarlyLocalDip) {
  TempDir dir;
  CheckpointStore store(dir.path(), 10);
  psyche::testing::write_curve(store, {{100, 1.0}, {200, 1.2}, {300, 0.9}});
  psyche::testing::ScalarModel m;
  auto r = sweep_checkpoints(dir.path(), m, psyche::testing::ScalarData{});
  EXPECT_EQ(r.best_step, 300u);
  EXPECT_EQ(r.losses.size(), 3u);
}

TEST(Sweep, TiesGoToEarliestStep) {
  auto r = select_best({{300, 0.5}, {100, 0.7}, {200, 0.5}});
  EXPECT_EQ(r.best_step, 200u);
  EXPECT_EQ(r.losses.front().first, 100u);
}

TEST(Sweep, NoValidCheckpointsIsAnError) {
  TempDir dir;
  psyche::testing::ScalarModel m;
  EXPECT_THROW(sweep_checkpoints(dir.path(), m, psyche::testing::ScalarData{}), ContractError);
}

TEST(Sweep, CsvCurve) {
  auto r = select_best({{2, 0.25}, {1, 0.5}});
  EXPECT_EQ(r.to_csv(), "step,val_loss\n1,0.5\n2,0.25\n");
}

}  // namespace
}  // namespace psyche::trainer
