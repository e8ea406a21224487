// SPDX-License-Identifier: Apache-2.0
//
// psyche: command-line front end for ingestion, training, evaluation and the
// HTTP services. Run `psyche <command> --help` for options.
#include <CLI11.hpp>

#include <csignal>
#include <cstring>
#include <iostream>
#include <memory>
#include <string>

#include "psyche/ablation.hpp"
#include "psyche/bundle.hpp"
#include "psyche/corpus.hpp"
#include "psyche/persona.hpp"
#include "psyche/pipeline.hpp"
#include "psyche/services.hpp"
#include "psyche/trainer.hpp"

namespace {

using namespace psyche;
using json = nlohmann::json;

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file_atomic(p, j.dump(2) + "\n");
}

/// Scratch directory removed on scope exit.
class ScratchDir {
 public:
  explicit ScratchDir(std::string_view tag)
      : path_(fs::temp_directory_path() / (std::string(tag) + "-" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---------------------------------------------------------------------------
// Data

int cmd_ingest(const fs::path& input, const fs::path& out, std::string name, const std::string& task,
               const std::vector<std::string>& targets) {
  const std::string text = read_text_file(input);
  auto loaded = ends_with(input.string(), ".csv") ? corpus::load_csv(text) : corpus::load_jsonl(text);
  corpus::DatasetManifest m;
  m.name = name.empty() ? input.stem().string() : std::move(name);
  m.task = corpus::parse_task(task);
  m.target_names = targets.empty() ? loaded.target_names : targets;
  auto store = corpus::ingest(loaded.records, m, out);
  std::cout << "ingested " << store.record_count() << " records with " << store.target_count() << " targets into "
            << out.string() << "\n";
  return 0;
}

int cmd_gen_synthetic(const fs::path& out, const corpus::SyntheticConfig& cfg, std::optional<double> target_r2) {
  auto syn = target_r2 ? corpus::gen_synthetic_with_r2(cfg, *target_r2) : corpus::gen_synthetic(cfg);
  auto store = corpus::ingest(syn.records, syn.manifest, out);
  std::cout << "wrote " << store.record_count() << " synthetic records to " << out.string()
            << " (oracle R^2 " << syn.oracle_r2 << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Training

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out, bool resume) {
  auto cfg = pipeline::RunConfig::from_json(read_json(config));
  auto store = corpus::MmapStore::open(data);
  auto r = pipeline::run_training(cfg, store, out, resume);
  std::cout << "steps " << r.report.start_step << " -> " << r.report.final_step;
  if (r.report.killed) std::cout << " (stopped by kill_after_steps)";
  if (r.report.diverged) std::cout << " (diverged: " << r.report.divergence << ")";
  std::cout << "\n";
  if (r.test_metrics) std::cout << "test avg R^2 " << r.test_metrics->avg_r2 << "\n";
  std::cout << "report: " << (out / "report.json").string() << "\n";
  return r.report.diverged ? 2 : 0;
}

int cmd_ablate(std::uint64_t seed, const fs::path& report) {
  trainer::AblationConfig cfg;
  cfg.seed = seed;
  auto rep = trainer::run_ablation(cfg);
  write_json(report, rep.to_json());
  fs::path csv = report;
  csv.replace_extension(".csv");
  std::string lines = "config,final_avg_r2,diverged,final_step\n";
  for (const auto& row : rep.rows) {
    lines += row.config_name + "," + (std::isfinite(row.final_avg_r2) ? std::to_string(row.final_avg_r2) : "-inf") +
             "," + (row.diverged ? "true" : "false") + "," + std::to_string(row.final_step) + "\n";
    std::printf("%-22s %10.4f%s\n", row.config_name.c_str(), row.final_avg_r2, row.diverged ? "  diverged" : "");
  }
  lines += "ridge," + std::to_string(rep.ridge_avg_r2) + ",false,0\n";
  write_file_atomic(csv, lines);
  std::printf("%-22s %10.4f\noracle R^2 %.4f, ordering %s, %.1f s\n", "ridge", rep.ridge_avg_r2, rep.oracle_r2,
              rep.ordering_holds() ? "holds" : "does not hold", rep.seconds);
  return 0;
}

int cmd_sweep(const fs::path& dir, const fs::path& data, const fs::path& csv) {
  auto store = corpus::MmapStore::open(data);
  auto r = pipeline::sweep_run(dir, store);
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  write_file_atomic(csv, r.to_csv());
  std::cout << "best step " << r.best_step << " val_loss " << r.best_loss << " (" << r.losses.size()
            << " checkpoints)\n";
  return 0;
}

/// Uninterrupted run vs a run killed after `kill_at` steps and resumed; the
/// final parameter buffers must agree byte for byte.
int cmd_preempt_test(std::uint64_t kill_at, std::uint64_t steps, std::uint64_t seed) {
  trainer::AblationConfig ac;
  ac.seed = seed;
  ac.n = 600;
  ac.min_doc_len = 5;
  ac.max_doc_len = 40;
  auto rc = trainer::make_regression_corpus(ac);
  auto scaler = models::TargetScaler::fit(rc.train.Y.data, ac.n_targets, rc.target_names);
  rc.train.Y.data = scaler.transform(rc.train.Y.data);

  models::MlpConfig mc;
  mc.input_dim = rc.train.X.cols();
  mc.hidden = 16;
  mc.targets = ac.n_targets;
  mc.init_std = 0.3;
  mc.seed = seed;
  trainer::TrainerConfig tc;
  tc.max_steps = steps;
  tc.optimizer = trainer::OptimizerKind::adam;
  tc.learning_rate = 0.003;
  tc.save_steps = 1;
  tc.eval_steps = 0;
  tc.seed = seed;
  if (kill_at == 0 || kill_at > steps) throw ConfigError("--kill-at must lie in [1, --steps]");

  ScratchDir tmp("psyche-preempt");
  models::MlpRegressor straight(mc);
  trainer::TrainerConfig plain = tc;
  plain.save_steps = 0;
  trainer::train(plain, straight, rc.train, static_cast<const models::RegressionData*>(nullptr), nullptr);

  trainer::CheckpointStore store(tmp.path() / "ckpt", tc.save_total_limit);
  models::MlpRegressor first(mc);
  trainer::TrainerConfig killed = tc;
  killed.kill_after_steps = kill_at;
  auto r1 = trainer::train(killed, first, rc.train, static_cast<const models::RegressionData*>(nullptr), &store);
  models::MlpRegressor resumed(mc);
  auto r2 = trainer::train(tc, resumed, rc.train, static_cast<const models::RegressionData*>(nullptr), &store);

  bool same = true;
  auto a = straight.parameters(), b = resumed.parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    same = same && a[i]->value.shape == b[i]->value.shape &&
           std::memcmp(a[i]->value.data.data(), b[i]->value.data.data(), a[i]->value.data.size() * sizeof(double)) ==
               0;
  std::cout << "killed at step " << r1.final_step << ", resumed from " << r2.start_step << " to " << r2.final_step
            << ": parameters " << (same ? "bit-identical" : "DIFFER") << "\n";
  return same ? 0 : 1;
}

int cmd_baseline(const fs::path& data, const fs::path& report, double lambda, std::uint64_t split_seed) {
  auto store = corpus::MmapStore::open(data);
  auto parts = corpus::split(store, {0.8, 0.1, 0.1, split_seed});
  const std::size_t T = store.target_count();
  auto gather = [&](const std::vector<std::uint64_t>& idx, std::vector<std::string>& docs, std::vector<double>& y) {
    for (auto i : idx) {
      docs.emplace_back(store.text_view(i));
      auto t = store.targets(i);
      y.insert(y.end(), t.begin(), t.end());
    }
  };
  std::vector<std::string> dtr, dte;
  std::vector<double> ytr, yte;
  gather(parts.train, dtr, ytr);
  gather(parts.test, dte, yte);
  auto tfidf = features::TfIdfModel::fit(dtr);
  auto Xtr = features::transform_dense(tfidf, dtr);
  auto Xte = features::transform_dense(tfidf, dte);
  const std::size_t d = tfidf.dim();

  json out = {{"store", data.string()}, {"task", corpus::task_name(store.task())}, {"features", d},
              {"train", dtr.size()}, {"test", dte.size()}};
  if (!corpus::is_classification(store.task())) {
    auto ridge = models::RidgeRegressor::fit(Xtr, dtr.size(), d, ytr, T, lambda);
    auto m = models::regression_report(yte, ridge.predict(Xte), T);
    out["model"] = "ridge";
    out["lambda"] = lambda;
    out["metrics"] = m.to_json();
    std::cout << "ridge test avg R^2 " << m.avg_r2 << "\n";
  } else {
    auto mask = [](const std::vector<double>& y) {
      std::vector<std::uint8_t> m;
      for (double v : y) m.push_back(v > 0.5);
      return m;
    };
    models::LinearBaselineConfig lc;
    lc.multi_class = store.task() == corpus::Task::multi_class_classification;
    auto clf = models::fit_linear_baseline(Xtr, dtr.size(), d, mask(ytr), T, lc);
    double f1 = models::macro_f1(mask(yte), clf.predict(Xte), T);
    out["model"] = "linear-hinge";
    out["metrics"] = {{"macro_f1", f1}};
    std::cout << "linear baseline test macro-F1 " << f1 << "\n";
  }
  write_json(report, out);
  return 0;
}

// ---------------------------------------------------------------------------
// Persona language model

int cmd_gen_persona(const fs::path& out, std::size_t n, std::uint64_t seed) {
  auto rows = persona::make_persona_corpus(n, seed);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  persona::write_persona_jsonl(out, rows);
  std::cout << "wrote " << rows.size() << " persona examples to " << out.string() << "\n";
  return 0;
}

/// Pretrains a TinyLM on the response texts, then LoRA-fine-tunes it on
/// prompt/response pairs and saves the merged model.
int cmd_train_lm(const fs::path& data, const fs::path& out, std::uint64_t pretrain_steps,
                 std::uint64_t finetune_steps, std::uint64_t seed, const std::string& name) {
  auto rows = persona::load_persona_jsonl(data);
  if (rows.size() < 10) throw ValidationError("persona corpus needs at least 10 rows");
  std::span<const persona::PersonaExample> all(rows);
  auto th = persona::thresholds_of(all);
  const std::size_t n_val = std::max<std::size_t>(1, rows.size() / 10);
  auto train_rows = all.subspan(0, rows.size() - n_val), val_rows = all.subspan(rows.size() - n_val);
  auto train_pairs = persona::instruction_pairs(train_rows, th);
  auto val_pairs = persona::instruction_pairs(val_rows, th);

  std::vector<std::string> texts, vocab_texts;
  for (const auto& r : train_rows) texts.push_back(r.text);
  vocab_texts = texts;
  for (const auto& p : train_pairs) vocab_texts.push_back(p.prompt);
  persona::TinyLmConfig lc;
  lc.seed = seed;
  persona::TinyLM base(persona::Vocab::build(vocab_texts), lc);

  trainer::TrainerConfig tc;
  tc.optimizer = trainer::OptimizerKind::adam;
  tc.learning_rate = 0.01;
  tc.save_steps = 0;
  tc.eval_steps = 0;
  tc.seed = seed;
  tc.max_steps = pretrain_steps;
  auto plain = persona::plain_data(base.vocab(), texts, lc.context);
  trainer::train(tc, base, plain, static_cast<const persona::LmData*>(nullptr), nullptr);

  tc.max_steps = finetune_steps;
  models::LoraConfig lora;
  lora.seed = seed;
  auto r = persona::finetune_lora(base, train_pairs, val_pairs, tc, lora);
  persona::save_tinylm(r.model, out, name);
  json rep = {{"pretrain_steps", pretrain_steps},
              {"finetune_steps", finetune_steps},
              {"vocab", base.vocab_size()},
              {"initial_val_loss", r.initial_val_loss},
              {"final_val_loss", r.final_val_loss},
              {"initial_perplexity", models::perplexity(r.initial_val_loss)},
              {"final_perplexity", models::perplexity(r.final_val_loss)},
              {"trainable_parameters", r.trainable_parameters},
              {"base_parameters", r.base_parameters}};
  write_json(out / "report.json", rep);
  std::printf("validation perplexity %.4f -> %.4f; %zu trainable of %zu base parameters\n",
              models::perplexity(r.initial_val_loss), models::perplexity(r.final_val_loss), r.trainable_parameters,
              r.base_parameters);
  return 0;
}

// ---------------------------------------------------------------------------
// Services

/// Blocks SIGINT/SIGTERM on every thread, starts `svc`, and stops it cleanly
/// when one arrives.
int serve(services::HttpService& svc, const std::string& listen, std::string_view what) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int port = svc.start(listen);
  std::cerr << what << " listening on " << services::parse_listen(listen).host << ":" << port << "\n";
  int sig = 0;
  sigwait(&set, &sig);
  std::cerr << "shutting down\n";
  svc.stop();
  return 0;
}

services::ServerOptions server_options(const std::string& cors, const std::string& log) {
  services::ServerOptions o;
  o.cors_origin = cors;
  if (!log.empty()) o.request_log = log;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psyche: text-to-trait regression, persona chat and model services"};
  app.require_subcommand(1);
  int rc = 0;

  // ingest
  fs::path in_path, store_path;
  std::string ds_name, task = "multi_output_regression";
  std::vector<std::string> target_names;
  auto* ingest = app.add_subcommand("ingest", "Clean a CSV (id,text,targets...) or JSON-lines file into a store");
  ingest->add_option("--input", in_path, "CSV or .jsonl input")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", store_path, "Store path to write")->required();
  ingest->add_option("--name", ds_name, "Dataset name (default: input stem)");
  ingest->add_option("--task", task, "multi_output_regression | multi_label_classification | "
                                     "multi_class_classification")->capture_default_str();
  ingest->add_option("--targets", target_names, "Override target names");
  ingest->callback([&] { rc = cmd_ingest(in_path, store_path, ds_name, task, target_names); });

  // gen-synthetic
  corpus::SyntheticConfig syn;
  std::optional<double> target_r2;
  std::string syn_task = "multi_output_regression";
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic corpus with a known noise level");
  gen->add_option("--out", store_path, "Store path to write")->required();
  gen->add_option("--n", syn.n, "Records")->capture_default_str();
  gen->add_option("--seed", syn.seed, "Seed")->capture_default_str();
  gen->add_option("--vocab", syn.vocab_size, "Vocabulary size")->capture_default_str();
  gen->add_option("--targets", syn.n_targets, "Target count")->capture_default_str();
  gen->add_option("--noise", syn.noise_std, "Noise standard deviation")->capture_default_str();
  gen->add_option("--target-r2", target_r2, "Pick the noise level so the oracle R^2 equals this");
  gen->add_option("--min-len", syn.min_doc_len, "Minimum document length")->capture_default_str();
  gen->add_option("--max-len", syn.max_doc_len, "Maximum document length")->capture_default_str();
  gen->add_option("--task", syn_task, "Task kind")->capture_default_str();
  gen->callback([&] {
    syn.task = corpus::parse_task(syn_task);
    rc = cmd_gen_synthetic(store_path, syn, target_r2);
  });

  // train
  fs::path config_path, out_dir;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the MLP regressor on a store with checkpointing");
  train->add_option("--config", config_path, "Run config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--data", store_path, "Dataset store")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_flag("--resume", resume, "Continue from the latest valid checkpoint");
  train->callback([&] { rc = cmd_train(config_path, store_path, out_dir, resume); });

  // ablate
  std::uint64_t seed = 42;
  fs::path report_path;
  auto* ablate = app.add_subcommand("ablate", "Head/normalisation ablation on the synthetic corpus");
  ablate->add_option("--seed", seed, "Seed")->capture_default_str();
  ablate->add_option("--report", report_path, "JSON report path; a CSV is written next to it")->required();
  ablate->callback([&] { rc = cmd_ablate(seed, report_path); });

  // sweep
  fs::path csv_path;
  auto* sweep = app.add_subcommand("sweep", "Validation loss of every checkpoint of a run; report the minimum");
  sweep->add_option("--dir", out_dir, "Run directory written by train")->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--data", store_path, "Dataset store used for the run")->required()->check(CLI::ExistingFile);
  sweep->add_option("--csv", csv_path, "Output CSV (step,val_loss)")->required();
  sweep->callback([&] { rc = cmd_sweep(out_dir, store_path, csv_path); });

  // preempt-test
  std::uint64_t kill_at = 237, steps = 500;
  auto* preempt = app.add_subcommand("preempt-test", "Kill a run after K steps, resume it, compare to an uninterrupted run");
  preempt->add_option("--kill-at", kill_at, "Steps before the simulated kill")->required();
  preempt->add_option("--steps", steps, "Total steps")->capture_default_str();
  preempt->add_option("--seed", seed, "Seed")->capture_default_str();
  preempt->callback([&] { rc = cmd_preempt_test(kill_at, steps, seed); });

  // baseline
  double lambda = 1.0;
  std::uint64_t split_seed = 0;
  auto* baseline = app.add_subcommand("baseline", "TF-IDF ridge (regression) or linear hinge (classification)");
  baseline->add_option("--data", store_path, "Dataset store")->required()->check(CLI::ExistingFile);
  baseline->add_option("--report", report_path, "JSON report path")->required();
  baseline->add_option("--lambda", lambda, "Ridge penalty")->capture_default_str();
  baseline->add_option("--split-seed", split_seed, "Split seed")->capture_default_str();
  baseline->callback([&] { rc = cmd_baseline(store_path, report_path, lambda, split_seed); });

  // gen-persona
  std::size_t persona_n = 1000;
  fs::path persona_out;
  auto* gen_persona = app.add_subcommand("gen-persona", "Write a synthetic persona corpus (JSON lines)");
  gen_persona->add_option("--out", persona_out, "Output .jsonl")->required();
  gen_persona->add_option("--n", persona_n, "Rows")->capture_default_str();
  gen_persona->add_option("--seed", seed, "Seed")->capture_default_str();
  gen_persona->callback([&] { rc = cmd_gen_persona(persona_out, persona_n, seed); });

  // train-lm
  fs::path persona_data;
  std::uint64_t pretrain_steps = 1000, finetune_steps = 1000;
  std::string lm_name = "persona-lm";
  auto* train_lm = app.add_subcommand("train-lm", "Pretrain the toy LM and LoRA-fine-tune it on persona prompts");
  train_lm->add_option("--data", persona_data, "Persona corpus (.jsonl)")->required()->check(CLI::ExistingFile);
  train_lm->add_option("--out", out_dir, "Bundle directory")->required();
  train_lm->add_option("--pretrain-steps", pretrain_steps, "Plain-text steps")->capture_default_str();
  train_lm->add_option("--finetune-steps", finetune_steps, "LoRA steps")->capture_default_str();
  train_lm->add_option("--seed", seed, "Seed")->capture_default_str();
  train_lm->add_option("--name", lm_name, "Model name reported by the service")->capture_default_str();
  train_lm->callback([&] { rc = cmd_train_lm(persona_data, out_dir, pretrain_steps, finetune_steps, seed, lm_name); });

  // services
  fs::path bundle_dir;
  std::string listen, cors = "*", request_log;
  auto* serve_model = app.add_subcommand("serve-model", "Serve a regression bundle: POST /predict, GET /health");
  serve_model->add_option("--bundle", bundle_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);
  serve_model->add_option("--listen", listen, "host:port")->required();
  serve_model->add_option("--cors-origin", cors, "Access-Control-Allow-Origin value")->capture_default_str();
  serve_model->add_option("--request-log", request_log, "Append one JSON line per request");
  serve_model->callback([&] {
    auto b = std::make_shared<models::RegressorBundle>(models::load_bundle(bundle_dir));
    auto svc = services::make_model_service(b, server_options(cors, request_log));
    rc = serve(*svc, listen, "model service '" + b->name() + "'");
  });

  auto* serve_gen = app.add_subcommand("serve-gen", "Serve a persona LM bundle: POST /chat, GET /health");
  serve_gen->add_option("--bundle", bundle_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);
  serve_gen->add_option("--listen", listen, "host:port")->required();
  serve_gen->add_option("--cors-origin", cors, "Access-Control-Allow-Origin value")->capture_default_str();
  serve_gen->add_option("--request-log", request_log, "Append one JSON line per request");
  serve_gen->callback([&] {
    std::string name;
    auto m = std::make_shared<persona::TinyLM>(persona::load_tinylm(bundle_dir, &name));
    auto svc = services::make_generative_service(m, name, server_options(cors, request_log));
    rc = serve(*svc, listen, "generative service '" + name + "'");
  });

  auto* orch = app.add_subcommand("orchestrate", "Fan /analyze out to predictors and proxy /chat");
  orch->add_option("--config", config_path, "ServiceConfig JSON")->required()->check(CLI::ExistingFile);
  orch->add_option("--listen", listen, "host:port (overrides listen_address in the config)");
  orch->callback([&] {
    auto cfg = services::ServiceConfig::load(config_path);
    if (!listen.empty()) cfg.listen_address = listen;
    const std::string addr = cfg.listen_address;
    auto svc = services::make_orchestrator(std::move(cfg));
    rc = serve(*svc, addr, "orchestrator");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const psyche::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
