#pragma once

// Command-line front end. `run` is the whole program, so tests drive it in-process.
//
// Exit codes: 0 success, 1 invalid input (bad flags, data, config), 2 runtime failure.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmx/checkpoint.hpp"
#include "pmx/eval.hpp"
#include "pmx/explain.hpp"
#include "pmx/gradcheck.hpp"

#ifndef PMX_VERSION
#define PMX_VERSION "0.1.0"
#endif

namespace pmx::cli {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = PMX_VERSION;

/// Provenance record written next to every command's output files.
class RunManifest {
public:
  RunManifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), started_(std::chrono::system_clock::now()),
        clock_(std::chrono::steady_clock::now()) {}

  void input(const std::string& path) {
    inputs_.push_back(path);
    digests_.push_back(sha256_file(path));
  }

  /// Path for an output file in `dir`; refuses to overwrite any input.
  std::string output(const fs::path& dir, const std::string& name) {
    const fs::path p = dir / name;
    for (const auto& in : inputs_) {
      std::error_code ec;
      if (fs::exists(p) && fs::equivalent(p, in, ec))
        throw UsageError("output '" + p.string() + "' would overwrite input '" + in + "'");
    }
    outputs_.push_back(p.string());
    return p.string();
  }

  nlohmann::json config = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  nlohmann::json notes = nlohmann::json::object();

  void write(const fs::path& dir) const {
    nlohmann::json j;
    j["command"] = command_;
    j["command_line"] = argv_;
    j["version"] = kVersion;
    j["config"] = config;
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json();
    j["inputs"] = nlohmann::json::array();
    for (std::size_t i = 0; i < inputs_.size(); ++i) j["inputs"].push_back({{"path", inputs_[i]}, {"sha256", digests_[i]}});
    j["outputs"] = nlohmann::json::array();
    for (const auto& o : outputs_) j["outputs"].push_back({{"path", o}, {"sha256", sha256_file(o)}});
    const std::time_t t = std::chrono::system_clock::to_time_t(started_);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    j["started_utc"] = buf;
    j["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    if (!notes.empty()) j["notes"] = notes;
    std::ofstream f(dir / "run_manifest.json");
    f << j.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write '" + (dir / "run_manifest.json").string() + "'");
  }

private:
  std::string command_;
  std::vector<std::string> argv_;
  std::vector<std::string> inputs_, digests_, outputs_;
  std::chrono::system_clock::time_point started_;
  std::chrono::steady_clock::time_point clock_;
};

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
}

inline fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory '" + dir + "'");
  return dir;
}

inline nlohmann::json synth_json(const SynthConfig& s) {
  return {{"n_cases", s.n_cases},
          {"class_fractions", s.class_fractions},
          {"embedding_separation", s.embedding_separation},
          {"tabular_signal", s.tabular_signal},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed},
          {"embedding_dim", s.embedding_dim},
          {"image_noise_fraction", s.image_noise_fraction},
          {"image_noise_scale", s.image_noise_scale},
          {"clinical_decoy_fraction", s.clinical_decoy_fraction},
          {"clinical_by_class", s.clinical_by_class},
          {"clinical_noise", s.clinical_noise}};
}

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream out;
  out << "epoch,loss_total,loss_cls,loss_reg,loss_proto,loss_class,loss_sep,loss_center,val_accuracy,projected\n";
  for (const auto& r : h.epochs) {
    out << r.epoch;
    for (double v : {r.loss_total, r.loss_cls, r.loss_reg, r.loss_proto, r.loss_class, r.loss_sep, r.loss_center, r.val_accuracy})
      out << ',' << pmx::detail::format_double(v);
    out << ',' << (r.projected ? 1 : 0) << '\n';
  }
  return out.str();
}

inline const PatientCase& find_case(std::span<const PatientCase> cases, const std::string& id) {
  for (const auto& c : cases)
    if (c.patient_id == id) return c;
  throw DataError("no case with patient_id '" + id + "' in the data");
}

} // namespace detail

/// Flags shared by commands that read a dataset.
struct DataFlags {
  std::string clinical;
  std::string embeddings;

  void add(CLI::App* app) {
    app->add_option("--data-clinical", clinical, "Clinical CSV")->required()->check(CLI::ExistingFile);
    app->add_option("--data-embeddings", embeddings, "Embedding file (CSV or binary)")->required()->check(CLI::ExistingFile);
  }

  std::vector<PatientCase> load(RunManifest& m, std::size_t width) const {
    m.input(clinical);
    m.input(embeddings);
    return load_dataset(clinical, embeddings, width);
  }
};

/// Training flags. Precedence: flag, then --config file, then built-in default.
struct TrainFlags {
  std::string config_file;
  std::uint64_t seed = 0;
  std::size_t k = 3, max_epochs = 0, patience = 0, batch_size = 0, embedding_dim = 0;
  double tau_conf = 0.1, lr_image = 0, lr_tabular = 0, lr_prototypes = 0;
  bool no_gate = false, no_multitask = false, no_cross_attention = false, no_prototypes = false;
  CLI::App* app = nullptr;

  void add(CLI::App* a, bool ablation_flags) {
    app = a;
    a->add_option("--config", config_file, "Training config JSON")->check(CLI::ExistingFile);
    a->add_option("--seed", seed, "Seed for the split, initialization and batching");
    a->add_option("--k", k, "Neighbors retrieved at inference");
    a->add_option("--tau-conf", tau_conf, "Vote temperature");
    a->add_option("--max-epochs", max_epochs);
    a->add_option("--patience", patience);
    a->add_option("--batch-size", batch_size);
    a->add_option("--embedding-dim", embedding_dim, "Embedding width (default: taken from the data)");
    a->add_option("--lr-image", lr_image);
    a->add_option("--lr-tabular", lr_tabular);
    a->add_option("--lr-prototypes", lr_prototypes);
    if (ablation_flags) {
      a->add_flag("--no-gate", no_gate, "Fix the modality gate at 0.5");
      a->add_flag("--no-multitask", no_multitask, "Drop the T-score regression term");
      a->add_flag("--no-cross-attention", no_cross_attention, "Concatenate instead of attending");
      a->add_flag("--no-prototypes", no_prototypes, "Classify with the head only");
    }
  }

  bool given(const char* flag) const { return app->count(flag) > 0; }

  /// Effective config. `width_from_data` is used when neither the file nor a flag sets the width.
  TrainConfig resolve(RunManifest& m, const std::function<std::size_t()>& width_from_data) const {
    TrainConfig c;
    bool width_set = false;
    if (!config_file.empty()) {
      m.input(config_file);
      std::ifstream f(config_file);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(config_file + ": " + e.what());
      }
      from_json(j, c);
      width_set = j.contains("embedding_dim");
    }
    if (given("--seed")) c.seed = seed;
    if (given("--k")) c.k = k;
    if (given("--tau-conf")) c.tau_conf = tau_conf;
    if (given("--max-epochs")) c.max_epochs = max_epochs;
    if (given("--patience")) c.patience = patience;
    if (given("--batch-size")) c.batch_size = batch_size;
    if (given("--lr-image")) c.lr_image = lr_image;
    if (given("--lr-tabular")) c.lr_tabular = lr_tabular;
    if (given("--lr-prototypes")) c.lr_prototypes = lr_prototypes;
    if (given("--embedding-dim")) {
      c.embedding_dim = embedding_dim;
      width_set = true;
    }
    if (!width_set) c.embedding_dim = width_from_data();
    c.no_gate = c.no_gate || no_gate;
    c.no_multitask = c.no_multitask || no_multitask;
    c.no_cross_attention = c.no_cross_attention || no_cross_attention;
    c.no_prototypes = c.no_prototypes || no_prototypes;
    c.validate();
    m.config = c;
    m.seed = c.seed;
    return c;
  }
};

/// Inference overrides for commands that read a checkpoint.
struct InferFlags {
  std::string checkpoint;
  std::size_t k = 3;
  double tau_conf = 0.1;
  CLI::App* app = nullptr;

  void add(CLI::App* a) {
    app = a;
    a->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required()->check(CLI::ExistingFile);
    a->add_option("--k", k, "Neighbors retrieved (default: checkpoint value)");
    a->add_option("--tau-conf", tau_conf, "Vote temperature (default: checkpoint value)");
  }

  LoadedCheckpoint load(RunManifest& m) {
    m.input(checkpoint);
    auto lc = load_checkpoint(checkpoint);
    if (app->count("--k")) lc.trained.config.k = k;
    if (app->count("--tau-conf")) lc.trained.config.tau_conf = tau_conf;
    lc.trained.config.validate();
    m.config = lc.trained.config;
    m.seed = lc.trained.config.seed;
    m.notes["checkpoint_id"] = lc.id;
    return lc;
  }
};

struct Io {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------------------
// Commands

/// Effective config plus the data; the width is read from the data unless pinned.
inline std::pair<TrainConfig, std::vector<PatientCase>> load_for_training(const DataFlags& data, const TrainFlags& tf,
                                                                          RunManifest& m) {
  std::vector<PatientCase> cases;
  bool loaded = false;
  auto cfg = tf.resolve(m, [&] {
    cases = data.load(m, 0);
    loaded = true;
    if (cases.empty()) throw DataError("dataset is empty");
    return cases.front().embedding.size();
  });
  if (!loaded) cases = data.load(m, cfg.embedding_dim);
  return {cfg, std::move(cases)};
}

inline int cmd_gen_synth(const SynthConfig& sc, const std::string& format, const std::string& out_dir, RunManifest& m,
                         Io io) {
  sc.validate();
  const auto dir = detail::ensure_dir(out_dir);
  const auto cases = generate_synthetic(sc);
  const auto clin = m.output(dir, "clinical.csv");
  const bool binary = format == "binary";
  const auto emb = m.output(dir, binary ? "embeddings.bin" : "embeddings.csv");
  write_clinical_csv(clin, cases);
  write_embeddings(emb, cases, binary ? EmbeddingFormat::Binary : EmbeddingFormat::Csv);
  m.config = detail::synth_json(sc);
  m.seed = sc.seed;
  m.write(dir);
  io.out << "wrote " << cases.size() << " cases to " << clin << " and " << emb << '\n';
  return 0;
}

inline int cmd_train(const DataFlags& data, const TrainFlags& tf, const std::string& out_dir, bool quiet,
                     RunManifest& m, Io io) {
  auto [cfg, cases] = load_for_training(data, tf, m);
  const auto dir = detail::ensure_dir(out_dir);
  const auto split = split_dataset(cases, cfg.seed);
  auto tm = train(split, cfg, [&](const EpochRecord& r, std::size_t planned) {
    if (quiet) return;
    io.err << "epoch " << r.epoch << '/' << planned << " loss " << r.loss_total << " val " << r.val_accuracy
           << (r.projected ? " projected" : "") << '\n';
  });
  const auto ckpt = m.output(dir, "checkpoint.pmxc");
  save_checkpoint(tm, ckpt);
  nlohmann::json h = pmx::detail::history_json(tm.history);
  h["split"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
  detail::write_text(m.output(dir, "history.json"), h.dump(2) + "\n");
  detail::write_text(m.output(dir, "history.csv"), detail::history_csv(tm.history));
  m.notes["checkpoint_id"] = checkpoint_id(pmx::detail::read_file_bytes(ckpt));
  m.notes["best_epoch"] = tm.history.best_epoch;
  m.write(dir);
  io.out << "best epoch " << tm.history.best_epoch << " of " << tm.history.epochs.size() << ", val accuracy "
         << tm.history.best_val_accuracy << ", test accuracy " << *tm.history.test_accuracy << '\n';
  return 0;
}

inline int cmd_eval(const DataFlags& data, InferFlags& inf, const std::string& which, const std::string& out_dir,
                    RunManifest& m, Io io) {
  auto lc = inf.load(m);
  auto& tm = lc.trained;
  const auto cases = data.load(m, tm.config.embedding_dim);
  const auto split = split_dataset(cases, tm.config.seed);
  const std::vector<PatientCase>& set = which == "all" ? cases : split.test;
  const auto dir = detail::ensure_dir(out_dir);

  const Batch b = make_batch(set, tm.standardizer);
  std::vector<Label> pred, truth;
  std::vector<double> t_scores, conf;
  if (tm.config.no_prototypes) {
    pred = predict_head(tm.model, b);
  } else {
    for (const auto& r : predict_knn(tm.model, b, tm.config.k, tm.config.tau_conf)) {
      pred.push_back(r.prediction);
      conf.push_back(confidence(r));
    }
  }
  for (const auto& c : set) {
    truth.push_back(c.label);
    t_scores.push_back(c.t_score);
  }
  const auto metrics = compute_metrics(pred, truth, t_scores);

  nlohmann::json j;
  j["checkpoint_id"] = lc.id;
  j["evaluated"] = which;
  j["path"] = tm.config.no_prototypes ? "head" : "knn";
  j["k"] = tm.config.k;
  j["tau_conf"] = tm.config.tau_conf;
  j["metrics"] = to_json(metrics);
  if (!tm.config.no_prototypes) {
    double sc = 0, si = 0;
    std::size_t nc = 0, ni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == truth[i]) sc += conf[i], ++nc;
      else si += conf[i], ++ni;
    }
    const auto mean_c = nc ? std::optional<double>(sc / static_cast<double>(nc)) : std::nullopt;
    const auto mean_i = ni ? std::optional<double>(si / static_cast<double>(ni)) : std::nullopt;
    j["confidence"] = {{"mean_correct", pmx::detail::optional_json(mean_c)},
                       {"mean_incorrect", pmx::detail::optional_json(mean_i)},
                       {"separation", mean_c && mean_i ? nlohmann::json(*mean_c - *mean_i) : nlohmann::json()}};
    const auto h = compare_heads(tm, set);
    j["head_comparison"] = {{"knn", h.knn}, {"head", h.head}, {"gap", std::abs(h.knn - h.head)}};
  }
  detail::write_text(m.output(dir, "metrics.json"), j.dump(2) + "\n");
  detail::write_text(m.output(dir, "metrics.csv"), metrics_csv(metrics));

  std::ostringstream p;
  p << "patient_id,true_label,prediction,confidence\n";
  for (std::size_t i = 0; i < set.size(); ++i)
    p << set[i].patient_id << ',' << label_name(truth[i]) << ',' << label_name(pred[i]) << ','
      << (conf.empty() ? "" : pmx::detail::format_double(conf[i])) << '\n';
  detail::write_text(m.output(dir, "predictions.csv"), p.str());
  m.notes["evaluated"] = which;
  m.write(dir);
  io.out << "accuracy " << metrics.accuracy << " on " << metrics.n << " cases (" << which << ")\n";
  for (const auto& w : metrics.warnings) io.err << "warning: " << w << '\n';
  return 0;
}

inline int cmd_predict(const DataFlags& data, InferFlags& inf, const std::vector<std::string>& ids,
                       const std::string& out_dir, RunManifest& m, Io io) {
  auto lc = inf.load(m);
  auto& tm = lc.trained;
  const auto cases = data.load(m, tm.config.embedding_dim);
  std::vector<PatientCase> set;
  if (ids.empty()) set = cases;
  for (const auto& id : ids) set.push_back(detail::find_case(cases, id));
  if (set.empty()) throw DataError("no cases to predict");

  const Batch b = make_batch(set, tm.standardizer);
  std::ostringstream p;
  p << "patient_id,prediction,confidence\n";
  if (tm.config.no_prototypes) {
    const auto pred = predict_head(tm.model, b);
    for (std::size_t i = 0; i < set.size(); ++i) p << set[i].patient_id << ',' << label_name(pred[i]) << ",\n";
  } else {
    const auto res = predict_knn(tm.model, b, tm.config.k, tm.config.tau_conf);
    for (std::size_t i = 0; i < set.size(); ++i)
      p << set[i].patient_id << ',' << label_name(res[i].prediction) << ','
        << pmx::detail::format_double(confidence(res[i])) << '\n';
  }
  if (out_dir.empty()) {
    io.out << p.str();
    return 0;
  }
  const auto dir = detail::ensure_dir(out_dir);
  detail::write_text(m.output(dir, "predictions.csv"), p.str());
  m.write(dir);
  return 0;
}

inline int cmd_explain(const DataFlags& data, InferFlags& inf, const std::string& id, const std::string& true_label,
                       const std::string& out_dir, RunManifest& m, Io io) {
  auto lc = inf.load(m);
  auto& tm = lc.trained;
  const auto cases = data.load(m, tm.config.embedding_dim);
  const auto& pc = detail::find_case(cases, id);
  ExplainOptions opt{tm.config.k, tm.config.tau_conf, std::nullopt};
  if (true_label == "auto") opt.true_label = pc.label;
  else if (!true_label.empty()) opt.true_label = parse_label(true_label);
  const auto text = to_json(explain(pc, tm, lc.id, opt)).dump(2) + "\n";
  if (out_dir.empty()) {
    io.out << text;
    return 0;
  }
  const auto dir = detail::ensure_dir(out_dir);
  detail::write_text(m.output(dir, "explanation_" + id + ".json"), text);
  m.write(dir);
  return 0;
}

inline int cmd_ablate(const DataFlags& data, const TrainFlags& tf, const std::string& out_dir, RunManifest& m,
                      Io io) {
  auto [cfg, cases] = load_for_training(data, tf, m);
  const auto dir = detail::ensure_dir(out_dir);
  const auto rows = run_ablations(split_dataset(cases, cfg.seed), cfg);
  detail::write_text(m.output(dir, "ablation.csv"), ablation_csv(rows));
  detail::write_text(m.output(dir, "ablation.json"), to_json(std::span<const AblationRow>(rows)).dump(2) + "\n");
  m.write(dir);
  io.out << ablation_csv(rows);
  return 0;
}

inline int cmd_export_prototypes(InferFlags& inf, const std::string& out_dir, RunManifest& m, Io io) {
  auto lc = inf.load(m);
  const auto& bank = lc.trained.model.bank();
  if (lc.trained.config.no_prototypes || !bank.initialized)
    throw UsageError("checkpoint was trained without prototypes; nothing to export");
  std::ostringstream p;
  p << "class,slot,source_patient_id,source_t_score";
  const std::pair<const char*, const Matrix*> spaces[] = {
      {"img", &bank.image.value}, {"tab", &bank.tabular.value}, {"fused", &bank.fused.value}};
  for (const auto& [prefix, mat] : spaces)
    for (Eigen::Index c = 0; c < mat->cols(); ++c) p << ',' << prefix << c;
  p << '\n';
  for (std::size_t r = 0; r < bank.size(); ++r) {
    const auto& src = bank.sources[r];
    p << label_name(bank.class_of(r)) << ',' << bank.slot_of(r) << ',' << (src ? src->patient_id : "") << ','
      << (src ? pmx::detail::format_double(src->t_score) : "");
    for (const auto& [prefix, mat] : spaces)
      for (Eigen::Index c = 0; c < mat->cols(); ++c)
        p << ',' << pmx::detail::format_double((*mat)(static_cast<Eigen::Index>(r), c));
    p << '\n';
  }
  const auto dir = detail::ensure_dir(out_dir);
  const auto path = m.output(dir, "prototypes.csv");
  detail::write_text(path, p.str());
  m.write(dir);
  io.out << "wrote " << bank.size() << " prototypes to " << path << '\n';
  return 0;
}

inline int cmd_gradcheck(std::size_t seeds, const std::string& out_dir, RunManifest& m, Io io) {
  const auto report = check_objectives(seeds);
  nlohmann::json j;
  j["pass"] = report.pass();
  j["cases"] = nlohmann::json::array();
  for (const auto& c : report.cases) {
    j["cases"].push_back({{"seed", c.seed},
                          {"objective", std::string(objective_name(c.objective))},
                          {"variant", c.variant},
                          {"max_rel_error", c.max_rel_error},
                          {"pass", c.pass}});
    io.out << (c.pass ? "PASS " : "FAIL ") << objective_name(c.objective) << " seed " << c.seed << ' ' << c.variant
           << " max rel error " << c.max_rel_error << '\n';
  }
  io.out << (report.pass() ? "gradcheck PASS" : "gradcheck FAIL") << '\n';
  if (!out_dir.empty()) {
    const auto dir = detail::ensure_dir(out_dir);
    detail::write_text(m.output(dir, "gradcheck.json"), j.dump(2) + "\n");
    m.config = {{"seeds", seeds}, {"h", 1e-4}, {"tolerance", 1e-4}};
    m.write(dir);
  }
  return report.pass() ? 0 : 2;
}

// ---------------------------------------------------------------------------
// Dispatch

/// Runs one command. `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> argv{"pmx"};
  argv.insert(argv.end(), args.begin(), args.end());
  Io io{out, err};

  CLI::App app{"Prototype-based multimodal bone-health classifier"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic cohort");
  SynthConfig sc;
  std::string preset = "default", format = "csv", gen_out;
  std::vector<double> fractions;
  gen->add_option("--preset", preset, "Base configuration")->check(CLI::IsMember({"default", "complementary"}));
  gen->add_option("--n", sc.n_cases, "Number of cases");
  gen->add_option("--seed", sc.seed);
  gen->add_option("--fractions", fractions, "Class fractions normal,osteopenia,osteoporosis")->delimiter(',')->expected(3);
  gen->add_option("--separation", sc.embedding_separation, "Embedding class separation");
  gen->add_option("--tabular-signal", sc.tabular_signal, "Strength of the T-score in clinical risk factors");
  gen->add_option("--noise-sigma", sc.noise_sigma);
  gen->add_option("--embedding-dim", sc.embedding_dim);
  gen->add_option("--image-noise-fraction", sc.image_noise_fraction, "Share of degraded images");
  gen->add_option("--image-noise-scale", sc.image_noise_scale, "Noise scale of degraded images");
  gen->add_option("--clinical-decoy-fraction", sc.clinical_decoy_fraction, "Share of clinical records from another class");
  gen->add_option("--clinical-noise", sc.clinical_noise, "Multiplier on age, weight and height spread");
  bool by_class = false;
  gen->add_flag("--clinical-by-class", by_class, "Risk factors follow the class midpoint");
  gen->add_option("--format", format, "Embedding encoding")->check(CLI::IsMember({"csv", "binary"}));
  gen->add_option("--out-dir", gen_out)->required();

  // train
  auto* trn = app.add_subcommand("train", "Train a model and write its checkpoint");
  DataFlags trn_data;
  TrainFlags trn_flags;
  std::string trn_out;
  bool quiet = false;
  trn_data.add(trn);
  trn_flags.add(trn, true);
  trn->add_option("--out-dir", trn_out)->required();
  trn->add_flag("--quiet", quiet, "No per-epoch progress");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on its test partition");
  DataFlags ev_data;
  InferFlags ev_inf;
  std::string ev_out, ev_split = "test";
  ev_data.add(ev);
  ev_inf.add(ev);
  ev->add_option("--split", ev_split, "Cases to score")->check(CLI::IsMember({"test", "all"}));
  ev->add_option("--out-dir", ev_out)->required();

  // predict
  auto* pr = app.add_subcommand("predict", "Label one case or the whole batch");
  DataFlags pr_data;
  InferFlags pr_inf;
  std::vector<std::string> pr_ids;
  std::string pr_out;
  pr_data.add(pr);
  pr_inf.add(pr);
  pr->add_option("--case", pr_ids, "patient_id to predict (repeatable; default all)");
  pr->add_option("--out-dir", pr_out, "Write predictions.csv here instead of stdout");

  // explain
  auto* ex = app.add_subcommand("explain", "Explanation report for one case");
  DataFlags ex_data;
  InferFlags ex_inf;
  std::string ex_id, ex_label, ex_out;
  ex_data.add(ex);
  ex_inf.add(ex);
  ex->add_option("--case", ex_id, "patient_id")->required();
  ex->add_option("--true-label", ex_label, "Audit against this label, or 'auto' for the data's label");
  ex->add_option("--out-dir", ex_out, "Write the report here instead of stdout");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train the full model, each ablation and the baseline");
  DataFlags ab_data;
  TrainFlags ab_flags;
  std::string ab_out;
  ab_data.add(ab);
  ab_flags.add(ab, false);
  ab->add_option("--out-dir", ab_out)->required();

  // export-prototypes
  auto* xp = app.add_subcommand("export-prototypes", "Write the prototype bank as CSV");
  InferFlags xp_inf;
  std::string xp_out;
  xp_inf.add(xp);
  xp->add_option("--out-dir", xp_out)->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every objective");
  std::size_t gc_seeds = 20;
  std::string gc_out;
  gc->add_option("--seeds", gc_seeds, "Random models to check");
  gc->add_option("--out-dir", gc_out);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  RunManifest m(command, argv);
  try {
    if (gen->parsed()) {
      if (preset == "complementary") {
        SynthConfig base = complementary_synth_config();
        // Flags given explicitly win over the preset.
        auto keep = [&](const char* flag, auto& field, const auto& preset_value) {
          if (!gen->count(flag)) field = preset_value;
        };
        keep("--n", sc.n_cases, base.n_cases);
        keep("--separation", sc.embedding_separation, base.embedding_separation);
        keep("--tabular-signal", sc.tabular_signal, base.tabular_signal);
        keep("--noise-sigma", sc.noise_sigma, base.noise_sigma);
        keep("--embedding-dim", sc.embedding_dim, base.embedding_dim);
        keep("--image-noise-fraction", sc.image_noise_fraction, base.image_noise_fraction);
        keep("--image-noise-scale", sc.image_noise_scale, base.image_noise_scale);
        keep("--clinical-decoy-fraction", sc.clinical_decoy_fraction, base.clinical_decoy_fraction);
        keep("--clinical-noise", sc.clinical_noise, base.clinical_noise);
        if (!gen->count("--fractions")) sc.class_fractions = base.class_fractions;
        by_class = by_class || base.clinical_by_class;
      }
      if (!fractions.empty()) std::copy(fractions.begin(), fractions.end(), sc.class_fractions.begin());
      sc.clinical_by_class = by_class;
      return cmd_gen_synth(sc, format, gen_out, m, io);
    }
    if (trn->parsed()) return cmd_train(trn_data, trn_flags, trn_out, quiet, m, io);
    if (ev->parsed()) return cmd_eval(ev_data, ev_inf, ev_split, ev_out, m, io);
    if (pr->parsed()) return cmd_predict(pr_data, pr_inf, pr_ids, pr_out, m, io);
    if (ex->parsed()) return cmd_explain(ex_data, ex_inf, ex_id, ex_label, ex_out, m, io);
    if (ab->parsed()) return cmd_ablate(ab_data, ab_flags, ab_out, m, io);
    if (xp->parsed()) return cmd_export_prototypes(xp_inf, xp_out, m, io);
    if (gc->parsed()) return cmd_gradcheck(gc_seeds, gc_out, m, io);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

inline int run(int argc, char** argv) { return run(std::vector<std::string>(argv + 1, argv + argc)); }

} // namespace pmx::cli
