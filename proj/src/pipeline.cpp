#include "cleansheet/experiment.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cleansheet {

std::string to_string(Command command) {
  switch (command) {
    case Command::train_substitutes:
      return "train-substitutes";
    case Command::gen_trigger:
      return "gen-trigger";
    case Command::eval_attack:
      return "eval-attack";
    case Command::eval_defense:
      return "eval-defense";
    case Command::split_data:
      return "split-data";
    case Command::run:
      return "run";
  }
  return "unknown";
}

bool RunOutcome::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::filesystem::path run_directory(const ExperimentConfig& config, const RunOptions& options) {
  const std::filesystem::path root = options.output_root.empty() ? std::filesystem::path(config.output_dir) : options.output_root;
  return root / (to_string(options.command) + "-" + std::to_string(config.seed) + "-" + config_hash(config));
}

namespace {

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

template <typename Scalar>
DatasetSplits<Scalar> load_dataset(const DatasetConfig& d, std::uint64_t run_seed) {
  const std::uint64_t seed = d.seed.value_or(derive_seed(run_seed, "dataset"));
  if (d.source == "synthetic-shapes") {
    ShapesOptions o;
    o.num_classes = d.num_classes;
    o.image_size = d.image_size;
    o.train = d.train;
    o.val = d.val;
    o.test = d.test;
    o.noise = d.noise;
    o.distractor_prob = d.distractor_prob;
    return make_synthetic_shapes<Scalar>(o, seed);
  }
  if (d.source == "blobs") {
    BlobOptions o;
    o.num_classes = d.num_classes;
    o.dims = d.dims;
    o.spread = d.spread;
    o.train = d.train;
    o.val = d.val;
    o.test = d.test;
    return make_blobs<Scalar>(o, seed);
  }
  Cifar10Options o;
  o.directory = d.path;
  o.classes = d.classes;
  o.train = d.train;
  o.val = d.val;
  o.test = d.test;
  return load_cifar10_binary<Scalar>(o);
}

CleanSheetConfig cleansheet_config(const ExperimentConfig& c, const DatasetSpec& dataset, Index attacker_train) {
  CleanSheetConfig cs;
  cs.distill = c.distill;
  cs.distill.num_substitutes = static_cast<int>(c.substitutes.size());
  cs.distill.train.seed = c.seed;
  cs.schedule = c.schedule;
  cs.schedule.batch_size = cs.distill.train.batch_size;
  if (cs.schedule.iters_per_epoch == 0) {
    cs.schedule.iters_per_epoch =
        static_cast<int>((attacker_train + cs.schedule.batch_size - 1) / cs.schedule.batch_size);
  }
  cs.lambda = c.lambda;
  cs.substitutes = c.substitutes;
  for (auto& s : cs.substitutes) s.num_classes = dataset.num_classes;
  cs.target_class = c.attack.target_class;
  cs.norm_type = c.attack.norm_type;
  cs.seed = c.seed;
  return cs;
}

// Writes files under the run directory and remembers them for the manifest.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) {}

  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

  void text(const std::string& name, const std::string& content) {
    write_text_file(dir_ / name, content);
    files_.push_back(name);
  }
  void json(const std::string& name, const Json& j) { text(name, dump(j)); }
  std::filesystem::path reserve(const std::string& name) {
    files_.push_back(name);
    return dir_ / name;
  }
  [[nodiscard]] std::vector<std::string> files() const {
    auto f = files_;
    std::sort(f.begin(), f.end());
    return f;
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

std::string csv_number(double v) {
  std::ostringstream out;
  out.precision(6);
  out << v;
  return out.str();
}

template <typename Scalar>
class Pipeline {
 public:
  Pipeline(const ExperimentConfig& config, const RunOptions& options, ArtifactWriter& out)
      : config_(config), options_(options), out_(out) {}

  RunOutcome run() {
    const Command cmd = options_.command;
    stage_ = "data";
    data_ = load_dataset<Scalar>(config_.dataset, config_.seed);
    spdlog::info("dataset {}: {} train / {} val / {} test, shape {}", data_.spec.name, data_.train.size(),
                 data_.val.size(), data_.test.size(), to_string(data_.spec.input_shape));
    stage_ = "split";
    make_split();
    if (cmd == Command::split_data) return finish();

    const CleanSheetConfig cs = cleansheet_config(config_, data_.spec, attacker_train_.size());
    if (cmd == Command::train_substitutes) {
      stage_ = "train-substitutes";
      train_substitutes(cs);
      return finish();
    }
    if (cmd == Command::gen_trigger || cmd == Command::run) {
      stage_ = "gen-trigger";
      generate_trigger(cs);
    } else {
      stage_ = "load-trigger";
      if (options_.trigger_path.empty()) throw ConfigError(to_string(cmd) + " needs --trigger");
      trigger_ = load_trigger<Scalar>(options_.trigger_path).trigger;
      trigger_->validate(data_.spec.input_shape);
      if (!options_.ensemble_dir.empty()) {
        ensemble_ = load_ensemble<Scalar>(options_.ensemble_dir, attacker_train_.size(), config_.seed);
      }
    }
    if (cmd == Command::gen_trigger) return finish();

    stage_ = "targets";
    prepare_targets();
    if (cmd == Command::eval_attack || cmd == Command::run) {
      stage_ = "eval-attack";
      evaluate_attacks();
      if (cmd == Command::run && !config_.attack.campaign_classes.empty()) {
        stage_ = "campaign";
        campaign(cs);
      }
    }
    if (cmd == Command::eval_defense || cmd == Command::run) {
      stage_ = "eval-defense";
      evaluate_defenses();
    }
    return finish();
  }

  [[nodiscard]] const std::string& stage() const { return stage_; }

 private:
  void make_split() {
    attacker_train_ = data_.train;
    user_train_ = data_.train;
    if (config_.split.mode == "none") {
      if (options_.command == Command::split_data) throw ConfigError("split-data needs split.mode overlap or dirichlet");
      return;
    }
    const std::uint64_t seed = derive_seed(config_.seed, "split");
    const SplitPlan plan = config_.split.mode == "overlap"
                               ? split_overlap(data_.train.size(), config_.split.attacker, config_.split.user, seed)
                               : split_dirichlet(data_.train.y, data_.spec.num_classes, config_.split.alpha, seed);
    attacker_train_ = data_.train.subset(plan.attacker_indices);
    user_train_ = data_.train.subset(plan.user_indices);
    out_.json("split_plan.json", to_json(plan));
    spdlog::info("split {}: attacker {} / user {} examples, overlap {}", config_.split.mode, plan.attacker_indices.size(),
                 plan.user_indices.size(), overlap_count(plan.attacker_indices, plan.user_indices));
  }

  void train_substitutes(const CleanSheetConfig& cs) {
    auto state = init_ensemble<Scalar>(cs.substitutes, data_.spec, cs.distill, attacker_train_.size(), cs.seed);
    for (int e = 0; e < cs.schedule.max_epochs; ++e) {
      train_ensemble_epoch(state, attacker_train_, data_.val, cs.distill);
      spdlog::info("epoch {}: teacher {}", e, state.teacher());
    }
    std::filesystem::create_directories(out_.dir() / "ensemble");
    save_ensemble(out_.reserve("ensemble"), state, cs.distill);
  }

  void generate_trigger(const CleanSheetConfig& cs) {
    std::optional<EnsembleState<Scalar>> initial;
    if (!options_.ensemble_dir.empty()) {
      initial = load_ensemble<Scalar>(options_.ensemble_dir, attacker_train_.size(), cs.seed);
    }
    CleanSheetObserver<Scalar> observer;
    observer.on_epoch = [](const EpochSummary& e, const EnsembleState<Scalar>&) {
      spdlog::info("epoch {}: teacher {}, ensemble ASR {:.4f}, mask L1 {:.2f}, lambda {:.3g}", e.epoch, e.teacher,
                   e.ensemble_asr, e.mask_l1, e.lambda);
    };
    auto result = run_cleansheet<Scalar>(data_.spec, attacker_train_, data_.val, cs, std::move(initial), &observer);
    save_trigger(out_.reserve("trigger.csar"), result.artifact);
    std::filesystem::create_directories(out_.dir() / "ensemble");
    save_ensemble(out_.reserve("ensemble"), result.ensemble, cs.distill);
    Json summary = result.artifact.provenance;
    summary["target_class"] = cs.target_class;
    summary["norm_type"] = to_string(cs.norm_type);
    summary["mask_l1"] = mask_norm(result.artifact.trigger.mask, NormType::l1);
    summary["schedule"] = to_json(cs.schedule);
    summary["lambda"] = to_json(cs.lambda, false);
    out_.json("trigger.json", summary);
    ensemble_asr_ = result.ensemble_asr;
    trigger_ = result.artifact.trigger;
    ensemble_ = std::move(result.ensemble);
  }

  void prepare_targets() {
    std::vector<TargetEntry> entries = config_.targets;
    if (!options_.target_paths.empty()) {
      entries.clear();
      for (const auto& p : options_.target_paths) entries.push_back({std::nullopt, p.string()});
    }
    if (entries.empty()) throw ConfigError("no target models: add `targets` to the config or pass --target");
    std::filesystem::create_directories(out_.dir() / "targets");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (!e.checkpoint.empty()) {
        targets_.push_back(load_classifier<Scalar>(e.checkpoint));
        if (!(targets_.back().dataset.input_shape == data_.spec.input_shape) ||
            targets_.back().spec.num_classes != data_.spec.num_classes) {
          throw ConfigError("target checkpoint " + e.checkpoint + " does not match the dataset");
        }
        continue;
      }
      TrainConfig tc = config_.target_training;
      tc.seed = derive_seed(config_.seed, "target-" + std::to_string(i));
      targets_.push_back(train_classifier<Scalar>(*e.spec, data_.spec, user_train_, data_.val, tc));
      save_classifier(out_.reserve("targets/target_" + std::to_string(i) + ".csar"), targets_.back());
      spdlog::info("target {} ({}): CA {:.4f}", i, e.spec->id(), evaluate_accuracy(targets_.back(), data_.test));
    }
  }

  Json seeds() const {
    Json j = {{"run", config_.seed}};
    if (config_.dataset.seed) j["dataset"] = *config_.dataset.seed;
    return j;
  }

  void evaluate_attacks() {
    attack_ = evaluate_attack(targets_, data_.test, *trigger_, config_.attack.transparency_grid, seeds());
    out_.json("attack_report.json", to_json(*attack_));
    out_.text("attack_report.csv", to_csv(*attack_));
    for (const auto& r : attack_->rows) {
      spdlog::info("target {}: CA {:.4f}, ASR {:.4f} (clean baseline {:.4f})", r.model_id, r.clean_accuracy, r.asr,
                   r.baseline);
    }
    if (!config_.attack.uap.enabled) return;
    if (!ensemble_) throw ConfigError("the UAP baseline needs substitutes: pass --ensemble");
    UapConfig u{config_.attack.uap.epsilon, config_.attack.uap.steps,     config_.attack.uap.step_size,
                config_.attack.target_class, config_.distill.train.batch_size, derive_seed(config_.seed, "uap")};
    const auto& substitute = ensemble_->models[static_cast<std::size_t>(ensemble_->teacher())];
    const Vector<Scalar> delta = uap_baseline(substitute, attacker_train_, u);
    Json rows = Json::array();
    std::ostringstream csv;
    csv << "model,UAP_ASR,CleanSheet_ASR\n";
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      const double asr = perturbation_success_rate(targets_[i], data_.test, delta, u.target_class);
      rows.push_back({{"model", targets_[i].spec.id()}, {"ASR", asr}, {"cleansheet_ASR", attack_->rows[i].asr}});
      csv << targets_[i].spec.id() << ',' << csv_number(asr) << ',' << csv_number(attack_->rows[i].asr) << '\n';
    }
    out_.json("uap_report.json", {{"config", to_json(u)},
                                  {"substitute", substitute.spec.id()},
                                  {"linf", static_cast<double>(delta.cwiseAbs().maxCoeff())},
                                  {"rows", rows}});
    out_.text("uap_report.csv", csv.str());
  }

  void campaign(const CleanSheetConfig& cs) {
    auto entries = multi_trigger_campaign<Scalar>(data_.spec, attacker_train_, data_.val, cs,
                                                  config_.attack.campaign_classes);
    std::filesystem::create_directories(out_.dir() / "campaign");
    Json rows = Json::array();
    std::ostringstream csv;
    csv << "target_class,ensemble_ASR";
    for (const auto& t : targets_) csv << ',' << t.spec.id();
    csv << '\n';
    for (const auto& e : entries) {
      Json row = {{"target_class", e.target_class}, {"ensemble_asr", e.ensemble_asr}};
      csv << e.target_class << ',' << csv_number(e.ensemble_asr);
      if (e.artifact) {
        save_trigger(out_.reserve("campaign/trigger_class" + std::to_string(e.target_class) + ".csar"), *e.artifact);
        Json asr = Json::object();
        for (const auto& t : targets_) {
          const double v = attack_success_rate(t, data_.test, e.artifact->trigger);
          asr[t.spec.id()] = v;
          csv << ',' << csv_number(v);
        }
        row["target_asr"] = asr;
      } else {
        row["error"] = e.error;
        spdlog::warn("campaign class {} failed: {}", e.target_class, e.error);
      }
      csv << '\n';
      rows.push_back(row);
    }
    out_.json("campaign_report.json", {{"rows", rows}});
    out_.text("campaign_report.csv", csv.str());
  }

  void evaluate_defenses() {
    const auto& d = config_.defenses;
    if (!d.any()) return;
    const LabeledData<Scalar> test_others = data_.test.without_label(trigger_->target_class);
    const Matrix<Scalar> triggered = apply_trigger(test_others.x, *trigger_, 1.0);
    Json prune_rows = Json::array();
    Json ft_rows = Json::array();
    Json nad_rows = Json::array();
    Json strip_rows = Json::array();
    Json beatrix_rows = Json::array();
    std::ostringstream prune_csv;
    std::ostringstream strip_csv;
    std::ostringstream beatrix_csv;
    std::ostringstream tune_csv;
    prune_csv << "model,ratio,CA,ASR\n";
    strip_csv << "model,Mean_clean,Std_clean,Threshold,P_escape,clean_pass_rate\n";
    beatrix_csv << "model,class,MAD_index,flagged,clean_flagged\n";
    tune_csv << "model,defense,CA_before,ASR_before,CA_after,ASR_after\n";
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      const auto& model = targets_[i];
      const std::string id = model.spec.id();
      const auto checksum = nn::parameter_checksum(model.network.parameters());
      const double ca0 = attack_->rows[i].clean_accuracy;
      const double asr0 = attack_->rows[i].asr;
      if (d.prune) {
        const auto points = prune_sweep(model, d.prune_ratios, d.prune_method, data_.val, data_.test, *trigger_);
        Json pts = Json::array();
        for (const auto& p : points) {
          pts.push_back({{"ratio", p.ratio}, {"CA", p.clean_accuracy}, {"ASR", p.asr}});
          prune_csv << id << ',' << csv_number(p.ratio) << ',' << csv_number(p.clean_accuracy) << ','
                    << csv_number(p.asr) << '\n';
        }
        prune_rows.push_back({{"model", id}, {"points", pts}});
      }
      auto tuned_row = [&](const Classifier<Scalar>& after, const char* name, Json& rows) {
        const double ca = evaluate_accuracy(after, data_.test);
        const double asr = attack_success_rate(after, data_.test, *trigger_);
        rows.push_back({{"model", id}, {"CA_before", ca0}, {"ASR_before", asr0}, {"CA_after", ca}, {"ASR_after", asr}});
        tune_csv << id << ',' << name << ',' << csv_number(ca0) << ',' << csv_number(asr0) << ',' << csv_number(ca)
                 << ',' << csv_number(asr) << '\n';
        spdlog::info("{} on {}: CA {:.4f} -> {:.4f}, ASR {:.4f} -> {:.4f}", name, id, ca0, ca, asr0, asr);
      };
      if (d.fine_tune) {
        FineTuneConfig fc = d.fine_tune_config;
        fc.seed = derive_seed(config_.seed, "fine-tune");
        tuned_row(fine_tune(model, user_train_, fc), "fine-tune", ft_rows);
      }
      if (d.nad) {
        NadConfig nc = d.nad_config;
        nc.fine_tune.seed = derive_seed(config_.seed, "fine-tune");
        tuned_row(nad_distill(model, user_train_, nc), "nad", nad_rows);
      }
      if (d.strip) {
        const StripReport r =
            strip_detect(model, triggered, data_.val, StripConfig{d.strip_overlays, derive_seed(config_.seed, "strip")});
        Json row = {{"model", id}};
        row.update(to_json(r, true));
        strip_rows.push_back(row);
        strip_csv << id << ',' << csv_number(r.mean_clean) << ',' << csv_number(r.std_clean) << ','
                  << csv_number(r.threshold) << ',' << csv_number(r.p_escape) << ',' << csv_number(r.clean_pass_rate)
                  << '\n';
        spdlog::info("strip on {}: threshold {:.4f}, P_escape {:.4f}, clean pass {:.4f}", id, r.threshold, r.p_escape,
                     r.clean_pass_rate);
      }
      if (d.beatrix) {
        const DetectionReport suspect = beatrix_detect(model, triggered, data_.val, d.beatrix_config);
        const DetectionReport clean = beatrix_detect(model, data_.test.x, data_.val, d.beatrix_config);
        beatrix_rows.push_back({{"model", id}, {"triggered", to_json(suspect)}, {"clean", to_json(clean)}});
        for (const auto& c : suspect.classes) {
          const bool clean_flag = std::find(clean.flagged.begin(), clean.flagged.end(), c.label) != clean.flagged.end();
          beatrix_csv << id << ',' << c.label << ',' << (std::isfinite(c.index) ? csv_number(c.index) : "inf") << ','
                      << (c.flagged ? "yes" : "no") << ',' << (clean_flag ? "yes" : "no") << '\n';
        }
        spdlog::info("beatrix on {}: detected {} (clean run flags {})", id, suspect.detected, clean.flagged.size());
      }
      if (nn::parameter_checksum(model.network.parameters()) != checksum) {
        throw NumericError("defense evaluation modified target " + id);
      }
    }
    if (d.prune) {
      out_.json("prune_report.json", {{"method", to_string(d.prune_method)}, {"rows", prune_rows}});
      out_.text("prune_report.csv", prune_csv.str());
    }
    if (d.fine_tune) out_.json("fine_tune_report.json", {{"config", to_json(d.fine_tune_config)}, {"rows", ft_rows}});
    if (d.nad) out_.json("nad_report.json", {{"config", to_json(d.nad_config)}, {"rows", nad_rows}});
    if (d.fine_tune || d.nad) out_.text("tuning_report.csv", tune_csv.str());
    if (d.strip) {
      out_.json("strip_report.json", {{"n_overlays", d.strip_overlays}, {"rows", strip_rows}});
      out_.text("strip_report.csv", strip_csv.str());
    }
    if (d.beatrix) {
      out_.json("beatrix_report.json", {{"config", to_json(d.beatrix_config)}, {"rows", beatrix_rows}});
      out_.text("beatrix_report.csv", beatrix_csv.str());
    }
    defense_ran_ = true;
    strip_ = strip_rows;
    prune_ = prune_rows;
    beatrix_ = beatrix_rows;
  }

  std::vector<CheckResult> checks() const {
    std::vector<CheckResult> out;
    if (!config_.checks.enabled) return out;
    auto fmt = [](double v) { return csv_number(v); };
    if (ensemble_asr_) {
      out.push_back({"ensemble_asr", *ensemble_asr_ >= config_.lambda.target_asr,
                     fmt(*ensemble_asr_) + " vs target " + fmt(config_.lambda.target_asr)});
    }
    if (attack_) {
      for (const auto& r : attack_->rows) {
        out.push_back({"transfer:" + r.model_id, r.asr >= config_.checks.min_transfer_asr && r.asr > r.baseline,
                       "ASR " + fmt(r.asr) + ", baseline " + fmt(r.baseline) + ", minimum " +
                           fmt(config_.checks.min_transfer_asr)});
        if (r.sweep.size() >= 2) {
          const auto lo = std::min_element(r.sweep.begin(), r.sweep.end(), [](auto& a, auto& b) {
            return a.transparency < b.transparency;
          });
          const auto hi = std::max_element(r.sweep.begin(), r.sweep.end(), [](auto& a, auto& b) {
            return a.transparency < b.transparency;
          });
          out.push_back({"transparency:" + r.model_id, hi->asr > lo->asr,
                         "ASR(" + fmt(hi->transparency) + ") " + fmt(hi->asr) + " vs ASR(" + fmt(lo->transparency) +
                             ") " + fmt(lo->asr)});
        }
      }
    }
    if (defense_ran_) {
      for (const auto& row : strip_) {
        const double pass = row.at("clean_pass_rate").get<double>();
        out.push_back({"strip_calibration:" + row.at("model").get<std::string>(), pass >= 0.99,
                       "clean pass rate " + fmt(pass)});
      }
      for (const auto& row : prune_) {
        int inversions = 0;
        bool small = true;
        const auto& pts = row.at("points");
        for (std::size_t i = 1; i < pts.size(); ++i) {
          const double rise = pts[i].at("CA").get<double>() - pts[i - 1].at("CA").get<double>();
          if (rise > 0.0) {
            ++inversions;
            small = small && rise <= 0.02;
          }
        }
        out.push_back({"prune_monotone:" + row.at("model").get<std::string>(), inversions <= 1 && small,
                       std::to_string(inversions) + " inversion(s)"});
      }
      for (const auto& row : beatrix_) {
        const auto n = row.at("clean").at("flagged").size();
        out.push_back({"beatrix_clean:" + row.at("model").get<std::string>(), n == 0,
                       std::to_string(n) + " class(es) flagged on clean inputs"});
      }
    }
    return out;
  }

  RunOutcome finish() {
    stage_ = "manifest";
    RunOutcome outcome;
    outcome.directory = out_.dir();
    outcome.checks = checks();
    Json checks = Json::array();
    for (const auto& c : outcome.checks) checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    out_.json("checks.json", {{"passed", outcome.passed()}, {"checks", checks}});
    Json manifest = {{"command", to_string(options_.command)},
                     {"seed", config_.seed},
                     {"config_hash", config_hash(config_)},
                     {"precision", scalar_name<Scalar>()},
                     {"dataset", to_json(data_.spec)},
                     {"status", "complete"},
                     {"checks_passed", outcome.passed()}};
    if (!options_.trigger_path.empty()) manifest["trigger_input"] = options_.trigger_path.string();
    if (!options_.ensemble_dir.empty()) manifest["ensemble_input"] = options_.ensemble_dir.string();
    auto files = out_.files();
    files.push_back("manifest.json");
    std::sort(files.begin(), files.end());
    manifest["files"] = files;
    out_.json("manifest.json", manifest);
    return outcome;
  }

  const ExperimentConfig& config_;
  const RunOptions& options_;
  ArtifactWriter& out_;
  std::string stage_ = "init";
  DatasetSplits<Scalar> data_;
  LabeledData<Scalar> attacker_train_;
  LabeledData<Scalar> user_train_;
  std::optional<Trigger<Scalar>> trigger_;
  std::optional<EnsembleState<Scalar>> ensemble_;
  std::optional<double> ensemble_asr_;
  std::vector<Classifier<Scalar>> targets_;
  std::optional<AttackReport> attack_;
  bool defense_ran_ = false;
  Json strip_ = Json::array();
  Json prune_ = Json::array();
  Json beatrix_ = Json::array();
};

template <typename Scalar>
RunOutcome run_with(const ExperimentConfig& config, const RunOptions& options, ArtifactWriter& out) {
  Pipeline<Scalar> pipeline(config, options, out);
  try {
    return pipeline.run();
  } catch (const std::exception& e) {
    const char* kind = dynamic_cast<const ConfigError*>(&e)    ? "config"
                       : dynamic_cast<const DomainError*>(&e)  ? "domain"
                       : dynamic_cast<const NumericError*>(&e) ? "numeric"
                       : dynamic_cast<const ParseError*>(&e)   ? "parse"
                                                               : "runtime";
    Json failure = {{"command", to_string(options.command)},
                    {"stage", pipeline.stage()},
                    {"error_type", kind},
                    {"message", e.what()},
                    {"partial_files", out.files()}};
    write_text_file(out.dir() / "failure.json", dump(failure));
    spdlog::error("stage {} failed: {}", pipeline.stage(), e.what());
    throw;
  }
}

}  // namespace

RunOutcome run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const std::filesystem::path dir = run_directory(config, options);
  if (std::filesystem::exists(dir)) {
    throw ConfigError("output directory " + dir.string() + " already exists; runs are never overwritten");
  }
  std::filesystem::create_directories(dir);
  ArtifactWriter out(dir);
  out.text("config.yaml", to_yaml(config));
  spdlog::info("{} -> {}", to_string(options.command), dir.string());
  return options.fp64 ? run_with<double>(config, options, out) : run_with<float>(config, options, out);
}

}  // namespace cleansheet
