#include "cleansheet/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace cleansheet {

void DatasetConfig::validate() const {
  if (source != "synthetic-shapes" && source != "blobs" && source != "cifar10-binary") {
    throw ConfigError("dataset.source: unknown source '" + source + "' (synthetic-shapes, blobs, cifar10-binary)");
  }
  if (source == "cifar10-binary") {
    if (path.empty()) throw ConfigError("dataset.path: required for cifar10-binary");
    const int k = classes.empty() ? 10 : static_cast<int>(classes.size());
    if (num_classes != k) throw ConfigError("dataset.num_classes: must equal the number of selected classes");
    for (int c : classes) {
      if (c < 0 || c > 9) throw ConfigError("dataset.classes: CIFAR-10 classes lie in 0..9");
    }
  } else if (num_classes < 2 || num_classes > 10) {
    throw ConfigError("dataset.num_classes: must lie in 2..10");
  }
  if (source == "synthetic-shapes" && image_size < 8) throw ConfigError("dataset.image_size: must be >= 8");
  if (source == "blobs" && dims < 1) throw ConfigError("dataset.dims: must be positive");
  if (train < 1 || val < 1 || test < 1) {
    if (source != "cifar10-binary" || val < 1) throw ConfigError("dataset: train, val and test sizes must be positive");
  }
  if (!(noise >= 0.0) || !(spread > 0.0)) throw ConfigError("dataset: noise must be >= 0 and spread > 0");
  if (!(distractor_prob >= 0.0 && distractor_prob <= 1.0)) throw ConfigError("dataset.distractor_prob: must lie in [0, 1]");
}

void ExperimentConfig::validate() const {
  dataset.validate();
  const int k = dataset.num_classes;
  if (substitutes.empty()) throw ConfigError("substitutes: at least one substitute model is required");
  for (const auto& s : substitutes) {
    if (s.num_classes != k) throw ConfigError("substitutes: num_classes must match the dataset");
    s.validate();
  }
  for (const auto& t : targets) {
    if (t.spec.has_value() == !t.checkpoint.empty()) {
      throw ConfigError("targets: each entry needs either a model spec or a checkpoint");
    }
    if (t.spec) {
      if (t.spec->num_classes != k) throw ConfigError("targets: num_classes must match the dataset");
      t.spec->validate();
    }
  }
  target_training.validate();
  DistillConfig d = distill;
  d.num_substitutes = static_cast<int>(substitutes.size());
  d.validate();
  OptimizerSchedule s = schedule;
  if (s.iters_per_epoch == 0) s.iters_per_epoch = 1;
  s.validate();
  lambda.validate();
  if (attack.target_class < 0 || attack.target_class >= k) {
    throw ConfigError("attack.target_class: " + std::to_string(attack.target_class) + " is not a class of a " +
                      std::to_string(k) + "-class dataset");
  }
  if (attack.transparency_grid.empty()) throw ConfigError("attack.transparency_grid: must not be empty");
  for (double t : attack.transparency_grid) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("attack.transparency_grid: values must lie in [0, 1]");
  }
  std::set<int> seen;
  for (int c : attack.campaign_classes) {
    if (c < 0 || c >= k) throw ConfigError("attack.campaign_classes: invalid class " + std::to_string(c));
    if (!seen.insert(c).second) throw ConfigError("attack.campaign_classes: classes must be distinct");
  }
  if (attack.uap.enabled) {
    UapConfig u{attack.uap.epsilon, attack.uap.steps, attack.uap.step_size, attack.target_class, 64, 0};
    try {
      u.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("attack.uap: ") + e.what());
    }
  }
  for (double r : defenses.prune_ratios) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("defenses.prune.ratios: values must lie in [0, 1)");
  }
  defenses.fine_tune_config.validate();
  defenses.nad_config.validate();
  if (defenses.strip_overlays < 1) throw ConfigError("defenses.strip.n_overlays: must be >= 1");
  defenses.beatrix_config.validate();
  if (split.mode != "none" && split.mode != "overlap" && split.mode != "dirichlet") {
    throw ConfigError("split.mode: expected none, overlap or dirichlet");
  }
  if (split.mode == "overlap") {
    for (auto r : {split.attacker, split.user}) {
      if (!(r.begin >= 0.0 && r.begin < r.end && r.end <= 1.0)) {
        throw ConfigError("split: ranges must satisfy 0 <= begin < end <= 1");
      }
    }
  }
  if (split.mode == "dirichlet" && !(split.alpha > 0.0)) throw ConfigError("split.alpha: must be positive");
  if (!(checks.min_transfer_asr >= 0.0 && checks.min_transfer_asr <= 1.0)) {
    throw ConfigError("checks.min_transfer_asr: must lie in [0, 1]");
  }
}

// ------------------------------------------------------------------ parsing

namespace {

class MapReader {
 public:
  MapReader(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.IsMap()) throw ConfigError(where() + ": expected a mapping");
  }

  // Rejects any key outside `allowed`.
  void allow(std::initializer_list<const char*> allowed) const {
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        throw ConfigError(where() + ": unknown key '" + key + "'");
      }
    }
  }

  template <typename T>
  void get(const char* key, T& out) const {
    const YAML::Node v = node_[key];
    if (!v) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(child(key) + ": invalid value");
    }
  }

  [[nodiscard]] bool has(const char* key) const { return static_cast<bool>(node_[key]); }
  [[nodiscard]] YAML::Node at(const char* key) const { return node_[key]; }
  [[nodiscard]] std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  [[nodiscard]] std::optional<MapReader> sub(const char* key) const {
    const YAML::Node v = node_[key];
    if (!v || v.IsNull()) return std::nullopt;
    return MapReader(v, child(key));
  }

 private:
  [[nodiscard]] std::string where() const { return path_.empty() ? "config" : path_; }
  YAML::Node node_;
  std::string path_;
};

FractionRange parse_range(const YAML::Node& n, const std::string& path) {
  try {
    const auto v = n.as<std::vector<double>>();
    if (v.size() != 2) throw ConfigError(path + ": expected [begin, end]");
    return {v[0], v[1]};
  } catch (const YAML::Exception&) {
    throw ConfigError(path + ": expected [begin, end]");
  }
}

ModelSpec parse_model(const MapReader& r, int num_classes) {
  r.allow({"family", "depth", "width"});
  ModelSpec s;
  s.num_classes = num_classes;
  std::string family;
  r.get("family", family);
  if (family.empty()) throw ConfigError(r.child("family") + ": required");
  s.family = parse_model_family(family);
  r.get("depth", s.depth);
  r.get("width", s.width);
  return s;
}

void parse_train(const MapReader& r, TrainConfig& t) {
  r.get("learning_rate", t.learning_rate);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("batch_size", t.batch_size);
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  ExperimentConfig c;
  const MapReader top(root, "");
  top.allow({"seed", "output_dir", "dataset", "substitutes", "targets", "target_training", "distill", "schedule",
             "lambda", "attack", "defenses", "split", "checks"});
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);

  if (auto d = top.sub("dataset")) {
    d->allow({"source", "num_classes", "image_size", "dims", "noise", "distractor_prob", "spread", "train", "val",
              "test", "path", "classes", "seed"});
    auto& ds = c.dataset;
    d->get("source", ds.source);
    d->get("num_classes", ds.num_classes);
    d->get("image_size", ds.image_size);
    d->get("dims", ds.dims);
    d->get("noise", ds.noise);
    d->get("distractor_prob", ds.distractor_prob);
    d->get("spread", ds.spread);
    d->get("train", ds.train);
    d->get("val", ds.val);
    d->get("test", ds.test);
    d->get("path", ds.path);
    d->get("classes", ds.classes);
    if (d->has("seed")) {
      std::uint64_t s = 0;
      d->get("seed", s);
      ds.seed = s;
    }
  }
  const int k = c.dataset.num_classes;

  auto model_list = [&](const char* key, auto&& each) {
    const YAML::Node list = top.at(key);
    if (!list) return;
    if (!list.IsSequence()) throw ConfigError(std::string(key) + ": expected a list");
    for (std::size_t i = 0; i < list.size(); ++i) each(MapReader(list[i], std::string(key) + "[" + std::to_string(i) + "]"));
  };
  model_list("substitutes", [&](const MapReader& r) { c.substitutes.push_back(parse_model(r, k)); });
  model_list("targets", [&](const MapReader& r) {
    TargetEntry t;
    if (r.has("checkpoint")) {
      r.allow({"checkpoint"});
      r.get("checkpoint", t.checkpoint);
    } else {
      t.spec = parse_model(r, k);
    }
    c.targets.push_back(std::move(t));
  });

  if (auto t = top.sub("target_training")) {
    t->allow({"learning_rate", "momentum", "weight_decay", "epochs", "batch_size"});
    parse_train(*t, c.target_training);
    t->get("epochs", c.target_training.epochs);
  }
  if (auto d = top.sub("distill")) {
    d->allow({"temperature", "alpha", "scale_kl_by_temperature_squared", "learning_rate", "momentum", "weight_decay",
              "batch_size"});
    d->get("temperature", c.distill.temperature);
    d->get("alpha", c.distill.alpha);
    d->get("scale_kl_by_temperature_squared", c.distill.scale_kl_by_temperature_squared);
    parse_train(*d, c.distill.train);
  }
  if (auto s = top.sub("schedule")) {
    s->allow({"max_epochs", "iters_per_epoch", "inner_steps", "trigger_lr", "optimizer"});
    s->get("max_epochs", c.schedule.max_epochs);
    s->get("iters_per_epoch", c.schedule.iters_per_epoch);
    s->get("inner_steps", c.schedule.inner_steps);
    s->get("trigger_lr", c.schedule.trigger_lr);
    std::string opt = to_string(c.schedule.optimizer);
    s->get("optimizer", opt);
    c.schedule.optimizer = parse_trigger_optimizer(opt);
  }
  if (auto l = top.sub("lambda")) {
    l->allow({"initial", "target_asr", "up_factor", "down_factor", "patience"});
    l->get("initial", c.lambda.lambda);
    l->get("target_asr", c.lambda.target_asr);
    l->get("up_factor", c.lambda.up_factor);
    l->get("down_factor", c.lambda.down_factor);
    l->get("patience", c.lambda.patience);
  }
  if (auto a = top.sub("attack")) {
    a->allow({"target_class", "norm_type", "transparency_grid", "campaign_classes", "uap"});
    a->get("target_class", c.attack.target_class);
    std::string norm = to_string(c.attack.norm_type);
    a->get("norm_type", norm);
    c.attack.norm_type = parse_norm_type(norm);
    a->get("transparency_grid", c.attack.transparency_grid);
    a->get("campaign_classes", c.attack.campaign_classes);
    if (auto u = a->sub("uap")) {
      u->allow({"enabled", "epsilon", "steps", "step_size"});
      u->get("enabled", c.attack.uap.enabled);
      u->get("epsilon", c.attack.uap.epsilon);
      u->get("steps", c.attack.uap.steps);
      u->get("step_size", c.attack.uap.step_size);
    }
  }
  if (auto d = top.sub("defenses")) {
    d->allow({"prune", "fine_tune", "nad", "strip", "beatrix"});
    auto& ds = c.defenses;
    if (auto p = d->sub("prune")) {
      p->allow({"enabled", "method", "ratios"});
      p->get("enabled", ds.prune);
      std::string method = to_string(ds.prune_method);
      p->get("method", method);
      ds.prune_method = parse_prune_method(method);
      p->get("ratios", ds.prune_ratios);
    }
    if (auto f = d->sub("fine_tune")) {
      f->allow({"enabled", "clean_fraction", "epochs", "learning_rate"});
      f->get("enabled", ds.fine_tune);
      f->get("clean_fraction", ds.fine_tune_config.clean_fraction);
      f->get("epochs", ds.fine_tune_config.epochs);
      f->get("learning_rate", ds.fine_tune_config.learning_rate);
    }
    if (auto n = d->sub("nad")) {
      n->allow({"enabled", "beta", "epochs"});
      n->get("enabled", ds.nad);
      n->get("beta", ds.nad_config.beta);
      n->get("epochs", ds.nad_config.epochs);
    }
    if (auto s = d->sub("strip")) {
      s->allow({"enabled", "n_overlays"});
      s->get("enabled", ds.strip);
      s->get("n_overlays", ds.strip_overlays);
    }
    if (auto b = d->sub("beatrix")) {
      b->allow({"enabled", "gram_orders", "eta", "anomaly_threshold", "tap_layer"});
      b->get("enabled", ds.beatrix);
      if (b->has("gram_orders")) {
        std::vector<int> orders;
        b->get("gram_orders", orders);
        if (orders.size() != 2) throw ConfigError("defenses.beatrix.gram_orders: expected [min, max]");
        ds.beatrix_config.min_order = orders[0];
        ds.beatrix_config.max_order = orders[1];
      }
      b->get("eta", ds.beatrix_config.eta);
      b->get("anomaly_threshold", ds.beatrix_config.anomaly_threshold);
      b->get("tap_layer", ds.beatrix_config.tap_layer);
    }
  }
  if (auto s = top.sub("split")) {
    s->allow({"mode", "attacker_range", "user_range", "alpha"});
    s->get("mode", c.split.mode);
    if (s->has("attacker_range")) c.split.attacker = parse_range(s->at("attacker_range"), "split.attacker_range");
    if (s->has("user_range")) c.split.user = parse_range(s->at("user_range"), "split.user_range");
    s->get("alpha", c.split.alpha);
  }
  if (auto ch = top.sub("checks")) {
    ch->allow({"enabled", "min_transfer_asr"});
    ch->get("enabled", c.checks.enabled);
    ch->get("min_transfer_asr", c.checks.min_transfer_asr);
  }
  // NAD's teacher follows the fine-tuning recipe.
  c.defenses.nad_config.fine_tune = c.defenses.fine_tune_config;
  c.distill.num_substitutes = static_cast<int>(c.substitutes.size());
  c.schedule.batch_size = c.distill.train.batch_size;
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(read_text_file(path));
}

// ------------------------------------------------------------------ serialization

namespace {

Json model_json(const ModelSpec& s) { return {{"family", to_string(s.family)}, {"depth", s.depth}, {"width", s.width}}; }

// Block-style YAML from JSON; scalars and scalar lists use JSON notation,
// which YAML reads back unchanged.
void emit_yaml(const Json& j, int indent, std::ostringstream& out) {
  const std::string pad(static_cast<std::size_t>(indent), ' ');
  auto scalar_list = [](const Json& a) {
    return std::all_of(a.begin(), a.end(), [](const Json& e) { return !e.is_structured(); });
  };
  for (const auto& [key, value] : j.items()) {
    out << pad << key << ':';
    if (value.is_object()) {
      out << '\n';
      emit_yaml(value, indent + 2, out);
    } else if (value.is_array() && !value.empty() && !scalar_list(value)) {
      out << '\n';
      for (const auto& item : value) {
        std::ostringstream nested;
        emit_yaml(item, indent + 4, nested);
        std::string text = nested.str();
        text.replace(static_cast<std::size_t>(indent) + 2, 2, "- ");
        out << text;
      }
    } else {
      out << ' ' << value.dump() << '\n';
    }
  }
}

}  // namespace

Json to_json(const ExperimentConfig& c) {
  Json dataset = {{"source", c.dataset.source},
                  {"num_classes", c.dataset.num_classes},
                  {"image_size", c.dataset.image_size},
                  {"dims", c.dataset.dims},
                  {"noise", c.dataset.noise},
                  {"distractor_prob", c.dataset.distractor_prob},
                  {"spread", c.dataset.spread},
                  {"train", c.dataset.train},
                  {"val", c.dataset.val},
                  {"test", c.dataset.test},
                  {"path", c.dataset.path},
                  {"classes", c.dataset.classes}};
  if (c.dataset.seed) dataset["seed"] = *c.dataset.seed;
  Json subs = Json::array();
  for (const auto& s : c.substitutes) subs.push_back(model_json(s));
  Json targets = Json::array();
  for (const auto& t : c.targets) targets.push_back(t.spec ? model_json(*t.spec) : Json{{"checkpoint", t.checkpoint}});
  const auto& d = c.defenses;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"dataset", dataset},
      {"substitutes", subs},
      {"targets", targets},
      {"target_training",
       {{"learning_rate", c.target_training.learning_rate},
        {"momentum", c.target_training.momentum},
        {"weight_decay", c.target_training.weight_decay},
        {"epochs", c.target_training.epochs},
        {"batch_size", c.target_training.batch_size}}},
      {"distill",
       {{"temperature", c.distill.temperature},
        {"alpha", c.distill.alpha},
        {"scale_kl_by_temperature_squared", c.distill.scale_kl_by_temperature_squared},
        {"learning_rate", c.distill.train.learning_rate},
        {"momentum", c.distill.train.momentum},
        {"weight_decay", c.distill.train.weight_decay},
        {"batch_size", c.distill.train.batch_size}}},
      {"schedule",
       {{"max_epochs", c.schedule.max_epochs},
        {"iters_per_epoch", c.schedule.iters_per_epoch},
        {"inner_steps", c.schedule.inner_steps},
        {"trigger_lr", c.schedule.trigger_lr},
        {"optimizer", to_string(c.schedule.optimizer)}}},
      {"lambda",
       {{"initial", c.lambda.lambda},
        {"target_asr", c.lambda.target_asr},
        {"up_factor", c.lambda.up_factor},
        {"down_factor", c.lambda.down_factor},
        {"patience", c.lambda.patience}}},
      {"attack",
       {{"target_class", c.attack.target_class},
        {"norm_type", to_string(c.attack.norm_type)},
        {"transparency_grid", c.attack.transparency_grid},
        {"campaign_classes", c.attack.campaign_classes},
        {"uap",
         {{"enabled", c.attack.uap.enabled},
          {"epsilon", c.attack.uap.epsilon},
          {"steps", c.attack.uap.steps},
          {"step_size", c.attack.uap.step_size}}}}},
      {"defenses",
       {{"prune", {{"enabled", d.prune}, {"method", to_string(d.prune_method)}, {"ratios", d.prune_ratios}}},
        {"fine_tune",
         {{"enabled", d.fine_tune},
          {"clean_fraction", d.fine_tune_config.clean_fraction},
          {"epochs", d.fine_tune_config.epochs},
          {"learning_rate", d.fine_tune_config.learning_rate}}},
        {"nad", {{"enabled", d.nad}, {"beta", d.nad_config.beta}, {"epochs", d.nad_config.epochs}}},
        {"strip", {{"enabled", d.strip}, {"n_overlays", d.strip_overlays}}},
        {"beatrix",
         {{"enabled", d.beatrix},
          {"gram_orders", {d.beatrix_config.min_order, d.beatrix_config.max_order}},
          {"eta", d.beatrix_config.eta},
          {"anomaly_threshold", d.beatrix_config.anomaly_threshold},
          {"tap_layer", d.beatrix_config.tap_layer}}}}},
      {"split",
       {{"mode", c.split.mode},
        {"attacker_range", {c.split.attacker.begin, c.split.attacker.end}},
        {"user_range", {c.split.user.begin, c.split.user.end}},
        {"alpha", c.split.alpha}}},
      {"checks", {{"enabled", c.checks.enabled}, {"min_transfer_asr", c.checks.min_transfer_asr}}},
  };
}

std::string to_yaml(const ExperimentConfig& config) {
  std::ostringstream out;
  emit_yaml(to_json(config), 0, out);
  return out.str();
}

std::string config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cleansheet
