#include "xalign/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "xalign/graph.hpp"
#include "xalign/seed.hpp"
#include "xalign/stats.hpp"

namespace xalign {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "0.1.0";
constexpr std::int64_t kEvalChunk = 32;
constexpr int kHistogramBins = 10;

[[noreturn]] void invalid(const std::string& what) { throw std::invalid_argument("experiment config: " + what); }

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Rejects keys outside `allowed` so typos surface as validation errors.
void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) invalid(where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      invalid("unknown key '" + key + "' in " + where);
    }
  }
}

json train_to_json(const TrainConfig& c, bool finetune) {
  json j = {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay},
            {"rotation", c.rotation}};
  if (finetune) {
    j["alpha"] = c.alpha;
    j["scale_mode"] = c.scale_mode == ScaleGradient::full ? "full" : "detached";
    j["validate_every"] = c.validate_every;
    j["val_limit"] = c.val_limit;
  }
  return j;
}

TrainConfig train_from_json(const json& j, TrainConfig c, bool finetune, const std::string& where) {
  if (finetune) {
    check_keys(j, {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "rotation", "alpha",
                   "scale_mode", "validate_every", "val_limit"},
               where);
  } else {
    check_keys(j, {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "rotation"}, where);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer.lr = j.value("lr", c.optimizer.lr);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.optimizer.eps = j.value("eps", c.optimizer.eps);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.rotation = j.value("rotation", c.rotation);
  if (finetune) {
    c.alpha = j.value("alpha", c.alpha);
    const auto mode = j.value("scale_mode", std::string("detached"));
    if (mode != "detached" && mode != "full") invalid(where + ".scale_mode must be 'detached' or 'full'");
    c.scale_mode = mode == "full" ? ScaleGradient::full : ScaleGradient::detached;
    c.validate_every = j.value("validate_every", c.validate_every);
    c.val_limit = j.value("val_limit", c.val_limit);
  }
  return c;
}

json explainer_to_json(const ExplainerConfig& e) {
  return {{"baseline_fill", e.baseline_fill}, {"ig_steps", e.ig_steps},       {"sg_samples", e.sg_samples},
          {"sg_sigma", e.sg_sigma},           {"lrp_epsilon", e.lrp_epsilon}, {"noise_seed", e.noise_seed}};
}

json shapes_to_json(const ModelShape& s) {
  return {{"cnn_width", s.cnn_width}, {"vit_patch", s.vit_patch}, {"vit_depth", s.vit_depth},
          {"vit_heads", s.vit_heads}, {"vit_dim", s.vit_dim},     {"vit_warmup", s.vit_warmup}};
}

json config_json(const ExperimentConfig& c, bool with_output) {
  json dataset;
  if (c.generate) dataset["generate"] = json::parse(genspec_to_json(*c.generate));
  else dataset["directory"] = c.directory;
  json pipelines = json::array();
  for (const auto& p : c.pipelines) pipelines.push_back({{"model", p.model}, {"explainer", method_name(p.explainer)}});
  json scenarios = json::array();
  for (auto s : c.scenarios) scenarios.push_back(scenario_name(s));
  json j = {{"dataset", dataset},
            {"pipelines", pipelines},
            {"pretrained", c.pretrained},
            {"scenarios", scenarios},
            {"labels", c.labels},
            {"seeds", c.seeds},
            {"models", shapes_to_json(c.shapes)},
            {"explainer", explainer_to_json(c.explainer)},
            {"base", train_to_json(c.base, false)},
            {"finetune", train_to_json(c.finetune, true)},
            {"pretrain_epochs", c.pretrain_epochs},
            {"eval_limit", c.eval_limit},
            {"multi_label_sum", c.multi_label_sum}};
  if (with_output) j["output"] = c.output;
  return j;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::int64_t workers_from_env() {
  const char* v = std::getenv("XALIGN_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 256) {
    throw std::invalid_argument(std::string("XALIGN_WORKERS must be an integer in [1, 256], got '") + v + "'");
  }
  return n;
}

// Runs tasks[i] for every i on `workers` threads; tasks must not throw.
void run_pool(const std::vector<std::function<void()>>& tasks, std::int64_t workers) {
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) tasks[i]();
  };
  const auto n = static_cast<std::size_t>(std::min<std::int64_t>(workers, static_cast<std::int64_t>(tasks.size())));
  if (n <= 1) {
    loop();
    return;
  }
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back(loop);
  for (auto& t : threads) t.join();
}

std::string model_tag(const std::string& arch, bool pretrained, std::uint64_t seed) {
  return arch + (pretrained ? "_pretrained" : "_scratch") + "_s" + std::to_string(seed);
}

json scores_json(const ScenarioEval& e) {
  json samples = json::array();
  for (const auto& s : e.samples) {
    samples.push_back({s.id, s.scores.mass ? json(*s.scores.mass) : json(nullptr), s.scores.rank, s.scores.hit,
                       s.scores.iou});
  }
  return {{"auroc", e.auroc ? json(*e.auroc) : json(nullptr)},
          {"mi", e.mutual_information ? json(*e.mutual_information) : json(nullptr)},
          {"samples", samples}};
}

}  // namespace

ExperimentConfig::ExperimentConfig() : generate(GenSpec{}) {
  base.epochs = 30;
  finetune.epochs = 25;
  finetune.validate_every = 0;
}

void ExperimentConfig::validate() const {
  if (generate.has_value() == !directory.empty()) invalid("exactly one of dataset.generate and dataset.directory");
  if (generate) generate->validate();
  if (pipelines.empty()) invalid("pipelines must not be empty");
  if (pretrained.empty()) invalid("pretrained must not be empty");
  if (scenarios.empty()) invalid("scenarios must not be empty");
  if (labels.empty()) invalid("labels must not be empty");
  if (seeds.empty()) invalid("seeds must not be empty");
  for (const auto& p : pipelines) {
    if (p.model != "cnn" && p.model != "vit") invalid("unknown model '" + p.model + "' (expected cnn or vit)");
    if (p.model == "vit" && p.explainer == Method::lrp) invalid("LRP is not defined for the attention model (vit x LRP)");
  }
  auto unique = [](auto v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) == v.end();
  };
  if (!unique(labels) || !unique(seeds) || !unique(pretrained)) invalid("labels, seeds and pretrained must not repeat");
  for (auto s : scenarios) {
    if (s == Scenario::base) invalid("scenarios lists align and/or misalign; base always runs");
  }
  if (!unique(scenarios)) invalid("scenarios must not repeat");
  for (std::size_t i = 0; i < pipelines.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (pipelines[i] == pipelines[k]) invalid("pipeline listed twice");
    }
  }
  if (generate) {
    const auto n = static_cast<std::int64_t>(generate->classes.size());
    for (auto l : labels) {
      if (l < 0 || l >= n) invalid("label " + std::to_string(l) + " does not exist (dataset has " + std::to_string(n) + ")");
    }
  } else {
    for (auto l : labels) {
      if (l < 0) invalid("labels must be nonnegative");
    }
  }
  if (shapes.cnn_width <= 0) invalid("models.cnn_width must be positive");
  if (shapes.vit_patch < 1 || shapes.vit_depth < 1 || shapes.vit_heads < 1 || shapes.vit_dim < 1) {
    invalid("vit dimensions must be positive");
  }
  if (shapes.vit_dim % shapes.vit_heads != 0) invalid("models.vit_dim must be divisible by vit_heads");
  if (shapes.vit_warmup < 0) invalid("models.vit_warmup must be >= 0");
  explainer.validate();
  base.validate();
  finetune.validate();
  if (pretrain_epochs < 1) invalid("pretrain_epochs must be >= 1");
  if (eval_limit < 0) invalid("eval_limit must be >= 0");
  if (output.empty()) invalid("output must not be empty");
}

std::string config_to_json(const ExperimentConfig& config) { return config_json(config, true).dump(2); }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    invalid(std::string("not valid JSON: ") + e.what());
  }
  try {
    check_keys(j,
               {"dataset", "pipelines", "pretrained", "scenarios", "labels", "seeds", "models", "explainer", "base",
                "finetune", "pretrain_epochs", "eval_limit", "multi_label_sum", "output"},
               "config");
    ExperimentConfig c;
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, {"generate", "directory"}, "dataset");
      if (d.contains("generate") == d.contains("directory")) invalid("dataset needs exactly one of generate, directory");
      if (d.contains("generate")) {
        c.generate = genspec_from_json(d.at("generate").dump());
      } else {
        c.generate.reset();
        c.directory = d.at("directory").get<std::string>();
      }
    }
    if (j.contains("pipelines")) {
      c.pipelines.clear();
      for (const auto& p : j.at("pipelines")) {
        check_keys(p, {"model", "explainer"}, "pipelines[]");
        c.pipelines.push_back({p.at("model").get<std::string>(), parse_method(p.at("explainer").get<std::string>())});
      }
    }
    if (j.contains("pretrained")) c.pretrained = j.at("pretrained").get<std::vector<bool>>();
    if (j.contains("scenarios")) {
      c.scenarios.clear();
      for (const auto& s : j.at("scenarios")) c.scenarios.push_back(parse_scenario(s.get<std::string>()));
    }
    if (j.contains("labels")) c.labels = j.at("labels").get<std::vector<std::int64_t>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("models")) {
      const auto& m = j.at("models");
      check_keys(m, {"cnn_width", "vit_patch", "vit_depth", "vit_heads", "vit_dim", "vit_warmup"}, "models");
      c.shapes.cnn_width = m.value("cnn_width", c.shapes.cnn_width);
      c.shapes.vit_patch = m.value("vit_patch", c.shapes.vit_patch);
      c.shapes.vit_depth = m.value("vit_depth", c.shapes.vit_depth);
      c.shapes.vit_heads = m.value("vit_heads", c.shapes.vit_heads);
      c.shapes.vit_dim = m.value("vit_dim", c.shapes.vit_dim);
      c.shapes.vit_warmup = m.value("vit_warmup", c.shapes.vit_warmup);
    }
    if (j.contains("explainer")) {
      const auto& e = j.at("explainer");
      check_keys(e, {"baseline_fill", "ig_steps", "sg_samples", "sg_sigma", "lrp_epsilon", "noise_seed"}, "explainer");
      c.explainer.baseline_fill = e.value("baseline_fill", c.explainer.baseline_fill);
      c.explainer.ig_steps = e.value("ig_steps", c.explainer.ig_steps);
      c.explainer.sg_samples = e.value("sg_samples", c.explainer.sg_samples);
      c.explainer.sg_sigma = e.value("sg_sigma", c.explainer.sg_sigma);
      c.explainer.lrp_epsilon = e.value("lrp_epsilon", c.explainer.lrp_epsilon);
      c.explainer.noise_seed = e.value("noise_seed", c.explainer.noise_seed);
    }
    if (j.contains("base")) c.base = train_from_json(j.at("base"), c.base, false, "base");
    if (j.contains("finetune")) c.finetune = train_from_json(j.at("finetune"), c.finetune, true, "finetune");
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.eval_limit = j.value("eval_limit", c.eval_limit);
    c.multi_label_sum = j.value("multi_label_sum", c.multi_label_sum);
    c.output = j.value("output", c.output);
    return c;
  } catch (const json::exception& e) {
    invalid(std::string("bad value: ") + e.what());
  }
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config_json(config, false).dump())));
  return buf;
}

Model build_model(const std::string& architecture, InputShape input, std::int64_t labels, const ModelShape& shapes,
                  std::uint64_t seed) {
  Model m;
  if (architecture == "cnn") {
    m = build_small_cnn(input, labels, shapes.cnn_width);
  } else if (architecture == "vit") {
    m = build_tiny_vit(input, labels, shapes.vit_patch, shapes.vit_depth, shapes.vit_heads, shapes.vit_dim);
  } else {
    throw std::invalid_argument("unknown architecture '" + architecture + "'");
  }
  m.initialize(seed);
  return m;
}

ScenarioEval evaluate_scenario(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                               std::int64_t label, std::int64_t limit) {
  if (label < 0 || label >= dataset.num_labels) throw std::invalid_argument("evaluate: label out of range");
  const auto eval = dataset.indices(Split::eval);
  ScenarioEval out;
  out.auroc = evaluate_auroc(model, dataset, eval);
  {
    NoGradGuard off;
    std::vector<std::uint8_t> pred, target;
    for (std::size_t i = 0; i < eval.size(); i += kEvalChunk) {
      const std::span<const std::size_t> part(eval.data() + i, std::min<std::size_t>(kEvalChunk, eval.size() - i));
      const auto logits = model.forward(make_batch(dataset, part).images);
      for (std::size_t b = 0; b < part.size(); ++b) {
        pred.push_back(logits.values()[b * static_cast<std::size_t>(model.num_labels()) + label] >= 0.0 ? 1 : 0);
        target.push_back(dataset.samples[part[b]].labels[label]);
      }
    }
    if (!pred.empty()) out.mutual_information = mutual_information(pred, target);
  }
  std::vector<std::size_t> chosen;
  for (auto idx : eval) {
    if (limit > 0 && static_cast<std::int64_t>(chosen.size()) == limit) break;
    if (dataset.samples[idx].masks.count(label)) chosen.push_back(idx);
  }
  for (std::size_t i = 0; i < chosen.size(); i += kEvalChunk) {
    const std::span<const std::size_t> part(chosen.data() + i, std::min<std::size_t>(kEvalChunk, chosen.size() - i));
    const auto e = explain(model, make_batch(dataset, part).images, label, explainer);
    const std::int64_t h = e.attributions.size(1), w = e.attributions.size(2);
    for (std::size_t b = 0; b < part.size(); ++b) {
      const auto first = e.attributions.values().begin() + static_cast<std::ptrdiff_t>(b * h * w);
      const Tensor map({h, w}, std::vector<double>(first, first + h * w));
      const auto& sample = dataset.samples[part[b]];
      out.samples.push_back({sample.id, score_alignment(map, sample.masks.at(label))});
    }
  }
  return out;
}

RunManifest load_manifest(const std::string& run_dir) {
  RunManifest m;
  const fs::path path = fs::path(run_dir) / "manifest.json";
  if (!fs::exists(path)) return m;
  const auto j = json::parse(read_text(path));
  m.config_hash = j.value("config_hash", "");
  m.config = j.contains("config") ? j.at("config").dump(2) : std::string();
  m.version = j.value("version", "");
  const json stages = j.value("stages", json::object());
  for (const auto& [key, s] : stages.items()) {
    m.stages[key] = {s.value("status", ""), s.value("artifacts", std::vector<std::string>{}), s.value("error", ""),
                     s.value("started", ""), s.value("finished", "")};
  }
  m.audit = j.value("audit", std::vector<std::string>{});
  m.reports = j.value("reports", std::vector<std::string>{});
  return m;
}

void save_manifest(const std::string& run_dir, const RunManifest& manifest) {
  json stages = json::object();
  for (const auto& [key, s] : manifest.stages) {
    stages[key] = {{"status", s.status}, {"artifacts", s.artifacts}, {"error", s.error},
                   {"started", s.started}, {"finished", s.finished}};
  }
  json j = {{"config_hash", manifest.config_hash},
            {"config", manifest.config.empty() ? json(nullptr) : json::parse(manifest.config)},
            {"version", manifest.version},
            {"stages", stages},
            {"audit", manifest.audit},
            {"reports", manifest.reports}};
  write_text(fs::path(run_dir) / "manifest.json", j.dump(2) + "\n");
}

namespace {

// Stage bookkeeping shared by the worker threads.
class StageRunner {
 public:
  StageRunner(std::string run_dir, RunManifest& manifest) : dir_(std::move(run_dir)), manifest_(manifest) {}

  bool done(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = manifest_.stages.find(key);
    if (it == manifest_.stages.end() || it->second.status != "done") return false;
    return std::all_of(it->second.artifacts.begin(), it->second.artifacts.end(),
                       [&](const std::string& a) { return fs::exists(fs::path(dir_) / a); });
  }

  // Runs `body` unless `key` is already complete. `body` returns the
  // artifacts it wrote, relative to the run directory.
  bool run(const std::string& key, const std::function<std::vector<std::string>()>& body) {
    if (done(key)) {
      ++skipped_;
      return true;
    }
    StageRecord rec;
    rec.started = now_utc();
    bool ok = true;
    try {
      rec.artifacts = body();
      rec.status = "done";
      ++executed_;
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      ok = false;
      ++failed_;
    }
    rec.finished = now_utc();
    std::lock_guard lock(mu_);
    manifest_.stages[key] = rec;
    save_manifest(dir_, manifest_);
    return ok;
  }

  void fail(const std::string& key, const std::string& why) {
    std::lock_guard lock(mu_);
    StageRecord rec{"failed", {}, why, now_utc(), now_utc()};
    manifest_.stages[key] = rec;
    ++failed_;
    save_manifest(dir_, manifest_);
  }

  const std::string& dir() const { return dir_; }
  std::int64_t executed() const { return executed_; }
  std::int64_t skipped() const { return skipped_; }
  std::int64_t failed() const { return failed_; }

 private:
  std::string dir_;
  RunManifest& manifest_;
  std::mutex mu_;
  std::atomic<std::int64_t> executed_{0}, skipped_{0}, failed_{0};
};

GenSpec pretraining_source(const ExperimentConfig& c, const Dataset& main) {
  if (c.generate) return pretraining_spec(*c.generate);
  if (main.shape.height != main.shape.width) {
    throw std::invalid_argument("pretrained models need square images for the pretraining set");
  }
  GenSpec g;
  g.size = main.shape.height;
  g.channels = main.shape.channels;
  g.classes.assign(static_cast<std::size_t>(main.num_labels), ClassSpec{});
  g.seed = fnv1a(main.manifest);
  return pretraining_spec(g);
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::int64_t workers = workers_from_env();
  const std::string dir = config.output;
  fs::create_directories(dir);

  const Dataset data = config.generate ? generate(*config.generate) : load_directory(config.directory);
  for (auto l : config.labels) {
    if (l >= data.num_labels) invalid("label " + std::to_string(l) + " does not exist in the dataset");
  }
  const bool any_pretrained = std::find(config.pretrained.begin(), config.pretrained.end(), true) != config.pretrained.end();
  const Dataset pretrain_data = any_pretrained ? generate(pretraining_source(config, data)) : Dataset{};

  RunManifest manifest = load_manifest(dir);
  const std::string hash = config_hash(config);
  if (!manifest.config_hash.empty() && manifest.config_hash != hash) {
    manifest.audit.push_back(now_utc() + " config changed from " + manifest.config_hash + "; previous stages discarded");
    manifest.stages.clear();
  }
  manifest.config_hash = hash;
  manifest.config = config_json(config, false).dump(2);
  manifest.version = kVersion;
  StageRunner runner(dir, manifest);

  const auto train_idx = data.indices(Split::train);
  const auto val_idx = data.indices(Split::val);
  const auto tune_idx = data.indices(Split::finetune);

  std::vector<std::string> archs;
  for (const auto& p : config.pipelines) {
    if (std::find(archs.begin(), archs.end(), p.model) == archs.end()) archs.push_back(p.model);
  }

  // Phase 1: base models.
  std::vector<std::function<void()>> tasks;
  for (auto seed : config.seeds) {
    for (const auto& arch : archs) {
      for (bool pre : config.pretrained) {
        tasks.push_back([&, seed, arch, pre] {
          const std::string tag = model_tag(arch, pre, seed);
          runner.run("base:" + tag, [&] {
            const std::string ckpt = "models/" + tag + "/base.ckpt", log = "models/" + tag + "/base_log.jsonl";
            Model model = build_model(arch, data.shape, data.num_labels, config.shapes, derive_seed(seed, fnv1a("init")));
            TrainConfig tc = config.base;
            tc.scenario = Scenario::base;
            tc.labels.clear();
            tc.warmup_steps = arch == "vit" ? config.shapes.vit_warmup : 0;
            std::string pre_log;
            if (pre) {
              TrainConfig pc = tc;
              pc.epochs = config.pretrain_epochs;
              pc.seed = derive_seed(seed, fnv1a("pretrain:" + arch));
              auto r = train_base(model, pretrain_data, pretrain_data.indices(Split::train), {}, pc);
              model = r.model;
              model.reset_head(derive_seed(seed, fnv1a("head:" + arch)));
            }
            tc.seed = derive_seed(seed, fnv1a("base:" + arch + (pre ? ":pretrained" : "")));
            auto r = train_base(model, data, train_idx, val_idx, tc);
            fs::create_directories(fs::path(dir) / "models" / tag);
            save_checkpoint((fs::path(dir) / ckpt).string(), r.model,
                            {{"stage", "base"}, {"seed", std::to_string(seed)}, {"pretrained", pre ? "1" : "0"}});
            write_text(fs::path(dir) / log, to_json_lines(r.log));
            return std::vector<std::string>{ckpt, log};
          });
        });
      }
    }
  }
  run_pool(tasks, workers);

  // Phase 2: one cell per (seed, model, pretrained, explainer, label tag).
  tasks.clear();
  std::vector<std::int64_t> tags;  // label per tag; -1 for the multi-label sum
  if (config.multi_label_sum) tags.push_back(-1);
  else tags = config.labels;
  for (auto seed : config.seeds) {
    for (const auto& p : config.pipelines) {
      for (bool pre : config.pretrained) {
        for (auto tag_label : tags) {
          tasks.push_back([&, seed, p, pre, tag_label] {
            const std::string mtag = model_tag(p.model, pre, seed);
            const std::string expl(method_name(p.explainer));
            const std::string ltag = tag_label < 0 ? std::string("all") : "label" + std::to_string(tag_label);
            const std::string cell = mtag + ":" + expl + ":" + ltag;
            const std::vector<std::int64_t> eval_labels =
                tag_label < 0 ? config.labels : std::vector<std::int64_t>{tag_label};
            auto eval_key = [&](std::int64_t l) { return "eval:" + mtag + ":" + expl + ":label" + std::to_string(l); };
            auto fail_all = [&](const std::string& why, bool tunes) {
              if (tunes) {
                for (auto s : config.scenarios) runner.fail("tune:" + cell + ":" + std::string(scenario_name(s)), why);
              }
              for (auto l : eval_labels) runner.fail(eval_key(l), why);
            };
            if (!runner.done("base:" + mtag)) {
              fail_all("base model " + mtag + " unavailable", true);
              return;
            }
            const fs::path base_path = fs::path(dir) / "models" / mtag / "base.ckpt";
            ExplainerConfig ex = config.explainer;
            ex.method = p.explainer;
            bool tunes_ok = true;
            std::map<Scenario, std::string> tuned;
            for (auto s : config.scenarios) {
              const std::string sname(scenario_name(s));
              const std::string ckpt = "models/" + mtag + "/" + expl + "_" + ltag + "_" + sname + ".ckpt";
              const std::string log = "models/" + mtag + "/" + expl + "_" + ltag + "_" + sname + "_log.jsonl";
              tuned[s] = ckpt;
              tunes_ok &= runner.run("tune:" + cell + ":" + sname, [&] {
                const Model base = load_checkpoint(base_path.string()).model;
                TrainConfig tc = config.finetune;
                tc.scenario = s;
                tc.labels = eval_labels;
                tc.seed = derive_seed(seed, fnv1a("tune:" + cell + ":" + sname));
                ExplainerConfig tex = ex;
                tex.noise_seed = derive_seed(config.explainer.noise_seed, fnv1a("tune:" + cell + ":" + sname));
                auto r = finetune_alignment(base, tex, data, tune_idx, val_idx, tc);
                save_checkpoint((fs::path(dir) / ckpt).string(), r.model,
                                {{"stage", sname}, {"seed", std::to_string(seed)}, {"explainer", expl},
                                 {"labels", ltag}});
                write_text(fs::path(dir) / log, to_json_lines(r.log));
                return std::vector<std::string>{ckpt, log};
              });
            }
            if (!tunes_ok) {
              fail_all("fine-tuning failed for " + cell, false);
              return;
            }
            for (auto l : eval_labels) {
              runner.run(eval_key(l), [&] {
                ExplainerConfig eex = ex;
                eex.noise_seed = derive_seed(config.explainer.noise_seed, fnv1a(eval_key(l)));
                json scen = json::object();
                scen["base"] = scores_json(
                    evaluate_scenario(load_checkpoint(base_path.string()).model, eex, data, l, config.eval_limit));
                for (const auto& [s, ckpt] : tuned) {
                  scen[std::string(scenario_name(s))] = scores_json(evaluate_scenario(
                      load_checkpoint((fs::path(dir) / ckpt).string()).model, eex, data, l, config.eval_limit));
                }
                const json out = {{"model", p.model},   {"explainer", expl}, {"pretrained", pre},
                                  {"seed", seed},       {"label", l},        {"scenarios", scen}};
                const std::string path = "cells/" + mtag + "_" + expl + "_label" + std::to_string(l) + ".json";
                write_text(fs::path(dir) / path, out.dump() + "\n");
                return std::vector<std::string>{path};
              });
            }
          });
        }
      }
    }
  }
  run_pool(tasks, workers);

  manifest.reports = emit_reports(dir, manifest);
  manifest.audit.push_back(now_utc() + " run hash=" + hash + " executed=" + std::to_string(runner.executed()) +
                           " skipped=" + std::to_string(runner.skipped()) +
                           " failed=" + std::to_string(runner.failed()));
  save_manifest(dir, manifest);
  return manifest;
}

// ---------------------------------------------------------------- reports

namespace {

struct CellScores {
  std::string model, explainer;
  bool pretrained = false;
  std::uint64_t seed = 0;
  std::int64_t label = 0;
  std::map<std::string, std::optional<double>> auroc, mi;               // scenario -> value
  std::map<std::int64_t, std::map<std::string, AlignmentScores>> rows;  // id -> scenario -> scores
};

const char* const kScenarios[] = {"base", "align", "misalign"};

CellScores read_cell(const fs::path& path) {
  const auto j = json::parse(read_text(path));
  CellScores c;
  c.model = j.at("model").get<std::string>();
  c.explainer = j.at("explainer").get<std::string>();
  c.pretrained = j.at("pretrained").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.label = j.at("label").get<std::int64_t>();
  for (const auto& [scen, s] : j.at("scenarios").items()) {
    auto opt = [](const json& v) { return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()); };
    c.auroc[scen] = opt(s.at("auroc"));
    c.mi[scen] = opt(s.at("mi"));
    for (const auto& r : s.at("samples")) {
      c.rows[r.at(0).get<std::int64_t>()][scen] = {opt(r.at(1)), r.at(2).get<double>(), r.at(3).get<bool>(),
                                                  r.at(4).get<double>()};
    }
  }
  return c;
}

struct PipelineKey {
  std::string model, explainer;
  bool pretrained;
  auto operator<=>(const PipelineKey&) const = default;
};

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::optional<double> sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return std::nullopt;
  const double m = *mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::optional<double> metric(const AlignmentScores& s, const std::string& name) {
  if (name == "mass") return s.mass;
  if (name == "rank") return s.rank;
  if (name == "hit") return s.hit ? 1.0 : 0.0;
  return s.iou;
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

}  // namespace

std::vector<std::string> emit_reports(const std::string& run_dir, const RunManifest& manifest) {
  const fs::path dir(run_dir);
  std::vector<CellScores> cells;
  std::map<PipelineKey, std::vector<std::string>> gaps;
  for (const auto& [key, rec] : manifest.stages) {
    if (key.rfind("eval:", 0) != 0) continue;
    // eval:<arch>_<scratch|pretrained>_s<seed>:<EXPL>:label<l>
    const auto c1 = key.find(':', 5), c2 = key.find(':', c1 + 1);
    const std::string mtag = key.substr(5, c1 - 5);
    const std::string expl = key.substr(c1 + 1, c2 - c1 - 1);
    const auto u1 = mtag.find('_'), u2 = mtag.rfind('_');
    const PipelineKey pk{mtag.substr(0, u1), expl, mtag.substr(u1 + 1, u2 - u1 - 1) == "pretrained"};
    if (rec.status != "done" || rec.artifacts.empty()) {
      gaps[pk].push_back(mtag.substr(u2 + 1) + "/" + key.substr(c2 + 1));
      continue;
    }
    cells.push_back(read_cell(dir / rec.artifacts.front()));
  }
  std::map<PipelineKey, std::vector<const CellScores*>> by_pipeline;
  for (const auto& c : cells) by_pipeline[{c.model, c.explainer, c.pretrained}].push_back(&c);
  for (const auto& [pk, _] : gaps) by_pipeline[pk];

  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(name);
  };

  // persample.csv
  {
    std::string out = "seed,model,explainer,pretrained,label,id";
    for (auto s : kScenarios) {
      for (auto m : {"mass", "rank", "hit", "iou"}) out += std::string(",") + m + "_" + s;
    }
    out += "\n";
    for (const auto& c : cells) {
      for (const auto& [id, per] : c.rows) {
        out += std::to_string(c.seed) + "," + c.model + "," + c.explainer + "," + (c.pretrained ? "1" : "0") + "," +
               std::to_string(c.label) + "," + std::to_string(id);
        for (auto s : kScenarios) {
          auto it = per.find(s);
          for (auto m : {"mass", "rank", "hit", "iou"}) {
            out += ",";
            if (it == per.end()) continue;
            if (std::string(m) == "hit") out += it->second.hit ? "1" : "0";
            else out += fmt(metric(it->second, m));
          }
        }
        out += "\n";
      }
    }
    emit("persample.csv", out);
  }

  // cells.csv: per-cell classification measures (the AUC inputs of results.csv).
  {
    std::string out = "seed,model,explainer,pretrained,label";
    for (auto s : kScenarios) out += std::string(",AUC_") + s + ",MI_" + s;
    out += "\n";
    for (const auto& c : cells) {
      out += std::to_string(c.seed) + "," + c.model + "," + c.explainer + "," + (c.pretrained ? "1" : "0") + "," +
             std::to_string(c.label);
      for (auto s : kScenarios) {
        auto a = c.auroc.find(s);
        auto m = c.mi.find(s);
        out += "," + (a == c.auroc.end() ? std::string() : fmt(a->second));
        out += "," + (m == c.mi.end() ? std::string() : fmt(m->second));
      }
      out += "\n";
    }
    emit("cells.csv", out);
  }

  // Per-sample aligned - misaligned differences, pooled per pipeline.
  struct Diffs {
    std::vector<double> mass, rank;
    std::map<std::uint64_t, std::pair<std::vector<double>, std::vector<double>>> by_seed;
    std::int64_t missing_mass = 0;
  };
  std::map<PipelineKey, Diffs> diffs;
  for (const auto& [pk, list] : by_pipeline) {
    auto& d = diffs[pk];
    for (const auto* c : list) {
      std::map<std::int64_t, std::optional<double>> am, mm, ar, mr;
      for (const auto& [id, per] : c->rows) {
        auto a = per.find("align"), m = per.find("misalign");
        if (a == per.end() || m == per.end()) continue;
        am[id] = a->second.mass;
        mm[id] = m->second.mass;
        ar[id] = a->second.rank;
        mr[id] = m->second.rank;
      }
      if (am.empty()) continue;
      const auto rm = robustness(am, mm), rr = robustness(ar, mr);
      d.mass.insert(d.mass.end(), rm.differences.begin(), rm.differences.end());
      d.rank.insert(d.rank.end(), rr.differences.begin(), rr.differences.end());
      auto& s = d.by_seed[c->seed];
      s.first.insert(s.first.end(), rm.differences.begin(), rm.differences.end());
      s.second.insert(s.second.end(), rr.differences.begin(), rr.differences.end());
      d.missing_mass += rm.missing;
    }
  }

  // results.csv
  {
    std::string out =
        "model,explainer,pretrained,AUC_base,AUC_align,AUC_misalign,MI_align,MI_misalign,"
        "mass_base,mass_align,mass_misalign,rank_base,rank_align,rank_misalign,"
        "hit_align,hit_misalign,iou_align,iou_misalign,R_mass,R_rank,R_mass_std,R_rank_std,"
        "n_pairs,missing_mass,cells,gaps\n";
    for (const auto& [pk, list] : by_pipeline) {
      auto cell_mean = [&](const std::map<std::string, std::optional<double>> CellScores::*field, const char* s) {
        std::vector<double> v;
        for (const auto* c : list) {
          auto it = (c->*field).find(s);
          if (it != (c->*field).end() && it->second) v.push_back(*it->second);
        }
        return mean_of(v);
      };
      auto sample_mean = [&](const char* s, const char* m) {
        std::vector<double> v;
        for (const auto* c : list) {
          for (const auto& [id, per] : c->rows) {
            auto it = per.find(s);
            if (it == per.end()) continue;
            if (auto x = metric(it->second, m)) v.push_back(*x);
          }
        }
        return mean_of(v);
      };
      const auto& d = diffs[pk];
      std::vector<double> seed_mass, seed_rank;
      for (const auto& [seed, pr] : d.by_seed) {
        if (auto m = mean_of(pr.first)) seed_mass.push_back(*m);
        if (auto r = mean_of(pr.second)) seed_rank.push_back(*r);
      }
      std::vector<std::string> g = gaps.count(pk) ? gaps.at(pk) : std::vector<std::string>{};
      out += pk.model + "," + pk.explainer + "," + (pk.pretrained ? "1" : "0") + "," +
             fmt(cell_mean(&CellScores::auroc, "base")) + "," + fmt(cell_mean(&CellScores::auroc, "align")) + "," +
             fmt(cell_mean(&CellScores::auroc, "misalign")) + "," + fmt(cell_mean(&CellScores::mi, "align")) + "," +
             fmt(cell_mean(&CellScores::mi, "misalign")) + "," + fmt(sample_mean("base", "mass")) + "," +
             fmt(sample_mean("align", "mass")) + "," + fmt(sample_mean("misalign", "mass")) + "," +
             fmt(sample_mean("base", "rank")) + "," + fmt(sample_mean("align", "rank")) + "," +
             fmt(sample_mean("misalign", "rank")) + "," + fmt(sample_mean("align", "hit")) + "," +
             fmt(sample_mean("misalign", "hit")) + "," + fmt(sample_mean("align", "iou")) + "," +
             fmt(sample_mean("misalign", "iou")) + "," + fmt(mean_of(d.mass)) + "," + fmt(mean_of(d.rank)) + "," +
             fmt(sample_std(seed_mass)) + "," + fmt(sample_std(seed_rank)) + "," + std::to_string(d.rank.size()) +
             "," + std::to_string(d.missing_mass) + "," + std::to_string(list.size()) + "," + join(g, ";") + "\n";
    }
    emit("results.csv", out);
  }

  // consistency.csv: pooled correlations between alignment metrics.
  {
    std::string out = "scenario,x,y,n,pearson,spearman\n";
    const std::pair<const char*, const char*> pairs[] = {
        {"mass", "rank"}, {"mass", "iou"}, {"rank", "iou"}, {"mass", "hit"}, {"rank", "hit"}};
    for (auto s : kScenarios) {
      for (const auto& [xm, ym] : pairs) {
        std::vector<double> x, y;
        for (const auto& c : cells) {
          for (const auto& [id, per] : c.rows) {
            auto it = per.find(s);
            if (it == per.end()) continue;
            auto a = metric(it->second, xm), b = metric(it->second, ym);
            if (a && b) x.push_back(*a), y.push_back(*b);
          }
        }
        if (x.empty()) continue;
        Correlation r;
        if (x.size() >= 3) r = correlations(x, y);
        out += std::string(s) + "," + xm + "," + ym + "," + std::to_string(x.size()) + "," + fmt(r.pearson) + "," +
               fmt(r.spearman) + "\n";
      }
    }
    emit("consistency.csv", out);
  }

  // regression_{mass,rank}.csv: differences on dummy-coded pipeline factors.
  for (const std::string which : {"mass", "rank"}) {
    std::string out = "term,coefficient,std_error,t_value,p_value,dof,n\n";
    std::vector<PipelineKey> row_keys;
    std::vector<double> response;
    for (const auto& [pk, d] : diffs) {
      const auto& v = which == "mass" ? d.mass : d.rank;
      for (double x : v) row_keys.push_back(pk), response.push_back(x);
    }
    struct Column {
      std::string name;
      std::function<bool(const PipelineKey&)> on;
    };
    std::vector<Column> candidates{{"model_vit", [](const PipelineKey& k) { return k.model == "vit"; }},
                                   {"explainer_IG", [](const PipelineKey& k) { return k.explainer == "IG"; }},
                                   {"explainer_SG", [](const PipelineKey& k) { return k.explainer == "SG"; }},
                                   {"explainer_LRP", [](const PipelineKey& k) { return k.explainer == "LRP"; }},
                                   {"pretrained", [](const PipelineKey& k) { return k.pretrained; }}};
    std::vector<Column> columns;
    for (auto& col : candidates) {
      const auto hits = std::count_if(row_keys.begin(), row_keys.end(), col.on);
      if (hits > 0 && hits < static_cast<std::ptrdiff_t>(row_keys.size())) columns.push_back(col);
    }
    const auto p = static_cast<std::int64_t>(columns.size()) + 1;
    const auto n = static_cast<std::int64_t>(response.size());
    if (n > p) {
      std::vector<double> design;
      std::vector<std::string> names{"intercept"};
      for (const auto& col : columns) names.push_back(col.name);
      for (const auto& k : row_keys) {
        design.push_back(1.0);
        for (const auto& col : columns) design.push_back(col.on(k) ? 1.0 : 0.0);
      }
      try {
        const auto fit = ols_fit(design, p, response, names);
        for (std::size_t i = 0; i < fit.names.size(); ++i) {
          out += fit.names[i] + "," + fmt(fit.coefficients[i]) + "," + fmt(fit.std_errors[i]) + "," +
                 fmt(fit.t_values[i]) + "," + fmt(fit.p_values[i]) + "," + std::to_string(fit.dof) + "," +
                 std::to_string(n) + "\n";
        }
      } catch (const std::invalid_argument& e) {
        std::cerr << "regression_" << which << ": " << e.what() << "\n";
      }
    }
    emit("regression_" + which + ".csv", out);
  }

  // histograms.json: accuracy distributions per pipeline, scenario and metric.
  {
    json edges = json::array();
    for (int b = 0; b <= kHistogramBins; ++b) edges.push_back(static_cast<double>(b) / kHistogramBins);
    json entries = json::array();
    for (const auto& [pk, list] : by_pipeline) {
      for (auto s : kScenarios) {
        for (auto m : {"mass", "rank", "iou"}) {
          std::vector<std::int64_t> counts(kHistogramBins, 0);
          std::int64_t evaluated = 0, missing = 0;
          for (const auto* c : list) {
            for (const auto& [id, per] : c->rows) {
              auto it = per.find(s);
              if (it == per.end()) continue;
              const auto v = metric(it->second, m);
              if (!v) {
                ++missing;
                continue;
              }
              ++evaluated;
              const auto bin = std::clamp(static_cast<int>(std::floor(*v * kHistogramBins)), 0, kHistogramBins - 1);
              ++counts[static_cast<std::size_t>(bin)];
            }
          }
          if (evaluated + missing == 0) continue;
          entries.push_back({{"model", pk.model},
                             {"explainer", pk.explainer},
                             {"pretrained", pk.pretrained},
                             {"scenario", s},
                             {"metric", m},
                             {"counts", counts},
                             {"evaluated", evaluated},
                             {"missing", missing}});
        }
      }
    }
    emit("histograms.json", json{{"edges", edges}, {"histograms", entries}}.dump(2) + "\n");
  }
  return written;
}

}  // namespace xalign
