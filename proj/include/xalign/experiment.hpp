#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xalign/data.hpp"
#include "xalign/explain.hpp"
#include "xalign/metrics.hpp"
#include "xalign/model.hpp"
#include "xalign/train.hpp"

namespace xalign {

/// One (architecture, explainer) pair of the experiment grid.
struct Pipeline {
  std::string model = "cnn";  // "cnn" or "vit"
  Method explainer = Method::vg;
  bool operator==(const Pipeline&) const = default;
};

struct ModelShape {
  double cnn_width = 1.0;
  std::int64_t vit_patch = 8;
  std::int64_t vit_depth = 2;
  std::int64_t vit_heads = 2;
  std::int64_t vit_dim = 32;
  std::int64_t vit_warmup = 200;  // linear warmup steps for the transformer
};

/// Declarative description of a run. Serialized as JSON; the hash is taken
/// over the canonical form, so key order and omitted defaults do not matter.
struct ExperimentConfig {
  std::optional<GenSpec> generate;  // dataset source: generator spec ...
  std::string directory;            // ... or an on-disk dataset
  std::vector<Pipeline> pipelines{{"cnn", Method::vg}, {"cnn", Method::ig}, {"cnn", Method::sg},
                                  {"cnn", Method::lrp}, {"vit", Method::vg}, {"vit", Method::ig},
                                  {"vit", Method::sg}};
  std::vector<bool> pretrained{false};
  std::vector<Scenario> scenarios{Scenario::align, Scenario::misalign};  // base is always trained
  std::vector<std::int64_t> labels{0, 1, 2};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ModelShape shapes;
  ExplainerConfig explainer;  // method is taken from each pipeline
  TrainConfig base;           // seed, scenario, labels and warmup set per stage
  TrainConfig finetune;       // seed, scenario and labels set per stage
  std::int64_t pretrain_epochs = 10;
  std::int64_t eval_limit = 0;   // cap on evaluated positives per label (0: all)
  bool multi_label_sum = false;  // one fine-tune over all labels instead of one per label
  std::string output = "run";

  ExperimentConfig();
  /// Throws std::invalid_argument describing the first problem.
  void validate() const;
};

std::string config_to_json(const ExperimentConfig& config);  // canonical text
ExperimentConfig config_from_json(const std::string& text);
/// FNV-1a 64 of the canonical text without `output`, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Builds an initialized model of `architecture` for `input`.
Model build_model(const std::string& architecture, InputShape input, std::int64_t labels, const ModelShape& shapes,
                  std::uint64_t seed);

/// Per-sample alignment scores of one scenario.
struct SampleScores {
  std::int64_t id = 0;
  AlignmentScores scores;
};

/// Evaluation of one model + explainer on one label of the eval split.
struct ScenarioEval {
  std::optional<double> auroc;
  std::optional<double> mutual_information;  // bits, predictions at p >= 0.5
  std::vector<SampleScores> samples;
};

ScenarioEval evaluate_scenario(const Model& model, const ExplainerConfig& explainer, const Dataset& dataset,
                               std::int64_t label, std::int64_t limit);

struct StageRecord {
  std::string status;  // "done" or "failed"
  std::vector<std::string> artifacts;
  std::string error;
  std::string started, finished;
};

struct RunManifest {
  std::string config_hash;
  std::string config;  // canonical text
  std::string version;
  std::map<std::string, StageRecord> stages;  // stage key -> record
  std::vector<std::string> audit;             // one line per invocation
  std::vector<std::string> reports;
};

RunManifest load_manifest(const std::string& run_dir);  // empty manifest when absent
void save_manifest(const std::string& run_dir, const RunManifest& manifest);

/// Runs every missing or failed stage of `config` and writes the reports.
/// Worker count comes from XALIGN_WORKERS (default 1).
RunManifest run_experiment(const ExperimentConfig& config);

/// Writes results.csv, persample.csv, consistency.csv, regression_mass.csv,
/// regression_rank.csv and histograms.json into `run_dir` from the stage
/// artifacts listed in `manifest`. Returns the written paths.
std::vector<std::string> emit_reports(const std::string& run_dir, const RunManifest& manifest);

}  // namespace xalign
