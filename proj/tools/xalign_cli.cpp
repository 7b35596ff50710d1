// Command-line front end. Exit codes: 0 success, 1 validation error,
// 2 runtime failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "xalign/experiment.hpp"
#include "xalign/seed.hpp"

namespace {

using namespace xalign;
using nlohmann::json;

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw std::runtime_error("cannot write " + path);
}

std::string opt_json(const std::optional<double>& v) { return v ? json(*v).dump() : "null"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train classifiers, fine-tune explanation alignment and report robustness"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  std::uint64_t data_seed = 0;
  bool seed_given = false;
  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset directory");
  gen->add_option("--spec", spec_path, "generator spec (JSON); defaults when omitted");
  gen->add_option("--seed", data_seed, "override the spec seed")->each([&](const std::string&) { seed_given = true; });
  gen->add_option("--out", out_dir, "output directory")->required();

  std::string data_dir, arch = "cnn", ckpt_out, log_out, ckpt_in, explainer = "VG", scenario = "align";
  std::int64_t epochs = 25, batch = 32, limit = 0;
  double lr = 1e-4, alpha = 1.0, rotation = 15.0;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> labels{0};
  ModelShape shapes;

  auto* train = app.add_subcommand("train", "Train a base classifier");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--arch", arch, "cnn or vit")->check(CLI::IsMember({"cnn", "vit"}));
  train->add_option("--epochs", epochs);
  train->add_option("--batch", batch);
  train->add_option("--lr", lr);
  train->add_option("--rotation", rotation, "augmentation range in degrees");
  train->add_option("--seed", seed);
  train->add_option("--cnn-width", shapes.cnn_width);
  train->add_option("--vit-patch", shapes.vit_patch);
  train->add_option("--vit-depth", shapes.vit_depth);
  train->add_option("--vit-heads", shapes.vit_heads);
  train->add_option("--vit-dim", shapes.vit_dim);
  train->add_option("--out", ckpt_out, "checkpoint path")->required();
  train->add_option("--log", log_out, "epoch log (JSON lines)");

  ExplainerConfig ex;
  auto add_explainer = [&](CLI::App* cmd) {
    cmd->add_option("--explainer", explainer, "VG, IG, SG or LRP");
    cmd->add_option("--ig-steps", ex.ig_steps);
    cmd->add_option("--sg-samples", ex.sg_samples);
    cmd->add_option("--sg-sigma", ex.sg_sigma);
    cmd->add_option("--lrp-epsilon", ex.lrp_epsilon);
    cmd->add_option("--noise-seed", ex.noise_seed);
  };
  auto* tune = app.add_subcommand("finetune", "Fine-tune a checkpoint to align or misalign explanations");
  tune->add_option("--data", data_dir, "dataset directory")->required();
  tune->add_option("--checkpoint", ckpt_in, "base checkpoint")->required();
  add_explainer(tune);
  tune->add_option("--scenario", scenario, "align or misalign")->check(CLI::IsMember({"align", "misalign"}));
  tune->add_option("--label", labels, "target label(s); several are summed");
  tune->add_option("--epochs", epochs);
  tune->add_option("--batch", batch);
  tune->add_option("--lr", lr);
  tune->add_option("--alpha", alpha);
  tune->add_option("--rotation", rotation);
  tune->add_option("--seed", seed);
  tune->add_option("--out", ckpt_out, "checkpoint path")->required();
  tune->add_option("--log", log_out, "epoch log (JSON lines)");

  std::int64_t label = 0;
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on the eval split");
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--checkpoint", ckpt_in)->required();
  add_explainer(eval);
  eval->add_option("--label", label);
  eval->add_option("--limit", limit, "cap on evaluated positives (0: all)");
  eval->add_option("--out", ckpt_out, "per-sample CSV (stdout summary only when omitted)");

  std::string config_path, output_override;
  auto* matrix = app.add_subcommand("run-matrix", "Run a configured experiment matrix (XALIGN_WORKERS sets the pool size)");
  matrix->add_option("--config", config_path, "experiment config (JSON)")->required();
  matrix->add_option("--output", output_override, "override the config output directory");
  bool print_config = false;
  matrix->add_flag("--print-config", print_config, "print the canonical config and its hash, then exit");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Rebuild report files of a run directory from its manifest");
  report->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      GenSpec spec = spec_path.empty() ? GenSpec{} : genspec_from_json(slurp(spec_path));
      if (seed_given) spec.seed = data_seed;
      spec.validate();
      save_directory(generate(spec), out_dir);
      std::cout << "wrote " << spec.splits.total() << " samples to " << out_dir << "\n";
    } else if (*train) {
      const Dataset data = load_directory(data_dir);
      Model model = build_model(arch, data.shape, data.num_labels, shapes, derive_seed(seed, 1));
      TrainConfig tc;
      tc.epochs = epochs;
      tc.batch_size = batch;
      tc.optimizer.lr = lr;
      tc.rotation = rotation;
      tc.seed = seed;
      tc.warmup_steps = arch == "vit" ? shapes.vit_warmup : 0;
      const auto r = train_base(model, data, data.indices(Split::train), data.indices(Split::val), tc);
      save_checkpoint(ckpt_out, r.model, {{"stage", "base"}, {"seed", std::to_string(seed)}});
      if (!log_out.empty()) write_file(log_out, to_json_lines(r.log));
      std::cout << "val_auroc " << opt_json(r.log.back().val_auroc) << "\n";
    } else if (*tune) {
      const Dataset data = load_directory(data_dir);
      const Model base = load_checkpoint(ckpt_in).model;
      ex.method = parse_method(explainer);
      TrainConfig tc;
      tc.epochs = epochs;
      tc.batch_size = batch;
      tc.optimizer.lr = lr;
      tc.alpha = alpha;
      tc.rotation = rotation;
      tc.seed = seed;
      tc.scenario = parse_scenario(scenario);
      tc.labels = labels;
      tc.validate_every = 0;
      const auto r = finetune_alignment(base, ex, data, data.indices(Split::finetune), data.indices(Split::val), tc);
      save_checkpoint(ckpt_out, r.model, {{"stage", scenario}, {"seed", std::to_string(seed)}, {"explainer", explainer}});
      if (!log_out.empty()) write_file(log_out, to_json_lines(r.log));
      const auto& last = r.log.back();
      std::cout << "val_auroc " << opt_json(last.val_auroc) << " val_mass " << opt_json(last.val_mass) << " val_rank "
                << opt_json(last.val_rank) << "\n";
    } else if (*eval) {
      const Dataset data = load_directory(data_dir);
      const Model model = load_checkpoint(ckpt_in).model;
      ex.method = parse_method(explainer);
      check_supported(model, ex.method);
      const auto r = evaluate_scenario(model, ex, data, label, limit);
      double mass = 0, rank = 0, hit = 0, iou = 0;
      std::int64_t mass_n = 0;
      std::string csv = "id,mass,rank,hit,iou\n";
      for (const auto& s : r.samples) {
        if (s.scores.mass) mass += *s.scores.mass, ++mass_n;
        rank += s.scores.rank;
        hit += s.scores.hit;
        iou += s.scores.iou;
        char buf[256];
        std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%d,%.17g\n", static_cast<long long>(s.id),
                      s.scores.mass ? json(*s.scores.mass).dump().c_str() : "", s.scores.rank, s.scores.hit ? 1 : 0,
                      s.scores.iou);
        csv += buf;
      }
      if (!ckpt_out.empty()) write_file(ckpt_out, csv);
      const double n = static_cast<double>(r.samples.size());
      json summary = {{"auroc", r.auroc ? json(*r.auroc) : json(nullptr)},
                      {"mi_bits", r.mutual_information ? json(*r.mutual_information) : json(nullptr)},
                      {"evaluated", r.samples.size()},
                      {"mass", mass_n ? json(mass / static_cast<double>(mass_n)) : json(nullptr)},
                      {"rank", n > 0 ? json(rank / n) : json(nullptr)},
                      {"hit_rate", n > 0 ? json(hit / n) : json(nullptr)},
                      {"iou", n > 0 ? json(iou / n) : json(nullptr)}};
      std::cout << summary.dump(2) << "\n";
    } else if (*matrix) {
      ExperimentConfig config = config_from_json(slurp(config_path));
      if (!output_override.empty()) config.output = output_override;
      config.validate();
      if (print_config) {
        std::cout << config_to_json(config) << "\nhash " << config_hash(config) << "\n";
        return 0;
      }
      const auto m = run_experiment(config);
      std::int64_t failed = 0;
      for (const auto& [key, rec] : m.stages) {
        if (rec.status != "done") {
          ++failed;
          std::cerr << "stage " << key << " failed: " << rec.error << "\n";
        }
      }
      std::cout << m.audit.back() << "\n";
      if (failed) return 2;
    } else if (*report) {
      if (!std::filesystem::exists(std::filesystem::path(run_dir) / "manifest.json")) {
        throw ValidationError("no manifest.json in " + run_dir);
      }
      auto m = load_manifest(run_dir);
      m.reports = emit_reports(run_dir, m);
      save_manifest(run_dir, m);
      for (const auto& r : m.reports) std::cout << r << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
