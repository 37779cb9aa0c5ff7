// halos: generate phantoms, train, evaluate, predict and post-process.

#include "halos/experiment.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

using namespace halos;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Options {
  fs::path config;
  std::vector<std::string> overrides;
  std::string variant = "halos";
  fs::path checkpoint, pred_dir, manifest, out;
  std::vector<std::string> modes;
  std::string split;
  std::string mode = "gt";
  bool resume = false;
  bool dump = false;
  bool quiet = false;
};

json read_config(const Options& o) {
  json j = load_config_file(o.config);
  for (const auto& s : o.overrides) apply_override(j, s);
  return j;
}

fs::path config_dir(const Options& o) { return o.config.has_parent_path() ? o.config.parent_path() : fs::path("."); }

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

Split split_or(const std::string& s, Split fallback) {
  if (s.empty()) return fallback;
  try {
    return split_from_string(s);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

std::vector<EvalMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<EvalMode> out;
  try {
    for (const auto& n : names) out.push_back(eval_mode_from_string(n));
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return out;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

// ---------------------------------------------------------------- commands

int cmd_generate(const Options& o) {
  GenerateConfig g = generate_config_from_json(read_config(o), config_dir(o));
  if (!o.out.empty()) g.output_dir = o.out;
  const Manifest m = generate_dataset(g.phantom, g.counts, g.voxel_labeled_fraction, g.output_dir);
  if (!o.quiet)
    std::fprintf(stderr, "wrote %zu records to %s\n", m.records.size(), (g.output_dir / "manifest.json").c_str());
  return 0;
}

int cmd_train(const Options& o) {
  ExperimentConfig x = experiment_config_from_json(read_config(o), variant_from_string(o.variant), config_dir(o));
  if (!o.out.empty()) x.output_dir = o.out;
  if (!o.manifest.empty()) x.manifest = o.manifest;
  const Manifest manifest = load_manifest(x.manifest);
  const fs::path run = x.run_dir();
  fs::create_directories(run);
  json resolved = to_json(x);
  write_json(run / "experiment.json", {{"config", resolved}, {"config_hash", config_hash(resolved)}});

  TrainHooks hooks;
  auto t0 = std::chrono::steady_clock::now();
  if (!o.quiet) {
    hooks.on_epoch = [&](const EpochLog& e) {
      const auto t1 = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(t1 - t0).count();
      t0 = t1;
      std::fprintf(stderr, "[%s] epoch %d/%d loss %.4f (seg %.4f, clf %.4f) val dice %.4f%s (%.1f s)\n",
                   o.variant.c_str(), e.epoch + 1, x.train.epochs, e.total_loss, e.seg_loss, e.clf_loss,
                   e.val_mean_dice,
                   e.val_balanced_accuracy ? (" bacc " + std::to_string(*e.val_balanced_accuracy)).c_str() : "",
                   secs);
    };
  }
  const TrainResult r = train(manifest, x.network, x.train, run, o.resume, hooks);
  if (!o.quiet)
    std::fprintf(stderr, "best epoch %d (val dice %.4f): %s\n", r.best_epoch + 1, r.best_val_mean_dice,
                 r.best_checkpoint.c_str());
  return 0;
}

int cmd_evaluate(const Options& o) {
  if (o.checkpoint.empty() == o.pred_dir.empty()) throw ConfigError("evaluate needs exactly one of --checkpoint, --pred-dir");
  std::optional<ExperimentConfig> x;
  if (!o.config.empty())
    x = experiment_config_from_json(read_config(o), variant_from_string(o.variant), config_dir(o));
  fs::path manifest_path = o.manifest.empty() && x ? x->manifest : o.manifest;
  if (manifest_path.empty()) throw ConfigError("evaluate needs --manifest or --config");
  const Split split = split_or(o.split, x ? x->eval_split : Split::test);
  std::vector<EvalMode> modes = parse_modes(o.modes);

  if (!o.pred_dir.empty()) {
    const fs::path out = o.out.empty() ? o.pred_dir : o.out;
    const bool post = std::find(modes.begin(), modes.end(), EvalMode::postproc) != modes.end();
    const Manifest manifest = load_manifest(manifest_path);
    const json metrics = evaluate_predictions(o.pred_dir, manifest, split, post);
    write_report(metrics, {{"split", to_string(split)}, {"source", "prediction directory"}}, out);
    return 0;
  }

  json meta;
  UNet<float> model = load_checkpoint(o.checkpoint, &meta);
  const fs::path run = o.checkpoint.parent_path();
  json experiment = nullptr;
  if (fs::exists(run / "experiment.json")) {
    std::ifstream f(run / "experiment.json");
    experiment = json::parse(f).at("config");
  }
  if (modes.empty() && x && !x->eval_modes.empty()) modes = x->eval_modes;
  if (modes.empty() && experiment.is_object()) {
    const auto& ev = experiment.at("evaluation").at("modes");
    modes = ev.empty() ? default_eval_modes(variant_from_string(experiment.at("variant")), model.config())
                       : parse_modes(ev.get<std::vector<std::string>>());
  }
  if (modes.empty()) modes = supported_modes(model.config());
  const auto ok = supported_modes(model.config());
  for (EvalMode m : modes)
    if (std::find(ok.begin(), ok.end(), m) == ok.end())
      throw ConfigError("mode '" + to_string(m) + "' needs a checkpoint with fusion and classifier");

  EvalOptions opts;
  opts.modes = modes;
  opts.split = split;
  if (x) opts.inference = x->inference;
  else if (experiment.is_object()) {
    const json& i = experiment.at("inference");
    opts.inference.overlap = i.at("overlap");
    opts.inference.sigma_scale = i.at("sigma_scale");
    opts.inference.threshold = i.at("threshold");
    opts.inference.window_batch = i.at("window_batch");
  }
  const auto patch = train_config_from_json(meta.at("train_config")).patch();
  opts.inference.patch = patch;
  const fs::path out = o.out.empty() ? run / ("eval_" + to_string(split)) : o.out;
  if (o.dump) opts.dump_dir = out / "predictions";

  const Manifest manifest = load_manifest(manifest_path);
  const json metrics = evaluate_model(model, manifest, opts);
  json mode_names = json::array();
  for (EvalMode m : modes) mode_names.push_back(to_string(m));
  const json config = {{"experiment", experiment},
                       {"checkpoint",
                        {{"file", o.checkpoint.filename().string()},
                         {"epoch", meta.at("epoch")},
                         {"network_config", meta.at("network_config")},
                         {"train_config", meta.at("train_config")}}},
                       {"evaluation",
                        {{"modes", mode_names},
                         {"split", to_string(split)},
                         {"overlap", opts.inference.overlap},
                         {"sigma_scale", opts.inference.sigma_scale},
                         {"threshold", opts.inference.threshold}}}};
  write_report(metrics, config, out);
  if (!o.quiet) std::fprintf(stderr, "wrote %s\n", (out / "results.json").c_str());
  return 0;
}

int cmd_predict(const Options& o) {
  if (o.manifest.empty() || o.out.empty()) throw ConfigError("predict needs --manifest and --out");
  const ExistenceSource source = o.mode == "gt"     ? ExistenceSource::ground_truth
                                 : o.mode == "pred" ? ExistenceSource::classifier
                                 : o.mode == "raw"  ? ExistenceSource::none
                                                    : throw ConfigError("predict --mode must be gt, pred or raw");
  json meta;
  UNet<float> model = load_checkpoint(o.checkpoint, &meta);
  InferenceConfig infer;
  infer.patch = train_config_from_json(meta.at("train_config")).patch();
  const Manifest manifest = load_manifest(o.manifest, false);
  fs::create_directories(o.out);
  for (const SampleRecord* r : manifest.split(split_or(o.split, Split::test))) {
    const Volume raw = load_volume(r->volume_path);
    const Prediction p =
        predict_volume(model, zscore_normalize(raw), source, r->existence, manifest.class_names, infer);
    save_labelmap(p.labels, o.out / (r->id + "_pred.nii.gz"), raw.spacing);
    save_probabilities(p.probabilities, o.out / (r->id + "_prob.nii.gz"), raw.spacing);
  }
  return 0;
}

int cmd_post_process(const Options& o) {
  if (o.pred_dir.empty() || o.manifest.empty() || o.out.empty())
    throw ConfigError("post-process needs --pred-dir, --manifest and --out");
  const Manifest manifest = load_manifest(o.manifest, false);
  fs::create_directories(o.out);
  for (const SampleRecord* r : manifest.split(split_or(o.split, Split::test))) {
    const fs::path prob = o.pred_dir / (r->id + "_prob.nii.gz");
    if (!fs::exists(prob)) throw FormatError("missing probabilities " + prob.string());
    const LabelMap l = post_process(load_probabilities(prob), r->existence, manifest.class_names);
    save_labelmap(l, o.out / (r->id + "_pred.nii.gz"));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Organ segmentation with existence-aware fusion on synthetic phantoms"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-q,--quiet", o.quiet, "Suppress progress output");

  auto* gen = app.add_subcommand("generate", "Write a phantom dataset and manifest");
  gen->add_option("--config", o.config, "Phantom config (YAML or JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--set", o.overrides, "Override a config key: dotted.key=value");
  gen->add_option("--out", o.out, "Output directory (overrides output_dir)");

  auto* tr = app.add_subcommand("train", "Train one variant");
  tr->add_option("--config", o.config, "Experiment config")->required()->check(CLI::ExistingFile);
  tr->add_option("--variant", o.variant, "halos, plain, oversample, postproc, batch_red, decoder_classifier, halos_no_fusion");
  tr->add_option("--set", o.overrides, "Override a config key: dotted.key=value");
  tr->add_option("--manifest", o.manifest, "Dataset manifest (overrides the config)");
  tr->add_option("--out", o.out, "Output root (overrides output_dir)");
  tr->add_flag("--resume", o.resume, "Continue from <run>/last.ckpt");

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint or a prediction directory");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->check(CLI::ExistingFile);
  ev->add_option("--pred-dir", o.pred_dir, "Directory of <id>_pred.nii.gz")->check(CLI::ExistingDirectory);
  ev->add_option("--config", o.config, "Experiment config")->check(CLI::ExistingFile);
  ev->add_option("--variant", o.variant, "Variant used to read --config");
  ev->add_option("--set", o.overrides, "Override a config key: dotted.key=value");
  ev->add_option("--manifest", o.manifest, "Dataset manifest");
  ev->add_option("--mode", o.modes, "raw, gt, pred or postproc (repeatable)");
  ev->add_option("--split", o.split, "train, val or test");
  ev->add_option("--out", o.out, "Report directory");
  ev->add_flag("--dump", o.dump, "Also write predictions");

  auto* pr = app.add_subcommand("predict", "Segment every volume of a split");
  pr->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  pr->add_option("--mode", o.mode, "Fusion input: gt, pred or raw");
  pr->add_option("--split", o.split, "train, val or test");
  pr->add_option("--out", o.out, "Output directory")->required();

  auto* pp = app.add_subcommand("post-process", "Remove absent organs from saved probabilities");
  pp->add_option("--pred-dir", o.pred_dir, "Directory of <id>_prob.nii.gz")->required()->check(CLI::ExistingDirectory);
  pp->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  pp->add_option("--split", o.split, "train, val or test");
  pp->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "halos: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_evaluate(o);
    if (pr->parsed()) return cmd_predict(o);
    if (pp->parsed()) return cmd_post_process(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "halos: config error: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "halos: error: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 1;
}
