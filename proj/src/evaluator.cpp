#include "halos/evaluator.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace halos {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int organ_label(const LabelMap& l, const std::string& organ) {
  const int c = l.class_index(organ);
  if (c <= 0) throw std::invalid_argument("unknown organ '" + organ + "'");
  return c;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

double dice_score(const LabelMap& pred, const LabelMap& gt, const std::string& organ) {
  if (!(pred.shape == gt.shape))
    throw std::invalid_argument("dice_score: shape mismatch " + pred.shape.str() + " vs " + gt.shape.str());
  const int c = organ_label(gt, organ);
  const auto p = (pred.data == c);
  const auto g = (gt.data == c);
  const Index np = p.count();
  const Index ng = g.count();
  if (ng == 0) return np == 0 ? 1.0 : 0.0;
  const Index inter = (p && g).count();
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

std::optional<double> sample_fpr(const std::vector<LabelMap>& preds, const std::vector<ExistenceVector>& flags,
                                 const std::string& organ) {
  if (preds.size() != flags.size()) throw std::invalid_argument("sample_fpr: lists differ in length");
  Index absent = 0, fp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (flags[i].flag(organ)) continue;
    ++absent;
    fp += preds[i].count(organ_label(preds[i], organ)) > 0;
  }
  if (absent == 0) return std::nullopt;
  return static_cast<double>(fp) / static_cast<double>(absent);
}

ClassificationMetrics classification_metrics(const std::vector<int>& predicted_present,
                                             const std::vector<int>& truly_present) {
  if (predicted_present.size() != truly_present.size() || truly_present.empty())
    throw std::invalid_argument("classification_metrics: need aligned non-empty lists");
  ClassificationMetrics m;
  for (std::size_t i = 0; i < truly_present.size(); ++i) {
    const bool p = predicted_present[i] != 0;
    const bool t = truly_present[i] != 0;
    if (p && t) ++m.tp;
    else if (p && !t) ++m.fp;
    else if (!p && !t) ++m.tn;
    else ++m.fn;
  }
  const long f1_den = 2 * m.tp + m.fp + m.fn;
  if (f1_den > 0) m.f1 = 2.0 * static_cast<double>(m.tp) / static_cast<double>(f1_den);
  const bool has_pos = m.tp + m.fn > 0;
  const bool has_neg = m.tn + m.fp > 0;
  const double tpr = has_pos ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  const double tnr = has_neg ? static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp) : 0.0;
  m.degenerate = !(has_pos && has_neg);
  m.balanced_accuracy = m.degenerate ? (has_pos ? tpr : tnr) : 0.5 * (tpr + tnr);
  return m;
}

LabelMap post_process(const Tensor5<float>& probs, const ExistenceVector& flags,
                      const std::vector<std::string>& class_names) {
  if (probs.channels() != static_cast<Index>(class_names.size()))
    throw std::invalid_argument("post_process: probability channels do not match class list");
  Tensor5<float> masked = probs;
  for (std::size_t o = 0; o < flags.size(); ++o) {
    if (flags.flags()[o]) continue;
    const auto it = std::find(class_names.begin(), class_names.end(), flags.organs()[o]);
    if (it == class_names.end()) throw std::invalid_argument("post_process: unknown organ " + flags.organs()[o]);
    // below every probability, so the organ can never win the argmax
    masked.channel(0, it - class_names.begin()).setConstant(-1.0f);
  }
  return argmax_labels(masked, 0, class_names);
}

std::optional<Index> voxel_fp_count(const LabelMap& pred, const ExistenceVector& flags, const std::string& organ) {
  if (flags.flag(organ)) return std::nullopt;
  return pred.count(organ_label(pred, organ));
}

// ---------------------------------------------------------------- inference

Eigen::ArrayXf gaussian_importance(const GridShape& patch, double sigma_scale) {
  auto axis = [&](Index n) {
    Eigen::ArrayXd g(n);
    const double sigma = std::max(1e-6, sigma_scale * static_cast<double>(n));
    const double c = static_cast<double>(n / 2);
    for (Index i = 0; i < n; ++i) g[i] = std::exp(-0.5 * std::pow((static_cast<double>(i) - c) / sigma, 2));
    return g;
  };
  const auto gz = axis(patch.depth), gy = axis(patch.height), gx = axis(patch.width);
  Eigen::ArrayXd w(patch.voxels());
  for (Index z = 0; z < patch.depth; ++z)
    for (Index y = 0; y < patch.height; ++y)
      for (Index x = 0; x < patch.width; ++x) w[(z * patch.height + y) * patch.width + x] = gz[z] * gy[y] * gx[x];
  w /= w.maxCoeff();
  const double floor = (w > 0).select(w, 1.0).minCoeff();
  w = (w > 0).select(w, floor);
  return w.cast<float>();
}

std::vector<Index> window_starts(Index size, Index patch, double overlap) {
  if (size <= patch) return {0};
  const double step = std::max(1.0, static_cast<double>(patch) * (1.0 - overlap));
  const Index n = static_cast<Index>(std::ceil(static_cast<double>(size - patch) / step)) + 1;
  std::vector<Index> s(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i)
    s[static_cast<std::size_t>(i)] =
        static_cast<Index>(std::llround(static_cast<double>(i) * static_cast<double>(size - patch) / static_cast<double>(n - 1)));
  return s;
}

Tensor5<float> sliding_window_probabilities(UNet<float>& model, const Volume& volume, const Matrix<float>* existence,
                                            const InferenceConfig& cfg) {
  const GridShape p = cfg.patch;
  const Index div = model.size_divisor();
  if (p.depth % div || p.height % div || p.width % div || p.voxels() == 0)
    throw std::invalid_argument("inference patch " + p.str() + " must be divisible by " + std::to_string(div));
  const bool was_training = model.training();
  model.set_training(false);

  // zero-pad (centred) up to the patch where the volume is smaller
  const GridShape v = volume.shape;
  const GridShape padded{std::max(v.depth, p.depth), std::max(v.height, p.height), std::max(v.width, p.width)};
  const Index oz = (padded.depth - v.depth) / 2, oy = (padded.height - v.height) / 2, ox = (padded.width - v.width) / 2;
  Tensor5<float> img(1, 1, padded);
  for (Index z = 0; z < v.depth; ++z)
    for (Index y = 0; y < v.height; ++y)
      for (Index x = 0; x < v.width; ++x) img(0, 0, z + oz, y + oy, x + ox) = volume.at(z, y, x);

  const Index C = model.config().num_classes;
  const Eigen::ArrayXf w = gaussian_importance(p, cfg.sigma_scale);
  Tensor5<float> acc(1, C, padded);
  Eigen::ArrayXf wsum = Eigen::ArrayXf::Zero(padded.voxels());

  struct Origin {
    Index z, y, x;
  };
  std::vector<Origin> origins;
  for (Index z : window_starts(padded.depth, p.depth, cfg.overlap))
    for (Index y : window_starts(padded.height, p.height, cfg.overlap))
      for (Index x : window_starts(padded.width, p.width, cfg.overlap)) origins.push_back({z, y, x});

  const Index wb = std::max<Index>(1, cfg.window_batch);
  for (std::size_t first = 0; first < origins.size(); first += static_cast<std::size_t>(wb)) {
    const Index B = std::min<Index>(wb, static_cast<Index>(origins.size() - first));
    Tensor5<float> batch(B, 1, p);
    for (Index b = 0; b < B; ++b) {
      const Origin o = origins[first + static_cast<std::size_t>(b)];
      for (Index z = 0; z < p.depth; ++z)
        for (Index y = 0; y < p.height; ++y)
          for (Index x = 0; x < p.width; ++x) batch(b, 0, z, y, x) = img(0, 0, o.z + z, o.y + y, o.x + x);
    }
    Matrix<float> e;
    if (existence) e = existence->replicate(B, 1);
    const auto out = model.forward(batch, existence ? &e : nullptr, {.segmentation = true, .classification = false});
    const Tensor5<float> probs = softmax_channels(out.logits);
    for (Index b = 0; b < B; ++b) {
      const Origin o = origins[first + static_cast<std::size_t>(b)];
      for (Index z = 0; z < p.depth; ++z)
        for (Index y = 0; y < p.height; ++y)
          for (Index x = 0; x < p.width; ++x) {
            const Index pi = (z * p.height + y) * p.width + x;
            const Index vi = ((o.z + z) * padded.height + (o.y + y)) * padded.width + (o.x + x);
            for (Index c = 0; c < C; ++c) acc.channel(0, c)[vi] += w[pi] * probs.channel(b, c)[pi];
            wsum[vi] += w[pi];
          }
    }
  }
  model.set_training(was_training);

  Tensor5<float> result(1, C, v);
  for (Index c = 0; c < C; ++c)
    for (Index z = 0; z < v.depth; ++z)
      for (Index y = 0; y < v.height; ++y)
        for (Index x = 0; x < v.width; ++x) {
          const Index vi = ((z + oz) * padded.height + (y + oy)) * padded.width + (x + ox);
          result(0, c, z, y, x) = acc.channel(0, c)[vi] / wsum[vi];
        }
  return result;
}

Eigen::VectorXd classifier_probabilities(UNet<float>& model, const Volume& volume) {
  const Index div = model.size_divisor();
  const GridShape v = volume.shape;
  auto up = [&](Index n) { return (n + div - 1) / div * div; };
  const GridShape g{up(v.depth), up(v.height), up(v.width)};
  Tensor5<float> x(1, 1, g);
  for (Index z = 0; z < v.depth; ++z)
    for (Index y = 0; y < v.height; ++y)
      for (Index xx = 0; xx < v.width; ++xx) x(0, 0, z, y, xx) = volume.at(z, y, xx);
  const bool was_training = model.training();
  model.set_training(false);
  const Matrix<float> p = classify(model, x);
  model.set_training(was_training);
  return p.row(0).transpose().cast<double>();
}

Prediction predict_volume(UNet<float>& model, const Volume& volume, ExistenceSource source,
                          const ExistenceVector& flags, const std::vector<std::string>& class_names,
                          const InferenceConfig& cfg) {
  const NetworkConfig& nc = model.config();
  if (static_cast<Index>(class_names.size()) != nc.num_classes)
    throw std::invalid_argument("predict_volume: model predicts " + std::to_string(nc.num_classes) +
                                " classes but " + std::to_string(class_names.size()) + " names were given");
  if (source == ExistenceSource::classifier && !nc.fusion_enabled)
    throw std::invalid_argument("predict_volume: classifier-driven fusion requested on a model without fusion");
  if (source == ExistenceSource::classifier && !nc.classifier_enabled)
    throw std::invalid_argument("predict_volume: classifier-driven fusion requested on a model without classifier");

  Prediction out;
  std::optional<Matrix<float>> e;
  if (nc.fusion_enabled) {
    if (static_cast<Index>(flags.size()) != nc.num_removable_organs)
      throw std::invalid_argument("predict_volume: existence vector does not match the model");
    ExistenceVector input = flags;
    if (source == ExistenceSource::none) {
      input = ExistenceVector::all_present(flags.organs());
    } else if (source == ExistenceSource::classifier) {
      const Eigen::VectorXd p = classifier_probabilities(model, volume);
      for (std::size_t o = 0; o < flags.size(); ++o)
        input.set(flags.organs()[o], p[static_cast<Index>(o)] >= cfg.threshold ? 1 : 0);
    }
    e = input.as_vector<float>().transpose();
    out.fusion_input = input;
  }
  out.probabilities = sliding_window_probabilities(model, volume, e ? &*e : nullptr, cfg);
  out.labels = argmax_labels(out.probabilities, 0, class_names);
  return out;
}

// --------------------------------------------------------------- evaluation

std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::raw: return "raw";
    case EvalMode::gt: return "gt";
    case EvalMode::pred: return "pred";
    case EvalMode::postproc: return "postproc";
  }
  return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
  for (EvalMode m : {EvalMode::raw, EvalMode::gt, EvalMode::pred, EvalMode::postproc})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown evaluation mode '" + s + "' (expected raw, gt, pred or postproc)");
}

std::vector<EvalMode> supported_modes(const NetworkConfig& cfg) {
  std::vector<EvalMode> m{EvalMode::raw, EvalMode::gt};
  if (cfg.fusion_enabled && cfg.classifier_enabled) m.push_back(EvalMode::pred);
  m.push_back(EvalMode::postproc);
  return m;
}

json aggregate_metrics(const std::vector<SampleResult>& samples, const std::vector<std::string>& class_names,
                       const std::vector<std::string>& removable_organs) {
  json out;
  json dice = json::object(), dice_present = json::object();
  std::vector<double> organ_means, organ_present_means;
  std::size_t labeled = 0;
  for (const auto& s : samples) labeled += s.gt.has_value();
  for (std::size_t c = 1; c < class_names.size(); ++c) {
    const std::string& organ = class_names[c];
    std::vector<double> all, present;
    for (const auto& s : samples) {
      if (!s.gt) continue;
      const double d = dice_score(s.pred, *s.gt, organ);
      all.push_back(d);
      if (s.gt->count(static_cast<int>(c)) > 0) present.push_back(d);
    }
    if (!all.empty()) {
      dice[organ] = {{"mean", mean_of(all)}, {"std", std_of(all)}, {"n", all.size()}};
      organ_means.push_back(mean_of(all));
    }
    if (!present.empty()) {
      dice_present[organ] = {{"mean", mean_of(present)}, {"n", present.size()}};
      organ_present_means.push_back(mean_of(present));
    }
  }
  out["num_samples"] = samples.size();
  out["num_labeled"] = labeled;
  out["dice"] = dice;
  out["dice_present"] = dice_present;
  out["mean_dice"] = organ_means.empty() ? json(nullptr) : json(mean_of(organ_means));
  out["mean_dice_present"] = organ_present_means.empty() ? json(nullptr) : json(mean_of(organ_present_means));

  json removable = json::object();
  for (const auto& organ : removable_organs) {
    std::vector<int> predicted, truth;
    std::vector<double> voxel_fp;
    for (const auto& s : samples) {
      const int c = s.pred.class_index(organ);
      predicted.push_back(s.pred.count(c) > 0);
      truth.push_back(s.flags.flag(organ));
      if (const auto n = voxel_fp_count(s.pred, s.flags, organ)) voxel_fp.push_back(static_cast<double>(*n));
    }
    const ClassificationMetrics m = classification_metrics(predicted, truth);
    removable[organ] = {{"tp", m.tp},
                        {"fp", m.fp},
                        {"tn", m.tn},
                        {"fn", m.fn},
                        {"fpr", optional_number(m.fpr())},
                        {"f1", optional_number(m.f1)},
                        {"voxel_fp_mean", voxel_fp.empty() ? json(nullptr) : json(mean_of(voxel_fp))}};
  }
  out["removable"] = removable;
  return out;
}

json classifier_report(const std::vector<ExistenceVector>& predicted, const std::vector<ExistenceVector>& truth) {
  if (predicted.size() != truth.size() || truth.empty())
    throw std::invalid_argument("classifier_report: need aligned non-empty lists");
  json out = json::object();
  json organs = json::object();
  std::vector<double> bacc;
  for (const auto& organ : truth.front().organs()) {
    std::vector<int> p, t;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      p.push_back(predicted[i].flag(organ));
      t.push_back(truth[i].flag(organ));
    }
    const auto m = classification_metrics(p, t);
    organs[organ] = {{"tp", m.tp},
                     {"fp", m.fp},
                     {"tn", m.tn},
                     {"fn", m.fn},
                     {"f1", optional_number(m.f1)},
                     {"balanced_accuracy", m.balanced_accuracy},
                     {"degenerate", m.degenerate}};
    bacc.push_back(m.balanced_accuracy);
  }
  out["organs"] = organs;
  out["balanced_accuracy"] = mean_of(bacc);
  return out;
}

json evaluate_model(UNet<float>& model, const Manifest& manifest, const EvalOptions& opts) {
  const NetworkConfig& nc = model.config();
  const auto allowed = supported_modes(nc);
  std::vector<EvalMode> modes = opts.modes.empty() ? allowed : opts.modes;
  for (EvalMode m : modes)
    if (std::find(allowed.begin(), allowed.end(), m) == allowed.end())
      throw std::invalid_argument("evaluation mode '" + to_string(m) + "' needs a model with fusion and classifier");
  const auto records = manifest.split(opts.split);
  if (records.empty()) throw std::invalid_argument("evaluate: split '" + to_string(opts.split) + "' is empty");

  std::map<EvalMode, std::vector<SampleResult>> per_mode;
  std::vector<ExistenceVector> clf_pred, clf_truth;

  for (const SampleRecord* r : records) {
    const Volume vol = zscore_normalize(load_volume(r->volume_path));
    std::optional<LabelMap> gt;
    if (r->labelmap_path) gt = load_labelmap(*r->labelmap_path, manifest.class_names);

    if (nc.classifier_enabled) {
      const Eigen::VectorXd p = classifier_probabilities(model, vol);
      ExistenceVector e = r->existence;
      for (std::size_t o = 0; o < e.size(); ++o)
        e.set(e.organs()[o], p[static_cast<Index>(o)] >= opts.inference.threshold ? 1 : 0);
      clf_pred.push_back(e);
      clf_truth.push_back(r->existence);
    }

    std::optional<Prediction> gt_pred;
    auto gt_mode = [&]() -> const Prediction& {
      if (!gt_pred)
        gt_pred = predict_volume(model, vol, ExistenceSource::ground_truth, r->existence, manifest.class_names,
                                 opts.inference);
      return *gt_pred;
    };
    for (EvalMode m : modes) {
      Prediction pr;
      switch (m) {
        case EvalMode::gt: pr = gt_mode(); break;
        case EvalMode::raw:
          pr = nc.fusion_enabled ? predict_volume(model, vol, ExistenceSource::none, r->existence,
                                                  manifest.class_names, opts.inference)
                                 : gt_mode();
          break;
        case EvalMode::pred:
          pr = predict_volume(model, vol, ExistenceSource::classifier, r->existence, manifest.class_names,
                              opts.inference);
          break;
        case EvalMode::postproc:
          pr = gt_mode();
          pr.labels = post_process(pr.probabilities, r->existence, manifest.class_names);
          break;
      }
      if (opts.dump_dir) {
        const fs::path d = *opts.dump_dir / to_string(m);
        fs::create_directories(d);
        save_labelmap(pr.labels, d / (r->id + "_pred.nii.gz"), vol.spacing);
        if (m != EvalMode::postproc) save_probabilities(pr.probabilities, d / (r->id + "_prob.nii.gz"), vol.spacing);
      }
      per_mode[m].push_back({r->id, r->existence, gt, std::move(pr.labels)});
    }
  }

  json out;
  out["split"] = to_string(opts.split);
  json jm = json::object();
  for (EvalMode m : modes) jm[to_string(m)] = aggregate_metrics(per_mode[m], manifest.class_names, manifest.removable_organs);
  out["modes"] = jm;
  out["classifier"] = nc.classifier_enabled ? classifier_report(clf_pred, clf_truth) : json(nullptr);
  return out;
}

json evaluate_predictions(const fs::path& dir, const Manifest& manifest, Split split, bool with_postproc) {
  const auto records = manifest.split(split);
  if (records.empty()) throw std::invalid_argument("evaluate: split '" + to_string(split) + "' is empty");
  std::vector<SampleResult> raw, post;
  for (const SampleRecord* r : records) {
    const fs::path pred_path = dir / (r->id + "_pred.nii.gz");
    if (!fs::exists(pred_path)) throw FormatError("missing prediction for '" + r->id + "': " + pred_path.string());
    std::optional<LabelMap> gt;
    if (r->labelmap_path) gt = load_labelmap(*r->labelmap_path, manifest.class_names);
    LabelMap pred = load_labelmap(pred_path, manifest.class_names);
    if (gt && !(gt->shape == pred.shape))
      throw FormatError("prediction for '" + r->id + "' has shape " + pred.shape.str() + ", expected " + gt->shape.str());
    if (with_postproc) {
      const fs::path prob_path = dir / (r->id + "_prob.nii.gz");
      if (!fs::exists(prob_path)) throw FormatError("missing probabilities for '" + r->id + "': " + prob_path.string());
      post.push_back({r->id, r->existence, gt,
                      post_process(load_probabilities(prob_path), r->existence, manifest.class_names)});
    }
    raw.push_back({r->id, r->existence, gt, std::move(pred)});
  }
  json out;
  out["split"] = to_string(split);
  out["modes"]["raw"] = aggregate_metrics(raw, manifest.class_names, manifest.removable_organs);
  if (with_postproc) out["modes"]["postproc"] = aggregate_metrics(post, manifest.class_names, manifest.removable_organs);
  out["classifier"] = nullptr;
  return out;
}

std::string config_hash(const json& config) {
  const std::string body = config.dump();
  const std::string blob = "blob " + std::to_string(body.size()) + '\0' + body;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("config_hash: SHA-1 failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

namespace {

std::string fmt(const json& v, int digits = 3) {
  if (v.is_null()) return "n/a";
  if (v.is_number_integer()) return std::to_string(v.get<long>());
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v.get<double>();
  return s.str();
}

}  // namespace

std::string markdown_report(const json& results) {
  std::ostringstream md;
  md << "# Results\n\n";
  if (results.contains("variant")) md << "Variant: `" << results["variant"].get<std::string>() << "`  \n";
  if (results.contains("config_hash")) md << "Config hash: `" << results["config_hash"].get<std::string>() << "`  \n";
  md << "Split: " << results.value("split", std::string("test")) << "\n\n";

  const json& modes = results.at("modes");
  std::vector<std::string> organs, removable;
  for (const auto& [name, m] : modes.items()) {
    for (const auto& [organ, _] : m.at("dice").items())
      if (std::find(organs.begin(), organs.end(), organ) == organs.end()) organs.push_back(organ);
    for (const auto& [organ, _] : m.at("removable").items())
      if (std::find(removable.begin(), removable.end(), organ) == removable.end()) removable.push_back(organ);
  }
  md << "## Segmentation\n\n| mode | mean Dice | mean Dice (present) |";
  for (const auto& o : organs) md << ' ' << o << " |";
  md << "\n|---|---|---|";
  for (std::size_t i = 0; i < organs.size(); ++i) md << "---|";
  md << '\n';
  for (const auto& [name, m] : modes.items()) {
    md << "| " << name << " | " << fmt(m["mean_dice"]) << " | " << fmt(m["mean_dice_present"]) << " |";
    for (const auto& o : organs) {
      if (m["dice"].contains(o)) md << ' ' << fmt(m["dice"][o]["mean"]) << " ± " << fmt(m["dice"][o]["std"]) << " |";
      else md << " n/a |";
    }
    md << '\n';
  }
  for (const auto& organ : removable) {
    md << "\n## Removed " << organ << "\n\n| mode | FPR | F1 | FP | TN | TP | FN | voxel FP |\n|---|---|---|---|---|---|---|---|\n";
    for (const auto& [name, m] : modes.items()) {
      const json& r = m["removable"][organ];
      md << "| " << name << " | " << fmt(r["fpr"]) << " | " << fmt(r["f1"]) << " | " << fmt(r["fp"]) << " | "
         << fmt(r["tn"]) << " | " << fmt(r["tp"]) << " | " << fmt(r["fn"]) << " | " << fmt(r["voxel_fp_mean"], 1)
         << " |\n";
    }
  }
  if (results.contains("classifier") && !results["classifier"].is_null()) {
    const json& c = results["classifier"];
    md << "\n## Classifier\n\nBalanced accuracy: " << fmt(c["balanced_accuracy"]) << "\n\n"
       << "| organ | BAcc | F1 | FP | TN | TP | FN |\n|---|---|---|---|---|---|---|\n";
    for (const auto& [organ, r] : c["organs"].items())
      md << "| " << organ << " | " << fmt(r["balanced_accuracy"]) << " | " << fmt(r["f1"]) << " | " << fmt(r["fp"])
         << " | " << fmt(r["tn"]) << " | " << fmt(r["tp"]) << " | " << fmt(r["fn"]) << " |\n";
  }
  return md.str();
}

void write_report(const json& metrics, const json& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  json results = metrics;
  results["config"] = config;
  results["config_hash"] = config_hash(config);
  {
    std::ofstream f(out_dir / "results.json");
    if (!f) throw std::runtime_error("cannot write " + (out_dir / "results.json").string());
    f << results.dump(2) << '\n';
  }
  std::ofstream md(out_dir / "results.md");
  if (!md) throw std::runtime_error("cannot write " + (out_dir / "results.md").string());
  md << markdown_report(results);
}

}  // namespace halos
