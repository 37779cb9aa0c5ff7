#pragma once

#include "halos/core_data.hpp"
#include "halos/network.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace halos {

// ---------------------------------------------------------------- metrics

/// Hard Dice for one organ: 1 when both maps lack the organ, 0 when only the
/// prediction has it.
double dice_score(const LabelMap& pred, const LabelMap& gt, const std::string& organ);

/// Fraction of organ-absent samples whose prediction contains the organ;
/// nullopt when no sample lacks the organ.
std::optional<double> sample_fpr(const std::vector<LabelMap>& preds,
                                 const std::vector<ExistenceVector>& flags, const std::string& organ);

/// Confusion counts with "positive" = organ present.
struct ClassificationMetrics {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;
  std::optional<double> f1;  // undefined without any positive prediction or truth
  double balanced_accuracy = 0.0;
  bool degenerate = false;  // truth holds a single class; BAcc is then that class's recall

  std::optional<double> fpr() const {
    if (fp + tn == 0) return std::nullopt;
    return static_cast<double>(fp) / static_cast<double>(fp + tn);
  }
};

ClassificationMetrics classification_metrics(const std::vector<int>& predicted_present,
                                             const std::vector<int>& truly_present);

/// Zeroes the probability of every absent organ, then takes the argmax, so
/// voxels claimed by a removed organ go to the runner-up class.
LabelMap post_process(const Tensor5<float>& probs, const ExistenceVector& flags,
                      const std::vector<std::string>& class_names);

/// Voxels labelled as `organ`; nullopt when the flags say the organ is present.
std::optional<Index> voxel_fp_count(const LabelMap& pred, const ExistenceVector& flags,
                                    const std::string& organ);

// -------------------------------------------------------------- inference

enum class ExistenceSource { ground_truth, classifier, none };

struct InferenceConfig {
  GridShape patch{32, 32, 32};
  double overlap = 0.5;
  double sigma_scale = 1.0 / 8.0;  // Gaussian sigma as a fraction of the patch edge
  double threshold = 0.5;          // classifier probability counted as "present"
  Index window_batch = 2;
};

/// Gaussian blending weights over a patch, peak 1, strictly positive.
Eigen::ArrayXf gaussian_importance(const GridShape& patch, double sigma_scale);

/// Window origins along one axis: evenly spaced, first at 0, last at size - patch.
std::vector<Index> window_starts(Index size, Index patch, double overlap);

/// Sliding-window class probabilities (1 x classes x grid). `existence` is the
/// fusion input (1 x organs) or nullptr for fusion-free models.
Tensor5<float> sliding_window_probabilities(UNet<float>& model, const Volume& volume,
                                            const Matrix<float>* existence, const InferenceConfig& cfg);

/// Full-volume classifier probabilities, one per removable organ.
Eigen::VectorXd classifier_probabilities(UNet<float>& model, const Volume& volume);

struct Prediction {
  Tensor5<float> probabilities;
  LabelMap labels;
  std::optional<ExistenceVector> fusion_input;
};

/// Segments a normalised volume. `flags` supplies organ names and, in
/// ground-truth mode, the fusion input; in classifier mode the input is the
/// thresholded classifier output.
Prediction predict_volume(UNet<float>& model, const Volume& volume, ExistenceSource source,
                          const ExistenceVector& flags, const std::vector<std::string>& class_names,
                          const InferenceConfig& cfg);

// ------------------------------------------------------------- evaluation

/// raw: no existence information (fusion input all-present); gt / pred: fusion
/// fed ground-truth / predicted flags; postproc: gt-mode probabilities passed
/// through post_process with ground-truth flags.
enum class EvalMode { raw, gt, pred, postproc };
std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

struct EvalOptions {
  std::vector<EvalMode> modes;  // empty: every mode the model supports
  Split split = Split::test;
  InferenceConfig inference;
  std::optional<std::filesystem::path> dump_dir;  // writes <id>_pred / <id>_prob per mode
};

/// Modes applicable to a model: pred needs fusion and a classifier.
std::vector<EvalMode> supported_modes(const NetworkConfig& cfg);

/// Per-sample outcome used by the aggregation step.
struct SampleResult {
  std::string id;
  ExistenceVector flags;
  std::optional<LabelMap> gt;  // only for voxel-labelled records
  LabelMap pred;
};

/// Aggregates per-organ Dice (mean/std over labelled samples), Dice restricted
/// to samples where the organ is present, and per removable organ the
/// sample-level confusion counts, FPR, F1 and mean voxel FP count.
nlohmann::json aggregate_metrics(const std::vector<SampleResult>& samples,
                                 const std::vector<std::string>& class_names,
                                 const std::vector<std::string>& removable_organs);

nlohmann::json classifier_report(const std::vector<ExistenceVector>& predicted,
                                 const std::vector<ExistenceVector>& truth);

/// Runs the model over one split and reports every requested mode.
nlohmann::json evaluate_model(UNet<float>& model, const Manifest& manifest, const EvalOptions& opts);

/// Scores a directory of `<id>_pred.nii.gz` label maps (raw mode) and, where
/// `<id>_prob.nii.gz` exists for every sample, their post-processed version.
nlohmann::json evaluate_predictions(const std::filesystem::path& dir, const Manifest& manifest,
                                    Split split, bool with_postproc);

/// Writes results.json (pretty, key-sorted, with `config` and its hash) and a
/// markdown table results.md.
void write_report(const nlohmann::json& metrics, const nlohmann::json& config,
                  const std::filesystem::path& out_dir);

/// Git blob-style SHA-1 of the compact JSON serialisation.
std::string config_hash(const nlohmann::json& config);

std::string markdown_report(const nlohmann::json& results);

}  // namespace halos
