#pragma once

#include "halos/core_data.hpp"
#include "halos/evaluator.hpp"
#include "halos/losses.hpp"
#include "halos/network.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace halos {

enum class FusionTrainInput { ground_truth };

struct TrainConfig {
  double alpha = 0.5;  // weight of the segmentation loss
  int seg_batch_size = 2;
  int clf_batch_size = 2;
  int epochs = 50;
  int steps_per_epoch = 0;  // 0: one pass over the voxel-labelled training records
  double lr_seg = 1e-2;
  double lr_clf = 1e-2;
  double weight_decay = 3e-5;
  double momentum = 0.99;
  double poly_exponent = 0.9;
  double grad_clip = 12.0;  // global L2 norm; 0 disables
  std::array<Index, 3> patch_size{32, 32, 32};
  bool oversample_missing = false;
  FusionTrainInput fusion_train_input = FusionTrainInput::ground_truth;
  DiceConfig dice;
  bool dynamic_ce_weights = true;
  bool augment = true;
  std::vector<int> mirror_axes{0, 1, 2};  // grid axes eligible for random flips
  double foreground_fraction = 1.0 / 3.0;
  std::uint64_t seed = 0;
  NormType norm = NormType::instance;
  InferenceConfig validation;  // patch is overwritten with patch_size

  GridShape patch() const { return {patch_size[0], patch_size[1], patch_size[2]}; }
  /// Throws std::invalid_argument for the first violated constraint.
  void validate(const NetworkConfig& net) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------- sampling

/// Index stream over training records. Without oversampling every record
/// appears once per pass in a fresh random order; with it, records lacking a
/// removable organ are drawn with total probability 1/2 (uniform within each
/// group) whenever both groups are non-empty.
class Sampler {
 public:
  Sampler(std::vector<bool> missing, bool oversample, std::uint64_t seed);

  std::size_t next();
  std::vector<std::size_t> next_batch(std::size_t n);
  std::size_t size() const { return missing_.size(); }

 private:
  std::vector<bool> missing_;
  std::vector<std::size_t> present_idx_, missing_idx_;
  bool oversample_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// True for records where at least one removable organ is absent.
Sampler make_sampler(const std::vector<const SampleRecord*>& records, bool oversample_missing, std::uint64_t seed);

// ------------------------------------------------------------------ patches

struct Patch {
  Tensor5<float> image;  // 1 x 1 x patch
  LabelMap labels;
};

struct AugmentConfig {
  bool enabled = true;
  double flip_probability = 0.5;   // per axis
  std::array<bool, 3> mirror{true, true, true};
  double affine_probability = 0.2;
  double max_rotation_deg = 15.0;  // per axis
  double min_scale = 0.85;
  double max_scale = 1.15;
  double noise_probability = 0.15;
  double max_noise_std = 0.1;
};

/// Random crop of `patch` voxels. With probability `foreground_fraction` the
/// crop is centred on a voxel of a randomly chosen foreground class present in
/// the map; otherwise the origin is uniform. Volumes smaller than the patch are
/// zero-padded (centred) first. `augment` adds flips, a small rotation/scale
/// about the crop centre (trilinear image, nearest labels) and Gaussian noise.
Patch extract_patch(const Volume& volume, const LabelMap& labels, const GridShape& patch, std::mt19937_64& rng,
                    double foreground_fraction, const AugmentConfig& augment = {.enabled = false});

// --------------------------------------------------------------- optimiser

/// SGD with Nesterov momentum and decoupled learning rates for the
/// segmentation and classifier parameter groups. Weight decay is added to the
/// gradient (L2).
class Optimizer {
 public:
  Optimizer(double momentum, double weight_decay, double grad_clip);

  /// Applies one update; returns the gradient norm before clipping.
  double step(const std::vector<Parameter<float>*>& params, double lr_seg, double lr_clf);

  void save(WeightArchive& archive) const;
  void load(const WeightArchive& archive);

 private:
  double momentum_, weight_decay_, grad_clip_;
  std::map<std::string, Eigen::ArrayXf> velocity_;
};

/// lr0 * (1 - epoch / epochs)^exponent
double poly_lr(double lr0, int epoch, int epochs, double exponent);

// ------------------------------------------------------------------ training

struct StepLog {
  int epoch = 0;
  int step = 0;
  double seg_loss = 0.0;
  double clf_loss = 0.0;
  double total_loss = 0.0;
  double alpha = 0.0;  // effective weight (1 when the classifier is disabled)
};

struct EpochLog {
  int epoch = 0;
  double lr_seg = 0.0;
  double lr_clf = 0.0;
  double seg_loss = 0.0;
  double clf_loss = 0.0;
  double total_loss = 0.0;
  double val_mean_dice = 0.0;
  std::map<std::string, double> val_dice;
  std::optional<double> val_balanced_accuracy;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  int epochs_completed = 0;
  int best_epoch = -1;
  double best_val_mean_dice = -1.0;
  std::vector<EpochLog> history;
  std::vector<StepLog> steps;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;  // progress reporting
  std::function<void(int epoch, int step, UNet<float>&)> after_step;  // test instrumentation
};

/// Mixed-supervision training. Each step draws one voxel-labelled batch of
/// patches (fusion fed ground-truth flags) and, when the classifier is enabled,
/// one batch of whole image-label-only volumes, and applies a single update on
/// alpha * L_seg + (1 - alpha) * L_clf. Writes last.ckpt, best.ckpt (highest
/// validation mean foreground Dice), train_log.csv and steps.csv to out_dir.
/// With `resume`, continues from out_dir/last.ckpt when present.
TrainResult train(const Manifest& manifest, NetworkConfig net_cfg, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, bool resume = false, const TrainHooks& hooks = {});

/// Loads a checkpoint written by train().
UNet<float> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace halos
