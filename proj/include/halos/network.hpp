#pragma once

#include "halos/layers.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace halos {

enum class ClassifierSite { encoder, decoder };

struct NetworkConfig {
  Index in_channels = 1;
  Index num_classes = 7;
  Index base_channels = 32;
  int num_levels = 5;  // stride-2 downsamplings; the bottleneck sits at stage num_levels
  Index max_channels = 320;
  NormType norm = NormType::instance;
  bool classifier_enabled = true;
  ClassifierSite classifier_site = ClassifierSite::encoder;
  int classifier_block = 4;  // 1-based encoder block the classifier reads from
  bool fusion_enabled = true;
  Index fusion_hidden_reduction = 4;
  bool deep_supervision = true;
  Index num_removable_organs = 1;
  std::uint64_t seed = 0;

  void validate() const;
  /// Channel count of encoder stage s (s == num_levels is the bottleneck).
  Index stage_channels(int stage) const;
  /// Decoder stages with a segmentation head, full resolution first.
  int supervised_scales() const;
};

nlohmann::json to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);
std::string to_string(NormType n);
NormType norm_from_string(const std::string& s);

/// Scales and shifts each channel: out[n, c] = alpha(n, c) * f[n, c] + beta(n, c).
template <typename Scalar>
Tensor5<Scalar> affine_channels(const Tensor5<Scalar>& f, const Matrix<Scalar>& alpha,
                                const Matrix<Scalar>& beta) {
  if (alpha.rows() != f.batch() || alpha.cols() != f.channels() || beta.rows() != alpha.rows() ||
      beta.cols() != alpha.cols())
    throw std::invalid_argument("affine_channels: alpha/beta must be batch x channels");
  Tensor5<Scalar> out(f.shape());
  for (Index n = 0; n < f.batch(); ++n)
    for (Index c = 0; c < f.channels(); ++c)
      out.channel(n, c) = alpha(n, c) * f.channel(n, c) + beta(n, c);
  return out;
}

/// Dynamic affine feature-map transform. A two-layer perceptron reads the
/// globally pooled feature map concatenated with the organ-existence input and
/// predicts one (scale, offset) pair per channel. The last layer starts at zero
/// weights with bias (1, ..., 1, 0, ..., 0), so a fresh module is the identity.
template <typename Scalar>
class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(Index channels, Index num_organs, Index reduction, const std::string& name)
      : channels_(channels),
        organs_(num_organs),
        hidden_(std::max<Index>(1, channels / std::max<Index>(1, reduction))),
        fc1_(channels + num_organs, hidden_, name + ".fc1"),
        fc2_(hidden_, 2 * channels, name + ".fc2") {
    fc2_.bias.value.head(channels).setOnes();
  }

  void init(std::uint64_t seed) { fc1_.init(seed); }

  Index channels() const { return channels_; }
  Index hidden_width() const { return hidden_; }
  Index output_width() const { return fc2_.out_features(); }

  /// Per-item (alpha, beta) for feature map `f` and existence input (batch x organs).
  std::pair<Matrix<Scalar>, Matrix<Scalar>> predict_affine(const Tensor5<Scalar>& f,
                                                           const Matrix<Scalar>& existence,
                                                           bool cache) {
    if (f.channels() != channels_)
      throw std::invalid_argument("FusionModule: expected " + std::to_string(channels_) +
                                  " channels, got " + std::to_string(f.channels()));
    if (existence.rows() != f.batch() || existence.cols() != organs_)
      throw std::invalid_argument("FusionModule: existence input must be batch x " +
                                  std::to_string(organs_));
    Matrix<Scalar> z(f.batch(), channels_ + organs_);
    z << global_average_pool(f), existence;
    Matrix<Scalar> h = fc1_.forward(z, cache);
    if (cache) hidden_pre_ = h;
    h = (h.array() > Scalar(0)).select(h, h * Scalar(kLeakySlope));
    const Matrix<Scalar> out = fc2_.forward(h, cache);
    return {out.leftCols(channels_), out.rightCols(channels_)};
  }

  Tensor5<Scalar> forward(const Tensor5<Scalar>& f, const Matrix<Scalar>& existence, bool cache) {
    auto [alpha, beta] = predict_affine(f, existence, cache);
    Tensor5<Scalar> out = affine_channels(f, alpha, beta);
    if (cache) {
      input_ = f;
      alpha_ = std::move(alpha);
    }
    return out;
  }

  Tensor5<Scalar> backward(const Tensor5<Scalar>& g) {
    const Index B = g.batch();
    Matrix<Scalar> dout(B, 2 * channels_);
    Tensor5<Scalar> gx(g.shape());
    for (Index n = 0; n < B; ++n)
      for (Index c = 0; c < channels_; ++c) {
        const auto gc = g.channel(n, c);
        dout(n, c) = (gc * input_.channel(n, c)).sum();
        dout(n, channels_ + c) = gc.sum();
        gx.channel(n, c) = alpha_(n, c) * gc;
      }
    Matrix<Scalar> dh = fc2_.backward(dout);
    dh = (hidden_pre_.array() > Scalar(0)).select(dh, dh * Scalar(kLeakySlope));
    const Matrix<Scalar> dz = fc1_.backward(dh);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(g.grid().voxels());
    for (Index n = 0; n < B; ++n)
      for (Index c = 0; c < channels_; ++c) gx.channel(n, c) += dz(n, c) * inv;
    return gx;
  }

  /// Pins the output to constant (alpha, beta) regardless of input.
  void force_affine(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& alpha,
                    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& beta) {
    if (alpha.size() != channels_ || beta.size() != channels_)
      throw std::invalid_argument("force_affine: expected " + std::to_string(channels_) + " values");
    fc2_.weight.value.setZero();
    fc2_.bias.value << alpha.array(), beta.array();
  }

  template <typename F>
  void visit_parameters(F&& f) {
    f(fc1_.weight);
    f(fc1_.bias);
    f(fc2_.weight);
    f(fc2_.bias);
  }

 private:
  Index channels_ = 0;
  Index organs_ = 0;
  Index hidden_ = 1;
  Linear<Scalar> fc1_;
  Linear<Scalar> fc2_;
  Tensor5<Scalar> input_;
  Matrix<Scalar> alpha_;
  Matrix<Scalar> hidden_pre_;
};

/// Applies `module` to `f` conditioned on `existence` (batch x organs).
template <typename Scalar>
Tensor5<Scalar> daft_transform(const Tensor5<Scalar>& f, const Matrix<Scalar>& existence,
                               FusionModule<Scalar>& module) {
  return module.forward(f, existence, false);
}

template <typename Scalar>
struct ModelOutput {
  Tensor5<Scalar> logits;                               // full resolution
  std::vector<Tensor5<Scalar>> deep_supervision_logits;  // [0] is full resolution
  Matrix<Scalar> existence_logits;                      // batch x organs
};

/// Loss gradients with respect to the model outputs; empty entries contribute nothing.
template <typename Scalar>
struct OutputGradient {
  std::vector<Tensor5<Scalar>> deep_supervision;
  Matrix<Scalar> existence;
};

struct ForwardOptions {
  bool segmentation = true;
  bool classification = true;
};

/// 3D U-Net with optional organ-existence classifier and DAFT fusion at the
/// bottleneck and before every decoder block.
template <typename Scalar>
class UNet {
 public:
  explicit UNet(const NetworkConfig& cfg);

  const NetworkConfig& config() const { return cfg_; }
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  /// `existence` (batch x organs) is required iff fusion is enabled and the
  /// segmentation path runs.
  ModelOutput<Scalar> forward(const Tensor5<Scalar>& x, const Matrix<Scalar>* existence = nullptr,
                              ForwardOptions opts = {});

  /// Accumulates parameter gradients for the most recent training-mode forward.
  void backward(const OutputGradient<Scalar>& g);

  void zero_grad();

  std::vector<Parameter<Scalar>*> parameters();
  std::vector<Buffer<Scalar>*> buffers();
  Parameter<Scalar>& parameter(const std::string& name);

  int fusion_site_count() const { return static_cast<int>(fusion_.size()); }
  FusionModule<Scalar>& fusion_site(int i) { return fusion_.at(static_cast<std::size_t>(i)); }
  /// Fusion module at decoder stage s; s == num_levels is the bottleneck.
  FusionModule<Scalar>& fusion_at_stage(int s);

  /// Spatial grid the classifier read in the last forward that ran it.
  const GridShape& classifier_input_grid() const { return clf_input_grid_; }

  /// Required divisor of every spatial input dimension.
  Index size_divisor() const { return Index(1) << cfg_.num_levels; }

 private:
  int classifier_stage() const { return cfg_.classifier_block - 1; }

  NetworkConfig cfg_;
  bool training_ = false;
  std::vector<ConvBlock<Scalar>> encoder_;
  std::vector<ConvTranspose3d<Scalar>> up_;
  std::vector<ConvBlock<Scalar>> decoder_;
  std::vector<Conv3d<Scalar>> heads_;
  std::vector<FusionModule<Scalar>> fusion_;  // index s for decoder stage s, num_levels for bottleneck
  std::optional<ConvBlock<Scalar>> clf_block_;
  std::optional<Linear<Scalar>> clf_fc_;

  // Bookkeeping of the last forward, for backward.
  ForwardOptions last_;
  bool need_decoder_ = false;
  int top_stage_ = -1;
  std::vector<Shape5> enc_shapes_;
  Shape5 clf_block_out_;
  GridShape clf_input_grid_;
};

extern template class UNet<float>;
extern template class UNet<double>;

template <typename Scalar>
UNet<Scalar> build_model(const NetworkConfig& cfg) {
  return UNet<Scalar>(cfg);
}

enum class BaselineKind { plain, decoder_classifier };
BaselineKind baseline_from_string(const std::string& s);

/// Same backbone as `base` with fusion and classifier removed (plain) or with
/// the classifier moved to the last decoder block and no fusion.
NetworkConfig baseline_config(const NetworkConfig& base, BaselineKind kind);

template <typename Scalar>
UNet<Scalar> build_baseline(const NetworkConfig& base, BaselineKind kind) {
  return UNet<Scalar>(baseline_config(base, kind));
}

/// Per-organ existence probabilities (sigmoid of the classifier logits).
template <typename Scalar>
Matrix<Scalar> classify(UNet<Scalar>& model, const Tensor5<Scalar>& x) {
  if (!model.config().classifier_enabled)
    throw std::invalid_argument("classify: model has no classifier");
  const auto out = model.forward(x, nullptr, {.segmentation = false, .classification = true});
  return (Scalar(1) / (Scalar(1) + (-out.existence_logits.array()).exp())).matrix();
}

// ---------------------------------------------------------------------------
// Weight archives. Layout (little endian):
//   8 bytes  magic "HALOSCK1"
//   8 bytes  uint64 length L of the JSON header
//   L bytes  JSON: {"meta": {...}, "tensors": [{"name", "dtype": "f4"|"f8",
//            "size", "offset"}]}; offsets are relative to the data section
//   data     raw tensor payloads in header order
// ---------------------------------------------------------------------------

struct ArchiveTensor {
  std::string dtype = "f4";
  Eigen::ArrayXd values;
};

struct WeightArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ArchiveTensor> tensors;
};

void write_archive(const std::filesystem::path& path, const WeightArchive& archive);
WeightArchive read_archive(const std::filesystem::path& path);

/// Adds parameters and buffers under `prefix` plus meta["network_config"].
template <typename Scalar>
void export_model(UNet<Scalar>& model, WeightArchive& archive, const std::string& prefix = "model/");

/// Loads parameters and buffers; every model tensor must be present with matching size.
template <typename Scalar>
void import_model(UNet<Scalar>& model, const WeightArchive& archive, const std::string& prefix = "model/");

template <typename Scalar>
UNet<Scalar> model_from_archive(const WeightArchive& archive, const std::string& prefix = "model/") {
  UNet<Scalar> model(network_config_from_json(archive.meta.at("network_config")));
  import_model(model, archive, prefix);
  return model;
}

}  // namespace halos
