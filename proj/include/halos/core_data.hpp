#pragma once

#include "halos/tensor.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace halos {

/// Raised for malformed inputs: bad files, manifests that violate their schema,
/// labels inconsistent with existence flags.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Default class list; index 0 is always background.
const std::vector<std::string>& default_class_names();

/// MR intensity grid. `spacing` follows the NIfTI pixdim order (x, y, z), i.e.
/// (width, height, depth) spacing in mm.
struct Volume {
  GridShape shape;
  Eigen::ArrayXf data;
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  std::string id;

  Volume() = default;
  Volume(GridShape s, std::string subject_id = {});

  float& at(Index z, Index y, Index x) { return data[(z * shape.height + y) * shape.width + x]; }
  float at(Index z, Index y, Index x) const {
    return data[(z * shape.height + y) * shape.width + x];
  }
};

/// Voxel class map with values in [0, class_names.size()).
struct LabelMap {
  GridShape shape;
  Eigen::ArrayXi data;
  std::vector<std::string> class_names;

  LabelMap() = default;
  LabelMap(GridShape s, std::vector<std::string> names);

  int num_classes() const { return static_cast<int>(class_names.size()); }
  int class_index(const std::string& name) const;
  Index count(int label) const { return (data == label).count(); }

  int& at(Index z, Index y, Index x) { return data[(z * shape.height + y) * shape.width + x]; }
  int at(Index z, Index y, Index x) const {
    return data[(z * shape.height + y) * shape.width + x];
  }
};

/// Image-level presence flags for the configured removable organs, in order.
class ExistenceVector {
 public:
  ExistenceVector() = default;
  ExistenceVector(std::vector<std::string> organs, std::vector<int> flags);

  static ExistenceVector all_present(std::vector<std::string> organs);

  const std::vector<std::string>& organs() const { return organs_; }
  const std::vector<int>& flags() const { return flags_; }
  std::size_t size() const { return organs_.size(); }

  int flag(const std::string& organ) const;
  void set(const std::string& organ, int value);
  bool all_present() const;

  template <typename Scalar>
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> as_vector() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(static_cast<Index>(flags_.size()));
    for (std::size_t i = 0; i < flags_.size(); ++i) v[static_cast<Index>(i)] = Scalar(flags_[i]);
    return v;
  }

  bool operator==(const ExistenceVector&) const = default;

 private:
  std::vector<std::string> organs_;
  std::vector<int> flags_;
};

/// Flags derived from voxel counts: organ present iff at least one voxel.
ExistenceVector derive_existence(const LabelMap& labels, const std::vector<std::string>& organs);

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SampleRecord {
  std::string id;
  std::filesystem::path volume_path;
  std::optional<std::filesystem::path> labelmap_path;
  ExistenceVector existence;
  Split split = Split::train;

  bool voxel_labeled() const { return labelmap_path.has_value(); }
};

struct Manifest {
  std::vector<SampleRecord> records;
  std::vector<std::string> removable_organs;
  std::vector<std::string> class_names;

  std::vector<const SampleRecord*> split(Split s) const;
};

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

LabelMap load_labelmap(const std::filesystem::path& path, std::vector<std::string> class_names);
void save_labelmap(const LabelMap& l, const std::filesystem::path& path,
                   const Eigen::Vector3d& spacing = Eigen::Vector3d::Ones());

/// Per-class probability maps, written as a 4D NIfTI (x, y, z, class).
void save_probabilities(const Tensor5<float>& probs, const std::filesystem::path& path,
                        const Eigen::Vector3d& spacing = Eigen::Vector3d::Ones());
Tensor5<float> load_probabilities(const std::filesystem::path& path);

/// Parses and eagerly validates a manifest. Relative paths resolve against the
/// manifest's directory. With `check_labels`, every referenced label map is
/// loaded and its organ voxel counts compared against the existence flags.
Manifest load_manifest(const std::filesystem::path& path, bool check_labels = true);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// One channel per class; channel c is the indicator of class c.
template <typename Scalar>
Tensor5<Scalar> one_hot(const LabelMap& labels, int num_classes) {
  Tensor5<Scalar> out(1, num_classes, labels.shape);
  auto item = out.item(0);
  for (Index i = 0; i < labels.data.size(); ++i) {
    const int v = labels.data[i];
    if (v < 0 || v >= num_classes) {
      throw std::invalid_argument("one_hot: voxel " + std::to_string(i) + " has label " +
                                  std::to_string(v) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
    item(v, i) = Scalar(1);
  }
  return out;
}

/// Stacks one-hot encodings of several label maps into a batch.
template <typename Scalar>
Tensor5<Scalar> one_hot_batch(const std::vector<LabelMap>& labels, int num_classes) {
  if (labels.empty()) throw std::invalid_argument("one_hot_batch: empty batch");
  Tensor5<Scalar> out(static_cast<Index>(labels.size()), num_classes, labels.front().shape);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (!(labels[n].shape == labels.front().shape))
      throw std::invalid_argument("one_hot_batch: label maps differ in shape");
    out.item(static_cast<Index>(n)) = one_hot<Scalar>(labels[n], num_classes).item(0);
  }
  return out;
}

/// Lowest-index argmax over channels of batch item `b`.
LabelMap argmax_labels(const Tensor5<float>& scores, Index b, std::vector<std::string> class_names);

/// Z-score normalization using statistics of the nonzero voxels. Volumes with no
/// nonzero voxels are returned unchanged.
Volume zscore_normalize(const Volume& v);

}  // namespace halos
