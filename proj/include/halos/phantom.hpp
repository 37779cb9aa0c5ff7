#pragma once

#include "halos/core_data.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace halos {

/// Closed interval sampled uniformly.
struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Geometry and appearance of one ellipsoidal organ. Centers and semi-axes are
/// fractions of the grid edge, ordered (z, y, x).
struct OrganSpec {
  std::string name;
  std::array<Range, 3> center;
  std::array<Range, 3> semi_axes;
  double intensity_mean = 0.0;
  double intensity_std = 0.0;
};

struct PhantomConfig {
  int grid_size = 64;
  std::vector<OrganSpec> organ_specs;  // one per foreground class, in class order
  std::vector<std::string> removable_organs{"gallbladder"};
  std::map<std::string, double> resection_probability{{"gallbladder", 0.3}};
  double noise_std = 0.1;
  double tissue_intensity = 1.0;  // body tissue; also fills resected organs
  double voxel_spacing_mm = 1.5;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::vector<std::string> class_names() const;
};

/// Liver, spleen, kidneys, pancreas and gallbladder laid out so organs stay inside
/// the grid and apart from each other for every draw within the ranges.
std::vector<OrganSpec> default_organ_specs();
PhantomConfig default_phantom_config();

struct Phantom {
  Volume volume;
  LabelMap labels;
  ExistenceVector existence;
};

/// Renders phantom `index`; the result depends only on (cfg, index).
Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t index);

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

/// Writes `images/<id>.nii.gz`, `labels/<id>.nii.gz` (voxel-labeled records only)
/// and `manifest.json` under `out_dir`. Per split, ceil(fraction * n) records keep
/// their label maps.
Manifest generate_dataset(const PhantomConfig& cfg, const SplitCounts& counts,
                          double voxel_labeled_fraction, const std::filesystem::path& out_dir);

/// Seed for item `index` of a stream seeded with `seed` (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace halos
