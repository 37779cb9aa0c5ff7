#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace halos::nifti {

// NIfTI-1 datatype codes used here.
enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

struct Image {
  int ndim = 0;
  std::array<std::int64_t, 7> dims{};  // dims[0] = x (fastest)
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  std::int16_t datatype = kFloat32;
  std::vector<double> values;  // scaled by scl_slope/scl_inter when present

  std::int64_t count() const;
};

Image read(const std::filesystem::path& path);

/// Writes a single-file NIfTI-1 image. The output is gzip-compressed when the
/// path ends in ".gz". `values` are converted to `datatype` (no scaling).
void write(const std::filesystem::path& path, const Image& image);

}  // namespace halos::nifti
