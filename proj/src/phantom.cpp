#include "halos/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace halos {

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<OrganSpec> default_organ_specs() {
  // (z, y, x) fractions of the grid edge; y grows posterior, x toward the
  // patient's left.
  return {
      {"liver", {{{0.49, 0.53}, {0.43, 0.47}, {0.30, 0.34}}},
       {{{0.15, 0.17}, {0.12, 0.14}, {0.12, 0.14}}}, 2.0, 0.05},
      {"spleen", {{{0.48, 0.52}, {0.48, 0.52}, {0.74, 0.77}}},
       {{{0.09, 0.11}, {0.07, 0.09}, {0.06, 0.07}}}, 3.0, 0.05},
      {"r_kidney", {{{0.42, 0.46}, {0.71, 0.74}, {0.30, 0.34}}},
       {{{0.08, 0.10}, {0.05, 0.06}, {0.05, 0.06}}}, 4.0, 0.05},
      {"l_kidney", {{{0.42, 0.46}, {0.71, 0.74}, {0.66, 0.70}}},
       {{{0.08, 0.10}, {0.05, 0.06}, {0.05, 0.06}}}, 5.0, 0.05},
      {"pancreas", {{{0.42, 0.45}, {0.58, 0.60}, {0.56, 0.59}}},
       {{{0.035, 0.045}, {0.035, 0.045}, {0.10, 0.12}}}, 6.0, 0.05},
      // Center is not sampled: the gallbladder is attached to the liver surface.
      {"gallbladder", {{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}},
       {{{0.055, 0.07}, {0.05, 0.065}, {0.05, 0.065}}}, 7.0, 0.05},
  };
}

PhantomConfig default_phantom_config() {
  PhantomConfig cfg;
  cfg.organ_specs = default_organ_specs();
  return cfg;
}

std::vector<std::string> PhantomConfig::class_names() const {
  std::vector<std::string> names{"background"};
  for (const auto& s : organ_specs) names.push_back(s.name);
  return names;
}

void PhantomConfig::validate() const {
  if (grid_size < 16) throw std::invalid_argument("phantom: grid_size must be >= 16");
  if (organ_specs.empty()) throw std::invalid_argument("phantom: organ_specs is empty");
  if (noise_std < 0) throw std::invalid_argument("phantom: noise_std must be >= 0");
  if (voxel_spacing_mm <= 0) throw std::invalid_argument("phantom: voxel_spacing_mm must be > 0");
  const auto names = class_names();
  for (const auto& organ : removable_organs) {
    if (std::find(names.begin() + 1, names.end(), organ) == names.end())
      throw std::invalid_argument("phantom: removable organ '" + organ + "' has no organ spec");
  }
  for (const auto& [organ, p] : resection_probability) {
    if (std::find(removable_organs.begin(), removable_organs.end(), organ) == removable_organs.end())
      throw std::invalid_argument("phantom: resection probability given for non-removable organ '" +
                                  organ + "'");
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("phantom: resection probability for '" + organ +
                                  "' must lie in [0, 1]");
  }
  for (const auto& s : organ_specs) {
    for (int a = 0; a < 3; ++a) {
      const auto& c = s.center[static_cast<std::size_t>(a)];
      const auto& r = s.semi_axes[static_cast<std::size_t>(a)];
      if (c.lo > c.hi || r.lo > r.hi || r.lo <= 0)
        throw std::invalid_argument("phantom: invalid ranges for organ '" + s.name + "'");
      if (s.name != "gallbladder" && (c.lo - r.hi < 0.02 || c.hi + r.hi > 0.98))
        throw std::invalid_argument("phantom: organ '" + s.name + "' may leave the grid");
    }
    if (std::abs(s.intensity_mean - tissue_intensity) < 3.0 * noise_std)
      throw std::invalid_argument("phantom: organ '" + s.name +
                                  "' intensity is within 3 noise_std of tissue");
  }
}

namespace {

struct Ellipsoid {
  Eigen::Vector3d center;  // voxel units, (z, y, x)
  Eigen::Vector3d semi;

  bool contains(const Eigen::Vector3d& p) const {
    return ((p - center).array() / semi.array()).square().sum() <= 1.0;
  }
  /// Distance from the center to the surface along unit direction u.
  double extent_along(const Eigen::Vector3d& u) const {
    return 1.0 / std::sqrt((u.array() / semi.array()).square().sum());
  }
};

double uniform(std::mt19937_64& rng, const Range& r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t index) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, index));
  const double n = cfg.grid_size;
  const GridShape shape{cfg.grid_size, cfg.grid_size, cfg.grid_size};
  const auto names = cfg.class_names();

  std::vector<Ellipsoid> organs;
  Ellipsoid liver{};
  bool have_liver = false;
  for (const auto& spec : cfg.organ_specs) {
    Ellipsoid e{};
    for (int a = 0; a < 3; ++a) {
      e.center[a] = uniform(rng, spec.center[static_cast<std::size_t>(a)]) * n;
      e.semi[a] = uniform(rng, spec.semi_axes[static_cast<std::size_t>(a)]) * n;
    }
    if (spec.name == "gallbladder") {
      if (!have_liver) throw std::invalid_argument("phantom: gallbladder requires a liver spec");
      // Anterior, medial and slightly inferior of the liver, separated from its
      // surface by a sub-voxel to one-voxel gap along the center line.
      const Eigen::Vector3d u = Eigen::Vector3d(-0.35, -0.75, 0.55).normalized();
      const double gap = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
      e.center = liver.center + u * (liver.extent_along(u) + e.extent_along(u) + gap);
    }
    if (spec.name == "liver") {
      liver = e;
      have_liver = true;
    }
    organs.push_back(e);
  }

  std::vector<int> keep(organs.size(), 1);
  ExistenceVector existence = ExistenceVector::all_present(cfg.removable_organs);
  for (const auto& organ : cfg.removable_organs) {
    const auto it = cfg.resection_probability.find(organ);
    const double p = it == cfg.resection_probability.end() ? 0.0 : it->second;
    const bool removed = std::bernoulli_distribution(p)(rng);
    if (removed) {
      existence.set(organ, 0);
      const auto pos = std::find(names.begin(), names.end(), organ) - names.begin();
      keep[static_cast<std::size_t>(pos - 1)] = 0;
    }
  }

  const Ellipsoid body{Eigen::Vector3d::Constant(n / 2), Eigen::Vector3d(0.44, 0.40, 0.46) * n};
  Phantom out{Volume(shape), LabelMap(shape, names), existence};
  out.volume.spacing = Eigen::Vector3d::Constant(cfg.voxel_spacing_mm);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (Index z = 0; z < shape.depth; ++z) {
    for (Index y = 0; y < shape.height; ++y) {
      for (Index x = 0; x < shape.width; ++x) {
        const Eigen::Vector3d p(z + 0.5, y + 0.5, x + 0.5);
        if (!body.contains(p)) continue;
        int label = 0;
        // First matching organ wins, so an attached organ never overwrites its host.
        for (std::size_t k = 0; k < organs.size(); ++k) {
          if (organs[k].contains(p)) {
            label = keep[k] ? static_cast<int>(k) + 1 : 0;
            break;
          }
        }
        double value = cfg.tissue_intensity;
        if (label > 0) {
          const auto& spec = cfg.organ_specs[static_cast<std::size_t>(label - 1)];
          value = spec.intensity_mean + spec.intensity_std * gauss(rng);
        }
        value += cfg.noise_std * gauss(rng);
        out.labels.at(z, y, x) = label;
        out.volume.at(z, y, x) = static_cast<float>(value);
      }
    }
  }
  return out;
}

Manifest generate_dataset(const PhantomConfig& cfg, const SplitCounts& counts,
                          double voxel_labeled_fraction, const fs::path& out_dir) {
  cfg.validate();
  if (counts.train < 0 || counts.val < 0 || counts.test < 0 ||
      counts.train + counts.val + counts.test == 0)
    throw std::invalid_argument("generate_dataset: split counts must be non-negative with a positive total");
  if (!(voxel_labeled_fraction > 0.0 && voxel_labeled_fraction <= 1.0))
    throw std::invalid_argument("generate_dataset: voxel_labeled_fraction must lie in (0, 1]");

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  if (ec || !fs::is_directory(out_dir / "images"))
    throw std::runtime_error("generate_dataset: cannot create output directory " + out_dir.string());

  Manifest m;
  m.class_names = cfg.class_names();
  m.removable_organs = cfg.removable_organs;

  const std::vector<std::pair<Split, int>> splits{
      {Split::train, counts.train}, {Split::val, counts.val}, {Split::test, counts.test}};
  std::uint64_t index = 0;
  for (const auto& [split, count] : splits) {
    const auto labeled = static_cast<int>(std::ceil(voxel_labeled_fraction * count - 1e-9));
    std::vector<int> order(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(derive_seed(cfg.seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(split)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> has_labels(static_cast<std::size_t>(count), 0);
    for (int i = 0; i < labeled; ++i) has_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

    for (int i = 0; i < count; ++i, ++index) {
      Phantom ph = generate_phantom(cfg, index);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "phantom_%05llu", static_cast<unsigned long long>(index));
      const std::string id = buf;
      ph.volume.id = id;

      SampleRecord rec;
      rec.id = id;
      rec.split = split;
      rec.existence = ph.existence;
      rec.volume_path = out_dir / "images" / (id + ".nii.gz");
      save_volume(ph.volume, rec.volume_path);
      if (has_labels[static_cast<std::size_t>(i)]) {
        rec.labelmap_path = out_dir / "labels" / (id + ".nii.gz");
        save_labelmap(ph.labels, *rec.labelmap_path, ph.volume.spacing);
      }
      m.records.push_back(std::move(rec));
    }
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace halos
