#include "halos/phantom.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>

using namespace halos;

namespace {

PhantomConfig small_config(int grid = 32) {
  PhantomConfig cfg = default_phantom_config();
  cfg.grid_size = grid;
  cfg.seed = 11;
  return cfg;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Smallest Chebyshev distance between voxels of labels a and b (brute force).
Index min_distance(const LabelMap& l, int a, int b) {
  const GridShape g = l.shape;
  Index best = g.depth + g.height + g.width;
  for (Index z = 0; z < g.depth; ++z)
    for (Index y = 0; y < g.height; ++y)
      for (Index x = 0; x < g.width; ++x) {
        if (l.at(z, y, x) != a) continue;
        for (Index dz = -3; dz <= 3; ++dz)
          for (Index dy = -3; dy <= 3; ++dy)
            for (Index dx = -3; dx <= 3; ++dx) {
              const Index zz = z + dz, yy = y + dy, xx = x + dx;
              if (zz < 0 || yy < 0 || xx < 0 || zz >= g.depth || yy >= g.height || xx >= g.width) continue;
              if (l.at(zz, yy, xx) == b)
                best = std::min(best, std::max({std::abs(dz), std::abs(dy), std::abs(dx)}));
            }
      }
  return best;
}

}  // namespace

TEST_CASE("phantoms are deterministic in (cfg, index)") {
  const auto cfg = small_config();
  const Phantom a = generate_phantom(cfg, 7);
  const Phantom b = generate_phantom(cfg, 7);
  CHECK((a.volume.data == b.volume.data).all());
  CHECK((a.labels.data == b.labels.data).all());
  CHECK(a.existence == b.existence);
  const Phantom c = generate_phantom(cfg, 8);
  CHECK_FALSE((a.volume.data == c.volume.data).all());
}

TEST_CASE("resection probability extremes") {
  auto cfg = small_config();
  cfg.resection_probability["gallbladder"] = 0.0;
  for (int i = 0; i < 20; ++i) CHECK(generate_phantom(cfg, static_cast<std::uint64_t>(i)).existence.all_present());

  cfg.resection_probability["gallbladder"] = 1.0;
  const int gb = 6;
  for (int i = 0; i < 100; ++i) {
    const Phantom p = generate_phantom(cfg, static_cast<std::uint64_t>(i));
    CHECK(p.labels.count(gb) == 0);
    CHECK(p.existence.flag("gallbladder") == 0);
  }
}

TEST_CASE("generated phantoms satisfy their invariants") {
  const auto cfg = small_config(64);
  int resected = 0;
  for (int i = 0; i < 12; ++i) {
    const Phantom p = generate_phantom(cfg, static_cast<std::uint64_t>(i));
    // existence consistency
    CHECK(derive_existence(p.labels, cfg.removable_organs) == p.existence);
    // every non-removable organ is present and separable from the tissue
    for (int c = 1; c < p.labels.num_classes(); ++c) {
      const Index n = p.labels.count(c);
      if (p.labels.class_names[static_cast<std::size_t>(c)] == "gallbladder" && n == 0) {
        ++resected;
        continue;
      }
      REQUIRE(n > 0);
      const double mean = (p.labels.data == c).select(p.volume.data, 0.f).cast<double>().sum() / static_cast<double>(n);
      CHECK(std::abs(mean - cfg.tissue_intensity) >= 3 * cfg.noise_std);
    }
    // nothing touches the grid border
    const GridShape g = p.labels.shape;
    for (Index z = 0; z < g.depth; ++z)
      for (Index y = 0; y < g.height; ++y) {
        CHECK(p.labels.at(z, y, 0) == 0);
        CHECK(p.labels.at(z, y, g.width - 1) == 0);
      }
    // the gallbladder hugs the liver
    if (p.existence.flag("gallbladder")) CHECK(min_distance(p.labels, 6, 1) <= 2);
    CHECK(p.volume.spacing.isApprox(Eigen::Vector3d::Constant(cfg.voxel_spacing_mm)));
  }
  CHECK(resected < 12);
}

TEST_CASE("dataset generation counts and determinism") {
  TempDir a("ds_a"), b("ds_b");
  auto cfg = small_config(16);
  const Manifest m = generate_dataset(cfg, {20, 5, 10}, 0.5, a.path());
  auto labeled = [&](Split s) {
    int n = 0;
    for (const auto* r : m.split(s)) n += r->voxel_labeled();
    return n;
  };
  CHECK(m.split(Split::train).size() == 20);
  CHECK(labeled(Split::train) == 10);
  CHECK(labeled(Split::val) == 3);
  CHECK(labeled(Split::test) == 5);

  const Manifest reloaded = load_manifest(a / "manifest.json");
  CHECK(reloaded.records.size() == 35);

  generate_dataset(cfg, {20, 5, 10}, 0.5, b.path());
  CHECK(read_bytes(a / "manifest.json") == read_bytes(b / "manifest.json"));
  for (const auto& r : m.records) {
    const auto rel = std::filesystem::relative(r.volume_path, a.path());
    CHECK(read_bytes(a.path() / rel) == read_bytes(b.path() / rel));
  }

  TempDir c("ds_c");
  const Manifest full = generate_dataset(cfg, {3, 1, 2}, 1.0, c.path());
  for (const auto& r : full.records) CHECK(r.voxel_labeled());
}

TEST_CASE("phantom config validation") {
  auto cfg = small_config();
  cfg.resection_probability["gallbladder"] = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.removable_organs = {"heart"};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.grid_size = 4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS(generate_dataset(small_config(), {0, 0, 0}, 0.5, std::filesystem::temp_directory_path()));
  CHECK_THROWS(generate_dataset(small_config(), {1, 1, 1}, 0.0, std::filesystem::temp_directory_path()));
}

TEST_CASE("derive_seed spreads indices") {
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  CHECK(derive_seed(5, 9) == derive_seed(5, 9));
}
