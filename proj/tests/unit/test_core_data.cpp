#include "halos/core_data.hpp"
#include "nifti.hpp"
#include "test_util.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

using namespace halos;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Volume random_volume(GridShape g, unsigned seed) {
  Volume v(g, "rand");
  std::mt19937 rng(seed);
  std::normal_distribution<float> n(0.f, 3.f);
  for (Index i = 0; i < v.data.size(); ++i) v.data[i] = n(rng);
  v.spacing = {1.5, 0.75, 2.0};
  return v;
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST_CASE("volume round-trips bit-exact") {
  TempDir dir("vol");
  const Volume v = random_volume({8, 8, 8}, 1);
  save_volume(v, dir / "a.nii.gz");
  const Volume r = load_volume(dir / "a.nii.gz");
  CHECK(r.shape == v.shape);
  CHECK((r.data - v.data).abs().maxCoeff() == 0.f);
  CHECK(r.spacing.isApprox(v.spacing));
  CHECK(r.id == "a");

  // non-cubic grids keep their axis order
  const Volume w = random_volume({3, 5, 7}, 2);
  save_volume(w, dir / "b.nii");
  const Volume rw = load_volume(dir / "b.nii");
  CHECK(rw.shape == w.shape);
  CHECK(rw.at(2, 4, 6) == w.at(2, 4, 6));
}

TEST_CASE("spacing is stored in the header") {
  TempDir dir("spacing");
  Volume v({4, 4, 4});
  v.data.setZero();
  v.spacing = {2, 2, 3};
  save_volume(v, dir / "z.nii.gz");
  const auto img = nifti::read(dir / "z.nii.gz");
  CHECK(img.spacing.isApprox(Eigen::Vector3d(2, 2, 3)));
  CHECK(load_volume(dir / "z.nii.gz").spacing.isApprox(Eigen::Vector3d(2, 2, 3)));
}

TEST_CASE("save-load-save is byte-identical") {
  TempDir dir("idem");
  save_volume(random_volume({6, 6, 6}, 3), dir / "a.nii.gz");
  save_volume(load_volume(dir / "a.nii.gz"), dir / "b.nii.gz");
  save_volume(load_volume(dir / "b.nii.gz"), dir / "c.nii.gz");
  CHECK(read_bytes(dir / "b.nii.gz") == read_bytes(dir / "c.nii.gz"));
}

TEST_CASE("load_volume rejects bad files") {
  TempDir dir("bad");
  nifti::Image img;
  img.ndim = 3;
  img.dims = {2, 2, 2, 1, 1, 1, 1};
  img.values.assign(8, 1.0);
  img.values[5] = std::numeric_limits<double>::quiet_NaN();
  nifti::write(dir / "nan.nii", img);
  try {
    load_volume(dir / "nan.nii");
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("voxel 5") != std::string::npos);
  }

  img.ndim = 4;
  img.dims = {2, 2, 2, 2, 1, 1, 1};
  img.values.assign(16, 0.0);
  nifti::write(dir / "four.nii", img);
  CHECK_THROWS_AS(load_volume(dir / "four.nii"), FormatError);

  CHECK_THROWS_AS(load_volume(dir / "missing.nii.gz"), FormatError);
  std::ofstream(dir / "junk.nii") << "not a nifti file";
  CHECK_THROWS_AS(load_volume(dir / "junk.nii"), FormatError);
}

TEST_CASE("label maps round-trip") {
  TempDir dir("lab");
  LabelMap l({4, 5, 6}, default_class_names());
  std::mt19937 rng(4);
  for (Index i = 0; i < l.data.size(); ++i) l.data[i] = static_cast<int>(rng() % 7);
  save_labelmap(l, dir / "l.nii.gz");
  const LabelMap r = load_labelmap(dir / "l.nii.gz", default_class_names());
  CHECK(r.shape == l.shape);
  CHECK((r.data == l.data).all());

  l.data[0] = 9;
  save_labelmap(l, dir / "bad.nii.gz");
  CHECK_THROWS_AS(load_labelmap(dir / "bad.nii.gz", default_class_names()), FormatError);
}

TEST_CASE("probability maps round-trip") {
  TempDir dir("prob");
  Tensor5<float> p(1, 3, GridShape{2, 3, 4});
  for (Index i = 0; i < p.size(); ++i) p.array()[i] = static_cast<float>(i) / 24.f;
  save_probabilities(p, dir / "p.nii.gz");
  const auto r = load_probabilities(dir / "p.nii.gz");
  CHECK(r.shape() == p.shape());
  CHECK((r.array() == p.array()).all());
}

TEST_CASE("manifest loading and validation") {
  TempDir dir("manifest");
  std::filesystem::create_directories(dir / "img");
  const auto names = default_class_names();
  const int gb = 6;
  for (int k = 0; k < 3; ++k) {
    save_volume(random_volume({4, 4, 4}, 10 + k), dir.path() / "img" / ("s" + std::to_string(k) + ".nii.gz"));
    LabelMap l({4, 4, 4}, names);
    l.data.setZero();
    l.data[3] = 1;
    if (k != 1) l.data[7] = gb;
    save_labelmap(l, dir.path() / "img" / ("l" + std::to_string(k) + ".nii.gz"));
  }
  nlohmann::json j = {{"class_names", names}, {"removable_organs", {"gallbladder"}}, {"records", nlohmann::json::array()}};
  for (int k = 0; k < 3; ++k) {
    j["records"].push_back({{"id", "s" + std::to_string(k)},
                            {"volume", "img/s" + std::to_string(k) + ".nii.gz"},
                            {"labelmap", "img/l" + std::to_string(k) + ".nii.gz"},
                            {"existence", {{"gallbladder", k == 1 ? 0 : 1}}},
                            {"split", "train"}});
  }

  SUBCASE("valid") {
    write_json(dir / "m.json", j);
    const Manifest m = load_manifest(dir / "m.json");
    CHECK(m.records.size() == 3);
    CHECK(m.removable_organs == std::vector<std::string>{"gallbladder"});
    CHECK(m.records[1].existence.flag("gallbladder") == 0);
    CHECK(m.split(Split::train).size() == 3);
    CHECK(std::filesystem::exists(m.records[0].volume_path));

    save_manifest(m, dir / "copy.json");
    const Manifest c = load_manifest(dir / "copy.json");
    CHECK(c.records.size() == 3);
    CHECK(c.records[2].existence == m.records[2].existence);
  }
  SUBCASE("flag contradicts label map") {
    j["records"][0]["existence"]["gallbladder"] = 0;
    write_json(dir / "m.json", j);
    try {
      load_manifest(dir / "m.json");
      FAIL("expected an error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("inconsistent existence flag") != std::string::npos);
    }
  }
  SUBCASE("empty record list") {
    j["records"] = nlohmann::json::array();
    write_json(dir / "m.json", j);
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.json"), doctest::Contains("empty manifest"), FormatError);
  }
  SUBCASE("schema violations") {
    nlohmann::json bad = j;
    bad["class_names"][0] = "liver";
    write_json(dir / "m.json", bad);
    CHECK_THROWS_AS(load_manifest(dir / "m.json"), FormatError);

    bad = j;
    bad["records"][1]["id"] = "s0";
    write_json(dir / "m.json", bad);
    CHECK_THROWS_AS(load_manifest(dir / "m.json"), FormatError);

    bad = j;
    bad["records"][0]["existence"] = {{"spleen", 1}};
    write_json(dir / "m.json", bad);
    CHECK_THROWS_AS(load_manifest(dir / "m.json"), FormatError);

    bad = j;
    bad["records"][0]["split"] = "holdout";
    write_json(dir / "m.json", bad);
    CHECK_THROWS_AS(load_manifest(dir / "m.json"), FormatError);
  }
  SUBCASE("image-label-only record") {
    j["records"][1]["labelmap"] = nullptr;
    write_json(dir / "m.json", j);
    const Manifest m = load_manifest(dir / "m.json");
    CHECK_FALSE(m.records[1].voxel_labeled());
    CHECK(m.records[0].voxel_labeled());
  }
}

TEST_CASE("one_hot") {
  LabelMap single({1, 1, 1}, {"background", "a", "b"});
  single.data[0] = 2;
  const auto oh = one_hot<double>(single, 3);
  CHECK(oh(0, 0, 0, 0, 0) == 0.0);
  CHECK(oh(0, 1, 0, 0, 0) == 0.0);
  CHECK(oh(0, 2, 0, 0, 0) == 1.0);

  LabelMap bg({2, 2, 2}, {"background", "a"});
  bg.data.setZero();
  const auto obg = one_hot<float>(bg, 2);
  CHECK((obg.channel(0, 0) == 1.f).all());
  CHECK((obg.channel(0, 1) == 0.f).all());

  LabelMap r({4, 4, 4}, default_class_names());
  std::mt19937 rng(5);
  for (Index i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<int>(rng() % 7);
  const auto o = one_hot<float>(r, 7);
  CHECK((o.item(0).colwise().sum().array() == 1.f).all());
  CHECK((argmax_labels(o, 0, r.class_names).data == r.data).all());

  CHECK_THROWS(one_hot<float>(r, 5));
}

TEST_CASE("argmax ties go to the lowest index") {
  Tensor5<float> s(1, 3, GridShape{1, 1, 2}, 0.5f);
  s(0, 0, 0, 0, 1) = 0.1f;
  const LabelMap l = argmax_labels(s, 0, {"background", "a", "b"});
  CHECK(l.data[0] == 0);
  CHECK(l.data[1] == 1);
}

TEST_CASE("existence derivation and zscore") {
  LabelMap l({2, 2, 2}, default_class_names());
  l.data.setZero();
  l.data[1] = 4;
  const auto e = derive_existence(l, {"l_kidney", "r_kidney"});
  CHECK(e.flag("l_kidney") == 1);
  CHECK(e.flag("r_kidney") == 0);
  CHECK_FALSE(e.all_present());

  Volume v({1, 1, 4});
  v.data << 0.f, 1.f, 2.f, 3.f;
  const Volume z = zscore_normalize(v);
  // statistics come from the nonzero voxels only, but every voxel is mapped
  CHECK(z.data.tail(3).sum() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(z.data[0] == doctest::Approx(-2.0 / std::sqrt(2.0 / 3.0)));
  CHECK(z.data[3] == doctest::Approx(std::sqrt(1.5)));
}
