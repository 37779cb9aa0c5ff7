#include "halos/core_data.hpp"

#include "nifti.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace halos {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"background", "liver",    "spleen",     "r_kidney",
                                              "l_kidney",   "pancreas", "gallbladder"};
  return names;
}

Volume::Volume(GridShape s, std::string subject_id)
    : shape(s), data(Eigen::ArrayXf::Zero(s.voxels())), id(std::move(subject_id)) {}

LabelMap::LabelMap(GridShape s, std::vector<std::string> names)
    : shape(s), data(Eigen::ArrayXi::Zero(s.voxels())), class_names(std::move(names)) {}

int LabelMap::class_index(const std::string& name) const {
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) throw std::invalid_argument("unknown organ '" + name + "'");
  return static_cast<int>(it - class_names.begin());
}

ExistenceVector::ExistenceVector(std::vector<std::string> organs, std::vector<int> flags)
    : organs_(std::move(organs)), flags_(std::move(flags)) {
  if (organs_.size() != flags_.size())
    throw std::invalid_argument("ExistenceVector: organ and flag counts differ");
  for (int f : flags_) {
    if (f != 0 && f != 1) throw std::invalid_argument("ExistenceVector: flags must be 0 or 1");
  }
  std::set<std::string> unique(organs_.begin(), organs_.end());
  if (unique.size() != organs_.size())
    throw std::invalid_argument("ExistenceVector: duplicate organ names");
}

ExistenceVector ExistenceVector::all_present(std::vector<std::string> organs) {
  std::vector<int> flags(organs.size(), 1);
  return ExistenceVector(std::move(organs), std::move(flags));
}

int ExistenceVector::flag(const std::string& organ) const {
  const auto it = std::find(organs_.begin(), organs_.end(), organ);
  if (it == organs_.end()) throw std::invalid_argument("organ '" + organ + "' is not removable");
  return flags_[static_cast<std::size_t>(it - organs_.begin())];
}

void ExistenceVector::set(const std::string& organ, int value) {
  if (value != 0 && value != 1) throw std::invalid_argument("ExistenceVector: flag must be 0 or 1");
  const auto it = std::find(organs_.begin(), organs_.end(), organ);
  if (it == organs_.end()) throw std::invalid_argument("organ '" + organ + "' is not removable");
  flags_[static_cast<std::size_t>(it - organs_.begin())] = value;
}

bool ExistenceVector::all_present() const {
  return std::all_of(flags_.begin(), flags_.end(), [](int f) { return f == 1; });
}

ExistenceVector derive_existence(const LabelMap& labels, const std::vector<std::string>& organs) {
  std::vector<int> flags;
  flags.reserve(organs.size());
  for (const auto& organ : organs) flags.push_back(labels.count(labels.class_index(organ)) > 0);
  return ExistenceVector(organs, std::move(flags));
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + s + "'");
}

std::vector<const SampleRecord*> Manifest::split(Split s) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

namespace {

GridShape grid_of(const nifti::Image& img, const fs::path& path) {
  if (img.ndim != 3)
    throw FormatError("expected 3D image in " + path.string() + ", got " +
                      std::to_string(img.ndim) + "D");
  return {img.dims[2], img.dims[1], img.dims[0]};
}

}  // namespace

Volume load_volume(const fs::path& path) {
  const nifti::Image img = nifti::read(path);
  Volume v(grid_of(img, path), path.filename().string());
  v.spacing = img.spacing;
  if ((v.spacing.array() <= 0.0).any())
    throw FormatError("non-positive voxel spacing in " + path.string());
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const double x = img.values[i];
    if (!std::isfinite(x))
      throw FormatError("non-finite intensity at voxel " + std::to_string(i) + " in " +
                        path.string());
    v.data[static_cast<Index>(i)] = static_cast<float>(x);
  }
  std::string id = path.filename().string();
  for (const char* ext : {".gz", ".nii"}) {
    if (id.size() > std::strlen(ext) && id.ends_with(ext)) id.resize(id.size() - std::strlen(ext));
  }
  v.id = id;
  return v;
}

void save_volume(const Volume& v, const fs::path& path) {
  if (v.data.size() != v.shape.voxels())
    throw std::invalid_argument("save_volume: data size does not match shape");
  nifti::Image img;
  img.ndim = 3;
  img.dims = {v.shape.width, v.shape.height, v.shape.depth, 1, 1, 1, 1};
  img.spacing = v.spacing;
  img.datatype = nifti::kFloat32;
  img.values.assign(v.data.data(), v.data.data() + v.data.size());
  nifti::write(path, img);
}

LabelMap load_labelmap(const fs::path& path, std::vector<std::string> class_names) {
  const nifti::Image img = nifti::read(path);
  LabelMap l(grid_of(img, path), std::move(class_names));
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const double x = img.values[i];
    if (x != std::floor(x) || x < 0 || x >= l.num_classes())
      throw FormatError("invalid label " + std::to_string(x) + " at voxel " + std::to_string(i) +
                        " in " + path.string());
    l.data[static_cast<Index>(i)] = static_cast<int>(x);
  }
  return l;
}

void save_labelmap(const LabelMap& l, const fs::path& path, const Eigen::Vector3d& spacing) {
  nifti::Image img;
  img.ndim = 3;
  img.dims = {l.shape.width, l.shape.height, l.shape.depth, 1, 1, 1, 1};
  img.spacing = spacing;
  img.datatype = nifti::kUInt8;
  img.values.assign(l.data.data(), l.data.data() + l.data.size());
  nifti::write(path, img);
}

void save_probabilities(const Tensor5<float>& probs, const fs::path& path,
                        const Eigen::Vector3d& spacing) {
  if (probs.batch() != 1) throw std::invalid_argument("save_probabilities: batch must be 1");
  nifti::Image img;
  img.ndim = 4;
  img.dims = {probs.grid().width, probs.grid().height, probs.grid().depth, probs.channels(), 1, 1, 1};
  img.spacing = spacing;
  img.datatype = nifti::kFloat32;
  img.values.assign(probs.data(), probs.data() + probs.size());
  nifti::write(path, img);
}

Tensor5<float> load_probabilities(const fs::path& path) {
  const nifti::Image img = nifti::read(path);
  if (img.ndim != 4) throw FormatError("expected 4D probability image in " + path.string());
  Tensor5<float> t(1, img.dims[3], GridShape{img.dims[2], img.dims[1], img.dims[0]});
  for (std::size_t i = 0; i < img.values.size(); ++i)
    t.array()[static_cast<Index>(i)] = static_cast<float>(img.values[i]);
  return t;
}

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": field '" + key + "' has wrong type (" + e.what() + ")");
  }
}

}  // namespace

Manifest load_manifest(const fs::path& path, bool check_labels) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing manifest: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw FormatError("manifest: top level must be an object");

  Manifest m;
  m.class_names = require<std::vector<std::string>>(j, "class_names", "manifest");
  m.removable_organs = require<std::vector<std::string>>(j, "removable_organs", "manifest");
  if (m.class_names.empty() || m.class_names.front() != "background")
    throw FormatError("manifest: class_names[0] must be \"background\"");
  for (const auto& organ : m.removable_organs) {
    if (organ == "background" ||
        std::find(m.class_names.begin(), m.class_names.end(), organ) == m.class_names.end())
      throw FormatError("manifest: removable organ '" + organ + "' is not a foreground class");
  }
  if (!j.contains("records") || !j["records"].is_array())
    throw FormatError("manifest: missing field 'records'");
  if (j["records"].empty()) throw FormatError("empty manifest");

  const fs::path base = path.parent_path();
  std::set<std::string> ids;
  for (const auto& r : j["records"]) {
    const std::string where = "manifest record " + std::to_string(m.records.size());
    SampleRecord rec;
    rec.id = require<std::string>(r, "id", where);
    if (!ids.insert(rec.id).second)
      throw FormatError("manifest: subject id '" + rec.id + "' appears more than once");
    rec.volume_path = resolve(base, require<std::string>(r, "volume", where));
    if (!r.contains("labelmap")) throw FormatError(where + ": missing field 'labelmap'");
    if (!r["labelmap"].is_null()) rec.labelmap_path = resolve(base, r["labelmap"].get<std::string>());
    rec.split = split_from_string(require<std::string>(r, "split", where));

    const auto ex = require<json>(r, "existence", where);
    if (!ex.is_object()) throw FormatError(where + ": 'existence' must be an object");
    if (ex.size() != m.removable_organs.size())
      throw FormatError(where + " (" + rec.id + "): existence keys must be exactly the removable organs");
    std::vector<int> flags;
    for (const auto& organ : m.removable_organs) {
      if (!ex.contains(organ))
        throw FormatError(where + " (" + rec.id + "): existence flag for '" + organ + "' missing");
      const auto& v = ex[organ];
      if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1))
        throw FormatError(where + " (" + rec.id + "): existence flag for '" + organ + "' must be 0 or 1");
      flags.push_back(v.get<int>());
    }
    rec.existence = ExistenceVector(m.removable_organs, std::move(flags));

    if (check_labels && rec.labelmap_path) {
      const LabelMap labels = load_labelmap(*rec.labelmap_path, m.class_names);
      for (const auto& organ : m.removable_organs) {
        const Index n = labels.count(labels.class_index(organ));
        const int flag = rec.existence.flag(organ);
        if ((n > 0) != (flag == 1)) {
          throw FormatError("inconsistent existence flag for '" + organ + "' in record '" + rec.id +
                            "': flag " + std::to_string(flag) + " but label map has " +
                            std::to_string(n) + " voxels");
        }
      }
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  json j;
  j["class_names"] = m.class_names;
  j["removable_organs"] = m.removable_organs;
  j["records"] = json::array();
  const fs::path base = path.parent_path();
  const fs::path abs_base = fs::absolute(base).lexically_normal();
  auto rel = [&](const fs::path& p) {
    return fs::absolute(p).lexically_normal().lexically_relative(abs_base).generic_string();
  };
  for (const auto& r : m.records) {
    json rec;
    rec["id"] = r.id;
    rec["volume"] = rel(r.volume_path);
    rec["labelmap"] = r.labelmap_path ? json(rel(*r.labelmap_path)) : json(nullptr);
    json ex = json::object();
    for (std::size_t i = 0; i < r.existence.size(); ++i)
      ex[r.existence.organs()[i]] = r.existence.flags()[i];
    rec["existence"] = ex;
    rec["split"] = to_string(r.split);
    j["records"].push_back(rec);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
}

LabelMap argmax_labels(const Tensor5<float>& scores, Index b, std::vector<std::string> class_names) {
  LabelMap out(scores.grid(), std::move(class_names));
  const auto item = scores.item(b);
  for (Index v = 0; v < item.cols(); ++v) {
    int best = 0;
    float best_value = item(0, v);
    for (Index c = 1; c < item.rows(); ++c) {
      if (item(c, v) > best_value) {
        best_value = item(c, v);
        best = static_cast<int>(c);
      }
    }
    out.data[v] = best;
  }
  return out;
}

Volume zscore_normalize(const Volume& v) {
  Volume out = v;
  const auto mask = (v.data != 0.0f);
  const Index n = mask.count();
  if (n == 0) return out;
  double sum = 0.0;
  double sq = 0.0;
  for (Index i = 0; i < v.data.size(); ++i) {
    if (mask[i]) {
      sum += v.data[i];
      sq += static_cast<double>(v.data[i]) * v.data[i];
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
  const double sd = std::max(std::sqrt(var), 1e-8);
  out.data = ((v.data.cast<double>() - mean) / sd).cast<float>();
  return out;
}

}  // namespace halos
