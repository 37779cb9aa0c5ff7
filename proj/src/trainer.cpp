#include "halos/trainer.hpp"

#include "halos/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace halos {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ------------------------------------------------------------------- config

void TrainConfig::validate(const NetworkConfig& net) const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train: " + m); };
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
  if (seg_batch_size < 1 || clf_batch_size < 1) fail("batch sizes must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
  if (!(lr_seg > 0.0) || !(lr_clf > 0.0)) fail("learning rates must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (grad_clip < 0.0) fail("grad_clip must be >= 0");
  if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0)) fail("foreground_fraction must lie in [0, 1]");
  for (std::size_t i = 0; i < mirror_axes.size(); ++i) {
    if (mirror_axes[i] < 0 || mirror_axes[i] > 2) fail("mirror_axes entries must be 0, 1 or 2");
    if (std::find(mirror_axes.begin(), mirror_axes.begin() + static_cast<std::ptrdiff_t>(i), mirror_axes[i]) !=
        mirror_axes.begin() + static_cast<std::ptrdiff_t>(i))
      fail("mirror_axes has a repeated axis");
  }
  const Index div = Index(1) << net.num_levels;
  for (Index p : patch_size)
    if (p < 1 || p % div != 0)
      fail("patch_size entries must be positive multiples of 2^num_levels = " + std::to_string(div));
  dice.validate();
  if (net.classifier_enabled && net.classifier_site == ClassifierSite::decoder && net.fusion_enabled)
    fail("a decoder-attached classifier cannot be combined with fusion");
}

json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"seg_batch_size", c.seg_batch_size},
          {"clf_batch_size", c.clf_batch_size},
          {"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"lr_seg", c.lr_seg},
          {"lr_clf", c.lr_clf},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},
          {"poly_exponent", c.poly_exponent},
          {"grad_clip", c.grad_clip},
          {"patch_size", c.patch_size},
          {"oversample_missing", c.oversample_missing},
          {"fusion_train_input", "ground_truth"},
          {"dice",
           {{"epsilon", c.dice.epsilon},
            {"batch_reduction", c.dice.batch_reduction},
            {"include_background", c.dice.include_background}}},
          {"dynamic_ce_weights", c.dynamic_ce_weights},
          {"augment", c.augment},
          {"mirror_axes", c.mirror_axes},
          {"foreground_fraction", c.foreground_fraction},
          {"seed", c.seed},
          {"norm", to_string(c.norm)},
          {"validation", {{"overlap", c.validation.overlap}, {"window_batch", c.validation.window_batch}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.seg_batch_size = j.value("seg_batch_size", c.seg_batch_size);
  c.clf_batch_size = j.value("clf_batch_size", c.clf_batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.lr_seg = j.value("lr_seg", c.lr_seg);
  c.lr_clf = j.value("lr_clf", c.lr_clf);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.momentum = j.value("momentum", c.momentum);
  c.poly_exponent = j.value("poly_exponent", c.poly_exponent);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("patch_size")) {
    const json& p = j.at("patch_size");
    if (p.is_number_integer()) c.patch_size.fill(p.get<Index>());
    else if (p.is_array() && p.size() == 3) c.patch_size = p.get<std::array<Index, 3>>();
    else throw std::invalid_argument("train: patch_size must be an integer or a list of three");
  }
  c.oversample_missing = j.value("oversample_missing", c.oversample_missing);
  const std::string fti = j.value("fusion_train_input", std::string("ground_truth"));
  if (fti != "ground_truth") throw std::invalid_argument("train: fusion_train_input must be 'ground_truth'");
  if (j.contains("dice")) {
    const json& d = j.at("dice");
    c.dice.epsilon = d.value("epsilon", c.dice.epsilon);
    c.dice.batch_reduction = d.value("batch_reduction", c.dice.batch_reduction);
    c.dice.include_background = d.value("include_background", c.dice.include_background);
  }
  c.dynamic_ce_weights = j.value("dynamic_ce_weights", c.dynamic_ce_weights);
  c.augment = j.value("augment", c.augment);
  c.mirror_axes = j.value("mirror_axes", c.mirror_axes);
  c.foreground_fraction = j.value("foreground_fraction", c.foreground_fraction);
  c.seed = j.value("seed", c.seed);
  c.norm = norm_from_string(j.value("norm", to_string(c.norm)));
  if (j.contains("validation")) {
    const json& v = j.at("validation");
    c.validation.overlap = v.value("overlap", c.validation.overlap);
    c.validation.window_batch = v.value("window_batch", c.validation.window_batch);
  }
  return c;
}

// ------------------------------------------------------------------ sampling

Sampler::Sampler(std::vector<bool> missing, bool oversample, std::uint64_t seed)
    : missing_(std::move(missing)), oversample_(oversample), rng_(seed) {
  if (missing_.empty()) throw std::invalid_argument("sampler: no records");
  for (std::size_t i = 0; i < missing_.size(); ++i) (missing_[i] ? missing_idx_ : present_idx_).push_back(i);
}

std::size_t Sampler::next() {
  if (oversample_ && !present_idx_.empty() && !missing_idx_.empty()) {
    const bool pick_missing = std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < 0.5;
    const auto& group = pick_missing ? missing_idx_ : present_idx_;
    return group[std::uniform_int_distribution<std::size_t>(0, group.size() - 1)(rng_)];
  }
  if (pos_ == order_.size()) {
    order_.resize(missing_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  return order_[pos_++];
}

std::vector<std::size_t> Sampler::next_batch(std::size_t n) {
  std::vector<std::size_t> b(n);
  for (auto& i : b) i = next();
  return b;
}

Sampler make_sampler(const std::vector<const SampleRecord*>& records, bool oversample_missing, std::uint64_t seed) {
  std::vector<bool> missing;
  for (const auto* r : records) missing.push_back(!r->existence.all_present());
  return Sampler(std::move(missing), oversample_missing, seed);
}

// ------------------------------------------------------------------- patches

namespace {

double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Centred zero padding up to at least `min_grid`.
std::pair<Volume, LabelMap> pad_to(const Volume& v, const LabelMap& l, const GridShape& min_grid) {
  const GridShape s = v.shape;
  const GridShape g{std::max(s.depth, min_grid.depth), std::max(s.height, min_grid.height),
                    std::max(s.width, min_grid.width)};
  if (g == s) return {v, l};
  Volume pv(g, v.id);
  pv.data.setZero();
  pv.spacing = v.spacing;
  LabelMap pl(g, l.class_names);
  pl.data.setZero();
  const Index oz = (g.depth - s.depth) / 2, oy = (g.height - s.height) / 2, ox = (g.width - s.width) / 2;
  for (Index z = 0; z < s.depth; ++z)
    for (Index y = 0; y < s.height; ++y)
      for (Index x = 0; x < s.width; ++x) {
        pv.at(z + oz, y + oy, x + ox) = v.at(z, y, x);
        pl.at(z + oz, y + oy, x + ox) = l.at(z, y, x);
      }
  return {std::move(pv), std::move(pl)};
}

Eigen::Matrix3d rotation(double az, double ay, double ax) {
  return (Eigen::AngleAxisd(az, Eigen::Vector3d::UnitX()) * Eigen::AngleAxisd(ay, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(ax, Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

float trilinear(const Volume& v, const Eigen::Vector3d& p) {
  const GridShape g = v.shape;
  const double fz = std::floor(p[0]), fy = std::floor(p[1]), fx = std::floor(p[2]);
  const double tz = p[0] - fz, ty = p[1] - fy, tx = p[2] - fx;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const Index z = static_cast<Index>(fz) + dz, y = static_cast<Index>(fy) + dy, x = static_cast<Index>(fx) + dx;
        if (z < 0 || y < 0 || x < 0 || z >= g.depth || y >= g.height || x >= g.width) continue;
        const double w = (dz ? tz : 1 - tz) * (dy ? ty : 1 - ty) * (dx ? tx : 1 - tx);
        acc += w * v.at(z, y, x);
      }
  return static_cast<float>(acc);
}

int nearest(const LabelMap& l, const Eigen::Vector3d& p) {
  const Index z = static_cast<Index>(std::lround(p[0])), y = static_cast<Index>(std::lround(p[1])),
              x = static_cast<Index>(std::lround(p[2]));
  const GridShape g = l.shape;
  if (z < 0 || y < 0 || x < 0 || z >= g.depth || y >= g.height || x >= g.width) return 0;
  return l.at(z, y, x);
}

void flip_axis(Tensor5<float>& img, LabelMap* labels, int axis) {
  const GridShape g = img.grid();
  for (Index z = 0; z < g.depth; ++z)
    for (Index y = 0; y < g.height; ++y)
      for (Index x = 0; x < g.width; ++x) {
        Index zz = z, yy = y, xx = x;
        if (axis == 0) zz = g.depth - 1 - z;
        if (axis == 1) yy = g.height - 1 - y;
        if (axis == 2) xx = g.width - 1 - x;
        // visit each pair once
        if ((zz * g.height + yy) * g.width + xx <= (z * g.height + y) * g.width + x) continue;
        for (Index n = 0; n < img.batch(); ++n)
          for (Index c = 0; c < img.channels(); ++c) std::swap(img(n, c, z, y, x), img(n, c, zz, yy, xx));
        if (labels) std::swap(labels->at(z, y, x), labels->at(zz, yy, xx));
      }
}

void intensity_augment(Tensor5<float>& img, std::mt19937_64& rng, const AugmentConfig& a) {
  if (uniform(rng) < a.noise_probability) {
    const double sd = uniform(rng, 0.0, a.max_noise_std);
    std::normal_distribution<double> n(0.0, sd);
    for (Index i = 0; i < img.size(); ++i) img.array()[i] += static_cast<float>(n(rng));
  }
}

}  // namespace

Patch extract_patch(const Volume& volume, const LabelMap& labels, const GridShape& patch, std::mt19937_64& rng,
                    double foreground_fraction, const AugmentConfig& augment) {
  if (!(volume.shape == labels.shape)) throw std::invalid_argument("extract_patch: volume and labels differ in shape");
  const auto [vol, lab] = pad_to(volume, labels, patch);
  const GridShape g = vol.shape;

  // centre of the crop
  std::array<Index, 3> centre{};
  std::vector<int> fg_classes;
  for (int c = 1; c < lab.num_classes(); ++c)
    if (lab.count(c) > 0) fg_classes.push_back(c);
  const bool force_fg = !fg_classes.empty() && uniform(rng) < foreground_fraction;
  if (force_fg) {
    const int c = fg_classes[std::uniform_int_distribution<std::size_t>(0, fg_classes.size() - 1)(rng)];
    const Index k = std::uniform_int_distribution<Index>(0, lab.count(c) - 1)(rng);
    Index seen = 0, hit = 0;
    for (Index i = 0; i < lab.data.size(); ++i)
      if (lab.data[i] == c && seen++ == k) {
        hit = i;
        break;
      }
    centre = {hit / (g.height * g.width), (hit / g.width) % g.height, hit % g.width};
  } else {
    const std::array<Index, 3> size{g.depth, g.height, g.width}, p{patch.depth, patch.height, patch.width};
    for (int a = 0; a < 3; ++a) centre[a] = std::uniform_int_distribution<Index>(0, size[a] - p[a])(rng) + p[a] / 2;
  }
  const std::array<Index, 3> size{g.depth, g.height, g.width}, p{patch.depth, patch.height, patch.width};
  std::array<Index, 3> origin{};
  for (int a = 0; a < 3; ++a) origin[a] = std::clamp<Index>(centre[a] - p[a] / 2, 0, size[a] - p[a]);

  Patch out{Tensor5<float>(1, 1, patch), LabelMap(patch, lab.class_names)};
  const bool affine = augment.enabled && uniform(rng) < augment.affine_probability;
  if (affine) {
    const double r = augment.max_rotation_deg * M_PI / 180.0;
    const Eigen::Matrix3d R = rotation(uniform(rng, -r, r), uniform(rng, -r, r), uniform(rng, -r, r));
    const double s = uniform(rng, augment.min_scale, augment.max_scale);
    const Eigen::Matrix3d M = R / s;
    const Eigen::Vector3d pc(static_cast<double>(p[0] / 2), static_cast<double>(p[1] / 2), static_cast<double>(p[2] / 2));
    const Eigen::Vector3d src_c = Eigen::Vector3d(static_cast<double>(origin[0]), static_cast<double>(origin[1]),
                                                  static_cast<double>(origin[2])) + pc;
    for (Index z = 0; z < p[0]; ++z)
      for (Index y = 0; y < p[1]; ++y)
        for (Index x = 0; x < p[2]; ++x) {
          const Eigen::Vector3d q =
              src_c + M * (Eigen::Vector3d(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)) - pc);
          out.image(0, 0, z, y, x) = trilinear(vol, q);
          out.labels.at(z, y, x) = nearest(lab, q);
        }
  } else {
    for (Index z = 0; z < p[0]; ++z)
      for (Index y = 0; y < p[1]; ++y)
        for (Index x = 0; x < p[2]; ++x) {
          out.image(0, 0, z, y, x) = vol.at(origin[0] + z, origin[1] + y, origin[2] + x);
          out.labels.at(z, y, x) = lab.at(origin[0] + z, origin[1] + y, origin[2] + x);
        }
  }
  if (augment.enabled) {
    for (int a = 0; a < 3; ++a)
      if (uniform(rng) < augment.flip_probability && augment.mirror[a]) flip_axis(out.image, &out.labels, a);
    intensity_augment(out.image, rng, augment);
  }
  return out;
}

// ----------------------------------------------------------------- optimiser

Optimizer::Optimizer(double momentum, double weight_decay, double grad_clip)
    : momentum_(momentum), weight_decay_(weight_decay), grad_clip_(grad_clip) {}

double Optimizer::step(const std::vector<Parameter<float>*>& params, double lr_seg, double lr_clf) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  const float scale = (grad_clip_ > 0.0 && norm > grad_clip_) ? static_cast<float>(grad_clip_ / norm) : 1.0f;
  const auto mu = static_cast<float>(momentum_);
  for (auto* p : params) {
    const float lr = static_cast<float>(p->group == ParamGroup::classifier ? lr_clf : lr_seg);
    Eigen::ArrayXf g = scale * p->grad + static_cast<float>(weight_decay_) * p->value;
    auto [it, inserted] = velocity_.try_emplace(p->name, Eigen::ArrayXf::Zero(p->value.size()));
    Eigen::ArrayXf& v = it->second;
    v = mu * v + g;
    p->value -= lr * (g + mu * v);
  }
  return norm;
}

void Optimizer::save(WeightArchive& archive) const {
  for (const auto& [name, v] : velocity_) archive.tensors["optimizer/velocity/" + name] = {"f4", v.cast<double>()};
}

void Optimizer::load(const WeightArchive& archive) {
  velocity_.clear();
  const std::string prefix = "optimizer/velocity/";
  for (const auto& [name, t] : archive.tensors)
    if (name.rfind(prefix, 0) == 0) velocity_[name.substr(prefix.size())] = t.values.cast<float>();
}

double poly_lr(double lr0, int epoch, int epochs, double exponent) {
  return lr0 * std::pow(1.0 - static_cast<double>(epoch) / static_cast<double>(epochs), exponent);
}

// ------------------------------------------------------------------ training

namespace {

struct Sample {
  std::string id;
  Volume volume;  // z-scored
  std::optional<LabelMap> labels;
  ExistenceVector flags;
};

Sample load_sample(const SampleRecord& r, const std::vector<std::string>& class_names) {
  Sample s{r.id, zscore_normalize(load_volume(r.volume_path)), std::nullopt, r.existence};
  if (r.labelmap_path) s.labels = load_labelmap(*r.labelmap_path, class_names);
  return s;
}

// Whole volume as a 1 x 1 x grid tensor, zero-padded up to a multiple of `div`.
Tensor5<float> volume_tensor(const Volume& v, Index div) {
  auto up = [&](Index n) { return (n + div - 1) / div * div; };
  Tensor5<float> t(1, 1, GridShape{up(v.shape.depth), up(v.shape.height), up(v.shape.width)});
  for (Index z = 0; z < v.shape.depth; ++z)
    for (Index y = 0; y < v.shape.height; ++y)
      for (Index x = 0; x < v.shape.width; ++x) t(0, 0, z, y, x) = v.at(z, y, x);
  return t;
}

Tensor5<float> stack(const std::vector<Tensor5<float>>& items) {
  Tensor5<float> out(static_cast<Index>(items.size()), items.front().channels(), items.front().grid());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!(items[i].grid() == items.front().grid()))
      throw std::invalid_argument("classifier batches need volumes of equal size (" + items[i].grid().str() +
                                  " vs " + items.front().grid().str() + ")");
    out.item(static_cast<Index>(i)) = items[i].item(0);
  }
  return out;
}

Matrix<float> flag_matrix(const std::vector<const ExistenceVector*>& flags) {
  Matrix<float> m(static_cast<Index>(flags.size()), static_cast<Index>(flags.front()->size()));
  for (std::size_t i = 0; i < flags.size(); ++i) m.row(static_cast<Index>(i)) = flags[i]->as_vector<float>().transpose();
  return m;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

json epoch_to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"lr_seg", e.lr_seg},
          {"lr_clf", e.lr_clf},
          {"seg_loss", e.seg_loss},
          {"clf_loss", e.clf_loss},
          {"total_loss", e.total_loss},
          {"val_mean_dice", e.val_mean_dice},
          {"val_dice", e.val_dice},
          {"val_balanced_accuracy", e.val_balanced_accuracy ? json(*e.val_balanced_accuracy) : json(nullptr)}};
}

EpochLog epoch_from_json(const json& j) {
  EpochLog e;
  e.epoch = j.at("epoch");
  e.lr_seg = j.at("lr_seg");
  e.lr_clf = j.at("lr_clf");
  e.seg_loss = j.at("seg_loss");
  e.clf_loss = j.at("clf_loss");
  e.total_loss = j.at("total_loss");
  e.val_mean_dice = j.at("val_mean_dice");
  e.val_dice = j.at("val_dice").get<std::map<std::string, double>>();
  if (!j.at("val_balanced_accuracy").is_null()) e.val_balanced_accuracy = j.at("val_balanced_accuracy").get<double>();
  return e;
}

void write_logs(const fs::path& out_dir, const std::vector<EpochLog>& history, const std::vector<StepLog>& steps,
                const std::vector<std::string>& organs) {
  std::ofstream csv(out_dir / "train_log.csv");
  csv << "epoch,lr_seg,lr_clf,seg_loss,clf_loss,total_loss,val_mean_dice";
  for (const auto& o : organs) csv << ",val_dice_" << o;
  csv << ",val_balanced_accuracy\n";
  for (const auto& e : history) {
    csv << e.epoch << ',' << num(e.lr_seg) << ',' << num(e.lr_clf) << ',' << num(e.seg_loss) << ','
        << num(e.clf_loss) << ',' << num(e.total_loss) << ',' << num(e.val_mean_dice);
    for (const auto& o : organs) {
      const auto it = e.val_dice.find(o);
      csv << ',' << (it == e.val_dice.end() ? std::string() : num(it->second));
    }
    csv << ',' << (e.val_balanced_accuracy ? num(*e.val_balanced_accuracy) : std::string()) << '\n';
  }
  std::ofstream st(out_dir / "steps.csv", std::ios::app);
  for (const auto& s : steps)
    st << s.epoch << ',' << s.step << ',' << num(s.alpha) << ',' << num(s.seg_loss) << ',' << num(s.clf_loss) << ','
       << num(s.total_loss) << '\n';
}

struct Validation {
  double mean_dice = -1.0;
  std::map<std::string, double> dice;
  std::optional<double> balanced_accuracy;
};

Validation validate_model(UNet<float>& model, const std::vector<Sample>& val, const std::vector<std::string>& names,
                          const InferenceConfig& infer) {
  Validation out;
  std::map<std::string, std::vector<double>> per_organ;
  for (const auto& s : val) {
    if (!s.labels) continue;
    const Prediction p = predict_volume(model, s.volume, ExistenceSource::ground_truth, s.flags, names, infer);
    for (std::size_t c = 1; c < names.size(); ++c) per_organ[names[c]].push_back(dice_score(p.labels, *s.labels, names[c]));
  }
  if (!per_organ.empty()) {
    double total = 0.0;
    for (const auto& [organ, v] : per_organ) {
      out.dice[organ] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      total += out.dice[organ];
    }
    out.mean_dice = total / static_cast<double>(per_organ.size());
  }
  if (model.config().classifier_enabled && !val.empty()) {
    std::vector<ExistenceVector> pred, truth;
    for (const auto& s : val) {
      const Eigen::VectorXd p = classifier_probabilities(model, s.volume);
      ExistenceVector e = s.flags;
      for (std::size_t o = 0; o < e.size(); ++o) e.set(e.organs()[o], p[static_cast<Index>(o)] >= infer.threshold);
      pred.push_back(e);
      truth.push_back(s.flags);
    }
    out.balanced_accuracy = classifier_report(pred, truth)["balanced_accuracy"].get<double>();
  }
  return out;
}

void save_checkpoint(const fs::path& path, UNet<float>& model, const Optimizer& opt, const TrainConfig& cfg, int epoch,
                     int best_epoch, double best_dice, const std::vector<EpochLog>& history) {
  WeightArchive a;
  export_model(model, a);
  opt.save(a);
  a.meta["format"] = "halos-checkpoint";
  a.meta["version"] = 1;
  a.meta["train_config"] = to_json(cfg);
  a.meta["epoch"] = epoch;
  a.meta["best_epoch"] = best_epoch;
  a.meta["best_val_mean_dice"] = best_dice;
  json h = json::array();
  for (const auto& e : history) h.push_back(epoch_to_json(e));
  a.meta["history"] = h;
  const fs::path tmp = path.string() + ".tmp";
  write_archive(tmp, a);
  fs::rename(tmp, path);
}

}  // namespace

TrainResult train(const Manifest& manifest, NetworkConfig net_cfg, const TrainConfig& cfg, const fs::path& out_dir,
                  bool resume, const TrainHooks& hooks) {
  net_cfg.norm = cfg.norm;
  net_cfg.num_classes = static_cast<Index>(manifest.class_names.size());
  net_cfg.num_removable_organs = static_cast<Index>(manifest.removable_organs.size());
  net_cfg.validate();
  cfg.validate(net_cfg);

  const auto train_records = manifest.split(Split::train);
  std::vector<const SampleRecord*> seg_records, clf_records;
  for (const auto* r : train_records) (r->voxel_labeled() ? seg_records : clf_records).push_back(r);
  if (seg_records.empty()) throw std::invalid_argument("train: no voxel-labelled training records");
  const bool use_clf = net_cfg.classifier_enabled;
  if (use_clf && clf_records.empty())
    throw std::invalid_argument("train: the classifier needs image-label-only training records");

  LossWeights weights;
  weights.alpha = use_clf ? cfg.alpha : 1.0;
  if (use_clf) {
    std::vector<ExistenceVector> flags;
    for (const auto* r : train_records) flags.push_back(r->existence);
    weights.clf_class_weights = class_ratio_weights(flags);
  }

  fs::create_directories(out_dir);
  std::vector<Sample> seg_data, clf_data, val_data;
  for (const auto* r : seg_records) seg_data.push_back(load_sample(*r, manifest.class_names));
  if (use_clf)
    for (const auto* r : clf_records) clf_data.push_back(load_sample(*r, manifest.class_names));
  for (const auto* r : manifest.split(Split::val)) val_data.push_back(load_sample(*r, manifest.class_names));

  UNet<float> model(net_cfg);
  Optimizer opt(cfg.momentum, cfg.weight_decay, cfg.grad_clip);
  TrainResult result;
  result.last_checkpoint = out_dir / "last.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  int start_epoch = 0;

  if (resume && fs::exists(result.last_checkpoint)) {
    const WeightArchive a = read_archive(result.last_checkpoint);
    if (a.meta.at("network_config") != to_json(net_cfg))
      throw std::invalid_argument("train: checkpoint " + result.last_checkpoint.string() +
                                  " was written for a different network configuration");
    import_model(model, a);
    opt.load(a);
    start_epoch = a.meta.at("epoch").get<int>();
    result.best_epoch = a.meta.at("best_epoch");
    result.best_val_mean_dice = a.meta.at("best_val_mean_dice");
    for (const auto& e : a.meta.at("history")) result.history.push_back(epoch_from_json(e));
  } else {
    std::ofstream(out_dir / "steps.csv") << "epoch,step,alpha,seg_loss,clf_loss,total_loss\n";
  }

  SegLossConfig seg_cfg{cfg.dice, cfg.dynamic_ce_weights};
  AugmentConfig aug;
  aug.enabled = cfg.augment;
  aug.mirror = {false, false, false};
  for (int a : cfg.mirror_axes) aug.mirror[static_cast<std::size_t>(a)] = true;
  InferenceConfig infer = cfg.validation;
  infer.patch = cfg.patch();
  const int steps = cfg.steps_per_epoch > 0
                        ? cfg.steps_per_epoch
                        : static_cast<int>((seg_data.size() + static_cast<std::size_t>(cfg.seg_batch_size) - 1) /
                                           static_cast<std::size_t>(cfg.seg_batch_size));
  const int C = static_cast<int>(net_cfg.num_classes);
  const Index div = model.size_divisor();
  auto params = model.parameters();

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t es = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
    std::mt19937_64 rng(derive_seed(es, 0));
    Sampler seg_sampler = make_sampler(seg_records, cfg.oversample_missing, derive_seed(es, 1));
    std::optional<Sampler> clf_sampler;
    if (use_clf) clf_sampler = make_sampler(clf_records, cfg.oversample_missing, derive_seed(es, 2));

    EpochLog log;
    log.epoch = epoch;
    log.lr_seg = poly_lr(cfg.lr_seg, epoch, cfg.epochs, cfg.poly_exponent);
    log.lr_clf = poly_lr(cfg.lr_clf, epoch, cfg.epochs, cfg.poly_exponent);
    std::vector<StepLog> step_logs;
    model.set_training(true);

    for (int step = 0; step < steps; ++step) {
      model.zero_grad();
      StepLog sl{epoch, step, 0.0, 0.0, 0.0, weights.alpha};

      // voxel-labelled batch
      std::vector<Tensor5<float>> imgs;
      std::vector<LabelMap> labs;
      std::vector<const ExistenceVector*> flags;
      for (std::size_t i : seg_sampler.next_batch(static_cast<std::size_t>(cfg.seg_batch_size))) {
        Patch p = extract_patch(seg_data[i].volume, *seg_data[i].labels, cfg.patch(), rng, cfg.foreground_fraction, aug);
        imgs.push_back(std::move(p.image));
        labs.push_back(std::move(p.labels));
        flags.push_back(&seg_data[i].flags);
      }
      const Tensor5<float> x = stack(imgs);
      const Tensor5<float> target = one_hot_batch<float>(labs, C);
      const Matrix<float> e = flag_matrix(flags);
      const auto out = model.forward(x, net_cfg.fusion_enabled ? &e : nullptr,
                                     {.segmentation = true, .classification = false});
      std::vector<Tensor5<float>> seg_grads;
      sl.seg_loss = seg_loss(out.deep_supervision_logits, target, seg_cfg, &seg_grads);
      for (auto& g : seg_grads) g.array() *= static_cast<float>(weights.alpha);
      model.backward({seg_grads, Matrix<float>()});

      // image-label batch
      if (use_clf) {
        std::vector<Tensor5<float>> vols;
        std::vector<const ExistenceVector*> cflags;
        for (std::size_t i : clf_sampler->next_batch(static_cast<std::size_t>(cfg.clf_batch_size))) {
          Tensor5<float> v = volume_tensor(clf_data[i].volume, div);
          if (aug.enabled) {
            for (int a = 0; a < 3; ++a)
              if (uniform(rng) < aug.flip_probability && aug.mirror[a]) flip_axis(v, nullptr, a);
            intensity_augment(v, rng, aug);
          }
          vols.push_back(std::move(v));
          cflags.push_back(&clf_data[i].flags);
        }
        const auto cout = model.forward(stack(vols), nullptr, {.segmentation = false, .classification = true});
        Matrix<float> g;
        sl.clf_loss = clf_loss<float>(cout.existence_logits, flag_matrix(cflags), weights.clf_class_weights, &g);
        g *= static_cast<float>(1.0 - weights.alpha);
        model.backward({{}, g});
      }
      sl.total_loss = combined_loss(sl.seg_loss, sl.clf_loss, weights.alpha);
      if (!std::isfinite(sl.total_loss))
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(step) + " (seg loss " + num(sl.seg_loss) + ", clf loss " +
                              num(sl.clf_loss) + "); lower lr_seg/lr_clf or raise dice.epsilon");
      opt.step(params, log.lr_seg, log.lr_clf);
      if (hooks.after_step) hooks.after_step(epoch, step, model);
      log.seg_loss += sl.seg_loss / steps;
      log.clf_loss += sl.clf_loss / steps;
      log.total_loss += sl.total_loss / steps;
      step_logs.push_back(sl);
    }

    model.set_training(false);
    const Validation v = validate_model(model, val_data, manifest.class_names, infer);
    log.val_mean_dice = v.mean_dice;
    log.val_dice = v.dice;
    log.val_balanced_accuracy = v.balanced_accuracy;
    result.history.push_back(log);
    result.steps.insert(result.steps.end(), step_logs.begin(), step_logs.end());

    const bool improved = result.best_epoch < 0 || v.mean_dice > result.best_val_mean_dice;
    if (improved) {
      result.best_epoch = epoch;
      result.best_val_mean_dice = v.mean_dice;
    }
    save_checkpoint(result.last_checkpoint, model, opt, cfg, epoch + 1, result.best_epoch, result.best_val_mean_dice,
                    result.history);
    if (improved) fs::copy_file(result.last_checkpoint, result.best_checkpoint, fs::copy_options::overwrite_existing);
    std::vector<std::string> organs(manifest.class_names.begin() + 1, manifest.class_names.end());
    write_logs(out_dir, result.history, step_logs, organs);
    if (hooks.on_epoch) hooks.on_epoch(log);
  }
  result.epochs_completed = cfg.epochs;
  return result;
}

UNet<float> load_checkpoint(const fs::path& path, json* meta) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path.string());
  const WeightArchive a = read_archive(path);
  UNet<float> model = model_from_archive<float>(a);
  if (meta) *meta = a.meta;
  return model;
}

}  // namespace halos
