#include "halos/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace halos {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json scalar_to_json(const YAML::Node& n) {
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
  if (s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "False" || s == "FALSE") return false;
  std::int64_t i = 0;
  const char* end = s.data() + s.size();
  if (auto [p, ec] = std::from_chars(s.data(), end, i); ec == std::errc() && p == end) return i;
  std::uint64_t u = 0;
  if (auto [p, ec] = std::from_chars(s.data(), end, u); ec == std::errc() && p == end) return u;
  double d = 0.0;
  if (auto [p, ec] = std::from_chars(s.data(), end, d); ec == std::errc() && p == end) return d;
  return s;
}

json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& item : n) a.push_back(node_to_json(item));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) {
        const std::string key = kv.first.as<std::string>();
        if (o.contains(key)) throw ConfigError("duplicate key '" + key + "'");
        o[key] = node_to_json(kv.second);
      }
      return o;
    }
  }
  return nullptr;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

// Runs `f`, turning parse/validation failures into ConfigError prefixed with `where`.
template <typename F>
auto guarded(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

json inference_to_json(const InferenceConfig& c) {
  return {{"overlap", c.overlap},
          {"sigma_scale", c.sigma_scale},
          {"threshold", c.threshold},
          {"window_batch", c.window_batch}};
}

}  // namespace

json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("YAML: ") + e.what());
  }
}

json load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j = yaml_to_json(ss.str());
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be a mapping");
  return j;
}

void check_keys(const json& given, const json& allowed, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + " must be a mapping");
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!allowed.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (allowed.at(key).is_object() && !allowed.at(key).empty()) check_keys(value, allowed.at(key), path);
  }
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  json* node = &config;
  std::stringstream keys(assignment.substr(0, eq));
  std::string key;
  while (std::getline(keys, key, '.')) {
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-mapping");
    node = &(*node)[key];
  }
  *node = yaml_to_json(assignment.substr(eq + 1));
}

std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("HALOS_SEED");
  if (!s || !*s) return std::nullopt;
  std::uint64_t v = 0;
  const char* end = s + std::char_traits<char>::length(s);
  if (auto [p, ec] = std::from_chars(s, end, v); ec != std::errc() || p != end)
    throw ConfigError("HALOS_SEED must be an unsigned integer, got '" + std::string(s) + "'");
  return v;
}

// ----------------------------------------------------------------- generate

json to_json(const GenerateConfig& c) {
  return {{"grid_size", c.phantom.grid_size},
          {"removable_organs", c.phantom.removable_organs},
          {"resection_probability", c.phantom.resection_probability},
          {"noise_std", c.phantom.noise_std},
          {"tissue_intensity", c.phantom.tissue_intensity},
          {"voxel_spacing_mm", c.phantom.voxel_spacing_mm},
          {"seed", c.phantom.seed},
          {"counts", {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}}},
          {"voxel_labeled_fraction", c.voxel_labeled_fraction},
          {"output_dir", c.output_dir.string()}};
}

GenerateConfig generate_config_from_json(const json& j, const fs::path& base_dir) {
  GenerateConfig c;
  c.phantom = default_phantom_config();
  json allowed = to_json(c);
  allowed["resection_probability"] = json::object();  // free-form organ keys
  check_keys(j, allowed, "");
  return guarded("generate config", [&] {
    c.phantom.grid_size = j.value("grid_size", c.phantom.grid_size);
    c.phantom.removable_organs = j.value("removable_organs", c.phantom.removable_organs);
    if (j.contains("resection_probability"))
      c.phantom.resection_probability = j.at("resection_probability").get<std::map<std::string, double>>();
    c.phantom.noise_std = j.value("noise_std", c.phantom.noise_std);
    c.phantom.tissue_intensity = j.value("tissue_intensity", c.phantom.tissue_intensity);
    c.phantom.voxel_spacing_mm = j.value("voxel_spacing_mm", c.phantom.voxel_spacing_mm);
    c.phantom.seed = j.value("seed", c.phantom.seed);
    if (const auto env = seed_from_env()) c.phantom.seed = *env;
    if (j.contains("counts")) {
      const json& n = j.at("counts");
      c.counts.train = n.value("train", c.counts.train);
      c.counts.val = n.value("val", c.counts.val);
      c.counts.test = n.value("test", c.counts.test);
    }
    c.voxel_labeled_fraction = j.value("voxel_labeled_fraction", c.voxel_labeled_fraction);
    c.output_dir = resolve(j.value("output_dir", c.output_dir.string()), base_dir);
    c.phantom.validate();
    if (c.counts.train < 0 || c.counts.val < 0 || c.counts.test < 0)
      throw std::invalid_argument("counts must be >= 0");
    if (!(c.voxel_labeled_fraction >= 0.0 && c.voxel_labeled_fraction <= 1.0))
      throw std::invalid_argument("voxel_labeled_fraction must lie in [0, 1]");
    return c;
  });
}

// -------------------------------------------------------------- experiment

std::string to_string(Variant v) {
  switch (v) {
    case Variant::halos: return "halos";
    case Variant::plain: return "plain";
    case Variant::oversample: return "oversample";
    case Variant::postproc: return "postproc";
    case Variant::batch_red: return "batch_red";
    case Variant::decoder_classifier: return "decoder_classifier";
    case Variant::halos_no_fusion: return "halos_no_fusion";
  }
  return "?";
}

std::vector<Variant> all_variants() {
  return {Variant::halos,    Variant::plain,     Variant::oversample,        Variant::postproc,
          Variant::batch_red, Variant::decoder_classifier, Variant::halos_no_fusion};
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s +
                    "' (expected halos, plain, oversample, postproc, batch_red, decoder_classifier or halos_no_fusion)");
}

void apply_variant(Variant v, NetworkConfig& net, TrainConfig& train) {
  switch (v) {
    case Variant::halos:
      net.fusion_enabled = true;
      net.classifier_enabled = true;
      net.classifier_site = ClassifierSite::encoder;
      break;
    case Variant::plain:
    case Variant::postproc: net = baseline_config(net, BaselineKind::plain); break;
    case Variant::oversample:
      net = baseline_config(net, BaselineKind::plain);
      train.oversample_missing = true;
      break;
    case Variant::batch_red:
      net = baseline_config(net, BaselineKind::plain);
      train.dice.batch_reduction = true;
      train.dice.epsilon = 1e-7;
      break;
    case Variant::decoder_classifier: net = baseline_config(net, BaselineKind::decoder_classifier); break;
    case Variant::halos_no_fusion:
      net.fusion_enabled = false;
      net.classifier_enabled = true;
      net.classifier_site = ClassifierSite::encoder;
      break;
  }
}

ExperimentConfig experiment_config_from_json(const json& j, Variant variant, const fs::path& base_dir) {
  ExperimentConfig c;
  const json net_keys = without(to_json(NetworkConfig{}), {"seed", "norm", "num_classes", "num_removable_organs",
                                                            "fusion_enabled", "classifier_enabled",
                                                            "classifier_site"});
  const json train_keys = without(to_json(TrainConfig{}), {"seed", "oversample_missing", "validation"});
  const json allowed = {{"manifest", ""},
                        {"output_dir", ""},
                        {"seed", 0},
                        {"network", net_keys},
                        {"train", train_keys},
                        {"inference", inference_to_json(InferenceConfig{})},
                        {"evaluation", {{"modes", json::array()}, {"split", "test"}}}};
  check_keys(j, allowed, "");
  if (!j.contains("manifest")) throw ConfigError("experiment config: 'manifest' is required");

  return guarded("experiment config", [&] {
    c.variant = variant;
    c.manifest = resolve(j.at("manifest").get<std::string>(), base_dir);
    c.output_dir = resolve(j.value("output_dir", c.output_dir.string()), base_dir);
    c.seed = j.value("seed", c.seed);
    if (const auto env = seed_from_env()) c.seed = *env;
    if (j.contains("network")) c.network = network_config_from_json(j.at("network"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("inference")) {
      const json& i = j.at("inference");
      c.inference.overlap = i.value("overlap", c.inference.overlap);
      c.inference.sigma_scale = i.value("sigma_scale", c.inference.sigma_scale);
      c.inference.threshold = i.value("threshold", c.inference.threshold);
      c.inference.window_batch = i.value("window_batch", c.inference.window_batch);
    }
    if (j.contains("evaluation")) {
      const json& e = j.at("evaluation");
      for (const auto& m : e.value("modes", json::array())) c.eval_modes.push_back(eval_mode_from_string(m));
      c.eval_split = split_from_string(e.value("split", std::string("test")));
    }
    c.network.seed = c.seed;
    c.train.seed = c.seed;
    apply_variant(variant, c.network, c.train);
    c.network.norm = c.train.norm;
    c.inference.patch = c.train.patch();
    c.train.validation = c.inference;
    c.network.validate();
    c.train.validate(c.network);
    if (!(c.inference.overlap >= 0.0 && c.inference.overlap < 1.0))
      throw std::invalid_argument("inference.overlap must lie in [0, 1)");
    if (!(c.inference.sigma_scale > 0.0)) throw std::invalid_argument("inference.sigma_scale must be positive");
    if (c.inference.window_batch < 1) throw std::invalid_argument("inference.window_batch must be >= 1");
    const auto ok = supported_modes(c.network);
    for (EvalMode m : c.eval_modes)
      if (std::find(ok.begin(), ok.end(), m) == ok.end())
        throw std::invalid_argument("evaluation mode '" + to_string(m) + "' is not available for variant " +
                                    to_string(variant));
    return c;
  });
}

json to_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (EvalMode m : c.eval_modes) modes.push_back(to_string(m));
  return {{"variant", to_string(c.variant)},
          {"seed", c.seed},
          {"network", to_json(c.network)},
          {"train", to_json(c.train)},
          {"inference", inference_to_json(c.inference)},
          {"evaluation", {{"modes", modes}, {"split", to_string(c.eval_split)}}}};
}

std::vector<EvalMode> default_eval_modes(Variant v, const NetworkConfig& net) {
  if (v == Variant::postproc) return {EvalMode::raw, EvalMode::postproc};
  if (!net.fusion_enabled) return {EvalMode::raw};
  return supported_modes(net);
}

}  // namespace halos
