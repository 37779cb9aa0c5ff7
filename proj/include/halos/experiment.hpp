#pragma once

// Config files for the command-line tool: YAML (or JSON) documents mapped onto
// the module configs, with unknown keys rejected before any work starts.

#include "halos/evaluator.hpp"
#include "halos/phantom.hpp"
#include "halos/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace halos {

/// Schema or value error in a config file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses YAML or JSON into a JSON value. Scalars keep their YAML type
/// (booleans, integers, floats, strings).
nlohmann::json load_config_file(const std::filesystem::path& path);
nlohmann::json yaml_to_json(const std::string& text);

/// Throws ConfigError naming the first key of `given` absent from `allowed`;
/// recurses into objects present in both.
void check_keys(const nlohmann::json& given, const nlohmann::json& allowed, const std::string& where);

/// Applies "dotted.key=value" (value parsed as YAML) to a config document.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// HALOS_SEED, when set to an unsigned integer.
std::optional<std::uint64_t> seed_from_env();

// ----------------------------------------------------------------- generate

struct GenerateConfig {
  PhantomConfig phantom;
  SplitCounts counts{200, 20, 50};
  double voxel_labeled_fraction = 0.5;
  std::filesystem::path output_dir = "data";
};

GenerateConfig generate_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const GenerateConfig& c);

// -------------------------------------------------------------- experiment

enum class Variant { halos, plain, oversample, postproc, batch_red, decoder_classifier, halos_no_fusion };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::vector<Variant> all_variants();

struct ExperimentConfig {
  std::filesystem::path manifest;
  std::filesystem::path output_dir = "runs";
  std::uint64_t seed = 0;
  Variant variant = Variant::halos;
  NetworkConfig network;
  TrainConfig train;
  InferenceConfig inference;
  std::vector<EvalMode> eval_modes;  // empty: what the variant supports
  Split eval_split = Split::test;

  /// Directory holding this variant's checkpoints and reports.
  std::filesystem::path run_dir() const { return output_dir / to_string(variant); }
};

/// Rewrites the network/training settings for a variant. halos keeps them;
/// plain/postproc drop fusion and classifier; oversample adds missing-organ
/// oversampling; batch_red uses batch-level Dice with epsilon 1e-7;
/// decoder_classifier attaches the classifier to the decoder without fusion;
/// halos_no_fusion keeps the encoder classifier without fusion.
void apply_variant(Variant v, NetworkConfig& net, TrainConfig& train);

/// Paths resolve against `base_dir`. HALOS_SEED overrides `seed`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, Variant variant,
                                             const std::filesystem::path& base_dir = {});

/// Fully resolved settings (no paths) as embedded in reports and checkpoints.
nlohmann::json to_json(const ExperimentConfig& c);

/// Default modes for a variant's evaluation.
std::vector<EvalMode> default_eval_modes(Variant v, const NetworkConfig& net);

}  // namespace halos
