#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "metasparse/meta.hpp"
#include "metasparse/mtl.hpp"
#include "metasparse/sparsity.hpp"
#include "metasparse/synth.hpp"

namespace metasparse {

/// Rejected configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mode { single_task, mtl, mtl_fixed_sparsity, meta_baseline, meta_sparsity, baseline_schedule };
enum class Schedule { one_shot, iterative, progressive, sparse_training };
enum class MaskSource { magnitude_groups, random_groups, meta_mask };

const char* to_string(Mode mode);
const char* to_string(Schedule schedule);
const char* to_string(MaskSource source);
const char* to_string(SparsityMode mode);
Mode mode_from_string(const std::string& name);
Schedule schedule_from_string(const std::string& name);
MaskSource mask_source_from_string(const std::string& name);
SparsityMode sparsity_mode_from_string(const std::string& name);

bool is_meta(Mode mode);

/**
 * One experiment. Mode-specific fields are optional and must be present
 * exactly when the mode (and schedule / mask strategy) uses them.
 */
struct RunConfig {
  Mode mode = Mode::mtl;
  SparsityMode sparsity_mode = SparsityMode::structured;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  // Synthetic suite; the dataset of seed s is generated with data_seed + s.
  std::uint64_t data_seed = 1000;
  Index n_samples = 2000;
  Index channel_budget = 4;
  double overlap = 0.5;

  // Supervised training and every fine-tuning phase.
  double lr_backbone = 1e-5;
  double lr_heads = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index batch_size = 16;
  int max_epochs = 100;
  int patience = 15;

  std::optional<int> task;       // single_task
  std::optional<double> lambda;  // single_task, mtl_fixed_sparsity

  // meta_baseline, meta_sparsity
  std::optional<int> meta_max_epochs;
  std::optional<int> inner_steps;
  std::optional<double> alpha_in;
  std::optional<double> meta_lr_backbone;
  std::optional<double> meta_lr_heads;
  std::optional<int> sparsity_patience;   // meta_sparsity
  std::optional<double> penalty_weight;   // meta_sparsity
  std::optional<double> regrow_prob;      // meta_sparsity

  // baseline_schedule
  std::optional<Schedule> schedule;
  std::optional<MaskSource> mask_strategy;
  std::optional<double> budget;                       // omitted with meta_mask: taken from the mask
  std::optional<int> steps;                           // iterative, progressive
  std::optional<int> prune_interval;                  // progressive
  std::optional<std::filesystem::path> meta_checkpoint;  // meta_mask

  bool operator==(const RunConfig&) const = default;

  /// Fills every optional field the mode uses but the file left out.
  void fill_defaults();
  /// Throws ConfigError on out-of-range values, missing required fields and
  /// fields the mode does not use.
  void validate() const;

  SynthConfig synth(std::uint64_t seed) const;
  TrainConfig train(std::uint64_t seed) const;
  MetaConfig meta(std::uint64_t seed) const;

  /// Canonical "key = value" text; present optional fields only.
  std::string serialize() const;
  /// FNV-1a 64 of the canonical text without the seed list.
  std::uint64_t hash() const;
};

/// Raw "key = value" lines; '#' starts a comment. Throws ConfigError on
/// malformed lines and duplicate keys.
std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Applies `values` on top of `config`. Throws ConfigError on unknown keys or
/// unparsable values.
void apply_values(RunConfig& config, const std::map<std::string, std::string>& values);

/// parse_key_values + apply_values on a default config, without validation.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

std::string hex_hash(std::uint64_t hash);

}  // namespace metasparse
