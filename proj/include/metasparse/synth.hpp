#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "metasparse/model.hpp"
#include "metasparse/tensor.hpp"

namespace metasparse {

struct SynthConfig {
  int n_tasks = 4;
  /// Task 1 is classification, the remaining tasks regress, unless this is changed.
  int n_classification = 1;
  Index n_samples = 2000;
  Index channels = 8;
  Index height = 8;
  Index width = 8;
  /// Channels that carry signal for at least one task.
  Index channel_budget = 4;
  /// Share of the other planted channels each task reads besides its home channel.
  double overlap = 0.5;
  double label_noise = 0.05;
  double pixel_noise = 1.0;
  /// train, val, test, support, query
  std::vector<double> split_fractions{0.6, 0.1, 0.1, 0.1, 0.1};
  std::uint64_t seed = 0;
};

struct TaskSpec {
  int task_id = 1;
  TaskKind kind = TaskKind::regression;
  std::vector<Index> relevant_channels;
  Vector weights;  // one entry per relevant channel
  double noise_std = 0.0;

  /// weights . (per-channel spatial mean over the relevant channels).
  double statistic(const double* sample, Index height, Index width) const;
  /// Regression: statistic + noise. Classification: 1 if statistic + noise > 0.
  double label(const double* sample, Index height, Index width, double noise_draw) const;
};

struct SplitDataset {
  std::vector<Index> train, val, test, support, query;
};

class Dataset {
 public:
  const SynthConfig& config() const { return config_; }
  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  const TaskSpec& task(int task_id) const;
  const SplitDataset& splits() const { return splits_; }
  Index size() const { return static_cast<Index>(inputs_.rows()); }
  Index sample_width() const { return static_cast<Index>(inputs_.cols()); }
  /// Channels no task reads.
  std::vector<Index> irrelevant_channels() const;
  std::vector<Index> relevant_channels() const;

  const RowMatrix& inputs() const { return inputs_; }
  RowMatrix& mutable_inputs() { return inputs_; }
  const RowMatrix& labels() const { return labels_; }
  /// Standard normal draw per (sample, task) used for label noise.
  const RowMatrix& noise() const { return noise_; }
  /// Recomputes every label from the current inputs and stored noise draws.
  void relabel();

  /// [B, C, H, W] inputs for the given sample ids.
  Tensor batch_inputs(std::span<const Index> ids) const;
  /// [B, 1] labels of one task.
  Tensor batch_labels(int task_id, std::span<const Index> ids) const;

  /// Binary records plus a JSON manifest beside them.
  void save(const std::filesystem::path& records, const std::filesystem::path& manifest) const;
  static Dataset load(const std::filesystem::path& records, const std::filesystem::path& manifest);

  friend Dataset generate(const SynthConfig& config);

 private:
  Index column(int task_id) const;

  SynthConfig config_;
  std::vector<TaskSpec> tasks_;
  SplitDataset splits_;
  RowMatrix inputs_;  // [n, C*H*W], channel-major per sample
  RowMatrix labels_;  // [n, tasks]
  RowMatrix noise_;   // [n, tasks]
};

/// Throws std::invalid_argument when the budget leaves no irrelevant channel,
/// there are fewer planted channels than tasks can share, or splits do not fit.
Dataset generate(const SynthConfig& config);

}  // namespace metasparse
