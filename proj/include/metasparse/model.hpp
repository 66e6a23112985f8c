#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "metasparse/sparsity.hpp"
#include "metasparse/tensor.hpp"

namespace metasparse {

enum class TaskKind { regression, binary_classification };

const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct BackboneConfig {
  /// [C_in, C_1, ..., C_L]; L >= 2 conv layers.
  std::vector<Index> channels{8, 8, 8, 8};
  Index kernel = 3;
  /// Skip from the output of conv 1 to the output of conv L.
  bool residual = true;
  Index image_height = 8;
  Index image_width = 8;
  SparsityMode sparsity = SparsityMode::structured;
};

struct ModelSpec {
  BackboneConfig backbone;
  Index head_width = 16;
  std::vector<std::pair<int, TaskKind>> tasks;
};

enum class ParameterRole { backbone_weight, backbone_bias, head, noise };

struct NamedParameter {
  std::string id;
  Tensor tensor;
  ParameterRole role;
  int task_id = -1;  // owning task for heads and noise parameters
};

/// Fan-based (Glorot) uniform initialisation on [-a, a], a = sqrt(6 / (fan_in + fan_out)).
Vector xavier_uniform(Index count, Index fan_in, Index fan_out, std::mt19937_64& rng);

struct ConvLayer {
  std::string id;
  Tensor weight;  // [C_out, C_in, k, k]
  Tensor bias;    // [C_out]
  Index padding = 0;
};

class Backbone {
 public:
  /// Throws std::invalid_argument for fewer than two conv layers or a skip
  /// whose endpoints have different channel counts.
  static Backbone build(const BackboneConfig& config, std::mt19937_64& rng);

  /// [B, C_in, H, W] -> pooled features [B, C_L].
  Tensor forward(const Tensor& input) const;
  /// Post-activation map of the last layer, [B, C_L, H, W].
  Tensor feature_maps(const Tensor& input) const;

  const BackboneConfig& config() const { return config_; }
  Index feature_width() const { return config_.channels.back(); }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  std::vector<GovernedWeight> governed() const;

  /// Re-draws a group of layer `layer`'s weights with the layer's init law.
  void reinitialize_group(std::size_t layer, const std::vector<Index>& group, std::mt19937_64& rng);

  Backbone clone() const;

 private:
  BackboneConfig config_;
  std::vector<ConvLayer> layers_;
  std::vector<GroupPartition> partitions_;
};

struct TaskHead {
  int task_id = 0;
  TaskKind kind = TaskKind::regression;
  Tensor w1, b1, w2, b2;  // [F,width], [width], [width,1], [1]

  static TaskHead build(int task_id, TaskKind kind, Index features, Index width, std::mt19937_64& rng);
  /// features [B, F] -> [B, 1] (regression value or classification logit).
  Tensor forward(const Tensor& features) const;
  TaskHead clone() const;
};

/**
 * Shared convolutional backbone plus one head and one noise scale per task.
 * Noise scales are stored as log sigma so sigma stays positive.
 */
class MultiTaskModel {
 public:
  static MultiTaskModel build(const ModelSpec& spec, std::mt19937_64& rng);

  /// Attaches a freshly initialised head with sigma = 1. Throws if the id exists.
  void add_task(int task_id, TaskKind kind, std::mt19937_64& rng);

  Tensor forward(int task_id, const Tensor& input) const;
  /// Runs the backbone once and every requested head on its features.
  std::map<int, Tensor> forward_tasks(const std::vector<int>& task_ids, const Tensor& input) const;

  bool has_task(int task_id) const { return heads_.count(task_id) != 0; }
  std::vector<int> task_ids() const;
  TaskKind task_kind(int task_id) const;
  const Tensor& log_sigma(int task_id) const;
  void reset_noise();

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  const TaskHead& head(int task_id) const;

  std::vector<NamedParameter> parameters() const;
  std::vector<GovernedWeight> governed() const { return backbone_.governed(); }
  ModelSpec spec() const;

  /// Deep copy; the result shares no storage with this model.
  MultiTaskModel clone() const;

 private:
  void require_task(int task_id) const;

  Index head_width_ = 16;
  Backbone backbone_;
  std::map<int, TaskHead> heads_;
  std::map<int, Tensor> log_sigma_;
};

}  // namespace metasparse
