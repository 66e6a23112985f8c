#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metasparse/model.hpp"
#include "metasparse/sparsity.hpp"
#include "metasparse/synth.hpp"

namespace metasparse {

/// Raised when a loss turns non-finite; the CLI maps it to exit code 3.
class NumericDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean squared error for regression, mean binary cross-entropy on logits otherwise.
Tensor task_loss(TaskKind kind, const Tensor& predictions, const Tensor& labels);

/// sum_i l_i / (2 sigma_i^2) + log sigma_i with sigma_i = exp(log_sigmas[i]).
Tensor combine_uncertainty(std::span<const Tensor> losses, std::span<const Tensor> log_sigmas);

/// Loss of one training episode: the plain task loss for a single task and the
/// uncertainty-weighted combination otherwise.
Tensor episode_loss(const MultiTaskModel& model, const std::vector<int>& tasks, const Tensor& inputs,
                    const std::map<int, Tensor>& labels, std::map<int, double>* per_task = nullptr);

struct AdamConfig {
  double lr_backbone = 1e-5;
  double lr_heads = 1e-4;  // heads and noise scales
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

double learning_rate(const AdamConfig& config, ParameterRole role);

using GradientMap = std::map<std::string, Vector>;

class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  /// One update of every parameter that has an entry in `grads`.
  void step(const std::vector<NamedParameter>& params, const GradientMap& grads);
  /// Scalar variant with its own state slot.
  double step_scalar(const std::string& key, double value, double grad, double lr);
  const AdamConfig& config() const { return config_; }
  /// lr / (RMS of sqrt(v_hat) over the parameter + eps); lr where no state exists.
  double layer_step(const std::string& key, double lr) const;

 private:
  struct Moments {
    Vector m, v;
    long t = 0;
  };
  Moments& moments(const std::string& key, Index size);
  double update(Moments& s, Index i, double g, double lr) const;

  AdamConfig config_;
  std::map<std::string, Moments> state_;
};

/// How the prox step size is chosen after an Adam step.
enum class ProxMetric {
  /// alpha = learning rate.
  plain,
  /// alpha = learning rate / RMS over the layer of sqrt(v_hat): the step Adam
  /// actually takes at layer granularity. A group then collapses once its
  /// first moment falls below lambda times the layer's gradient scale.
  layer_adaptive
};

/// Applies the group prox to every governed weight not listed in `skip`.
void prox_governed(const std::vector<GovernedWeight>& governed, const Adam& adam, ProxMetric metric, double lr,
                   double lambda, const std::set<std::string>& skip = {});

/// Snapshot of every parameter's current gradient, keyed by id.
GradientMap collect_gradients(const std::vector<NamedParameter>& params);
void zero_gradients(const std::vector<NamedParameter>& params);

struct TrainConfig {
  int max_epochs = 100;
  Index batch_size = 16;
  AdamConfig adam;
  int patience = 15;
  /// Constant group-lasso strength; 0 disables the prox.
  double lambda = 0.0;
  ProxMetric prox_metric = ProxMetric::plain;
  std::uint64_t seed = 0;
};

struct EpochRow {
  int epoch = 0;
  std::map<int, double> task_loss;  // mean training loss per task
  double combined_loss = 0.0;
  double val_loss = 0.0;
  double parameter_sparsity = 0.0;
  double group_sparsity = 0.0;
  double lambda = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

struct TrainOptions {
  /// Enforced after every optimizer step.
  const MaskSet* masks = nullptr;
  /// Parameter ids that never change.
  std::set<std::string> frozen;
  /// Called after each epoch with the 1-based epoch index.
  std::function<void(const MultiTaskModel&, const EpochRow&)> on_epoch;
  /// Training sample ids; the train split when empty.
  std::vector<Index> train_ids;
  std::vector<Index> val_ids;
};

struct EvalResult {
  std::map<int, double> task_loss;
  double combined = 0.0;
};

/// Loss on a fixed sample set without recording a graph.
EvalResult evaluate(const MultiTaskModel& model, const std::vector<int>& tasks, const Dataset& data,
                    std::span<const Index> ids, Index batch_size = 256);

/// Adam on the episode loss with the prox applied to backbone weights after
/// every step (alpha = backbone learning rate). Stops after `patience` epochs
/// without a new best validation loss. Throws NumericDivergence on a
/// non-finite loss and std::invalid_argument when `tasks` is empty.
TrainResult mtl_train(MultiTaskModel& model, const std::vector<int>& tasks, const Dataset& data,
                      const TrainConfig& config, const TrainOptions& options = {});

/// mtl_train with `masks` re-applied after every step and applied once up front.
TrainResult finetune_masked(MultiTaskModel& model, const MaskSet& masks, const std::vector<int>& tasks,
                            const Dataset& data, const TrainConfig& config, TrainOptions options = {});

}  // namespace metasparse
