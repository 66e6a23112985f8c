#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metasparse/model.hpp"
#include "metasparse/mtl.hpp"
#include "metasparse/sparsity.hpp"
#include "metasparse/synth.hpp"

namespace metasparse {

struct Episode {
  std::vector<int> task_ids;
};

/// Every nonempty subset of `tasks`, ordered by subset bitmask (bit i = tasks[i]).
/// Throws std::invalid_argument unless 1 <= tasks.size() <= 10.
std::vector<Episode> enumerate_episodes(const std::vector<int>& tasks);

/// Uniform index in [0, count).
std::size_t sample_episode(std::size_t count, std::mt19937_64& rng);

/// Inputs plus per-task labels drawn from one sample set.
struct Batch {
  Tensor inputs;
  std::map<int, Tensor> labels;
};

Batch make_batch(const Dataset& data, const std::vector<int>& tasks, std::span<const Index> ids);

using LossFn = std::function<Tensor()>;

/// `steps` plain gradient steps of size alpha on `params` in place, re-evaluating
/// `loss` each time. Returns false (leaving params at the last finite point)
/// if the loss becomes non-finite.
bool gradient_steps(const std::vector<Tensor>& params, const LossFn& loss, int steps, double alpha);

/// Copy of `meta` after `steps` gradient steps on the episode loss over `support`.
/// No prox is applied. Empty when the support loss is non-finite.
std::optional<MultiTaskModel> inner_adapt(const MultiTaskModel& meta, const Episode& episode, const Batch& support,
                                          int steps, double alpha_in);

/// Re-draws each all-zero group of the backbone with probability r_p and marks
/// it active in `masks` when given. Returns the number of regrown groups.
/// Throws std::invalid_argument unless 0 <= r_p < 1.
int regrow(Backbone& backbone, double r_p, std::mt19937_64& rng, MaskSet* masks = nullptr);

struct SparsityTerm {
  bool enabled = true;
  double lambda_raw = 0.0;
  double beta = 1.0;
  /// Scales the penalty; 0 turns meta-sparsity into the plain meta baseline.
  double weight = 1.0;

  double lambda() const;
};

struct MetaGradient {
  /// First-order gradient of the query loss at the adapted parameters.
  GradientMap theta;
  /// d(lambda * P(adapted backbone)) / d lambda_raw.
  double lambda_raw = 0.0;
  double query_loss = 0.0;
  /// sum_g sqrt(n_g) ||theta_g|| at the adapted backbone.
  double group_norm = 0.0;
};

/// Inner adaptation on `support` followed by the query evaluation. Empty when
/// the episode is skipped; throws NumericDivergence on a non-finite query loss.
std::optional<MetaGradient> meta_gradient(const MultiTaskModel& meta, const Episode& episode, const Batch& support,
                                          const Batch& query, int inner_steps, double alpha_in,
                                          const SparsityTerm& sparsity);

enum class OuterOptimizer { adam, sgd };

struct MetaConfig {
  int max_epochs = 300;
  Index batch_size = 16;
  int inner_steps = 1;
  double alpha_in = 1e-4;
  /// Outer learning rates; lambda_raw uses the backbone rate.
  AdamConfig outer;
  OuterOptimizer outer_optimizer = OuterOptimizer::adam;
  ProxMetric prox_metric = ProxMetric::plain;
  double regrow_prob = 0.0;
  int patience = 15;
  int sparsity_patience = 30;
  bool learn_sparsity = true;
  double penalty_weight = 1.0;
  double lambda_floor = 1e-8;
  double beta = 1.0;
  double lambda_init_low = 0.1;
  double lambda_init_high = 1.0;
  std::uint64_t seed = 0;
};

struct MetaEpochRow {
  int epoch = 0;
  double query_loss = 0.0;
  double val_loss = 0.0;
  double parameter_sparsity = 0.0;
  double group_sparsity = 0.0;
  double lambda = 0.0;
  int episodes = 0;
  int regrown = 0;
};

struct MetaResult {
  MultiTaskModel model;
  SparsityState sparsity;
  std::vector<MetaEpochRow> rows;
  std::vector<int> tasks;
  /// "max_epochs", "val_patience" or "sparsity_patience".
  std::string stop_reason;
  std::mt19937_64 rng;
};

/// First-order meta-training of the initialisation and lambda. Each epoch walks
/// the support split in batches, samples one episode per batch, and applies a
/// single outer update with the averaged episode gradients followed by the
/// group prox on the meta parameters.
MetaResult meta_train(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                      const MetaConfig& config);

/// meta_train with the penalty, prox and lambda update removed.
MetaResult meta_train_baseline(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                               MetaConfig config);

enum class MetaTestRegime { same_tasks, new_task_only, all_tasks_plus_new };

const char* to_string(MetaTestRegime regime);
MetaTestRegime meta_test_regime_from_string(const std::string& name);

struct MetaTestResult {
  MultiTaskModel model;
  MaskSet masks;
  std::vector<int> tasks;
  TrainResult training;
  EvalResult test;
  SparsityMetrics metrics;
};

/// Snapshots the zero pattern of `meta_model`, resets noise scales to 1,
/// attaches heads for `new_tasks` and fine-tunes under masks with lambda frozen.
/// Throws std::invalid_argument when the regime and the task lists disagree.
MetaTestResult meta_test(const MultiTaskModel& meta_model, const std::vector<int>& meta_tasks, MetaTestRegime regime,
                         const std::vector<std::pair<int, TaskKind>>& new_tasks, const Dataset& data,
                         TrainConfig config, const TrainOptions& options = {});

}  // namespace metasparse
