#pragma once

#include <random>
#include <vector>

#include "metasparse/config.hpp"
#include "metasparse/model.hpp"
#include "metasparse/mtl.hpp"
#include "metasparse/sparsity.hpp"
#include "metasparse/synth.hpp"

namespace metasparse {

struct ScheduleConfig {
  MaskSource source = MaskSource::magnitude_groups;
  /// Target share of masked governed entries; ignored for meta masks, whose
  /// own share is the target.
  double budget = 0.0;
  int steps = 1;
  /// Training epochs between prune events of the progressive schedule.
  int prune_interval = 5;
  TrainConfig train;
  /// Required for MaskSource::meta_mask.
  const MaskSet* meta_mask = nullptr;
};

struct ScheduleResult {
  MultiTaskModel model;
  MaskSet masks;
  /// Every training epoch, renumbered consecutively across phases.
  std::vector<EpochRow> rows;
  /// Masked percent after each prune event.
  std::vector<double> step_percent;
  double achieved_percent = 0.0;
};

/// Pruning order of a mask source. For meta masks only the groups the meta
/// mask removes appear, smallest norm first.
GroupOrder mask_order(std::span<const GovernedWeight> governed, MaskSource source, const MaskSet* meta_mask,
                      std::mt19937_64& rng);

/// Mask at `budget` from `dense`, then masked fine-tuning.
ScheduleResult schedule_one_shot(const MultiTaskModel& dense, const std::vector<int>& tasks, const Dataset& data,
                                 const ScheduleConfig& config, std::mt19937_64& rng);

/// `steps` rounds of pruning toward budget * k / steps, each followed by
/// fine-tuning to patience. Masks only grow.
ScheduleResult schedule_iterative(const MultiTaskModel& dense, const std::vector<int>& tasks, const Dataset& data,
                                  const ScheduleConfig& config, std::mt19937_64& rng);

/// From `init`: `prune_interval` epochs of training before each of the
/// `steps` prune events, then training to patience under the final mask.
ScheduleResult schedule_progressive(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                                    const ScheduleConfig& config, std::mt19937_64& rng);

/// Mask drawn once from `init` and enforced through the whole run.
ScheduleResult schedule_sparse_training(const MultiTaskModel& init, const std::vector<int>& tasks,
                                        const Dataset& data, const ScheduleConfig& config, std::mt19937_64& rng);

ScheduleResult run_schedule(Schedule schedule, const MultiTaskModel& start, const std::vector<int>& tasks,
                            const Dataset& data, const ScheduleConfig& config, std::mt19937_64& rng);

}  // namespace metasparse
