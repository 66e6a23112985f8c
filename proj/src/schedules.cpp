#include "metasparse/schedules.hpp"

#include <algorithm>
#include <stdexcept>

namespace metasparse {

namespace {

bool group_masked(const MaskArray& mask, const std::vector<Index>& group) {
  return std::all_of(group.begin(), group.end(), [&](Index j) { return !mask[j]; });
}

void check(const ScheduleConfig& config) {
  if (config.steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (config.prune_interval < 1) throw std::invalid_argument("schedule: prune interval must be >= 1");
  if (config.source == MaskSource::meta_mask) {
    if (!config.meta_mask) throw std::invalid_argument("schedule: meta mask source without a mask");
  } else if (!(config.budget >= 0.0 && config.budget < 100.0)) {
    throw std::invalid_argument("schedule: budget must lie in [0, 100)");
  }
}

double target(const ScheduleConfig& config) {
  return config.source == MaskSource::meta_mask ? masked_percent(*config.meta_mask) : config.budget;
}

/// Masks after prune event k of n, grown from `current`.
MaskSet prune_event(const MultiTaskModel& model, const ScheduleConfig& config, const MaskSet& current, int k, int n,
                    std::mt19937_64& rng) {
  const auto governed = model.governed();
  if (config.source == MaskSource::meta_mask && k == n) {
    MaskSet out = current;
    for (auto& [id, mask] : out) mask = mask && config.meta_mask->at(id);
    return out;
  }
  const GroupOrder order = mask_order(governed, config.source, config.meta_mask, rng);
  return prune_in_order(governed, order, target(config) * double(k) / double(n), &current).masks;
}

void append_rows(ScheduleResult& result, const TrainResult& training) {
  const int offset = result.rows.empty() ? 0 : result.rows.back().epoch;
  for (EpochRow row : training.rows) {
    row.epoch += offset;
    result.rows.push_back(row);
  }
}

ScheduleResult start_from(const MultiTaskModel& model) {
  ScheduleResult r{model.clone(), {}, {}, {}, 0.0};
  r.masks = all_active(r.model.governed());
  return r;
}

}  // namespace

GroupOrder mask_order(std::span<const GovernedWeight> governed, MaskSource source, const MaskSet* meta_mask,
                      std::mt19937_64& rng) {
  switch (source) {
    case MaskSource::magnitude_groups:
      return magnitude_order(governed);
    case MaskSource::random_groups:
      return random_order(governed, rng);
    case MaskSource::meta_mask: {
      if (!meta_mask) throw std::invalid_argument("mask_order: meta mask source without a mask");
      GroupOrder order;
      for (const auto& entry : magnitude_order(governed)) {
        const auto& gw = governed[entry.first];
        auto it = meta_mask->find(gw.partition.parameter_id);
        if (it == meta_mask->end()) throw std::invalid_argument("mask_order: meta mask lacks " + gw.partition.parameter_id);
        if (group_masked(it->second, gw.partition.groups[entry.second])) order.push_back(entry);
      }
      return order;
    }
  }
  throw std::invalid_argument("mask_order: unknown source");
}

ScheduleResult schedule_one_shot(const MultiTaskModel& dense, const std::vector<int>& tasks, const Dataset& data,
                                 const ScheduleConfig& config, std::mt19937_64& rng) {
  ScheduleConfig one = config;
  one.steps = 1;
  return schedule_iterative(dense, tasks, data, one, rng);
}

ScheduleResult schedule_iterative(const MultiTaskModel& dense, const std::vector<int>& tasks, const Dataset& data,
                                  const ScheduleConfig& config, std::mt19937_64& rng) {
  check(config);
  ScheduleResult r = start_from(dense);
  for (int k = 1; k <= config.steps; ++k) {
    r.masks = prune_event(r.model, config, r.masks, k, config.steps, rng);
    r.step_percent.push_back(masked_percent(r.masks));
    append_rows(r, finetune_masked(r.model, r.masks, tasks, data, config.train));
  }
  r.achieved_percent = masked_percent(r.masks);
  return r;
}

ScheduleResult schedule_progressive(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                                    const ScheduleConfig& config, std::mt19937_64& rng) {
  check(config);
  ScheduleResult r = start_from(init);
  TrainConfig burst = config.train;
  burst.max_epochs = config.prune_interval;
  burst.patience = config.prune_interval + 1;
  for (int k = 1; k <= config.steps; ++k) {
    append_rows(r, finetune_masked(r.model, r.masks, tasks, data, burst));
    r.masks = prune_event(r.model, config, r.masks, k, config.steps, rng);
    r.step_percent.push_back(masked_percent(r.masks));
  }
  append_rows(r, finetune_masked(r.model, r.masks, tasks, data, config.train));
  r.achieved_percent = masked_percent(r.masks);
  return r;
}

ScheduleResult schedule_sparse_training(const MultiTaskModel& init, const std::vector<int>& tasks,
                                        const Dataset& data, const ScheduleConfig& config, std::mt19937_64& rng) {
  check(config);
  ScheduleResult r = start_from(init);
  r.masks = prune_event(r.model, config, r.masks, 1, 1, rng);
  r.step_percent.push_back(masked_percent(r.masks));
  append_rows(r, finetune_masked(r.model, r.masks, tasks, data, config.train));
  r.achieved_percent = masked_percent(r.masks);
  return r;
}

ScheduleResult run_schedule(Schedule schedule, const MultiTaskModel& start, const std::vector<int>& tasks,
                            const Dataset& data, const ScheduleConfig& config, std::mt19937_64& rng) {
  switch (schedule) {
    case Schedule::one_shot:
      return schedule_one_shot(start, tasks, data, config, rng);
    case Schedule::iterative:
      return schedule_iterative(start, tasks, data, config, rng);
    case Schedule::progressive:
      return schedule_progressive(start, tasks, data, config, rng);
    case Schedule::sparse_training:
      return schedule_sparse_training(start, tasks, data, config, rng);
  }
  throw std::invalid_argument("run_schedule: unknown schedule");
}

}  // namespace metasparse
