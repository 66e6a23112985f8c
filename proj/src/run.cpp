#include "metasparse/run.hpp"

#include <chrono>
#include <fstream>

#include "metasparse/checkpoint.hpp"
#include "metasparse/meta.hpp"
#include "metasparse/ops.hpp"
#include "metasparse/schedules.hpp"

namespace metasparse {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void append(std::vector<ProfileRow>& rows, const std::vector<EpochRow>& epochs, const std::string& phase) {
  const int offset = rows.empty() ? 0 : rows.back().epoch;
  for (const auto& e : epochs) {
    rows.push_back({offset + e.epoch, phase, e.combined_loss, e.val_loss, e.parameter_sparsity, e.group_sparsity,
                    e.lambda});
  }
}

void append(std::vector<ProfileRow>& rows, const std::vector<MetaEpochRow>& epochs) {
  const int offset = rows.empty() ? 0 : rows.back().epoch;
  for (const auto& e : epochs) {
    rows.push_back({offset + e.epoch, "meta", e.query_loss, e.val_loss, e.parameter_sparsity, e.group_sparsity,
                    e.lambda});
  }
}

/// Meta mask stored in a meta_sparsity checkpoint, checked against `model`.
MaskSet load_meta_mask(const fs::path& path, const MultiTaskModel& model) {
  if (!fs::exists(path)) throw ConfigError("meta_checkpoint not found: " + path.string());
  Checkpoint ck;
  try {
    ck = Checkpoint::load(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(std::string("meta_checkpoint unreadable: ") + e.what());
  }
  for (const auto& gw : model.governed()) {
    auto it = ck.masks.find(gw.partition.parameter_id);
    if (it == ck.masks.end() || it->second.size() != gw.weight.numel()) {
      throw ConfigError("meta_checkpoint mask does not fit parameter " + gw.partition.parameter_id);
    }
  }
  return ck.masks;
}

}  // namespace

std::vector<int> run_tasks(const RunConfig& config) {
  if (config.mode == Mode::single_task) return {config.task.value_or(1)};
  return {1, 2, 3, 4};
}

std::string run_label(const RunConfig& config) {
  std::string label = to_string(config.mode);
  if (config.mode == Mode::baseline_schedule) {
    label += std::string("/") + to_string(*config.schedule) + "/" + to_string(*config.mask_strategy);
  }
  if (config.sparsity_mode == SparsityMode::unstructured) label += "/unstructured";
  return label;
}

fs::path run_directory(const RunConfig& config, const fs::path& root) {
  return root / (std::string(to_string(config.mode)) + "-" + hex_hash(config.hash()));
}

RunRecord run_seed(const RunConfig& config, std::uint64_t seed, const fs::path& out) {
  const auto start = std::chrono::steady_clock::now();
  const Dataset data = generate(config.synth(seed));
  const std::vector<int> tasks = run_tasks(config);

  ModelSpec spec;
  spec.backbone.sparsity = config.sparsity_mode;
  for (int id : tasks) spec.tasks.push_back({id, data.task(id).kind});
  std::mt19937_64 rng(seed);
  const MultiTaskModel init = MultiTaskModel::build(spec, rng);
  const TrainConfig train = config.train(seed);

  RunRecord record;
  record.label = run_label(config);
  record.config_hash = hex_hash(config.hash());
  record.seed = seed;

  MultiTaskModel saved = init.clone();
  MaskSet saved_masks;
  double lambda_raw = 0.0;
  std::mt19937_64 saved_rng = rng;

  switch (config.mode) {
    case Mode::single_task:
    case Mode::mtl:
    case Mode::mtl_fixed_sparsity: {
      MultiTaskModel model = init.clone();
      const TrainResult tr = mtl_train(model, tasks, data, train);
      append(record.rows, tr.rows, "train");
      record.stop_reason = tr.early_stopped ? "val_patience" : "max_epochs";
      record.lambda_final = train.lambda;
      if (train.lambda > 0.0) lambda_raw = softplus_inverse(train.lambda);
      record.test_loss = evaluate(model, tasks, data, data.splits().test).task_loss;
      record.final_metrics = measure(model.governed());
      saved_masks = current_zero_pattern(model.governed());
      saved = std::move(model);
      break;
    }
    case Mode::meta_baseline:
    case Mode::meta_sparsity: {
      const MetaConfig mc = config.meta(seed);
      MetaResult mr = config.mode == Mode::meta_sparsity ? meta_train(init, tasks, data, mc)
                                                         : meta_train_baseline(init, tasks, data, mc);
      append(record.rows, mr.rows);
      record.stop_reason = mr.stop_reason;
      record.lambda_final = mr.rows.empty() ? 0.0 : mr.rows.back().lambda;
      const MetaTestResult mt = meta_test(mr.model, tasks, MetaTestRegime::same_tasks, {}, data, train);
      append(record.rows, mt.training.rows, "finetune");
      record.test_loss = mt.test.task_loss;
      record.final_metrics = mt.metrics;
      lambda_raw = mr.sparsity.lambda_raw;
      saved_masks = mr.sparsity.mask;
      saved_rng = mr.rng;
      saved = std::move(mr.model);
      break;
    }
    case Mode::baseline_schedule: {
      ScheduleConfig sc;
      sc.source = *config.mask_strategy;
      sc.budget = config.budget.value_or(0.0);
      sc.steps = config.steps.value_or(1);
      sc.prune_interval = config.prune_interval.value_or(5);
      sc.train = train;
      MaskSet meta_mask;
      if (sc.source == MaskSource::meta_mask) {
        meta_mask = load_meta_mask(*config.meta_checkpoint, init);
        sc.meta_mask = &meta_mask;
      }
      MultiTaskModel start_model = init.clone();
      const Schedule schedule = *config.schedule;
      if (schedule == Schedule::one_shot || schedule == Schedule::iterative) {
        append(record.rows, mtl_train(start_model, tasks, data, train).rows, "dense");
      }
      ScheduleResult sr = run_schedule(schedule, start_model, tasks, data, sc, rng);
      append(record.rows, sr.rows, "schedule");
      record.stop_reason = "schedule_complete";
      record.test_loss = evaluate(sr.model, tasks, data, data.splits().test).task_loss;
      record.final_metrics = measure(sr.model.governed());
      saved_masks = sr.masks;
      saved_rng = rng;
      saved = std::move(sr.model);
      break;
    }
  }
  record.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!out.empty()) {
    fs::create_directories(out);
    write_text(out / "config.txt", config.serialize());
    write_text(out / "profile.csv", profile_csv(record));
    save_record(record, out / "record.json");
    Checkpoint::capture(saved, saved_masks, lambda_raw, saved_rng, config.hash()).save(out / "checkpoint.bin");
  }
  return record;
}

RunOutcome run(RunConfig config, const fs::path& root) {
  config.fill_defaults();
  config.validate();
  if (config.mode == Mode::baseline_schedule && config.mask_strategy == MaskSource::meta_mask &&
      !fs::exists(*config.meta_checkpoint)) {
    throw ConfigError("meta_checkpoint not found: " + config.meta_checkpoint->string());
  }
  RunOutcome outcome;
  outcome.directory = run_directory(config, root);
  for (auto seed : config.seeds) {
    const fs::path dir = outcome.directory / ("seed-" + std::to_string(seed));
    if (fs::exists(dir)) throw ArtifactExists("refusing to overwrite existing run " + dir.string());
  }
  fs::create_directories(outcome.directory);
  write_text(outcome.directory / "config.txt", config.serialize());
  for (auto seed : config.seeds) {
    outcome.records.push_back(run_seed(config, seed, outcome.directory / ("seed-" + std::to_string(seed))));
  }
  write_text(outcome.directory / "summary.json", summary_json(collect_records({outcome.directory})) + "\n");
  return outcome;
}

}  // namespace metasparse
