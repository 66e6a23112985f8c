#include "metasparse/mtl.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "metasparse/ops.hpp"

namespace metasparse {

Tensor task_loss(TaskKind kind, const Tensor& predictions, const Tensor& labels) {
  return kind == TaskKind::regression ? mse(predictions, labels) : cross_entropy(predictions, labels);
}

Tensor combine_uncertainty(std::span<const Tensor> losses, std::span<const Tensor> log_sigmas) {
  if (losses.size() != log_sigmas.size() || losses.empty()) {
    throw std::invalid_argument("combine_uncertainty: need one noise scale per loss");
  }
  Tensor total;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const Tensor precision = exp(scale(log_sigmas[i], -2.0));
    const Tensor term = add(scale(mul(losses[i], precision), 0.5), log_sigmas[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor episode_loss(const MultiTaskModel& model, const std::vector<int>& tasks, const Tensor& inputs,
                    const std::map<int, Tensor>& labels, std::map<int, double>* per_task) {
  if (tasks.empty()) throw std::invalid_argument("episode_loss: no tasks");
  const auto predictions = model.forward_tasks(tasks, inputs);
  std::vector<Tensor> losses, sigmas;
  for (int id : tasks) {
    losses.push_back(task_loss(model.task_kind(id), predictions.at(id), labels.at(id)));
    sigmas.push_back(model.log_sigma(id));
    if (per_task) (*per_task)[id] = losses.back().item();
  }
  if (tasks.size() == 1) return losses.front();
  return combine_uncertainty(losses, sigmas);
}

double learning_rate(const AdamConfig& config, ParameterRole role) {
  return role == ParameterRole::backbone_weight || role == ParameterRole::backbone_bias ? config.lr_backbone
                                                                                        : config.lr_heads;
}

Adam::Moments& Adam::moments(const std::string& key, Index size) {
  Moments& s = state_[key];
  if (s.m.size() != size) {
    s.m = Vector::Zero(size);
    s.v = Vector::Zero(size);
    s.t = 0;
  }
  return s;
}

double Adam::update(Moments& s, Index i, double g, double lr) const {
  s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g;
  s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g * g;
  const double m_hat = s.m[i] / (1.0 - std::pow(config_.beta1, double(s.t)));
  const double v_hat = s.v[i] / (1.0 - std::pow(config_.beta2, double(s.t)));
  return lr * m_hat / (std::sqrt(v_hat) + config_.eps);
}

void Adam::step(const std::vector<NamedParameter>& params, const GradientMap& grads) {
  for (const auto& p : params) {
    auto it = grads.find(p.id);
    if (it == grads.end()) continue;
    const Vector& g = it->second;
    Tensor t = p.tensor;
    Vector& w = t.mutable_data();
    if (g.size() != w.size()) throw ShapeError("adam: gradient size mismatch for " + p.id);
    Moments& s = moments(p.id, w.size());
    ++s.t;
    const double lr = learning_rate(config_, p.role);
    for (Index i = 0; i < w.size(); ++i) w[i] -= update(s, i, g[i], lr);
  }
}

double Adam::step_scalar(const std::string& key, double value, double grad, double lr) {
  Moments& s = moments(key, 1);
  ++s.t;
  return value - update(s, 0, grad, lr);
}

double Adam::layer_step(const std::string& key, double lr) const {
  auto it = state_.find(key);
  if (it == state_.end() || it->second.t == 0) return lr;
  const Moments& s = it->second;
  const double v_hat = s.v.mean() / (1.0 - std::pow(config_.beta2, double(s.t)));
  return lr / (std::sqrt(v_hat) + config_.eps);
}

void prox_governed(const std::vector<GovernedWeight>& governed, const Adam& adam, ProxMetric metric, double lr,
                   double lambda, const std::set<std::string>& skip) {
  if (lambda <= 0.0) return;
  for (const auto& gw : governed) {
    if (skip.count(gw.partition.parameter_id)) continue;
    Tensor w = gw.weight;
    const double alpha = metric == ProxMetric::plain ? lr : adam.layer_step(gw.partition.parameter_id, lr);
    apply_group_prox(w.mutable_data(), gw.partition, alpha, lambda);
  }
}

GradientMap collect_gradients(const std::vector<NamedParameter>& params) {
  GradientMap out;
  for (const auto& p : params) out[p.id] = p.tensor.grad();
  return out;
}

void zero_gradients(const std::vector<NamedParameter>& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

EvalResult evaluate(const MultiTaskModel& model, const std::vector<int>& tasks, const Dataset& data,
                    std::span<const Index> ids, Index batch_size) {
  if (ids.empty()) throw std::invalid_argument("evaluate: empty sample set");
  NoGradGuard guard;
  EvalResult r;
  for (int id : tasks) r.task_loss[id] = 0.0;
  for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto batch = ids.subspan(start, std::min(ids.size() - start, static_cast<std::size_t>(batch_size)));
    const auto predictions = model.forward_tasks(tasks, data.batch_inputs(batch));
    for (int id : tasks) {
      const double l = task_loss(model.task_kind(id), predictions.at(id), data.batch_labels(id, batch)).item();
      r.task_loss[id] += l * double(batch.size());
    }
  }
  for (auto& [id, l] : r.task_loss) l /= double(ids.size());
  if (tasks.size() == 1) {
    r.combined = r.task_loss.begin()->second;
  } else {
    for (int id : tasks) {
      const double s = model.log_sigma(id).item();
      r.combined += 0.5 * r.task_loss[id] * std::exp(-2.0 * s) + s;
    }
  }
  return r;
}

TrainResult mtl_train(MultiTaskModel& model, const std::vector<int>& tasks, const Dataset& data,
                      const TrainConfig& config, const TrainOptions& options) {
  if (tasks.empty()) throw std::invalid_argument("mtl_train: need at least one task");
  if (config.batch_size < 1 || config.max_epochs < 0 || config.patience < 1) {
    throw std::invalid_argument("mtl_train: batch size and patience must be positive");
  }
  if (config.lambda < 0.0) throw std::invalid_argument("mtl_train: lambda must be non-negative");
  for (int id : tasks) {
    if (!model.has_task(id)) throw std::invalid_argument("mtl_train: model has no head for task " + std::to_string(id));
  }
  std::mt19937_64 rng(config.seed);
  std::vector<Index> train = options.train_ids.empty() ? data.splits().train : options.train_ids;
  const std::vector<Index>& val = options.val_ids.empty() ? data.splits().val : options.val_ids;
  Adam adam(config.adam);
  if (options.masks) apply_masks(model.governed(), *options.masks);

  TrainResult result;
  int stale = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    EpochRow row;
    row.epoch = epoch;
    row.lambda = config.lambda;
    int batches = 0;
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::span<const Index> ids(train.data() + start,
                                       std::min(train.size() - start, static_cast<std::size_t>(config.batch_size)));
      const Tensor x = data.batch_inputs(ids);
      std::map<int, Tensor> labels;
      for (int id : tasks) labels.emplace(id, data.batch_labels(id, ids));
      std::map<int, double> per_task;
      Tensor loss = episode_loss(model, tasks, x, labels, &per_task);
      if (!std::isfinite(loss.item())) {
        throw NumericDivergence("mtl_train: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      const auto params = model.parameters();
      GradientMap grads = collect_gradients(params);
      for (const auto& id : options.frozen) grads.erase(id);
      adam.step(params, grads);
      prox_governed(model.governed(), adam, config.prox_metric, config.adam.lr_backbone, config.lambda, options.frozen);
      if (options.masks) apply_masks(model.governed(), *options.masks);
      zero_gradients(params);
      for (const auto& [id, l] : per_task) row.task_loss[id] += l;
      row.combined_loss += loss.item();
      ++batches;
    }
    for (auto& [id, l] : row.task_loss) l /= double(batches);
    row.combined_loss /= double(batches);
    row.val_loss = evaluate(model, tasks, data, val).combined;
    if (!std::isfinite(row.val_loss)) {
      throw NumericDivergence("mtl_train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    const auto m = measure(model.governed());
    row.parameter_sparsity = m.parameter_sparsity_percent;
    row.group_sparsity = m.group_sparsity_percent;
    result.rows.push_back(row);
    if (options.on_epoch) options.on_epoch(model, row);

    if (epoch == 1 || row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

TrainResult finetune_masked(MultiTaskModel& model, const MaskSet& masks, const std::vector<int>& tasks,
                            const Dataset& data, const TrainConfig& config, TrainOptions options) {
  options.masks = &masks;
  return mtl_train(model, tasks, data, config, options);
}

}  // namespace metasparse
