#include "metasparse/meta.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "metasparse/ops.hpp"

namespace metasparse {

std::vector<Episode> enumerate_episodes(const std::vector<int>& tasks) {
  if (tasks.empty() || tasks.size() > 10) throw std::invalid_argument("enumerate_episodes: need 1 to 10 tasks");
  const std::uint32_t count = (1u << tasks.size()) - 1u;
  std::vector<Episode> out;
  out.reserve(count);
  for (std::uint32_t bits = 1; bits <= count; ++bits) {
    Episode e;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (bits & (1u << i)) e.task_ids.push_back(tasks[i]);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::size_t sample_episode(std::size_t count, std::mt19937_64& rng) {
  if (count == 0) throw std::invalid_argument("sample_episode: no episodes");
  return std::uniform_int_distribution<std::size_t>(0, count - 1)(rng);
}

Batch make_batch(const Dataset& data, const std::vector<int>& tasks, std::span<const Index> ids) {
  Batch b;
  b.inputs = data.batch_inputs(ids);
  for (int id : tasks) b.labels.emplace(id, data.batch_labels(id, ids));
  return b;
}

bool gradient_steps(const std::vector<Tensor>& params, const LossFn& loss, int steps, double alpha) {
  if (steps < 1) throw std::invalid_argument("gradient_steps: need at least one step");
  for (int k = 0; k < steps; ++k) {
    for (Tensor p : params) p.zero_grad();
    Tensor l = loss();
    if (!std::isfinite(l.item())) return false;
    l.backward();
    for (Tensor p : params) {
      if (p.has_grad()) p.mutable_data() -= alpha * p.grad();
    }
  }
  for (Tensor p : params) p.zero_grad();
  return true;
}

std::optional<MultiTaskModel> inner_adapt(const MultiTaskModel& meta, const Episode& episode, const Batch& support,
                                          int steps, double alpha_in) {
  MultiTaskModel adapted = meta.clone();
  std::vector<Tensor> params;
  for (const auto& p : adapted.parameters()) params.push_back(p.tensor);
  const bool ok = gradient_steps(
      params, [&] { return episode_loss(adapted, episode.task_ids, support.inputs, support.labels); }, steps, alpha_in);
  if (!ok) return std::nullopt;
  return adapted;
}

int regrow(Backbone& backbone, double r_p, std::mt19937_64& rng, MaskSet* masks) {
  if (!(r_p >= 0.0 && r_p < 1.0)) throw std::invalid_argument("regrow: probability must lie in [0, 1)");
  if (r_p == 0.0) return 0;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const auto governed = backbone.governed();
  int regrown = 0;
  for (std::size_t l = 0; l < governed.size(); ++l) {
    const auto& partition = governed[l].partition;
    for (const auto& group : partition.groups) {
      const Vector& w = governed[l].weight.data();
      const bool zero = std::all_of(group.begin(), group.end(), [&](Index j) { return w[j] == 0.0; });
      if (!zero || coin(rng) >= r_p) continue;
      backbone.reinitialize_group(l, group, rng);
      if (masks) {
        auto it = masks->find(partition.parameter_id);
        if (it != masks->end()) {
          for (Index j : group) it->second[j] = true;
        }
      }
      ++regrown;
    }
  }
  return regrown;
}

double SparsityTerm::lambda() const { return enabled ? weight * softplus_value(lambda_raw, beta) : 0.0; }

std::optional<MetaGradient> meta_gradient(const MultiTaskModel& meta, const Episode& episode, const Batch& support,
                                          const Batch& query, int inner_steps, double alpha_in,
                                          const SparsityTerm& sparsity) {
  auto adapted = inner_adapt(meta, episode, support, inner_steps, alpha_in);
  if (!adapted) return std::nullopt;
  // The penalty reaches theta only through the outer prox.
  Tensor loss = episode_loss(*adapted, episode.task_ids, query.inputs, query.labels);
  if (!std::isfinite(loss.item())) throw NumericDivergence("meta_gradient: non-finite query loss");
  loss.backward();
  MetaGradient g;
  const auto params = adapted->parameters();
  g.theta = collect_gradients(params);
  g.query_loss = loss.item();
  for (const auto& gw : adapted->governed()) g.group_norm += group_lasso_norm(gw.weight.data(), gw.partition);
  if (sparsity.enabled) {
    g.lambda_raw = sparsity.weight * g.group_norm * softplus_derivative(sparsity.lambda_raw, sparsity.beta);
  }
  return g;
}

namespace {

void accumulate(GradientMap& into, const GradientMap& g) {
  for (const auto& [id, v] : g) {
    auto it = into.find(id);
    if (it == into.end()) {
      into.emplace(id, v);
    } else {
      it->second += v;
    }
  }
}

}  // namespace

MetaResult meta_train(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                      const MetaConfig& config) {
  const auto episodes = enumerate_episodes(tasks);
  if (config.inner_steps < 1) throw std::invalid_argument("meta_train: inner steps must be >= 1");
  if (config.batch_size < 1 || config.patience < 1 || config.sparsity_patience < 1) {
    throw std::invalid_argument("meta_train: batch size and patience values must be positive");
  }
  if (config.penalty_weight < 0.0) throw std::invalid_argument("meta_train: penalty weight must be non-negative");
  for (int id : tasks) {
    if (!init.has_task(id)) throw std::invalid_argument("meta_train: model has no head for task " + std::to_string(id));
  }

  MetaResult result{init.clone(), {}, {}, tasks, "max_epochs", std::mt19937_64(config.seed)};
  MultiTaskModel& model = result.model;
  std::mt19937_64& rng = result.rng;

  // The draw happens even for the baseline so both share one random stream.
  const double lambda0 = std::uniform_real_distribution<double>(config.lambda_init_low, config.lambda_init_high)(rng);
  SparsityTerm term{config.learn_sparsity, softplus_inverse(lambda0, config.beta), config.beta, config.penalty_weight};
  const double raw_floor = softplus_inverse(config.lambda_floor, config.beta);

  std::vector<Index> support = data.splits().support;
  std::vector<Index> query = data.splits().query;
  const auto& val = data.splits().val;
  const std::size_t B = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps = (support.size() + B - 1) / B;
  Adam adam(config.outer);

  double best_val = 0.0, best_sparsity = 0.0;
  int stale_val = 0, stale_sparsity = 0;
  bool sparsity_armed = false;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(support.begin(), support.end(), rng);
    std::shuffle(query.begin(), query.end(), rng);
    MetaEpochRow row;
    row.epoch = epoch;
    GradientMap sum;
    double lambda_grad = 0.0;
    for (std::size_t k = 0; k < steps; ++k) {
      const std::size_t s0 = k * B;
      const std::span<const Index> sup_ids(support.data() + s0, std::min(B, support.size() - s0));
      const std::size_t q0 = (k * B) % query.size();
      const std::span<const Index> query_ids(query.data() + q0, std::min(B, query.size() - q0));
      const Episode& e = episodes[sample_episode(episodes.size(), rng)];

      const MultiTaskModel* start = &model;
      MultiTaskModel regrown;
      if (config.regrow_prob > 0.0) {
        regrown = model.clone();
        const int n = regrow(regrown.backbone(), config.regrow_prob, rng);
        row.regrown += n;
        if (n > 0) start = &regrown;
      }
      auto g = meta_gradient(*start, e, make_batch(data, e.task_ids, sup_ids), make_batch(data, e.task_ids, query_ids),
                             config.inner_steps, config.alpha_in, term);
      if (!g) {
        std::cerr << "warning: epoch " << epoch << ": skipped episode with non-finite support loss\n";
        continue;
      }
      accumulate(sum, g->theta);
      lambda_grad += g->lambda_raw;
      row.query_loss += g->query_loss;
      ++row.episodes;
    }

    if (row.episodes > 0) {
      const double inv = 1.0 / double(row.episodes);
      for (auto& [id, v] : sum) v *= inv;
      lambda_grad *= inv;
      row.query_loss *= inv;
      const auto params = model.parameters();
      const double lambda = term.lambda();
      if (config.outer_optimizer == OuterOptimizer::adam) {
        adam.step(params, sum);
      } else {
        for (const auto& p : params) {
          Tensor t = p.tensor;
          t.mutable_data() -= learning_rate(config.outer, p.role) * sum.at(p.id);
        }
      }
      if (term.enabled) {
        const ProxMetric metric =
            config.outer_optimizer == OuterOptimizer::adam ? config.prox_metric : ProxMetric::plain;
        prox_governed(model.governed(), adam, metric, config.outer.lr_backbone, lambda);
      }
      if (term.enabled) {
        term.lambda_raw = config.outer_optimizer == OuterOptimizer::adam
                              ? adam.step_scalar("lambda_raw", term.lambda_raw, lambda_grad, config.outer.lr_backbone)
                              : term.lambda_raw - config.outer.lr_backbone * lambda_grad;
        term.lambda_raw = std::max(term.lambda_raw, raw_floor);
      }
    }

    row.lambda = term.lambda();
    row.val_loss = evaluate(model, tasks, data, val).combined;
    if (!std::isfinite(row.val_loss)) {
      throw NumericDivergence("meta_train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    const auto m = measure(model.governed());
    row.parameter_sparsity = m.parameter_sparsity_percent;
    row.group_sparsity = m.group_sparsity_percent;
    result.rows.push_back(row);
    result.sparsity.profile.push_back({epoch, m.parameter_sparsity_percent, m.group_sparsity_percent});

    if (epoch == 1 || row.val_loss < best_val) {
      best_val = row.val_loss;
      stale_val = 0;
    } else if (++stale_val >= config.patience) {
      result.stop_reason = "val_patience";
      break;
    }
    if (!sparsity_armed && row.parameter_sparsity > 0.0) {
      sparsity_armed = true;
      best_sparsity = row.parameter_sparsity;
    } else if (sparsity_armed) {
      if (row.parameter_sparsity > best_sparsity) {
        best_sparsity = row.parameter_sparsity;
        stale_sparsity = 0;
      } else if (++stale_sparsity >= config.sparsity_patience) {
        result.stop_reason = "sparsity_patience";
        break;
      }
    }
  }
  result.sparsity.lambda_raw = term.lambda_raw;
  result.sparsity.beta = term.beta;
  result.sparsity.mask = current_zero_pattern(model.governed());
  return result;
}

MetaResult meta_train_baseline(const MultiTaskModel& init, const std::vector<int>& tasks, const Dataset& data,
                               MetaConfig config) {
  config.learn_sparsity = false;
  return meta_train(init, tasks, data, config);
}

const char* to_string(MetaTestRegime regime) {
  switch (regime) {
    case MetaTestRegime::same_tasks: return "same_tasks";
    case MetaTestRegime::new_task_only: return "new_task_only";
    case MetaTestRegime::all_tasks_plus_new: return "all_tasks_plus_new";
  }
  return "?";
}

MetaTestRegime meta_test_regime_from_string(const std::string& name) {
  if (name == "same_tasks") return MetaTestRegime::same_tasks;
  if (name == "new_task_only") return MetaTestRegime::new_task_only;
  if (name == "all_tasks_plus_new") return MetaTestRegime::all_tasks_plus_new;
  throw std::invalid_argument("unknown meta-test regime '" + name + "'");
}

MetaTestResult meta_test(const MultiTaskModel& meta_model, const std::vector<int>& meta_tasks, MetaTestRegime regime,
                         const std::vector<std::pair<int, TaskKind>>& new_tasks, const Dataset& data,
                         TrainConfig config, const TrainOptions& options) {
  if (meta_tasks.empty()) throw std::invalid_argument("meta_test: no meta-training tasks");
  if (regime == MetaTestRegime::same_tasks && !new_tasks.empty()) {
    throw std::invalid_argument("meta_test: same_tasks regime takes no new tasks");
  }
  if (regime != MetaTestRegime::same_tasks && new_tasks.empty()) {
    throw std::invalid_argument(std::string("meta_test: regime ") + to_string(regime) + " needs a new task");
  }
  for (int id : meta_tasks) {
    if (!meta_model.has_task(id)) throw std::invalid_argument("meta_test: meta model lacks task " + std::to_string(id));
  }
  for (const auto& [id, kind] : new_tasks) {
    if (meta_model.has_task(id)) {
      throw std::invalid_argument("meta_test: task " + std::to_string(id) + " was seen during meta-training");
    }
    data.task(id);
  }

  MetaTestResult r{meta_model.clone(), {}, {}, {}, {}, {}};
  MultiTaskModel& model = r.model;
  model.reset_noise();
  r.masks = current_zero_pattern(model.governed());
  std::mt19937_64 head_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  for (const auto& [id, kind] : new_tasks) model.add_task(id, kind, head_rng);

  TrainOptions opts = options;
  switch (regime) {
    case MetaTestRegime::same_tasks:
      r.tasks = meta_tasks;
      break;
    case MetaTestRegime::new_task_only:
      for (const auto& [id, kind] : new_tasks) r.tasks.push_back(id);
      for (const auto& p : model.parameters()) {
        const bool is_new = std::any_of(new_tasks.begin(), new_tasks.end(),
                                        [&](const auto& t) { return t.first == p.task_id; });
        if (!is_new) opts.frozen.insert(p.id);
      }
      break;
    case MetaTestRegime::all_tasks_plus_new:
      r.tasks = meta_tasks;
      for (const auto& [id, kind] : new_tasks) r.tasks.push_back(id);
      break;
  }
  config.lambda = 0.0;
  r.training = finetune_masked(model, r.masks, r.tasks, data, config, opts);
  r.test = evaluate(model, r.tasks, data, data.splits().test);
  r.metrics = measure(model.governed());
  return r;
}

}  // namespace metasparse
