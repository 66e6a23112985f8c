#include "metasparse/model.hpp"

#include <stdexcept>

#include "metasparse/ops.hpp"

namespace metasparse {

const char* to_string(TaskKind kind) {
  return kind == TaskKind::regression ? "regression" : "binary_classification";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "regression") return TaskKind::regression;
  if (name == "binary_classification") return TaskKind::binary_classification;
  throw std::invalid_argument("unknown task kind '" + name + "'");
}

Vector xavier_uniform(Index count, Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Vector v(count);
  for (Index i = 0; i < count; ++i) v[i] = dist(rng);
  return v;
}

Backbone Backbone::build(const BackboneConfig& config, std::mt19937_64& rng) {
  const auto& ch = config.channels;
  if (ch.size() < 3) throw std::invalid_argument("build_backbone: need at least two conv layers");
  for (Index c : ch) {
    if (c <= 0) throw std::invalid_argument("build_backbone: channel counts must be positive");
  }
  if (config.kernel <= 0 || config.kernel % 2 == 0) throw std::invalid_argument("build_backbone: kernel must be odd");
  if (config.residual && ch[1] != ch.back()) {
    throw std::invalid_argument("build_backbone: skip connection joins " + std::to_string(ch[1]) + " and " +
                                std::to_string(ch.back()) + " channels");
  }
  Backbone b;
  b.config_ = config;
  const Index k = config.kernel;
  for (std::size_t l = 0; l + 1 < ch.size(); ++l) {
    ConvLayer layer;
    layer.id = "backbone.conv" + std::to_string(l) + ".weight";
    const Shape shape{ch[l + 1], ch[l], k, k};
    layer.weight = Tensor::parameter(shape, xavier_uniform(numel(shape), ch[l] * k * k, ch[l + 1] * k * k, rng));
    layer.bias = Tensor::zeros({ch[l + 1]}, true);
    layer.padding = k / 2;
    b.partitions_.push_back(GroupPartition::for_weight(layer.id, shape, config.sparsity));
    b.layers_.push_back(std::move(layer));
  }
  return b;
}

Tensor Backbone::feature_maps(const Tensor& input) const {
  Tensor h = input;
  Tensor skip;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = relu(conv2d(h, layers_[l].weight, layers_[l].bias, layers_[l].padding));
    if (l == 0) skip = h;
  }
  if (config_.residual) h = add(h, skip);
  return h;
}

Tensor Backbone::forward(const Tensor& input) const { return global_avg_pool(feature_maps(input)); }

std::vector<GovernedWeight> Backbone::governed() const {
  std::vector<GovernedWeight> out;
  const Index k = config_.kernel;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& ch = config_.channels;
    out.push_back({partitions_[l], layers_[l].weight,
                   LayerGeometry::conv(ch[l + 1], ch[l], k, k, config_.image_height, config_.image_width)});
  }
  return out;
}

void Backbone::reinitialize_group(std::size_t layer, const std::vector<Index>& group, std::mt19937_64& rng) {
  const auto& ch = config_.channels;
  const Index k = config_.kernel;
  const Vector fresh = xavier_uniform(static_cast<Index>(group.size()), ch[layer] * k * k, ch[layer + 1] * k * k, rng);
  Vector& w = layers_.at(layer).weight.mutable_data();
  for (std::size_t i = 0; i < group.size(); ++i) w[group[i]] = fresh[static_cast<Index>(i)];
}

Backbone Backbone::clone() const {
  Backbone b = *this;
  for (auto& layer : b.layers_) {
    layer.weight = layer.weight.clone();
    layer.bias = layer.bias.clone();
  }
  return b;
}

TaskHead TaskHead::build(int task_id, TaskKind kind, Index features, Index width, std::mt19937_64& rng) {
  TaskHead h;
  h.task_id = task_id;
  h.kind = kind;
  h.w1 = Tensor::parameter({features, width}, xavier_uniform(features * width, features, width, rng));
  h.b1 = Tensor::zeros({width}, true);
  h.w2 = Tensor::parameter({width, 1}, xavier_uniform(width, width, 1, rng));
  h.b2 = Tensor::zeros({1}, true);
  return h;
}

Tensor TaskHead::forward(const Tensor& features) const {
  return add_bias(matmul(relu(add_bias(matmul(features, w1), b1)), w2), b2);
}

TaskHead TaskHead::clone() const {
  TaskHead h = *this;
  h.w1 = w1.clone();
  h.b1 = b1.clone();
  h.w2 = w2.clone();
  h.b2 = b2.clone();
  return h;
}

MultiTaskModel MultiTaskModel::build(const ModelSpec& spec, std::mt19937_64& rng) {
  MultiTaskModel m;
  m.head_width_ = spec.head_width;
  m.backbone_ = Backbone::build(spec.backbone, rng);
  for (const auto& [id, kind] : spec.tasks) m.add_task(id, kind, rng);
  return m;
}

void MultiTaskModel::add_task(int task_id, TaskKind kind, std::mt19937_64& rng) {
  if (heads_.count(task_id)) throw std::invalid_argument("add_task: task " + std::to_string(task_id) + " already exists");
  heads_.emplace(task_id, TaskHead::build(task_id, kind, backbone_.feature_width(), head_width_, rng));
  log_sigma_.emplace(task_id, Tensor::zeros({1}, true));
}

void MultiTaskModel::require_task(int task_id) const {
  if (!heads_.count(task_id)) throw std::invalid_argument("model: unknown task id " + std::to_string(task_id));
}

Tensor MultiTaskModel::forward(int task_id, const Tensor& input) const {
  require_task(task_id);
  return heads_.at(task_id).forward(backbone_.forward(input));
}

std::map<int, Tensor> MultiTaskModel::forward_tasks(const std::vector<int>& task_ids, const Tensor& input) const {
  for (int id : task_ids) require_task(id);
  const Tensor features = backbone_.forward(input);
  std::map<int, Tensor> out;
  for (int id : task_ids) out.emplace(id, heads_.at(id).forward(features));
  return out;
}

std::vector<int> MultiTaskModel::task_ids() const {
  std::vector<int> ids;
  for (const auto& [id, head] : heads_) ids.push_back(id);
  return ids;
}

TaskKind MultiTaskModel::task_kind(int task_id) const {
  require_task(task_id);
  return heads_.at(task_id).kind;
}

const Tensor& MultiTaskModel::log_sigma(int task_id) const {
  require_task(task_id);
  return log_sigma_.at(task_id);
}

void MultiTaskModel::reset_noise() {
  for (auto& [id, s] : log_sigma_) s = Tensor::zeros({1}, true);
}

const TaskHead& MultiTaskModel::head(int task_id) const {
  require_task(task_id);
  return heads_.at(task_id);
}

std::vector<NamedParameter> MultiTaskModel::parameters() const {
  std::vector<NamedParameter> out;
  for (std::size_t l = 0; l < backbone_.layers().size(); ++l) {
    const auto& layer = backbone_.layers()[l];
    out.push_back({layer.id, layer.weight, ParameterRole::backbone_weight});
    out.push_back({"backbone.conv" + std::to_string(l) + ".bias", layer.bias, ParameterRole::backbone_bias});
  }
  for (const auto& [id, h] : heads_) {
    const std::string prefix = "head." + std::to_string(id) + ".";
    out.push_back({prefix + "fc1.weight", h.w1, ParameterRole::head, id});
    out.push_back({prefix + "fc1.bias", h.b1, ParameterRole::head, id});
    out.push_back({prefix + "fc2.weight", h.w2, ParameterRole::head, id});
    out.push_back({prefix + "fc2.bias", h.b2, ParameterRole::head, id});
  }
  for (const auto& [id, s] : log_sigma_) {
    out.push_back({"noise." + std::to_string(id) + ".log_sigma", s, ParameterRole::noise, id});
  }
  return out;
}

ModelSpec MultiTaskModel::spec() const {
  ModelSpec s;
  s.backbone = backbone_.config();
  s.head_width = head_width_;
  for (const auto& [id, h] : heads_) s.tasks.push_back({id, h.kind});
  return s;
}

MultiTaskModel MultiTaskModel::clone() const {
  MultiTaskModel m;
  m.head_width_ = head_width_;
  m.backbone_ = backbone_.clone();
  for (const auto& [id, h] : heads_) m.heads_.emplace(id, h.clone());
  for (const auto& [id, s] : log_sigma_) m.log_sigma_.emplace(id, s.clone());
  return m;
}

}  // namespace metasparse
