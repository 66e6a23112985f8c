#include "metasparse/sparsity.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "metasparse/ops.hpp"

namespace metasparse {

GroupPartition GroupPartition::conv_input_channels(std::string parameter_id, const Shape& kernel_shape) {
  if (kernel_shape.size() != 4) throw ShapeError("conv partition: expected kernel [C_out,C_in,kH,kW], got " +
                                                 to_string(kernel_shape));
  const Index c_out = kernel_shape[0], c_in = kernel_shape[1], taps = kernel_shape[2] * kernel_shape[3];
  GroupPartition p{std::move(parameter_id), SparsityMode::structured, {}};
  p.groups.resize(static_cast<std::size_t>(c_in));
  for (Index o = 0; o < c_out; ++o) {
    for (Index c = 0; c < c_in; ++c) {
      for (Index t = 0; t < taps; ++t) p.groups[static_cast<std::size_t>(c)].push_back((o * c_in + c) * taps + t);
    }
  }
  return p;
}

GroupPartition GroupPartition::dense_input_features(std::string parameter_id, const Shape& weight_shape) {
  if (weight_shape.size() != 2) throw ShapeError("dense partition: expected weight [in,out], got " +
                                                 to_string(weight_shape));
  const Index in = weight_shape[0], out = weight_shape[1];
  GroupPartition p{std::move(parameter_id), SparsityMode::structured, {}};
  p.groups.resize(static_cast<std::size_t>(in));
  for (Index i = 0; i < in; ++i) {
    for (Index o = 0; o < out; ++o) p.groups[static_cast<std::size_t>(i)].push_back(i * out + o);
  }
  return p;
}

GroupPartition GroupPartition::singletons(std::string parameter_id, Index count) {
  GroupPartition p{std::move(parameter_id), SparsityMode::unstructured, {}};
  p.groups.reserve(static_cast<std::size_t>(count));
  for (Index j = 0; j < count; ++j) p.groups.push_back({j});
  return p;
}

GroupPartition GroupPartition::for_weight(std::string parameter_id, const Shape& shape, SparsityMode mode) {
  if (mode == SparsityMode::unstructured) return singletons(std::move(parameter_id), numel(shape));
  if (shape.size() == 4) return conv_input_channels(std::move(parameter_id), shape);
  return dense_input_features(std::move(parameter_id), shape);
}

Index GroupPartition::governed_count() const {
  Index n = 0;
  for (const auto& g : groups) n += static_cast<Index>(g.size());
  return n;
}

void GroupPartition::validate(Index parameter_numel) const {
  if (groups.empty()) throw std::invalid_argument("partition '" + parameter_id + "': no groups");
  std::vector<bool> seen(static_cast<std::size_t>(parameter_numel), false);
  for (const auto& g : groups) {
    if (g.empty()) throw std::invalid_argument("partition '" + parameter_id + "': empty group");
    if (mode == SparsityMode::structured && g.size() < 2) {
      throw std::invalid_argument("partition '" + parameter_id + "': structured groups need more than one entry");
    }
    for (Index j : g) {
      if (j < 0 || j >= parameter_numel) throw std::invalid_argument("partition '" + parameter_id + "': index out of range");
      if (seen[static_cast<std::size_t>(j)]) throw std::invalid_argument("partition '" + parameter_id + "': groups overlap");
      seen[static_cast<std::size_t>(j)] = true;
    }
  }
}

Tensor penalty(const GroupPartition& partition, const Tensor& params, double lambda) {
  if (partition.groups.empty()) throw std::invalid_argument("penalty: empty partition for '" + partition.parameter_id + "'");
  if (lambda < 0.0) throw std::invalid_argument("penalty: lambda must be non-negative");
  Vector weights(static_cast<Index>(partition.size()));
  for (std::size_t g = 0; g < partition.size(); ++g) weights[static_cast<Index>(g)] = lambda * partition.weight(g);
  Tensor norms = group_norms(params, partition.groups);
  return sum(mul(norms, Tensor::from(norms.shape(), std::move(weights))));
}

void prox_step(Tensor& params, const Vector& grad, double alpha, double lambda, const GroupPartition& partition) {
  if (grad.size() != params.numel()) {
    throw ShapeError("prox_step: gradient length " + std::to_string(grad.size()) + " does not match parameter " +
                     to_string(params.shape()));
  }
  Vector& values = params.mutable_data();
  values -= alpha * grad;
  if (lambda > 0.0) apply_group_prox(values, partition, alpha, lambda);
}

SparsityMetrics measure(std::span<const GovernedWeight> governed) {
  SparsityMetrics m;
  for (const auto& gw : governed) {
    const Vector& v = gw.weight.data();
    Index zero_entries = 0, layer_zero_groups = 0;
    for (const auto& group : gw.partition.groups) {
      bool all_zero = true;
      for (Index j : group) {
        if (v[j] == 0.0) {
          ++zero_entries;
        } else {
          all_zero = false;
        }
      }
      if (all_zero) ++layer_zero_groups;
    }
    const Index entries = gw.partition.governed_count();
    const Index groups = static_cast<Index>(gw.partition.size());
    m.total_params += entries;
    m.nonzero_params += entries - zero_entries;
    m.total_groups += groups;
    m.zero_groups += layer_zero_groups;
    const double layer_flops = gw.geometry.flops();
    const double surviving = gw.partition.mode == SparsityMode::structured
                                 ? double(groups - layer_zero_groups) / double(groups)
                                 : double(entries - zero_entries) / double(entries);
    m.total_flops += layer_flops;
    m.nonzero_flops += layer_flops * surviving;
  }
  if (m.total_params > 0) {
    m.parameter_sparsity_percent = 100.0 * double(m.total_params - m.nonzero_params) / double(m.total_params);
  }
  if (m.total_groups > 0) m.group_sparsity_percent = 100.0 * double(m.zero_groups) / double(m.total_groups);
  if (m.nonzero_params > 0) m.compression_ratio = double(m.total_params) / double(m.nonzero_params);
  if (m.nonzero_flops > 0.0) m.speed_up = m.total_flops / m.nonzero_flops;
  return m;
}

MaskSet all_active(std::span<const GovernedWeight> governed) {
  MaskSet masks;
  for (const auto& gw : governed) masks[gw.partition.parameter_id] = MaskArray::Constant(gw.weight.numel(), true);
  return masks;
}

MaskSet current_zero_pattern(std::span<const GovernedWeight> governed) {
  MaskSet masks;
  for (const auto& gw : governed) masks[gw.partition.parameter_id] = gw.weight.data().array() != 0.0;
  return masks;
}

double masked_percent(const MaskSet& masks) {
  Index total = 0, masked = 0;
  for (const auto& [id, mask] : masks) {
    total += mask.size();
    masked += mask.size() - mask.count();
  }
  return total == 0 ? 0.0 : 100.0 * double(masked) / double(total);
}

namespace {

double governed_entries(std::span<const GovernedWeight> governed) {
  double total = 0.0;
  for (const auto& gw : governed) total += double(gw.partition.governed_count());
  return total;
}

}  // namespace

MaskResult prune_in_order(std::span<const GovernedWeight> governed, const GroupOrder& order, double budget_percent,
                          const MaskSet* start) {
  MaskResult result;
  result.masks = start ? *start : all_active(governed);
  const double total = governed_entries(governed);
  double masked = 0.0;
  for (const auto& gw : governed) {
    const MaskArray& mask = result.masks.at(gw.partition.parameter_id);
    for (const auto& group : gw.partition.groups) {
      for (Index j : group) masked += mask[j] ? 0.0 : 1.0;
    }
  }
  for (const auto& [layer, g] : order) {
    if (100.0 * masked / total >= budget_percent) break;
    const auto& gw = governed[layer];
    MaskArray& mask = result.masks.at(gw.partition.parameter_id);
    for (Index j : gw.partition.groups[g]) {
      if (mask[j]) {
        mask[j] = false;
        masked += 1.0;
      }
    }
  }
  result.achieved_percent = total > 0.0 ? 100.0 * masked / total : 0.0;
  return result;
}

GroupOrder magnitude_order(std::span<const GovernedWeight> governed) {
  std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> keyed;
  for (std::size_t l = 0; l < governed.size(); ++l) {
    const Vector& v = governed[l].weight.data();
    for (std::size_t g = 0; g < governed[l].partition.size(); ++g) {
      double s = 0.0;
      for (Index j : governed[l].partition.groups[g]) s += v[j] * v[j];
      keyed.push_back({std::sqrt(s), {l, g}});
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  GroupOrder order;
  order.reserve(keyed.size());
  for (const auto& k : keyed) order.push_back(k.second);
  return order;
}

GroupOrder random_order(std::span<const GovernedWeight> governed, std::mt19937_64& rng) {
  GroupOrder order;
  for (std::size_t l = 0; l < governed.size(); ++l) {
    for (std::size_t g = 0; g < governed[l].partition.size(); ++g) order.push_back({l, g});
  }
  // Fisher-Yates with an explicit draw so the permutation is stable across standard libraries.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

MaskResult build_mask(std::span<const GovernedWeight> governed, MaskStrategy strategy, double budget_percent,
                      std::mt19937_64& rng) {
  if (!(budget_percent >= 0.0 && budget_percent < 100.0)) {
    throw std::invalid_argument("build_mask: budget must lie in [0, 100)");
  }
  switch (strategy) {
    case MaskStrategy::magnitude_groups:
      return prune_in_order(governed, magnitude_order(governed), budget_percent);
    case MaskStrategy::random_groups:
      return prune_in_order(governed, random_order(governed, rng), budget_percent);
    case MaskStrategy::from_current_zeros: {
      MaskResult r{current_zero_pattern(governed), 0.0};
      r.achieved_percent = masked_percent(r.masks);
      return r;
    }
  }
  throw std::invalid_argument("build_mask: unknown strategy");
}

void apply_mask(Vector& values, const MaskArray& mask) {
  if (mask.size() != values.size()) throw ShapeError("apply_mask: mask length does not match parameter length");
  values = mask.select(values.array(), 0.0).matrix();
}

void apply_mask(Tensor& params, const MaskArray& mask) { apply_mask(params.mutable_data(), mask); }

void apply_masks(std::span<const GovernedWeight> governed, const MaskSet& masks) {
  for (const auto& gw : governed) {
    auto it = masks.find(gw.partition.parameter_id);
    if (it == masks.end()) continue;
    Tensor w = gw.weight;
    apply_mask(w, it->second);
  }
}

double SparsityState::lambda() const { return softplus_value(lambda_raw, beta); }

}  // namespace metasparse
