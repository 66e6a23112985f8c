#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "metasparse/tensor.hpp"

namespace metasparse {

enum class SparsityMode { structured, unstructured };

/**
 * Disjoint index groups over the flat storage of one parameter tensor.
 *
 * Structured partitions group every weight that reads one input channel of a
 * conv kernel [C_out,C_in,kH,kW] (i.e. kernel(:, c, :, :)) or one input
 * feature of a dense weight [in,out]. Unstructured partitions are singletons,
 * so the sqrt(n_g) factor is exactly 1.
 */
struct GroupPartition {
  std::string parameter_id;
  SparsityMode mode = SparsityMode::structured;
  std::vector<std::vector<Index>> groups;

  static GroupPartition conv_input_channels(std::string parameter_id, const Shape& kernel_shape);
  static GroupPartition dense_input_features(std::string parameter_id, const Shape& weight_shape);
  static GroupPartition singletons(std::string parameter_id, Index count);
  /// Channel/feature groups for structured mode, singletons otherwise.
  static GroupPartition for_weight(std::string parameter_id, const Shape& shape, SparsityMode mode);

  std::size_t size() const { return groups.size(); }
  Index group_size(std::size_t g) const { return static_cast<Index>(groups[g].size()); }
  double weight(std::size_t g) const { return std::sqrt(static_cast<double>(groups[g].size())); }
  Index governed_count() const;
  /// Throws std::invalid_argument on empty, overlapping or out-of-range groups.
  void validate(Index parameter_numel) const;
};

/// Block soft-thresholding: the minimiser of 0.5||x - v||^2 + alpha*lambda*sqrt(n_g)*||x||.
/// Groups whose norm is at or below the threshold collapse to exactly zero.
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> prox_group(const Eigen::MatrixBase<Derived>& v,
                                                                      typename Derived::Scalar alpha,
                                                                      typename Derived::Scalar lambda, Index n_g) {
  using Scalar = typename Derived::Scalar;
  const Scalar threshold = alpha * lambda * std::sqrt(static_cast<Scalar>(n_g));
  const Scalar norm = v.norm();
  if (norm <= threshold) return Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(v.size());
  return ((Scalar(1) - threshold / norm) * v).eval();
}

/// Applies prox_group to every group of `values` in place; entries outside the
/// partition are left untouched.
template <class Derived>
void apply_group_prox(Eigen::MatrixBase<Derived>& values, const GroupPartition& partition,
                      typename Derived::Scalar alpha, typename Derived::Scalar lambda) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> block;
  for (const auto& group : partition.groups) {
    block.resize(static_cast<Index>(group.size()));
    for (std::size_t i = 0; i < group.size(); ++i) block[static_cast<Index>(i)] = values(group[i]);
    block = prox_group(block, alpha, lambda, static_cast<Index>(group.size()));
    for (std::size_t i = 0; i < group.size(); ++i) values(group[i]) = block[static_cast<Index>(i)];
  }
}

/// sum_g sqrt(n_g) ||theta^g||, the unscaled group-lasso term.
template <class Derived>
typename Derived::Scalar group_lasso_norm(const Eigen::MatrixBase<Derived>& values, const GroupPartition& partition) {
  using Scalar = typename Derived::Scalar;
  Scalar total(0);
  for (std::size_t g = 0; g < partition.size(); ++g) {
    Scalar s(0);
    for (Index j : partition.groups[g]) s += values(j) * values(j);
    total += static_cast<Scalar>(partition.weight(g)) * std::sqrt(s);
  }
  return total;
}

/// Differentiable lambda * sum_g sqrt(n_g) ||theta^g||. lambda must be >= 0.
Tensor penalty(const GroupPartition& partition, const Tensor& params, double lambda);

/// params <- prox(params - alpha * grad) group-wise; ungoverned entries take the
/// plain gradient step. With lambda == 0 this is exactly gradient descent.
void prox_step(Tensor& params, const Vector& grad, double alpha, double lambda, const GroupPartition& partition);

/// Shape information needed to count FLOPs of a governed layer.
struct LayerGeometry {
  Index c_out = 1, c_in = 1, kh = 1, kw = 1, h_out = 1, w_out = 1;

  static LayerGeometry conv(Index c_out, Index c_in, Index kh, Index kw, Index h_out, Index w_out) {
    return {c_out, c_in, kh, kw, h_out, w_out};
  }
  static LayerGeometry dense(Index in, Index out) { return {out, in, 1, 1, 1, 1}; }
  /// 2 * C_out * C_in * kH * kW * H_out * W_out (dense: 2 * in * out).
  double flops() const { return 2.0 * double(c_out) * double(c_in) * double(kh) * double(kw) * double(h_out * w_out); }
};

/// A weight tensor under the sparsity penalty.
struct GovernedWeight {
  GroupPartition partition;
  Tensor weight;
  LayerGeometry geometry;
};

struct SparsityMetrics {
  double parameter_sparsity_percent = 0.0;
  double group_sparsity_percent = 0.0;
  Index total_params = 0;
  Index nonzero_params = 0;
  Index total_groups = 0;
  Index zero_groups = 0;
  double total_flops = 0.0;
  double nonzero_flops = 0.0;
  /// total / nonzero; empty when every governed parameter is zero.
  std::optional<double> compression_ratio;
  std::optional<double> speed_up;
};

/// Pure summary of the zero pattern of the governed weights. FLOPs of a layer
/// shrink with the fraction of surviving groups (structured) or surviving
/// weights (unstructured).
SparsityMetrics measure(std::span<const GovernedWeight> governed);

using MaskArray = Eigen::Array<bool, Eigen::Dynamic, 1>;
/// true = active entry, false = forced to zero. Keyed by parameter id.
using MaskSet = std::map<std::string, MaskArray>;

enum class MaskStrategy { magnitude_groups, random_groups, from_current_zeros };

struct MaskResult {
  MaskSet masks;
  double achieved_percent = 0.0;  // masked entries / governed entries * 100
};

/// (governed index, group index) in pruning order.
using GroupOrder = std::vector<std::pair<std::size_t, std::size_t>>;

/// Masks groups following `order` until the masked share of governed entries
/// reaches `budget_percent`; groups already masked in `start` stay masked.
MaskResult prune_in_order(std::span<const GovernedWeight> governed, const GroupOrder& order, double budget_percent,
                          const MaskSet* start = nullptr);

/// Groups in ascending L2 norm (ties by position).
GroupOrder magnitude_order(std::span<const GovernedWeight> governed);
GroupOrder random_order(std::span<const GovernedWeight> governed, std::mt19937_64& rng);

/// Throws std::invalid_argument unless 0 <= budget < 100.
MaskResult build_mask(std::span<const GovernedWeight> governed, MaskStrategy strategy, double budget_percent,
                      std::mt19937_64& rng);

MaskSet all_active(std::span<const GovernedWeight> governed);
MaskSet current_zero_pattern(std::span<const GovernedWeight> governed);
double masked_percent(const MaskSet& masks);

void apply_mask(Vector& values, const MaskArray& mask);
void apply_mask(Tensor& params, const MaskArray& mask);
/// Enforces every mask whose id matches a governed weight.
void apply_masks(std::span<const GovernedWeight> governed, const MaskSet& masks);

struct ProfilePoint {
  int epoch = 0;
  double parameter_sparsity_percent = 0.0;
  double group_sparsity_percent = 0.0;
};

/// Learned or fixed sparsity strength together with the enforced masks.
struct SparsityState {
  double lambda_raw = 0.0;
  double beta = 1.0;
  MaskSet mask;
  std::vector<ProfilePoint> profile;

  double lambda() const;
};

}  // namespace metasparse
