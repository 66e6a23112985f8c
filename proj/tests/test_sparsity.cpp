#include <doctest.h>

#include "metasparse/sparsity.hpp"
#include "support.hpp"

using namespace metasparse;

TEST_CASE("penalty of the 3-4-5 group") {
  const auto part = GroupPartition::singletons("p", 2);
  GroupPartition one{"p", SparsityMode::structured, {{0, 1}}};
  const Tensor theta = Tensor::from({2}, (Vector(2) << 3, 4).finished());
  CHECK(penalty(one, theta, 1.0).item() == doctest::Approx(std::sqrt(2.0) * 5.0));
  CHECK(penalty(one, theta, 0.0).item() == 0.0);
  CHECK(penalty(part, theta, 1.0).item() == doctest::Approx(7.0));
}

TEST_CASE("prox_group hand cases and the boundary") {
  const Vector v = (Vector(2) << 3, 4).finished();
  // alpha * lambda * sqrt(2) = 1
  const Vector out = prox_group(v, 1.0 / std::sqrt(2.0), 1.0, 2);
  CHECK(out[0] == doctest::Approx(2.4));
  CHECK(out[1] == doctest::Approx(3.2));

  // ||v|| = 5 exactly equals the threshold when alpha * lambda = 5 / sqrt(2).
  const double a = 5.0 / std::sqrt(2.0);
  CHECK(prox_group(v, a, 1.0, 2).isZero(0.0));
  CHECK(prox_group(v, 1.0, 5.0, 1).isZero(0.0));

  // lambda -> 0 is the identity.
  const Vector id = prox_group(v, 1.0, 1e-12, 2);
  CHECK((id - v).norm() / v.norm() < 1e-9);
}

TEST_CASE("prox_group matches the bisection minimiser and never grows a group") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  std::uniform_int_distribution<int> n(1, 12);
  for (int i = 0; i < 200; ++i) {
    const Index ng = n(rng);
    const Vector v = oracle::random_vector(ng, rng);
    const double alpha = u(rng), lambda = u(rng);
    const Vector got = prox_group(v, alpha, lambda, ng);
    const Vector want = oracle::prox_by_bisection(v, alpha * lambda * std::sqrt(double(ng)));
    CHECK((got - want).norm() <= 1e-9);
    CHECK(got.norm() <= v.norm() + 1e-15);
  }
}

TEST_CASE("prox_group zeroes iff the norm is at most the threshold") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const Index ng = 1 + i % 7;
    Vector v = oracle::random_vector(ng, rng);
    const double t = v.norm();  // threshold = alpha * lambda * sqrt(n) with alpha = t / sqrt(n), lambda = 1
    const double alpha = t / std::sqrt(double(ng));
    CHECK(prox_group((v * (1.0 + 1e-9)).eval(), alpha, 1.0, ng).norm() > 0.0);
    CHECK(prox_group((v * (1.0 - 1e-9)).eval(), alpha, 1.0, ng).isZero(0.0));
  }
}

TEST_CASE("singleton prox is soft-thresholding") {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 100; ++i) {
    const Vector v = oracle::random_vector(1, rng);
    const double t = 0.3;
    const double want = (v[0] > 0 ? 1 : -1) * std::max(std::abs(v[0]) - t, 0.0);
    CHECK(std::abs(prox_group(v, 1.0, t, 1)[0] - want) <= 1e-12);
  }
}

TEST_CASE("prox_step with lambda 0 is a gradient step, bit for bit") {
  std::mt19937_64 rng(14);
  const auto part = GroupPartition::conv_input_channels("w", {2, 3, 1, 1});
  Tensor w = Tensor::from({2, 3, 1, 1}, oracle::random_vector(6, rng));
  const Vector before = w.data(), g = oracle::random_vector(6, rng);
  prox_step(w, g, 0.1, 0.0, part);
  const Vector plain = before - 0.1 * g;
  CHECK((w.data().array() == plain.array()).all());
}

TEST_CASE("prox_step converges to the grid minimiser of a quadratic plus group lasso") {
  // f(x) = 0.5 x^T A x - b^T x + lambda sqrt(2) ||x||, one group of size 2.
  Eigen::Matrix2d A;
  A << 2.0, 0.5, 0.5, 1.0;
  const Eigen::Vector2d b(1.2, -0.7);
  const double lambda = 0.2;
  const GroupPartition part{"x", SparsityMode::structured, {{0, 1}}};
  Tensor x = Tensor::from({2}, Vector::Zero(2));
  for (int it = 0; it < 500; ++it) {
    const Vector g = A * x.data() - b;
    prox_step(x, g, 0.2, lambda, part);
  }
  auto f = [&](double x0, double x1) {
    const Eigen::Vector2d p(x0, x1);
    return 0.5 * p.dot(A * p) - b.dot(p) + lambda * std::sqrt(2.0) * p.norm();
  };
  double best = 1e300, bx = 0, by = 0;
  for (double x0 = -1.0; x0 <= 1.0; x0 += 1e-3) {
    for (double x1 = -1.5; x1 <= 0.5; x1 += 1e-3) {
      if (const double v = f(x0, x1); v < best) best = v, bx = x0, by = x1;
    }
  }
  // refine around the coarse optimum at 1e-4 resolution
  const double cx = bx, cy = by;
  for (double x0 = cx - 2e-3; x0 <= cx + 2e-3; x0 += 1e-4) {
    for (double x1 = cy - 2e-3; x1 <= cy + 2e-3; x1 += 1e-4) {
      if (const double v = f(x0, x1); v < best) best = v, bx = x0, by = x1;
    }
  }
  CHECK(std::abs(x.data()[0] - bx) <= 1e-4);
  CHECK(std::abs(x.data()[1] - by) <= 1e-4);
  CHECK(f(x.data()[0], x.data()[1]) <= best + 1e-6);
}

TEST_CASE("partitions are validated and sized") {
  const auto conv = GroupPartition::conv_input_channels("c", {4, 2, 3, 3});
  CHECK(conv.size() == 2);
  CHECK(conv.group_size(0) == 36);
  CHECK_NOTHROW(conv.validate(72));
  const auto dense = GroupPartition::dense_input_features("d", {4, 3});
  CHECK(dense.size() == 4);
  CHECK(dense.groups[1] == std::vector<Index>{3, 4, 5});
  GroupPartition overlap{"o", SparsityMode::structured, {{0, 1}, {1, 2}}};
  CHECK_THROWS_AS(overlap.validate(3), std::invalid_argument);
  GroupPartition out_of_range{"o", SparsityMode::structured, {{0, 5}}};
  CHECK_THROWS_AS(out_of_range.validate(3), std::invalid_argument);
}

namespace {

/// conv [C_out 4, C_in 2, 3x3] producing 6x6, then dense [in 4, out 3].
std::vector<GovernedWeight> toy_network() {
  std::vector<GovernedWeight> g;
  g.push_back({GroupPartition::conv_input_channels("conv", {4, 2, 3, 3}), Tensor::constant({4, 2, 3, 3}, 1.0),
               LayerGeometry::conv(4, 2, 3, 3, 6, 6)});
  g.push_back({GroupPartition::dense_input_features("dense", {4, 3}), Tensor::constant({4, 3}, 1.0),
               LayerGeometry::dense(4, 3)});
  return g;
}

void zero_group(GovernedWeight& gw, std::size_t group) {
  Tensor w = gw.weight;
  for (Index j : gw.partition.groups[group]) w.mutable_data()[j] = 0.0;
}

}  // namespace

TEST_CASE("CR and Sp match hand counts on a two-layer toy network") {
  // params: conv 4*2*9 = 72, dense 4*3 = 12, total 84.
  // flops: conv 2*4*2*9*36 = 5184, dense 2*4*3 = 24, total 5208.
  auto net = toy_network();
  const auto dense_m = measure(net);
  CHECK(dense_m.total_params == 84);
  CHECK(dense_m.total_flops == 5208.0);
  CHECK(*dense_m.compression_ratio == 1.0);

  // Half of all channels: conv input channel 1 (36 weights), dense features 0 and 2 (6 weights).
  zero_group(net[0], 1);
  zero_group(net[1], 0);
  zero_group(net[1], 2);
  const auto m = measure(net);
  CHECK(m.nonzero_params == 42);
  CHECK(m.group_sparsity_percent == doctest::Approx(50.0));
  CHECK(m.parameter_sparsity_percent == doctest::Approx(50.0));
  CHECK(*m.compression_ratio == doctest::Approx(84.0 / 42.0));
  CHECK(*m.speed_up == doctest::Approx(5208.0 / 2604.0));

  // Only the conv channel: 48 nonzero, 2592 + 24 surviving flops.
  auto net2 = toy_network();
  zero_group(net2[0], 1);
  const auto m2 = measure(net2);
  CHECK(*m2.compression_ratio == doctest::Approx(84.0 / 48.0));
  CHECK(*m2.speed_up == doctest::Approx(5208.0 / 2616.0));
}

TEST_CASE("fully zero network has no CR") {
  auto net = toy_network();
  for (auto& gw : net) {
    for (std::size_t g = 0; g < gw.partition.size(); ++g) zero_group(gw, g);
  }
  CHECK_FALSE(measure(net).compression_ratio.has_value());
}

TEST_CASE("masks: magnitude order, budgets and enforcement") {
  auto net = toy_network();
  Tensor(net[1].weight).mutable_data().segment(6, 3).setConstant(1e-9);  // dense feature 2 is tiny
  const auto order = magnitude_order(net);
  CHECK(order.front() == std::make_pair(std::size_t(1), std::size_t(2)));

  std::mt19937_64 rng(0);
  CHECK(build_mask(net, MaskStrategy::magnitude_groups, 0.0, rng).achieved_percent == 0.0);
  const auto r = build_mask(net, MaskStrategy::magnitude_groups, 5.0, rng);
  CHECK(r.achieved_percent >= 5.0);
  CHECK_FALSE(r.masks.at("dense")[6]);
  CHECK_THROWS_AS(build_mask(net, MaskStrategy::magnitude_groups, 100.0, rng), std::invalid_argument);

  apply_masks(net, r.masks);
  CHECK(net[1].weight.data().segment(6, 3).isZero());
  CHECK(masked_percent(current_zero_pattern(net)) == doctest::Approx(r.achieved_percent));
}

TEST_CASE("prune_in_order keeps masks monotone") {
  auto net = toy_network();
  std::mt19937_64 rng(5);
  const auto order = random_order(net, rng);
  const auto a = prune_in_order(net, order, 20.0);
  const auto b = prune_in_order(net, order, 40.0, &a.masks);
  for (const auto& [id, mask] : a.masks) CHECK_FALSE((!mask && b.masks.at(id)).any());
  CHECK(b.achieved_percent >= a.achieved_percent);
}
