#pragma once

// Independent oracles shared by the unit, integration and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "metasparse/ops.hpp"
#include "metasparse/tensor.hpp"

namespace oracle {

using metasparse::Index;
using metasparse::Tensor;
using metasparse::Vector;

/// |a - n| <= rel * (|a| + |n|) + floor.
inline bool close(double analytic, double numeric, double rel, double floor = 1e-8) {
  return std::abs(analytic - numeric) <= rel * (std::abs(analytic) + std::abs(numeric)) + floor;
}

struct FdReport {
  int checked = 0;
  int skipped = 0;  // perturbation crossed a relu kink
  int failed = 0;
  double worst = 0.0;  // largest error / tolerance
};

/**
 * Central differences of the scalar `f` with respect to `coords` entries of
 * the leaves in `inputs`, compared with the reverse-mode gradient. When
 * `coords` is empty every entry is checked.
 */
inline FdReport fd_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double rel,
                         std::mt19937_64& rng, int coords = 0, double h = 1e-6) {
  for (const auto& t : inputs) {
    Tensor x = t;
    x.zero_grad();
  }
  std::vector<bool> base_signs;
  {
    metasparse::ReluSignRecorder rec;
    Tensor y = f();
    y.backward();
    base_signs = rec.take();
  }
  FdReport r;
  for (const auto& t : inputs) {
    Tensor x = t;
    const Vector g = x.grad();
    std::vector<Index> idx(static_cast<std::size_t>(x.numel()));
    for (Index i = 0; i < x.numel(); ++i) idx[static_cast<std::size_t>(i)] = i;
    if (coords > 0 && static_cast<Index>(idx.size()) > coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(coords));
    }
    for (Index i : idx) {
      const double saved = x.data()[i];
      double fp, fm;
      bool kink = false;
      {
        metasparse::NoGradGuard ng;
        metasparse::ReluSignRecorder rec;
        x.mutable_data()[i] = saved + h;
        fp = f().item();
        kink = kink || rec.take() != base_signs;
        x.mutable_data()[i] = saved - h;
        fm = f().item();
        kink = kink || rec.take() != base_signs;
        x.mutable_data()[i] = saved;
      }
      if (kink) {
        ++r.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      ++r.checked;
      // Error as a fraction of the allowed tolerance; above 1 fails.
      const double err = std::abs(g[i] - numeric) / (rel * (std::abs(g[i]) + std::abs(numeric)) + 1e-8);
      r.worst = std::max(r.worst, err);
      if (!close(g[i], numeric, rel)) ++r.failed;
    }
  }
  return r;
}

/**
 * Minimiser of 0.5||x - v||^2 + t||x|| by bisection. The minimiser lies on the
 * ray through v (the objective only grows under rotation away from v), so it
 * reduces to s >= 0 minimising 0.5(s - ||v||)^2 + t s, whose derivative
 * s - ||v|| + t is bisected on [0, ||v||].
 */
inline Vector prox_by_bisection(const Vector& v, double t) {
  const double nv = v.norm();
  if (nv == 0.0) return Vector::Zero(v.size());
  auto d = [&](double s) { return s - nv + t; };
  if (d(0.0) >= 0.0) return Vector::Zero(v.size());
  double lo = 0.0, hi = nv;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (d(mid) < 0.0 ? lo : hi) = mid;
  }
  return (0.5 * (lo + hi) / nv) * v;
}

inline double prox_objective(const Vector& x, const Vector& v, double t) {
  return 0.5 * (x - v).squaredNorm() + t * x.norm();
}

inline Vector random_vector(Index n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = nd(rng);
  return v;
}

}  // namespace oracle
