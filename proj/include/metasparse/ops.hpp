#pragma once

#include <vector>

#include "metasparse/tensor.hpp"

namespace metasparse {

// Linear algebra and convolution.
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
/// Stride-1 cross-correlation. input [B,C_in,H,W], kernel [C_out,C_in,kH,kW],
/// optional bias [C_out] (pass an empty Tensor to skip), zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor(), Index padding = 0);

// Elementwise arithmetic on equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x [B,n] + bias [n], broadcast over the leading batch axis.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// Pointwise nonlinearities.
Tensor relu(const Tensor& x);
/// (1/beta) log(1 + exp(beta x)); returns x itself once beta x > 30.
Tensor softplus(const Tensor& x, double beta = 1.0);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);

// Reductions to a scalar of shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// [B,C,H,W] -> [B,C] mean over the spatial axes.
Tensor global_avg_pool(const Tensor& x);

/// L2 norm of each index group of x's flat storage, shape [G]. The gradient of
/// an all-zero group is taken as zero.
Tensor group_norms(const Tensor& x, const std::vector<std::vector<Index>>& groups);

// Losses, mean-reduced to shape [1].
Tensor mse(const Tensor& prediction, const Tensor& target);
/// Binary cross-entropy on logits; labels in {0,1} (or probabilities).
Tensor cross_entropy(const Tensor& logits, const Tensor& labels);

// Scalar helpers shared by the numerics.
double softplus_value(double x, double beta = 1.0);
/// d softplus / dx = sigmoid(beta x).
double softplus_derivative(double x, double beta = 1.0);
/// Inverse of softplus for y > 0.
double softplus_inverse(double y, double beta = 1.0);

/**
 * Records the sign pattern of every relu input evaluated on this thread
 * while installed. Finite-difference checks use it to detect perturbations
 * that cross a relu kink.
 */
class ReluSignRecorder {
 public:
  ReluSignRecorder();
  ~ReluSignRecorder();
  ReluSignRecorder(const ReluSignRecorder&) = delete;
  ReluSignRecorder& operator=(const ReluSignRecorder&) = delete;

  std::vector<bool> take();
  void record(const Vector& input);

 private:
  std::vector<bool> signs_;
  ReluSignRecorder* previous_;
};

}  // namespace metasparse
