#include "metasparse/ops.hpp"

#include <cmath>
#include <sstream>

namespace metasparse {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

thread_local ReluSignRecorder* active_recorder = nullptr;

[[noreturn]] void shape_error(const char* op, std::initializer_list<const Tensor*> operands, const char* why) {
  std::ostringstream os;
  os << op << ": " << why << " (shapes";
  for (const Tensor* t : operands) os << ' ' << to_string(t->shape());
  os << ')';
  throw ShapeError(os.str());
}

Tensor make_result(const char* op, Shape shape, Vector value, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  if (!NoGradGuard::enabled())
    for (const auto& in : inputs) any = any || in->requires_grad;
  if (any) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void push(Node& input, const Vector& g) {
  if (input.requires_grad) input.accumulate(g);
}

template <class F, class DF>
Tensor pointwise(const char* op, const Tensor& x, F f, DF df) {
  Vector out = x.data().unaryExpr(f);
  return make_result(op, x.shape(), out, {x.node()}, [df](Node& self) {
    Node& in = *self.inputs[0];
    push(in, self.grad.cwiseProduct(in.value.binaryExpr(self.value, df)));
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", {&a, &b}, "inner dimensions differ");
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vector out(m * n);
  RowMap(out.data(), m, n).noalias() = ConstRowMap(a.data().data(), m, k) * ConstRowMap(b.data().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstRowMap g(self.grad.data(), m, n);
    if (na.requires_grad) {
      Vector ga(m * k);
      RowMap(ga.data(), m, k).noalias() = g * ConstRowMap(nb.value.data(), k, n).transpose();
      na.accumulate(ga);
    }
    if (nb.requires_grad) {
      Vector gb(k * n);
      RowMap(gb.data(), k, n).noalias() = ConstRowMap(na.value.data(), m, k).transpose() * g;
      nb.accumulate(gb);
    }
  });
}

namespace {

struct ConvGeometry {
  Index batch, c_in, h, w, c_out, kh, kw, pad, h_out, w_out;
  Index patch() const { return c_in * kh * kw; }
  Index pixels() const { return h_out * w_out; }
};

// Column matrix [C_in*kH*kW, H_out*W_out] for one sample.
void im2col(const double* image, const ConvGeometry& g, RowMatrix& col) {
  col.setZero(g.patch(), g.pixels());
  for (Index c = 0; c < g.c_in; ++c) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Index row = (c * g.kh + ky) * g.kw + kx;
        for (Index oy = 0; oy < g.h_out; ++oy) {
          const Index iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.w_out; ++ox) {
            const Index ix = ox + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            col(row, oy * g.w_out + ox) = image[(c * g.h + iy) * g.w + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& col, const ConvGeometry& g, double* image) {
  for (Index c = 0; c < g.c_in; ++c) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Index row = (c * g.kh + ky) * g.kw + kx;
        for (Index oy = 0; oy < g.h_out; ++oy) {
          const Index iy = oy + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (Index ox = 0; ox < g.w_out; ++ox) {
            const Index ix = ox + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            image[(c * g.h + iy) * g.w + ix] += col(row, oy * g.w_out + ox);
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Index padding) {
  if (input.rank() != 4 || kernel.rank() != 4) shape_error("conv2d", {&input, &kernel}, "expected rank-4 input and kernel");
  if (input.dim(1) != kernel.dim(1)) shape_error("conv2d", {&input, &kernel}, "input channels differ from kernel channels");
  if (padding < 0) shape_error("conv2d", {&input, &kernel}, "negative padding");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3),
                 padding, 0, 0};
  g.h_out = g.h + 2 * padding - g.kh + 1;
  g.w_out = g.w + 2 * padding - g.kw + 1;
  if (g.h_out <= 0 || g.w_out <= 0) shape_error("conv2d", {&input, &kernel}, "kernel larger than padded input");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    shape_error("conv2d", {&input, &kernel, &bias}, "bias must have one entry per output channel");
  }

  auto cols = std::make_shared<std::vector<RowMatrix>>(g.batch);
  Vector out(g.batch * g.c_out * g.pixels());
  ConstRowMap k(kernel.data().data(), g.c_out, g.patch());
  const Index in_stride = g.c_in * g.h * g.w;
  const Index out_stride = g.c_out * g.pixels();
  for (Index b = 0; b < g.batch; ++b) {
    im2col(input.data().data() + b * in_stride, g, (*cols)[b]);
    RowMap o(out.data() + b * out_stride, g.c_out, g.pixels());
    o.noalias() = k * (*cols)[b];
    if (bias.defined()) o.colwise() += bias.data();
  }

  std::vector<NodePtr> inputs{input.node(), kernel.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  const bool has_bias = bias.defined();
  return make_result("conv2d", {g.batch, g.c_out, g.h_out, g.w_out}, std::move(out), std::move(inputs),
                     [g, cols, has_bias, in_stride, out_stride](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& nk = *self.inputs[1];
                       Vector gk = Vector::Zero(nk.value.size());
                       Vector gx = nx.requires_grad ? Vector::Zero(nx.value.size()) : Vector();
                       Vector gb = Vector::Zero(g.c_out);
                       RowMap gk_map(gk.data(), g.c_out, g.patch());
                       ConstRowMap k(nk.value.data(), g.c_out, g.patch());
                       RowMatrix dcol;
                       for (Index b = 0; b < g.batch; ++b) {
                         ConstRowMap go(self.grad.data() + b * out_stride, g.c_out, g.pixels());
                         if (nk.requires_grad) gk_map.noalias() += go * (*cols)[b].transpose();
                         if (has_bias) gb += go.rowwise().sum();
                         if (nx.requires_grad) {
                           dcol.noalias() = k.transpose() * go;
                           col2im_add(dcol, g, gx.data() + b * in_stride);
                         }
                       }
                       if (nx.requires_grad) nx.accumulate(gx);
                       push(nk, gk);
                       if (has_bias) push(*self.inputs[2], gb);
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", {&a, &b}, "shapes differ");
  return make_result("add", a.shape(), a.data() + b.data(), {a.node(), b.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad);
    push(*self.inputs[1], self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", {&a, &b}, "shapes differ");
  return make_result("mul", a.shape(), a.data().cwiseProduct(b.data()), {a.node(), b.node()}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) na.accumulate(self.grad.cwiseProduct(nb.value));
    if (nb.requires_grad) nb.accumulate(self.grad.cwiseProduct(na.value));
  });
}

Tensor scale(const Tensor& a, double factor) {
  return make_result("scale", a.shape(), a.data() * factor, {a.node()},
                     [factor](Node& self) { push(*self.inputs[0], self.grad * factor); });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
    shape_error("add_bias", {&x, &bias}, "expected [B,n] + [n]");
  }
  const Index rows = x.dim(0), cols = x.dim(1);
  Vector out = x.data();
  RowMap(out.data(), rows, cols).rowwise() += bias.data().transpose();
  return make_result("add_bias", x.shape(), std::move(out), {x.node(), bias.node()}, [rows, cols](Node& self) {
    push(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      self.inputs[1]->accumulate(ConstRowMap(self.grad.data(), rows, cols).colwise().sum().transpose());
    }
  });
}

Tensor relu(const Tensor& x) {
  if (active_recorder) active_recorder->record(x.data());
  return pointwise(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

double softplus_value(double x, double beta) {
  const double z = beta * x;
  if (z > 30.0) return x;
  return std::log1p(std::exp(z)) / beta;
}

double softplus_derivative(double x, double beta) {
  const double z = beta * x;
  if (z > 30.0) return 1.0;
  return 1.0 / (1.0 + std::exp(-z));
}

double softplus_inverse(double y, double beta) {
  if (!(y > 0.0)) throw std::domain_error("softplus_inverse: argument must be positive");
  const double z = beta * y;
  if (z > 30.0) return y;
  return std::log(std::expm1(z)) / beta;
}

Tensor softplus(const Tensor& x, double beta) {
  return pointwise(
      "softplus", x, [beta](double v) { return softplus_value(v, beta); },
      [beta](double in, double) { return softplus_derivative(in, beta); });
}

Tensor log(const Tensor& x) {
  return pointwise(
      "log", x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Tensor exp(const Tensor& x) {
  return pointwise(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor square(const Tensor& x) {
  return pointwise(
      "square", x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Tensor sqrt(const Tensor& x) {
  return pointwise(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double out) { return 0.5 / out; });
}

Tensor sum(const Tensor& x) {
  const Index n = x.numel();
  return make_result("sum", {1}, Vector::Constant(1, x.data().sum()), {x.node()},
                     [n](Node& self) { push(*self.inputs[0], Vector::Constant(n, self.grad[0])); });
}

Tensor mean(const Tensor& x) {
  const Index n = x.numel();
  return make_result("mean", {1}, Vector::Constant(1, x.data().mean()), {x.node()}, [n](Node& self) {
    push(*self.inputs[0], Vector::Constant(n, self.grad[0] / static_cast<double>(n)));
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) shape_error("global_avg_pool", {&x}, "expected [B,C,H,W]");
  const Index bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Vector out = ConstRowMap(x.data().data(), bc, hw).rowwise().mean();
  return make_result("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x.node()}, [bc, hw](Node& self) {
    Vector g(bc * hw);
    RowMap(g.data(), bc, hw).colwise() = self.grad / static_cast<double>(hw);
    push(*self.inputs[0], g);
  });
}

Tensor group_norms(const Tensor& x, const std::vector<std::vector<Index>>& groups) {
  const Index n = x.numel();
  Vector out(static_cast<Index>(groups.size()));
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    double s = 0.0;
    for (Index j : groups[gi]) {
      if (j < 0 || j >= n) shape_error("group_norms", {&x}, "group index out of range");
      s += x.data()[j] * x.data()[j];
    }
    out[static_cast<Index>(gi)] = std::sqrt(s);
  }
  return make_result("group_norms", {static_cast<Index>(groups.size())}, std::move(out), {x.node()},
                     [groups, n](Node& self) {
                       Node& in = *self.inputs[0];
                       if (!in.requires_grad) return;
                       Vector g = Vector::Zero(n);
                       for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                         const double norm = self.value[static_cast<Index>(gi)];
                         if (norm == 0.0) continue;
                         const double factor = self.grad[static_cast<Index>(gi)] / norm;
                         for (Index j : groups[gi]) g[j] += factor * in.value[j];
                       }
                       in.accumulate(g);
                     });
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) shape_error("mse", {&prediction, &target}, "shapes differ");
  const Vector diff = prediction.data() - target.data();
  const double n = static_cast<double>(diff.size());
  return make_result("mse", {1}, Vector::Constant(1, diff.squaredNorm() / n), {prediction.node(), target.node()},
                     [diff, n](Node& self) {
                       const Vector g = diff * (2.0 * self.grad[0] / n);
                       push(*self.inputs[0], g);
                       push(*self.inputs[1], -g);
                     });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
  if (logits.shape() != labels.shape()) shape_error("cross_entropy", {&logits, &labels}, "shapes differ");
  const Vector& z = logits.data();
  const Vector& y = labels.data();
  const double n = static_cast<double>(z.size());
  // log(1 + e^z) - y z, evaluated stably.
  double total = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    total += std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i]))) - y[i] * z[i];
  }
  return make_result("cross_entropy", {1}, Vector::Constant(1, total / n), {logits.node(), labels.node()},
                     [n](Node& self) {
                       const Vector& z = self.inputs[0]->value;
                       const Vector& y = self.inputs[1]->value;
                       const double scale_factor = self.grad[0] / n;
                       const Vector sig = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
                       push(*self.inputs[0], (sig - y) * scale_factor);
                       push(*self.inputs[1], -z * scale_factor);
                     });
}

ReluSignRecorder::ReluSignRecorder() : previous_(active_recorder) { active_recorder = this; }

ReluSignRecorder::~ReluSignRecorder() { active_recorder = previous_; }

void ReluSignRecorder::record(const Vector& input) {
  for (Index i = 0; i < input.size(); ++i) signs_.push_back(input[i] > 0.0);
}

std::vector<bool> ReluSignRecorder::take() { return std::exchange(signs_, {}); }

}  // namespace metasparse
