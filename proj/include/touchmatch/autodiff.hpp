#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns every value produced during a forward pass. Ops append a node
// holding the output value and a closure that scatters the output gradient
// into the gradients of the op's inputs. Tape::backward walks the nodes in
// reverse recording order, so each closure runs at most once.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "touchmatch/error.hpp"
#include "touchmatch/rng.hpp"
#include "touchmatch/tensor.hpp"

namespace touchmatch::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  /// Receives the gradient of the node's output; must accumulate into inputs
  /// through Tape::grad_buffer.
  using Backward = std::function<void(Tape&, const Tensor&)>;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, requires_grad, "leaf"});
    return Var{this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var record(const char* op, Tensor value, std::span<const Var> inputs, Backward backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op + " (shape " +
                         shape_str(value.shape()) + ")");
    }
    bool needs_grad = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs_grad = needs_grad || nodes_[in.id].requires_grad;
    }
    nodes_.push_back(
        Node{std::move(value), Tensor{}, needs_grad ? std::move(backward) : Backward{}, needs_grad, op});
    return Var{this, nodes_.size() - 1};
  }

  /// Seeds d(root)/d(root) = 1 and propagates. The root must hold one element.
  void backward(Var root) {
    check_owner(root);
    if (nodes_[root.id].value.size() != 1) {
      throw DimensionError("backward requires a scalar root, got shape " +
                           shape_str(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor{};
    nodes_[root.id].grad = Tensor(nodes_[root.id].value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      ++backward_calls_;
      n.backward(*this, n.grad);
    }
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }

  /// Gradient after backward(); a zero tensor when the node was not reached.
  const Tensor& grad(Var v) {
    check_owner(v);
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient accumulator for an input, allocated as zeros on first use.
  Tensor& grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t backward_calls() const noexcept { return backward_calls_; }
  const char* op_name(Var v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad;
    const char* op;
  };

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw InvalidArgument("variable belongs to another tape");
  }

  std::vector<Node> nodes_;
  std::size_t backward_calls_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }
inline const Tensor& Var::grad() const { return tape->grad(*this); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, k, stride, pad, out_h, out_w;

  std::size_t patch() const { return c * k * k; }
  std::size_t columns() const { return n * out_h * out_w; }
};

// cols has shape [C*k*k, N*outH*outW]; column index = (n*outH + oh)*outW + ow.
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* plane = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            double* dst = row + (n * g.out_h + oh) * g.out_w;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(dst, dst + g.out_w, 0.0);
              continue;
            }
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const auto iw =
                  static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
              dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : plane[ih * g.w + iw];
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t ncols = g.columns();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* plane = dx + (n * g.c + c) * g.h * g.w;
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const double* src = row + (n * g.out_h + oh) * g.out_w;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const auto iw =
                  static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) plane[ih * g.w + iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

}  // namespace detail

/// Stable logistic function, clamped so the result is strictly inside (0, 1).
inline double sigmoid(double z) noexcept {
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1.0p-53;
  const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(s, lo, hi);
}

/// log(sigmoid(z)) without overflow or cancellation.
inline double log_sigmoid(double z) noexcept {
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

/// 2-D convolution (cross-correlation), NCHW input, FCkk kernel, no bias.
inline Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad) {
  Tape& tape = *input.tape;
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "kernel");
  if (stride == 0) throw InvalidArgument("conv2d: stride must be positive");
  if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(w.shape()));
  }
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, 0, 0};
  if (g.k > g.h + 2 * pad || g.k > g.w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  g.out_h = (g.h + 2 * pad - g.k) / stride + 1;
  g.out_w = (g.w + 2 * pad - g.k) / stride + 1;

  Tensor cols({g.patch(), g.columns()});
  detail::im2col(x.data().data(), g, cols.data().data());

  const std::size_t plane = g.out_h * g.out_w;
  Tensor prod({g.f, g.columns()});
  detail::as_matrix(prod, g.f, g.columns()).noalias() =
      detail::as_matrix(w, g.f, g.patch()) * detail::as_matrix(cols, g.patch(), g.columns());

  Tensor out({g.n, g.f, g.out_h, g.out_w});
  for (std::size_t f = 0; f < g.f; ++f) {
    for (std::size_t n = 0; n < g.n; ++n) {
      std::copy_n(&prod[f * g.columns() + n * plane], plane, &out[(n * g.f + f) * plane]);
    }
  }

  return tape.record("conv2d", std::move(out), {input, kernel},
                     [input, kernel, g, cols = std::move(cols)](Tape& t, const Tensor& dy) {
                       const std::size_t plane = g.out_h * g.out_w;
                       Tensor dy_mat({g.f, g.columns()});
                       for (std::size_t f = 0; f < g.f; ++f) {
                         for (std::size_t n = 0; n < g.n; ++n) {
                           std::copy_n(&dy[(n * g.f + f) * plane], plane, &dy_mat[f * g.columns() + n * plane]);
                         }
                       }
                       const auto dy_m = detail::as_matrix(dy_mat, g.f, g.columns());
                       if (t.requires_grad(kernel)) {
                         detail::as_matrix(t.grad_buffer(kernel), g.f, g.patch()).noalias() +=
                             dy_m * detail::as_matrix(cols, g.patch(), g.columns()).transpose();
                       }
                       if (t.requires_grad(input)) {
                         Tensor dcols({g.patch(), g.columns()});
                         detail::as_matrix(dcols, g.patch(), g.columns()).noalias() =
                             detail::as_matrix(t.value(kernel), g.f, g.patch()).transpose() * dy_m;
                         detail::col2im_add(dcols.data().data(), g, t.grad_buffer(input).data().data());
                       }
                     });
}

/// Adds a per-channel bias to an NCHW tensor.
inline Var add_channel_bias(Var input, Var bias) {
  Tape& tape = *input.tape;
  const Tensor& x = input.value();
  const Tensor& b = bias.value();
  detail::require_rank(x, 4, "add_channel_bias", "input");
  if (b.size() != x.dim(1)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out = x;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) out[(i * c + ch) * plane + p] += b[ch];

  return tape.record("add_channel_bias", std::move(out), {input, bias},
                     [input, bias, n, c, plane](Tape& t, const Tensor& dy) {
                       if (t.requires_grad(input)) t.grad_buffer(input) += dy;
                       if (t.requires_grad(bias)) {
                         Tensor& db = t.grad_buffer(bias);
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double s = 0.0;
                             for (std::size_t p = 0; p < plane; ++p) s += dy[(i * c + ch) * plane + p];
                             db[ch] += s;
                           }
                       }
                     });
}

/// output[n,m] = sum_d input[n,d] * weight[d,m] + bias[m]
inline Var affine(Var input, Var weight, Var bias) {
  Tape& tape = *input.tape;
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  detail::require_rank(x, 2, "affine", "input");
  detail::require_rank(w, 2, "affine", "weight");
  if (x.dim(1) != w.dim(0) || b.size() != w.dim(1)) {
    throw DimensionError("affine: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                         ", bias " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
  Tensor out({n, m});
  auto y = detail::as_matrix(out, n, m);
  y.noalias() = detail::as_matrix(x, n, d) * detail::as_matrix(w, d, m);
  y.rowwise() += detail::as_matrix(b, 1, m).row(0);

  return tape.record("affine", std::move(out), {input, weight, bias},
                     [input, weight, bias, n, d, m](Tape& t, const Tensor& dy) {
                       const auto g = detail::as_matrix(dy, n, m);
                       if (t.requires_grad(input)) {
                         detail::as_matrix(t.grad_buffer(input), n, d).noalias() +=
                             g * detail::as_matrix(t.value(weight), d, m).transpose();
                       }
                       if (t.requires_grad(weight)) {
                         detail::as_matrix(t.grad_buffer(weight), d, m).noalias() +=
                             detail::as_matrix(t.value(input), n, d).transpose() * g;
                       }
                       if (t.requires_grad(bias)) {
                         detail::as_matrix(t.grad_buffer(bias), 1, m) += g.colwise().sum();
                       }
                     });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape->record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& dy) {
    const Tensor& in = t.value(x);
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (in[i] > 0.0) dx[i] += dy[i];
  });
}

inline Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = sigmoid(v);
  Tensor saved = out;
  return x.tape->record("sigmoid", std::move(out), {x}, [x, s = std::move(saved)](Tape& t, const Tensor& dy) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s[i] * (1.0 - s[i]);
  });
}

/// Concatenates along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  Tape& tape = *parts.front().tape;
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t a = 0; ok && a < s.size(); ++a) ok = a == axis || s[a] == first[a];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];

  Tensor out(out_shape);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const std::size_t width = p.shape()[axis] * inner;
    const Tensor& v = p.value();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(&v[o * width], width, &out[o * out_row + offset]);
    offsets.push_back(offset);
    offset += width;
  }

  Tape::Backward backward = [parts, offsets, outer, inner, out_row, axis](Tape& t, const Tensor& dy) {
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!t.requires_grad(parts[i])) continue;
      const std::size_t width = t.value(parts[i]).shape()[axis] * inner;
      Tensor& dx = t.grad_buffer(parts[i]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < width; ++j) dx[o * width + j] += dy[o * out_row + offsets[i] + j];
    }
  };
  return tape.record("concat", std::move(out), std::span<const Var>(parts), std::move(backward));
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
inline Var global_avg_pool(Var x) {
  const Tensor& v = x.value();
  detail::require_rank(v, 4, "global_avg_pool", "input");
  const std::size_t n = v.dim(0), c = v.dim(1), plane = v.dim(2) * v.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += v[i * plane + p];
    out[i] = s / static_cast<double>(plane);
  }
  return x.tape->record("global_avg_pool", std::move(out), {x}, [x, n, c, plane](Tape& t, const Tensor& dy) {
    Tensor& dx = t.grad_buffer(x);
    const double scale = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += dy[i] * scale;
  });
}

/// Inverted dropout. Eval mode and rate 0 return the input node unchanged.
inline Var dropout(Var x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw InvalidArgument("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(x.shape());
  for (double& m : mask.data()) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record("dropout", std::move(out), {x}, [x, mask = std::move(mask)](Tape& t, const Tensor& dy) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

inline void require_binary_labels(const Tensor& labels, const char* op) {
  for (double y : labels.data()) {
    if (y != 0.0 && y != 1.0) throw InvalidArgument(std::string(op) + ": labels must be 0 or 1");
  }
}

/// Mean binary cross-entropy from pre-sigmoid logits, using
/// softplus(z) - y*z = max(z,0) - y*z + log1p(exp(-|z|)).
inline Var bce_with_logits(Var logits, const Tensor& labels) {
  const Tensor& z = logits.value();
  if (z.size() != labels.size()) {
    throw DimensionError("bce_with_logits: logits " + shape_str(z.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  }
  require_binary_labels(labels, "bce_with_logits");
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    total += std::max(z[i], 0.0) - labels[i] * z[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  const double inv_n = 1.0 / static_cast<double>(z.size());
  return logits.tape->record("bce_with_logits", Tensor::scalar(total * inv_n), {logits},
                             [logits, labels, inv_n](Tape& t, const Tensor& dy) {
                               const Tensor& zz = t.value(logits);
                               Tensor& dz = t.grad_buffer(logits);
                               for (std::size_t i = 0; i < zz.size(); ++i)
                                 dz[i] += dy[0] * (sigmoid(zz[i]) - labels[i]) * inv_n;
                             });
}

/// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
  a.value().require_same_shape(b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& dy) {
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_buffer(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * t.value(b)[i];
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buffer(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * t.value(a)[i];
    }
  });
}

/// Sum of all elements to a scalar.
inline Var sum(Var x) {
  return x.tape->record("sum", Tensor::scalar(x.value().sum()), {x}, [x](Tape& t, const Tensor& dy) {
    Tensor& dx = t.grad_buffer(x);
    for (double& v : dx.data()) v += dy[0];
  });
}

}  // namespace touchmatch::ad

namespace touchmatch {

/// Mean binary cross-entropy on probabilities, with 0*log(0) taken as 0.
/// Training uses ad::bce_with_logits; this is the evaluation-side form.
inline double bce_loss(const Tensor& probabilities, const Tensor& labels) {
  if (probabilities.size() != labels.size() || labels.empty()) {
    throw DimensionError("bce_loss: probabilities " + shape_str(probabilities.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  }
  ad::require_binary_labels(labels, "bce_loss");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("bce_loss: probability outside [0, 1]");
    const double q = labels[i] == 1.0 ? p : 1.0 - p;
    total -= q == 1.0 ? 0.0 : std::log(q);
  }
  return total / static_cast<double>(labels.size());
}

}  // namespace touchmatch
