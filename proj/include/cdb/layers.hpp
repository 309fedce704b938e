#pragma once

// Hand-differentiated layers over NCHW tensors. Each layer caches what its
// backward needs during a forward call; the cache is only valid until the
// next forward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cdb/cdb_block.hpp"
#include "cdb/error.hpp"
#include "cdb/gemm.hpp"
#include "cdb/random.hpp"
#include "cdb/tensor.hpp"

namespace cdb {

/// A trainable tensor, its gradient, and whether weight decay applies.
template <Real T>
struct Param {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
  bool decay = true;
};

/// Named non-trainable state (batch-norm running statistics).
template <Real T>
struct Buffer {
  std::string name;
  Tensor<T>* value = nullptr;
};

namespace detail {

inline void require_shape(const Shape& got, const Shape& want, const char* op) {
  if (got != want)
    throw InvalidShape(std::string(op) + ": expected " + shape_str(want) + ", got " + shape_str(got));
}

}  // namespace detail

/// 3x3 convolution, stride 1, zero padding 1.
template <Real T>
class Conv2d {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels)
      : in_(in_channels),
        out_(out_channels),
        weight_({out_channels, in_channels, 3, 3}),
        bias_({out_channels}),
        dweight_(weight_.shape()),
        dbias_(bias_.shape()) {}

  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(in_ * 9));
    for (auto& w : weight_.data()) w = static_cast<T>(rng.normal() * std);
    bias_.fill(T(0));
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }

  /// Skip the input gradient (first layer of a network).
  void set_need_input_grad(bool v) { need_input_grad_ = v; }

  Tensor<T> forward(const Tensor<T>& x) {
    require_rank(x, 4, "conv2d_forward");
    if (x.extent(1) != in_)
      throw InvalidShape("conv2d_forward: expected " + std::to_string(in_) + " input channels, got " +
                         std::to_string(x.extent(1)));
    n_ = x.extent(0);
    h_ = x.extent(2);
    w_ = x.extent(3);
    const std::size_t hw = h_ * w_, k = in_ * 9, cols = n_ * hw;
    im2col(x);
    std::vector<T> y(out_ * cols);
    detail::gemm<T>(false, false, out_, cols, k, T(1), weight_.raw(), cols_.data(), T(0), y.data());
    Tensor<T> out({n_, out_, h_, w_});
    for (std::size_t o = 0; o < out_; ++o) {
      const T b = bias_[o];
      for (std::size_t n = 0; n < n_; ++n) {
        const T* src = y.data() + o * cols + n * hw;
        T* dst = out.raw() + (n * out_ + o) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
      }
    }
    return out;
  }

  /// Accumulates into the weight/bias gradients and returns dL/dx.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    detail::require_shape(grad_out.shape(), {n_, out_, h_, w_}, "conv2d_backward");
    const std::size_t hw = h_ * w_, k = in_ * 9, cols = n_ * hw;
    std::vector<T> dy(out_ * cols);
    for (std::size_t o = 0; o < out_; ++o) {
      double db = 0;
      for (std::size_t n = 0; n < n_; ++n) {
        const T* src = grad_out.raw() + (n * out_ + o) * hw;
        T* dst = dy.data() + o * cols + n * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          dst[i] = src[i];
          db += src[i];
        }
      }
      dbias_[o] += static_cast<T>(db);
    }
    detail::gemm<T>(false, true, out_, k, cols, T(1), dy.data(), cols_.data(), T(1), dweight_.raw());
    if (!need_input_grad_) return {};
    std::vector<T> dcols(k * cols);
    detail::gemm<T>(true, false, k, cols, out_, T(1), weight_.raw(), dy.data(), T(0), dcols.data());
    return col2im(dcols);
  }

  void params(const std::string& prefix, std::vector<Param<T>>& out) {
    out.push_back({prefix + ".weight", &weight_, &dweight_, true});
    out.push_back({prefix + ".bias", &bias_, &dbias_, true});
  }

 private:
  // Row (ci*9 + ky*3 + kx), column (n*HW + y*W + x).
  void im2col(const Tensor<T>& x) {
    const std::size_t hw = h_ * w_, cols = n_ * hw;
    cols_.assign(in_ * 9 * cols, T(0));
    for (std::size_t ci = 0; ci < in_; ++ci) {
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = cols_.data() + ((ci * 9) + ky * 3 + kx) * cols;
          for (std::size_t n = 0; n < n_; ++n) {
            const T* plane = x.raw() + (n * in_ + ci) * hw;
            T* dst = row + n * hw;
            for (std::size_t y = 0; y < h_; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h_)) continue;
              const T* src = plane + static_cast<std::size_t>(sy) * w_;
              const std::size_t x0 = kx == 0 ? 1 : 0;
              const std::size_t x1 = kx == 2 ? w_ - 1 : w_;
              for (std::size_t xx = x0; xx < x1; ++xx) dst[y * w_ + xx] = src[xx + kx - 1];
            }
          }
        }
      }
    }
  }

  Tensor<T> col2im(const std::vector<T>& dcols) const {
    const std::size_t hw = h_ * w_, cols = n_ * hw;
    Tensor<T> dx({n_, in_, h_, w_});
    for (std::size_t ci = 0; ci < in_; ++ci) {
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const T* row = dcols.data() + ((ci * 9) + ky * 3 + kx) * cols;
          for (std::size_t n = 0; n < n_; ++n) {
            T* plane = dx.raw() + (n * in_ + ci) * hw;
            const T* src = row + n * hw;
            for (std::size_t y = 0; y < h_; ++y) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h_)) continue;
              T* dst = plane + static_cast<std::size_t>(sy) * w_;
              const std::size_t x0 = kx == 0 ? 1 : 0;
              const std::size_t x1 = kx == 2 ? w_ - 1 : w_;
              for (std::size_t xx = x0; xx < x1; ++xx) dst[xx + kx - 1] += src[y * w_ + xx];
            }
          }
        }
      }
    }
    return dx;
  }

  std::size_t in_, out_;
  Tensor<T> weight_, bias_, dweight_, dbias_;
  bool need_input_grad_ = true;
  std::size_t n_ = 0, h_ = 0, w_ = 0;
  std::vector<T> cols_;
};

/// Per-channel batch normalization over (N, H, W).
template <Real T>
class BatchNorm2d {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  explicit BatchNorm2d(std::size_t channels)
      : c_(channels),
        scale_({channels}, T(1)),
        shift_({channels}, T(0)),
        dscale_({channels}),
        dshift_({channels}),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  Tensor<T>& scale() { return scale_; }
  Tensor<T>& shift() { return shift_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    require_rank(x, 4, "batchnorm_forward");
    if (x.extent(1) != c_)
      throw InvalidShape("batchnorm_forward: expected " + std::to_string(c_) + " channels, got " +
                         std::to_string(x.extent(1)));
    const std::size_t n = x.extent(0), hw = x.extent(2) * x.extent(3);
    Tensor<T> y(x.shape());
    mode_ = mode;
    shape_ = x.shape();
    if (mode == Mode::Eval) {
      for (std::size_t c = 0; c < c_; ++c) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + kEpsilon);
        const T a = static_cast<T>(scale_[c] * inv);
        const T b = static_cast<T>(shift_[c] - running_mean_[c] * scale_[c] * inv);
        for (std::size_t b_ = 0; b_ < n; ++b_) {
          const std::size_t base = (b_ * c_ + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) y[base + i] = x[base + i] * a + b;
        }
      }
      return y;
    }
    if (n < 2) throw DegenerateBatch("batchnorm in train mode needs N >= 2, got " + std::to_string(n));
    const double m = static_cast<double>(n * hw);
    xhat_ = Tensor<T>(x.shape());
    inv_std_.assign(c_, 0.0);
    for (std::size_t c = 0; c < c_; ++c) {
      double sum = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.raw() + (b * c_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double mean = sum / m;
      double sq = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.raw() + (b * c_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      const double var = sq / m;
      const double inv = 1.0 / std::sqrt(var + kEpsilon);
      inv_std_[c] = inv;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * c_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = static_cast<T>((x[base + i] - mean) * inv);
          xhat_[base + i] = xh;
          y[base + i] = xh * scale_[c] + shift_[c];
        }
      }
      const double unbiased = m > 1 ? var * m / (m - 1) : var;
      running_mean_[c] = static_cast<T>((1 - kMomentum) * running_mean_[c] + kMomentum * mean);
      running_var_[c] = static_cast<T>((1 - kMomentum) * running_var_[c] + kMomentum * unbiased);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    detail::require_shape(grad_out.shape(), shape_, "batchnorm_backward");
    const std::size_t n = shape_[0], hw = shape_[2] * shape_[3];
    Tensor<T> dx(shape_);
    if (mode_ == Mode::Eval) {
      // Affine map with frozen statistics.
      for (std::size_t c = 0; c < c_; ++c) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + kEpsilon);
        const T a = static_cast<T>(scale_[c] * inv);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c_ + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) dx[base + i] = grad_out[base + i] * a;
        }
      }
      return dx;
    }
    const double m = static_cast<double>(n * hw);
    for (std::size_t c = 0; c < c_; ++c) {
      double sum_dy = 0, sum_dy_xh = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * c_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += grad_out[base + i];
          sum_dy_xh += static_cast<double>(grad_out[base + i]) * xhat_[base + i];
        }
      }
      dscale_[c] += static_cast<T>(sum_dy_xh);
      dshift_[c] += static_cast<T>(sum_dy);
      const double k = scale_[c] * inv_std_[c] / m;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * c_ + c) * hw;
        for (std::size_t i = 0; i < hw; ++i)
          dx[base + i] = static_cast<T>(k * (m * grad_out[base + i] - sum_dy - xhat_[base + i] * sum_dy_xh));
      }
    }
    return dx;
  }

  void params(const std::string& prefix, std::vector<Param<T>>& out) {
    out.push_back({prefix + ".scale", &scale_, &dscale_, false});
    out.push_back({prefix + ".shift", &shift_, &dshift_, false});
  }

  void buffers(const std::string& prefix, std::vector<Buffer<T>>& out) {
    out.push_back({prefix + ".running_mean", &running_mean_});
    out.push_back({prefix + ".running_var", &running_var_});
  }

 private:
  std::size_t c_;
  Tensor<T> scale_, shift_, dscale_, dshift_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  Shape shape_;
  Mode mode_ = Mode::Train;
};

template <Real T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    input_ = x;
    return y;
  }

  /// Subgradient at 0 is 0.
  Tensor<T> backward(const Tensor<T>& grad_out) const {
    detail::require_shape(grad_out.shape(), input_.shape(), "relu_backward");
    Tensor<T> dx(grad_out.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = input_[i] > T(0) ? grad_out[i] : T(0);
    return dx;
  }

 private:
  Tensor<T> input_;
};

/// 2x2 max pooling, stride 2. Gradient routes to the lowest flat index among ties.
template <Real T>
class MaxPool2x2 {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    require_rank(x, 4, "maxpool2x2_forward");
    in_shape_ = x.shape();
    const std::size_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) throw InvalidShape("maxpool2x2_forward: map smaller than 2x2: " + shape_str(x.shape()));
    Tensor<T> y({n, c, oh, ow});
    argmax_.assign(y.size(), 0);
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* plane = x.raw() + p * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (2 * oy) * w + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = (2 * oy + dy) * w + 2 * ox + dx;
              if (plane[idx] > plane[best]) best = idx;
            }
          const std::size_t o = (p * oh + oy) * ow + ox;
          y[o] = plane[best];
          argmax_[o] = p * h * w + best;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) const {
    if (grad_out.size() != argmax_.size())
      throw InvalidShape("maxpool2x2_backward: gradient " + shape_str(grad_out.shape()) + " does not match forward");
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < argmax_.size(); ++o) dx[argmax_[o]] += grad_out[o];
    return dx;
  }

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

template <Real T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    require_rank(x, 4, "global_avg_pool_forward");
    in_shape_ = x.shape();
    const std::size_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    Tensor<T> y({n, c});
    for (std::size_t p = 0; p < n * c; ++p) {
      double s = 0;
      for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
      y[p] = static_cast<T>(s / static_cast<double>(hw));
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) const {
    detail::require_shape(grad_out.shape(), {in_shape_[0], in_shape_[1]}, "global_avg_pool_backward");
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    Tensor<T> dx(in_shape_);
    const T inv = static_cast<T>(1.0 / static_cast<double>(hw));
    for (std::size_t p = 0; p < grad_out.size(); ++p)
      for (std::size_t i = 0; i < hw; ++i) dx[p * hw + i] = grad_out[p] * inv;
    return dx;
  }

 private:
  Shape in_shape_;
};

/// y = x W^T + b with W of shape [out, in].
template <Real T>
class Linear {
 public:
  Linear(std::size_t in_features, std::size_t out_features)
      : in_(in_features),
        out_(out_features),
        weight_({out_features, in_features}),
        bias_({out_features}),
        dweight_(weight_.shape()),
        dbias_(bias_.shape()) {}

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& w : weight_.data()) w = static_cast<T>((2 * rng.uniform01() - 1) * bound);
    bias_.fill(T(0));
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

  Tensor<T> forward(const Tensor<T>& x) {
    require_rank(x, 2, "linear_forward");
    if (x.extent(1) != in_)
      throw InvalidShape("linear_forward: expected " + std::to_string(in_) + " features, got " +
                         std::to_string(x.extent(1)));
    input_ = x;
    const std::size_t n = x.extent(0);
    Tensor<T> y({n, out_});
    detail::gemm<T>(false, true, n, out_, in_, T(1), x.raw(), weight_.raw(), T(0), y.raw());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < out_; ++o) y(b, o) += bias_[o];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    detail::require_shape(grad_out.shape(), {input_.extent(0), out_}, "linear_backward");
    const std::size_t n = input_.extent(0);
    detail::gemm<T>(true, false, out_, in_, n, T(1), grad_out.raw(), input_.raw(), T(1), dweight_.raw());
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < out_; ++o) dbias_[o] += grad_out(b, o);
    Tensor<T> dx({n, in_});
    detail::gemm<T>(false, false, n, in_, out_, T(1), grad_out.raw(), weight_.raw(), T(0), dx.raw());
    return dx;
  }

  void params(const std::string& prefix, std::vector<Param<T>>& out) {
    out.push_back({prefix + ".weight", &weight_, &dweight_, true});
    out.push_back({prefix + ".bias", &bias_, &dbias_, true});
  }

 private:
  std::size_t in_, out_;
  Tensor<T> weight_, bias_, dweight_, dbias_;
  Tensor<T> input_;
};

template <Real T>
struct LossResult {
  double loss = 0;
  Tensor<T> dlogits;
};

/// Mean cross-entropy over the batch with max-subtracted softmax.
template <Real T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (labels.size() != n)
    throw InvalidShape("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                       std::to_string(n));
  LossResult<T> r{0.0, Tensor<T>(logits.shape())};
  std::vector<double> p(k);
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] >= k)
      throw InvalidLabel("label " + std::to_string(labels[b]) + " outside [0," + std::to_string(k) + ")");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits(b, j)));
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(logits(b, j) - mx);
      z += p[j];
    }
    r.loss += -(logits(b, labels[b]) - mx - std::log(z));
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = j == labels[b] ? 1.0 : 0.0;
      r.dlogits(b, j) = static_cast<T>((p[j] / z - onehot) / static_cast<double>(n));
    }
  }
  r.loss /= static_cast<double>(n);
  return r;
}

}  // namespace cdb
