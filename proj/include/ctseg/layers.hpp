#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ctseg/rng.hpp"
#include "ctseg/tensor.hpp"

namespace ctseg::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>(value.n(), value.c(), value.h(), value.w());
  }
  void zero_grad() { grad.fill(T{0}); }
};

/// A differentiable stage with cached activations. `backward` must be called
/// after the matching `forward` and accumulates into parameter gradients.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  // Non-trainable state that still belongs in a checkpoint.
  virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() { return {}; }
  virtual std::string kind() const = 0;
  virtual int out_channels(int in_channels) const { return in_channels; }
  // Spatial downsampling factor of this layer's output relative to its input.
  virtual int downsample() const { return 1; }
  virtual void set_frozen(bool) {}
};

namespace detail {

template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* row = dst + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill_n(row, wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(wo, w + pad - kx);
            std::fill_n(row, std::max(0, lo), T{0});
            if (hi > lo) std::copy(src + lo - pad + kx, src + hi - pad + kx, row + lo);
            if (hi < wo) std::fill(row + std::max(hi, 0), row + wo, T{0});
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  const std::size_t p = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c; ++ci) {
    T* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * p;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const T* row = src + static_cast<std::size_t>(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> he_normal(int n, int c, int h, int w, int fan_in, NormalSampler& rng) {
  Tensor<T> t(n, c, h, w);
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : t.vec()) v = static_cast<T>(rng() * std);
  return t;
}

}  // namespace detail

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

/// Pure convolution: weight is Cout x Cin x k x k, bias may be null.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const T* bias, ConvGeometry geo,
                         AlignedVector<T>& col) {
  const int cout = weight.n(), cin = weight.c();
  require(x.c() == cin, ErrorCode::kShape,
          "conv2d: expected " + std::to_string(cin) + " channels, got " + x.shape_str());
  const int ho = geo.out_size(x.h()), wo = geo.out_size(x.w());
  Tensor<T> out(x.n(), cout, ho, wo);
  const int kk = cin * geo.kernel * geo.kernel;
  const int p = ho * wo;
  ConstMatrixMap<T> wmat(weight.data(), cout, kk);
  for (int i = 0; i < x.n(); ++i) {
    MatrixMap<T> omat(out.sample(i), cout, p);
    if (geo.pointwise()) {
      omat.noalias() = wmat * ConstMatrixMap<T>(x.sample(i), cin, p);
    } else {
      col.resize(static_cast<std::size_t>(kk) * p);
      detail::im2col(x.sample(i), cin, x.h(), x.w(), geo.kernel, geo.stride, geo.pad, ho, wo, col.data());
      omat.noalias() = wmat * ConstMatrixMap<T>(col.data(), kk, p);
    }
    if (bias) {
      for (int co = 0; co < cout; ++co) omat.row(co).array() += bias[co];
    }
  }
  return out;
}

/// Accumulates weight/bias gradients when dw/db are non-null; returns the
/// input gradient when `input_grad` is set (empty tensor otherwise).
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& weight, ConvGeometry geo,
                          T* dw, T* db, bool input_grad, AlignedVector<T>& col) {
  const int cout = weight.n(), cin = weight.c();
  const int ho = g.h(), wo = g.w();
  const int kk = cin * geo.kernel * geo.kernel;
  const int p = ho * wo;
  Tensor<T> gin;
  if (input_grad) gin = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  ConstMatrixMap<T> wmat(weight.data(), cout, kk);
  for (int i = 0; i < x.n(); ++i) {
    ConstMatrixMap<T> gmat(g.sample(i), cout, p);
    if (dw) {
      MatrixMap<T> dwm(dw, cout, kk);
      if (geo.pointwise()) {
        dwm.noalias() += gmat * ConstMatrixMap<T>(x.sample(i), cin, p).transpose();
      } else {
        col.resize(static_cast<std::size_t>(kk) * p);
        detail::im2col(x.sample(i), cin, x.h(), x.w(), geo.kernel, geo.stride, geo.pad, ho, wo, col.data());
        dwm.noalias() += gmat * ConstMatrixMap<T>(col.data(), kk, p).transpose();
      }
    }
    if (db) {
      for (int co = 0; co < cout; ++co) db[co] += gmat.row(co).sum();
    }
    if (input_grad) {
      if (geo.pointwise()) {
        MatrixMap<T>(gin.sample(i), cin, p).noalias() = wmat.transpose() * gmat;
      } else {
        col.resize(static_cast<std::size_t>(kk) * p);
        MatrixMap<T>(col.data(), kk, p).noalias() = wmat.transpose() * gmat;
        detail::col2im(col.data(), cin, x.h(), x.w(), geo.kernel, geo.stride, geo.pad, ho, wo, gin.sample(i));
      }
    }
  }
  return gin;
}

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int cin, int cout, int kernel, int stride, int pad, NormalSampler& rng, bool bias = true)
      : geo_{kernel, stride, pad}, cout_(cout), has_bias_(bias) {
    require(cin > 0 && cout > 0 && kernel > 0 && stride > 0 && pad >= 0, ErrorCode::kInvalidArgument,
            "conv2d: bad geometry");
    weight_ = Param<T>("weight", detail::he_normal<T>(cout, cin, kernel, kernel, cin * kernel * kernel, rng));
    if (has_bias_) bias_ = Param<T>("bias", Tensor<T>(1, cout, 1, 1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    input_ = x;
    return conv2d_forward(x, weight_.value, has_bias_ ? bias_.value.data() : nullptr, geo_, col_);
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    return conv2d_backward(input_, g, weight_.value, geo_, frozen_ ? nullptr : weight_.grad.data(),
                           (frozen_ || !has_bias_) ? nullptr : bias_.grad.data(), input_grad_, col_);
  }

  std::vector<Param<T>*> params() override {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
  }
  std::string kind() const override { return "conv" + std::to_string(geo_.kernel); }
  int out_channels(int) const override { return cout_; }
  int downsample() const override { return geo_.stride; }
  void set_frozen(bool f) override { frozen_ = f; }
  // The first layer of a network never needs an input gradient.
  void set_input_grad(bool on) { input_grad_ = on; }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  ConvGeometry geo_;
  int cout_;
  bool has_bias_;
  bool frozen_ = false;
  bool input_grad_ = true;
  Param<T> weight_, bias_;
  Tensor<T> input_;
  AlignedVector<T> col_;
};

/// 2x2, stride-2 transposed convolution (exact 2x upsampling).
template <typename T>
class ConvTranspose2x2 final : public Layer<T> {
 public:
  ConvTranspose2x2(int cin, int cout, NormalSampler& rng) : cin_(cin), cout_(cout) {
    // rows ordered (out_channel, dy, dx)
    weight_ = Param<T>("weight", detail::he_normal<T>(cout * 4, cin, 1, 1, cin, rng));
    bias_ = Param<T>("bias", Tensor<T>(1, cout, 1, 1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.c() == cin_, ErrorCode::kShape, "convT: channel mismatch " + x.shape_str());
    input_ = x;
    const int h = x.h(), w = x.w(), p = h * w;
    Tensor<T> out(x.n(), cout_, 2 * h, 2 * w);
    ConstMatrixMap<T> wmat(weight_.value.data(), cout_ * 4, cin_);
    buf_.resize(static_cast<std::size_t>(cout_) * 4 * p);
    for (int i = 0; i < x.n(); ++i) {
      MatrixMap<T> z(buf_.data(), cout_ * 4, p);
      z.noalias() = wmat * ConstMatrixMap<T>(x.sample(i), cin_, p);
      for (int co = 0; co < cout_; ++co) {
        const T b = bias_.value.data()[co];
        for (int d = 0; d < 4; ++d) {
          const int dy = d / 2, dx = d % 2;
          const T* src = buf_.data() + static_cast<std::size_t>(co * 4 + d) * p;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out(i, co, 2 * y + dy, 2 * xx + dx) = src[y * w + xx] + b;
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    const Tensor<T>& x = input_;
    const int h = x.h(), w = x.w(), p = h * w;
    Tensor<T> gin(x.n(), cin_, h, w);
    ConstMatrixMap<T> wmat(weight_.value.data(), cout_ * 4, cin_);
    MatrixMap<T> dw(weight_.grad.data(), cout_ * 4, cin_);
    buf_.resize(static_cast<std::size_t>(cout_) * 4 * p);
    for (int i = 0; i < x.n(); ++i) {
      for (int co = 0; co < cout_; ++co) {
        T bsum = 0;
        for (int d = 0; d < 4; ++d) {
          const int dy = d / 2, dx = d % 2;
          T* dst = buf_.data() + static_cast<std::size_t>(co * 4 + d) * p;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
              dst[y * w + xx] = g(i, co, 2 * y + dy, 2 * xx + dx);
              bsum += dst[y * w + xx];
            }
        }
        bias_.grad.data()[co] += bsum;
      }
      ConstMatrixMap<T> gz(buf_.data(), cout_ * 4, p);
      dw.noalias() += gz * ConstMatrixMap<T>(x.sample(i), cin_, p).transpose();
      MatrixMap<T>(gin.sample(i), cin_, p).noalias() = wmat.transpose() * gz;
    }
    return gin;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "convT2"; }
  int out_channels(int) const override { return cout_; }

 private:
  int cin_, cout_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
  AlignedVector<T> buf_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    Tensor<T> out = x;
    for (auto& v : out.vec()) v = v > T{0} ? v : T{0};
    output_ = out;
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin = g;
    const T* o = output_.data();
    T* d = gin.data();
    for (std::size_t i = 0; i < gin.size(); ++i)
      if (!(o[i] > T{0})) d[i] = T{0};
    return gin;
  }
  std::string kind() const override { return "relu"; }

 private:
  Tensor<T> output_;
};

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    Tensor<T> out = x;
    for (auto& v : out.vec()) v = T{1} / (T{1} + std::exp(-v));
    output_ = out;
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin = g;
    const T* o = output_.data();
    T* d = gin.data();
    for (std::size_t i = 0; i < gin.size(); ++i) d[i] *= o[i] * (T{1} - o[i]);
    return gin;
  }
  std::string kind() const override { return "sigmoid"; }

 private:
  Tensor<T> output_;
};

template <typename T>
class MaxPool2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.h() % 2 == 0 && x.w() % 2 == 0, ErrorCode::kShape, "maxpool: odd extent " + x.shape_str());
    in_shape_ = x.shape();
    const int ho = x.h() / 2, wo = x.w() / 2;
    Tensor<T> out(x.n(), x.c(), ho, wo);
    argmax_.assign(out.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* plane = x.channel(i, c);
        const std::size_t base = static_cast<std::size_t>(plane - x.data());
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx, ++o) {
            int best = 2 * y * x.w() + 2 * xx;
            for (int d = 1; d < 4; ++d) {
              const int idx = (2 * y + d / 2) * x.w() + 2 * xx + d % 2;
              if (plane[idx] > plane[best]) best = idx;
            }
            argmax_[o] = base + best;
            out.data()[o] = plane[best];
          }
      }
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < g.size(); ++o) gin.data()[argmax_[o]] += g.data()[o];
    return gin;
  }
  std::string kind() const override { return "maxpool2"; }
  int downsample() const override { return 2; }

 private:
  std::array<int, 4> in_shape_{};
  std::vector<std::size_t> argmax_;
};

template <typename T>
class Upsample2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool) override {
    Tensor<T> out(x.n(), x.c(), 2 * x.h(), 2 * x.w());
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int y = 0; y < out.h(); ++y)
          for (int xx = 0; xx < out.w(); ++xx) out(i, c, y, xx) = x(i, c, y / 2, xx / 2);
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin(g.n(), g.c(), g.h() / 2, g.w() / 2);
    for (int i = 0; i < g.n(); ++i)
      for (int c = 0; c < g.c(); ++c)
        for (int y = 0; y < g.h(); ++y)
          for (int xx = 0; xx < g.w(); ++xx) gin(i, c, y / 2, xx / 2) += g(i, c, y, xx);
    return gin;
  }
  std::string kind() const override { return "upsample2"; }
};

namespace detail {

// Normalization backward over one group of m elements with cached xhat.
template <typename T>
void norm_backward(const T* dy, const T* xhat, T gamma, T inv_std, std::size_t m, T* dx, T& dgamma,
                   T& dbeta) {
  double sum_dy = 0, sum_dy_xhat = 0;
  for (std::size_t j = 0; j < m; ++j) {
    sum_dy += dy[j];
    sum_dy_xhat += static_cast<double>(dy[j]) * xhat[j];
  }
  dgamma += static_cast<T>(sum_dy_xhat);
  dbeta += static_cast<T>(sum_dy);
  const double scale = static_cast<double>(gamma) * inv_std / static_cast<double>(m);
  for (std::size_t j = 0; j < m; ++j)
    dx[j] = static_cast<T>(scale * (static_cast<double>(m) * dy[j] - sum_dy - xhat[j] * sum_dy_xhat));
}

}  // namespace detail

/// Per-sample, per-channel normalization over the spatial plane.
template <typename T>
class InstanceNorm final : public Layer<T> {
 public:
  explicit InstanceNorm(int channels, T eps = T(1e-5)) : c_(channels), eps_(eps) {
    gamma_ = Param<T>("gamma", Tensor<T>(1, channels, 1, 1, T{1}));
    beta_ = Param<T>("beta", Tensor<T>(1, channels, 1, 1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.c() == c_, ErrorCode::kShape, "instancenorm: channel mismatch");
    xhat_ = Tensor<T>(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(static_cast<std::size_t>(x.n()) * c_, T{0});
    Tensor<T> out(x.n(), x.c(), x.h(), x.w());
    const std::size_t m = x.plane();
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < c_; ++c) {
        const T* src = x.channel(i, c);
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < m; ++j) mean += src[j];
        mean /= static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= static_cast<double>(m);
        const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
        inv_std_[i * c_ + c] = inv;
        T* xh = xhat_.channel(i, c);
        T* dst = out.channel(i, c);
        const T g = gamma_.value.data()[c], b = beta_.value.data()[c];
        for (std::size_t j = 0; j < m; ++j) {
          xh[j] = static_cast<T>((src[j] - mean) * inv);
          dst[j] = g * xh[j] + b;
        }
      }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin(g.n(), g.c(), g.h(), g.w());
    const std::size_t m = g.plane();
    for (int i = 0; i < g.n(); ++i)
      for (int c = 0; c < c_; ++c)
        detail::norm_backward(g.channel(i, c), xhat_.channel(i, c), gamma_.value.data()[c],
                              inv_std_[i * c_ + c], m, gin.channel(i, c), gamma_.grad.data()[c],
                              beta_.grad.data()[c]);
    return gin;
  }

  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::string kind() const override { return "instancenorm"; }

 private:
  int c_;
  T eps_;
  Param<T> gamma_, beta_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

/// Batch normalization over (n, h, w); running statistics are used outside
/// training.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5))
      : c_(channels), momentum_(momentum), eps_(eps),
        running_mean_(1, channels, 1, 1), running_var_(1, channels, 1, 1, T{1}) {
    gamma_ = Param<T>("gamma", Tensor<T>(1, channels, 1, 1, T{1}));
    beta_ = Param<T>("beta", Tensor<T>(1, channels, 1, 1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    require(x.c() == c_, ErrorCode::kShape, "batchnorm: channel mismatch");
    Tensor<T> out(x.n(), x.c(), x.h(), x.w());
    const std::size_t plane = x.plane();
    const std::size_t m = plane * x.n();
    training_ = training;
    if (training) {
      xhat_ = Tensor<T>(x.n(), x.c(), x.h(), x.w());
      inv_std_.assign(c_, T{0});
    }
    for (int c = 0; c < c_; ++c) {
      double mean = 0, var = 0;
      if (training) {
        for (int i = 0; i < x.n(); ++i) {
          const T* src = x.channel(i, c);
          for (std::size_t j = 0; j < plane; ++j) mean += src[j];
        }
        mean /= static_cast<double>(m);
        for (int i = 0; i < x.n(); ++i) {
          const T* src = x.channel(i, c);
          for (std::size_t j = 0; j < plane; ++j) var += (src[j] - mean) * (src[j] - mean);
        }
        var /= static_cast<double>(m);
        const double unbiased = m > 1 ? var * m / (m - 1) : var;
        running_mean_.data()[c] = static_cast<T>((1 - momentum_) * running_mean_.data()[c] + momentum_ * mean);
        running_var_.data()[c] = static_cast<T>((1 - momentum_) * running_var_.data()[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_.data()[c];
        var = running_var_.data()[c];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
      if (training) inv_std_[c] = inv;
      const T g = gamma_.value.data()[c], b = beta_.value.data()[c];
      for (int i = 0; i < x.n(); ++i) {
        const T* src = x.channel(i, c);
        T* dst = out.channel(i, c);
        T* xh = training ? xhat_.channel(i, c) : nullptr;
        for (std::size_t j = 0; j < plane; ++j) {
          const T v = static_cast<T>((src[j] - mean) * inv);
          if (xh) xh[j] = v;
          dst[j] = g * v + b;
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    require(training_, ErrorCode::kInvalidArgument, "batchnorm: backward requires a training forward");
    Tensor<T> gin(g.n(), g.c(), g.h(), g.w());
    const std::size_t plane = g.plane();
    const double m = static_cast<double>(plane * g.n());
    for (int c = 0; c < c_; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int i = 0; i < g.n(); ++i) {
        const T* dy = g.channel(i, c);
        const T* xh = xhat_.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          sum_dy += dy[j];
          sum_dy_xhat += static_cast<double>(dy[j]) * xh[j];
        }
      }
      gamma_.grad.data()[c] += static_cast<T>(sum_dy_xhat);
      beta_.grad.data()[c] += static_cast<T>(sum_dy);
      const double scale = gamma_.value.data()[c] * inv_std_[c] / m;
      for (int i = 0; i < g.n(); ++i) {
        const T* dy = g.channel(i, c);
        const T* xh = xhat_.channel(i, c);
        T* dx = gin.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j)
          dx[j] = static_cast<T>(scale * (m * dy[j] - sum_dy - xh[j] * sum_dy_xhat));
      }
    }
    return gin;
  }

  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
    return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
  }
  std::string kind() const override { return "batchnorm"; }

 private:
  int c_;
  T momentum_, eps_;
  Param<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  bool training_ = false;
};

/// Replicates a single-channel image into `channels` channels and subtracts
/// a per-channel mean (the usual preprocessing for RGB feature backbones).
template <typename T>
class GrayToChannels final : public Layer<T> {
 public:
  explicit GrayToChannels(std::vector<T> means) : means_(std::move(means)) {}

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    require(x.c() == 1, ErrorCode::kShape, "backbone input must be single-channel, got " + x.shape_str());
    const int c = static_cast<int>(means_.size());
    Tensor<T> out(x.n(), c, x.h(), x.w());
    for (int i = 0; i < x.n(); ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* src = x.channel(i, 0);
        T* dst = out.channel(i, ch);
        for (std::size_t j = 0; j < x.plane(); ++j) dst[j] = src[j] - means_[ch];
      }
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin(g.n(), 1, g.h(), g.w());
    for (int i = 0; i < g.n(); ++i)
      for (int ch = 0; ch < g.c(); ++ch) {
        const T* src = g.channel(i, ch);
        T* dst = gin.channel(i, 0);
        for (std::size_t j = 0; j < g.plane(); ++j) dst[j] += src[j];
      }
    return gin;
  }
  std::string kind() const override { return "gray_to_channels"; }
  int out_channels(int) const override { return static_cast<int>(means_.size()); }

 private:
  std::vector<T> means_;
};

template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> cur = x;
    for (auto& l : layers_) cur = l->forward(cur, training);
    return cur;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> cur = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
  }
  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& l : layers_)
      for (auto& b : l->buffers()) out.push_back(b);
    return out;
  }
  std::string kind() const override { return "sequential"; }
  int out_channels(int c) const override {
    for (const auto& l : layers_) c = l->out_channels(c);
    return c;
  }
  int downsample() const override {
    int f = 1;
    for (const auto& l : layers_) f *= l->downsample();
    return f;
  }
  void set_frozen(bool f) override {
    for (auto& l : layers_) l->set_frozen(f);
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& operator[](std::size_t i) { return *layers_[i]; }
  const Layer<T>& operator[](std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// y = x + body(x)
template <typename T>
class Residual final : public Layer<T> {
 public:
  explicit Residual(Sequential<T> body) : body_(std::move(body)) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> out = body_.forward(x, training);
    out += x;
    return out;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> gin = body_.backward(g);
    gin += g;
    return gin;
  }
  std::vector<Param<T>*> params() override { return body_.params(); }
  std::string kind() const override { return "residual"; }

 private:
  Sequential<T> body_;
};

template <typename T>
void zero_grad(const std::vector<Param<T>*>& ps) {
  for (auto* p : ps) p->zero_grad();
}

template <typename T>
std::uint64_t param_checksum(const std::vector<Param<T>*>& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : ps) h = checksum<T>(p->value.span(), h);
  return h;
}

}  // namespace ctseg::nn
