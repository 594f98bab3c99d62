#ifndef SCONE_NN_HPP_
#define SCONE_NN_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "scone/error.hpp"
#include "scone/rng.hpp"
#include "scone/tensor.hpp"

namespace scone {

enum class ParamGroup { Backbone = 0, Head = 1, Contrastive = 2 };

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  ParamGroup group = ParamGroup::Head;
  bool trainable = true;

  Eigen::Index count() const {
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

/**
 * @brief Named, flat parameter arrays. A zeroed copy with the same layout is
 * used as the gradient buffer, so layers address both through the same ids.
 */
template <typename T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<int> shape, ParamGroup group, bool trainable = true) {
    if (index_.count(name)) throw ShapeError("duplicate parameter " + name);
    ParamSpec spec{name, std::move(shape), group, trainable};
    values_.emplace_back(Vec<T>::Zero(spec.count()));
    specs_.push_back(std::move(spec));
    index_.emplace(name, specs_.size() - 1);
    return specs_.size() - 1;
  }

  std::size_t size() const { return specs_.size(); }
  const ParamSpec& spec(std::size_t id) const { return specs_[id]; }
  const std::vector<ParamSpec>& specs() const { return specs_; }
  Vec<T>& operator[](std::size_t id) { return values_[id]; }
  const Vec<T>& operator[](std::size_t id) const { return values_[id]; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  ParamStore zeros_like() const {
    ParamStore out = *this;
    for (auto& v : out.values_) v.setZero();
    return out;
  }

  void set_zero() {
    for (auto& v : values_) v.setZero();
  }

  ParamStore& operator+=(const ParamStore& o) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
  }

  void scale(T s) {
    for (auto& v : values_) v *= s;
  }

  Eigen::Index total_count() const {
    Eigen::Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](const Vec<T>& v) { return v.allFinite(); });
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto id = out.add(specs_[i].name, specs_[i].shape, specs_[i].group, specs_[i].trainable);
      out[id] = values_[i].template cast<U>();
    }
    return out;
  }

  /// Copies every same-named, same-shaped array from `src`; returns names copied.
  std::vector<std::string> copy_matching(const ParamStore& src) {
    std::vector<std::string> copied;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      auto j = src.find(specs_[i].name);
      if (!j) continue;
      if (src.spec(*j).shape != specs_[i].shape)
        throw ShapeError("parameter " + specs_[i].name + " has a different shape in the source");
      values_[i] = src[*j];
      copied.push_back(specs_[i].name);
    }
    return copied;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::vector<Vec<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
void init_normal(Vec<T>& v, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void init_uniform(Vec<T>& v, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
}

/// Zeroes gradient entries where the (post-ReLU) activation was not positive.
template <typename T>
void relu_backward_inplace(const Tensor<T>& activated, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activated[i] > T(0))) grad[i] = T(0);
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// 2-D convolution (square kernel) computed as a GEMM over im2col columns.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, int in, int out, int kernel, int stride, int pad,
         ParamGroup group, bool bias = true)
      : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias) {
    w_ = store.add(name + ".weight", {out, in, kernel, kernel}, group);
    if (bias) b_ = store.add(name + ".bias", {out}, group);
  }

  void init(ParamStore<T>& store, Rng& rng) const {
    init_normal(store[w_], std::sqrt(2.0 / (in_ * k_ * k_)), rng);
    if (has_bias_) store[b_].setZero();
  }

  int out_size(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x) const {
    check_shape(x.channels() == in_, "conv expects " + std::to_string(in_) + " channels, got " + x.shape_string());
    const int ho = out_size(x.height()), wo = out_size(x.width());
    check_shape(ho > 0 && wo > 0, "conv input too small: " + x.shape_string());
    Tensor<T> y(out_, ho, wo);
    const ConstMatMap<T> w(p[w_].data(), out_, in_ * k_ * k_);
    if (pointwise()) {
      y.matrix().noalias() = w * x.matrix();
    } else {
      const Mat<T> col = im2col(x, ho, wo);
      y.matrix().noalias() = w * col;
    }
    if (has_bias_) y.matrix().colwise() += p[b_];
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx when wanted.
  Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& x, const Tensor<T>& dy, ParamStore<T>& g,
                     bool want_dx = true) const {
    const ConstMatMap<T> w(p[w_].data(), out_, in_ * k_ * k_);
    MatMap<T> dw(g[w_].data(), out_, in_ * k_ * k_);
    if (has_bias_) g[b_] += dy.matrix().rowwise().sum();
    if (pointwise()) {
      dw.noalias() += dy.matrix() * x.matrix().transpose();
      if (!want_dx) return {};
      Tensor<T> dx(in_, x.height(), x.width());
      dx.matrix().noalias() = w.transpose() * dy.matrix();
      return dx;
    }
    const Mat<T> col = im2col(x, dy.height(), dy.width());
    dw.noalias() += dy.matrix() * col.transpose();
    if (!want_dx) return {};
    const Mat<T> dcol = w.transpose() * dy.matrix();
    return col2im(dcol, x.height(), x.width(), dy.height(), dy.width());
  }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  Mat<T> im2col(const Tensor<T>& x, int ho, int wo) const {
    Mat<T> col = Mat<T>::Zero(in_ * k_ * k_, ho * wo);
    for (int c = 0; c < in_; ++c)
      for (int ki = 0; ki < k_; ++ki)
        for (int kj = 0; kj < k_; ++kj) {
          T* row = col.row((c * k_ + ki) * k_ + kj).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ki;
            if (iy < 0 || iy >= x.height()) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kj;
              if (ix >= 0 && ix < x.width()) row[oy * wo + ox] = x.at(c, iy, ix);
            }
          }
        }
    return col;
  }

  Tensor<T> col2im(const Mat<T>& col, int h, int w, int ho, int wo) const {
    Tensor<T> dx(in_, h, w);
    for (int c = 0; c < in_; ++c)
      for (int ki = 0; ki < k_; ++ki)
        for (int kj = 0; kj < k_; ++kj) {
          const T* row = col.row((c * k_ + ki) * k_ + kj).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ki;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kj;
              if (ix >= 0 && ix < w) dx.at(c, iy, ix) += row[oy * wo + ox];
            }
          }
        }
    return dx;
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = true;
  std::size_t w_ = 0, b_ = 0;
};

/// Per-channel scale and shift (batch norm folded into an affine map).
template <typename T>
class ChannelAffine {
 public:
  ChannelAffine() = default;
  ChannelAffine(ParamStore<T>& store, const std::string& name, int channels, ParamGroup group) : c_(channels) {
    scale_ = store.add(name + ".scale", {channels}, group);
    shift_ = store.add(name + ".shift", {channels}, group);
  }
  void init(ParamStore<T>& store, T scale = T(1)) const {
    store[scale_].setConstant(scale);
    store[shift_].setZero();
  }
  Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x) const {
    Tensor<T> y = x;
    y.matrix() = (p[scale_].asDiagonal() * x.matrix()).colwise() + p[shift_];
    return y;
  }
  Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& x, const Tensor<T>& dy, ParamStore<T>& g) const {
    g[scale_] += dy.matrix().cwiseProduct(x.matrix()).rowwise().sum();
    g[shift_] += dy.matrix().rowwise().sum();
    Tensor<T> dx = dy;
    dx.matrix() = p[scale_].asDiagonal() * dy.matrix();
    return dx;
  }

 private:
  int c_ = 0;
  std::size_t scale_ = 0, shift_ = 0;
};

/// Fully connected layer y = W x + b.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int in, int out, ParamGroup group)
      : in_(in), out_(out) {
    w_ = store.add(name + ".weight", {out, in}, group);
    b_ = store.add(name + ".bias", {out}, group);
  }

  void init(ParamStore<T>& store, Rng& rng) const {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    init_uniform(store[w_], bound, rng);
    init_uniform(store[b_], bound, rng);
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  std::size_t weight_id() const { return w_; }
  std::size_t bias_id() const { return b_; }

  ConstMatMap<T> weight(const ParamStore<T>& p) const { return ConstMatMap<T>(p[w_].data(), out_, in_); }

  Vec<T> forward(const ParamStore<T>& p, const Vec<T>& x) const {
    check_shape(x.size() == in_, "linear expects " + std::to_string(in_) + " inputs, got " + std::to_string(x.size()));
    return weight(p) * x + p[b_];
  }

  Vec<T> backward(const ParamStore<T>& p, const Vec<T>& x, const Vec<T>& dy, ParamStore<T>& g) const {
    MatMap<T>(g[w_].data(), out_, in_).noalias() += dy * x.transpose();
    g[b_] += dy;
    return weight(p).transpose() * dy;
  }

 private:
  int in_ = 0, out_ = 0;
  std::size_t w_ = 0, b_ = 0;
};

/// 3x3 stride-2 max pooling with padding 1.
template <typename T>
struct MaxPool {
  int out_size(int n) const { return (n + 2 - 3) / 2 + 1; }

  Tensor<T> forward(const Tensor<T>& x, std::vector<int>* argmax) const {
    const int ho = out_size(x.height()), wo = out_size(x.width());
    Tensor<T> y(x.channels(), ho, wo);
    if (argmax) argmax->assign(y.size(), 0);
    for (int c = 0; c < x.channels(); ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          int best_i = 0;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
              if (x.at(c, iy, ix) > best) {
                best = x.at(c, iy, ix);
                best_i = (c * x.height() + iy) * x.width() + ix;
              }
            }
          y.at(c, oy, ox) = best;
          if (argmax) (*argmax)[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] = best_i;
        }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, const std::vector<int>& argmax) const {
    Tensor<T> dx(x.channels(), x.height(), x.width());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
    return dx;
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Adam with L2 weight decay folded into the gradient and per-group learning rates.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& params, const ParamStore<T>& grads, const std::function<double(ParamGroup)>& lr) {
    if (m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.push_back(Vec<T>::Zero(params[i].size()));
        v_.push_back(Vec<T>::Zero(params[i].size()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params.spec(i).trainable) continue;
      const T rate = static_cast<T>(lr(params.spec(i).group));
      if (rate == T(0)) continue;
      const Vec<T> g = grads[i] + static_cast<T>(cfg_.weight_decay) * params[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseAbs2();
      const T step = rate / static_cast<T>(bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      params[i].array() -=
          step * m_[i].array() / (v_[i].array().sqrt() * denom_scale + static_cast<T>(cfg_.eps));
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Vec<T>> m_, v_;
  long t_ = 0;
};

}  // namespace scone

#endif  // SCONE_NN_HPP_
