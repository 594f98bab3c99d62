#ifndef SCONE_TENSOR_HPP_
#define SCONE_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "scone/error.hpp"

namespace scone {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

// Heap storage aligned for the widest packet. Eigen peels reductions up to the
// first aligned element, so plain std::vector storage would make summation
// order (and the low bits) depend on the allocation address.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/**
 * @brief Dense channel-major feature map (channels x height x width).
 *
 * A single-channel tensor doubles as a spatial map (attention, logits, mask).
 * The channel planes are contiguous, so matrix() views the map as a
 * channels x (height*width) matrix with one column per spatial position.
 */
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : channels_(channels),
        height_(height),
        width_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    check_shape(channels >= 0 && height >= 0 && width >= 0,
                "negative tensor dimension");
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int spatial() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int c, int h, int w) {
    return data_[(static_cast<std::size_t>(c) * height_ + h) * width_ + w];
  }
  const T& at(int c, int h, int w) const {
    return data_[(static_cast<std::size_t>(c) * height_ + h) * width_ + w];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  AlignedVector<T>& values() { return data_; }
  const AlignedVector<T>& values() const { return data_; }

  MatMap<T> matrix() { return MatMap<T>(data_.data(), channels_, spatial()); }
  ConstMatMap<T> matrix() const {
    return ConstMatMap<T>(data_.data(), channels_, spatial());
  }
  Eigen::Map<Vec<T>> flat() {
    return Eigen::Map<Vec<T>>(data_.data(), static_cast<Eigen::Index>(size()));
  }
  Eigen::Map<const Vec<T>> flat() const {
    return Eigen::Map<const Vec<T>>(data_.data(),
                                    static_cast<Eigen::Index>(size()));
  }

  bool same_shape(const Tensor& o) const {
    return channels_ == o.channels_ && height_ == o.height_ &&
           width_ == o.width_;
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    check_shape(same_shape(o), "tensor += shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  T sum() const {
    T s = T(0);
    for (T v : data_) s += v;
    return s;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(channels_, height_, width_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<U>(data_[i]);
    return out;
  }

  std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" +
           std::to_string(width_);
  }

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  AlignedVector<T> data_;
};

/// Single-channel spatial map; entries of an attention map are >= 0 and sum to 1.
template <typename T>
using AttentionMap = Tensor<T>;

template <typename T>
Tensor<T> spatial_softmax(const Tensor<T>& logits) {
  check_shape(logits.channels() == 1, "spatial softmax expects 1 channel");
  Tensor<T> out(1, logits.height(), logits.width());
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
  T total = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= total;
  return out;
}

/// Gradient w.r.t. the logits given the softmax output and dL/d(softmax).
template <typename T>
Tensor<T> spatial_softmax_backward(const Tensor<T>& probs,
                                   const Tensor<T>& grad_probs) {
  check_shape(probs.same_shape(grad_probs), "softmax backward shape mismatch");
  T dot = T(0);
  for (std::size_t i = 0; i < probs.size(); ++i) dot += probs[i] * grad_probs[i];
  Tensor<T> out(1, probs.height(), probs.width());
  for (std::size_t i = 0; i < probs.size(); ++i)
    out[i] = probs[i] * (grad_probs[i] - dot);
  return out;
}

/// Z = sum_{h,w} weights_{h,w} X_{h,w}.
template <typename T>
Vec<T> attention_pool(const Tensor<T>& weights, const Tensor<T>& features) {
  check_shape(weights.channels() == 1 &&
                  weights.height() == features.height() &&
                  weights.width() == features.width(),
              "attention pool: map " + weights.shape_string() +
                  " vs features " + features.shape_string());
  return features.matrix() * weights.flat();
}

/// Accumulates dL/dX into grad_features and returns dL/dweights.
template <typename T>
Tensor<T> attention_pool_backward(const Tensor<T>& weights,
                                  const Tensor<T>& features,
                                  const Vec<T>& grad_pooled,
                                  Tensor<T>* grad_features) {
  if (grad_features != nullptr) {
    grad_features->matrix().noalias() +=
        grad_pooled * weights.flat().transpose();
  }
  Tensor<T> grad_weights(1, weights.height(), weights.width());
  grad_weights.flat().noalias() = features.matrix().transpose() * grad_pooled;
  return grad_weights;
}

template <typename T>
Vec<T> spatial_mean(const Tensor<T>& features) {
  return features.matrix().rowwise().mean();
}

/**
 * @brief Bilinear resampling expressed as a sparse linear operator so the
 * adjoint (for backpropagation) is exact. Half-pixel centers, edge clamped.
 */
class BilinearResize {
 public:
  BilinearResize(int in_h, int in_w, int out_h, int out_w)
      : in_h_(in_h), in_w_(in_w), out_h_(out_h), out_w_(out_w) {
    check_shape(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0,
                "bilinear resize with empty grid");
    taps_.reserve(static_cast<std::size_t>(out_h) * out_w * 4);
    for (int oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1, fy] = axis(oy, in_h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1, fx] = axis(ox, in_w, out_w);
        const int o = oy * out_w + ox;
        taps_.push_back({o, y0 * in_w + x0, (1 - fy) * (1 - fx)});
        taps_.push_back({o, y0 * in_w + x1, (1 - fy) * fx});
        taps_.push_back({o, y1 * in_w + x0, fy * (1 - fx)});
        taps_.push_back({o, y1 * in_w + x1, fy * fx});
      }
    }
  }

  template <typename T>
  Tensor<T> apply(const Tensor<T>& in) const {
    check_shape(in.channels() == 1 && in.height() == in_h_ && in.width() == in_w_,
                "bilinear resize input mismatch");
    Tensor<T> out(1, out_h_, out_w_);
    for (const Tap& t : taps_) out[t.out] += static_cast<T>(t.weight) * in[t.in];
    return out;
  }

  template <typename T>
  Tensor<T> adjoint(const Tensor<T>& grad_out) const {
    Tensor<T> grad_in(1, in_h_, in_w_);
    for (const Tap& t : taps_)
      grad_in[t.in] += static_cast<T>(t.weight) * grad_out[t.out];
    return grad_in;
  }

 private:
  struct Tap {
    int out;
    int in;
    double weight;
  };
  struct Axis {
    int lo, hi;
    double frac;
  };
  static Axis axis(int o, int in, int out) {
    double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    return {lo, hi, src - lo};
  }

  int in_h_, in_w_, out_h_, out_w_;
  std::vector<Tap> taps_;
};

/// Nearest-neighbour resampling of a single-channel map (pixel-center rule).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& in, int out_h, int out_w) {
  Tensor<T> out(1, out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(in.height() - 1,
                            static_cast<int>((y + 0.5) * in.height() / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(in.width() - 1,
                              static_cast<int>((x + 0.5) * in.width() / out_w));
      out.at(0, y, x) = in.at(0, sy, sx);
    }
  }
  return out;
}

}  // namespace scone

#endif  // SCONE_TENSOR_HPP_
