#ifndef SCONE_BACKBONE_HPP_
#define SCONE_BACKBONE_HPP_

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "scone/nn.hpp"
#include "scone/tensor.hpp"

namespace scone {

template <typename T>
struct BlockCache {
  std::vector<Tensor<T>> tensors;
  std::vector<int> indices;
};

template <typename T>
class Block {
 public:
  virtual ~Block() = default;
  virtual void init(ParamStore<T>& store, Rng& rng) const = 0;
  virtual Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x, BlockCache<T>* cache) const = 0;
  virtual Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& dy, const BlockCache<T>& cache,
                             ParamStore<T>& g, bool want_dx) const = 0;
};

/// conv -> [affine] -> ReLU
template <typename T>
class ConvBlock final : public Block<T> {
 public:
  ConvBlock(ParamStore<T>& s, const std::string& name, int in, int out, int k, int stride, int pad, bool affine)
      : conv_(s, name + ".conv", in, out, k, stride, pad, ParamGroup::Backbone, !affine), has_affine_(affine) {
    if (affine) affine_ = ChannelAffine<T>(s, name + ".bn", out, ParamGroup::Backbone);
  }
  void init(ParamStore<T>& s, Rng& rng) const override {
    conv_.init(s, rng);
    if (has_affine_) affine_.init(s);
  }
  Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x, BlockCache<T>* cache) const override {
    Tensor<T> c = conv_.forward(p, x);
    Tensor<T> y = has_affine_ ? affine_.forward(p, c) : c;
    relu_inplace(y);
    if (cache) cache->tensors = {x, std::move(c), y};
    return y;
  }
  Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& dy, const BlockCache<T>& cache, ParamStore<T>& g,
                     bool want_dx) const override {
    Tensor<T> d = dy;
    relu_backward_inplace(cache.tensors[2], d);
    if (has_affine_) d = affine_.backward(p, cache.tensors[1], d, g);
    return conv_.backward(p, cache.tensors[0], d, g, want_dx);
  }

 private:
  Conv2d<T> conv_;
  ChannelAffine<T> affine_;
  bool has_affine_;
};

template <typename T>
class MaxPoolBlock final : public Block<T> {
 public:
  void init(ParamStore<T>&, Rng&) const override {}
  Tensor<T> forward(const ParamStore<T>&, const Tensor<T>& x, BlockCache<T>* cache) const override {
    std::vector<int> idx;
    Tensor<T> y = pool_.forward(x, &idx);
    if (cache) {
      cache->tensors = {x};
      cache->indices = std::move(idx);
    }
    return y;
  }
  Tensor<T> backward(const ParamStore<T>&, const Tensor<T>& dy, const BlockCache<T>& cache, ParamStore<T>&,
                     bool) const override {
    return pool_.backward(cache.tensors[0], dy, cache.indices);
  }

 private:
  MaxPool<T> pool_;
};

/// ResNet bottleneck: 1x1 -> 3x3(stride) -> 1x1 with a projection shortcut when shapes change.
template <typename T>
class Bottleneck final : public Block<T> {
 public:
  Bottleneck(ParamStore<T>& s, const std::string& name, int in, int mid, int out, int stride)
      : conv1_(s, name + ".conv1", in, mid, 1, 1, 0, ParamGroup::Backbone, false),
        bn1_(s, name + ".bn1", mid, ParamGroup::Backbone),
        conv2_(s, name + ".conv2", mid, mid, 3, stride, 1, ParamGroup::Backbone, false),
        bn2_(s, name + ".bn2", mid, ParamGroup::Backbone),
        conv3_(s, name + ".conv3", mid, out, 1, 1, 0, ParamGroup::Backbone, false),
        bn3_(s, name + ".bn3", out, ParamGroup::Backbone),
        project_(in != out || stride != 1) {
    if (project_) {
      down_ = Conv2d<T>(s, name + ".downsample", in, out, 1, stride, 0, ParamGroup::Backbone, false);
      down_bn_ = ChannelAffine<T>(s, name + ".downsample_bn", out, ParamGroup::Backbone);
    }
  }
  void init(ParamStore<T>& s, Rng& rng) const override {
    conv1_.init(s, rng);
    conv2_.init(s, rng);
    conv3_.init(s, rng);
    bn1_.init(s);
    bn2_.init(s);
    bn3_.init(s, T(0.2));
    if (project_) {
      down_.init(s, rng);
      down_bn_.init(s);
    }
  }
  Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x, BlockCache<T>* cache) const override {
    Tensor<T> c1 = conv1_.forward(p, x);
    Tensor<T> r1 = bn1_.forward(p, c1);
    relu_inplace(r1);
    Tensor<T> c2 = conv2_.forward(p, r1);
    Tensor<T> r2 = bn2_.forward(p, c2);
    relu_inplace(r2);
    Tensor<T> c3 = conv3_.forward(p, r2);
    Tensor<T> out = bn3_.forward(p, c3);
    Tensor<T> cd;
    if (project_) {
      cd = down_.forward(p, x);
      out += down_bn_.forward(p, cd);
    } else {
      out += x;
    }
    relu_inplace(out);
    if (cache) cache->tensors = {x, std::move(c1), std::move(r1), std::move(c2), std::move(r2), std::move(c3),
                                 std::move(cd), out};
    return out;
  }
  Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& dy, const BlockCache<T>& cache, ParamStore<T>& g,
                     bool want_dx) const override {
    const auto& t = cache.tensors;
    Tensor<T> d = dy;
    relu_backward_inplace(t[7], d);
    Tensor<T> dx;
    if (project_) {
      dx = down_.backward(p, t[0], down_bn_.backward(p, t[6], d, g), g, want_dx);
    } else {
      dx = d;
    }
    Tensor<T> d3 = conv3_.backward(p, t[4], bn3_.backward(p, t[5], d, g), g);
    relu_backward_inplace(t[4], d3);
    Tensor<T> d2 = conv2_.backward(p, t[2], bn2_.backward(p, t[3], d3, g), g);
    relu_backward_inplace(t[2], d2);
    Tensor<T> d1 = conv1_.backward(p, t[0], bn1_.backward(p, t[1], d2, g), g, want_dx);
    if (want_dx) dx += d1;
    return dx;
  }

 private:
  Conv2d<T> conv1_;
  ChannelAffine<T> bn1_;
  Conv2d<T> conv2_;
  ChannelAffine<T> bn2_;
  Conv2d<T> conv3_;
  ChannelAffine<T> bn3_;
  bool project_;
  Conv2d<T> down_;
  ChannelAffine<T> down_bn_;
};

enum class BackboneKind { Toy, ResNet50 };

struct BackboneConfig {
  BackboneKind kind = BackboneKind::Toy;
  std::array<int, 4> toy_channels = {8, 16, 32, 32};
  std::array<int, 4> toy_strides = {2, 2, 2, 1};
};

template <typename T>
struct BackboneCache {
  std::vector<std::vector<BlockCache<T>>> blocks;  // per stage, per block
};

template <typename T>
struct BackboneOutput {
  std::vector<Tensor<T>> low;  // stage 2 and stage 3 outputs
  Tensor<T> high;              // final stage output
};

/**
 * @brief Four-stage CNN feature extractor. Stages 2 and 3 are the low-level
 * taps, stage 4 is the high-level map fed to the object-conditioned heads.
 */
template <typename T>
class Backbone {
 public:
  Backbone(ParamStore<T>& store, const BackboneConfig& cfg) : cfg_(cfg) {
    if (cfg.kind == BackboneKind::Toy) {
      int in = 3;
      for (int s = 0; s < 4; ++s) {
        std::vector<std::unique_ptr<Block<T>>> stage;
        stage.push_back(std::make_unique<ConvBlock<T>>(store, "backbone.stage" + std::to_string(s + 1), in,
                                                       cfg.toy_channels[s], 3, cfg.toy_strides[s], 1, false));
        in = cfg.toy_channels[s];
        stages_.push_back(std::move(stage));
      }
      low_channels_ = {cfg.toy_channels[1], cfg.toy_channels[2]};
      high_channels_ = cfg.toy_channels[3];
    } else {
      std::vector<std::unique_ptr<Block<T>>> stem;
      stem.push_back(std::make_unique<ConvBlock<T>>(store, "backbone.stem", 3, 64, 7, 2, 3, true));
      stem.push_back(std::make_unique<MaxPoolBlock<T>>());
      stem_ = std::move(stem);
      const int blocks[4] = {3, 4, 6, 3};
      const int mids[4] = {64, 128, 256, 512};
      int in = 64;
      for (int s = 0; s < 4; ++s) {
        std::vector<std::unique_ptr<Block<T>>> stage;
        for (int b = 0; b < blocks[s]; ++b) {
          const int stride = (b == 0 && s > 0) ? 2 : 1;
          stage.push_back(std::make_unique<Bottleneck<T>>(
              store, "backbone.layer" + std::to_string(s + 1) + "." + std::to_string(b), in, mids[s], mids[s] * 4,
              stride));
          in = mids[s] * 4;
        }
        stages_.push_back(std::move(stage));
      }
      low_channels_ = {512, 1024};
      high_channels_ = 2048;
    }
  }

  void init(ParamStore<T>& store, Rng& rng) const {
    for (const auto& b : stem_) b->init(store, rng);
    for (const auto& stage : stages_)
      for (const auto& b : stage) b->init(store, rng);
  }

  int high_channels() const { return high_channels_; }
  const std::array<int, 2>& low_channels() const { return low_channels_; }
  const BackboneConfig& config() const { return cfg_; }

  BackboneOutput<T> forward(const ParamStore<T>& p, const Tensor<T>& image, BackboneCache<T>* cache) const {
    check_shape(image.channels() == 3, "backbone expects a 3-channel image, got " + image.shape_string());
    if (cache) cache->blocks.assign(stages_.size() + 1, {});
    Tensor<T> x = image;
    auto run = [&](const auto& blocks, std::size_t slot) {
      for (const auto& b : blocks) {
        BlockCache<T>* bc = nullptr;
        if (cache) bc = &cache->blocks[slot].emplace_back();
        x = b->forward(p, x, bc);
      }
    };
    run(stem_, 0);
    BackboneOutput<T> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      run(stages_[s], s + 1);
      if (s == 1 || s == 2) out.low.push_back(x);
    }
    out.high = std::move(x);
    return out;
  }

  /// grad_low may be empty tensors for taps that received no gradient.
  void backward(const ParamStore<T>& p, const BackboneCache<T>& cache, const std::vector<Tensor<T>>& grad_low,
                const Tensor<T>& grad_high, ParamStore<T>& g) const {
    Tensor<T> d = grad_high;
    for (std::size_t s = stages_.size(); s-- > 0;) {
      if ((s == 1 || s == 2) && s - 1 < grad_low.size() && !grad_low[s - 1].empty()) d += grad_low[s - 1];
      const auto& blocks = stages_[s];
      for (std::size_t b = blocks.size(); b-- > 0;) {
        const bool first_layer = stem_.empty() && s == 0 && b == 0;
        d = blocks[b]->backward(p, d, cache.blocks[s + 1][b], g, !first_layer);
      }
    }
    for (std::size_t b = stem_.size(); b-- > 0;) d = stem_[b]->backward(p, d, cache.blocks[0][b], g, b != 0);
  }

 private:
  BackboneConfig cfg_;
  std::vector<std::unique_ptr<Block<T>>> stem_;
  std::vector<std::vector<std::unique_ptr<Block<T>>>> stages_;
  std::array<int, 2> low_channels_{};
  int high_channels_ = 0;
};

}  // namespace scone

#endif  // SCONE_BACKBONE_HPP_
