#ifndef SCONE_MODEL_HPP_
#define SCONE_MODEL_HPP_

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "scone/backbone.hpp"
#include "scone/config.hpp"
#include "scone/embedding.hpp"
#include "scone/nn.hpp"
#include "scone/preprocess.hpp"
#include "scone/tensor.hpp"

namespace scone {

enum class ModelMode { StrongBaseline, ResNetBaseline };

inline std::string_view to_string(ModelMode m) {
  return m == ModelMode::StrongBaseline ? "strong_baseline" : "resnet_baseline";
}

inline ModelMode parse_model_mode(const std::string& s) {
  if (s == "strong_baseline") return ModelMode::StrongBaseline;
  if (s == "resnet_baseline") return ModelMode::ResNetBaseline;
  throw InvalidConfig("unknown model mode " + s);
}

struct ModelConfig {
  BackboneConfig backbone;
  ModelMode mode = ModelMode::StrongBaseline;
  int num_classes = 620;
  int input_size = 224;
  int embed_dim = 100;
  int gate_hidden = 256;
  int heads = 3;         // attention maps
  int proj_dim = 128;    // per-head projection width
  int head_hidden = 0;   // 1x1 conv bottleneck of the localizer/attention heads; 0 means D/4

  int high_channels() const {
    return backbone.kind == BackboneKind::Toy ? backbone.toy_channels[3] : 2048;
  }
  int resolved_head_hidden() const { return head_hidden > 0 ? head_hidden : std::max(1, high_channels() / 4); }

  static ModelConfig from_config(const KeyValueConfig& kv);
  static ModelConfig from_config(const KeyValueConfig& kv, ModelConfig c) {
    const std::string bb = kv.get("backbone", std::string(c.backbone.kind == BackboneKind::Toy ? "toy" : "resnet50"));
    if (bb == "toy") c.backbone.kind = BackboneKind::Toy;
    else if (bb == "resnet50") c.backbone.kind = BackboneKind::ResNet50;
    else throw InvalidConfig("unknown backbone " + bb);
    const auto ch = kv.get_list("toy_channels", {});
    if (!ch.empty()) {
      if (ch.size() != 4) throw InvalidConfig("toy_channels needs 4 values");
      for (int i = 0; i < 4; ++i) c.backbone.toy_channels[i] = std::stoi(ch[i]);
    }
    const auto st = kv.get_list("toy_strides", {});
    if (!st.empty()) {
      if (st.size() != 4) throw InvalidConfig("toy_strides needs 4 values");
      for (int i = 0; i < 4; ++i) c.backbone.toy_strides[i] = std::stoi(st[i]);
    }
    c.mode = parse_model_mode(kv.get("model_mode", std::string(to_string(c.mode))));
    c.input_size = kv.get("input_size", c.input_size);
    c.embed_dim = kv.get("embed_dim", c.embed_dim);
    c.gate_hidden = kv.get("gate_hidden", c.gate_hidden);
    c.heads = kv.get("attention_maps", c.heads);
    c.proj_dim = kv.get("proj_dim", c.proj_dim);
    c.head_hidden = kv.get("head_hidden", c.head_hidden);
    return c;
  }
};

/// Object-conditioned channel gate: sigmoid(W2 ReLU(W1 phi + b1) + b2).
template <typename T>
class ObjectGate {
 public:
  struct Cache {
    Vec<T> phi, hidden, gate;
  };

  ObjectGate() = default;
  ObjectGate(ParamStore<T>& s, int embed_dim, int hidden, int channels)
      : fc1_(s, "gate.fc1", embed_dim, hidden, ParamGroup::Head), fc2_(s, "gate.fc2", hidden, channels, ParamGroup::Head) {}

  void init(ParamStore<T>& s, Rng& rng) const {
    fc1_.init(s, rng);
    fc2_.init(s, rng);
  }

  Vec<T> gate(const ParamStore<T>& p, const Vec<T>& phi, Cache* cache = nullptr) const {
    check_shape(phi.size() == fc1_.in_features(), "object embedding has wrong dimension");
    Vec<T> h = fc1_.forward(p, phi).cwiseMax(T(0));
    Vec<T> pre = fc2_.forward(p, h);
    Vec<T> g = pre.unaryExpr([](T v) { return sigmoid(v); });
    if (cache) *cache = {phi, h, g};
    return g;
  }

  /// Backpropagates dL/dgate into the MLP; the embedding itself stays frozen.
  void backward(const ParamStore<T>& p, const Cache& c, const Vec<T>& dgate, ParamStore<T>& g) const {
    const Vec<T> dpre = dgate.cwiseProduct(c.gate.cwiseProduct(Vec<T>::Ones(c.gate.size()) - c.gate));
    Vec<T> dh = fc2_.backward(p, c.hidden, dpre, g);
    for (Eigen::Index i = 0; i < dh.size(); ++i)
      if (!(c.hidden[i] > T(0))) dh[i] = T(0);
    fc1_.backward(p, c.phi, dh, g);
  }

 private:
  Linear<T> fc1_, fc2_;
};

/// X = F (.) gate, the gate broadcast over all spatial positions.
template <typename T>
Tensor<T> compose(const Tensor<T>& high, const Vec<T>& gate) {
  check_shape(gate.size() == high.channels(), "gate length " + std::to_string(gate.size()) + " vs feature channels " +
                                                  std::to_string(high.channels()));
  Tensor<T> x = high;
  x.matrix() = gate.asDiagonal() * high.matrix();
  return x;
}

/// Two stacked 1x1 convolutions D -> hidden -> 1 producing a spatial logit map.
template <typename T>
class PointwiseHead {
 public:
  struct Cache {
    Tensor<T> hidden;
  };

  PointwiseHead() = default;
  PointwiseHead(ParamStore<T>& s, const std::string& name, int channels, int hidden)
      : conv1_(s, name + ".conv1", channels, hidden, 1, 1, 0, ParamGroup::Head),
        conv2_(s, name + ".conv2", hidden, 1, 1, 1, 0, ParamGroup::Head) {}

  void init(ParamStore<T>& s, Rng& rng) const {
    conv1_.init(s, rng);
    conv2_.init(s, rng);
  }

  Tensor<T> forward(const ParamStore<T>& p, const Tensor<T>& x, Cache* cache) const {
    Tensor<T> h = conv1_.forward(p, x);
    relu_inplace(h);
    Tensor<T> out = conv2_.forward(p, h);
    if (cache) cache->hidden = std::move(h);
    return out;
  }

  Tensor<T> backward(const ParamStore<T>& p, const Tensor<T>& x, const Cache& c, const Tensor<T>& dlogits,
                     ParamStore<T>& g) const {
    Tensor<T> dh = conv2_.backward(p, c.hidden, dlogits, g);
    relu_backward_inplace(c.hidden, dh);
    return conv1_.backward(p, x, dh, g);
  }

 private:
  Conv2d<T> conv1_, conv2_;
};

/// Relevant-object localizer: G = softmax(f_rel(X)), Z_rel = sum G X.
template <typename T>
class Localizer {
 public:
  struct Cache {
    typename PointwiseHead<T>::Cache head;
    Tensor<T> logits, G;
  };

  Localizer() = default;
  Localizer(ParamStore<T>& s, int channels, int hidden) : head_(s, "localizer", channels, hidden) {}
  void init(ParamStore<T>& s, Rng& rng) const { head_.init(s, rng); }

  std::pair<AttentionMap<T>, Vec<T>> forward(const ParamStore<T>& p, const Tensor<T>& x, Cache* cache) const {
    typename PointwiseHead<T>::Cache hc;
    Tensor<T> logits = head_.forward(p, x, &hc);
    AttentionMap<T> G = spatial_softmax(logits);
    Vec<T> z = attention_pool(G, x);
    if (cache) *cache = {std::move(hc), std::move(logits), G};
    return {std::move(G), std::move(z)};
  }

  /// dG collects every gradient reaching G (pooling, low-level pooling, mask loss).
  void backward(const ParamStore<T>& p, const Tensor<T>& x, const Cache& c, const Vec<T>& dz, Tensor<T> dG,
                Tensor<T>& dx, ParamStore<T>& g) const {
    dG += attention_pool_backward(c.G, x, dz, &dx);
    const Tensor<T> dlogits = spatial_softmax_backward(c.G, dG);
    dx += head_.backward(p, x, c.head, dlogits, g);
  }

 private:
  PointwiseHead<T> head_;
};

template <typename T>
struct MultiAttentionOutput {
  std::vector<Tensor<T>> E, A;
  Vec<T> Z_att;
};

/// M free-form attention heads; each pooled vector is projected to proj_dim and concatenated.
template <typename T>
class MultiAttention {
 public:
  struct Cache {
    std::vector<typename PointwiseHead<T>::Cache> heads;
    std::vector<Tensor<T>> A;
    std::vector<Vec<T>> pooled;
  };

  MultiAttention() = default;
  MultiAttention(ParamStore<T>& s, int maps, int channels, int hidden, int proj_dim) : proj_dim_(proj_dim) {
    if (maps < 1) throw InvalidConfig("need at least one attention map");
    for (int m = 0; m < maps; ++m) {
      heads_.emplace_back(s, "attention" + std::to_string(m), channels, hidden);
      proj_.emplace_back(s, "attention" + std::to_string(m) + ".proj", channels, proj_dim, ParamGroup::Head);
    }
  }

  int maps() const { return static_cast<int>(heads_.size()); }
  int output_size() const { return maps() * proj_dim_; }

  void init(ParamStore<T>& s, Rng& rng) const {
    for (const auto& h : heads_) h.init(s, rng);
    for (const auto& l : proj_) l.init(s, rng);
  }

  MultiAttentionOutput<T> forward(const ParamStore<T>& p, const Tensor<T>& x, Cache* cache) const {
    MultiAttentionOutput<T> out;
    out.Z_att = Vec<T>(output_size());
    if (cache) *cache = {};
    for (int m = 0; m < maps(); ++m) {
      typename PointwiseHead<T>::Cache hc;
      Tensor<T> e = heads_[m].forward(p, x, &hc);
      Tensor<T> a = spatial_softmax(e);
      Vec<T> r = attention_pool(a, x);
      out.Z_att.segment(m * proj_dim_, proj_dim_) = proj_[m].forward(p, r);
      if (cache) {
        cache->heads.push_back(std::move(hc));
        cache->A.push_back(a);
        cache->pooled.push_back(std::move(r));
      }
      out.E.push_back(std::move(e));
      out.A.push_back(std::move(a));
    }
    return out;
  }

  /// dE may be empty (no divergence loss) or hold one map per head.
  void backward(const ParamStore<T>& p, const Tensor<T>& x, const Cache& c, const Vec<T>& dz,
                const std::vector<Tensor<T>>& dE, Tensor<T>& dx, ParamStore<T>& g) const {
    for (int m = 0; m < maps(); ++m) {
      const Vec<T> dr = proj_[m].backward(p, c.pooled[m], dz.segment(m * proj_dim_, proj_dim_), g);
      const Tensor<T> dA = attention_pool_backward(c.A[m], x, dr, &dx);
      Tensor<T> de = spatial_softmax_backward(c.A[m], dA);
      if (!dE.empty()) de += dE[m];
      dx += heads_[m].backward(p, x, c.heads[m], de, g);
    }
  }

 private:
  int proj_dim_ = 0;
  std::vector<PointwiseHead<T>> heads_;
  std::vector<Linear<T>> proj_;
};

template <typename T>
struct LowPoolCache {
  std::vector<Tensor<T>> weights;  // resized, renormalized G per stage
  std::vector<T> mass;             // sum of the resized map before renormalization
};

/// Resizes G to every low-level map (bilinear), renormalizes to sum 1 and attention-pools.
template <typename T>
Vec<T> pool_low_level(const std::vector<Tensor<T>>& low, const AttentionMap<T>& G, LowPoolCache<T>* cache = nullptr) {
  Eigen::Index total = 0;
  for (const auto& l : low) total += l.channels();
  Vec<T> z(total);
  Eigen::Index offset = 0;
  if (cache) *cache = {};
  for (const auto& l : low) {
    const BilinearResize resize(G.height(), G.width(), l.height(), l.width());
    Tensor<T> w = resize.apply(G);
    const T mass = w.sum();
    for (auto& v : w.values()) v /= mass;
    z.segment(offset, l.channels()) = attention_pool(w, l);
    offset += l.channels();
    if (cache) {
      cache->weights.push_back(std::move(w));
      cache->mass.push_back(mass);
    }
  }
  return z;
}

/// Accumulates into dlow (per stage) and returns dL/dG.
template <typename T>
Tensor<T> pool_low_level_backward(const std::vector<Tensor<T>>& low, const AttentionMap<T>& G,
                                  const LowPoolCache<T>& cache, const Vec<T>& dz, std::vector<Tensor<T>>& dlow) {
  Tensor<T> dG(1, G.height(), G.width());
  Eigen::Index offset = 0;
  for (std::size_t s = 0; s < low.size(); ++s) {
    const auto& l = low[s];
    const auto& w = cache.weights[s];
    if (dlow[s].empty()) dlow[s] = Tensor<T>(l.channels(), l.height(), l.width());
    Tensor<T> dw = attention_pool_backward(w, l, Vec<T>(dz.segment(offset, l.channels())), &dlow[s]);
    offset += l.channels();
    T dot = T(0);
    for (std::size_t i = 0; i < w.size(); ++i) dot += dw[i] * w[i];
    for (std::size_t i = 0; i < w.size(); ++i) dw[i] = (dw[i] - dot) / cache.mass[s];
    const BilinearResize resize(G.height(), G.width(), l.height(), l.width());
    dG += resize.adjoint(dw);
  }
  return dG;
}

template <typename T>
struct ModelOutput {
  std::optional<AttentionMap<T>> G;
  std::vector<Tensor<T>> E_maps;
  std::vector<AttentionMap<T>> A_maps;
  Vec<T> Z_low, Z_rel, Z_att;
  Vec<T> logits;
  Vec<T> scores;
  Vec<T> x_pooled;
};

template <typename T>
struct ForwardCache {
  BackboneCache<T> backbone;
  BackboneOutput<T> features;
  typename ObjectGate<T>::Cache gate;
  Tensor<T> X;
  typename Localizer<T>::Cache localizer;
  typename MultiAttention<T>::Cache attention;
  LowPoolCache<T> low;
  Vec<T> classifier_input;
};

/// Upstream gradients for one instance. Empty members mean "no gradient".
template <typename T>
struct OutputGrads {
  Vec<T> d_logits;
  Tensor<T> d_G;
  std::vector<Tensor<T>> d_E;
  Vec<T> d_x_pooled;
};

/**
 * @brief Attribute classifier: backbone -> object-conditioned gate ->
 * localizer + multi-attention + low-level pooling -> linear classifier.
 * In resnet_baseline mode the classifier reads the mean-pooled composed map.
 */
template <typename T>
class AttributeModel {
 public:
  AttributeModel(const ModelConfig& cfg, std::uint64_t seed, std::shared_ptr<const WordEmbeddings> words = nullptr)
      : cfg_(cfg), words_(words ? std::move(words) : std::make_shared<WordEmbeddings>(cfg.embed_dim)) {
    if (words_->dim() != cfg.embed_dim) throw InvalidConfig("word vector dimension differs from embed_dim");
    if (cfg.heads < 1) throw InvalidConfig("attention_maps must be >= 1");
    backbone_ = std::make_unique<Backbone<T>>(params_, cfg.backbone);
    const int D = backbone_->high_channels();
    gate_ = ObjectGate<T>(params_, cfg.embed_dim, cfg.gate_hidden, D);
    int feature_len = D;
    if (cfg.mode == ModelMode::StrongBaseline) {
      localizer_ = Localizer<T>(params_, D, cfg.resolved_head_hidden());
      attention_ = MultiAttention<T>(params_, cfg.heads, D, cfg.resolved_head_hidden(), cfg.proj_dim);
      const auto& lc = backbone_->low_channels();
      feature_len = lc[0] + lc[1] + D + attention_.output_size();
    }
    classifier_ = Linear<T>(params_, "classifier", feature_len, cfg.num_classes, ParamGroup::Head);
    Rng rng(seed);
    backbone_->init(params_, rng);
    gate_.init(params_, rng);
    if (cfg.mode == ModelMode::StrongBaseline) {
      localizer_.init(params_, rng);
      attention_.init(params_, rng);
    }
    classifier_.init(params_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  const ObjectGate<T>& gate() const { return gate_; }
  const Localizer<T>& localizer() const { return localizer_; }
  const MultiAttention<T>& attention() const { return attention_; }
  const Linear<T>& classifier() const { return classifier_; }
  const WordEmbeddings& words() const { return *words_; }
  int feature_channels() const { return backbone_->high_channels(); }

  Vec<T> embed(const std::string& phrase) const {
    const auto v = words_->phrase(phrase);
    Vec<T> out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = static_cast<T>(v[i]);
    return out;
  }

  /// Backbone + composition only (what contrastive pretraining needs).
  Tensor<T> composed_features(const ParamStore<T>& p, const ModelInput& in, ForwardCache<T>* cache) const {
    check_shape(in.image.height() == cfg_.input_size && in.image.width() == cfg_.input_size,
                "input image " + in.image.shape_string() + " does not match input_size " +
                    std::to_string(cfg_.input_size));
    BackboneCache<T>* bc = cache ? &cache->backbone : nullptr;
    BackboneOutput<T> feats = backbone_->forward(p, in.image.template cast<T>(), bc);
    typename ObjectGate<T>::Cache gc;
    const Vec<T> g = gate_.gate(p, embed(in.object_phrase), &gc);
    Tensor<T> X = compose(feats.high, g);
    if (cache) {
      cache->features = std::move(feats);
      cache->gate = std::move(gc);
      cache->X = X;
    }
    return X;
  }

  ModelOutput<T> forward(const ModelInput& in, ForwardCache<T>* cache = nullptr) const {
    return forward(params_, in, cache);
  }

  ModelOutput<T> forward(const ParamStore<T>& p, const ModelInput& in, ForwardCache<T>* cache = nullptr) const {
    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const Tensor<T> X = composed_features(p, in, &c);
    ModelOutput<T> out;
    out.x_pooled = spatial_mean(X);
    if (cfg_.mode == ModelMode::StrongBaseline) {
      auto [G, z_rel] = localizer_.forward(p, X, &c.localizer);
      auto att = attention_.forward(p, X, &c.attention);
      out.Z_low = pool_low_level(c.features.low, G, &c.low);
      out.Z_rel = std::move(z_rel);
      out.Z_att = std::move(att.Z_att);
      out.E_maps = std::move(att.E);
      out.A_maps = std::move(att.A);
      out.G = std::move(G);
      c.classifier_input.resize(out.Z_low.size() + out.Z_rel.size() + out.Z_att.size());
      c.classifier_input << out.Z_low, out.Z_rel, out.Z_att;
    } else {
      c.classifier_input = out.x_pooled;
    }
    out.logits = classifier_.forward(p, c.classifier_input);
    out.scores = out.logits.unaryExpr([](T v) { return sigmoid(v); });
    return out;
  }

  void backward(const ParamStore<T>& p, const ForwardCache<T>& c, const OutputGrads<T>& up, ParamStore<T>& g) const {
    const Tensor<T>& X = c.X;
    Tensor<T> dX(X.channels(), X.height(), X.width());
    std::vector<Tensor<T>> dlow(c.features.low.size());
    Vec<T> dfeat = Vec<T>::Zero(c.classifier_input.size());
    if (up.d_logits.size() > 0) dfeat = classifier_.backward(p, c.classifier_input, up.d_logits, g);

    Vec<T> dmean = Vec<T>::Zero(X.channels());
    if (up.d_x_pooled.size() > 0) dmean += up.d_x_pooled;
    if (cfg_.mode == ModelMode::StrongBaseline) {
      const auto& lc = backbone_->low_channels();
      const Eigen::Index n_low = lc[0] + lc[1], n_rel = X.channels();
      const AttentionMap<T>& G = c.localizer.G;
      Tensor<T> dG = pool_low_level_backward(c.features.low, G, c.low, Vec<T>(dfeat.head(n_low)), dlow);
      if (!up.d_G.empty()) dG += up.d_G;
      attention_.backward(p, X, c.attention, Vec<T>(dfeat.tail(attention_.output_size())), up.d_E, dX, g);
      localizer_.backward(p, X, c.localizer, Vec<T>(dfeat.segment(n_low, n_rel)), std::move(dG), dX, g);
    } else {
      dmean += dfeat;
    }
    if (dmean.size() > 0) dX.matrix().colwise() += dmean / static_cast<T>(X.spatial());
    backward_composed(p, c, dX, std::move(dlow), g);
  }

  /// Backpropagates dL/dX (and optional low-level stage gradients) through gate and backbone.
  void backward_composed(const ParamStore<T>& p, const ForwardCache<T>& c, const Tensor<T>& dX,
                         std::vector<Tensor<T>> dlow, ParamStore<T>& g) const {
    if (dlow.empty()) dlow.resize(c.features.low.size());
    // X = F (.) gate
    const Vec<T>& gate = c.gate.gate;
    const Tensor<T>& F = c.features.high;
    Tensor<T> dF = dX;
    dF.matrix() = gate.asDiagonal() * dX.matrix();
    const Vec<T> dgate = dX.matrix().cwiseProduct(F.matrix()).rowwise().sum();
    gate_.backward(p, c.gate, dgate, g);
    backbone_->backward(p, c.backbone, dlow, dF, g);
  }

 private:
  ModelConfig cfg_;
  std::shared_ptr<const WordEmbeddings> words_;
  ParamStore<T> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  ObjectGate<T> gate_;
  Localizer<T> localizer_;
  MultiAttention<T> attention_;
  Linear<T> classifier_;
};

inline ModelConfig ModelConfig::from_config(const KeyValueConfig& kv) { return from_config(kv, ModelConfig{}); }

}  // namespace scone

#endif  // SCONE_MODEL_HPP_
