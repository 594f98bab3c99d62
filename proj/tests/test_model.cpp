#include <gtest/gtest.h>

#include <cmath>

#include "scone/model.hpp"
#include "support.hpp"

using namespace scone;

namespace {

ModelConfig tiny_config(int classes = 5) {
  ModelConfig cfg;
  cfg.backbone.toy_channels = {3, 4, 5, 6};
  cfg.backbone.toy_strides = {2, 1, 2, 1};
  cfg.num_classes = classes;
  cfg.input_size = 8;
  cfg.embed_dim = 4;
  cfg.gate_hidden = 3;
  cfg.heads = 2;
  cfg.proj_dim = 3;
  cfg.head_hidden = 2;
  return cfg;
}

ModelInput random_input(Rng& rng, int size, const std::string& phrase = "red chair") {
  ModelInput in;
  in.image = Tensor<float>(3, size, size);
  for (auto& v : in.image.values()) v = static_cast<float>(rng.normal());
  in.object_phrase = phrase;
  return in;
}

void zero_params(ParamStore<double>& p, const std::string& prefix) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.spec(i).name.rfind(prefix, 0) == 0) p[i].setZero();
}

}  // namespace

TEST(Model, OutputShapes) {
  Rng rng(1);
  auto cfg = tiny_config();
  AttributeModel<double> m(cfg, 7);
  const auto out = m.forward(random_input(rng, 8));
  EXPECT_EQ(out.scores.size(), 5);
  EXPECT_EQ(out.Z_att.size(), cfg.heads * cfg.proj_dim);
  EXPECT_EQ(out.Z_rel.size(), 6);
  EXPECT_EQ(out.Z_low.size(), 4 + 5);
  EXPECT_EQ(out.E_maps.size(), 2u);
  ASSERT_TRUE(out.G.has_value());
  EXPECT_NEAR(out.G->sum(), 1.0, 1e-5);
  for (const auto& A : out.A_maps) {
    EXPECT_NEAR(A.sum(), 1.0, 1e-5);
    for (double v : A.values()) EXPECT_GE(v, 0.0);
  }
  for (double s : out.scores) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }

  cfg.heads = 1;
  EXPECT_EQ(AttributeModel<double>(cfg, 7).forward(random_input(rng, 8)).Z_att.size(), cfg.proj_dim);
  cfg.heads = 0;
  EXPECT_THROW(AttributeModel<double>(cfg, 7), InvalidConfig);
}

TEST(Model, DefaultHeadSizes) {
  ModelConfig cfg;
  cfg.backbone.kind = BackboneKind::ResNet50;
  EXPECT_EQ(cfg.high_channels(), 2048);
  EXPECT_EQ(cfg.heads * cfg.proj_dim, 384);
  EXPECT_EQ(cfg.num_classes, 620);
}

TEST(Model, DeterministicForward) {
  Rng rng(2);
  AttributeModel<float> m(tiny_config(), 3);
  const auto in = random_input(rng, 8);
  const auto a = m.forward(in), b = m.forward(in);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.G->values(), b.G->values());
}

TEST(Model, ZeroImageFinite) {
  AttributeModel<float> m(tiny_config(), 3);
  ModelInput in;
  in.image = Tensor<float>(3, 8, 8);
  in.object_phrase = "table";
  const auto out = m.forward(in);
  EXPECT_TRUE(out.scores.allFinite());
  EXPECT_TRUE(out.G->all_finite());
}

TEST(Model, WrongInputSizeThrows) {
  Rng rng(3);
  AttributeModel<float> m(tiny_config(), 3);
  EXPECT_THROW(m.forward(random_input(rng, 16)), ShapeError);
}

TEST(Gate, ZeroParametersHalveFeatures) {
  Rng rng(4);
  AttributeModel<double> m(tiny_config(), 5);
  zero_params(m.params(), "gate.");
  const auto in = random_input(rng, 8);
  const Vec<double> g = m.gate().gate(m.params(), m.embed(in.object_phrase));
  for (double v : g) EXPECT_DOUBLE_EQ(v, 0.5);
  ForwardCache<double> cache;
  const auto X = m.composed_features(m.params(), in, &cache);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_DOUBLE_EQ(X[i], 0.5 * cache.features.high[i]);
}

TEST(Gate, IdentityAndDamping) {
  Rng rng(5);
  Tensor<double> F(4, 3, 3);
  for (auto& v : F.values()) v = rng.normal();
  EXPECT_EQ(compose(F, Vec<double>(Vec<double>::Ones(4))).values(), F.values());
  Vec<double> g(4);
  for (int k = 0; k < 4; ++k) g[k] = sigmoid(rng.normal());
  const auto X = compose(F, g);
  for (std::size_t i = 0; i < X.size(); ++i) EXPECT_LE(std::abs(X[i]), std::abs(F[i]));
  EXPECT_THROW(compose(F, Vec<double>(Vec<double>::Ones(3))), ShapeError);
}

TEST(Localizer, UniformLogitsGiveUniformMapAndMeanPooling) {
  Rng rng(6);
  AttributeModel<double> m(tiny_config(), 8);
  zero_params(m.params(), "localizer.");
  ForwardCache<double> cache;
  const auto out = m.forward(m.params(), random_input(rng, 8), &cache);
  const double cells = out.G->size();
  for (double v : out.G->values()) EXPECT_NEAR(v, 1.0 / cells, 1e-12);
  Vec<double> expected(out.Z_low.size());
  expected << spatial_mean(cache.features.low[0]), spatial_mean(cache.features.low[1]);
  EXPECT_LT((out.Z_low - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((out.Z_rel - spatial_mean(cache.X)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Localizer, PeakedMapSelectsCell) {
  Tensor<double> logits(1, 3, 3), X(2, 3, 3);
  Rng rng(7);
  for (auto& v : X.values()) v = rng.normal();
  logits.at(0, 1, 2) = 60.0;
  const auto G = spatial_softmax(logits);
  const Vec<double> z = attention_pool(G, X);
  EXPECT_NEAR(z[0], X.at(0, 1, 2), 1e-9);
  EXPECT_NEAR(z[1], X.at(1, 1, 2), 1e-9);
}

TEST(LowPool, ResizedWeightsRenormalized) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> logits(1, 3, 3);
    for (auto& v : logits.values()) v = rng.normal() * 2;
    const auto G = spatial_softmax(logits);
    std::vector<Tensor<double>> low{Tensor<double>(2, 7, 7, 1.0), Tensor<double>(3, 3, 3, 1.0)};
    for (auto& l : low)
      for (auto& v : l.values()) v = rng.normal();
    LowPoolCache<double> cache;
    const auto z = pool_low_level(low, G, &cache);
    for (const auto& w : cache.weights) EXPECT_NEAR(w.sum(), 1.0, 1e-5);
    // same resolution: plain attention pooling
    const Vec<double> direct = attention_pool(G, low[1]);
    EXPECT_LT((z.tail(3) - direct).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Classifier, ZeroWeightsGiveHalf) {
  Rng rng(9);
  AttributeModel<double> m(tiny_config(), 10);
  zero_params(m.params(), "classifier");
  for (double s : m.forward(random_input(rng, 8)).scores) EXPECT_DOUBLE_EQ(s, 0.5);
}

TEST(Model, ResnetBaselineHasNoAttention) {
  Rng rng(10);
  auto cfg = tiny_config();
  cfg.mode = ModelMode::ResNetBaseline;
  AttributeModel<double> m(cfg, 11);
  const auto out = m.forward(random_input(rng, 8));
  EXPECT_FALSE(out.G.has_value());
  EXPECT_TRUE(out.A_maps.empty());
  EXPECT_EQ(out.scores.size(), 5);
  EXPECT_EQ(out.x_pooled.size(), 6);
}

TEST(Model, ObjectPhraseChangesScores) {
  Rng rng(11);
  AttributeModel<double> m(tiny_config(), 12);
  auto in = random_input(rng, 8, "banana");
  const auto a = m.forward(in).scores;
  in.object_phrase = "motorcycle";
  const auto b = m.forward(in).scores;
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 0.0);
}

// Full-network gradient check: a random linear functional of the logits, G,
// E maps and pooled features, differentiated against central differences.
TEST(Model, BackwardMatchesFiniteDifferences) {
  for (auto mode : {ModelMode::StrongBaseline, ModelMode::ResNetBaseline}) {
    Rng rng(12);
    auto cfg = tiny_config(3);
    cfg.mode = mode;
    AttributeModel<double> m(cfg, 13);
    const auto in = random_input(rng, 8);
    ForwardCache<double> cache;
    const auto out = m.forward(m.params(), in, &cache);

    OutputGrads<double> up;
    up.d_logits = Vec<double>(3);
    for (auto& v : up.d_logits) v = rng.normal();
    up.d_x_pooled = Vec<double>(out.x_pooled.size());
    for (auto& v : up.d_x_pooled) v = rng.normal();
    if (mode == ModelMode::StrongBaseline) {
      up.d_G = Tensor<double>(1, out.G->height(), out.G->width());
      for (auto& v : up.d_G.values()) v = rng.normal();
      for (const auto& e : out.E_maps) {
        up.d_E.emplace_back(e.channels(), e.height(), e.width());
        for (auto& v : up.d_E.back().values()) v = rng.normal();
      }
    }
    auto objective = [&](const ParamStore<double>& p) {
      const auto o = m.forward(p, in);
      double f = o.logits.dot(up.d_logits) + o.x_pooled.dot(up.d_x_pooled);
      if (o.G) {
        f += o.G->flat().dot(up.d_G.flat());
        for (std::size_t k = 0; k < o.E_maps.size(); ++k) f += o.E_maps[k].flat().dot(up.d_E[k].flat());
      }
      return f;
    };

    auto grads = m.params().zeros_like();
    m.backward(m.params(), cache, up, grads);

    std::vector<double> analytic, numeric;
    ParamStore<double> p = m.params();
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!p.spec(i).trainable) continue;
      for (Eigen::Index k = 0; k < p[i].size(); ++k) {
        const double keep = p[i][k];
        p[i][k] = keep + h;
        const double fp = objective(p);
        p[i][k] = keep - h;
        const double fm = objective(p);
        p[i][k] = keep;
        numeric.push_back((fp - fm) / (2 * h));
        analytic.push_back(grads[i][k]);
      }
    }
    EXPECT_LT(scone::testing::max_relative_error(analytic, numeric, 1e-3), 1e-3) << to_string(mode);
  }
}
