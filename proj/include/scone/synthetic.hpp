#ifndef SCONE_SYNTHETIC_HPP_
#define SCONE_SYNTHETIC_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "scone/config.hpp"
#include "scone/dataset.hpp"
#include "scone/geometry.hpp"
#include "scone/rng.hpp"

namespace scone {

struct ColorSpec {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

inline const std::vector<ColorSpec>& known_colors() {
  static const std::vector<ColorSpec> colors = {
      {"red", {220, 30, 30}},     {"green", {30, 170, 40}},   {"blue", {35, 60, 220}},
      {"yellow", {235, 220, 30}}, {"white", {250, 250, 250}}, {"purple", {140, 40, 170}},
      {"orange", {245, 130, 20}}, {"black", {15, 15, 15}},    {"cyan", {30, 210, 220}},
      {"pink", {245, 140, 190}},  {"brown", {120, 70, 25}},   {"gray", {128, 128, 128}},
  };
  return colors;
}

inline const std::vector<std::string>& known_shapes() {
  static const std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond", "hexagon", "cross"};
  return shapes;
}

struct AttributeMenu {
  std::vector<std::string> colors = {"red", "green", "blue", "yellow", "white", "purple", "orange", "black"};
  std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond"};
  bool sizes = true;     // large / small
  bool textures = true;  // plain / striped
};

struct SyntheticConfig {
  int n_instances = 5000;
  int image_size = 32;
  AttributeMenu menu;
  double label_dropout = 0.5;
  double negative_dropout = -1.0;  // hiding rate for negatives; < 0 means label_dropout
  double imbalance_exponent = 1.0;
  std::uint64_t seed = 0;
  double mask_fraction = 1.0;  // share of instances that ship a polygon mask

  static SyntheticConfig from_config(const KeyValueConfig& kv, const std::string& prefix = "") {
    SyntheticConfig c;
    c.n_instances = kv.get(prefix + "n_instances", c.n_instances);
    c.image_size = kv.get(prefix + "image_size", c.image_size);
    c.menu.colors = kv.get_list(prefix + "colors", c.menu.colors);
    c.menu.shapes = kv.get_list(prefix + "shapes", c.menu.shapes);
    c.menu.sizes = kv.get(prefix + "sizes", c.menu.sizes);
    c.menu.textures = kv.get(prefix + "textures", c.menu.textures);
    c.label_dropout = kv.get(prefix + "label_dropout", c.label_dropout);
    c.negative_dropout = kv.get(prefix + "negative_dropout", c.negative_dropout);
    c.imbalance_exponent = kv.get(prefix + "imbalance_exponent", c.imbalance_exponent);
    c.seed = static_cast<std::uint64_t>(kv.get(prefix + "seed", static_cast<long long>(c.seed)));
    c.mask_fraction = kv.get(prefix + "mask_fraction", c.mask_fraction);
    return c;
  }
};

struct SyntheticData {
  DatasetSplit split;
  std::shared_ptr<const AttributeVocabulary> vocab;
  std::vector<LabelVector> ground_truth;  // labels before hiding
};

namespace detail {

inline Polygon shape_polygon(const std::string& shape, double cx, double cy, double r) {
  Polygon p;
  auto ngon = [&](int n, double phase) {
    for (int k = 0; k < n; ++k) {
      const double a = phase + 2.0 * M_PI * k / n;
      p.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
  };
  if (shape == "circle") {
    ngon(24, 0.0);
  } else if (shape == "square") {
    const double h = r * 0.85;
    p = {{cx - h, cy - h}, {cx + h, cy - h}, {cx + h, cy + h}, {cx - h, cy + h}};
  } else if (shape == "triangle") {
    ngon(3, -M_PI / 2);
  } else if (shape == "diamond") {
    ngon(4, -M_PI / 2);
  } else if (shape == "hexagon") {
    ngon(6, 0.0);
  } else {  // cross
    const double a = r, b = r * 0.35;
    p = {{cx - b, cy - a}, {cx + b, cy - a}, {cx + b, cy - b}, {cx + a, cy - b}, {cx + a, cy + b}, {cx + b, cy + b},
         {cx + b, cy + a}, {cx - b, cy + a}, {cx - b, cy + b}, {cx - a, cy + b}, {cx - a, cy - b}, {cx - b, cy - b}};
  }
  return p;
}

inline std::size_t skewed_choice(Rng& rng, std::size_t n, double exponent) {
  double total = 0;
  for (std::size_t k = 0; k < n; ++k) total += std::pow(static_cast<double>(k + 1), -exponent);
  double u = rng.uniform() * total;
  for (std::size_t k = 0; k < n; ++k) {
    u -= std::pow(static_cast<double>(k + 1), -exponent);
    if (u < 0) return k;
  }
  return n - 1;
}

inline std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace detail

inline AttributeVocabulary synthetic_vocabulary(const AttributeMenu& menu) {
  AttributeVocabulary v;
  for (const auto& c : menu.colors) v.add(c, AttributeType::Color);
  for (const auto& s : menu.shapes) v.add(s, AttributeType::Shape);
  if (menu.sizes) {
    v.add("large", AttributeType::Size);
    v.add("small", AttributeType::Size);
  }
  if (menu.textures) {
    v.add("plain", AttributeType::Texture);
    v.add("striped", AttributeType::Texture);
  }
  return v;
}

/**
 * Renders one colored shape per instance on a noisy background and labels it
 * with its exact color, shape, size (relative to its box) and texture. Each
 * ground-truth label is then kept with probability 1 - label_dropout. Option
 * k of every attribute type is drawn with probability proportional to
 * (k + 1)^-imbalance_exponent, so the first options are head classes.
 */
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.menu.colors.empty() || cfg.menu.shapes.empty())
    throw InvalidConfig("synthetic menu needs at least one color and one shape");
  if (cfg.n_instances < 1) throw InvalidConfig("n_instances must be >= 1");
  if (cfg.image_size < 8) throw InvalidConfig("image_size must be >= 8");
  if (!(cfg.label_dropout >= 0.0 && cfg.label_dropout <= 1.0)) throw InvalidConfig("label_dropout must be in [0, 1]");
  if (cfg.negative_dropout > 1.0) throw InvalidConfig("negative_dropout must be <= 1");
  const double neg_drop = cfg.negative_dropout < 0 ? cfg.label_dropout : cfg.negative_dropout;
  std::vector<ColorSpec> palette;
  for (const auto& name : cfg.menu.colors) {
    auto it = std::find_if(known_colors().begin(), known_colors().end(), [&](const auto& c) { return c.name == name; });
    if (it == known_colors().end()) throw InvalidConfig("unknown synthetic color " + name);
    palette.push_back(*it);
  }
  for (const auto& s : cfg.menu.shapes)
    if (std::find(known_shapes().begin(), known_shapes().end(), s) == known_shapes().end())
      throw InvalidConfig("unknown synthetic shape " + s);

  auto vocab = std::make_shared<const AttributeVocabulary>(synthetic_vocabulary(cfg.menu));
  auto store = std::make_shared<ImageStore>();
  SyntheticData out;
  out.vocab = vocab;
  out.split.vocab = vocab;
  out.split.records.reserve(cfg.n_instances);

  const int S = cfg.image_size;
  const int n_colors = static_cast<int>(palette.size());
  const int n_shapes = static_cast<int>(cfg.menu.shapes.size());
  for (int i = 0; i < cfg.n_instances; ++i) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    const auto color = detail::skewed_choice(rng, n_colors, cfg.imbalance_exponent);
    const auto shape = detail::skewed_choice(rng, n_shapes, cfg.imbalance_exponent);
    const bool large = cfg.menu.sizes ? detail::skewed_choice(rng, 2, cfg.imbalance_exponent) == 0 : true;
    const bool striped = cfg.menu.textures ? detail::skewed_choice(rng, 2, cfg.imbalance_exponent) == 1 : false;

    Image img(S, S);
    const double bg = rng.uniform(70, 170);
    const double bg_tint[3] = {rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-20, 20)};
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double wave = 12.0 * std::sin(0.9 * x + 0.6 * y);
        for (int ch = 0; ch < 3; ++ch) img.px(x, y)[ch] = detail::clamp_byte(bg + bg_tint[ch] + wave + rng.uniform(-18, 18));
      }

    const double box = rng.uniform(0.45, 0.65) * S;
    const double bx = rng.uniform(0.0, S - box), by = rng.uniform(0.0, S - box);
    const double radius = 0.5 * box * (large ? 0.95 : 0.55);
    const double cx = bx + box / 2, cy = by + box / 2;
    Polygon poly = detail::shape_polygon(cfg.menu.shapes[shape], cx, cy, radius);
    const bool vertical = rng.bernoulli(0.5);
    const auto& rgb = palette[color].rgb;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        if (!point_in_polygon(x + 0.5, y + 0.5, poly)) continue;
        const int phase = (vertical ? x : y) % 4;
        const double shade = (striped && phase < 2) ? 0.45 : 1.0;
        for (int ch = 0; ch < 3; ++ch) img.px(x, y)[ch] = detail::clamp_byte(rgb[ch] * shade + rng.uniform(-8, 8));
      }

    LabelVector truth(vocab->size(), kNegative);
    truth[color] = kPositive;
    truth[n_colors + shape] = kPositive;
    int next = n_colors + n_shapes;
    if (cfg.menu.sizes) {
      truth[next + (large ? 0 : 1)] = kPositive;
      next += 2;
    }
    if (cfg.menu.textures) truth[next + (striped ? 1 : 0)] = kPositive;

    LabelVector labels = truth;
    for (auto& l : labels)
      if (rng.bernoulli(l == kPositive ? cfg.label_dropout : neg_drop)) l = kMissing;

    InstanceRecord r;
    r.image_id = "syn" + std::to_string(cfg.seed) + "_" + std::to_string(i);
    r.instance_id = r.image_id;
    r.image_ref = store->put(r.image_id, std::move(img));
    r.bbox = {bx, by, box, box};
    if (rng.uniform() < cfg.mask_fraction) r.polygons.push_back(std::move(poly));
    r.object_phrase = cfg.menu.shapes[shape];
    r.labels = std::move(labels);
    out.split.records.push_back(std::move(r));
    out.ground_truth.push_back(std::move(truth));
  }
  out.split.images = std::move(store);
  return out;
}

}  // namespace scone

#endif  // SCONE_SYNTHETIC_HPP_
