#ifndef SCONE_PREPROCESS_HPP_
#define SCONE_PREPROCESS_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "scone/config.hpp"
#include "scone/dataset.hpp"
#include "scone/geometry.hpp"
#include "scone/rng.hpp"
#include "scone/tensor.hpp"

namespace scone {

struct PreprocessConfig {
  int input_size = 224;
  double context = 0.3;  // box growth per side, as a fraction of min(w, h)
  double crop_jitter = 0.1;
  double scale_jitter = 0.1;
  double flip_prob = 0.5;
  double color_jitter = 0.1;
  double grayscale_prob = 0.2;
  std::array<float, 3> mean = {0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev = {0.229f, 0.224f, 0.225f};

  static PreprocessConfig from_config(const KeyValueConfig& kv);
  static PreprocessConfig from_config(const KeyValueConfig& kv, PreprocessConfig c) {
    c.input_size = kv.get("input_size", c.input_size);
    c.context = kv.get("box_context", c.context);
    c.crop_jitter = kv.get("aug.crop_jitter", c.crop_jitter);
    c.scale_jitter = kv.get("aug.scale_jitter", c.scale_jitter);
    c.flip_prob = kv.get("aug.flip_prob", c.flip_prob);
    c.color_jitter = kv.get("aug.color_jitter", c.color_jitter);
    c.grayscale_prob = kv.get("aug.grayscale_prob", c.grayscale_prob);
    return c;
  }
};

struct ModelInput {
  Tensor<float> image;               // 3 x S x S, normalized
  std::optional<Tensor<float>> mask;  // 1 x S x S in {0, 1}
  std::string object_phrase;
  LabelVector labels;
  std::uint64_t augmentation_seed = 0;
  BBox crop;
  bool flipped = false;
  bool grayscale = false;
};

inline bool has_positive_color(const LabelVector& labels, const AttributeVocabulary& vocab) {
  for (int c = 0; c < vocab.size(); ++c)
    if (labels[c] == kPositive && vocab.type(c) == AttributeType::Color) return true;
  return false;
}

/**
 * Crops the context-expanded box, resizes it to the input grid and rasterizes
 * the polygon mask onto the same grid. With augment set, the crop is jittered
 * and optionally flipped, colors are jittered, and grayscale is applied only to
 * instances without a positive color label. Output depends only on the seed.
 */
inline ModelInput preprocess_instance(const InstanceRecord& record, const ImageStore& images,
                                      const AttributeVocabulary& vocab, bool augment, std::uint64_t seed,
                                      const PreprocessConfig& cfg = {}) {
  const auto img = images.load(record.image_ref);
  const int S = cfg.input_size;
  Rng rng(seed);

  BBox box = expand_and_clamp_box(record.bbox, img->width, img->height, cfg.context);
  ModelInput in;
  in.object_phrase = record.object_phrase;
  in.labels = record.labels;
  in.augmentation_seed = seed;

  float brightness = 1, contrast = 1, saturation = 1;
  if (augment) {
    const double scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
    const double cx = box.x + box.w / 2 + rng.uniform(-cfg.crop_jitter, cfg.crop_jitter) * box.w;
    const double cy = box.y + box.h / 2 + rng.uniform(-cfg.crop_jitter, cfg.crop_jitter) * box.h;
    const double w = box.w * scale, h = box.h * scale;
    const double x0 = std::clamp(cx - w / 2, 0.0, static_cast<double>(img->width) - 1.0);
    const double y0 = std::clamp(cy - h / 2, 0.0, static_cast<double>(img->height) - 1.0);
    const double x1 = std::clamp(cx + w / 2, x0 + 1.0, static_cast<double>(img->width));
    const double y1 = std::clamp(cy + h / 2, y0 + 1.0, static_cast<double>(img->height));
    box = {x0, y0, x1 - x0, y1 - y0};
    in.flipped = rng.bernoulli(cfg.flip_prob);
    brightness = static_cast<float>(rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter));
    contrast = static_cast<float>(rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter));
    saturation = static_cast<float>(rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter));
    const bool gray_draw = rng.bernoulli(cfg.grayscale_prob);
    in.grayscale = gray_draw && !has_positive_color(record.labels, vocab);
  }
  in.crop = box;

  in.image = Tensor<float>(3, S, S);
  const double sx = box.w / S, sy = box.h / S;
  auto sample = [&](double x, double y, int ch) {
    x = std::clamp(x, 0.0, img->width - 1.0);
    y = std::clamp(y, 0.0, img->height - 1.0);
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, img->width - 1), y1 = std::min(y0 + 1, img->height - 1);
    const double fx = x - x0, fy = y - y0;
    return (1 - fy) * ((1 - fx) * img->px(x0, y0)[ch] + fx * img->px(x1, y0)[ch]) +
           fy * ((1 - fx) * img->px(x0, y1)[ch] + fx * img->px(x1, y1)[ch]);
  };
  for (int oy = 0; oy < S; ++oy) {
    for (int ox = 0; ox < S; ++ox) {
      const int col = in.flipped ? S - 1 - ox : ox;
      const double x = box.x + (col + 0.5) * sx - 0.5;
      const double y = box.y + (oy + 0.5) * sy - 0.5;
      float rgb[3];
      for (int ch = 0; ch < 3; ++ch) rgb[ch] = static_cast<float>(sample(x, y, ch) / 255.0);
      if (augment) {
        const float gray = 0.299f * rgb[0] + 0.587f * rgb[1] + 0.114f * rgb[2];
        for (float& v : rgb) {
          v = gray + saturation * (v - gray);
          v = 0.5f + contrast * (v - 0.5f);
          v = std::clamp(v * brightness, 0.0f, 1.0f);
        }
        if (in.grayscale) rgb[0] = rgb[1] = rgb[2] = 0.299f * rgb[0] + 0.587f * rgb[1] + 0.114f * rgb[2];
      }
      for (int ch = 0; ch < 3; ++ch) in.image.at(ch, oy, ox) = (rgb[ch] - cfg.mean[ch]) / cfg.stddev[ch];
    }
  }

  if (record.has_mask()) {
    Tensor<float> mask(1, S, S);
    for (int oy = 0; oy < S; ++oy)
      for (int ox = 0; ox < S; ++ox) {
        const int col = in.flipped ? S - 1 - ox : ox;
        const double x = box.x + (col + 0.5) * sx;
        const double y = box.y + (oy + 0.5) * sy;
        mask.at(0, oy, ox) = point_in_any(x, y, record.polygons) ? 1.0f : 0.0f;
      }
    in.mask = std::move(mask);
  }
  return in;
}

inline PreprocessConfig PreprocessConfig::from_config(const KeyValueConfig& kv) { return from_config(kv, PreprocessConfig{}); }

}  // namespace scone

#endif  // SCONE_PREPROCESS_HPP_
