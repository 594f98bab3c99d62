#include <gtest/gtest.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <map>

#include "scone/dataset.hpp"
#include "scone/geometry.hpp"
#include "scone/preprocess.hpp"
#include "scone/synthetic.hpp"

using namespace scone;

namespace {

std::shared_ptr<const AttributeVocabulary> small_vocab() {
  return std::make_shared<const AttributeVocabulary>(
      std::vector<std::string>{"red", "blue", "wooden"},
      std::vector<AttributeType>{AttributeType::Color, AttributeType::Color, AttributeType::Material});
}

nlohmann::json entry(std::vector<std::string> pos, std::vector<std::string> neg) {
  return {{"image_id", 17},
          {"instance_id", "17_0"},
          {"instance_bbox", {1, 2, 10, 20}},
          {"instance_polygon", nullptr},
          {"object_name", "chair"},
          {"positive_attributes", pos},
          {"negative_attributes", neg}};
}

}  // namespace

TEST(Ingest, MapsPositiveNegativeMissing) {
  IngestResult res;
  res.split.vocab = small_vocab();
  ingest_vaw_document(nlohmann::json::array({entry({"red"}, {"blue"})}), "/img", *res.split.vocab, res);
  ASSERT_EQ(res.split.size(), 1u);
  EXPECT_EQ(res.split.records[0].labels, (LabelVector{kPositive, kNegative, kMissing}));
  EXPECT_EQ(res.split.records[0].image_id, "17");
  EXPECT_EQ(res.split.records[0].object_phrase, "chair");
  EXPECT_EQ(res.dropped_attributes, 0u);
}

TEST(Ingest, DropsUnknownAttributes) {
  IngestResult res;
  res.split.vocab = small_vocab();
  ingest_vaw_document(nlohmann::json::array({entry({"red", "shiny"}, {})}), "", *res.split.vocab, res);
  EXPECT_EQ(res.dropped_attributes, 1u);
  EXPECT_EQ(res.split.records[0].labels[0], kPositive);
}

TEST(Ingest, MalformedEntryReportsIndex) {
  IngestResult res;
  res.split.vocab = small_vocab();
  auto bad = entry({}, {});
  bad.erase("instance_bbox");
  try {
    ingest_vaw_document(nlohmann::json::array({entry({}, {}), bad}), "", *res.split.vocab, res);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("entry 1"), std::string::npos);
  }
}

TEST(Ingest, PositiveWinsOverConflictingNegative) {
  IngestResult res;
  res.split.vocab = small_vocab();
  ingest_vaw_document(nlohmann::json::array({entry({"red"}, {"red"})}), "", *res.split.vocab, res);
  EXPECT_EQ(res.split.records[0].labels[0], kPositive);
  EXPECT_EQ(res.conflicting_labels, 1u);
}

TEST(Ingest, MissingImageFailsOnlyAtAccess) {
  const auto dir = std::filesystem::temp_directory_path() / "scone_ingest";
  std::filesystem::create_directories(dir);
  const auto file = dir / "train.json";
  {
    std::ofstream out(file);
    out << nlohmann::json::array({entry({"red"}, {})}).dump();
  }
  const auto res = ingest_vaw({file.string()}, (dir / "images").string(), small_vocab());
  ASSERT_EQ(res.split.size(), 1u);
  ImageStore store;
  EXPECT_THROW(store.load(res.split.records[0].image_ref), ImageLoadError);
  std::filesystem::remove_all(dir);
}

TEST(Ingest, VawVocabularyFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "scone_vaw_vocab";
  std::filesystem::create_directories(dir);
  const auto index = (dir / "attribute_index.json").string(), types = (dir / "attribute_types.json").string();
  std::ofstream(index) << R"({"wooden": 2, "red": 0, "wet": 1, "plain": 3})";
  std::ofstream(types) << R"({"color": ["red"], "material": ["wooden"], "state": ["wet"]})";
  ScopedWarningSink quiet([](std::string_view) {});
  const auto v = load_vaw_vocabulary(index, types);
  EXPECT_EQ(v.names(), (std::vector<std::string>{"red", "wet", "wooden", "plain"}));
  EXPECT_EQ(v.type(0), AttributeType::Color);
  EXPECT_EQ(v.type(1), AttributeType::Other);
  EXPECT_EQ(v.type(2), AttributeType::Material);
  EXPECT_EQ(v.type(3), AttributeType::Other);

  std::ofstream(index) << R"({"red": 0, "wet": 2})";
  EXPECT_THROW(load_vaw_vocabulary(index, types), ParseError);
  std::ofstream(index) << R"({"red": 0})";
  std::ofstream(types) << R"({"colour": ["red"]})";
  EXPECT_THROW(load_vaw_vocabulary(index, types), InvalidType);
  std::filesystem::remove_all(dir);
}

TEST(Ingest, RoundTripPreservesLabels) {
  SyntheticConfig cfg;
  cfg.n_instances = 60;
  cfg.seed = 3;
  const auto syn = generate_synthetic(cfg);
  IngestResult back;
  back.split.vocab = syn.vocab;
  ingest_vaw_document(to_vaw_json(syn.split, true), "", *syn.vocab, back);
  ASSERT_EQ(back.split.size(), syn.split.size());
  for (std::size_t i = 0; i < syn.split.size(); ++i) {
    EXPECT_EQ(back.split.records[i].labels, syn.split.records[i].labels);
    EXPECT_EQ(back.split.records[i].bbox, syn.split.records[i].bbox);
    EXPECT_EQ(back.split.records[i].polygons, syn.split.records[i].polygons);
  }
}

TEST(Stats, HandCountedExample) {
  DatasetSplit split;
  split.vocab = small_vocab();
  InstanceRecord a, b;
  a.labels = {kPositive, kNegative, kMissing};
  b.labels = {kPositive, kMissing, kMissing};
  split.records = {a, b};
  const auto s = compute_stats(split);
  EXPECT_EQ(s.n_pos, (std::vector<std::int64_t>{2, 0, 0}));
  EXPECT_EQ(s.n_neg, (std::vector<std::int64_t>{0, 1, 0}));
  EXPECT_DOUBLE_EQ(s.density, 1.5);
  EXPECT_DOUBLE_EQ(s.image_freq[0], 1.0);
  EXPECT_DOUBLE_EQ(s.image_freq[1], 0.0);
}

TEST(Stats, EmptySplitThrows) {
  DatasetSplit split;
  split.vocab = small_vocab();
  EXPECT_THROW(compute_stats(split), EmptySplit);
}

TEST(Stats, CountsBoundedByInstances) {
  SyntheticConfig cfg;
  cfg.n_instances = 300;
  const auto s = compute_stats(generate_synthetic(cfg).split);
  for (int c = 0; c < s.num_classes(); ++c) EXPECT_LE(s.n_pos[c] + s.n_neg[c], s.n_instances);
}

TEST(Geometry, BoxExpansionAndClamp) {
  // min(100, 50) * 0.3 = 15 per side: (-5, -5, 130, 80) clamped at the origin
  const BBox b = expand_and_clamp_box({10, 10, 100, 50}, 500, 500, 0.3);
  EXPECT_DOUBLE_EQ(b.x, 0);
  EXPECT_DOUBLE_EQ(b.y, 0);
  EXPECT_DOUBLE_EQ(b.w, 125);
  EXPECT_DOUBLE_EQ(b.h, 75);
  const BBox far = expand_and_clamp_box({480, 480, 20, 20}, 500, 500, 0.3);
  EXPECT_DOUBLE_EQ(far.x + far.w, 500);
}

TEST(Synthetic, NoDropoutMeansFullyLabeled) {
  SyntheticConfig cfg;
  cfg.n_instances = 50;
  cfg.label_dropout = 0.0;
  const auto syn = generate_synthetic(cfg);
  EXPECT_EQ(syn.vocab->size(), 16);
  for (const auto& r : syn.split.records) {
    for (auto l : r.labels) EXPECT_NE(l, kMissing);
    EXPECT_EQ(std::count(r.labels.begin(), r.labels.end(), kPositive), 4);
  }
}

TEST(Synthetic, DeterministicGivenSeed) {
  SyntheticConfig cfg;
  cfg.n_instances = 40;
  cfg.seed = 11;
  const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  for (std::size_t i = 0; i < a.split.size(); ++i) {
    EXPECT_EQ(a.split.records[i].labels, b.split.records[i].labels);
    EXPECT_EQ(a.split.images->load(a.split.records[i].image_ref)->rgb,
              b.split.images->load(b.split.records[i].image_ref)->rgb);
  }
}

TEST(Synthetic, DensityMatchesDropoutExpectation) {
  SyntheticConfig cfg;  // 5000 instances, 16 attributes, dropout 0.5
  const auto s = compute_stats(generate_synthetic(cfg).split);
  // 16 known labels per instance, each kept with probability 0.5
  EXPECT_NEAR(s.density, 8.0, 0.1);
}

TEST(Synthetic, SkewedFrequencies) {
  SyntheticConfig cfg;
  cfg.n_instances = 2000;
  cfg.label_dropout = 0.0;
  const auto s = compute_stats(generate_synthetic(cfg).split);
  EXPECT_GT(s.n_pos[0], 3 * s.n_pos[7]);  // first color is the head, last is the tail
}

TEST(Synthetic, PlainShapesShowTheirColorInsideMask) {
  SyntheticConfig cfg;
  cfg.n_instances = 120;
  cfg.label_dropout = 0.0;
  const auto syn = generate_synthetic(cfg);
  const int stripe = syn.vocab->index_of("striped");
  int checked = 0;
  for (std::size_t i = 0; i < syn.split.size(); ++i) {
    const auto& r = syn.split.records[i];
    if (r.labels[stripe] == kPositive) continue;
    const auto img = syn.split.images->load(r.image_ref);
    std::map<int, int> votes;
    for (int y = 0; y < img->height; ++y)
      for (int x = 0; x < img->width; ++x) {
        if (!point_in_any(x + 0.5, y + 0.5, r.polygons)) continue;
        const auto* p = img->px(x, y);
        int best = -1;
        double best_d = 1e18;
        for (int c = 0; c < 8; ++c) {
          const auto& rgb = std::find_if(known_colors().begin(), known_colors().end(), [&](const auto& k) {
                              return k.name == syn.vocab->name(c);
                            })->rgb;
          double d = 0;
          for (int ch = 0; ch < 3; ++ch) d += (p[ch] - rgb[ch]) * (p[ch] - rgb[ch]);
          if (d < best_d) {
            best_d = d;
            best = c;
          }
        }
        ++votes[best];
      }
    const auto modal = std::max_element(votes.begin(), votes.end(),
                                        [](const auto& a, const auto& b) { return a.second < b.second; })->first;
    EXPECT_EQ(r.labels[modal], kPositive);
    ++checked;
  }
  EXPECT_GT(checked, 30);
}

TEST(Synthetic, InvalidMenuThrows) {
  SyntheticConfig cfg;
  cfg.menu.colors.clear();
  EXPECT_THROW(generate_synthetic(cfg), InvalidConfig);
  cfg = {};
  cfg.menu.colors = {"chartreuse-ish"};
  EXPECT_THROW(generate_synthetic(cfg), InvalidConfig);
}

class PreprocessTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SyntheticConfig cfg;
    cfg.n_instances = 20;
    cfg.label_dropout = 0.0;
    syn = generate_synthetic(cfg);
    pre.input_size = 32;
  }
  SyntheticData syn;
  PreprocessConfig pre;
};

TEST_F(PreprocessTest, UnaugmentedIsDeterministic) {
  const auto& r = syn.split.records[0];
  const auto a = preprocess_instance(r, *syn.split.images, *syn.vocab, false, 1, pre);
  const auto b = preprocess_instance(r, *syn.split.images, *syn.vocab, false, 2, pre);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.image.height(), 32);
  ASSERT_TRUE(a.mask.has_value());
  EXPECT_GT(a.mask->sum(), 0.0f);
  for (float v : a.mask->values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST_F(PreprocessTest, AugmentedDependsOnlyOnSeed) {
  const auto& r = syn.split.records[3];
  const auto a = preprocess_instance(r, *syn.split.images, *syn.vocab, true, 99, pre);
  const auto b = preprocess_instance(r, *syn.split.images, *syn.vocab, true, 99, pre);
  EXPECT_EQ(a.image.values(), b.image.values());
  EXPECT_EQ(a.flipped, b.flipped);
}

TEST_F(PreprocessTest, NoGrayscaleWhenColorPositive) {
  pre.grayscale_prob = 1.0;
  const auto& r = syn.split.records[0];  // every record carries a positive color here
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    ASSERT_FALSE(preprocess_instance(r, *syn.split.images, *syn.vocab, true, seed, pre).grayscale);

  InstanceRecord uncolored = r;
  for (int c = 0; c < 8; ++c) uncolored.labels[c] = kMissing;
  EXPECT_TRUE(preprocess_instance(uncolored, *syn.split.images, *syn.vocab, true, 5, pre).grayscale);
}

TEST_F(PreprocessTest, UnreadableImageThrows) {
  InstanceRecord r = syn.split.records[0];
  r.image_ref = "/nonexistent/path/img";
  EXPECT_THROW(preprocess_instance(r, *syn.split.images, *syn.vocab, false, 0, pre), ImageLoadError);
}

TEST(Image, PpmRoundTrip) {
  Image img(5, 3);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 7);
  const auto path = std::filesystem::temp_directory_path() / "scone_rt.ppm";
  write_ppm(path.string(), img);
  const auto back = read_ppm(path.string());
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.rgb, img.rgb);
  ImageStore store;
  const auto stem = (std::filesystem::temp_directory_path() / "scone_rt").string();
  EXPECT_EQ(store.load(stem)->rgb, img.rgb);  // extension probed lazily
  std::filesystem::remove(path);
}
