#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "scone/rng.hpp"
#include "scone/taxonomy.hpp"
#include "scone/vocabulary.hpp"

using namespace scone;

namespace {

AttributeVocabulary colors4() {
  return AttributeVocabulary({"red", "blue", "white", "beige"},
                             {AttributeType::Color, AttributeType::Color, AttributeType::Color, AttributeType::Color});
}

RelationGraph white_beige(const AttributeVocabulary& v) {
  RelationGraph g(v.size());
  g.add_overlap(v.index_of("white"), v.index_of("beige"), RelationSource::Manual);
  return g;
}

}  // namespace

TEST(Vocabulary, ParsesNamesAndTypes) {
  std::istringstream in("# comment\nred\tcolor\nblue\tcolor\nwooden\tmaterial\n");
  const auto v = parse_vocabulary(in);
  ASSERT_EQ(v.size(), 3);
  EXPECT_EQ(v.name(2), "wooden");
  EXPECT_EQ(v.type(2), AttributeType::Material);
  EXPECT_EQ(v.index_of("blue"), 1);
}

TEST(Vocabulary, RejectsDuplicates) {
  std::istringstream in("red\tcolor\nred\tcolor\n");
  EXPECT_THROW(parse_vocabulary(in), DuplicateAttribute);
}

TEST(Vocabulary, RejectsMissingOrUnknownType) {
  std::istringstream missing("red\n");
  EXPECT_THROW(parse_vocabulary(missing), InvalidType);
  std::istringstream unknown("red\tflavor\n");
  EXPECT_THROW(parse_vocabulary(unknown), InvalidType);
}

TEST(Vocabulary, UnknownLookupThrows) {
  const auto v = colors4();
  EXPECT_THROW(v.index_of("green"), UnknownAttribute);
  EXPECT_FALSE(v.find("green").has_value());
}

TEST(Vocabulary, FileRoundTrip) {
  const auto v = colors4();
  const auto path = std::filesystem::temp_directory_path() / "scone_vocab_rt.tsv";
  {
    std::ofstream out(path);
    write_vocabulary(out, v);
  }
  EXPECT_TRUE(load_vocabulary(path.string()) == v);
  std::filesystem::remove(path);
}

TEST(Relations, SharedSynsetGivesOverlap) {
  AttributeVocabulary v({"muddy", "dirty", "clean"},
                        {AttributeType::Other, AttributeType::Other, AttributeType::Other});
  RelationSourceRecords src;
  src.synset_membership["muddy"] = {"dirty.a.01"};
  src.synset_membership["dirty"] = {"dirty.a.01"};
  const auto g = build_relations(v, src, 0.5);
  EXPECT_TRUE(g.overlap(0, 1));
  EXPECT_TRUE(g.overlap(1, 0));
  EXPECT_FALSE(g.overlap(0, 2));
  EXPECT_TRUE(g.provenance(0, 1).count(RelationSource::SynsetShare));
}

TEST(Relations, AntonymGivesExclusive) {
  AttributeVocabulary v({"wet", "dry"}, {AttributeType::Other, AttributeType::Other});
  RelationSourceRecords src;
  src.antonym_pairs.emplace_back("wet", "dry");
  const auto g = build_relations(v, src, 0.5);
  EXPECT_TRUE(g.exclusive(0, 1));
  EXPECT_TRUE(g.exclusive(1, 0));
}

TEST(Relations, CooccurrenceUsesLargerConditional) {
  const auto v = colors4();
  RelationSourceRecords src;
  // P(white | beige) = 40 / 50 = 0.8, P(beige | white) = 40 / 400 = 0.1
  src.cooccurrence.push_back({"white", "beige", 40, 400, 50});
  EXPECT_TRUE(build_relations(v, src, 0.5).overlap(2, 3));
  EXPECT_FALSE(build_relations(v, src, 0.81).overlap(2, 3));
}

TEST(Relations, OverlapWinsOverExclusive) {
  const auto v = colors4();
  RelationSourceRecords src;
  src.typed_edges.push_back({"white", "beige", EdgeLabel::Antonym});
  src.typed_edges.push_back({"white", "beige", EdgeLabel::SimilarTo});
  const auto g = build_relations(v, src, 1.0);
  EXPECT_TRUE(g.overlap(2, 3));
  EXPECT_FALSE(g.exclusive(2, 3));
}

TEST(Relations, UnknownAttributeThrows) {
  const auto v = colors4();
  RelationSourceRecords src;
  src.antonym_pairs.emplace_back("red", "green");
  EXPECT_THROW(build_relations(v, src, 0.5), UnknownAttribute);
}

TEST(Relations, LoadsEdgeFile) {
  const auto path = std::filesystem::temp_directory_path() / "scone_edges.tsv";
  {
    std::ofstream out(path);
    out << "# a\tb\tlabel\nwhite\tbeige\tSimilarTo\nred\tblue\tDistinctFrom\n";
  }
  RelationSourceRecords src;
  load_edges(path.string(), src);
  ASSERT_EQ(src.typed_edges.size(), 2u);
  const auto v = colors4();
  const auto g = build_relations(v, src, 1.0);
  EXPECT_TRUE(g.overlap(2, 3));
  EXPECT_TRUE(g.exclusive(0, 1));
  std::filesystem::remove(path);
}

TEST(Expansion, RedPositiveNegatesAllOtherColors) {
  const auto v = colors4();
  const auto g = white_beige(v);
  const LabelVector in{kPositive, kMissing, kMissing, kMissing};
  EXPECT_EQ(expand_negatives(in, v, g), (LabelVector{kPositive, kNegative, kNegative, kNegative}));
}

TEST(Expansion, WhitePositiveLeavesOverlappingBeige) {
  const auto v = colors4();
  const auto g = white_beige(v);
  const LabelVector in{kMissing, kMissing, kPositive, kMissing};
  EXPECT_EQ(expand_negatives(in, v, g), (LabelVector{kNegative, kNegative, kPositive, kMissing}));
}

TEST(Expansion, AllMissingUnchanged) {
  const auto v = colors4();
  const LabelVector in(4, kMissing);
  EXPECT_EQ(expand_negatives(in, v, white_beige(v)), in);
}

TEST(Expansion, ExclusiveCrossesTypes) {
  AttributeVocabulary v({"wet", "dry", "red"}, {AttributeType::Other, AttributeType::Material, AttributeType::Color});
  RelationGraph g(3);
  g.add_exclusive(0, 1, RelationSource::Manual);
  const LabelVector in{kPositive, kMissing, kMissing};
  EXPECT_EQ(expand_negatives(in, v, g), (LabelVector{kPositive, kNegative, kMissing}));
}

TEST(Expansion, ConflictsAreLoggedNotApplied) {
  const auto v = colors4();
  const LabelVector in{kPositive, kPositive, kMissing, kMissing};
  std::vector<ExpansionConflict> log;
  const auto out = expand_negatives(in, v, RelationGraph(4), &log, 7);
  EXPECT_EQ(out[0], kPositive);
  EXPECT_EQ(out[1], kPositive);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].instance, 7u);
}

TEST(Expansion, DatasetReportCountsAdditions) {
  auto v = std::make_shared<const AttributeVocabulary>(colors4());
  DatasetSplit split;
  split.vocab = v;
  for (const auto& labels : {LabelVector{kPositive, kMissing, kMissing, kMissing},
                             LabelVector{kMissing, kMissing, kPositive, kMissing},
                             LabelVector{kMissing, kMissing, kMissing, kMissing}}) {
    InstanceRecord r;
    r.labels = labels;
    split.records.push_back(r);
  }
  const auto [out, rep] = expand_dataset(split, *v, white_beige(*v));
  // instance 0 adds 3, instance 1 adds 2 (red, blue), instance 2 adds nothing
  EXPECT_EQ(rep.total_added, 5);
  EXPECT_EQ(rep.added_per_class, (std::vector<std::int64_t>{1, 2, 1, 1}));
  EXPECT_EQ(out.records[2].labels, split.records[2].labels);

  DatasetSplit empty;
  empty.vocab = v;
  EXPECT_EQ(expand_dataset(empty, *v, white_beige(*v)).second.total_added, 0);
}

TEST(Expansion, PropertiesOnRandomGraphs) {
  Rng rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(10));
    std::vector<std::string> names;
    std::vector<AttributeType> types;
    for (int i = 0; i < n; ++i) {
      names.push_back("a" + std::to_string(i));
      types.push_back(static_cast<AttributeType>(rng.below(3)));
    }
    AttributeVocabulary v(names, types);
    RelationGraph g(n);
    for (int k = 0; k < n; ++k) {
      const int a = static_cast<int>(rng.below(n)), b = static_cast<int>(rng.below(n));
      if (rng.bernoulli(0.5)) g.add_overlap(a, b, RelationSource::Manual);
      else g.add_exclusive(a, b, RelationSource::Manual);
    }
    LabelVector in(n);
    for (auto& l : in) l = static_cast<Label>(static_cast<int>(rng.below(3)) - 1);
    const auto once = expand_negatives(in, v, g);
    EXPECT_EQ(expand_negatives(once, v, g), once);
    for (int c = 0; c < n; ++c) {
      if (in[c] != kMissing) EXPECT_EQ(once[c], in[c]);
      else EXPECT_NE(once[c], kPositive);
    }
    for (const auto& p : g.overlap_pairs()) EXPECT_FALSE(g.exclusive(p.first, p.second));
  }
}
