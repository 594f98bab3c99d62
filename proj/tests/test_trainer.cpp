#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "scone/scone.hpp"
#include "support.hpp"

using namespace scone;

namespace {

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.model.backbone.toy_channels = {4, 6, 8, 8};
  cfg.model.input_size = 16;
  cfg.preprocess.input_size = 16;
  cfg.model.embed_dim = 8;
  cfg.model.gate_hidden = 8;
  cfg.model.proj_dim = 8;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr_backbone = 0.003;
  cfg.lr_head = 0.003;
  cfg.supcon_hidden = 16;
  cfg.supcon_dim = 8;
  cfg.seed = 5;
  return cfg;
}

SyntheticData synth(int n, std::uint64_t seed) {
  SyntheticConfig sc;
  sc.n_instances = n;
  sc.image_size = 24;
  sc.seed = seed;
  return generate_synthetic(sc);
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("scone_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Checkpoint parse_bytes(const std::string& bytes) {
  std::istringstream in(bytes);
  return parse_checkpoint(in);
}

}  // namespace

TEST(RunConfig, DefaultsFollowTrainingRecipe) {
  const RunConfig c;
  EXPECT_EQ(c.epochs, 12);
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_DOUBLE_EQ(c.lr_backbone, 1e-5);
  EXPECT_DOUBLE_EQ(c.lr_head, 7e-4);
  EXPECT_DOUBLE_EQ(c.weight_decay, 1e-5);
  EXPECT_DOUBLE_EQ(c.lr_decay, 0.1);
  EXPECT_EQ(c.plateau_patience, 2);
  EXPECT_EQ(c.pretrain_epochs, 10);
  EXPECT_EQ(c.pretrain_batch * 2, 768);
  EXPECT_DOUBLE_EQ(c.rfs_threshold, 0.0006);
  EXPECT_EQ(c.eval_k, 15);
  EXPECT_EQ(c.sampler, "rfs");
  EXPECT_EQ(c.reweighting, "rw_bce");
}

TEST(RunConfig, RoundTripsThroughKeyValues) {
  RunConfig c = tiny_run();
  c.loss.alpha = 0.37;
  c.sampler = "cas";
  c.joint_supcon = true;
  c.model.mode = ModelMode::ResNetBaseline;
  const RunConfig back = RunConfig::from_config(c.to_config());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(RunConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(RunConfig, RejectsBadValues) {
  KeyValueConfig kv;
  kv.set("sampler", "magic");
  EXPECT_THROW(RunConfig::from_config(kv), InvalidConfig);
  RunConfig c;
  c.loss_kind = "hinge";
  EXPECT_THROW(c.validate(), InvalidConfig);
  c = RunConfig{};
  c.preprocess.input_size = 32;
  EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(LossWeightsFactory, SchemesDiffer) {
  DatasetStats s;
  s.n_pos = {10, 1000};
  s.n_neg = {1000, 10};
  RunConfig c;
  EXPECT_NEAR(make_loss_weights(c, s).p[0], 2.0 * std::pow(10.0, -0.1) / (std::pow(10.0, -0.1) + std::pow(1000.0, -0.1)), 1e-12);
  c.reweighting = "none";
  const auto none = make_loss_weights(c, s);
  EXPECT_EQ(none.w, (std::vector<double>{1.0, 1.0}));
  EXPECT_DOUBLE_EQ(none.missing_weight, c.loss.missing_weight);
  c.reweighting = "if";
  EXPECT_NEAR(make_loss_weights(c, s).w[0] / make_loss_weights(c, s).w[1], std::pow(100.0, 0.1), 1e-9);
  c.reweighting = "cb";
  EXPECT_GT(make_loss_weights(c, s).w[0], make_loss_weights(c, s).w[1]);
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new SyntheticData(synth(160, 1));
    val_ = new SyntheticData(synth(60, 2));
  }
  static void TearDownTestSuite() {
    delete train_;
    delete val_;
  }
  static SyntheticData* train_;
  static SyntheticData* val_;
  ScopedWarningSink quiet_{[](std::string_view) {}};
};
SyntheticData* TrainerTest::train_ = nullptr;
SyntheticData* TrainerTest::val_ = nullptr;

TEST_F(TrainerTest, DeterministicAcrossRuns) {
  const auto a = train<float>(tiny_run(), train_->split, val_->split);
  const auto b = train<float>(tiny_run(), train_->split, val_->split);
  EXPECT_EQ(a.checkpoint_bytes, b.checkpoint_bytes);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t e = 0; e < a.log.size(); ++e) EXPECT_EQ(a.log[e].to_json(), b.log[e].to_json());
  RunConfig other = tiny_run();
  other.seed = 6;
  EXPECT_NE(train<float>(other, train_->split, val_->split).checkpoint_bytes, a.checkpoint_bytes);
}

TEST_F(TrainerTest, WritesLogAndCheckpoint) {
  RunConfig cfg = tiny_run();
  const auto dir = scratch("out");
  cfg.out_dir = dir.string();
  const auto res = train<float>(cfg, train_->split, val_->split);
  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<int>(), lines);
    ++lines;
  }
  EXPECT_EQ(lines, cfg.epochs);
  std::ifstream ck(dir / "checkpoint.bin", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(ck)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes, res.checkpoint_bytes);
  EXPECT_LT(res.attention_mass_error, 1e-5);
  std::filesystem::remove_all(dir);
}

TEST_F(TrainerTest, CheckpointRoundTripReproducesEvaluation) {
  const auto res = train<float>(tiny_run(), train_->split, val_->split);
  const auto inputs = prepare_inputs(val_->split, res.config.preprocess);
  const auto before = predict_table(*res.model, res.model->params(), val_->split, inputs);

  const auto path = std::filesystem::temp_directory_path() / "scone_trainer_rt.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << res.checkpoint_bytes;
  }
  const auto ck = load_checkpoint(path.string());
  const auto ev = evaluate<float>(ck, val_->split);
  EXPECT_EQ(ev.table.scores, before.scores);
  EXPECT_EQ(ev.report.mAP, mean_average_precision(before).mAP);
  EXPECT_NEAR(ev.report.mAP, res.best_val_mAP, 0.0);
  const auto again = evaluate<float>(ck, val_->split);
  EXPECT_EQ(evaluation_to_json(again, *val_->vocab), evaluation_to_json(ev, *val_->vocab));
  EXPECT_EQ(ev.report.K, 15);
  std::filesystem::remove(path);
}

TEST_F(TrainerTest, EvaluateRejectsOtherVocabulary) {
  const auto res = train<float>(tiny_run(), train_->split, val_->split);
  const auto ck = parse_bytes(res.checkpoint_bytes);
  SyntheticConfig sc;
  sc.n_instances = 10;
  sc.menu.textures = false;
  const auto other = generate_synthetic(sc);
  EXPECT_THROW(evaluate<float>(ck, other.split), VocabMismatch);
  EXPECT_THROW(search_rank<float>(ck, val_->split, {"mauve"}, 5), UnknownAttribute);
}

TEST_F(TrainerTest, LogDecompositionIdentity) {
  for (bool joint : {false, true}) {
    RunConfig cfg = tiny_run();
    cfg.joint_supcon = joint;
    const auto res = train<float>(cfg, train_->split, val_->split);
    for (const auto& e : res.log) {
      const double rhs = total_loss(e.mean, cfg.loss.lambda_div, cfg.loss.lambda_sup, joint);
      EXPECT_NEAR(e.total, rhs, 1e-6) << "joint=" << joint;
      EXPECT_NE(e.mean.rel, 0.0);
      if (joint) EXPECT_GT(e.mean.sup, 0.0);
    }
  }
}

TEST_F(TrainerTest, TrainingLossMostlyDecreases) {
  RunConfig cfg = tiny_run();
  cfg.epochs = 5;
  const auto res = train<float>(cfg, train_->split, val_->split);
  int nonincreasing = 1;  // the first epoch has no predecessor
  for (int e = 1; e < 5; ++e) nonincreasing += res.log[e].total <= res.log[e - 1].total;
  EXPECT_GE(nonincreasing, 4);
}

TEST_F(TrainerTest, NanLossAbortsWithBatchIndices) {
  RunConfig cfg = tiny_run();
  cfg.model.num_classes = train_->vocab->size();
  AttributeModel<float> m(cfg.model, 0);
  auto& p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.spec(i).name == "classifier.bias") p[i].setConstant(std::numeric_limits<float>::quiet_NaN());
  const auto path = std::filesystem::temp_directory_path() / "scone_trainer_nan.bin";
  save_checkpoint(path.string(), p, nlohmann::json::object());
  cfg.init_checkpoint = path.string();
  try {
    train<float>(cfg, train_->split, val_->split);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("batch indices"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_F(TrainerTest, SoftmaxCeAndResnetBaselineTrain) {
  RunConfig cfg = tiny_run();
  cfg.loss_kind = "softmax_ce";
  cfg.model.mode = ModelMode::ResNetBaseline;
  cfg.epochs = 1;
  const auto res = train<float>(cfg, train_->split, val_->split);
  EXPECT_TRUE(std::isfinite(res.log[0].total));
  const auto ev = evaluate<float>(parse_bytes(res.checkpoint_bytes), val_->split);
  for (int i = 0; i < ev.table.rows; ++i) {
    double s = 0;
    for (int c = 0; c < ev.table.classes; ++c) s += ev.table.score(i, c);
    EXPECT_NEAR(s, 1.0, 1e-5);  // softmax scores
  }
}

TEST_F(TrainerTest, PretrainedWeightsLoadIntoTraining) {
  RunConfig cfg = tiny_run();
  cfg.pretrain_epochs = 1;
  cfg.pretrain_batch = 32;
  const auto dir = scratch("pre");
  cfg.out_dir = dir.string();
  const auto pre = pretrain_supcon<float>(cfg, train_->split);
  EXPECT_EQ(pre.epoch_loss.size(), 1u);
  const auto ck = load_checkpoint((dir / "pretrain.bin").string());
  for (const auto& s : ck.params.specs())
    EXPECT_TRUE(s.group == ParamGroup::Backbone || s.name.rfind("gate.", 0) == 0) << s.name;

  cfg.model.num_classes = train_->vocab->size();
  AttributeModel<float> fresh(cfg.model, 0);
  const auto missing = apply_checkpoint(fresh.params(), ck, true);
  for (const auto& name : missing) {
    EXPECT_NE(name.rfind("backbone.", 0), 0u) << name;
    EXPECT_NE(name.rfind("gate.", 0), 0u) << name;
  }
  const auto mine = fresh.params().find("backbone.stage1.conv.weight");
  const auto theirs = ck.params.find("backbone.stage1.conv.weight");
  ASSERT_TRUE(mine && theirs);
  EXPECT_EQ(fresh.params()[*mine], ck.params[*theirs].cast<float>());

  cfg.init_checkpoint = (dir / "pretrain.bin").string();
  cfg.out_dir.clear();
  cfg.epochs = 1;
  EXPECT_NO_THROW(train<float>(cfg, train_->split, val_->split));
  std::filesystem::remove_all(dir);
}

TEST_F(TrainerTest, PretrainFirstBatchMatchesBruteForce) {
  RunConfig cfg = tiny_run();
  cfg.augment = false;
  cfg.pretrain_epochs = 1;
  cfg.pretrain_batch = 2;
  cfg.max_steps_per_epoch = 1;
  // two instances sharing a color: four views, identical pairs
  DatasetSplit two = train_->split.subset({0, 1});
  const int color = [&] {
    for (int c = 0; c < 8; ++c)
      if (two.records[0].labels[c] == kPositive) return c;
    return 0;
  }();
  two.records[1].labels[color] = kPositive;
  const auto pre = pretrain_supcon<double>(cfg, two);

  cfg.model.num_classes = two.num_classes();
  AttributeModel<double> model(cfg.model, mix_seed(cfg.seed, 1), make_word_embeddings(cfg));
  ParamStore<double> hp;
  ContrastiveHead<double> head(hp, model.feature_channels(), cfg.supcon_hidden, cfg.supcon_dim, two.num_classes());
  Rng hr(mix_seed(cfg.seed, 2));
  head.init(hp, hr);
  std::vector<std::vector<double>> z;
  std::vector<std::vector<Label>> y;
  for (std::size_t v = 0; v < 4; ++v) {
    const auto& rec = two.records[v / 2];
    const auto in = preprocess_instance(rec, *two.images, *two.vocab, false, 0, cfg.preprocess);
    const Vec<double> zz = head.project(hp, spatial_mean(model.composed_features(model.params(), in, nullptr)), nullptr);
    z.emplace_back(zz.data(), zz.data() + zz.size());
    y.push_back(rec.labels);
  }
  const auto& A = hp[head.probe_id()];
  const std::vector<double> probes(A.data(), A.data() + A.size());
  const double expected = scone::testing::reference_supcon_multilabel(z, y, probes, cfg.supcon_dim, cfg.loss.temperature);
  EXPECT_GT(expected, 0.0);
  EXPECT_NEAR(pre.epoch_loss[0], expected, 1e-9 * std::max(1.0, expected));
}

TEST(Search, ProductRanking) {
  EvalTable t(3, 2);
  t.scores = {0.9, 0.5, 0.6, 0.9, 0.8, 0.8};
  const auto hits = rank_by_query(t, {0, 1}, {"a", "b", "c"}, 2);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].instance_id, "c");
  EXPECT_NEAR(hits[0].score, 0.64, 1e-12);
  EXPECT_EQ(hits[1].instance_id, "b");
  EXPECT_NEAR(hits[1].score, 0.54, 1e-12);
}

TEST(Evaluation, PerfectOracleScores) {
  SyntheticConfig sc;
  sc.n_instances = 100;
  const auto syn = generate_synthetic(sc);
  EvalTable t(static_cast<int>(syn.split.size()), syn.vocab->size());
  for (int i = 0; i < t.rows; ++i)
    for (int c = 0; c < t.classes; ++c) {
      t.label(i, c) = syn.split.records[i].labels[c];
      t.score(i, c) = syn.ground_truth[i][c] == kPositive ? 0.9 : 0.1;
    }
  const auto groups = group_classes(compute_stats(syn.split), *syn.vocab);
  const auto rep = evaluate_table(t, &groups);
  EXPECT_DOUBLE_EQ(rep.mAP, 1.0);
  EXPECT_DOUBLE_EQ(rep.mA, 1.0);
  EXPECT_TRUE(rep.group_mAP.count("color"));
}
