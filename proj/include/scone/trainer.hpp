#ifndef SCONE_TRAINER_HPP_
#define SCONE_TRAINER_HPP_

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scone/checkpoint.hpp"
#include "scone/config.hpp"
#include "scone/dataset.hpp"
#include "scone/losses.hpp"
#include "scone/metrics.hpp"
#include "scone/model.hpp"
#include "scone/preprocess.hpp"
#include "scone/sampling.hpp"
#include "scone/taxonomy.hpp"

namespace scone {

enum class LossKind { Bce, SoftmaxCe };

/**
 * @brief Everything a run needs besides the data. Round-trips through
 * KeyValueConfig so it can be echoed into checkpoints and reports.
 */
struct RunConfig {
  std::string mode = "train";  // train | pretrain_supcon | eval
  ModelConfig model;
  LossHyper loss;
  PreprocessConfig preprocess;

  std::string sampler = "rfs";         // none | rfs | cas
  std::string reweighting = "rw_bce";  // none | rw_bce | if | cb
  std::string loss_kind = "bce";       // bce | softmax_ce
  bool negative_expansion = true;
  bool rel_loss = true;
  bool div_loss = true;
  bool joint_supcon = false;
  bool augment = true;

  int epochs = 12;
  int batch_size = 64;
  double lr_backbone = 1e-5;
  double lr_head = 7e-4;
  double weight_decay = 1e-5;
  double lr_decay = 0.1;
  int plateau_patience = 2;
  int max_steps_per_epoch = 0;  // 0 = full epoch

  int pretrain_epochs = 10;
  int pretrain_batch = 384;  // instances; each contributes two views
  int supcon_hidden = 2048;
  int supcon_dim = 128;

  double rfs_threshold = 0.0006;
  double cb_beta = 0.999;

  int eval_k = 15;
  double eval_threshold = 0.5;
  long long head_min = 500;
  long long tail_max = 50;

  std::uint64_t seed = 0;
  std::string word_vectors;
  std::string init_checkpoint;
  std::string out_dir;

  LossKind resolved_loss_kind() const {
    if (loss_kind == "bce") return LossKind::Bce;
    if (loss_kind == "softmax_ce") return LossKind::SoftmaxCe;
    throw InvalidConfig("unknown loss_kind " + loss_kind);
  }

  void validate() const {
    auto one_of = [](const std::string& v, std::initializer_list<const char*> opts, const char* key) {
      for (const char* o : opts)
        if (v == o) return;
      throw InvalidConfig(std::string("bad value for ") + key + ": " + v);
    };
    one_of(mode, {"train", "pretrain_supcon", "eval"}, "mode");
    one_of(sampler, {"none", "rfs", "cas"}, "sampler");
    one_of(reweighting, {"none", "rw_bce", "if", "cb"}, "reweighting");
    resolved_loss_kind();
    if (epochs < 0 || pretrain_epochs < 0) throw InvalidConfig("epochs must be >= 0");
    if (batch_size < 1 || pretrain_batch < 1) throw InvalidConfig("batch size must be >= 1");
    if (joint_supcon && batch_size < 2) throw InvalidConfig("joint supcon needs batch_size >= 2");
    if (!(lr_backbone >= 0 && lr_head >= 0)) throw InvalidConfig("learning rates must be >= 0");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw InvalidConfig("lr_decay must be in (0, 1]");
    if (plateau_patience < 1) throw InvalidConfig("plateau_patience must be >= 1");
    if (model.input_size != preprocess.input_size) throw InvalidConfig("model and preprocess input sizes differ");
  }

  static RunConfig from_config(const KeyValueConfig& kv) {
    RunConfig c;
    c.mode = kv.get("mode", c.mode);
    c.model = ModelConfig::from_config(kv, c.model);
    c.loss = LossHyper::from_config(kv, c.loss);
    c.preprocess = PreprocessConfig::from_config(kv, c.preprocess);
    c.sampler = kv.get("sampler", c.sampler);
    c.reweighting = kv.get("reweighting", c.reweighting);
    c.loss_kind = kv.get("loss_kind", c.loss_kind);
    c.negative_expansion = kv.get("negative_expansion", c.negative_expansion);
    c.rel_loss = kv.get("rel_loss", c.rel_loss);
    c.div_loss = kv.get("div_loss", c.div_loss);
    c.joint_supcon = kv.get("joint_supcon", c.joint_supcon);
    c.augment = kv.get("augment", c.augment);
    c.epochs = kv.get("epochs", c.epochs);
    c.batch_size = kv.get("batch_size", c.batch_size);
    c.lr_backbone = kv.get("lr_backbone", c.lr_backbone);
    c.lr_head = kv.get("lr_head", c.lr_head);
    c.weight_decay = kv.get("weight_decay", c.weight_decay);
    c.lr_decay = kv.get("lr_decay", c.lr_decay);
    c.plateau_patience = kv.get("plateau_patience", c.plateau_patience);
    c.max_steps_per_epoch = kv.get("max_steps_per_epoch", c.max_steps_per_epoch);
    c.pretrain_epochs = kv.get("pretrain_epochs", c.pretrain_epochs);
    c.pretrain_batch = kv.get("pretrain_batch", c.pretrain_batch);
    c.supcon_hidden = kv.get("supcon_hidden", c.supcon_hidden);
    c.supcon_dim = kv.get("supcon_dim", c.supcon_dim);
    c.rfs_threshold = kv.get("rfs_threshold", c.rfs_threshold);
    c.cb_beta = kv.get("cb_beta", c.cb_beta);
    c.eval_k = kv.get("eval_k", c.eval_k);
    c.eval_threshold = kv.get("eval_threshold", c.eval_threshold);
    c.head_min = kv.get("head_min", c.head_min);
    c.tail_max = kv.get("tail_max", c.tail_max);
    c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<long long>(c.seed)));
    c.word_vectors = kv.get("word_vectors", c.word_vectors);
    c.init_checkpoint = kv.get("init_checkpoint", c.init_checkpoint);
    c.out_dir = kv.get("out_dir", c.out_dir);
    c.validate();
    return c;
  }

  KeyValueConfig to_config() const {
    KeyValueConfig kv;
    auto num = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
    auto list = [](const std::array<int, 4>& a) {
      return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," +
             std::to_string(a[3]);
    };
    kv.set("mode", mode);
    kv.set("backbone", model.backbone.kind == BackboneKind::Toy ? "toy" : "resnet50");
    kv.set("toy_channels", list(model.backbone.toy_channels));
    kv.set("toy_strides", list(model.backbone.toy_strides));
    kv.set("model_mode", std::string(to_string(model.mode)));
    kv.set("input_size", std::to_string(model.input_size));
    kv.set("embed_dim", std::to_string(model.embed_dim));
    kv.set("gate_hidden", std::to_string(model.gate_hidden));
    kv.set("attention_maps", std::to_string(model.heads));
    kv.set("proj_dim", std::to_string(model.proj_dim));
    kv.set("head_hidden", std::to_string(model.head_hidden));
    kv.set("alpha", num(loss.alpha));
    kv.set("lambda_rel", num(loss.lambda_rel));
    kv.set("lambda_div", num(loss.lambda_div));
    kv.set("lambda_sup", num(loss.lambda_sup));
    kv.set("temperature", num(loss.temperature));
    kv.set("missing_weight", num(loss.missing_weight));
    kv.set("box_context", num(preprocess.context));
    kv.set("aug.crop_jitter", num(preprocess.crop_jitter));
    kv.set("aug.scale_jitter", num(preprocess.scale_jitter));
    kv.set("aug.flip_prob", num(preprocess.flip_prob));
    kv.set("aug.color_jitter", num(preprocess.color_jitter));
    kv.set("aug.grayscale_prob", num(preprocess.grayscale_prob));
    kv.set("sampler", sampler);
    kv.set("reweighting", reweighting);
    kv.set("loss_kind", loss_kind);
    kv.set("negative_expansion", flag(negative_expansion));
    kv.set("rel_loss", flag(rel_loss));
    kv.set("div_loss", flag(div_loss));
    kv.set("joint_supcon", flag(joint_supcon));
    kv.set("augment", flag(augment));
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("lr_backbone", num(lr_backbone));
    kv.set("lr_head", num(lr_head));
    kv.set("weight_decay", num(weight_decay));
    kv.set("lr_decay", num(lr_decay));
    kv.set("plateau_patience", std::to_string(plateau_patience));
    kv.set("max_steps_per_epoch", std::to_string(max_steps_per_epoch));
    kv.set("pretrain_epochs", std::to_string(pretrain_epochs));
    kv.set("pretrain_batch", std::to_string(pretrain_batch));
    kv.set("supcon_hidden", std::to_string(supcon_hidden));
    kv.set("supcon_dim", std::to_string(supcon_dim));
    kv.set("rfs_threshold", num(rfs_threshold));
    kv.set("cb_beta", num(cb_beta));
    kv.set("eval_k", std::to_string(eval_k));
    kv.set("eval_threshold", num(eval_threshold));
    kv.set("head_min", std::to_string(head_min));
    kv.set("tail_max", std::to_string(tail_max));
    kv.set("seed", std::to_string(seed));
    kv.set("word_vectors", word_vectors);
    kv.set("init_checkpoint", init_checkpoint);
    kv.set("out_dir", out_dir);
    return kv;
  }

  nlohmann::json to_json() const { return nlohmann::json(to_config().entries()); }

  static RunConfig from_json(const nlohmann::json& j) {
    KeyValueConfig kv;
    for (const auto& [k, v] : j.items()) kv.set(k, v.get<std::string>());
    return from_config(kv);
  }
};

inline LossWeights make_loss_weights(const RunConfig& cfg, const DatasetStats& stats) {
  const int C = stats.num_classes();
  if (cfg.reweighting == "rw_bce") return compute_class_weights(stats, cfg.loss.alpha, cfg.loss.missing_weight);
  LossWeights lw = LossWeights::uniform(C, cfg.loss.missing_weight);
  if (cfg.reweighting == "if") {
    lw.w = inverse_frequency_weights(stats, cfg.loss.alpha);
    lw.alpha = cfg.loss.alpha;
  } else if (cfg.reweighting == "cb") {
    lw.w = class_balanced_weights(stats, cfg.cb_beta);
  }
  return lw;
}

struct LossSwitches {
  LossKind kind = LossKind::Bce;
  bool rel = true;
  bool div = true;
  double lambda_rel = 0.25;
  double lambda_div = 0.004;

  static LossSwitches from(const RunConfig& c) {
    return {c.resolved_loss_kind(), c.rel_loss, c.div_loss, c.loss.lambda_rel, c.loss.lambda_div};
  }
};

template <typename T>
struct InstanceLoss {
  LossComponents parts;
  double total = 0.0;  // bce + rel + lambda_div * div
  OutputGrads<T> grads;
};

/// Loss terms of one forward pass and their gradients w.r.t. the model outputs.
template <typename T>
InstanceLoss<T> instance_loss(const ModelOutput<T>& out, const ModelInput& in, const LossWeights& lw,
                              const LossSwitches& sw, std::uint64_t ce_seed = 0) {
  InstanceLoss<T> r;
  if (sw.kind == LossKind::Bce) {
    auto bce = rw_bce_from_logits(out.logits, in.labels, lw);
    r.parts.bce = static_cast<double>(bce.loss);
    r.grads.d_logits = std::move(bce.grad);
  } else {
    std::vector<int> pos;
    for (std::size_t c = 0; c < in.labels.size(); ++c)
      if (in.labels[c] == kPositive) pos.push_back(static_cast<int>(c));
    r.grads.d_logits = Vec<T>::Zero(out.logits.size());
    if (!pos.empty()) {
      Rng rng(ce_seed);
      const int target = pos[static_cast<std::size_t>(rng.below(pos.size()))];
      const T mx = out.logits.maxCoeff();
      const Vec<T> e = (out.logits.array() - mx).exp().matrix();
      const T z = e.sum();
      r.parts.bce = static_cast<double>(mx + std::log(z) - out.logits[target]);
      r.grads.d_logits = e / z;
      r.grads.d_logits[target] -= T(1);
    }
  }
  if (sw.rel && out.G && in.mask) {
    const Tensor<T> mask = in.mask->template cast<T>();
    auto rel = rel_loss(*out.G, mask, sw.lambda_rel);
    r.parts.rel = static_cast<double>(rel.loss);
    r.grads.d_G = Tensor<T>(1, out.G->height(), out.G->width());
    r.grads.d_G.flat() = rel.grad;
  }
  if (sw.div && out.E_maps.size() > 1) {
    auto [d, grads] = div_loss(out.E_maps);
    r.parts.div = static_cast<double>(d);
    for (auto& gm : grads) gm.flat() *= static_cast<T>(sw.lambda_div);
    r.grads.d_E = std::move(grads);
  }
  r.total = total_loss(r.parts, sw.lambda_div, 0.0, false);
  return r;
}

template <typename T>
void scale_grads(OutputGrads<T>& g, T s) {
  if (g.d_logits.size()) g.d_logits *= s;
  if (!g.d_G.empty()) g.d_G.flat() *= s;
  for (auto& e : g.d_E) e.flat() *= s;
  if (g.d_x_pooled.size()) g.d_x_pooled *= s;
}

/// Max |sum - 1| over the localizer map and every attention map of one output.
template <typename T>
double attention_mass_error(const ModelOutput<T>& out) {
  double err = 0.0;
  if (out.G) err = std::max(err, std::abs(static_cast<double>(out.G->sum()) - 1.0));
  for (const auto& a : out.A_maps) err = std::max(err, std::abs(static_cast<double>(a.sum()) - 1.0));
  return err;
}

struct EpochLog {
  int epoch = 0;
  long steps = 0;
  long samples = 0;
  LossComponents mean;  // per-sample means
  double total = 0.0;
  double val_mAP = 0.0;
  double lr_backbone = 0.0, lr_head = 0.0;
  bool improved = false;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},         {"steps", steps},         {"samples", samples},
            {"loss_total", total},    {"loss_bce", mean.bce},   {"loss_rel", mean.rel},
            {"loss_div", mean.div},   {"loss_sup", mean.sup},   {"val_mAP", val_mAP},
            {"lr_backbone", lr_backbone}, {"lr_head", lr_head}, {"improved", improved}};
  }
};

/// Shared metadata written into every checkpoint.
inline nlohmann::json checkpoint_metadata(const RunConfig& cfg, const AttributeVocabulary& vocab,
                                          const DatasetStats& train_stats) {
  nlohmann::json types = nlohmann::json::array();
  for (auto t : vocab.types()) types.push_back(std::string(to_string(t)));
  return {{"config", cfg.to_json()},
          {"vocabulary", {{"names", vocab.names()}, {"types", types}}},
          {"train_n_pos", train_stats.n_pos},
          {"train_n_instances", train_stats.n_instances}};
}

inline AttributeVocabulary vocabulary_from_metadata(const nlohmann::json& meta) {
  try {
    const auto& v = meta.at("vocabulary");
    std::vector<AttributeType> types;
    for (const auto& t : v.at("types")) {
      const auto parsed = parse_attribute_type(t.get<std::string>());
      if (!parsed) throw CheckpointError("bad attribute type in checkpoint");
      types.push_back(*parsed);
    }
    return AttributeVocabulary(v.at("names").get<std::vector<std::string>>(), std::move(types));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata lacks a vocabulary: ") + e.what());
  }
}

inline std::shared_ptr<const WordEmbeddings> make_word_embeddings(const RunConfig& cfg) {
  if (cfg.word_vectors.empty()) return std::make_shared<WordEmbeddings>(cfg.model.embed_dim);
  return std::make_shared<WordEmbeddings>(WordEmbeddings::load_text(cfg.word_vectors, cfg.model.embed_dim));
}

/// Deterministic, unaugmented inputs for evaluation.
inline std::vector<ModelInput> prepare_inputs(const DatasetSplit& split, const PreprocessConfig& pre) {
  std::vector<ModelInput> out;
  out.reserve(split.size());
  for (const auto& r : split.records) out.push_back(preprocess_instance(r, *split.images, *split.vocab, false, 0, pre));
  return out;
}

/// Scores every instance. Softmax-CE models are scored with the softmax over classes.
template <typename T>
EvalTable predict_table(const AttributeModel<T>& model, const ParamStore<T>& p, const DatasetSplit& split,
                        const std::vector<ModelInput>& inputs, LossKind kind = LossKind::Bce) {
  EvalTable table(static_cast<int>(split.size()), split.num_classes());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto out = model.forward(p, inputs[i]);
    Vec<T> s = out.scores;
    if (kind == LossKind::SoftmaxCe) {
      const Vec<T> e = (out.logits.array() - out.logits.maxCoeff()).exp().matrix();
      s = e / e.sum();
    }
    for (int c = 0; c < table.classes; ++c) {
      table.score(static_cast<int>(i), c) = static_cast<double>(s[c]);
      table.label(static_cast<int>(i), c) = split.records[i].labels[c];
    }
    table.instance_ids[i] = split.records[i].instance_id;
  }
  return table;
}

template <typename T>
struct TrainResult {
  RunConfig config;
  std::unique_ptr<AttributeModel<T>> model;  // holds the best-validation parameters
  std::vector<EpochLog> log;
  double best_val_mAP = -1.0;
  int best_epoch = -1;
  std::string checkpoint_bytes;
  double attention_mass_error = 0.0;
  double seconds = 0.0;
  ExpansionReport expansion;
  DatasetStats train_stats;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(const RunConfig& cfg, const DatasetSplit& split, const DatasetStats& stats,
                                            int epoch) {
  const std::uint64_t s = mix_seed(cfg.seed, 0x5a3c1e, static_cast<std::uint64_t>(epoch));
  if (cfg.sampler == "rfs") return compute_repeat_factors(stats, split, cfg.rfs_threshold, s).epoch_indices;
  if (cfg.sampler == "cas") {
    ClassAwareSampler sampler(split, s);
    std::vector<std::size_t> out;
    for (const auto& d : sampler.next_batch(split.size())) out.push_back(d.index);
    return out;
  }
  std::vector<std::size_t> order(split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(s);
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

inline void append_log_line(const std::string& path, const nlohmann::json& j) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  out << j.dump() << '\n';
}

inline std::string diverged_message(const std::vector<std::size_t>& batch, int epoch, long step) {
  std::ostringstream ss;
  ss << "non-finite loss at epoch " << epoch << " step " << step << "; batch indices:";
  for (auto i : batch) ss << ' ' << i;
  return ss.str();
}

}  // namespace detail

/**
 * Strong Baseline training. Negative expansion (when enabled) is applied
 * before statistics so the class weights and RFS frequencies see expanded
 * counts. Validation mAP drives plateau decay and best-checkpoint selection.
 */
template <typename T = float>
TrainResult<T> train(const RunConfig& cfg_in, const DatasetSplit& train_split, const DatasetSplit& val_split,
                     const RelationGraph* graph = nullptr) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  if (train_split.empty()) throw EmptySplit("training split is empty");
  if (val_split.empty()) throw EmptySplit("validation split is empty");
  const auto& vocab = *train_split.vocab;
  if (!(vocab == *val_split.vocab)) throw VocabMismatch("train and validation vocabularies differ");
  cfg.model.num_classes = vocab.size();
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult<T> res;
  DatasetSplit data = train_split;
  if (cfg.negative_expansion) {
    const RelationGraph empty(vocab.size());
    auto [expanded, report] = expand_dataset(train_split, vocab, graph ? *graph : empty);
    data = std::move(expanded);
    res.expansion = std::move(report);
  }
  const DatasetStats stats = compute_stats(data);
  res.train_stats = stats;
  const LossWeights lw = make_loss_weights(cfg, stats);
  const LossSwitches sw = LossSwitches::from(cfg);

  res.model = std::make_unique<AttributeModel<T>>(cfg.model, mix_seed(cfg.seed, 1), make_word_embeddings(cfg));
  auto& model = *res.model;
  auto& params = model.params();
  if (!cfg.init_checkpoint.empty()) apply_checkpoint(params, load_checkpoint(cfg.init_checkpoint), true);

  ParamStore<T> head_params;
  std::optional<ContrastiveHead<T>> sup_head;
  if (cfg.joint_supcon) {
    sup_head.emplace(head_params, model.feature_channels(), cfg.supcon_hidden, cfg.supcon_dim, vocab.size());
    Rng hr(mix_seed(cfg.seed, 2));
    sup_head->init(head_params, hr);
  }
  ParamStore<T> grads = params.zeros_like();
  ParamStore<T> head_grads = head_params.zeros_like();
  Adam<T> opt(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  Adam<T> head_opt(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});

  const std::vector<ModelInput> val_inputs = prepare_inputs(val_split, cfg.preprocess);
  const nlohmann::json meta_base = checkpoint_metadata(cfg, vocab, stats);
  std::string log_path;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log_path = cfg.out_dir + "/train_log.jsonl";
    std::ofstream(log_path, std::ios::trunc);
  }

  double lr_scale = 1.0;
  int bad_epochs = 0;
  ParamStore<T> best = params;
  long global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(cfg, data, stats, epoch);
    EpochLog el;
    el.epoch = epoch;
    el.lr_backbone = cfg.lr_backbone * lr_scale;
    el.lr_head = cfg.lr_head * lr_scale;
    const auto lr = [&](ParamGroup g) { return g == ParamGroup::Backbone ? el.lr_backbone : el.lr_head; };
    // joint mode: each batch is batch_size/2 instances seen twice under different augmentations
    const std::size_t per_batch = cfg.joint_supcon ? static_cast<std::size_t>(cfg.batch_size / 2)
                                                   : static_cast<std::size_t>(cfg.batch_size);
    double sum_total = 0;
    LossComponents sum;
    for (std::size_t start = 0; start < order.size(); start += per_batch) {
      if (cfg.max_steps_per_epoch > 0 && el.steps >= cfg.max_steps_per_epoch) break;
      const std::size_t end = std::min(order.size(), start + per_batch);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      const int views = cfg.joint_supcon ? 2 : 1;
      const std::size_t B = batch.size() * views;
      const T inv_b = T(1) / static_cast<T>(B);
      grads.set_zero();
      double batch_total = 0;
      LossComponents batch_parts;

      auto make_input = [&](std::size_t k, int view) {
        const std::uint64_t s = mix_seed(cfg.seed, 0xa11, static_cast<std::uint64_t>(global_step), k,
                                         static_cast<std::uint64_t>(view));
        return preprocess_instance(data.records[batch[k]], *data.images, vocab, cfg.augment, s, cfg.preprocess);
      };
      auto accumulate = [&](const ModelOutput<T>& out, const InstanceLoss<T>& il) {
        res.attention_mass_error = std::max(res.attention_mass_error, attention_mass_error(out));
        batch_total += il.total;
        batch_parts.bce += il.parts.bce;
        batch_parts.rel += il.parts.rel;
        batch_parts.div += il.parts.div;
      };

      if (!cfg.joint_supcon) {
        for (std::size_t k = 0; k < batch.size(); ++k) {
          const ModelInput in = make_input(k, 0);
          ForwardCache<T> cache;
          const auto out = model.forward(params, in, &cache);
          auto il = instance_loss(out, in, lw, sw, mix_seed(cfg.seed, 0xce, global_step, k));
          accumulate(out, il);
          scale_grads(il.grads, inv_b);
          model.backward(params, cache, il.grads, grads);
        }
      } else {
        head_grads.set_zero();
        std::vector<ForwardCache<T>> caches(B);
        std::vector<InstanceLoss<T>> losses(B);
        std::vector<Vec<T>> z(B);
        std::vector<LabelVector> labels(B);
        std::vector<typename ContrastiveHead<T>::Cache> hc(B);
        for (std::size_t v = 0; v < B; ++v) {
          const ModelInput in = make_input(v / 2, static_cast<int>(v % 2));
          const auto out = model.forward(params, in, &caches[v]);
          losses[v] = instance_loss(out, in, lw, sw, mix_seed(cfg.seed, 0xce, global_step, v));
          accumulate(out, losses[v]);
          z[v] = sup_head->project(head_params, out.x_pooled, &hc[v]);
          labels[v] = in.labels;
        }
        auto sup = supcon_multilabel(z, labels, sup_head->probes(head_params), cfg.loss.temperature);
        // normalized per view so the term is on the scale of the batch-mean BCE
        const T sup_scale = static_cast<T>(cfg.loss.lambda_sup) * inv_b;
        batch_parts.sup = static_cast<double>(sup.loss);
        batch_total += cfg.loss.lambda_sup * static_cast<double>(sup.loss);
        auto& dA = head_grads[sup_head->probe_id()];
        for (std::size_t k = 0; k < sup.d_probes.size(); ++k) dA[static_cast<Eigen::Index>(k)] += sup.d_probes[k] * sup_scale;
        for (std::size_t v = 0; v < B; ++v) {
          scale_grads(losses[v].grads, inv_b);
          losses[v].grads.d_x_pooled = sup_head->backward(head_params, hc[v], sup.d_z[v] * sup_scale, head_grads);
          model.backward(params, caches[v], losses[v].grads, grads);
        }
      }

      const double batch_mean = batch_total / static_cast<double>(B);
      if (!std::isfinite(batch_mean) || !grads.all_finite())
        throw TrainingDiverged(detail::diverged_message(batch, epoch, global_step));
      opt.step(params, grads, lr);
      if (cfg.joint_supcon) head_opt.step(head_params, head_grads, lr);
      sum_total += batch_total;
      sum.bce += batch_parts.bce;
      sum.rel += batch_parts.rel;
      sum.div += batch_parts.div;
      sum.sup += batch_parts.sup;
      el.samples += static_cast<long>(B);
      ++el.steps;
      ++global_step;
    }
    const double n = std::max<long>(el.samples, 1);
    el.total = sum_total / n;
    el.mean = {sum.bce / n, sum.rel / n, sum.div / n, sum.sup / n};

    const EvalTable table = predict_table(model, params, val_split, val_inputs, sw.kind);
    el.val_mAP = mean_average_precision(table).mAP;
    if (el.val_mAP > res.best_val_mAP) {
      res.best_val_mAP = el.val_mAP;
      res.best_epoch = epoch;
      best = params;
      bad_epochs = 0;
      el.improved = true;
    } else if (++bad_epochs >= cfg.plateau_patience) {
      lr_scale *= cfg.lr_decay;
      bad_epochs = 0;
    }
    res.log.push_back(el);
    detail::append_log_line(log_path, el.to_json());
  }

  params = best;
  nlohmann::json meta = meta_base;
  meta["best_epoch"] = res.best_epoch;
  meta["best_val_mAP"] = res.best_val_mAP;
  res.checkpoint_bytes = serialize_checkpoint(params, meta);
  if (!cfg.out_dir.empty()) {
    std::ofstream out(cfg.out_dir + "/checkpoint.bin", std::ios::binary | std::ios::trunc);
    out.write(res.checkpoint_bytes.data(), static_cast<std::streamsize>(res.checkpoint_bytes.size()));
  }
  res.config = cfg;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean contrastive-loss sum per batch
  long zero_loss_batches = 0;
  long batches = 0;
  std::string checkpoint_bytes;
};

/**
 * SupCon pretraining on Proj(mean-pool(X)). Only backbone and gate arrays are
 * saved; the projection MLP and the probe matrices are discarded.
 */
template <typename T = float>
PretrainResult pretrain_supcon(const RunConfig& cfg_in, const DatasetSplit& split) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  if (split.empty()) throw EmptySplit("pretraining split is empty");
  const auto& vocab = *split.vocab;
  cfg.model.num_classes = vocab.size();
  AttributeModel<T> model(cfg.model, mix_seed(cfg.seed, 1), make_word_embeddings(cfg));
  auto& params = model.params();
  ParamStore<T> hp;
  ContrastiveHead<T> head(hp, model.feature_channels(), cfg.supcon_hidden, cfg.supcon_dim, vocab.size());
  {
    Rng hr(mix_seed(cfg.seed, 2));
    head.init(hp, hr);
  }
  ParamStore<T> g = params.zeros_like(), hg = hp.zeros_like();
  Adam<T> opt(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay}), hopt(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto lr = [&](ParamGroup grp) { return grp == ParamGroup::Backbone ? cfg.lr_backbone : cfg.lr_head; };
  PretrainResult res;
  long step = 0;
  long zero_streak = 0;
  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order(split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, 0x9e7, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
    double sum = 0;
    long nb = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.pretrain_batch)) {
      if (cfg.max_steps_per_epoch > 0 && nb >= cfg.max_steps_per_epoch) break;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.pretrain_batch));
      const std::size_t B = 2 * (end - start);
      std::vector<ForwardCache<T>> caches(B);
      std::vector<typename ContrastiveHead<T>::Cache> hc(B);
      std::vector<Vec<T>> z(B);
      std::vector<LabelVector> labels(B);
      for (std::size_t v = 0; v < B; ++v) {
        const auto& rec = split.records[order[start + v / 2]];
        const auto in = preprocess_instance(rec, *split.images, vocab, cfg.augment,
                                            mix_seed(cfg.seed, 0x5c, static_cast<std::uint64_t>(step), v), cfg.preprocess);
        const Tensor<T> X = model.composed_features(params, in, &caches[v]);
        z[v] = head.project(hp, spatial_mean(X), &hc[v]);
        labels[v] = rec.labels;
      }
      auto sup = supcon_multilabel(z, labels, head.probes(hp), cfg.loss.temperature);
      if (!std::isfinite(static_cast<double>(sup.loss))) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
        throw TrainingDiverged(detail::diverged_message(idx, epoch, step));
      }
      if (sup.contributing_terms == 0) {
        ++res.zero_loss_batches;
        if (++zero_streak == 10) warn("10 consecutive pretraining batches had no shared positives");
      } else {
        zero_streak = 0;
      }
      g.set_zero();
      hg.set_zero();
      auto& dA = hg[head.probe_id()];
      for (std::size_t k = 0; k < sup.d_probes.size(); ++k) dA[static_cast<Eigen::Index>(k)] += sup.d_probes[k];
      for (std::size_t v = 0; v < B; ++v) {
        const Vec<T> dpool = head.backward(hp, hc[v], sup.d_z[v], hg);
        const Tensor<T>& X = caches[v].X;
        Tensor<T> dX(X.channels(), X.height(), X.width());
        dX.matrix().colwise() += dpool / static_cast<T>(X.spatial());
        model.backward_composed(params, caches[v], dX, {}, g);
      }
      opt.step(params, g, lr);
      hopt.step(hp, hg, lr);
      sum += static_cast<double>(sup.loss);
      ++nb;
      ++step;
      ++res.batches;
    }
    res.epoch_loss.push_back(nb ? sum / nb : 0.0);
  }
  const DatasetStats stats = compute_stats(split);
  nlohmann::json meta = checkpoint_metadata(cfg, vocab, stats);
  meta["pretrained"] = "supcon";
  res.checkpoint_bytes = serialize_checkpoint(params, meta, [](const ParamSpec& s) {
    return s.group == ParamGroup::Backbone || s.name.rfind("gate.", 0) == 0;
  });
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/pretrain.bin", std::ios::binary | std::ios::trunc);
    out.write(res.checkpoint_bytes.data(), static_cast<std::streamsize>(res.checkpoint_bytes.size()));
  }
  return res;
}

/// Rebuilds the model recorded in a checkpoint.
template <typename T = float>
std::unique_ptr<AttributeModel<T>> model_from_checkpoint(const Checkpoint& ck, RunConfig* cfg_out = nullptr) {
  if (!ck.metadata.contains("config")) throw CheckpointError("checkpoint has no config");
  RunConfig cfg = RunConfig::from_json(ck.metadata.at("config"));
  cfg.model.num_classes = vocabulary_from_metadata(ck.metadata).size();
  auto model = std::make_unique<AttributeModel<T>>(cfg.model, 0, make_word_embeddings(cfg));
  apply_checkpoint(model->params(), ck);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

inline void check_vocabulary(const Checkpoint& ck, const AttributeVocabulary& vocab) {
  if (!(vocabulary_from_metadata(ck.metadata) == vocab))
    throw VocabMismatch("checkpoint vocabulary differs from the split's vocabulary");
}

/// Groups by training-positive counts recorded in the checkpoint (split counts as fallback).
inline ClassGroups groups_for(const Checkpoint& ck, const DatasetSplit& split, const RunConfig& cfg) {
  DatasetStats s;
  if (ck.metadata.contains("train_n_pos")) {
    s.n_pos = ck.metadata.at("train_n_pos").get<std::vector<std::int64_t>>();
  } else {
    s = compute_stats(split);
  }
  return group_classes(s, *split.vocab, cfg.head_min, cfg.tail_max);
}

struct EvaluationResult {
  MetricReport report;
  EvalTable table;
  nlohmann::json config;
};

template <typename T = float>
EvaluationResult evaluate(const Checkpoint& ck, const DatasetSplit& split, int K = 15) {
  check_vocabulary(ck, *split.vocab);
  RunConfig cfg;
  auto model = model_from_checkpoint<T>(ck, &cfg);
  const auto inputs = prepare_inputs(split, cfg.preprocess);
  EvaluationResult r;
  r.table = predict_table(*model, model->params(), split, inputs, cfg.resolved_loss_kind());
  const ClassGroups groups = groups_for(ck, split, cfg);
  r.report = evaluate_table(r.table, &groups, K, cfg.eval_threshold);
  r.config = ck.metadata.at("config");
  return r;
}

inline nlohmann::json evaluation_to_json(const EvaluationResult& r, const AttributeVocabulary& vocab) {
  nlohmann::json j = report_to_json(r.report, &vocab);
  j["run_config"] = r.config;
  return j;
}

struct SearchHit {
  std::size_t index = 0;
  std::string instance_id;
  double score = 0.0;
};

/// Ranks by the product of the queried scores; ties by ascending row.
inline std::vector<SearchHit> rank_by_query(const EvalTable& table, const std::vector<int>& query,
                                            const std::vector<std::string>& ids, std::size_t top_n) {
  std::vector<SearchHit> hits;
  for (int i = 0; i < table.rows; ++i) {
    double s = 1.0;
    for (int c : query) s *= table.score(i, c);
    hits.push_back({static_cast<std::size_t>(i), ids.empty() ? std::to_string(i) : ids[i], s});
  }
  std::stable_sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) { return a.score > b.score; });
  if (hits.size() > top_n) hits.resize(top_n);
  return hits;
}

template <typename T = float>
std::vector<SearchHit> search_rank(const Checkpoint& ck, const DatasetSplit& split,
                                   const std::vector<std::string>& query, std::size_t top_n) {
  std::vector<int> q;
  for (const auto& name : query) q.push_back(split.vocab->index_of(name));
  check_vocabulary(ck, *split.vocab);
  RunConfig cfg;
  auto model = model_from_checkpoint<T>(ck, &cfg);
  const auto table = predict_table(*model, model->params(), split, prepare_inputs(split, cfg.preprocess));
  std::vector<std::string> ids;
  for (const auto& r : split.records) ids.push_back(r.instance_id);
  return rank_by_query(table, q, ids, top_n);
}

/// Tiles the (context-expanded) crops of the hits into one image, `tile` px per cell.
inline Image contact_sheet(const DatasetSplit& split, const std::vector<SearchHit>& hits, int tile = 64,
                           int columns = 5) {
  const int n = static_cast<int>(hits.size());
  const int rows = std::max(1, (n + columns - 1) / columns);
  Image sheet(columns * tile, rows * tile);
  for (int k = 0; k < n; ++k) {
    const auto& rec = split.records[hits[k].index];
    const auto img = split.images->load(rec.image_ref);
    const BBox b = expand_and_clamp_box(rec.bbox, img->width, img->height, 0.3);
    const int ox = (k % columns) * tile, oy = (k / columns) * tile;
    for (int y = 0; y < tile; ++y)
      for (int x = 0; x < tile; ++x) {
        const int sx = std::clamp(static_cast<int>(b.x + (x + 0.5) * b.w / tile), 0, img->width - 1);
        const int sy = std::clamp(static_cast<int>(b.y + (y + 0.5) * b.h / tile), 0, img->height - 1);
        std::copy_n(img->px(sx, sy), 3, sheet.px(ox + x, oy + y));
      }
  }
  return sheet;
}

}  // namespace scone

#endif  // SCONE_TRAINER_HPP_
