// scone: command-line front end. Every subcommand reads a key=value config
// (--config) plus --set overrides; data locations are config keys resolved
// against $SCONE_DATA_ROOT when relative.
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "scone/scone.hpp"

using namespace scone;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("-c,--config", a.config, "key=value config file");
  cmd->add_option("-s,--set", a.overrides, "override, KEY=VALUE (repeatable)");
}

KeyValueConfig load_config(const CommonArgs& a) {
  KeyValueConfig kv = a.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(a.config);
  for (const auto& o : a.overrides)
    if (!kv.set_assignment(o)) throw InvalidConfig("expected KEY=VALUE, got '" + o + "'");
  return kv;
}

std::string resolve(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  const char* root = std::getenv("SCONE_DATA_ROOT");
  return root ? (fs::path(root) / path).string() : path;
}

std::vector<std::string> resolve_all(const std::vector<std::string>& paths) {
  std::vector<std::string> out;
  for (const auto& p : paths) out.push_back(resolve(p));
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

// Data sources ------------------------------------------------------------

// dataset=synthetic regenerates splits from synth.* keys; the validation and
// test splits use seeds synth.seed+1 and synth.seed+2.
SyntheticConfig synthetic_for(const KeyValueConfig& kv, const std::string& split) {
  SyntheticConfig sc = SyntheticConfig::from_config(kv, "synth.");
  if (split == "val") {
    sc.seed += 1;
    sc.n_instances = kv.get("synth.val_instances", 1000);
  } else if (split == "test") {
    sc.seed += 2;
    sc.n_instances = kv.get("synth.test_instances", 1000);
  }
  return sc;
}

std::shared_ptr<const AttributeVocabulary> configured_vocabulary(const KeyValueConfig& kv) {
  const std::string tsv = kv.get("vocabulary", std::string());
  if (!tsv.empty()) return std::make_shared<const AttributeVocabulary>(load_vocabulary(resolve(tsv)));
  const std::string index = kv.get("vaw_attribute_index", std::string());
  if (!index.empty())
    return std::make_shared<const AttributeVocabulary>(
        load_vaw_vocabulary(resolve(index), resolve(kv.get("vaw_attribute_types", std::string()))));
  throw InvalidConfig("set vocabulary=<tsv> or vaw_attribute_index/vaw_attribute_types (or dataset=synthetic)");
}

/// Loads `split` (train | val | test). A vocabulary taken from a checkpoint wins over the config.
DatasetSplit load_split(const KeyValueConfig& kv, const std::string& split,
                        std::shared_ptr<const AttributeVocabulary> vocab = nullptr) {
  if (kv.get("dataset", std::string("vaw")) == "synthetic") {
    auto data = generate_synthetic(synthetic_for(kv, split));
    if (vocab && !(*vocab == *data.vocab)) throw VocabMismatch("checkpoint vocabulary differs from synthetic menu");
    return std::move(data.split);
  }
  if (!vocab) vocab = configured_vocabulary(kv);
  const auto files = kv.get_list(split + "_files", {});
  if (files.empty()) throw InvalidConfig("no " + split + "_files configured");
  auto res = ingest_vaw(resolve_all(files), resolve(kv.get("image_root", std::string("images"))), vocab);
  if (res.conflicting_labels > 0)
    warn(std::to_string(res.conflicting_labels) + " labels listed both positive and negative; kept positive");
  return std::move(res.split);
}

RelationGraph configured_relations(const KeyValueConfig& kv, const DatasetSplit& train_split) {
  RelationSourceRecords src;
  if (auto p = kv.get("relations.synsets", std::string()); !p.empty()) load_synsets(resolve(p), src);
  if (auto p = kv.get("relations.edges", std::string()); !p.empty()) load_edges(resolve(p), src);
  if (auto p = kv.get("relations.antonyms", std::string()); !p.empty()) load_antonyms(resolve(p), src);
  if (auto p = kv.get("relations.cooccurrence", std::string()); !p.empty()) load_cooccurrence(resolve(p), src);
  // without a threshold, co-occurrence does not contribute
  double threshold = 1.0;
  if (kv.has("relations.cooccur_threshold")) {
    threshold = kv.get("relations.cooccur_threshold", 1.0);
    if (src.cooccurrence.empty()) src.cooccurrence = count_cooccurrence(train_split);
  } else {
    src.cooccurrence.clear();
  }
  return build_relations(*train_split.vocab, src, threshold);
}

Checkpoint load_ck(const std::string& path) { return load_checkpoint(path); }

std::shared_ptr<const AttributeVocabulary> checkpoint_vocabulary(const Checkpoint& ck) {
  return std::make_shared<const AttributeVocabulary>(vocabulary_from_metadata(ck.metadata));
}

// Plots ---------------------------------------------------------------------

std::string svg_open(int w, int h) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return s.str();
}

/// Per-epoch curves of every loss column plus validation mAP.
std::string loss_curve_svg(const std::vector<nlohmann::json>& log) {
  const int W = 640, H = 360, L = 60, R = 130, T = 20, B = 40;
  const std::vector<std::pair<std::string, std::string>> series = {
      {"loss_total", "black"}, {"loss_bce", "steelblue"}, {"loss_rel", "darkorange"},
      {"loss_div", "seagreen"}, {"loss_sup", "purple"},   {"val_mAP", "crimson"}};
  double ymax = 1e-12;
  for (const auto& e : log)
    for (const auto& [k, _] : series) ymax = std::max(ymax, e.value(k, 0.0));
  const double n = std::max<std::size_t>(log.size(), 2) - 1;
  auto X = [&](std::size_t i) { return L + (W - L - R) * static_cast<double>(i) / n; };
  auto Y = [&](double v) { return T + (H - T - B) * (1.0 - v / ymax); };
  std::ostringstream s;
  s << svg_open(W, H);
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\">" << ymax << "</text>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << H - B << "\" text-anchor=\"end\">0</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">epoch</text>\n";
  for (std::size_t i = 0; i < log.size(); ++i)
    s << "<text x=\"" << X(i) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\">"
      << log[i].value("epoch", static_cast<int>(i + 1)) << "</text>\n";
  int row = 0;
  for (const auto& [key, color] : series) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < log.size(); ++i) s << X(i) << "," << Y(log[i].value(key, 0.0)) << " ";
    s << "\"/>\n";
    const int ly = T + 14 * row++;
    s << "<rect x=\"" << W - R + 10 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>";
    s << "<text x=\"" << W - R + 26 << "\" y=\"" << ly + 9 << "\">" << key << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string group_bars_svg(const std::map<std::string, double>& groups) {
  const int bar = 36, gap = 18, L = 50, T = 20, H = 300, B = 40;
  const int W = L + static_cast<int>(groups.size()) * (bar + gap) + gap;
  std::ostringstream s;
  s << svg_open(W, H);
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\">1.0</text>\n";
  int k = 0;
  for (const auto& [name, v] : groups) {
    const double h = (H - T - B) * std::clamp(v, 0.0, 1.0);
    const double x = L + gap + k++ * (bar + gap);
    s << "<rect x=\"" << x << "\" y=\"" << H - B - h << "\" width=\"" << bar << "\" height=\"" << h
      << "\" fill=\"steelblue\"/>\n";
    s << "<text x=\"" << x + bar / 2.0 << "\" y=\"" << H - B - h - 4 << "\" text-anchor=\"middle\">"
      << std::round(v * 1000) / 10 << "</text>\n";
    s << "<text x=\"" << x + bar / 2.0 << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\">" << name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Undoes input normalization and tints each pixel red by the map value.
Image attention_overlay(const ModelInput& in, const Tensor<float>& map, const PreprocessConfig& pre, int scale) {
  const int S = in.image.height();
  Image out(S * scale, S * scale);
  float peak = 1e-12f;
  for (float v : map.values()) peak = std::max(peak, v);
  for (int y = 0; y < S * scale; ++y)
    for (int x = 0; x < S * scale; ++x) {
      const int sx = x / scale, sy = y / scale;
      const float a = map.at(0, sy * map.height() / S, sx * map.width() / S) / peak;
      for (int ch = 0; ch < 3; ++ch) {
        const float raw = std::clamp(in.image.at(ch, sy, sx) * pre.stddev[ch] + pre.mean[ch], 0.0f, 1.0f);
        const float tint = ch == 0 ? 1.0f : 0.0f;
        const float v = (1 - 0.6f * a) * raw + 0.6f * a * tint;
        out.px(x, y)[ch] = static_cast<std::uint8_t>(std::lround(255 * std::clamp(v, 0.0f, 1.0f)));
      }
    }
  return out;
}

void write_plots(const std::string& dir, const Checkpoint& ck, const EvaluationResult& ev, const DatasetSplit& split,
                 const std::string& log_path, int overlays) {
  fs::create_directories(dir);
  if (!log_path.empty() && fs::exists(log_path)) {
    std::vector<nlohmann::json> log;
    std::ifstream in(log_path);
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) log.push_back(nlohmann::json::parse(line));
    write_text(dir + "/loss_curve.svg", loss_curve_svg(log));
  } else {
    warn("no training log at '" + log_path + "'; skipping loss curve");
  }
  std::map<std::string, double> by_type;
  for (const auto& [g, v] : ev.report.group_mAP)
    if (g != "head" && g != "medium" && g != "tail") by_type[g] = v;
  write_text(dir + "/type_mAP.svg", group_bars_svg(by_type));
  write_text(dir + "/group_mAP.svg", group_bars_svg(ev.report.group_mAP));

  RunConfig cfg;
  auto model = model_from_checkpoint<float>(ck, &cfg);
  if (cfg.model.mode == ModelMode::ResNetBaseline) return;
  const int n = std::min<int>(overlays, static_cast<int>(split.size()));
  const int scale = std::max(1, 128 / cfg.preprocess.input_size);
  for (int i = 0; i < n; ++i) {
    const auto in = preprocess_instance(split.records[i], *split.images, *split.vocab, false, 0, cfg.preprocess);
    const auto out = model->forward(in);
    const std::string stem = dir + "/attention_" + std::to_string(i);
    write_ppm(stem + "_G.ppm", attention_overlay(in, *out.G, cfg.preprocess, scale));
    for (std::size_t m = 0; m < out.A_maps.size(); ++m)
      write_ppm(stem + "_A" + std::to_string(m) + ".ppm", attention_overlay(in, out.A_maps[m], cfg.preprocess, scale));
  }
}

// Subcommands ---------------------------------------------------------------

int cmd_synth(const KeyValueConfig& kv, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "images");
  std::shared_ptr<const AttributeVocabulary> vocab;
  for (const char* split : {"train", "val", "test"}) {
    const auto data = generate_synthetic(synthetic_for(kv, split));
    vocab = data.vocab;
    for (const auto& r : data.split.records)
      write_ppm((fs::path(out_dir) / "images" / (r.image_id + ".ppm")).string(), *data.split.images->load(r.image_ref));
    write_text((fs::path(out_dir) / (std::string(split) + ".json")).string(), to_vaw_json(data.split).dump() + "\n");
    std::cout << split << ": " << data.split.size() << " instances\n";
  }
  std::ostringstream v;
  write_vocabulary(v, *vocab);
  write_text((fs::path(out_dir) / "vocabulary.tsv").string(), v.str());
  std::cout << "wrote " << out_dir << " (vocabulary=vocabulary.tsv train_files=train.json image_root=images)\n";
  return 0;
}

int cmd_stats(const KeyValueConfig& kv, const std::string& split_name, bool json) {
  const auto split = load_split(kv, split_name);
  const auto stats = compute_stats(split);
  // density counts explicit labels only; the expanded figure is reported beside it
  const auto [expanded, rep] = expand_dataset(split, *split.vocab, configured_relations(kv, split));
  const auto estats = compute_stats(expanded);
  if (json) {
    auto j = stats_to_json(stats, *split.vocab);
    j["density_after_expansion"] = estats.density;
    j["expansion"] = expansion_report_to_json(rep, *split.vocab);
    std::cout << j.dump(2) << "\n";
  } else {
    write_stats_text(std::cout, stats, *split.vocab);
    std::cout << "density_after_expansion\t" << estats.density << "\n";
  }
  return 0;
}

int cmd_expand(const KeyValueConfig& kv, const std::string& out_path, const std::string& report_path) {
  const auto split = load_split(kv, "train");
  const auto [expanded, rep] = expand_dataset(split, *split.vocab, configured_relations(kv, split));
  write_text(out_path, to_vaw_json(expanded, false).dump() + "\n");
  if (!report_path.empty()) write_text(report_path, expansion_report_to_json(rep, *split.vocab).dump(2) + "\n");
  write_expansion_report_text(std::cout, rep, *split.vocab);
  return 0;
}

int cmd_train(const KeyValueConfig& kv) {
  const auto cfg = RunConfig::from_config(kv);
  const auto train_split = load_split(kv, "train");
  const auto val_split = load_split(kv, "val", train_split.vocab);
  const auto graph = configured_relations(kv, train_split);
  const auto res = train<float>(cfg, train_split, val_split, &graph);
  for (const auto& e : res.log) std::cout << e.to_json().dump() << "\n";
  std::cerr << "best epoch " << res.best_epoch << " val mAP " << res.best_val_mAP << " (" << res.seconds << " s)";
  if (!cfg.out_dir.empty()) std::cerr << ", checkpoint " << cfg.out_dir << "/checkpoint.bin";
  std::cerr << "\n";
  return 0;
}

int cmd_pretrain(const KeyValueConfig& kv) {
  const auto cfg = RunConfig::from_config(kv);
  const auto res = pretrain_supcon<float>(cfg, load_split(kv, "train"));
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
    std::cout << nlohmann::json{{"epoch", e + 1}, {"loss_sup", res.epoch_loss[e]}}.dump() << "\n";
  std::cerr << res.batches << " batches, " << res.zero_loss_batches << " without shared positives\n";
  return 0;
}

int cmd_eval(const KeyValueConfig& kv, const std::string& ck_path, const std::string& split_name,
             const std::string& out_path, const std::string& plots, std::string log_path, int overlays) {
  const auto ck = load_ck(ck_path);
  const auto split = load_split(kv, split_name, checkpoint_vocabulary(ck));
  const auto ev = evaluate<float>(ck, split, kv.get("eval_k", 15));
  const auto j = evaluation_to_json(ev, *split.vocab);
  if (out_path.empty()) {
    write_report_text(std::cout, ev.report);
  } else {
    write_text(out_path, j.dump(2) + "\n");
    write_report_text(std::cout, ev.report);
  }
  if (!plots.empty()) {
    if (log_path.empty()) log_path = (fs::path(ck_path).parent_path() / "train_log.jsonl").string();
    write_plots(plots, ck, ev, split, log_path, overlays);
  }
  return 0;
}

int cmd_search(const KeyValueConfig& kv, const std::string& ck_path, const std::string& split_name,
               const std::vector<std::string>& query, std::size_t top_n, const std::string& sheet) {
  const auto ck = load_ck(ck_path);
  const auto split = load_split(kv, split_name, checkpoint_vocabulary(ck));
  const auto hits = search_rank<float>(ck, split, query, top_n);
  for (std::size_t k = 0; k < hits.size(); ++k)
    std::cout << nlohmann::json{{"rank", k + 1}, {"instance_id", hits[k].instance_id}, {"score", hits[k].score}}.dump()
              << "\n";
  if (!sheet.empty()) write_ppm(sheet, contact_sheet(split, hits));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scone: partially labeled attribute recognition"};
  app.require_subcommand(1);

  CommonArgs a_train, a_pre, a_eval, a_expand, a_synth, a_search, a_stats;
  auto* train_cmd = app.add_subcommand("train", "train the strong baseline");
  add_common(train_cmd, a_train);
  auto* pre_cmd = app.add_subcommand("pretrain", "supervised contrastive pretraining");
  add_common(pre_cmd, a_pre);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, a_eval);
  std::string ck_path, split_name = "test", report_out, plots_dir, log_path;
  int overlays = 8;
  eval_cmd->add_option("--checkpoint", ck_path)->required();
  eval_cmd->add_option("--split", split_name, "train | val | test");
  eval_cmd->add_option("-o,--out", report_out, "report JSON path");
  eval_cmd->add_option("--plots", plots_dir, "directory for loss curve, mAP bars and attention overlays");
  eval_cmd->add_option("--log", log_path, "training log (default: train_log.jsonl beside the checkpoint)");
  eval_cmd->add_option("--overlays", overlays, "number of attention overlays");

  auto* expand_cmd = app.add_subcommand("expand", "apply negative label expansion to the training split");
  add_common(expand_cmd, a_expand);
  std::string expand_out, expand_report;
  expand_cmd->add_option("-o,--out", expand_out, "expanded annotation JSON")->required();
  expand_cmd->add_option("--report", expand_report, "expansion report JSON");

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset to disk");
  add_common(synth_cmd, a_synth);
  std::string synth_out;
  synth_cmd->add_option("-o,--out", synth_out, "output directory")->required();

  auto* search_cmd = app.add_subcommand("search", "rank instances by attribute query");
  add_common(search_cmd, a_search);
  std::string search_ck, search_split = "test", sheet;
  std::vector<std::string> query;
  std::size_t top_n = 10;
  search_cmd->add_option("--checkpoint", search_ck)->required();
  search_cmd->add_option("--split", search_split);
  search_cmd->add_option("-q,--query", query, "attribute names")->required()->delimiter(',');
  search_cmd->add_option("-n,--top", top_n);
  search_cmd->add_option("--sheet", sheet, "contact sheet PPM path");

  auto* stats_cmd = app.add_subcommand("stats", "label statistics of a split");
  add_common(stats_cmd, a_stats);
  std::string stats_split = "train";
  bool stats_json = false;
  stats_cmd->add_option("--split", stats_split);
  stats_cmd->add_flag("--json", stats_json);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(load_config(a_train));
    if (*pre_cmd) return cmd_pretrain(load_config(a_pre));
    if (*eval_cmd) return cmd_eval(load_config(a_eval), ck_path, split_name, report_out, plots_dir, log_path, overlays);
    if (*expand_cmd) return cmd_expand(load_config(a_expand), expand_out, expand_report);
    if (*synth_cmd) return cmd_synth(load_config(a_synth), synth_out);
    if (*search_cmd) return cmd_search(load_config(a_search), search_ck, search_split, query, top_n, sheet);
    if (*stats_cmd) return cmd_stats(load_config(a_stats), stats_split, stats_json);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
