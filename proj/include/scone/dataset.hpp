#ifndef SCONE_DATASET_HPP_
#define SCONE_DATASET_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "scone/error.hpp"
#include "scone/image.hpp"
#include "scone/vocabulary.hpp"

namespace scone {

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BBox&) const = default;
};

using Point = std::array<double, 2>;
using Polygon = std::vector<Point>;

struct InstanceRecord {
  std::string image_id;
  std::string instance_id;
  std::string image_ref;
  BBox bbox;
  std::vector<Polygon> polygons;  // empty when no mask is available
  std::string object_phrase;
  LabelVector labels;

  bool has_mask() const { return !polygons.empty(); }
};

struct DatasetSplit {
  std::vector<InstanceRecord> records;
  std::shared_ptr<const AttributeVocabulary> vocab;
  std::shared_ptr<const ImageStore> images = std::make_shared<ImageStore>();

  int num_classes() const { return vocab ? vocab->size() : 0; }
  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  void validate() const {
    const int c = num_classes();
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (static_cast<int>(records[i].labels.size()) != c)
        throw ShapeError("record " + std::to_string(i) + " has " +
                         std::to_string(records[i].labels.size()) +
                         " labels, vocabulary has " + std::to_string(c));
    }
  }

  /// Split sharing this one's vocabulary and images, holding the chosen rows.
  DatasetSplit subset(const std::vector<std::size_t>& rows) const {
    DatasetSplit out{{}, vocab, images};
    out.records.reserve(rows.size());
    for (std::size_t r : rows) out.records.push_back(records.at(r));
    return out;
  }
};

struct DatasetStats {
  std::int64_t n_instances = 0;
  std::vector<std::int64_t> n_pos;
  std::vector<std::int64_t> n_neg;
  std::vector<double> image_freq;
  double density = 0.0;

  int num_classes() const { return static_cast<int>(n_pos.size()); }
};

inline DatasetStats compute_stats(const DatasetSplit& split) {
  if (split.empty()) throw EmptySplit("cannot compute statistics of an empty split");
  const int c = split.num_classes();
  DatasetStats s;
  s.n_instances = static_cast<std::int64_t>(split.size());
  s.n_pos.assign(c, 0);
  s.n_neg.assign(c, 0);
  std::int64_t annotated = 0;
  for (const auto& r : split.records) {
    for (int k = 0; k < c; ++k) {
      if (r.labels[k] == kPositive) ++s.n_pos[k];
      else if (r.labels[k] == kNegative) ++s.n_neg[k];
    }
  }
  s.image_freq.resize(c);
  for (int k = 0; k < c; ++k) {
    annotated += s.n_pos[k] + s.n_neg[k];
    s.image_freq[k] = static_cast<double>(s.n_pos[k]) / s.n_instances;
  }
  s.density = static_cast<double>(annotated) / s.n_instances;
  return s;
}

struct IngestResult {
  DatasetSplit split;
  std::size_t dropped_attributes = 0;  // attribute names outside the vocabulary
  std::size_t conflicting_labels = 0;  // listed both positive and negative
};

namespace detail {

inline std::string json_id(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number()) return v.dump();
  throw ParseError("id must be a string or number");
}

inline void ingest_entry(const nlohmann::json& e, const std::string& image_root,
                         const AttributeVocabulary& vocab, IngestResult& out) {
  InstanceRecord r;
  r.image_id = json_id(e.at("image_id"));
  r.instance_id = e.contains("instance_id") ? json_id(e.at("instance_id")) : r.image_id;
  const auto& bb = e.at("instance_bbox");
  if (!bb.is_array() || bb.size() != 4) throw ParseError("instance_bbox must have 4 numbers");
  r.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
  if (!(r.bbox.w > 0 && r.bbox.h > 0)) throw ParseError("bbox width/height must be positive");
  if (e.contains("instance_polygon") && e.at("instance_polygon").is_array()) {
    for (const auto& poly : e.at("instance_polygon")) {
      Polygon p;
      for (const auto& pt : poly) p.push_back({pt.at(0).get<double>(), pt.at(1).get<double>()});
      if (p.size() >= 3) r.polygons.push_back(std::move(p));
    }
  }
  r.object_phrase = e.at("object_name").get<std::string>();
  if (e.contains("image_ref")) {
    r.image_ref = e.at("image_ref").get<std::string>();
  } else {
    r.image_ref = (std::filesystem::path(image_root) / r.image_id).string();
  }
  r.labels.assign(vocab.size(), kMissing);
  auto mark = [&](const char* key, Label value) {
    if (!e.contains(key)) return;
    for (const auto& a : e.at(key)) {
      auto id = vocab.find(a.get<std::string>());
      if (!id) {
        ++out.dropped_attributes;
        continue;
      }
      if (r.labels[*id] == kPositive && value == kNegative) {
        ++out.conflicting_labels;
        continue;
      }
      r.labels[*id] = value;
    }
  };
  mark("positive_attributes", kPositive);
  mark("negative_attributes", kNegative);
  out.split.records.push_back(std::move(r));
}

}  // namespace detail

/// Appends the entries of one annotation document (a JSON array) to `out`.
inline void ingest_vaw_document(const nlohmann::json& doc, const std::string& image_root,
                                const AttributeVocabulary& vocab, IngestResult& out,
                                const std::string& source = "<memory>") {
  if (!doc.is_array()) throw ParseError(source + ": annotation file must be a JSON array");
  for (std::size_t i = 0; i < doc.size(); ++i) {
    try {
      detail::ingest_entry(doc[i], image_root, vocab, out);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(source + ": entry " + std::to_string(i) + ": " + ex.what());
    } catch (const ParseError& ex) {
      throw ParseError(source + ": entry " + std::to_string(i) + ": " + ex.what());
    }
  }
}

/// Reads VAW-format annotation files. Images are resolved lazily at access time.
inline IngestResult ingest_vaw(const std::vector<std::string>& annotation_files,
                               const std::string& image_root,
                               std::shared_ptr<const AttributeVocabulary> vocab) {
  IngestResult out;
  out.split.vocab = vocab;
  for (const auto& path : annotation_files) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open annotation file " + path);
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(path + ": " + ex.what());
    }
    ingest_vaw_document(doc, image_root, *vocab, out, path);
  }
  if (out.dropped_attributes > 0)
    warn("ingest dropped " + std::to_string(out.dropped_attributes) +
         " attribute mentions outside the vocabulary");
  return out;
}

/**
 * Vocabulary from the public distribution's attribute_index.json ({name: id})
 * and attribute_types.json ({type: [names]}). Ids must be dense. "state" folds
 * into other; names absent from the type file are typed other.
 */
inline AttributeVocabulary load_vaw_vocabulary(const std::string& index_path, const std::string& types_path) {
  auto read = [](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path);
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(path + ": " + ex.what());
    }
  };
  const nlohmann::json index = read(index_path), types = read(types_path);
  if (!index.is_object() || !types.is_object()) throw ParseError("VAW vocabulary files must hold JSON objects");
  std::vector<std::string> names(index.size());
  for (const auto& [name, id] : index.items()) {
    if (!id.is_number_integer()) throw ParseError(index_path + ": non-integer id for '" + name + "'");
    const auto k = id.get<long long>();
    if (k < 0 || k >= static_cast<long long>(names.size()) || !names[k].empty())
      throw ParseError(index_path + ": ids are not dense at '" + name + "'");
    names[k] = name;
  }
  std::unordered_map<std::string, AttributeType> type_of;
  for (const auto& [tag, members] : types.items()) {
    auto t = tag == "state" ? std::optional<AttributeType>(AttributeType::Other) : parse_attribute_type(tag);
    if (!t) throw InvalidType(types_path + ": unknown type '" + tag + "'");
    for (const auto& m : members) type_of.emplace(m.get<std::string>(), *t);
  }
  std::vector<AttributeType> tags;
  int untyped = 0;
  for (const auto& n : names) {
    auto it = type_of.find(n);
    if (it == type_of.end()) ++untyped;
    tags.push_back(it == type_of.end() ? AttributeType::Other : it->second);
  }
  if (untyped > 0) warn(std::to_string(untyped) + " attributes have no type entry; typed other");
  return AttributeVocabulary(std::move(names), std::move(tags));
}

/// Serializes a split in the annotation schema that ingest_vaw reads.
inline nlohmann::json to_vaw_json(const DatasetSplit& split, bool include_image_ref = false) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : split.records) {
    nlohmann::json e;
    e["image_id"] = r.image_id;
    e["instance_id"] = r.instance_id;
    e["instance_bbox"] = {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h};
    if (r.polygons.empty()) {
      e["instance_polygon"] = nullptr;
    } else {
      nlohmann::json polys = nlohmann::json::array();
      for (const auto& p : r.polygons) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& pt : p) pts.push_back({pt[0], pt[1]});
        polys.push_back(std::move(pts));
      }
      e["instance_polygon"] = std::move(polys);
    }
    e["object_name"] = r.object_phrase;
    nlohmann::json pos = nlohmann::json::array(), neg = nlohmann::json::array();
    for (int c = 0; c < split.num_classes(); ++c) {
      if (r.labels[c] == kPositive) pos.push_back(split.vocab->name(c));
      else if (r.labels[c] == kNegative) neg.push_back(split.vocab->name(c));
    }
    e["positive_attributes"] = std::move(pos);
    e["negative_attributes"] = std::move(neg);
    if (include_image_ref) e["image_ref"] = r.image_ref;
    doc.push_back(std::move(e));
  }
  return doc;
}

inline nlohmann::json stats_to_json(const DatasetStats& s, const AttributeVocabulary& vocab) {
  nlohmann::json j;
  j["n_instances"] = s.n_instances;
  j["density"] = s.density;
  nlohmann::json classes = nlohmann::json::array();
  for (int c = 0; c < s.num_classes(); ++c) {
    classes.push_back({{"attribute", vocab.name(c)},
                       {"type", std::string(to_string(vocab.type(c)))},
                       {"n_pos", s.n_pos[c]},
                       {"n_neg", s.n_neg[c]},
                       {"image_freq", s.image_freq[c]}});
  }
  j["classes"] = std::move(classes);
  return j;
}

inline void write_stats_text(std::ostream& out, const DatasetStats& s,
                             const AttributeVocabulary& vocab) {
  out << "instances\t" << s.n_instances << '\n';
  out << "density\t" << s.density << '\n';
  out << "attribute\ttype\tn_pos\tn_neg\timage_freq\n";
  for (int c = 0; c < s.num_classes(); ++c) {
    out << vocab.name(c) << '\t' << to_string(vocab.type(c)) << '\t' << s.n_pos[c] << '\t'
        << s.n_neg[c] << '\t' << s.image_freq[c] << '\n';
  }
}

}  // namespace scone

#endif  // SCONE_DATASET_HPP_
