#ifndef SCONE_TAXONOMY_HPP_
#define SCONE_TAXONOMY_HPP_

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "scone/dataset.hpp"
#include "scone/error.hpp"
#include "scone/vocabulary.hpp"

namespace scone {

enum class RelationSource { SynsetShare, SynonymEdge, AntonymEdge, Cooccurrence, Manual };

inline std::string_view to_string(RelationSource s) {
  switch (s) {
    case RelationSource::SynsetShare: return "synset-share";
    case RelationSource::SynonymEdge: return "synonym-edge";
    case RelationSource::AntonymEdge: return "antonym-edge";
    case RelationSource::Cooccurrence: return "cooccurrence";
    case RelationSource::Manual: return "manual";
  }
  return "manual";
}

enum class EdgeLabel { Synonym, SimilarTo, DerivedFrom, Antonym, DistinctFrom, IsATarget };

inline std::optional<EdgeLabel> parse_edge_label(std::string_view s) {
  if (s == "Synonym") return EdgeLabel::Synonym;
  if (s == "SimilarTo") return EdgeLabel::SimilarTo;
  if (s == "DerivedFrom") return EdgeLabel::DerivedFrom;
  if (s == "Antonym") return EdgeLabel::Antonym;
  if (s == "DistinctFrom") return EdgeLabel::DistinctFrom;
  if (s == "IsA-target" || s == "IsA") return EdgeLabel::IsATarget;
  return std::nullopt;
}

/// Canonical unordered pair of distinct class ids (first < second).
using AttributePair = std::pair<int, int>;

inline AttributePair canonical_pair(int a, int b) { return a < b ? AttributePair{a, b} : AttributePair{b, a}; }

/**
 * @brief Symmetric overlap / exclusive relations between attributes.
 *
 * Pairs are stored canonically and never intersect; an attribute is never
 * related to itself.
 */
class RelationGraph {
 public:
  explicit RelationGraph(int num_classes = 0) : n_(num_classes) {}

  int num_classes() const { return n_; }

  bool overlap(int a, int b) const { return a != b && overlap_.count(canonical_pair(a, b)) != 0; }
  bool exclusive(int a, int b) const { return a != b && exclusive_.count(canonical_pair(a, b)) != 0; }

  /// Adds an overlap pair; removes it from the exclusive set if present.
  void add_overlap(int a, int b, RelationSource src) {
    if (a == b) return;
    const auto p = canonical_pair(a, b);
    exclusive_.erase(p);
    overlap_.insert(p);
    provenance_[p].insert(src);
  }

  /// Adds an exclusive pair unless the pair already overlaps.
  void add_exclusive(int a, int b, RelationSource src) {
    if (a == b) return;
    const auto p = canonical_pair(a, b);
    if (overlap_.count(p)) return;
    exclusive_.insert(p);
    provenance_[p].insert(src);
  }

  const std::set<AttributePair>& overlap_pairs() const { return overlap_; }
  const std::set<AttributePair>& exclusive_pairs() const { return exclusive_; }

  std::set<RelationSource> provenance(int a, int b) const {
    auto it = provenance_.find(canonical_pair(a, b));
    return it == provenance_.end() ? std::set<RelationSource>{} : it->second;
  }

 private:
  int n_;
  std::set<AttributePair> overlap_;
  std::set<AttributePair> exclusive_;
  std::map<AttributePair, std::set<RelationSource>> provenance_;
};

struct TypedEdge {
  std::string a, b;
  EdgeLabel label;
};

struct CooccurrenceCount {
  std::string a, b;
  std::int64_t joint = 0;
  std::int64_t marginal_a = 0;
  std::int64_t marginal_b = 0;
};

struct RelationSourceRecords {
  std::map<std::string, std::set<std::string>> synset_membership;
  std::vector<std::pair<std::string, std::string>> antonym_pairs;
  std::vector<TypedEdge> typed_edges;
  std::vector<CooccurrenceCount> cooccurrence;
  std::vector<std::pair<std::string, std::string>> manual_overlap;
  std::vector<std::pair<std::string, std::string>> manual_exclusive;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, '\t')) out.push_back(field);
  return out;
}

template <typename Fn>
void for_each_record(const std::string& path, std::size_t min_fields, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open relation file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto f = split_tabs(line);
    if (f.size() < min_fields)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(min_fields) + " tab-separated fields");
    fn(f, lineno);
  }
}

}  // namespace detail

/// `attribute<TAB>synset_id` lines.
inline void load_synsets(const std::string& path, RelationSourceRecords& rec) {
  detail::for_each_record(path, 2, [&](const auto& f, int) { rec.synset_membership[f[0]].insert(f[1]); });
}

/// `a<TAB>b<TAB>edge_label` lines.
inline void load_edges(const std::string& path, RelationSourceRecords& rec) {
  detail::for_each_record(path, 3, [&](const auto& f, int lineno) {
    auto label = parse_edge_label(f[2]);
    if (!label) throw ParseError(path + ":" + std::to_string(lineno) + ": unknown edge label " + f[2]);
    rec.typed_edges.push_back({f[0], f[1], *label});
  });
}

/// `a<TAB>b` antonym lines.
inline void load_antonyms(const std::string& path, RelationSourceRecords& rec) {
  detail::for_each_record(path, 2, [&](const auto& f, int) { rec.antonym_pairs.emplace_back(f[0], f[1]); });
}

/// `a<TAB>b<TAB>joint<TAB>marginal_a<TAB>marginal_b` lines.
inline void load_cooccurrence(const std::string& path, RelationSourceRecords& rec) {
  detail::for_each_record(path, 5, [&](const auto& f, int lineno) {
    CooccurrenceCount c{f[0], f[1], std::stoll(f[2]), std::stoll(f[3]), std::stoll(f[4])};
    if (c.joint < 0 || c.marginal_a < 0 || c.marginal_b < 0)
      throw ParseError(path + ":" + std::to_string(lineno) + ": negative count");
    rec.cooccurrence.push_back(std::move(c));
  });
}

/// Joint and marginal positive counts for every pair that co-occurs in the split.
inline std::vector<CooccurrenceCount> count_cooccurrence(const DatasetSplit& split) {
  const int n = split.num_classes();
  std::vector<std::int64_t> marginal(n, 0);
  std::map<AttributePair, std::int64_t> joint;
  std::vector<int> pos;
  for (const auto& r : split.records) {
    pos.clear();
    for (int c = 0; c < n; ++c)
      if (r.labels[c] == kPositive) pos.push_back(c);
    for (int c : pos) ++marginal[c];
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = i + 1; j < pos.size(); ++j) ++joint[{pos[i], pos[j]}];
  }
  std::vector<CooccurrenceCount> out;
  for (const auto& [p, count] : joint)
    out.push_back({split.vocab->name(p.first), split.vocab->name(p.second), count, marginal[p.first],
                   marginal[p.second]});
  return out;
}

/**
 * Builds overlap/exclusive relations. Overlap: shared synset, Synonym /
 * SimilarTo / DerivedFrom edges, or max(P(a|b), P(b|a)) >= cooccur_threshold.
 * Exclusive: antonyms and Antonym / DistinctFrom edges. A pair claimed by
 * both sides ends up in overlap only.
 */
inline RelationGraph build_relations(const AttributeVocabulary& vocab, const RelationSourceRecords& src,
                                     double cooccur_threshold) {
  if (!(cooccur_threshold >= 0.0 && cooccur_threshold <= 1.0))
    throw InvalidConfig("co-occurrence threshold must be in [0, 1]");
  RelationGraph g(vocab.size());
  std::vector<std::tuple<int, int, RelationSource>> exclusive;

  std::map<std::string, std::vector<int>> by_synset;
  for (const auto& [attr, synsets] : src.synset_membership) {
    const int id = vocab.index_of(attr);
    for (const auto& s : synsets) by_synset[s].push_back(id);
  }
  for (const auto& [s, members] : by_synset)
    for (std::size_t i = 0; i < members.size(); ++i)
      for (std::size_t j = i + 1; j < members.size(); ++j)
        g.add_overlap(members[i], members[j], RelationSource::SynsetShare);

  for (const auto& e : src.typed_edges) {
    const int a = vocab.index_of(e.a), b = vocab.index_of(e.b);
    switch (e.label) {
      case EdgeLabel::Synonym:
      case EdgeLabel::SimilarTo:
      case EdgeLabel::DerivedFrom:
        g.add_overlap(a, b, RelationSource::SynonymEdge);
        break;
      case EdgeLabel::Antonym:
      case EdgeLabel::DistinctFrom:
        exclusive.emplace_back(a, b, RelationSource::AntonymEdge);
        break;
      case EdgeLabel::IsATarget:
        break;  // type derivation only
    }
  }

  for (const auto& [a, b] : src.antonym_pairs)
    exclusive.emplace_back(vocab.index_of(a), vocab.index_of(b), RelationSource::AntonymEdge);

  for (const auto& c : src.cooccurrence) {
    const int a = vocab.index_of(c.a), b = vocab.index_of(c.b);
    double p = 0.0;
    if (c.marginal_b > 0) p = std::max(p, static_cast<double>(c.joint) / c.marginal_b);
    if (c.marginal_a > 0) p = std::max(p, static_cast<double>(c.joint) / c.marginal_a);
    if ((c.marginal_a > 0 || c.marginal_b > 0) && p >= cooccur_threshold)
      g.add_overlap(a, b, RelationSource::Cooccurrence);
  }

  for (const auto& [a, b] : src.manual_overlap)
    g.add_overlap(vocab.index_of(a), vocab.index_of(b), RelationSource::Manual);
  for (const auto& [a, b] : src.manual_exclusive)
    exclusive.emplace_back(vocab.index_of(a), vocab.index_of(b), RelationSource::Manual);

  for (const auto& [a, b, s] : exclusive) g.add_exclusive(a, b, s);
  return g;
}

struct ExpansionConflict {
  std::size_t instance = 0;
  int positive = 0;  // attribute that triggered the rule
  int blocked = 0;   // explicit positive the rule would have negated
};

/**
 * Infers negatives from positives: for every positive a, each same-type a'
 * that does not overlap a, and each a' exclusive with a (any type), becomes
 * negative. Only missing entries change; explicit labels are never touched.
 */
inline LabelVector expand_negatives(const LabelVector& labels, const AttributeVocabulary& vocab,
                                    const RelationGraph& graph, std::vector<ExpansionConflict>* conflicts = nullptr,
                                    std::size_t instance = 0) {
  const int n = vocab.size();
  check_shape(static_cast<int>(labels.size()) == n, "label vector length differs from vocabulary size");
  LabelVector out = labels;
  for (int a = 0; a < n; ++a) {
    if (labels[a] != kPositive) continue;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      const bool negate = (vocab.type(a) == vocab.type(b) && !graph.overlap(a, b)) || graph.exclusive(a, b);
      if (!negate) continue;
      if (labels[b] == kMissing) {
        out[b] = kNegative;
      } else if (labels[b] == kPositive && conflicts != nullptr) {
        conflicts->push_back({instance, a, b});
      }
    }
  }
  return out;
}

struct ExpansionReport {
  std::vector<std::int64_t> added_per_class;
  std::int64_t total_added = 0;
  std::vector<ExpansionConflict> conflicts;

  std::size_t conflict_count() const { return conflicts.size(); }
};

inline std::pair<DatasetSplit, ExpansionReport> expand_dataset(const DatasetSplit& split,
                                                               const AttributeVocabulary& vocab,
                                                               const RelationGraph& graph) {
  DatasetSplit out{{}, split.vocab, split.images};
  out.records.reserve(split.size());
  ExpansionReport report;
  report.added_per_class.assign(vocab.size(), 0);
  for (std::size_t i = 0; i < split.size(); ++i) {
    InstanceRecord r = split.records[i];
    LabelVector expanded = expand_negatives(r.labels, vocab, graph, &report.conflicts, i);
    for (int c = 0; c < vocab.size(); ++c) {
      if (expanded[c] != r.labels[c]) {
        ++report.added_per_class[c];
        ++report.total_added;
      }
    }
    r.labels = std::move(expanded);
    out.records.push_back(std::move(r));
  }
  return {std::move(out), std::move(report)};
}

inline nlohmann::json expansion_report_to_json(const ExpansionReport& rep, const AttributeVocabulary& vocab) {
  nlohmann::json j;
  j["total_added"] = rep.total_added;
  j["conflicts"] = rep.conflict_count();
  nlohmann::json per = nlohmann::json::object();
  for (int c = 0; c < vocab.size(); ++c) per[vocab.name(c)] = rep.added_per_class[c];
  j["added_per_class"] = std::move(per);
  nlohmann::json log = nlohmann::json::array();
  for (const auto& c : rep.conflicts)
    log.push_back({{"instance", c.instance}, {"positive", vocab.name(c.positive)}, {"blocked", vocab.name(c.blocked)}});
  j["conflict_log"] = std::move(log);
  return j;
}

inline void write_expansion_report_text(std::ostream& out, const ExpansionReport& rep,
                                        const AttributeVocabulary& vocab) {
  out << "total_added=" << rep.total_added << '\n';
  out << "conflicts=" << rep.conflict_count() << '\n';
  for (int c = 0; c < vocab.size(); ++c) out << "added." << vocab.name(c) << '=' << rep.added_per_class[c] << '\n';
}

}  // namespace scone

#endif  // SCONE_TAXONOMY_HPP_
