#ifndef SCONE_VOCABULARY_HPP_
#define SCONE_VOCABULARY_HPP_

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "scone/error.hpp"

namespace scone {

/// Per-class annotation: 1 positive, 0 negative, -1 missing.
using Label = std::int8_t;
using LabelVector = std::vector<Label>;

inline constexpr Label kPositive = 1;
inline constexpr Label kNegative = 0;
inline constexpr Label kMissing = -1;

enum class AttributeType { Color, Material, Shape, Size, Texture, Action, Other };

inline constexpr std::array<AttributeType, 7> kAllAttributeTypes = {
    AttributeType::Color,   AttributeType::Material, AttributeType::Shape,
    AttributeType::Size,    AttributeType::Texture,  AttributeType::Action,
    AttributeType::Other};

inline std::string_view to_string(AttributeType t) {
  switch (t) {
    case AttributeType::Color: return "color";
    case AttributeType::Material: return "material";
    case AttributeType::Shape: return "shape";
    case AttributeType::Size: return "size";
    case AttributeType::Texture: return "texture";
    case AttributeType::Action: return "action";
    case AttributeType::Other: return "other";
  }
  return "other";
}

inline std::optional<AttributeType> parse_attribute_type(std::string_view s) {
  for (AttributeType t : kAllAttributeTypes)
    if (to_string(t) == s) return t;
  if (s == "others") return AttributeType::Other;
  return std::nullopt;
}

class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;

  AttributeVocabulary(std::vector<std::string> names,
                      std::vector<AttributeType> types) {
    if (names.size() != types.size())
      throw InvalidType("every attribute needs exactly one type tag");
    for (std::size_t i = 0; i < names.size(); ++i) add(names[i], types[i]);
  }

  int add(const std::string& name, AttributeType type) {
    if (name.empty()) throw ParseError("empty attribute name");
    if (index_.count(name) != 0) throw DuplicateAttribute(name);
    const int id = static_cast<int>(names_.size());
    names_.push_back(name);
    types_.push_back(type);
    index_.emplace(name, id);
    return id;
  }

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int c) const { return names_.at(c); }
  AttributeType type(int c) const { return types_.at(c); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<AttributeType>& types() const { return types_; }

  std::optional<int> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int index_of(std::string_view name) const {
    if (auto id = find(name)) return *id;
    throw UnknownAttribute(std::string(name));
  }

  bool operator==(const AttributeVocabulary& o) const {
    return names_ == o.names_ && types_ == o.types_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<AttributeType> types_;
  std::unordered_map<std::string, int> index_;
};

/// Parses `name<TAB>type` lines; blank lines and '#' comments are skipped.
inline AttributeVocabulary parse_vocabulary(std::istream& in) {
  AttributeVocabulary vocab;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw InvalidType("line " + std::to_string(lineno) + ": missing type tag");
    const std::string name = line.substr(0, tab);
    const std::string tag = line.substr(tab + 1);
    auto type = parse_attribute_type(tag);
    if (!type)
      throw InvalidType("line " + std::to_string(lineno) + ": unknown type '" +
                        tag + "'");
    vocab.add(name, *type);
  }
  return vocab;
}

inline AttributeVocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open vocabulary file " + path);
  return parse_vocabulary(in);
}

inline void write_vocabulary(std::ostream& out, const AttributeVocabulary& v) {
  for (int c = 0; c < v.size(); ++c)
    out << v.name(c) << '\t' << to_string(v.type(c)) << '\n';
}

}  // namespace scone

#endif  // SCONE_VOCABULARY_HPP_
