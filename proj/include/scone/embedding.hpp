#ifndef SCONE_EMBEDDING_HPP_
#define SCONE_EMBEDDING_HPP_

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "scone/error.hpp"
#include "scone/rng.hpp"

namespace scone {

/**
 * @brief Frozen word vectors for object phrases. Known tokens come from a
 * GloVe-style text table (`word v1 ... vd`); unknown tokens get a unit-scale
 * vector seeded by a hash of the token, so no external file is required.
 * A phrase embeds as the mean of its token vectors.
 */
class WordEmbeddings {
 public:
  explicit WordEmbeddings(int dim = 100) : dim_(dim) {
    if (dim < 1) throw InvalidConfig("embedding dimension must be >= 1");
  }

  static WordEmbeddings load_text(const std::string& path, int dim) {
    WordEmbeddings e(dim);
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open word vector file " + path);
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::string word;
      ss >> word;
      std::vector<double> v;
      double x;
      while (ss >> x) v.push_back(x);
      if (word.empty()) continue;
      if (static_cast<int>(v.size()) != dim)
        throw ParseError("vector for '" + word + "' has " + std::to_string(v.size()) + " values, expected " +
                         std::to_string(dim));
      e.table_[word] = std::move(v);
    }
    return e;
  }

  int dim() const { return dim_; }
  std::size_t known_tokens() const { return table_.size(); }

  std::vector<double> token(const std::string& word) const {
    auto it = table_.find(word);
    if (it != table_.end()) return it->second;
    Rng rng(fnv1a(word));
    std::vector<double> v(dim_);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim_));
    for (auto& x : v) x = rng.normal() * scale * 2.0;
    return v;
  }

  std::vector<double> phrase(const std::string& text) const {
    std::vector<double> sum(dim_, 0.0);
    int n = 0;
    std::string word;
    std::istringstream ss(text);
    while (ss >> word) {
      for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      const auto v = token(word);
      for (int i = 0; i < dim_; ++i) sum[i] += v[i];
      ++n;
    }
    if (n == 0) return token("<empty>");
    for (auto& x : sum) x /= n;
    return sum;
  }

 private:
  int dim_;
  std::unordered_map<std::string, std::vector<double>> table_;
};

}  // namespace scone

#endif  // SCONE_EMBEDDING_HPP_
