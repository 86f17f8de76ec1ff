#pragma once

// TF-IDF document vectors and a linear SVM trained with Pegasos-style
// stochastic sub-gradient descent on the hinge loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pvsent/corpus.hpp"
#include "pvsent/error.hpp"
#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

// Sorted by index, no duplicates.
struct SparseVector {
  std::vector<std::pair<std::uint32_t, double>> entries;

  double dot(const std::vector<double>& dense) const {
    double acc = 0.0;
    for (const auto& [i, v] : entries) acc += v * dense[i];
    return acc;
  }
  double norm() const {
    double acc = 0.0;
    for (const auto& e : entries) acc += e.second * e.second;
    return std::sqrt(acc);
  }
  bool operator==(const SparseVector&) const = default;
};

inline SparseVector add(const SparseVector& a, const SparseVector& b) {
  std::map<std::uint32_t, double> acc;
  for (const auto& [i, v] : a.entries) acc[i] += v;
  for (const auto& [i, v] : b.entries) acc[i] += v;
  SparseVector out;
  out.entries.assign(acc.begin(), acc.end());
  return out;
}

class TfidfVectorizer {
 public:
  TfidfVectorizer() = default;

  // idf(t) = ln(N / df(t)) over the tokens seen in `docs`, indexed in
  // lexicographic order.
  static TfidfVectorizer fit(const std::vector<Document>& docs) {
    if (docs.empty()) throw UsageError("fit_tfidf: empty corpus");
    std::map<std::string, std::uint64_t> df;
    for (const auto& d : docs) {
      std::vector<std::string> uniq = d.tokens;
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      for (auto& t : uniq) ++df[t];
    }
    TfidfVectorizer v;
    v.n_docs_ = docs.size();
    for (const auto& [token, count] : df) {
      v.index_.emplace(token, static_cast<std::uint32_t>(v.tokens_.size()));
      v.tokens_.push_back(token);
      v.idf_.push_back(std::log(static_cast<double>(v.n_docs_) / static_cast<double>(count)));
    }
    return v;
  }

  // Raw term counts times idf, L2-normalized. Unknown tokens are dropped; a
  // document with no known token (or only idf-0 tokens) maps to the zero vector.
  SparseVector transform(const std::vector<std::string>& tokens, bool normalize = true) const {
    std::map<std::uint32_t, double> counts;
    for (const auto& t : tokens) {
      const auto it = index_.find(t);
      if (it != index_.end()) counts[it->second] += 1.0;
    }
    SparseVector out;
    for (const auto& [i, tf] : counts) {
      const double w = tf * idf_[i];
      if (w != 0.0) out.entries.emplace_back(i, w);
    }
    if (normalize) {
      const double n = out.norm();
      if (n > 0.0) {
        for (auto& e : out.entries) e.second /= n;
      }
    }
    return out;
  }

  SparseVector transform(const Document& doc) const { return transform(doc.tokens); }

  std::size_t dim() const { return tokens_.size(); }
  std::size_t n_docs() const { return n_docs_; }
  std::uint32_t index(const std::string& token) const { return index_.at(token); }
  double idf(const std::string& token) const { return idf_.at(index_.at(token)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void write(BinaryWriter& w) const {
    w.u64(n_docs_);
    w.u64(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      w.str(tokens_[i]);
      w.f64(idf_[i]);
    }
  }

  static TfidfVectorizer read(BinaryReader& r) {
    TfidfVectorizer v;
    v.n_docs_ = r.u64();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      v.tokens_.push_back(r.str());
      v.idf_.push_back(r.f64());
      if (!v.index_.emplace(v.tokens_.back(), static_cast<std::uint32_t>(i)).second) {
        throw DataError("corrupt baseline model file (duplicate token)");
      }
    }
    return v;
  }

 private:
  std::size_t n_docs_ = 0;
  std::vector<std::string> tokens_;
  std::vector<double> idf_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct SvmConfig {
  double lambda = 1e-4;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;

  bool operator==(const SvmConfig&) const = default;
};

struct LinearSVM {
  std::vector<double> w;
  double b = 0.0;
  SvmConfig config;

  // w.x + b
  double margin(const SparseVector& x) const { return x.dot(w) + b; }
  bool operator==(const LinearSVM&) const = default;
};

// lambda/2 (|w|^2 + b^2) + mean hinge loss. The bias is treated as the weight
// of a constant unit feature and is regularized with the rest.
inline double svm_objective(const LinearSVM& m, const std::vector<SparseVector>& x, const std::vector<Label>& y) {
  double reg = m.b * m.b;
  for (double v : m.w) reg += v * v;
  double hinge = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double sign = y[i] == Label::kPositive ? 1.0 : -1.0;
    hinge += std::max(0.0, 1.0 - sign * m.margin(x[i]));
  }
  return 0.5 * m.config.lambda * reg + hinge / static_cast<double>(x.size());
}

// Pegasos: at step t pick a sample, eta = 1/(lambda t), shrink by (1 - eta lambda)
// and add eta y x when the sample violates the margin.
inline LinearSVM train_svm(const std::vector<SparseVector>& x, const std::vector<Label>& y, std::size_t dim,
                           const SvmConfig& cfg = {}) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("train_svm: need >= 2 samples with one label each");
  if (!(cfg.lambda > 0.0) || cfg.epochs == 0) throw UsageError("train_svm: lambda must be positive and epochs >= 1");
  const bool has_pos = std::find(y.begin(), y.end(), Label::kPositive) != y.end();
  const bool has_neg = std::find(y.begin(), y.end(), Label::kNegative) != y.end();
  if (!has_pos || !has_neg) throw DataError("train_svm: training data contains a single class");

  LinearSVM m;
  m.config = cfg;
  m.w.assign(dim, 0.0);
  // w is stored as scale * v so that the shrink step is O(1).
  std::vector<double>& v = m.w;
  double scale = 1.0;
  double b = 0.0;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::uint64_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      ++t;
      const double eta = 1.0 / (cfg.lambda * static_cast<double>(t));
      const double sign = y[i] == Label::kPositive ? 1.0 : -1.0;
      const double margin = scale * x[i].dot(v) + b;
      const double shrink = 1.0 - eta * cfg.lambda;
      if (shrink <= 0.0) {
        std::fill(v.begin(), v.end(), 0.0);
        scale = 1.0;
        b = 0.0;
      } else {
        scale *= shrink;
        b *= shrink;
      }
      if (sign * margin < 1.0) {
        for (const auto& [k, val] : x[i].entries) {
          if (k >= dim) throw UsageError("train_svm: feature index out of range");
          v[k] += eta * sign * val / scale;
        }
        b += eta * sign;
      }
      if (scale < 1e-9) {
        for (double& e : v) e *= scale;
        scale = 1.0;
      }
    }
  }
  for (double& e : v) e *= scale;
  m.b = b;
  return m;
}

struct SvmPrediction {
  Label label = Label::kPositive;
  double margin = 0.0;
};

// Positive iff w.x + b >= 0.
inline SvmPrediction predict_svm(const LinearSVM& m, const SparseVector& x) {
  const double margin = m.margin(x);
  return {margin >= 0.0 ? Label::kPositive : Label::kNegative, margin};
}

struct BaselineModel {
  TfidfVectorizer vectorizer;
  LinearSVM svm;
};

inline BaselineModel train_baseline(const std::vector<Document>& docs, const SvmConfig& cfg = {}) {
  BaselineModel model;
  model.vectorizer = TfidfVectorizer::fit(docs);
  std::vector<SparseVector> x;
  std::vector<Label> y;
  for (const auto& d : docs) {
    x.push_back(model.vectorizer.transform(d));
    y.push_back(d.label);
  }
  model.svm = train_svm(x, y, model.vectorizer.dim(), cfg);
  return model;
}

inline SvmPrediction predict_baseline(const BaselineModel& m, const Document& doc) {
  return predict_svm(m.svm, m.vectorizer.transform(doc));
}

// Binary format: "PVSV" | u32 version | tf-idf table | lambda | epochs | seed | w | b

inline constexpr std::string_view kBaselineMagic = "PVSV";
inline constexpr std::uint32_t kBaselineVersion = 1;

inline std::string encode_baseline(const BaselineModel& m) {
  BinaryWriter w(kBaselineMagic, kBaselineVersion);
  m.vectorizer.write(w);
  w.f64(m.svm.config.lambda);
  w.u64(m.svm.config.epochs);
  w.u64(m.svm.config.seed);
  w.u64(m.svm.w.size());
  w.f64s(m.svm.w.data(), m.svm.w.size());
  w.f64(m.svm.b);
  return w.bytes();
}

inline BaselineModel decode_baseline(std::string bytes) {
  BinaryReader r(std::move(bytes), kBaselineMagic, kBaselineVersion, "baseline model");
  BaselineModel m;
  m.vectorizer = TfidfVectorizer::read(r);
  m.svm.config.lambda = r.f64();
  m.svm.config.epochs = r.u64();
  m.svm.config.seed = r.u64();
  const std::uint64_t n = r.u64();
  if (n != m.vectorizer.dim()) throw DataError("corrupt baseline model file (dimension mismatch)");
  m.svm.w.resize(n);
  r.f64s(m.svm.w.data(), n);
  m.svm.b = r.f64();
  r.finish();
  return m;
}

inline void save_baseline(const BaselineModel& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_baseline(m));
}

inline BaselineModel load_baseline(const std::filesystem::path& path) { return decode_baseline(read_file(path)); }

}  // namespace pvsent
