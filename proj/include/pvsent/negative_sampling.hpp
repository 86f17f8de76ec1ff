#pragma once

// Negative-sampling objective shared by the skip-gram and paragraph-vector
// trainers: for a hidden vector h, an observed output word o and noise words
// k_1..k_K,
//
//   L = -log s(u_o . h) - sum_j log s(-u_kj . h)
//
// where u_w are rows of the output matrix.

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "pvsent/corpus.hpp"
#include "pvsent/linalg.hpp"
#include "pvsent/optim.hpp"

namespace pvsent {

namespace detail {

inline std::vector<std::vector<std::size_t>> encode_all(const std::vector<Document>& docs,
                                                        const Vocabulary& vocab) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(vocab.encode(d.tokens));
  return out;
}

}  // namespace detail

// Draws noise words from the unigram distribution raised to the 3/4 power.
class NoiseDistribution {
 public:
  NoiseDistribution() = default;

  explicit NoiseDistribution(const Vocabulary& vocab, double power = 0.75) {
    probs_.resize(vocab.size());
    double total = 0.0;
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      probs_[i] = std::pow(static_cast<double>(vocab.count(i)), power);
      total += probs_[i];
    }
    if (total <= 0.0) throw DataError("noise distribution: vocabulary has no counts");
    cdf_.resize(probs_.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      probs_[i] /= total;
      acc += probs_[i];
      cdf_[i] = acc;
    }
    cdf_.back() = 1.0;
  }

  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    std::size_t i = static_cast<std::size_t>(it - cdf_.begin());
    if (i >= cdf_.size()) i = cdf_.size() - 1;
    // Skip zero-probability entries that share a cdf value with a neighbour.
    while (probs_[i] == 0.0 && i + 1 < probs_.size()) ++i;
    return i;
  }

  double probability(std::size_t i) const { return probs_[i]; }
  std::size_t size() const { return probs_.size(); }

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
};

struct NegativeSamplingResult {
  double loss = 0.0;
  // dL/dh
  Vector d_hidden;
  // dL/du_w = coef * h for each (w, coef); repeated rows may appear.
  std::vector<std::pair<std::size_t, double>> output_coefs;
};

inline NegativeSamplingResult negative_sampling(const Vector& hidden, const RowMatrix& output,
                                                std::size_t target,
                                                std::span<const std::size_t> negatives) {
  NegativeSamplingResult r;
  r.d_hidden = Vector::Zero(hidden.size());
  r.output_coefs.reserve(negatives.size() + 1);

  const double s_pos = sigmoid(output.row(static_cast<Eigen::Index>(target)).dot(hidden));
  r.loss += softplus(-output.row(static_cast<Eigen::Index>(target)).dot(hidden));
  const double c_pos = s_pos - 1.0;
  r.d_hidden += c_pos * output.row(static_cast<Eigen::Index>(target)).transpose();
  r.output_coefs.emplace_back(target, c_pos);

  for (std::size_t k : negatives) {
    const double score = output.row(static_cast<Eigen::Index>(k)).dot(hidden);
    const double s = sigmoid(score);
    r.loss += softplus(score);
    r.d_hidden += s * output.row(static_cast<Eigen::Index>(k)).transpose();
    r.output_coefs.emplace_back(k, s);
  }
  return r;
}

// SGD on the output rows: u_w -= lr * coef * h.
inline void apply_output_update(RowMatrix& output, const Vector& hidden,
                                const NegativeSamplingResult& r, double lr) {
  for (const auto& [row, coef] : r.output_coefs) {
    output.row(static_cast<Eigen::Index>(row)) -= (lr * coef) * hidden.transpose();
  }
}

// Expected noise term sum_w P(w) * -log s(-u_w . h), scaled by the number of
// negatives: the exact objective whose stochastic estimate the trainers follow.
inline double expected_noise_loss(const Vector& hidden, const RowMatrix& output,
                                  const NoiseDistribution& noise, std::size_t negatives) {
  double acc = 0.0;
  for (std::size_t w = 0; w < noise.size(); ++w) {
    const double p = noise.probability(w);
    if (p == 0.0) continue;
    acc += p * softplus(output.row(static_cast<Eigen::Index>(w)).dot(hidden));
  }
  return static_cast<double>(negatives) * acc;
}

}  // namespace pvsent
