#pragma once

// Skip-gram word embeddings trained with negative sampling.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pvsent/corpus.hpp"
#include "pvsent/error.hpp"
#include "pvsent/linalg.hpp"
#include "pvsent/negative_sampling.hpp"
#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

struct EmbeddingConfig {
  std::size_t dim = 500;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double learning_rate = 0.025;
  // Linear decay of the learning rate to 1e-4 of its initial value.
  bool decay = true;
  // word2vec frequent-word subsampling threshold; 0 disables.
  double subsample = 1e-3;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim < 1 || window < 1 || negatives < 1 || epochs < 1 || !(learning_rate > 0.0)) {
      throw UsageError("embedding config: dim, window, negatives, epochs must be >= 1 and learning rate > 0");
    }
  }
};

struct EmbeddingMatrix {
  Vocabulary vocab;
  RowMatrix input;   // |V| x dim, the word vectors served by lookup()
  RowMatrix output;  // |V| x dim, context weights

  std::size_t dim() const { return static_cast<std::size_t>(input.cols()); }

  std::uint64_t hash() const {
    std::uint64_t h = vocab.hash();
    h = hash_values(input, h);
    return hash_values(output, h);
  }

  bool operator==(const EmbeddingMatrix& o) const {
    return vocab == o.vocab && input.rows() == o.input.rows() && input.cols() == o.input.cols() &&
           input == o.input && output == o.output;
  }
};

// Word vector for `token`; out-of-vocabulary tokens share the UNK row.
inline Vector lookup(const EmbeddingMatrix& m, std::string_view token) {
  return m.input.row(static_cast<Eigen::Index>(m.vocab.index(token))).transpose();
}

namespace detail {

// word2vec keep probability for a word with corpus count `count`.
inline double keep_probability(std::uint64_t count, std::uint64_t total, double threshold) {
  if (threshold <= 0.0 || count == 0) return 1.0;
  const double f = static_cast<double>(count) / static_cast<double>(total);
  const double ratio = threshold / f;
  return std::min(1.0, std::sqrt(ratio) + ratio);
}

}  // namespace detail

// Skip-gram loss and gradient for one (center, context) pair: the center
// word's input vector predicts the context word against `negatives`.
inline NegativeSamplingResult skipgram_pair(const EmbeddingMatrix& m, std::size_t center,
                                            std::size_t context,
                                            std::span<const std::size_t> negatives) {
  return negative_sampling(m.input.row(static_cast<Eigen::Index>(center)).transpose(), m.output,
                           context, negatives);
}

// Exact negative-sampling objective over every in-window pair of `docs`, with
// the noise term taken in expectation. Used to monitor training.
inline double skipgram_objective(const std::vector<Document>& docs, const EmbeddingMatrix& m,
                                 const EmbeddingConfig& cfg) {
  const NoiseDistribution noise(m.vocab);
  double total = 0.0;
  std::size_t pairs = 0;
  for (const auto& ids : detail::encode_all(docs, m.vocab)) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Vector h = m.input.row(static_cast<Eigen::Index>(ids[i])).transpose();
      const std::size_t lo = i >= cfg.window ? i - cfg.window : 0;
      const std::size_t hi = std::min(ids.size(), i + cfg.window + 1);
      for (std::size_t j = lo; j < hi; ++j) {
        if (j == i) continue;
        total += softplus(-m.output.row(static_cast<Eigen::Index>(ids[j])).dot(h));
        total += expected_noise_loss(h, m.output, noise, cfg.negatives);
        ++pairs;
      }
    }
  }
  return pairs ? total / static_cast<double>(pairs) : 0.0;
}

// Called after each epoch with (epoch index from 0, current matrix).
using EmbeddingEpochCallback = std::function<void(std::size_t, const EmbeddingMatrix&)>;

inline EmbeddingMatrix train_skipgram(const std::vector<Document>& docs, const Vocabulary& vocab,
                                      const EmbeddingConfig& cfg,
                                      const EmbeddingEpochCallback& on_epoch = {}) {
  cfg.validate();
  if (docs.empty()) throw UsageError("train_skipgram: empty document list");
  const auto encoded = detail::encode_all(docs, vocab);
  std::uint64_t total_tokens = 0;
  bool any_pair = false;
  for (const auto& ids : encoded) {
    total_tokens += ids.size();
    any_pair = any_pair || ids.size() >= 2;
  }
  if (!any_pair) throw DataError("train_skipgram: no training pairs");

  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto v = static_cast<Eigen::Index>(vocab.size());
  Rng rng(cfg.seed);
  EmbeddingMatrix m{vocab, RowMatrix(v, d), RowMatrix::Zero(v, d)};
  fill_uniform(as_span(m.input), 0.5 / static_cast<double>(cfg.dim), rng);

  const NoiseDistribution noise(vocab);
  std::vector<double> keep(vocab.size());
  std::uint64_t vocab_total = 0;
  for (std::size_t i = 0; i < vocab.size(); ++i) vocab_total += vocab.count(i);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    keep[i] = detail::keep_probability(vocab.count(i), std::max<std::uint64_t>(vocab_total, 1), cfg.subsample);
  }

  const double planned = static_cast<double>(cfg.epochs) * static_cast<double>(total_tokens) + 1.0;
  double processed = 0.0;
  std::vector<std::size_t> negs(cfg.negatives);
  std::vector<std::size_t> kept;
  Vector hidden(d);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& ids : encoded) {
      kept.clear();
      for (std::size_t id : ids) {
        if (keep[id] >= 1.0 || rng.uniform() < keep[id]) kept.push_back(id);
      }
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const double lr = cfg.decay ? cfg.learning_rate * std::max(1e-4, 1.0 - processed / planned)
                                    : cfg.learning_rate;
        processed += 1.0;
        // Reduced window, sampled per center word.
        const std::size_t radius = cfg.window - rng.below(cfg.window);
        const std::size_t lo = i >= radius ? i - radius : 0;
        const std::size_t hi = std::min(kept.size(), i + radius + 1);
        const auto center = static_cast<Eigen::Index>(kept[i]);
        for (std::size_t j = lo; j < hi; ++j) {
          if (j == i) continue;
          std::size_t n_neg = 0;
          for (std::size_t k = 0; k < cfg.negatives; ++k) {
            const std::size_t w = noise.sample(rng);
            if (w != kept[j]) negs[n_neg++] = w;
          }
          hidden = m.input.row(center).transpose();
          const auto r = negative_sampling(hidden, m.output, kept[j], {negs.data(), n_neg});
          apply_output_update(m.output, hidden, r, lr);
          m.input.row(center) -= lr * r.d_hidden.transpose();
        }
      }
      processed += static_cast<double>(ids.size() - kept.size());
    }
    if (!m.input.allFinite() || !m.output.allFinite()) {
      throw NumericError("train_skipgram: non-finite embedding after epoch " + std::to_string(epoch + 1));
    }
    if (on_epoch) on_epoch(epoch, m);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Binary format: "PVEM" | u32 version | u64 dim | u64 vocab size | u64 vocab hash
//                | vocabulary | input rows | output rows (row-major f64)

inline constexpr std::string_view kEmbeddingMagic = "PVEM";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::string encode_embeddings(const EmbeddingMatrix& m) {
  BinaryWriter w(kEmbeddingMagic, kEmbeddingVersion);
  w.u64(m.dim());
  w.u64(m.vocab.size());
  w.u64(m.vocab.hash());
  m.vocab.write(w);
  write_matrix(w, m.input);
  write_matrix(w, m.output);
  return w.bytes();
}

inline EmbeddingMatrix decode_embeddings(std::string bytes) {
  BinaryReader r(std::move(bytes), kEmbeddingMagic, kEmbeddingVersion, "embedding");
  const std::uint64_t dim = r.u64();
  const std::uint64_t vocab_size = r.u64();
  const std::uint64_t vocab_hash = r.u64();
  EmbeddingMatrix m;
  m.vocab = Vocabulary::read(r);
  if (m.vocab.size() != vocab_size || m.vocab.hash() != vocab_hash) {
    throw DataError("corrupt embedding file (vocabulary does not match header)");
  }
  m.input = read_matrix(r);
  m.output = read_matrix(r);
  r.finish();
  const auto rows = static_cast<Eigen::Index>(vocab_size);
  const auto cols = static_cast<Eigen::Index>(dim);
  if (m.input.rows() != rows || m.input.cols() != cols || m.output.rows() != rows ||
      m.output.cols() != cols) {
    throw DataError("corrupt embedding file (dimension mismatch)");
  }
  return m;
}

inline void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_embeddings(m));
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(read_file(path));
}

// Also checks that the file was trained on `expected`.
inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path, const Vocabulary& expected) {
  EmbeddingMatrix m = load_embeddings(path);
  if (m.vocab.hash() != expected.hash()) {
    throw DataError("embedding file " + path.string() + ": vocabulary hash mismatch");
  }
  return m;
}

}  // namespace pvsent
