#pragma once

// Paragraph vectors: per-document vectors learned by predicting the
// document's words, either together with neighbouring word vectors
// (distributed memory, DM) or from the document vector alone (distributed
// bag of words, DBOW). Both use negative sampling.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pvsent/corpus.hpp"
#include "pvsent/error.hpp"
#include "pvsent/linalg.hpp"
#include "pvsent/negative_sampling.hpp"
#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

enum class PVMode : std::uint32_t { kDM = 0, kDBOW = 1 };

inline const char* pv_mode_name(PVMode m) { return m == PVMode::kDM ? "dm" : "dbow"; }

struct PVConfig {
  std::size_t dim = 100;
  std::size_t window = 5;  // DM context radius
  std::size_t negatives = 5;
  std::size_t epochs = 20;
  double learning_rate = 0.025;
  double min_learning_rate = 0.0001;
  std::size_t infer_steps = 50;
  double infer_learning_rate = 0.025;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim < 1 || window < 1 || negatives < 1 || epochs < 1 || learning_rate < 0.0) {
      throw UsageError("paragraph vector config: dim, window, negatives, epochs must be >= 1");
    }
  }
};

struct PVModel {
  PVMode mode = PVMode::kDBOW;
  PVConfig config;
  Vocabulary vocab;
  std::vector<std::string> doc_ids;
  std::unordered_map<std::string, std::size_t> doc_rows;
  RowMatrix docs;         // n_docs x dim
  RowMatrix word_input;   // |V| x dim for DM; empty for DBOW
  RowMatrix output;       // |V| x dim

  std::size_t dim() const { return config.dim; }

  // Trained vector of a training document.
  Vector doc_vector(std::string_view id) const {
    const auto it = doc_rows.find(std::string(id));
    if (it == doc_rows.end()) throw DataError("paragraph vector: unknown document id \"" + std::string(id) + "\"");
    return docs.row(static_cast<Eigen::Index>(it->second)).transpose();
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(pv_mode_name(mode));
    h = fnv1a_bytes(&config, sizeof config, h);
    h ^= vocab.hash();
    for (const auto& id : doc_ids) h = fnv1a(id + '\x1f', h);
    h = hash_values(docs, h);
    h = hash_values(word_input, h);
    return hash_values(output, h);
  }
};

// Fresh document vector, uniform in [-0.5/p, 0.5/p], seeded by (seed, id) so
// that training and inference start from the same point for a given id.
inline Vector initial_doc_vector(std::uint64_t seed, std::string_view doc_id, std::size_t dim) {
  Rng rng(derive_seed(seed, std::string("doc:") + std::string(doc_id)));
  Vector v(static_cast<Eigen::Index>(dim));
  fill_uniform(as_span(v), 0.5 / static_cast<double>(dim), rng);
  return v;
}

// Loss and gradients for predicting ids[position].
struct PVStep {
  double loss = 0.0;
  Vector hidden;
  Vector d_doc;
  // DM only: context word rows, each receiving d_hidden / (1 + |context|).
  std::vector<std::size_t> context;
  Vector d_context_word;
  NegativeSamplingResult ns;
};

inline PVStep pv_step(const PVModel& model, const Vector& doc_vec, std::span<const std::size_t> ids,
                      std::size_t position, std::span<const std::size_t> negatives) {
  PVStep s;
  if (model.mode == PVMode::kDBOW) {
    s.hidden = doc_vec;
    s.ns = negative_sampling(s.hidden, model.output, ids[position], negatives);
    s.d_doc = s.ns.d_hidden;
  } else {
    const std::size_t radius = model.config.window;
    const std::size_t lo = position >= radius ? position - radius : 0;
    const std::size_t hi = std::min(ids.size(), position + radius + 1);
    s.hidden = doc_vec;
    for (std::size_t j = lo; j < hi; ++j) {
      if (j == position) continue;
      s.context.push_back(ids[j]);
      s.hidden += model.word_input.row(static_cast<Eigen::Index>(ids[j])).transpose();
    }
    const double scale = 1.0 / static_cast<double>(1 + s.context.size());
    s.hidden *= scale;
    s.ns = negative_sampling(s.hidden, model.output, ids[position], negatives);
    s.d_doc = scale * s.ns.d_hidden;
    s.d_context_word = s.d_doc;
  }
  s.loss = s.ns.loss;
  return s;
}

namespace detail {

inline void draw_negatives(const NoiseDistribution& noise, std::size_t target, std::size_t k, Rng& rng,
                           std::vector<std::size_t>& out) {
  out.clear();
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t w = noise.sample(rng);
    if (w != target) out.push_back(w);
  }
}

inline double decayed(double lr0, double lr_min, double done, double planned) {
  const double floor = std::min(lr0, lr_min);
  return lr0 - (lr0 - floor) * std::min(1.0, done / planned);
}

}  // namespace detail

using PVEpochCallback = std::function<void(std::size_t, const PVModel&)>;

inline PVModel train_pv(const std::vector<Document>& docs, const Vocabulary& vocab, PVMode mode,
                        const PVConfig& cfg, const PVEpochCallback& on_epoch = {}) {
  cfg.validate();
  if (docs.empty()) throw UsageError("train_pv: empty document list");

  PVModel model;
  model.mode = mode;
  model.config = cfg;
  model.vocab = vocab;
  const auto p = static_cast<Eigen::Index>(cfg.dim);
  const auto v = static_cast<Eigen::Index>(vocab.size());
  model.docs.resize(static_cast<Eigen::Index>(docs.size()), p);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!model.doc_rows.emplace(docs[i].id, i).second) {
      throw DataError("train_pv: duplicate document id \"" + docs[i].id + "\"");
    }
    model.doc_ids.push_back(docs[i].id);
    model.docs.row(static_cast<Eigen::Index>(i)) = initial_doc_vector(cfg.seed, docs[i].id, cfg.dim).transpose();
  }
  Rng rng(derive_seed(cfg.seed, std::string("train-") + pv_mode_name(mode)));
  if (mode == PVMode::kDM) {
    model.word_input.resize(v, p);
    fill_uniform(as_span(model.word_input), 0.5 / static_cast<double>(cfg.dim), rng);
  }
  model.output = RowMatrix::Zero(v, p);

  const NoiseDistribution noise(vocab);
  const auto encoded = detail::encode_all(docs, vocab);
  double total_tokens = 0.0;
  for (const auto& ids : encoded) total_tokens += static_cast<double>(ids.size());
  const double planned = static_cast<double>(cfg.epochs) * total_tokens;
  double done = 0.0;
  std::vector<std::size_t> negs;
  Vector doc_vec(p);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t d = 0; d < encoded.size(); ++d) {
      const auto& ids = encoded[d];
      const auto row = static_cast<Eigen::Index>(d);
      for (std::size_t pos = 0; pos < ids.size(); ++pos) {
        const double lr = detail::decayed(cfg.learning_rate, cfg.min_learning_rate, done, planned);
        done += 1.0;
        detail::draw_negatives(noise, ids[pos], cfg.negatives, rng, negs);
        doc_vec = model.docs.row(row).transpose();
        const PVStep s = pv_step(model, doc_vec, ids, pos, negs);
        apply_output_update(model.output, s.hidden, s.ns, lr);
        model.docs.row(row) -= lr * s.d_doc.transpose();
        for (std::size_t w : s.context) {
          model.word_input.row(static_cast<Eigen::Index>(w)) -= lr * s.d_context_word.transpose();
        }
      }
    }
    if (!model.docs.allFinite() || !model.output.allFinite() || !model.word_input.allFinite()) {
      throw NumericError("train_pv: non-finite parameters after epoch " + std::to_string(epoch + 1));
    }
    if (on_epoch) on_epoch(epoch, model);
  }
  return model;
}

// Vector for an unseen document: starts from initial_doc_vector and runs
// `steps` passes over the document with every word and output weight frozen.
// The learning rate decays linearly from `lr` to min(lr, min_learning_rate).
inline Vector infer_pv(const PVModel& model, const Document& doc, std::size_t steps, double lr) {
  if (steps == 0) throw UsageError("infer_pv: steps must be positive");
  if (lr < 0.0) throw UsageError("infer_pv: learning rate must be non-negative");
  const NoiseDistribution noise(model.vocab);
  const auto ids = model.vocab.encode(doc.tokens);
  Vector doc_vec = initial_doc_vector(model.config.seed, doc.id, model.dim());
  if (ids.empty()) return doc_vec;
  Rng rng(derive_seed(model.config.seed, "infer:" + doc.id));
  const double planned = static_cast<double>(steps * ids.size());
  double done = 0.0;
  std::vector<std::size_t> negs;
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t pos = 0; pos < ids.size(); ++pos) {
      const double rate = detail::decayed(lr, model.config.min_learning_rate, done, planned);
      done += 1.0;
      detail::draw_negatives(noise, ids[pos], model.config.negatives, rng, negs);
      const PVStep s = pv_step(model, doc_vec, ids, pos, negs);
      doc_vec -= rate * s.d_doc;
    }
  }
  return doc_vec;
}

inline Vector infer_pv(const PVModel& model, const Document& doc) {
  return infer_pv(model, doc, model.config.infer_steps, model.config.infer_learning_rate);
}

using ParagraphVector = Vector;

// [DM part | DBOW part]
inline ParagraphVector concat_pv(const Vector& dm, const Vector& dbow) {
  ParagraphVector out(dm.size() + dbow.size());
  out << dm, dbow;
  return out;
}

// ---------------------------------------------------------------------------
// Binary format: "PVPV" | u32 version | u32 mode | u64 dim | u64 vocab size |
// u64 vocab hash | config | vocabulary | doc ids | docs | word input | output

inline constexpr std::string_view kPVMagic = "PVPV";
inline constexpr std::uint32_t kPVVersion = 1;

inline std::string encode_pv(const PVModel& m) {
  BinaryWriter w(kPVMagic, kPVVersion);
  w.u32(static_cast<std::uint32_t>(m.mode));
  w.u64(m.config.dim);
  w.u64(m.vocab.size());
  w.u64(m.vocab.hash());
  const PVConfig& c = m.config;
  w.u64(c.window);
  w.u64(c.negatives);
  w.u64(c.epochs);
  w.f64(c.learning_rate);
  w.f64(c.min_learning_rate);
  w.u64(c.infer_steps);
  w.f64(c.infer_learning_rate);
  w.u64(c.seed);
  m.vocab.write(w);
  w.u64(m.doc_ids.size());
  for (const auto& id : m.doc_ids) w.str(id);
  write_matrix(w, m.docs);
  write_matrix(w, m.word_input);
  write_matrix(w, m.output);
  return w.bytes();
}

inline PVModel decode_pv(std::string bytes) {
  BinaryReader r(std::move(bytes), kPVMagic, kPVVersion, "paragraph vector");
  PVModel m;
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw DataError("corrupt paragraph vector file (unknown mode)");
  m.mode = static_cast<PVMode>(mode);
  PVConfig& c = m.config;
  c.dim = r.u64();
  const std::uint64_t vocab_size = r.u64();
  const std::uint64_t vocab_hash = r.u64();
  c.window = r.u64();
  c.negatives = r.u64();
  c.epochs = r.u64();
  c.learning_rate = r.f64();
  c.min_learning_rate = r.f64();
  c.infer_steps = r.u64();
  c.infer_learning_rate = r.f64();
  c.seed = r.u64();
  m.vocab = Vocabulary::read(r);
  if (m.vocab.size() != vocab_size || m.vocab.hash() != vocab_hash) {
    throw DataError("corrupt paragraph vector file (vocabulary does not match header)");
  }
  const std::uint64_t n_docs = r.u64();
  for (std::uint64_t i = 0; i < n_docs; ++i) {
    m.doc_ids.push_back(r.str());
    if (!m.doc_rows.emplace(m.doc_ids.back(), i).second) {
      throw DataError("corrupt paragraph vector file (duplicate document id)");
    }
  }
  m.docs = read_matrix(r);
  m.word_input = read_matrix(r);
  m.output = read_matrix(r);
  r.finish();
  const auto p = static_cast<Eigen::Index>(c.dim);
  const auto v = static_cast<Eigen::Index>(vocab_size);
  const bool dm_words_ok = m.mode == PVMode::kDM ? (m.word_input.rows() == v && m.word_input.cols() == p)
                                                 : m.word_input.size() == 0;
  if (m.docs.rows() != static_cast<Eigen::Index>(n_docs) || m.docs.cols() != p || !dm_words_ok ||
      m.output.rows() != v || m.output.cols() != p) {
    throw DataError("corrupt paragraph vector file (dimension mismatch)");
  }
  return m;
}

inline void save_pv(const PVModel& m, const std::filesystem::path& path) { write_file_atomic(path, encode_pv(m)); }

inline PVModel load_pv(const std::filesystem::path& path) { return decode_pv(read_file(path)); }

}  // namespace pvsent
