#pragma once

// Bidirectional LSTM document classifier.
//
// Each token row of the input matrix is either the word vector alone (WE) or
// the document's paragraph vector followed by the word vector (PV+WE). One
// LSTM reads the rows left to right, a second right to left; the two final
// hidden states are concatenated, passed through dropout while training, and
// mapped to a probability by a logistic output unit.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvsent/corpus.hpp"
#include "pvsent/embeddings.hpp"
#include "pvsent/error.hpp"
#include "pvsent/linalg.hpp"
#include "pvsent/optim.hpp"
#include "pvsent/paragraph_vector.hpp"
#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

enum class InputMode : std::uint32_t { kWE = 0, kPVWE = 1 };

inline const char* input_mode_name(InputMode m) { return m == InputMode::kWE ? "WE" : "PV+WE"; }

inline InputMode parse_input_mode(std::string_view s) {
  if (s == "WE" || s == "we") return InputMode::kWE;
  if (s == "PV+WE" || s == "pv+we" || s == "PVWE" || s == "pvwe") return InputMode::kPVWE;
  throw UsageError("unknown input mode \"" + std::string(s) + "\" (expected WE or PV+WE)");
}

// Gate blocks are stacked in this order along the rows of W, U and b.
enum class Gate : int { kInput = 0, kForget = 1, kOutput = 2, kCandidate = 3 };

struct LSTMDirectionParams {
  RowMatrix W;  // 4H x D
  RowMatrix U;  // 4H x H
  Vector b;     // 4H

  static LSTMDirectionParams zeros(std::size_t hidden, std::size_t input) {
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto d = static_cast<Eigen::Index>(input);
    return {RowMatrix::Zero(4 * h, d), RowMatrix::Zero(4 * h, h), Vector::Zero(4 * h)};
  }

  std::size_t hidden_size() const { return static_cast<std::size_t>(U.cols()); }
  std::size_t input_size() const { return static_cast<std::size_t>(W.cols()); }

  auto W_gate(Gate g) { return W.middleRows(static_cast<int>(g) * U.cols(), U.cols()); }
  auto U_gate(Gate g) { return U.middleRows(static_cast<int>(g) * U.cols(), U.cols()); }
  auto b_gate(Gate g) { return b.segment(static_cast<int>(g) * U.cols(), U.cols()); }
  auto W_gate(Gate g) const { return W.middleRows(static_cast<int>(g) * U.cols(), U.cols()); }
  auto U_gate(Gate g) const { return U.middleRows(static_cast<int>(g) * U.cols(), U.cols()); }
  auto b_gate(Gate g) const { return b.segment(static_cast<int>(g) * U.cols(), U.cols()); }

  void check_shapes() const {
    const auto h = U.cols();
    if (W.rows() != 4 * h || U.rows() != 4 * h || b.size() != 4 * h) {
      throw UsageError("LSTM parameters: inconsistent shapes");
    }
  }

  bool all_finite() const { return W.allFinite() && U.allFinite() && b.allFinite(); }
  bool operator==(const LSTMDirectionParams& o) const {
    return W.rows() == o.W.rows() && W.cols() == o.W.cols() && W == o.W && U == o.U && b == o.b;
  }
};

struct BiLSTMModel {
  InputMode mode = InputMode::kWE;
  std::size_t word_dim = 0;
  std::size_t pv_dim = 0;  // 0 in WE mode
  LSTMDirectionParams forward;
  LSTMDirectionParams backward;
  Vector w_out;  // 2H
  double b_out = 0.0;
  double dropout = 0.5;
  // Compatibility stamps for the artifacts the model was trained against.
  std::uint64_t vocab_hash = 0;
  std::uint64_t embedding_hash = 0;
  // Incremented on every parameter update; forward caches remember it.
  std::uint64_t version = 0;

  std::size_t hidden_size() const { return forward.hidden_size(); }
  std::size_t input_size() const { return forward.input_size(); }

  void touch() { ++version; }

  // Parameter tensors in a fixed order: forward W, U, b; backward W, U, b; w_out; b_out.
  std::vector<std::span<double>> parameters() {
    return {as_span(forward.W), as_span(forward.U), as_span(forward.b),  as_span(backward.W),
            as_span(backward.U), as_span(backward.b), as_span(w_out), {&b_out, 1}};
  }

  bool same_parameters(const BiLSTMModel& o) const {
    return mode == o.mode && forward == o.forward && backward == o.backward && w_out == o.w_out &&
           b_out == o.b_out && dropout == o.dropout;
  }
};

// All-zero parameters.
inline BiLSTMModel make_zero_bilstm(InputMode mode, std::size_t word_dim, std::size_t pv_dim,
                                    std::size_t hidden, double dropout = 0.5) {
  if (hidden == 0 || word_dim == 0) throw UsageError("bilstm: hidden size and word dimension must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("bilstm: dropout must lie in [0, 1)");
  if (mode == InputMode::kPVWE && pv_dim == 0) throw UsageError("bilstm: PV+WE mode needs a paragraph vector size");
  BiLSTMModel m;
  m.mode = mode;
  m.word_dim = word_dim;
  m.pv_dim = mode == InputMode::kPVWE ? pv_dim : 0;
  const std::size_t d = m.word_dim + m.pv_dim;
  m.forward = LSTMDirectionParams::zeros(hidden, d);
  m.backward = LSTMDirectionParams::zeros(hidden, d);
  m.w_out = Vector::Zero(2 * static_cast<Eigen::Index>(hidden));
  m.dropout = dropout;
  return m;
}

// Xavier-uniform weights, zero biases except forget-gate bias 1.
inline BiLSTMModel make_bilstm(InputMode mode, std::size_t word_dim, std::size_t pv_dim, std::size_t hidden,
                               double dropout, std::uint64_t seed) {
  BiLSTMModel m = make_zero_bilstm(mode, word_dim, pv_dim, hidden, dropout);
  Rng rng(seed);
  const double h = static_cast<double>(hidden);
  const double d = static_cast<double>(m.input_size());
  for (auto* dir : {&m.forward, &m.backward}) {
    for (int g = 0; g < 4; ++g) {
      auto w = dir->W_gate(static_cast<Gate>(g));
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-1.0, 1.0) * std::sqrt(6.0 / (d + h));
      auto u = dir->U_gate(static_cast<Gate>(g));
      for (Eigen::Index r = 0; r < u.rows(); ++r)
        for (Eigen::Index c = 0; c < u.cols(); ++c) u(r, c) = rng.uniform(-1.0, 1.0) * std::sqrt(6.0 / (2.0 * h));
    }
    dir->b_gate(Gate::kForget).setOnes();
  }
  fill_uniform(as_span(m.w_out), std::sqrt(6.0 / (2.0 * h + 1.0)), rng);
  return m;
}

// ---------------------------------------------------------------------------
// Input matrix

using InputMatrix = RowMatrix;

namespace detail {

inline InputMatrix assemble_rows(std::span<const std::size_t> word_rows, const EmbeddingMatrix& emb,
                                 const ParagraphVector* pv) {
  const auto n = static_cast<Eigen::Index>(word_rows.size());
  const auto wd = emb.input.cols();
  const Eigen::Index pd = pv ? pv->size() : 0;
  InputMatrix x(n, pd + wd);
  for (Eigen::Index t = 0; t < n; ++t) {
    if (pv) x.row(t).head(pd) = pv->transpose();
    x.row(t).tail(wd) = emb.input.row(static_cast<Eigen::Index>(word_rows[static_cast<std::size_t>(t)]));
  }
  return x;
}

}  // namespace detail

// Row t is [paragraph vector | word vector of token t] in PV+WE mode and the
// word vector alone in WE mode.
inline InputMatrix build_input_matrix(const Document& doc, const EmbeddingMatrix& emb, InputMode mode,
                                      const std::optional<ParagraphVector>& pv = std::nullopt) {
  if (doc.tokens.empty()) throw UsageError("build_input_matrix: empty document");
  if (mode == InputMode::kPVWE && !pv) {
    throw UsageError("build_input_matrix: PV+WE mode requires a paragraph vector");
  }
  const auto rows = emb.vocab.encode(doc.tokens);
  return detail::assemble_rows(rows, emb, mode == InputMode::kPVWE ? &*pv : nullptr);
}

// ---------------------------------------------------------------------------
// LSTM cell

struct CellState {
  Vector h;
  Vector c;
};

struct CellCache {
  Vector h_prev;
  Vector c_prev;
  Vector gates;  // activated [i; f; o; g]
  Vector c;
  Vector tanh_c;
};

struct CellOutput {
  Vector h;
  Vector c;
  CellCache cache;
};

namespace detail {

// Activates the stacked pre-activation z = Wx + Uh_prev + b in place.
inline void activate_gates(Eigen::Ref<Vector> z, Eigen::Index h) {
  for (Eigen::Index k = 0; k < 3 * h; ++k) z[k] = sigmoid(z[k]);
  for (Eigen::Index k = 3 * h; k < 4 * h; ++k) z[k] = std::tanh(z[k]);
}

}  // namespace detail

// i = s(W_i x + U_i h + b_i), f = s(...), o = s(...), g = tanh(...)
// c = f*c_prev + i*g, h = o*tanh(c)
inline CellOutput lstm_cell_forward(const Vector& x, const Vector& h_prev, const Vector& c_prev,
                                    const LSTMDirectionParams& p) {
  p.check_shapes();
  const auto H = p.U.cols();
  if (x.size() != p.W.cols() || h_prev.size() != H || c_prev.size() != H) {
    throw UsageError("lstm_cell_forward: shape mismatch");
  }
  CellOutput out;
  Vector z = p.W * x + p.U * h_prev + p.b;
  detail::activate_gates(z, H);
  out.c = z.segment(H, H).cwiseProduct(c_prev) + z.head(H).cwiseProduct(z.segment(3 * H, H));
  Vector tc = out.c.array().tanh();
  out.h = z.segment(2 * H, H).cwiseProduct(tc);
  out.cache = CellCache{h_prev, c_prev, std::move(z), out.c, std::move(tc)};
  return out;
}

// ---------------------------------------------------------------------------
// Bidirectional forward pass

// Per-step intermediates of one direction, indexed by processing step s.
// For the backward direction step s reads input row n-1-s.
struct DirectionCache {
  RowMatrix gates;   // n x 4H, activated
  RowMatrix c;       // n x H
  RowMatrix tanh_c;  // n x H
  RowMatrix h;       // n x H
};

struct ForwardCache {
  std::uint64_t version = 0;
  InputMatrix x;
  DirectionCache fwd;
  DirectionCache bwd;
  Vector feature;  // [h_fwd_final | h_bwd_final]
  Vector mask;     // inverted-dropout multipliers (all ones when not training)
  Vector dropped;  // feature .* mask
  double logit = 0.0;
  double probability = 0.5;
};

struct ForwardOptions {
  bool training = false;
  // Seeds the dropout mask; the same seed reproduces the same mask.
  std::uint64_t mask_seed = 0;
};

struct ForwardResult {
  double probability = 0.5;
  ForwardCache cache;
};

namespace detail {

// `zx` holds W x_t for every input row t, in input order.
inline DirectionCache run_direction(const RowMatrix& zx, const LSTMDirectionParams& p, bool reverse) {
  const Eigen::Index n = zx.rows();
  const Eigen::Index H = p.U.cols();
  DirectionCache dc;
  dc.gates.resize(n, 4 * H);
  dc.c.resize(n, H);
  dc.tanh_c.resize(n, H);
  dc.h.resize(n, H);
  Vector h_prev = Vector::Zero(H);
  Vector c_prev = Vector::Zero(H);
  Vector z(4 * H);
  for (Eigen::Index s = 0; s < n; ++s) {
    const Eigen::Index t = reverse ? n - 1 - s : s;
    z.noalias() = zx.row(t).transpose() + p.b;
    z.noalias() += p.U * h_prev;
    activate_gates(z, H);
    c_prev = z.segment(H, H).cwiseProduct(c_prev) + z.head(H).cwiseProduct(z.segment(3 * H, H));
    dc.c.row(s) = c_prev.transpose();
    dc.tanh_c.row(s) = c_prev.array().tanh().matrix().transpose();
    h_prev = z.segment(2 * H, H).cwiseProduct(dc.tanh_c.row(s).transpose());
    dc.h.row(s) = h_prev.transpose();
    dc.gates.row(s) = z.transpose();
  }
  return dc;
}

inline Vector dropout_mask(Eigen::Index size, double rate, std::uint64_t seed) {
  Vector mask = Vector::Ones(size);
  if (rate <= 0.0) return mask;
  Rng rng(seed);
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index k = 0; k < size; ++k) mask[k] = rng.uniform() < rate ? 0.0 : scale;
  return mask;
}

// Both directions plus the head, given each direction's input projections.
// The returned cache has an empty `x`.
inline ForwardResult forward_projected(const RowMatrix& zx_fwd, const RowMatrix& zx_bwd, const BiLSTMModel& model,
                                       const ForwardOptions& opts) {
  const Eigen::Index H = static_cast<Eigen::Index>(model.hidden_size());
  const Eigen::Index n = zx_fwd.rows();
  ForwardResult r;
  ForwardCache& c = r.cache;
  c.version = model.version;
  c.fwd = run_direction(zx_fwd, model.forward, false);
  c.bwd = run_direction(zx_bwd, model.backward, true);
  c.feature.resize(2 * H);
  c.feature << c.fwd.h.row(n - 1).transpose(), c.bwd.h.row(n - 1).transpose();
  c.mask = opts.training ? dropout_mask(2 * H, model.dropout, opts.mask_seed) : Vector::Ones(2 * H);
  c.dropped = c.feature.cwiseProduct(c.mask);
  c.logit = model.w_out.dot(c.dropped) + model.b_out;
  c.probability = sigmoid(c.logit);
  r.probability = c.probability;
  return r;
}

}  // namespace detail

inline ForwardResult bilstm_forward(InputMatrix x, const BiLSTMModel& model, const ForwardOptions& opts = {}) {
  if (x.rows() == 0) throw UsageError("bilstm_forward: empty input");
  if (x.cols() != static_cast<Eigen::Index>(model.input_size())) {
    throw UsageError("bilstm_forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(model.input_size()));
  }
  model.forward.check_shapes();
  model.backward.check_shapes();
  ForwardResult r = detail::forward_projected(x * model.forward.W.transpose(), x * model.backward.W.transpose(),
                                              model, opts);
  r.cache.x = std::move(x);
  return r;
}

// ---------------------------------------------------------------------------
// Backpropagation through time

struct BiLSTMGradients {
  LSTMDirectionParams forward;
  LSTMDirectionParams backward;
  Vector w_out;
  double b_out = 0.0;

  static BiLSTMGradients zeros_like(const BiLSTMModel& m) {
    return {LSTMDirectionParams::zeros(m.hidden_size(), m.input_size()),
            LSTMDirectionParams::zeros(m.hidden_size(), m.input_size()),
            Vector::Zero(static_cast<Eigen::Index>(2 * m.hidden_size())), 0.0};
  }

  void set_zero() {
    for (auto* d : {&forward, &backward}) {
      d->W.setZero();
      d->U.setZero();
      d->b.setZero();
    }
    w_out.setZero();
    b_out = 0.0;
  }

  void scale(double s) {
    for (auto* d : {&forward, &backward}) {
      d->W *= s;
      d->U *= s;
      d->b *= s;
    }
    w_out *= s;
    b_out *= s;
  }

  // Same tensor order as BiLSTMModel::parameters().
  std::vector<std::span<const double>> tensors() const {
    return {as_span(forward.W), as_span(forward.U), as_span(forward.b),  as_span(backward.W),
            as_span(backward.U), as_span(backward.b), as_span(w_out), {&b_out, 1}};
  }
};

namespace detail {

// Accumulates this direction's U and b gradients given dL/dh at its final
// step, and returns dL/d(W x_t) for every input row t in input order.
inline RowMatrix backprop_direction(const LSTMDirectionParams& p, const DirectionCache& dc, bool reverse,
                                    const Vector& dh_final, LSTMDirectionParams& grad) {
  const Eigen::Index n = dc.h.rows();
  const Eigen::Index H = p.U.cols();
  RowMatrix dz(n, 4 * H);   // rows in input order
  RowMatrix h_prev(n, H);   // rows in input order
  Vector dh = dh_final;
  Vector dc_next = Vector::Zero(H);
  for (Eigen::Index s = n - 1; s >= 0; --s) {
    const Eigen::Index t = reverse ? n - 1 - s : s;
    const auto gates = dc.gates.row(s);
    const auto i = gates.segment(0, H).transpose().array();
    const auto f = gates.segment(H, H).transpose().array();
    const auto o = gates.segment(2 * H, H).transpose().array();
    const auto g = gates.segment(3 * H, H).transpose().array();
    const auto tc = dc.tanh_c.row(s).transpose().array();
    const Vector c_prev = s > 0 ? Vector(dc.c.row(s - 1).transpose()) : Vector::Zero(H);

    const Vector dcell = (dc_next.array() + dh.array() * o * (1.0 - tc * tc)).matrix();
    auto row = dz.row(t);
    row.segment(0, H) = (dcell.array() * g * i * (1.0 - i)).matrix().transpose();
    row.segment(H, H) = (dcell.array() * c_prev.array() * f * (1.0 - f)).matrix().transpose();
    row.segment(2 * H, H) = (dh.array() * tc * o * (1.0 - o)).matrix().transpose();
    row.segment(3 * H, H) = (dcell.array() * i * (1.0 - g * g)).matrix().transpose();
    dc_next = (dcell.array() * f).matrix();

    if (s > 0) {
      h_prev.row(t) = dc.h.row(s - 1);
    } else {
      h_prev.row(t).setZero();
    }
    dh.noalias() = p.U.transpose() * row.transpose();
  }
  grad.U.noalias() += dz.transpose() * h_prev;
  grad.b.noalias() += dz.colwise().sum().transpose();
  return dz;
}

struct DirectionDeltas {
  RowMatrix fwd;
  RowMatrix bwd;
};

// Head and recurrent gradients; the input-weight gradients are left to the
// caller, which receives dL/d(W x_t) for both directions. Empty deltas mean
// the upstream gradient vanished.
inline DirectionDeltas backward_projected(const BiLSTMModel& model, const ForwardCache& cache, double d_prob,
                                          BiLSTMGradients& grads) {
  if (cache.version != model.version) {
    throw UsageError("bilstm_backward: forward cache is stale (parameters changed since the forward pass)");
  }
  const Eigen::Index H = static_cast<Eigen::Index>(model.hidden_size());
  const double p = cache.probability;
  const double d_logit = d_prob * p * (1.0 - p);
  grads.b_out += d_logit;
  grads.w_out.noalias() += d_logit * cache.dropped;
  if (d_logit == 0.0) return {};
  const Vector d_feature = (d_logit * model.w_out).cwiseProduct(cache.mask);
  return {backprop_direction(model.forward, cache.fwd, false, d_feature.head(H), grads.forward),
          backprop_direction(model.backward, cache.bwd, true, d_feature.tail(H), grads.backward)};
}

}  // namespace detail

// Adds the gradients of the loss w.r.t. every parameter into `grads`, given
// d loss / d probability. The cache must come from a forward pass on the same
// parameter version.
inline void bilstm_backward(const BiLSTMModel& model, const ForwardCache& cache, double d_prob,
                            BiLSTMGradients& grads) {
  if (cache.x.rows() == 0) throw UsageError("bilstm_backward: cache has no input matrix");
  const auto dz = detail::backward_projected(model, cache, d_prob, grads);
  if (dz.fwd.size() == 0) return;
  grads.forward.W.noalias() += dz.fwd.transpose() * cache.x;
  grads.backward.W.noalias() += dz.bwd.transpose() * cache.x;
}

inline BiLSTMGradients bilstm_backward(const BiLSTMModel& model, const ForwardCache& cache, double d_prob) {
  BiLSTMGradients g = BiLSTMGradients::zeros_like(model);
  bilstm_backward(model, cache, d_prob, g);
  return g;
}

// Adam update from accumulated gradients; bumps the model version.
inline void apply_gradients(BiLSTMModel& model, const BiLSTMGradients& grads, AdamState& adam) {
  const auto params = model.parameters();
  const auto g = grads.tensors();
  adam_step(params, g, adam);
  model.touch();
}

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  Label label = Label::kPositive;
  double probability = 0.5;
};

// Label is positive iff p >= 0.5.
inline Label decide(double probability) { return probability >= 0.5 ? Label::kPositive : Label::kNegative; }

struct PVPair {
  PVModel dm;
  PVModel dbow;

  std::size_t dim() const { return dm.dim() + dbow.dim(); }
  std::uint64_t hash() const { return dm.hash() ^ splitmix64(dbow.hash()); }
};

inline ParagraphVector paragraph_vector(const PVPair& pv, const Document& doc) {
  return concat_pv(infer_pv(pv.dm, doc), infer_pv(pv.dbow, doc));
}

inline void check_compatible(const BiLSTMModel& model, const EmbeddingMatrix& emb, const PVPair* pv) {
  if (model.embedding_hash != 0 && model.embedding_hash != emb.hash()) {
    throw DataError("model was trained with a different embedding file");
  }
  if (emb.dim() != model.word_dim) throw DataError("embedding dimension does not match the model");
  if (model.mode == InputMode::kPVWE) {
    if (!pv) throw DataError("PV+WE model needs paragraph vector models");
    if (pv->dim() != model.pv_dim) throw DataError("paragraph vector size does not match the model");
  } else if (pv) {
    throw DataError("WE model was given paragraph vector models (mode mismatch)");
  }
}

inline Prediction predict(const Document& doc, const EmbeddingMatrix& emb, const PVPair* pv,
                          const BiLSTMModel& model) {
  check_compatible(model, emb, pv);
  std::optional<ParagraphVector> v;
  if (model.mode == InputMode::kPVWE) v = paragraph_vector(*pv, doc);
  const double p = bilstm_forward(build_input_matrix(doc, emb, model.mode, v), model).probability;
  return {decide(p), p};
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t hidden = 128;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double dropout = 0.5;
  std::size_t patience = 3;
  double min_delta = 1e-5;
  std::uint64_t seed = 1;
};

// A document reduced to embedding rows plus its paragraph vector (PV+WE only).
struct EncodedDocument {
  std::vector<std::size_t> rows;
  std::optional<ParagraphVector> pv;
  int label = 0;
};

inline EncodedDocument encode_document(const Document& doc, const EmbeddingMatrix& emb, const PVPair* pv) {
  EncodedDocument e;
  e.rows = emb.vocab.encode(doc.tokens);
  if (pv) e.pv = paragraph_vector(*pv, doc);
  e.label = to_int(doc.label);
  return e;
}

inline InputMatrix materialize(const EncodedDocument& e, const EmbeddingMatrix& emb) {
  return detail::assemble_rows(e.rows, emb, e.pv ? &*e.pv : nullptr);
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

struct TrainResult {
  BiLSTMModel model;  // best snapshot by validation loss
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
};

struct EvalSummary {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

// Input projections for a group of encoded documents. The word block of W is
// applied once per distinct token in the group and the paragraph block once
// per document; input-weight gradients are gathered the same way.
class BatchProjector {
 public:
  template <typename DocRange>
  BatchProjector(const BiLSTMModel& model, const EmbeddingMatrix& emb, const DocRange& docs)
      : model_(model), pd_(static_cast<Eigen::Index>(model.pv_dim)), wd_(emb.input.cols()) {
    if (static_cast<std::size_t>(wd_) != model.word_dim) throw DataError("embedding dimension does not match the model");
    slot_.assign(emb.vocab.size(), -1);
    std::vector<std::size_t> tokens;
    for (const EncodedDocument& d : docs) {
      if (d.rows.empty()) throw UsageError("bilstm: empty document");
      if (pd_ > 0 && (!d.pv || d.pv->size() != pd_)) throw UsageError("bilstm: PV+WE input needs a paragraph vector");
      for (std::size_t id : d.rows) {
        if (slot_[id] < 0) {
          slot_[id] = static_cast<Eigen::Index>(tokens.size());
          tokens.push_back(id);
        }
      }
    }
    const auto u = static_cast<Eigen::Index>(tokens.size());
    words_.resize(u, wd_);
    for (Eigen::Index k = 0; k < u; ++k) words_.row(k) = emb.input.row(static_cast<Eigen::Index>(tokens[static_cast<std::size_t>(k)]));
    proj_fwd_.noalias() = words_ * model.forward.W.rightCols(wd_).transpose();
    proj_bwd_.noalias() = words_ * model.backward.W.rightCols(wd_).transpose();
  }

  // W x_t for every token of `d`, in input order.
  RowMatrix zx(const EncodedDocument& d, bool backward_direction) const {
    const auto& W = backward_direction ? model_.backward.W : model_.forward.W;
    const auto& proj = backward_direction ? proj_bwd_ : proj_fwd_;
    const auto n = static_cast<Eigen::Index>(d.rows.size());
    RowMatrix z(n, proj.cols());
    for (Eigen::Index t = 0; t < n; ++t) z.row(t) = proj.row(slot_[d.rows[static_cast<std::size_t>(t)]]);
    if (pd_ > 0) {
      const Vector pv_part = W.leftCols(pd_) * *d.pv;
      z.rowwise() += pv_part.transpose();
    }
    return z;
  }

  ForwardResult forward(const EncodedDocument& d, const ForwardOptions& opts = {}) const {
    return forward_projected(zx(d, false), zx(d, true), model_, opts);
  }

  // Full backward pass for one document; input-weight gradients of the word
  // block are held back until flush().
  void backward(const EncodedDocument& d, const ForwardCache& cache, double d_prob, BiLSTMGradients& grads) {
    const DirectionDeltas dz = backward_projected(model_, cache, d_prob, grads);
    if (dz.fwd.size() == 0) return;
    if (acc_fwd_.size() == 0) {
      acc_fwd_ = RowMatrix::Zero(words_.rows(), proj_fwd_.cols());
      acc_bwd_ = RowMatrix::Zero(words_.rows(), proj_bwd_.cols());
    }
    for (std::size_t t = 0; t < d.rows.size(); ++t) {
      const Eigen::Index k = slot_[d.rows[t]];
      acc_fwd_.row(k) += dz.fwd.row(static_cast<Eigen::Index>(t));
      acc_bwd_.row(k) += dz.bwd.row(static_cast<Eigen::Index>(t));
    }
    if (pd_ > 0) {
      grads.forward.W.leftCols(pd_).noalias() += dz.fwd.colwise().sum().transpose() * d.pv->transpose();
      grads.backward.W.leftCols(pd_).noalias() += dz.bwd.colwise().sum().transpose() * d.pv->transpose();
    }
  }

  void flush(BiLSTMGradients& grads) {
    if (acc_fwd_.size() == 0) return;
    grads.forward.W.rightCols(wd_).noalias() += acc_fwd_.transpose() * words_;
    grads.backward.W.rightCols(wd_).noalias() += acc_bwd_.transpose() * words_;
    acc_fwd_.resize(0, 0);
    acc_bwd_.resize(0, 0);
  }

 private:
  const BiLSTMModel& model_;
  Eigen::Index pd_;
  Eigen::Index wd_;
  std::vector<Eigen::Index> slot_;
  RowMatrix words_;
  RowMatrix proj_fwd_;
  RowMatrix proj_bwd_;
  RowMatrix acc_fwd_;
  RowMatrix acc_bwd_;
};

}  // namespace detail

inline EvalSummary evaluate_encoded(const BiLSTMModel& model, const std::vector<EncodedDocument>& docs,
                                    const EmbeddingMatrix& emb) {
  EvalSummary s;
  if (docs.empty()) return s;
  const detail::BatchProjector projector(model, emb, docs);
  std::size_t correct = 0;
  for (const auto& d : docs) {
    const double p = projector.forward(d).probability;
    s.loss += bce_loss(p, d.label).loss;
    correct += to_int(decide(p)) == d.label;
  }
  s.loss /= static_cast<double>(docs.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(docs.size());
  return s;
}

using TrainEpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch Adam on binary cross-entropy with dropout on the feature vector
// and early stopping on validation loss. Gradients of a batch are averaged.
inline TrainResult train_bilstm(const std::vector<EncodedDocument>& train, const std::vector<EncodedDocument>& valid,
                                const EmbeddingMatrix& emb, BiLSTMModel model, const TrainConfig& cfg,
                                const TrainEpochCallback& on_epoch = {}) {
  if (train.empty()) throw UsageError("train_bilstm: empty training set");
  if (valid.empty()) throw UsageError("train_bilstm: empty validation set");
  if (cfg.batch_size == 0 || cfg.epochs == 0) throw UsageError("train_bilstm: batch size and epochs must be positive");
  AdamState adam(AdamConfig{cfg.learning_rate});
  EarlyStopper<BiLSTMModel> stopper(cfg.patience, cfg.min_delta);
  BiLSTMGradients grads = BiLSTMGradients::zeros_like(model);
  TrainResult result;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "epoch:" + std::to_string(epoch)));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      grads.set_zero();
      std::vector<std::reference_wrapper<const EncodedDocument>> batch;
      for (std::size_t k = start; k < end; ++k) batch.emplace_back(train[order[k]]);
      detail::BatchProjector projector(model, emb, batch);
      for (const EncodedDocument& d : batch) {
        const ForwardOptions opts{true, rng.next()};
        const ForwardResult fr = projector.forward(d, opts);
        const LossAndGrad lg = bce_loss(fr.probability, d.label);
        total += lg.loss;
        projector.backward(d, fr.cache, lg.grad, grads);
      }
      projector.flush(grads);
      grads.scale(1.0 / static_cast<double>(end - start));
      apply_gradients(model, grads, adam);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train.size());
    const EvalSummary v = evaluate_encoded(model, valid, emb);
    rec.valid_loss = v.loss;
    rec.valid_accuracy = v.accuracy;
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.valid_loss)) {
      throw NumericError("train_bilstm: non-finite loss at epoch " + std::to_string(epoch));
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.update(v.loss, model) == StopDecision::kStop) {
      result.stopped_early = true;
      break;
    }
  }
  result.model = stopper.best();
  result.best_epoch = stopper.best_epoch();
  return result;
}

// ---------------------------------------------------------------------------
// Binary format: "PVLM" | u32 version | u32 mode | u64 H | u64 D | u64 word dim |
// u64 pv dim | f64 dropout | u64 vocab hash | u64 embedding hash | tensors

inline constexpr std::string_view kBiLSTMMagic = "PVLM";
inline constexpr std::uint32_t kBiLSTMVersion = 1;

inline std::string encode_bilstm(const BiLSTMModel& m) {
  BinaryWriter w(kBiLSTMMagic, kBiLSTMVersion);
  w.u32(static_cast<std::uint32_t>(m.mode));
  w.u64(m.hidden_size());
  w.u64(m.input_size());
  w.u64(m.word_dim);
  w.u64(m.pv_dim);
  w.f64(m.dropout);
  w.u64(m.vocab_hash);
  w.u64(m.embedding_hash);
  for (const auto* d : {&m.forward, &m.backward}) {
    write_matrix(w, d->W);
    write_matrix(w, d->U);
    write_vector(w, d->b);
  }
  write_vector(w, m.w_out);
  w.f64(m.b_out);
  return w.bytes();
}

inline BiLSTMModel decode_bilstm(std::string bytes) {
  BinaryReader r(std::move(bytes), kBiLSTMMagic, kBiLSTMVersion, "bilstm model");
  BiLSTMModel m;
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw DataError("corrupt bilstm model file (unknown mode)");
  m.mode = static_cast<InputMode>(mode);
  const std::uint64_t hidden = r.u64();
  const std::uint64_t input = r.u64();
  m.word_dim = r.u64();
  m.pv_dim = r.u64();
  m.dropout = r.f64();
  m.vocab_hash = r.u64();
  m.embedding_hash = r.u64();
  for (auto* d : {&m.forward, &m.backward}) {
    d->W = read_matrix(r);
    d->U = read_matrix(r);
    d->b = read_vector(r);
  }
  m.w_out = read_vector(r);
  m.b_out = r.f64();
  r.finish();
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto D = static_cast<Eigen::Index>(input);
  for (const auto* d : {&m.forward, &m.backward}) {
    if (d->W.rows() != 4 * H || d->W.cols() != D || d->U.rows() != 4 * H || d->U.cols() != H ||
        d->b.size() != 4 * H) {
      throw DataError("corrupt bilstm model file (dimension mismatch)");
    }
  }
  if (m.w_out.size() != 2 * H || m.word_dim + m.pv_dim != input) {
    throw DataError("corrupt bilstm model file (dimension mismatch)");
  }
  return m;
}

inline void save_bilstm(const BiLSTMModel& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_bilstm(m));
}

inline BiLSTMModel load_bilstm(const std::filesystem::path& path) { return decode_bilstm(read_file(path)); }

}  // namespace pvsent
