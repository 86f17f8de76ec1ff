#pragma once

// End-to-end stages shared by the command-line tool and the acceptance runner.
// Every stage draws its seed from the run seed through derive_seed, so any
// stage can be re-run on its own and reproduce the same artifact.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pvsent/baseline.hpp"
#include "pvsent/bilstm.hpp"
#include "pvsent/corpus.hpp"
#include "pvsent/embeddings.hpp"
#include "pvsent/evaluation.hpp"
#include "pvsent/paragraph_vector.hpp"
#include "pvsent/random.hpp"

namespace pvsent {

enum class ModelKind { kWE, kPVWE, kBaseline };

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "WE" || s == "we") return ModelKind::kWE;
  if (s == "PV+WE" || s == "pv+we" || s == "pvwe") return ModelKind::kPVWE;
  if (s == "baseline" || s == "svm") return ModelKind::kBaseline;
  throw UsageError("unknown model mode \"" + std::string(s) + "\" (expected WE, PV+WE or baseline)");
}

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kWE: return "WE";
    case ModelKind::kPVWE: return "PV+WE";
    default: return "baseline";
  }
}

// File-name tag: we, pvwe, baseline.
inline const char* model_kind_tag(ModelKind k) {
  switch (k) {
    case ModelKind::kWE: return "we";
    case ModelKind::kPVWE: return "pvwe";
    default: return "baseline";
  }
}

struct RunConfig {
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  std::uint64_t min_count = 1;
  EmbeddingConfig embedding;
  PVConfig pv;
  TrainConfig model;
  SvmConfig svm;
};

inline std::uint64_t stage_seed(const RunConfig& cfg, std::string_view stage) { return derive_seed(cfg.seed, stage); }

inline Split run_split(std::vector<Document> docs, const RunConfig& cfg) {
  return split(std::move(docs), cfg.validation_fraction, stage_seed(cfg, "split"));
}

inline EmbeddingMatrix run_embeddings(const std::vector<Document>& train, const RunConfig& cfg) {
  EmbeddingConfig e = cfg.embedding;
  e.seed = stage_seed(cfg, "embeddings");
  return train_skipgram(train, build_vocabulary(train, cfg.min_count), e);
}

inline PVPair run_paragraph_vectors(const std::vector<Document>& train, const RunConfig& cfg) {
  const Vocabulary vocab = build_vocabulary(train, cfg.min_count);
  PVConfig p = cfg.pv;
  p.seed = stage_seed(cfg, "pv:dm");
  PVModel dm = train_pv(train, vocab, PVMode::kDM, p);
  p.seed = stage_seed(cfg, "pv:dbow");
  PVModel dbow = train_pv(train, vocab, PVMode::kDBOW, p);
  return {std::move(dm), std::move(dbow)};
}

inline std::vector<EncodedDocument> encode_all(const std::vector<Document>& docs, const EmbeddingMatrix& emb,
                                               const PVPair* pv) {
  std::vector<EncodedDocument> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(encode_document(d, emb, pv));
  return out;
}

// `pv` must be non-null exactly for PV+WE.
inline TrainResult run_bilstm(InputMode mode, const std::vector<Document>& train, const std::vector<Document>& valid,
                              const EmbeddingMatrix& emb, const PVPair* pv, const RunConfig& cfg,
                              const TrainEpochCallback& on_epoch = {}) {
  if ((mode == InputMode::kPVWE) != (pv != nullptr)) throw UsageError("run_bilstm: paragraph vectors vs mode mismatch");
  const std::string tag = mode == InputMode::kWE ? "we" : "pvwe";
  TrainConfig t = cfg.model;
  t.seed = stage_seed(cfg, "train:" + tag);
  BiLSTMModel init = make_bilstm(mode, emb.dim(), pv ? pv->dim() : 0, t.hidden, t.dropout,
                                 stage_seed(cfg, "init:" + tag));
  init.vocab_hash = emb.vocab.hash();
  init.embedding_hash = emb.hash();
  return train_bilstm(encode_all(train, emb, pv), encode_all(valid, emb, pv), emb, std::move(init), t, on_epoch);
}

inline BaselineModel run_baseline(const std::vector<Document>& train, const RunConfig& cfg) {
  SvmConfig s = cfg.svm;
  s.seed = stage_seed(cfg, "svm");
  return train_baseline(train, s);
}

inline NamedModel bilstm_predictor(std::string name, const BiLSTMModel& model, const EmbeddingMatrix& emb,
                                   const PVPair* pv) {
  check_compatible(model, emb, pv);
  return {std::move(name), [&model, &emb, pv](const Document& d) { return predict(d, emb, pv, model); }};
}

inline NamedModel baseline_predictor(std::string name, const BaselineModel& model) {
  return {std::move(name), [&model](const Document& d) {
            const SvmPrediction p = predict_baseline(model, d);
            return Prediction{p.label, sigmoid(p.margin)};
          }};
}

}  // namespace pvsent
