#include "pvsent/bilstm.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"

using namespace pvsent;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void randomize(BiLSTMModel& m, Rng& rng, double scale = 0.5) {
  for (auto span : m.parameters()) fill_uniform(span, scale, rng);
}

RowMatrix random_input(Eigen::Index n, Eigen::Index d, Rng& rng) {
  RowMatrix x(n, d);
  fill_uniform(as_span(x), 1.0, rng);
  return x;
}

EmbeddingMatrix random_embeddings(const std::vector<Document>& docs, std::size_t dim, std::uint64_t seed) {
  EmbeddingMatrix e;
  e.vocab = build_vocabulary(docs);
  const auto v = static_cast<Eigen::Index>(e.vocab.size());
  e.input.resize(v, static_cast<Eigen::Index>(dim));
  e.output = RowMatrix::Zero(v, static_cast<Eigen::Index>(dim));
  Rng rng(seed);
  fill_uniform(as_span(e.input), 1.0, rng);
  return e;
}

Document make_doc(std::string id, std::vector<std::string> tokens, Label label = Label::kPositive) {
  return Document{std::move(id), std::move(tokens), label, std::nullopt};
}

struct ScalarCell {
  double wi, wf, wo, wg, ui, uf, uo, ug, bi, bf, bo, bg;

  static ScalarCell from(const LSTMDirectionParams& p) {
    return {p.W(0, 0), p.W(1, 0), p.W(2, 0), p.W(3, 0), p.U(0, 0), p.U(1, 0),
            p.U(2, 0), p.U(3, 0), p.b(0),    p.b(1),    p.b(2),    p.b(3)};
  }

  // (h, c) after one step.
  std::pair<double, double> step(double x, double h, double c) const {
    const double i = sig(wi * x + ui * h + bi);
    const double f = sig(wf * x + uf * h + bf);
    const double o = sig(wo * x + uo * h + bo);
    const double g = std::tanh(wg * x + ug * h + bg);
    const double c_new = f * c + i * g;
    return {o * std::tanh(c_new), c_new};
  }
};

}  // namespace

TEST(BuildInputMatrix, PvThenWordColumns) {
  const auto d = make_doc("d", {"saya", "suka", "ini"});
  const auto emb = random_embeddings({d}, 500, 1);
  Rng rng(2);
  ParagraphVector pv(200);
  fill_uniform(as_span(pv), 1.0, rng);
  const auto x = build_input_matrix(d, emb, InputMode::kPVWE, pv);
  EXPECT_EQ(x.rows(), 3);
  EXPECT_EQ(x.cols(), 700);
  for (Eigen::Index t = 0; t < 3; ++t) {
    EXPECT_EQ(Vector(x.row(t).head(200).transpose()), pv);
    EXPECT_EQ(Vector(x.row(t).tail(500).transpose()), lookup(emb, d.tokens[static_cast<std::size_t>(t)]));
  }
}

TEST(BuildInputMatrix, WordOnlyMode) {
  const auto d = make_doc("d", {"enak"});
  const auto emb = random_embeddings({d}, 500, 1);
  const auto x = build_input_matrix(d, emb, InputMode::kWE, std::nullopt);
  EXPECT_EQ(x.rows(), 1);
  EXPECT_EQ(x.cols(), 500);
  EXPECT_EQ(Vector(x.row(0).transpose()), lookup(emb, "enak"));
}

TEST(BuildInputMatrix, SameWordDifferentParagraphVectors) {
  const auto a = make_doc("a", {"enak", "sekali"});
  const auto b = make_doc("b", {"tidak", "enak"});
  const auto emb = random_embeddings({a, b}, 8, 1);
  const auto xa = build_input_matrix(a, emb, InputMode::kPVWE, ParagraphVector(Vector::Constant(4, 0.1)));
  const auto xb = build_input_matrix(b, emb, InputMode::kPVWE, ParagraphVector(Vector::Constant(4, -0.1)));
  EXPECT_NE(Vector(xa.row(0).transpose()), Vector(xb.row(1).transpose()));
  EXPECT_EQ(Vector(xa.row(0).tail(8).transpose()), Vector(xb.row(1).tail(8).transpose()));
}

TEST(BuildInputMatrix, MissingParagraphVectorOrEmptyDoc) {
  const auto d = make_doc("d", {"enak"});
  const auto emb = random_embeddings({d}, 4, 1);
  EXPECT_THROW(build_input_matrix(d, emb, InputMode::kPVWE, std::nullopt), UsageError);
  EXPECT_THROW(build_input_matrix(make_doc("e", {}), emb, InputMode::kWE, std::nullopt), UsageError);
}

TEST(BuildInputMatrix, ParagraphColumnsConstantAcrossRows) {
  const auto docs = synth_corpus(20, PositionMode::kMixed, 3);
  const auto emb = random_embeddings(docs, 6, 4);
  Rng rng(5);
  for (const auto& d : docs) {
    ParagraphVector pv(10);
    fill_uniform(as_span(pv), 1.0, rng);
    const auto x = build_input_matrix(d, emb, InputMode::kPVWE, pv);
    for (Eigen::Index c = 0; c < 10; ++c) {
      const auto col = x.col(c);
      EXPECT_EQ(col.maxCoeff(), col.minCoeff());
    }
  }
}

TEST(LstmCell, ZeroParamsZeroState) {
  const auto p = LSTMDirectionParams::zeros(3, 2);
  const auto out = lstm_cell_forward(Vector::Ones(2), Vector::Zero(3), Vector::Zero(3), p);
  EXPECT_EQ(out.h, Vector::Zero(3));
  EXPECT_EQ(out.c, Vector::Zero(3));
}

TEST(LstmCell, ZeroParamsUnitCell) {
  const auto p = LSTMDirectionParams::zeros(3, 2);
  const auto out = lstm_cell_forward(Vector::Ones(2), Vector::Zero(3), Vector::Ones(3), p);
  for (Eigen::Index k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(out.c[k], 0.5);
    EXPECT_NEAR(out.h[k], 0.231059, 1e-6);
    EXPECT_DOUBLE_EQ(out.h[k], 0.5 * std::tanh(0.5));
  }
}

TEST(LstmCell, ScalarOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = LSTMDirectionParams::zeros(1, 1);
    fill_uniform(as_span(p.W), 2.0, rng);
    fill_uniform(as_span(p.U), 2.0, rng);
    fill_uniform(as_span(p.b), 2.0, rng);
    const double x = rng.uniform(-2, 2);
    const double h = rng.uniform(-1, 1);
    const double c = rng.uniform(-2, 2);
    const auto out = lstm_cell_forward(Vector::Constant(1, x), Vector::Constant(1, h), Vector::Constant(1, c), p);
    const auto [h_ref, c_ref] = ScalarCell::from(p).step(x, h, c);
    EXPECT_NEAR(out.h[0], h_ref, 1e-12);
    EXPECT_NEAR(out.c[0], c_ref, 1e-12);
  }
}

TEST(LstmCell, ShapeMismatch) {
  const auto p = LSTMDirectionParams::zeros(3, 2);
  EXPECT_THROW(lstm_cell_forward(Vector::Ones(3), Vector::Zero(3), Vector::Zero(3), p), UsageError);
  EXPECT_THROW(lstm_cell_forward(Vector::Ones(2), Vector::Zero(2), Vector::Zero(3), p), UsageError);
}

TEST(BiLstmForward, ZeroModelGivesHalf) {
  const auto m = make_zero_bilstm(InputMode::kWE, 5, 0, 4);
  Rng rng(1);
  const auto r = bilstm_forward(random_input(3, 5, rng), m);
  EXPECT_EQ(r.probability, 0.5);
  EXPECT_EQ(r.cache.feature, Vector::Zero(8));
}

TEST(BiLstmForward, SingleRowBothDirectionsSeeSameInput) {
  auto m = make_zero_bilstm(InputMode::kWE, 3, 0, 2, 0.0);
  Rng rng(4);
  randomize(m, rng);
  m.backward = m.forward;
  const auto r = bilstm_forward(random_input(1, 3, rng), m);
  EXPECT_EQ(Vector(r.cache.feature.head(2)), Vector(r.cache.feature.tail(2)));
  EXPECT_DOUBLE_EQ(r.probability, sig(m.w_out.dot(r.cache.feature) + m.b_out));
}

TEST(BiLstmForward, TwoStepScalarOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    auto m = make_zero_bilstm(InputMode::kWE, 1, 0, 1, 0.0);
    randomize(m, rng, 1.5);
    const double x1 = rng.uniform(-1, 1);
    const double x2 = rng.uniform(-1, 1);
    RowMatrix x(2, 1);
    x << x1, x2;
    const auto f = ScalarCell::from(m.forward);
    const auto b = ScalarCell::from(m.backward);
    auto [hf1, cf1] = f.step(x1, 0.0, 0.0);
    auto [hf2, cf2] = f.step(x2, hf1, cf1);
    auto [hb1, cb1] = b.step(x2, 0.0, 0.0);
    auto [hb2, cb2] = b.step(x1, hb1, cb1);
    (void)cf2;
    (void)cb2;
    const double p_ref = sig(m.w_out[0] * hf2 + m.w_out[1] * hb2 + m.b_out);
    EXPECT_NEAR(bilstm_forward(x, m).probability, p_ref, 1e-12);
  }
}

TEST(BiLstmForward, DirectionSymmetry) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = make_zero_bilstm(InputMode::kWE, 4, 0, 3, 0.0);
    randomize(m, rng);
    const auto x = random_input(6, 4, rng);
    auto swapped = m;
    std::swap(swapped.forward, swapped.backward);
    swapped.w_out << m.w_out.tail(3), m.w_out.head(3);
    const RowMatrix reversed = x.colwise().reverse();
    EXPECT_NEAR(bilstm_forward(x, m).probability, bilstm_forward(reversed, swapped).probability, 1e-12);
  }
}

TEST(BiLstmForward, DeterministicWithoutDropout) {
  Rng rng(3);
  auto m = make_bilstm(InputMode::kWE, 4, 0, 5, 0.5, 17);
  const auto x = random_input(7, 4, rng);
  EXPECT_EQ(bilstm_forward(x, m).probability, bilstm_forward(x, m).probability);
  EXPECT_EQ(bilstm_forward(x, m).cache.mask, Vector::Ones(10));
}

TEST(BiLstmForward, DropoutReproducibleWithMaskSeed) {
  Rng rng(3);
  auto m = make_bilstm(InputMode::kWE, 4, 0, 16, 0.5, 17);
  const auto x = random_input(7, 4, rng);
  const auto a = bilstm_forward(x, m, {true, 99});
  const auto b = bilstm_forward(x, m, {true, 99});
  const auto c = bilstm_forward(x, m, {true, 100});
  EXPECT_EQ(a.probability, b.probability);
  EXPECT_EQ(a.cache.mask, b.cache.mask);
  EXPECT_NE(a.cache.mask, c.cache.mask);
  for (Eigen::Index k = 0; k < a.cache.mask.size(); ++k) {
    EXPECT_TRUE(a.cache.mask[k] == 0.0 || a.cache.mask[k] == 2.0);
  }
}

TEST(BiLstmBackward, MatchesFiniteDifferencesForEveryTensor) {
  Rng rng(31);
  const char* names[] = {"fwd.W", "fwd.U", "fwd.b", "bwd.W", "bwd.U", "bwd.b", "w_out", "b_out"};
  for (int trial = 0; trial < 24; ++trial) {
    auto m = make_zero_bilstm(InputMode::kWE, 6, 0, 4, trial % 2 ? 0.5 : 0.0);
    randomize(m, rng, 1.0);
    const auto x = random_input(5, 6, rng);
    const int y = static_cast<int>(rng.below(2));
    const ForwardOptions opts{true, rng.next()};
    const auto fr = bilstm_forward(x, m, opts);
    const auto grads = bilstm_backward(m, fr.cache, bce_loss(fr.probability, y).grad);
    auto loss = [&] { return bce_loss(bilstm_forward(x, m, opts).probability, y).loss; };
    const auto params = m.parameters();
    const auto analytic = grads.tensors();
    for (std::size_t k = 0; k < params.size(); ++k) {
      // Below h = 1e-4 roundoff dominates for coordinates with gradients near 1e-8.
      const auto rep = grad_check(params[k], analytic[k], loss, {1e-4, 1e-4});
      EXPECT_TRUE(rep.passed) << "trial " << trial << " " << names[k] << " err " << rep.max_relative_error
                              << " at " << rep.worst_index;
    }
  }
}

TEST(BiLstmBackward, ZeroUpstreamGradient) {
  Rng rng(8);
  auto m = make_zero_bilstm(InputMode::kWE, 3, 0, 4, 0.0);
  randomize(m, rng);
  const auto fr = bilstm_forward(random_input(4, 3, rng), m, {true, 1});
  const auto g = bilstm_backward(m, fr.cache, 0.0);
  for (auto t : g.tensors()) {
    for (double v : t) EXPECT_EQ(v, 0.0);
  }
}

TEST(BiLstmBackward, OutputBiasGradient) {
  Rng rng(8);
  auto m = make_zero_bilstm(InputMode::kWE, 3, 0, 4, 0.0);
  randomize(m, rng);
  const auto fr = bilstm_forward(random_input(4, 3, rng), m, {true, 1});
  const double d_prob = -1.7;
  const double p = sig(fr.cache.logit);
  EXPECT_NEAR(bilstm_backward(m, fr.cache, d_prob).b_out, d_prob * p * (1.0 - p), 1e-15);
}

TEST(BiLstmBackward, StaleCacheRejected) {
  Rng rng(8);
  auto m = make_bilstm(InputMode::kWE, 3, 0, 4, 0.0, 2);
  const auto fr = bilstm_forward(random_input(4, 3, rng), m, {true, 1});
  auto g = bilstm_backward(m, fr.cache, 0.3);
  AdamState adam;
  apply_gradients(m, g, adam);
  EXPECT_THROW(bilstm_backward(m, fr.cache, 0.3), UsageError);
}

TEST(BiLstmBackward, BatchedProjectionMatchesReferencePath) {
  const auto docs = synth_corpus(6, PositionMode::kMixed, 13);
  const auto emb = random_embeddings(docs, 7, 2);
  Rng rng(14);
  for (InputMode mode : {InputMode::kWE, InputMode::kPVWE}) {
    const std::size_t pd = mode == InputMode::kPVWE ? 5 : 0;
    auto m = make_bilstm(mode, 7, pd, 4, 0.5, 3);
    std::vector<EncodedDocument> enc;
    for (const auto& d : docs) {
      EncodedDocument e = encode_document(d, emb, nullptr);
      if (pd) {
        e.pv = ParagraphVector(static_cast<Eigen::Index>(pd));
        fill_uniform(as_span(*e.pv), 1.0, rng);
      }
      enc.push_back(std::move(e));
    }
    auto reference = BiLSTMGradients::zeros_like(m);
    auto batched = BiLSTMGradients::zeros_like(m);
    detail::BatchProjector projector(m, emb, enc);
    for (std::size_t k = 0; k < enc.size(); ++k) {
      const ForwardOptions opts{true, 50 + k};
      const auto ref = bilstm_forward(materialize(enc[k], emb), m, opts);
      const auto fast = projector.forward(enc[k], opts);
      EXPECT_NEAR(ref.probability, fast.probability, 1e-12);
      const double g = bce_loss(ref.probability, enc[k].label).grad;
      bilstm_backward(m, ref.cache, g, reference);
      projector.backward(enc[k], fast.cache, g, batched);
    }
    projector.flush(batched);
    const auto a = reference.tensors();
    const auto b = batched.tensors();
    for (std::size_t t = 0; t < a.size(); ++t) {
      for (std::size_t i = 0; i < a[t].size(); ++i) EXPECT_NEAR(a[t][i], b[t][i], 1e-12) << "tensor " << t << " index " << i;
    }
  }
}

TEST(TrainBiLstm, FullBatchLossDecreasesForFiftyEpochs) {
  const auto docs = synth_corpus(10, PositionMode::kLast, 6);
  const auto emb = random_embeddings(docs, 8, 7);
  std::vector<EncodedDocument> enc;
  for (const auto& d : docs) enc.push_back(encode_document(d, emb, nullptr));
  TrainConfig cfg;
  cfg.hidden = 6;
  cfg.epochs = 51;
  cfg.batch_size = docs.size();
  cfg.learning_rate = 1e-3;
  cfg.dropout = 0.0;
  cfg.patience = 1000;
  const auto model = make_bilstm(InputMode::kWE, 8, 0, cfg.hidden, cfg.dropout, 3);
  // With one batch per epoch, the epoch's training loss is measured before its update.
  const auto result = train_bilstm(enc, enc, emb, model, cfg);
  ASSERT_EQ(result.log.size(), 51u);
  for (std::size_t e = 1; e < result.log.size(); ++e) {
    EXPECT_LT(result.log[e].train_loss, result.log[e - 1].train_loss) << "epoch " << e + 1;
  }
}

TEST(TrainBiLstm, EarlyStoppingKeepsBestSnapshot) {
  const auto docs = synth_corpus(40, PositionMode::kLast, 6);
  const auto emb = random_embeddings(docs, 8, 7);
  std::vector<EncodedDocument> enc;
  for (const auto& d : docs) enc.push_back(encode_document(d, emb, nullptr));
  const std::vector<EncodedDocument> train(enc.begin(), enc.begin() + 30);
  const std::vector<EncodedDocument> valid(enc.begin() + 30, enc.end());
  TrainConfig cfg;
  cfg.hidden = 4;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  cfg.patience = 1;
  const auto r = train_bilstm(train, valid, emb, make_bilstm(InputMode::kWE, 8, 0, 4, 0.5, 1), cfg);
  double best = 1e9;
  for (const auto& rec : r.log) best = std::min(best, rec.valid_loss);
  EXPECT_DOUBLE_EQ(r.log[r.best_epoch - 1].valid_loss, best);
  EXPECT_DOUBLE_EQ(evaluate_encoded(r.model, valid, emb).loss, best);
  const auto again = train_bilstm(train, valid, emb, make_bilstm(InputMode::kWE, 8, 0, 4, 0.5, 1), cfg);
  EXPECT_TRUE(again.model.same_parameters(r.model));
}

TEST(Predict, ZeroModelTiesToPositive) {
  const auto d = make_doc("d", {"biasa", "saja"});
  const auto emb = random_embeddings({d}, 5, 1);
  const auto m = make_zero_bilstm(InputMode::kWE, 5, 0, 3);
  const auto p = predict(d, emb, nullptr, m);
  EXPECT_EQ(p.probability, 0.5);
  EXPECT_EQ(p.label, Label::kPositive);
  EXPECT_EQ(decide(0.5 - 1e-12), Label::kNegative);
}

TEST(Predict, ModeMismatch) {
  const auto d = make_doc("d", {"biasa", "saja"});
  const auto emb = random_embeddings({d}, 5, 1);
  const auto we = make_zero_bilstm(InputMode::kWE, 5, 0, 3);
  const auto pvwe = make_zero_bilstm(InputMode::kPVWE, 5, 4, 3);
  PVPair pv;
  pv.dm.config.dim = 2;
  pv.dbow.config.dim = 2;
  EXPECT_THROW(predict(d, emb, nullptr, pvwe), DataError);
  EXPECT_THROW(predict(d, emb, &pv, we), DataError);
  auto stamped = we;
  stamped.embedding_hash = emb.hash() + 1;
  EXPECT_THROW(predict(d, emb, nullptr, stamped), DataError);
}

TEST(Predict, Deterministic) {
  const auto docs = synth_corpus(4, PositionMode::kMixed, 2);
  const auto emb = random_embeddings(docs, 5, 1);
  const auto m = make_bilstm(InputMode::kWE, 5, 0, 3, 0.5, 4);
  const auto a = predict(docs[0], emb, nullptr, m);
  const auto b = predict(docs[0], emb, nullptr, m);
  EXPECT_EQ(a.probability, b.probability);
  EXPECT_EQ(a.label, b.label);
}

TEST(Predict, HeldOutSentimentLastPositiveMatchesGolden) {
  const auto corpus = synth_corpus(200, PositionMode::kLast, 2024);
  const auto heldout = synth_corpus(20, PositionMode::kLast, 4048);
  const auto vocab = build_vocabulary(corpus);
  EmbeddingConfig ecfg;
  ecfg.dim = 16;
  ecfg.epochs = 20;
  ecfg.seed = 5;
  const auto emb = train_skipgram(corpus, vocab, ecfg);
  std::vector<EncodedDocument> enc;
  for (const auto& d : corpus) enc.push_back(encode_document(d, emb, nullptr));
  const std::vector<EncodedDocument> train(enc.begin(), enc.begin() + 180);
  const std::vector<EncodedDocument> valid(enc.begin() + 180, enc.end());
  TrainConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.03;
  cfg.dropout = 0.0;
  cfg.seed = 6;
  const auto r = train_bilstm(train, valid, emb, make_bilstm(InputMode::kWE, 16, 0, 8, cfg.dropout, 7), cfg);

  const Document* target = nullptr;
  for (const auto& d : heldout) {
    if (d.label == Label::kPositive) {
      target = &d;
      break;
    }
  }
  ASSERT_NE(target, nullptr);
  const auto p = predict(*target, emb, nullptr, r.model);
  EXPECT_EQ(p.label, Label::kPositive);

  std::ifstream golden(std::filesystem::path(PVSENT_GOLDEN_DIR) / "sentiment_last_prediction.txt");
  ASSERT_TRUE(golden) << "missing golden file";
  std::string id;
  std::string label;
  double probability = 0.0;
  golden >> id >> label >> probability;
  EXPECT_EQ(target->id, id);
  EXPECT_EQ(label_name(p.label), label);
  EXPECT_NEAR(p.probability, probability, 1e-6);
}

TEST(SaveLoad, RoundTrip) {
  auto m = make_bilstm(InputMode::kPVWE, 5, 4, 3, 0.25, 8);
  m.vocab_hash = 11;
  m.embedding_hash = 12;
  const auto path = std::filesystem::temp_directory_path() / "pvsent_bilstm_test.bin";
  save_bilstm(m, path);
  const auto loaded = load_bilstm(path);
  EXPECT_TRUE(loaded.same_parameters(m));
  EXPECT_EQ(loaded.vocab_hash, 11u);
  EXPECT_EQ(loaded.embedding_hash, 12u);
  EXPECT_EQ(loaded.pv_dim, 4u);
  EXPECT_EQ(encode_bilstm(loaded), encode_bilstm(m));
  const auto bytes = encode_bilstm(m);
  try {
    decode_bilstm(bytes.substr(0, bytes.size() - 3));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("corrupt bilstm model file"), std::string::npos);
  }
}

TEST(MakeBiLstm, InitializationContract) {
  const auto m = make_bilstm(InputMode::kPVWE, 500, 200, 128, 0.5, 1);
  EXPECT_EQ(m.input_size(), 700u);
  EXPECT_EQ(m.forward.W.rows(), 4 * 128);
  EXPECT_EQ(m.forward.b_gate(Gate::kForget), Vector::Ones(128));
  EXPECT_EQ(m.forward.b_gate(Gate::kInput), Vector::Zero(128));
  EXPECT_EQ(m.b_out, 0.0);
  EXPECT_EQ(make_bilstm(InputMode::kWE, 500, 0, 128, 0.5, 1).input_size(), 500u);
  EXPECT_THROW(make_bilstm(InputMode::kWE, 5, 0, 3, 1.0, 1), UsageError);
}
