#include "pvsent/evaluation.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "json.hpp"

using namespace pvsent;

namespace {

constexpr Label P = Label::kPositive;
constexpr Label N = Label::kNegative;

NamedModel constant_model(std::string name, Label label) {
  return {std::move(name), [label](const Document&) { return Prediction{label, label == P ? 1.0 : 0.0}; }};
}

Document make_doc(std::string id, const std::string& text, Label label = P) {
  return Document{std::move(id), normalize(text), label, std::nullopt};
}

}  // namespace

TEST(Confusion, PerfectAgreement) {
  const auto cm = confusion({P, N, P}, {P, N, P});
  EXPECT_EQ(cm, (ConfusionMatrix{2, 0, 0, 1}));
}

TEST(Confusion, AllFalsePositives) { EXPECT_EQ(confusion({P, P}, {N, N}).fp, 2u); }

TEST(Confusion, HandCounted) {
  EXPECT_EQ(confusion({P, N, N, P, P}, {P, P, N, N, P}), (ConfusionMatrix{2, 1, 1, 1}));
}

TEST(Confusion, LengthMismatch) { EXPECT_THROW(confusion({P}, {P, N}), UsageError); }

TEST(Metrics, PerfectCase) {
  const auto r = metrics({2, 0, 0, 0});
  EXPECT_EQ(r.positive.precision, 1.0);
  EXPECT_EQ(r.positive.recall, 1.0);
  EXPECT_EQ(r.positive.f1, 1.0);
  // No negatives at all: the negative-class ratios are undefined.
  EXPECT_TRUE(r.negative.undefined);
  EXPECT_TRUE(r.undefined);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Metrics, HalfCase) {
  const auto r = metrics({1, 1, 1, 0});
  EXPECT_EQ(r.positive.precision, 0.5);
  EXPECT_EQ(r.positive.recall, 0.5);
  EXPECT_EQ(r.positive.f1, 0.5);
}

TEST(Metrics, SupportWeightedAverage) {
  // 208 positive and 204 negative test documents.
  const ConfusionMatrix cm{200, 10, 8, 194};
  const auto r = metrics(cm);
  EXPECT_EQ(r.positive.support, 208u);
  EXPECT_EQ(r.negative.support, 204u);
  const double p_pos = 200.0 / 210.0;
  const double r_pos = 200.0 / 208.0;
  const double p_neg = 194.0 / 202.0;
  const double r_neg = 194.0 / 204.0;
  const double f_pos = 2 * p_pos * r_pos / (p_pos + r_pos);
  const double f_neg = 2 * p_neg * r_neg / (p_neg + r_neg);
  EXPECT_DOUBLE_EQ(r.precision, (208.0 / 412.0) * p_pos + (204.0 / 412.0) * p_neg);
  EXPECT_DOUBLE_EQ(r.recall, (208.0 / 412.0) * r_pos + (204.0 / 412.0) * r_neg);
  EXPECT_DOUBLE_EQ(r.f1, (208.0 / 412.0) * f_pos + (204.0 / 412.0) * f_neg);
  EXPECT_DOUBLE_EQ(r.accuracy, 394.0 / 412.0);
  EXPECT_FALSE(r.undefined);
}

TEST(Metrics, ZeroDenominatorIsFlagged) {
  const auto r = metrics({0, 0, 3, 2});
  EXPECT_EQ(r.positive.precision, 0.0);
  EXPECT_TRUE(r.positive.undefined);
  EXPECT_TRUE(r.undefined);
}

TEST(Metrics, Properties) {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<Label> pred;
    std::vector<Label> gold;
    for (std::size_t i = 0; i < n; ++i) {
      pred.push_back(rng.below(2) ? P : N);
      gold.push_back(rng.below(2) ? P : N);
    }
    const auto r = metrics(confusion(pred, gold));
    for (double v : {r.precision, r.recall, r.f1, r.accuracy}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(r.f1, std::min(r.positive.f1, r.negative.f1) - 1e-15);
    EXPECT_LE(r.f1, std::max(r.positive.f1, r.negative.f1) + 1e-15);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<Label> pred2;
    std::vector<Label> gold2;
    for (std::size_t i : order) {
      pred2.push_back(pred[i]);
      gold2.push_back(gold[i]);
    }
    const auto r2 = metrics(confusion(pred2, gold2));
    EXPECT_EQ(r2.f1, r.f1);
    EXPECT_EQ(r2.precision, r.precision);

    const auto perfect = metrics(confusion(gold, gold));
    if (!perfect.undefined) {
      EXPECT_EQ(perfect.precision, 1.0);
      EXPECT_EQ(perfect.recall, 1.0);
      EXPECT_EQ(perfect.f1, 1.0);
    }
  }
}

TEST(CaseStudy, RelocatesCarrierSentencesToTheEnd) {
  const auto doc = make_doc("milk",
                            "sudah lama tidak minum ultra milk rasa stroberi. pas sekarang minum merasa enak sekali "
                            "tidak tahu kenapa. ketagihan. rasanya ingin beli sekardus gede buat diminum sendiri.");
  const auto expected = normalize(
      "sudah lama tidak minum ultra milk rasa stroberi. rasanya ingin beli sekardus gede buat diminum sendiri. pas "
      "sekarang minum merasa enak sekali tidak tahu kenapa. ketagihan.");
  const auto sentences = sentence_spans(doc.tokens);
  ASSERT_EQ(sentences.size(), 4u);
  const TokenSpan carrier{sentences[1].begin, sentences[2].end};
  const auto rec = case_study(doc, carrier, {constant_model("always-positive", P)});
  EXPECT_EQ(rec.original.tokens, doc.tokens);
  EXPECT_EQ(rec.modified.tokens, expected);
  EXPECT_EQ(rec.modified.id, doc.id);
  ASSERT_EQ(rec.outcomes.size(), 1u);
  EXPECT_FALSE(rec.outcomes[0].flipped);
}

TEST(CaseStudy, FinalCarrierIsIdentity) {
  const auto doc = make_doc("d", "harga standar. tempatnya luas. makanannya enak sekali.");
  const auto s = sentence_spans(doc.tokens);
  const auto rec = case_study(doc, s.back(), {constant_model("a", P), constant_model("b", N)});
  EXPECT_EQ(rec.modified.tokens, doc.tokens);
  for (const auto& o : rec.outcomes) EXPECT_FALSE(o.flipped);
}

TEST(CaseStudy, SpanMustBeSentenceAligned) {
  const auto doc = make_doc("d", "harga standar. makanannya enak sekali. tempatnya luas.");
  EXPECT_THROW(relocate_to_end(doc, {1, 3}), UsageError);
  EXPECT_THROW(relocate_to_end(doc, {0, 100}), UsageError);
  EXPECT_NO_THROW(relocate_to_end(doc, {3, 7}));
}

TEST(CaseStudy, FlipIndicatorReflectsBothRuns) {
  const auto doc = make_doc("d", "makanannya enak sekali. harga standar.");
  // Positive iff the word "enak" appears in the first three tokens.
  NamedModel position_sensitive{"head", [](const Document& d) {
                                  const bool hit = std::find(d.tokens.begin(), d.tokens.begin() + 3, "enak") !=
                                                   d.tokens.begin() + 3;
                                  return Prediction{hit ? P : N, hit ? 0.9 : 0.1};
                                }};
  const auto rec = case_study(doc, sentence_spans(doc.tokens)[0], {position_sensitive});
  EXPECT_EQ(rec.outcomes[0].before.label, P);
  EXPECT_EQ(rec.outcomes[0].after.label, N);
  EXPECT_TRUE(rec.outcomes[0].flipped);
  EXPECT_TRUE(rec.outcomes[0].correct_before);
  EXPECT_FALSE(rec.outcomes[0].correct_after);
}

TEST(CaseStudy, RelocationPreservesLengthAndTokens) {
  const auto docs = synth_corpus(300, PositionMode::kMixed, 17);
  for (const auto& d : docs) {
    ASSERT_TRUE(d.carrier.has_value());
    const auto m = relocate_to_end(d, *d.carrier);
    EXPECT_EQ(m.tokens.size(), d.tokens.size());
    auto a = d.tokens;
    auto b = m.tokens;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    const std::vector<std::string> carrier(d.tokens.begin() + static_cast<std::ptrdiff_t>(d.carrier->begin),
                                           d.tokens.begin() + static_cast<std::ptrdiff_t>(d.carrier->end));
    const std::vector<std::string> tail(m.tokens.end() - static_cast<std::ptrdiff_t>(carrier.size()), m.tokens.end());
    EXPECT_EQ(tail, carrier);
  }
}

TEST(CompareModels, IdenticalModelsNeverDisagree) {
  const auto docs = synth_corpus(20, PositionMode::kMixed, 1);
  const auto c = compare_models(docs, {constant_model("a", P), constant_model("b", P)});
  EXPECT_TRUE(c.disagreements.empty());
  EXPECT_EQ(c.reports.size(), 2u);
}

TEST(CompareModels, OppositeConstantModelsDisagreeEverywhere) {
  const auto docs = synth_corpus(20, PositionMode::kMixed, 1);
  const auto c = compare_models(docs, {constant_model("yes", P), constant_model("no", N)});
  ASSERT_EQ(c.disagreements.size(), docs.size());
  for (const auto& d : c.disagreements) {
    EXPECT_EQ(c.models[d.correct_model], d.gold == P ? "yes" : "no");
  }
}

TEST(Reports, TsvAndJson) {
  const auto docs = synth_corpus(10, PositionMode::kMixed, 1);
  const auto c = compare_models(docs, {constant_model("yes", P), constant_model("no", N)});
  const auto tsv = metrics_tsv(c);
  EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "model\tprecision\trecall\tf1\taccuracy\ttp\tfp\tfn\ttn\tundefined");
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 3);
  const auto j = nlohmann::json::parse(metrics_json(c));
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["model"], "yes");
  EXPECT_EQ(j[0]["confusion"]["tp"], 5);
  const auto dis = disagreements_tsv(c);
  EXPECT_EQ(std::count(dis.begin(), dis.end(), '\n'), 11);

  const auto rec = case_study(docs[0], *docs[0].carrier, {constant_model("yes", P)});
  const auto line = nlohmann::json::parse(case_study_jsonl({rec}));
  EXPECT_EQ(line["id"], docs[0].id);
  EXPECT_EQ(line["models"][0]["flipped"], false);
}

TEST(EndToEnd, MiddlePositionCaseStudyAndComparisonMatchGolden) {
  const auto train_docs = synth_corpus(240, PositionMode::kLast, 31);
  const auto test_docs = synth_corpus(30, PositionMode::kMiddle, 32);
  const auto vocab = build_vocabulary(train_docs);
  EmbeddingConfig ecfg;
  ecfg.dim = 16;
  ecfg.seed = 33;
  const auto emb = train_skipgram(train_docs, vocab, ecfg);
  PVConfig pcfg;
  pcfg.dim = 8;
  pcfg.epochs = 10;
  pcfg.seed = 34;
  const PVPair pv{train_pv(train_docs, vocab, PVMode::kDM, pcfg), train_pv(train_docs, vocab, PVMode::kDBOW, pcfg)};

  TrainConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.01;
  cfg.dropout = 0.0;
  cfg.seed = 35;
  auto fit = [&](InputMode mode) {
    const PVPair* p = mode == InputMode::kPVWE ? &pv : nullptr;
    std::vector<EncodedDocument> enc;
    for (const auto& d : train_docs) enc.push_back(encode_document(d, emb, p));
    const std::vector<EncodedDocument> tr(enc.begin(), enc.begin() + 200);
    const std::vector<EncodedDocument> va(enc.begin() + 200, enc.end());
    auto m = make_bilstm(mode, 16, p ? pv.dim() : 0, cfg.hidden, cfg.dropout, 36);
    return train_bilstm(tr, va, emb, std::move(m), cfg).model;
  };
  const auto we = fit(InputMode::kWE);
  const auto pvwe = fit(InputMode::kPVWE);
  const std::vector<NamedModel> models = {
      {"WE", [&](const Document& d) { return predict(d, emb, nullptr, we); }},
      {"PV+WE", [&](const Document& d) { return predict(d, emb, &pv, pvwe); }}};

  const auto cmp = compare_models(test_docs, models);
  ASSERT_EQ(cmp.reports.size(), 2u);

  std::ifstream golden(std::filesystem::path(PVSENT_GOLDEN_DIR) / "middle_case_study.txt");
  ASSERT_TRUE(golden) << "missing golden file";
  std::size_t disagreements = 0;
  golden >> disagreements;
  EXPECT_EQ(cmp.disagreements.size(), disagreements);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto rec = case_study(test_docs[i], *test_docs[i].carrier, models);
    std::string id;
    golden >> id;
    EXPECT_EQ(rec.original.id, id);
    for (const auto& o : rec.outcomes) {
      EXPECT_EQ(o.flipped, o.before.label != o.after.label);
      std::string before;
      std::string after;
      golden >> before >> after;
      EXPECT_EQ(label_name(o.before.label), before) << id << " " << o.model;
      EXPECT_EQ(label_name(o.after.label), after) << id << " " << o.model;
    }
  }
}
