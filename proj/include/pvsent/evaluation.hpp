#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pvsent/bilstm.hpp"
#include "pvsent/corpus.hpp"
#include "pvsent/error.hpp"

namespace pvsent {

// Positive class is label 1.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion(const std::vector<Label>& predictions, const std::vector<Label>& gold) {
  if (predictions.size() != gold.size()) throw UsageError("confusion: prediction/gold length mismatch");
  if (gold.empty()) throw UsageError("confusion: no documents");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predictions[i] == Label::kPositive;
    const bool g = gold[i] == Label::kPositive;
    if (p && g) ++cm.tp;
    else if (p && !g) ++cm.fp;
    else if (!p && g) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  // Set when a ratio had a zero denominator and was reported as 0.
  bool undefined = false;
};

struct MetricsReport {
  ConfusionMatrix cm;
  ClassMetrics positive;
  ClassMetrics negative;
  // Support-weighted averages over the two classes.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  bool undefined = false;
};

namespace detail {

inline ClassMetrics class_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassMetrics m;
  m.support = tp + fn;
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.undefined = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.f1 = 0.0;
    m.undefined = true;
  }
  return m;
}

}  // namespace detail

inline MetricsReport metrics(const ConfusionMatrix& cm) {
  const std::size_t n = cm.total();
  if (n == 0) throw UsageError("metrics: empty confusion matrix");
  MetricsReport r;
  r.cm = cm;
  r.positive = detail::class_metrics(cm.tp, cm.fp, cm.fn);
  r.negative = detail::class_metrics(cm.tn, cm.fn, cm.fp);
  const double wp = static_cast<double>(r.positive.support) / static_cast<double>(n);
  const double wn = static_cast<double>(r.negative.support) / static_cast<double>(n);
  r.precision = wp * r.positive.precision + wn * r.negative.precision;
  r.recall = wp * r.positive.recall + wn * r.negative.recall;
  r.f1 = wp * r.positive.f1 + wn * r.negative.f1;
  r.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(n);
  r.undefined = r.positive.undefined || r.negative.undefined;
  return r;
}

// ---------------------------------------------------------------------------
// Models under comparison

struct NamedModel {
  std::string name;
  std::function<Prediction(const Document&)> predict;
};

// ---------------------------------------------------------------------------
// Case study: move the sentiment-carrying sentences to the end of the document

// Sentence ranges; each sentence ends with a terminator token or at the end
// of the document.
inline std::vector<TokenSpan> sentence_spans(const std::vector<std::string>& tokens) {
  std::vector<TokenSpan> spans;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (is_sentence_terminator(tokens[i])) {
      spans.push_back({begin, i + 1});
      begin = i + 1;
    }
  }
  if (begin < tokens.size()) spans.push_back({begin, tokens.size()});
  return spans;
}

// The document with the sentences in `carrier` moved, in order, after all
// remaining sentences. `carrier` must cover whole sentences.
inline Document relocate_to_end(const Document& doc, TokenSpan carrier) {
  if (carrier.begin >= carrier.end || carrier.end > doc.tokens.size()) {
    throw UsageError("case_study: carrier span out of range");
  }
  bool begin_ok = false;
  bool end_ok = false;
  for (const auto& s : sentence_spans(doc.tokens)) {
    begin_ok = begin_ok || s.begin == carrier.begin;
    end_ok = end_ok || s.end == carrier.end;
  }
  if (!begin_ok || !end_ok) throw UsageError("case_study: carrier span is not sentence-aligned");

  Document out = doc;
  out.tokens.clear();
  const auto b = doc.tokens.begin();
  out.tokens.insert(out.tokens.end(), b, b + static_cast<std::ptrdiff_t>(carrier.begin));
  out.tokens.insert(out.tokens.end(), b + static_cast<std::ptrdiff_t>(carrier.end), doc.tokens.end());
  out.tokens.insert(out.tokens.end(), b + static_cast<std::ptrdiff_t>(carrier.begin),
                    b + static_cast<std::ptrdiff_t>(carrier.end));
  out.carrier = TokenSpan{doc.tokens.size() - carrier.size(), doc.tokens.size()};
  return out;
}

struct CaseStudyOutcome {
  std::string model;
  Prediction before;
  Prediction after;
  bool flipped = false;
  bool correct_before = false;
  bool correct_after = false;
};

struct CaseStudyRecord {
  Document original;
  Document modified;
  TokenSpan carrier;
  std::vector<CaseStudyOutcome> outcomes;
};

inline CaseStudyRecord case_study(const Document& doc, TokenSpan carrier, const std::vector<NamedModel>& models) {
  CaseStudyRecord rec;
  rec.original = doc;
  rec.carrier = carrier;
  rec.modified = relocate_to_end(doc, carrier);
  for (const auto& m : models) {
    CaseStudyOutcome o;
    o.model = m.name;
    o.before = m.predict(rec.original);
    o.after = m.predict(rec.modified);
    o.flipped = o.before.label != o.after.label;
    o.correct_before = o.before.label == doc.label;
    o.correct_after = o.after.label == doc.label;
    rec.outcomes.push_back(std::move(o));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Model comparison

struct Disagreement {
  std::size_t index = 0;
  std::string id;
  Label gold = Label::kNegative;
  std::vector<Label> predictions;  // one per model
  std::size_t correct_model = 0;   // index of the single correct model
};

struct Comparison {
  std::vector<std::string> models;
  std::vector<MetricsReport> reports;
  std::vector<std::vector<Prediction>> predictions;  // [model][doc]
  // Documents that exactly one model classifies correctly.
  std::vector<Disagreement> disagreements;
};

inline Comparison compare_models(const std::vector<Document>& test, const std::vector<NamedModel>& models) {
  if (test.empty()) throw UsageError("compare_models: empty test set");
  Comparison c;
  std::vector<Label> gold;
  for (const auto& d : test) gold.push_back(d.label);
  for (const auto& m : models) {
    c.models.push_back(m.name);
    std::vector<Prediction> preds;
    std::vector<Label> labels;
    for (const auto& d : test) {
      preds.push_back(m.predict(d));
      labels.push_back(preds.back().label);
    }
    c.reports.push_back(metrics(confusion(labels, gold)));
    c.predictions.push_back(std::move(preds));
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t n_correct = 0;
    Disagreement dis;
    for (std::size_t k = 0; k < models.size(); ++k) {
      const Label l = c.predictions[k][i].label;
      dis.predictions.push_back(l);
      if (l == gold[i]) {
        ++n_correct;
        dis.correct_model = k;
      }
    }
    if (n_correct == 1) {
      dis.index = i;
      dis.id = test[i].id;
      dis.gold = gold[i];
      c.disagreements.push_back(std::move(dis));
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace detail {

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string metrics_tsv(const Comparison& c) {
  std::string out = "model\tprecision\trecall\tf1\taccuracy\ttp\tfp\tfn\ttn\tundefined\n";
  for (std::size_t k = 0; k < c.models.size(); ++k) {
    const auto& r = c.reports[k];
    out += c.models[k] + '\t' + detail::fixed6(r.precision) + '\t' + detail::fixed6(r.recall) + '\t' +
           detail::fixed6(r.f1) + '\t' + detail::fixed6(r.accuracy) + '\t' + std::to_string(r.cm.tp) + '\t' +
           std::to_string(r.cm.fp) + '\t' + std::to_string(r.cm.fn) + '\t' + std::to_string(r.cm.tn) + '\t' +
           (r.undefined ? "1" : "0") + '\n';
  }
  return out;
}

inline nlohmann::ordered_json class_json(const ClassMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support},
          {"undefined", m.undefined}};
}

inline std::string metrics_json(const Comparison& c) {
  nlohmann::ordered_json root = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < c.models.size(); ++k) {
    const auto& r = c.reports[k];
    root.push_back({{"model", c.models[k]},
                    {"precision", r.precision},
                    {"recall", r.recall},
                    {"f1", r.f1},
                    {"accuracy", r.accuracy},
                    {"confusion", {{"tp", r.cm.tp}, {"fp", r.cm.fp}, {"fn", r.cm.fn}, {"tn", r.cm.tn}}},
                    {"positive", class_json(r.positive)},
                    {"negative", class_json(r.negative)},
                    {"undefined", r.undefined}});
  }
  return root.dump(2) + "\n";
}

inline std::string disagreements_tsv(const Comparison& c) {
  std::string out = "id\tgold";
  for (const auto& m : c.models) out += '\t' + m;
  out += "\tcorrect_model\n";
  for (const auto& d : c.disagreements) {
    out += d.id + '\t' + label_name(d.gold);
    for (Label l : d.predictions) out += std::string("\t") + label_name(l);
    out += '\t' + c.models[d.correct_model] + '\n';
  }
  return out;
}

inline std::string case_study_jsonl(const std::vector<CaseStudyRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.original.id;
    j["label"] = label_name(r.original.label);
    j["carrier"] = {r.carrier.begin, r.carrier.end};
    j["original"] = join_tokens(r.original.tokens);
    j["modified"] = join_tokens(r.modified.tokens);
    nlohmann::ordered_json models = nlohmann::ordered_json::array();
    for (const auto& o : r.outcomes) {
      models.push_back({{"model", o.model},
                        {"before", label_name(o.before.label)},
                        {"before_probability", o.before.probability},
                        {"after", label_name(o.after.label)},
                        {"after_probability", o.after.probability},
                        {"flipped", o.flipped},
                        {"correct_before", o.correct_before},
                        {"correct_after", o.correct_after}});
    }
    j["models"] = std::move(models);
    out += j.dump() + '\n';
  }
  return out;
}

}  // namespace pvsent
