#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pvsent/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pvsent;

namespace {

struct Options {
  RunConfig run;
  fs::path out = "run";
  std::string mode;
  std::size_t n_docs = 200;
  fs::path corpus;
  fs::path normalization;
  fs::path input;
  std::string text;
};

// Artifact locations inside the run directory.
struct Layout {
  fs::path dir;

  fs::path corpus() const { return dir / "corpus.jsonl"; }
  fs::path train() const { return dir / "train.jsonl"; }
  fs::path valid() const { return dir / "valid.jsonl"; }
  fs::path vocab() const { return dir / "vocab.tsv"; }
  fs::path stats() const { return dir / "stats.json"; }
  fs::path embeddings() const { return dir / "embeddings.bin"; }
  fs::path pv_dm() const { return dir / "pv_dm.bin"; }
  fs::path pv_dbow() const { return dir / "pv_dbow.bin"; }
  fs::path model(ModelKind k) const { return dir / (std::string("model_") + model_kind_tag(k) + ".bin"); }
  fs::path train_log(ModelKind k) const { return dir / (std::string("train_log_") + model_kind_tag(k) + ".tsv"); }
  fs::path reports() const { return dir / "reports"; }
};

void summary(const Options& o, const std::string& what) {
  std::cout << what << " (seed " << o.run.seed << ")\n";
}

void require(const fs::path& path, const std::string& command) {
  if (!fs::exists(path)) {
    throw DataError("missing " + path.string() + "; run `pvsent " + command + "` first");
  }
}

NormalizationTable normalization(const Options& o) {
  return o.normalization.empty() ? NormalizationTable{} : load_normalization_table(o.normalization);
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string stats_json(const std::vector<std::pair<std::string, CorpusStats>>& parts) {
  nlohmann::ordered_json j;
  for (const auto& [name, s] : parts) {
    j[name] = {{"documents", s.total()},
               {"positive", s.positive},
               {"negative", s.negative},
               {"vocabulary", s.vocab_size},
               {"max_sequence_length", s.max_sequence_length}};
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Stages

void cmd_synth(const Options& o, const Layout& l) {
  const PositionMode where = parse_position_mode(o.mode.empty() ? "mixed" : o.mode);
  const auto docs = synth_corpus(o.n_docs, where, stage_seed(o.run, "synth"));
  save_corpus(docs, l.corpus());
  summary(o, "synth: wrote " + std::to_string(docs.size()) + " " + position_mode_name(where) + " documents to " +
                 l.corpus().string());
}

void cmd_preprocess(const Options& o, const Layout& l) {
  const fs::path source = o.corpus.empty() ? l.corpus() : o.corpus;
  if (o.corpus.empty()) require(source, "synth");
  const auto docs = load_corpus(source, normalization(o));
  const Split s = run_split(docs, o.run);
  save_corpus(s.train, l.train());
  save_corpus(s.validation, l.valid());
  write_file_atomic(l.vocab(), build_vocabulary(s.train, o.run.min_count).to_tsv());
  write_file_atomic(l.stats(), stats_json({{"corpus", corpus_stats(docs)},
                                           {"train", corpus_stats(s.train)},
                                           {"validation", corpus_stats(s.validation)}}));
  summary(o, "preprocess: " + std::to_string(s.train.size()) + " train / " + std::to_string(s.validation.size()) +
                 " validation documents");
}

void ensure_split(const Options& o, const Layout& l) {
  if (!fs::exists(l.train()) || !fs::exists(l.valid())) cmd_preprocess(o, l);
}

void cmd_train_embeddings(const Options& o, const Layout& l) {
  ensure_split(o, l);
  const auto emb = run_embeddings(load_corpus(l.train()), o.run);
  save_embeddings(emb, l.embeddings());
  summary(o, "train-embeddings: " + std::to_string(emb.vocab.size()) + " x " + std::to_string(emb.dim()) +
                 " embeddings written to " + l.embeddings().string());
}

void cmd_train_pv(const Options& o, const Layout& l) {
  ensure_split(o, l);
  const PVPair pv = run_paragraph_vectors(load_corpus(l.train()), o.run);
  save_pv(pv.dm, l.pv_dm());
  save_pv(pv.dbow, l.pv_dbow());
  summary(o, "train-pv: " + std::to_string(pv.dm.doc_ids.size()) + " documents, PV-DM and PV-DBOW of size " +
                 std::to_string(pv.dm.dim()) + " written");
}

EmbeddingMatrix load_emb(const Layout& l) {
  require(l.embeddings(), "train-embeddings");
  return load_embeddings(l.embeddings());
}

PVPair load_pv_pair(const Layout& l) {
  require(l.pv_dm(), "train-pv");
  require(l.pv_dbow(), "train-pv");
  PVPair pv{load_pv(l.pv_dm()), load_pv(l.pv_dbow())};
  if (pv.dm.mode != PVMode::kDM || pv.dbow.mode != PVMode::kDBOW) throw DataError("paragraph vector files swapped");
  return pv;
}

void cmd_train(const Options& o, const Layout& l) {
  const ModelKind kind = parse_model_kind(o.mode.empty() ? "WE" : o.mode);
  ensure_split(o, l);
  const auto train = load_corpus(l.train());
  const auto valid = load_corpus(l.valid());

  if (kind == ModelKind::kBaseline) {
    const BaselineModel m = run_baseline(train, o.run);
    save_baseline(m, l.model(kind));
    std::vector<SparseVector> x;
    std::vector<Label> y;
    for (const auto& d : train) {
      x.push_back(m.vectorizer.transform(d));
      y.push_back(d.label);
    }
    std::size_t correct = 0;
    for (const auto& d : valid) correct += predict_baseline(m, d).label == d.label;
    const double acc = static_cast<double>(correct) / static_cast<double>(valid.size());
    write_file_atomic(l.train_log(kind), "epochs\tobjective\tvalid_accuracy\n" + std::to_string(m.svm.config.epochs) +
                                             '\t' + fmt(svm_objective(m.svm, x, y)) + '\t' + fmt(acc) + '\n');
    summary(o, "train: baseline validation accuracy " + fmt(acc, "%.4f"));
    return;
  }

  if (!fs::exists(l.embeddings())) cmd_train_embeddings(o, l);
  const EmbeddingMatrix emb = load_emb(l);
  std::optional<PVPair> pv;
  if (kind == ModelKind::kPVWE) {
    if (!fs::exists(l.pv_dm()) || !fs::exists(l.pv_dbow())) cmd_train_pv(o, l);
    pv = load_pv_pair(l);
  }
  const InputMode mode = kind == ModelKind::kWE ? InputMode::kWE : InputMode::kPVWE;
  const TrainResult r = run_bilstm(mode, train, valid, emb, pv ? &*pv : nullptr, o.run);
  save_bilstm(r.model, l.model(kind));
  std::string log = "epoch\ttrain_loss\tvalid_loss\tvalid_accuracy\n";
  for (const auto& e : r.log) {
    log += std::to_string(e.epoch) + '\t' + fmt(e.train_loss, "%.9f") + '\t' + fmt(e.valid_loss, "%.9f") + '\t' +
           fmt(e.valid_accuracy) + '\n';
  }
  write_file_atomic(l.train_log(kind), log);
  const auto& best = r.log[r.best_epoch - 1];
  summary(o, std::string("train: ") + model_kind_name(kind) + " best epoch " + std::to_string(r.best_epoch) + " of " +
                 std::to_string(r.log.size()) + ", validation accuracy " + fmt(best.valid_accuracy, "%.4f"));
}

// Trained models available for scoring, loaded once.
struct ModelSet {
  std::optional<EmbeddingMatrix> emb;
  std::optional<PVPair> pv;
  std::optional<BiLSTMModel> we;
  std::optional<BiLSTMModel> pvwe;
  std::optional<BaselineModel> baseline;
  std::vector<NamedModel> models;
};

// An explicit --mode selects one model; otherwise every trained model is used.
void load_models(const Options& o, const Layout& l, ModelSet& set) {
  std::vector<ModelKind> kinds;
  if (!o.mode.empty()) {
    kinds.push_back(parse_model_kind(o.mode));
    require(l.model(kinds[0]), std::string("train --mode ") + model_kind_name(kinds[0]));
  } else {
    for (ModelKind k : {ModelKind::kWE, ModelKind::kPVWE, ModelKind::kBaseline}) {
      if (fs::exists(l.model(k))) kinds.push_back(k);
    }
    if (kinds.empty()) throw DataError("no trained model in " + l.dir.string() + "; run `pvsent train` first");
  }
  for (ModelKind k : kinds) {
    if (k == ModelKind::kBaseline) {
      set.baseline = load_baseline(l.model(k));
      continue;
    }
    if (!set.emb) set.emb = load_emb(l);
    if (k == ModelKind::kWE) {
      set.we = load_bilstm(l.model(k));
    } else {
      set.pvwe = load_bilstm(l.model(k));
      set.pv = load_pv_pair(l);
    }
  }
  if (set.we) set.models.push_back(bilstm_predictor("WE", *set.we, *set.emb, nullptr));
  if (set.pvwe) set.models.push_back(bilstm_predictor("PV+WE", *set.pvwe, *set.emb, &*set.pv));
  if (set.baseline) set.models.push_back(baseline_predictor("baseline", *set.baseline));
}

std::vector<Document> scored_documents(const Options& o, const Layout& l) {
  if (!o.input.empty()) return load_corpus(o.input, normalization(o));
  require(l.valid(), "preprocess");
  return load_corpus(l.valid());
}

void cmd_evaluate(const Options& o, const Layout& l) {
  ModelSet set;
  load_models(o, l, set);
  const auto docs = scored_documents(o, l);
  const Comparison c = compare_models(docs, set.models);
  write_file_atomic(l.reports() / "metrics.tsv", metrics_tsv(c));
  write_file_atomic(l.reports() / "metrics.json", metrics_json(c));
  write_file_atomic(l.reports() / "disagreements.tsv", disagreements_tsv(c));
  std::string line = "evaluate: " + std::to_string(docs.size()) + " documents;";
  for (std::size_t k = 0; k < c.models.size(); ++k) {
    line += " " + c.models[k] + " F1 " + fmt(c.reports[k].f1, "%.4f");
  }
  summary(o, line + "; " + std::to_string(c.disagreements.size()) + " disagreements");
}

void cmd_predict(const Options& o, const Layout& l) {
  ModelSet set;
  load_models(o, l, set);
  if (!o.text.empty()) {
    const Document doc{"text", normalize(o.text, normalization(o)), Label::kPositive, std::nullopt};
    if (doc.tokens.empty()) throw DataError("--text is empty after normalization");
    for (const auto& m : set.models) {
      const Prediction p = m.predict(doc);
      std::cout << m.name << '\t' << label_name(p.label) << '\t' << fmt(p.probability) << '\n';
    }
    return;
  }
  const auto docs = scored_documents(o, l);
  for (const auto& m : set.models) {
    std::string out = "id\tlabel\tprobability\n";
    for (const auto& d : docs) {
      const Prediction p = m.predict(d);
      out += d.id + '\t' + label_name(p.label) + '\t' + fmt(p.probability, "%.9f") + '\n';
    }
    const ModelKind k = parse_model_kind(m.name);
    write_file_atomic(l.reports() / (std::string("predictions_") + model_kind_tag(k) + ".tsv"), out);
  }
  summary(o, "predict: " + std::to_string(docs.size()) + " documents scored by " +
                 std::to_string(set.models.size()) + " model(s)");
}

void cmd_case_study(const Options& o, const Layout& l) {
  ModelSet set;
  load_models(o, l, set);
  std::vector<CaseStudyRecord> records;
  std::size_t flips = 0;
  for (const auto& d : scored_documents(o, l)) {
    if (!d.carrier) continue;
    records.push_back(case_study(d, *d.carrier, set.models));
    for (const auto& out : records.back().outcomes) flips += out.flipped;
  }
  if (records.empty()) throw DataError("no document with a carrier span to relocate");
  write_file_atomic(l.reports() / "case_study.jsonl", case_study_jsonl(records));
  summary(o, "case-study: " + std::to_string(records.size()) + " documents relocated, " + std::to_string(flips) +
                 " prediction flips");
}

int run(int argc, char** argv) {
  Options o;
  CLI::App app{"Bi-LSTM sentiment classification with paragraph vectors"};
  app.set_config("--config", "", "Flat key=value file; keys mirror the long flag names");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  app.add_option("--seed", o.run.seed, "Run seed; every stage derives its own seed from it");
  app.add_option("--mode", o.mode,
                 "Model: WE, PV+WE or baseline (synth: first, middle, last or mixed sentiment position)");
  app.add_option("--out", o.out, "Run directory holding all artifacts");
  app.add_option("--hidden-size", o.run.model.hidden, "Bi-LSTM hidden units per direction");
  app.add_option("--epochs", o.run.model.epochs, "Maximum Bi-LSTM training epochs");
  app.add_option("--patience", o.run.model.patience, "Early-stopping patience in epochs");
  app.add_option("--batch-size", o.run.model.batch_size, "Bi-LSTM mini-batch size");
  app.add_option("--learning-rate", o.run.model.learning_rate, "Adam step size");
  app.add_option("--dropout", o.run.model.dropout, "Dropout rate on the Bi-LSTM feature vector");
  app.add_option("--embedding-dim", o.run.embedding.dim, "Word embedding size");
  app.add_option("--embedding-epochs", o.run.embedding.epochs, "Skip-gram epochs");
  app.add_option("--embedding-window", o.run.embedding.window, "Skip-gram window radius");
  app.add_option("--pv-dim", o.run.pv.dim, "Size of each of PV-DM and PV-DBOW");
  app.add_option("--pv-epochs", o.run.pv.epochs, "Paragraph vector epochs");
  app.add_option("--infer-steps", o.run.pv.infer_steps, "Paragraph vector inference passes");
  app.add_option("--min-count", o.run.min_count, "Minimum token frequency kept in the vocabulary");
  app.add_option("--validation-fraction", o.run.validation_fraction, "Share of documents held out for validation");
  app.add_option("--svm-lambda", o.run.svm.lambda, "SVM regularization strength");
  app.add_option("--svm-epochs", o.run.svm.epochs, "SVM passes over the data");
  app.add_option("--n", o.n_docs, "Number of synthetic documents");
  app.add_option("--corpus", o.corpus, "Input JSONL corpus for preprocess (default: <out>/corpus.jsonl)");
  app.add_option("--normalization", o.normalization, "Slang normalization table (tab-separated)");
  app.add_option("--input", o.input, "JSONL documents to score (default: <out>/valid.jsonl)");
  app.add_option("--text", o.text, "Single raw text to classify (predict)");

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Options&, const Layout&);
  };
  const Command commands[] = {
      {"synth", "Generate a synthetic corpus", cmd_synth},
      {"preprocess", "Normalize, split and summarize a corpus", cmd_preprocess},
      {"train-embeddings", "Train skip-gram word embeddings", cmd_train_embeddings},
      {"train-pv", "Train PV-DM and PV-DBOW paragraph vectors", cmd_train_pv},
      {"train", "Train a WE, PV+WE or baseline classifier", cmd_train},
      {"evaluate", "Score trained models and compare them", cmd_evaluate},
      {"predict", "Classify documents or a single text", cmd_predict},
      {"case-study", "Move carrier sentences to the end and compare predictions", cmd_case_study},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) subs.emplace_back(app.add_subcommand(c.name, c.help)->fallthrough(), &c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }
  const Layout layout{o.out};
  for (const auto& [sub, c] : subs) {
    if (sub->parsed()) c->fn(o, layout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
}
