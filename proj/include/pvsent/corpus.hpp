#pragma once

// Labeled document collections: text normalization, JSONL loading, vocabulary
// construction, seeded train/validation splitting and a synthetic corpus
// generator with controllable sentiment-phrase position.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pvsent/error.hpp"
#include "pvsent/random.hpp"
#include "pvsent/serialize.hpp"

namespace pvsent {

enum class Label : std::uint8_t { kNegative = 0, kPositive = 1 };

inline int to_int(Label l) { return static_cast<int>(l); }
inline Label label_from_int(int v) { return v != 0 ? Label::kPositive : Label::kNegative; }
inline const char* label_name(Label l) { return l == Label::kPositive ? "positive" : "negative"; }

inline Label parse_label(std::string_view s) {
  if (s == "positive") return Label::kPositive;
  if (s == "negative") return Label::kNegative;
  throw DataError("unknown label \"" + std::string(s) + "\"");
}

// Half-open token range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

struct Document {
  std::string id;
  std::vector<std::string> tokens;
  Label label = Label::kNegative;
  // Location of the sentiment-carrying sentence, when known (synthetic data).
  std::optional<TokenSpan> carrier;

  bool operator==(const Document&) const = default;
};

// ---------------------------------------------------------------------------
// Normalization

using NormalizationTable = std::unordered_map<std::string, std::string>;

inline bool is_sentence_terminator(std::string_view token) {
  return token == "." || token == "!" || token == "?";
}

namespace detail {

inline bool is_terminator_char(char32_t c) { return c == U'.' || c == U'!' || c == U'?'; }

// Decodes UTF-8; invalid bytes decode to U+FFFD.
inline std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (i + len > s.size()) {
      out.push_back(0xFFFD);
      break;
    }
    bool ok = true;
    for (int k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' ||
         c == 0x00A0 || c == 0x3000 || (c >= 0x2000 && c <= 0x200A);
}

// Letters and digits. Non-ASCII codepoints count as letters unless they fall
// in the punctuation, symbol, emoji, or variation-selector blocks.
inline bool is_word_char(char32_t c) {
  if (c < 0x80) {
    return (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= U'0' && c <= U'9');
  }
  if (c < 0xC0) return false;                   // Latin-1 punctuation and symbols
  if (c == 0xD7 || c == 0xF7) return false;     // multiplication, division
  if (c >= 0x2000 && c <= 0x2BFF) return false;  // punctuation, arrows, dingbats, shapes
  if (c >= 0x3000 && c <= 0x303F) return false;  // CJK punctuation
  if (c >= 0xFE00 && c <= 0xFE0F) return false;  // variation selectors
  if (c >= 0xE000 && c <= 0xF8FF) return false;  // private use
  if (c == 0xFFFD) return false;
  if (c >= 0x1F000 && c <= 0x1FAFF) return false;  // emoji and pictographs
  if (c >= 0xE0000) return false;                  // tags
  return true;
}

inline char32_t to_lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') return c + 32;
  if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 32;
  return c;
}

}  // namespace detail

// Lowercases, drops emoticons/emoji (whitespace-delimited chunks with no letter
// or digit), strips punctuation, and splits a trailing run of sentence
// terminators off as its own "." / "!" / "?" token. Word tokens then pass
// through `table`; a canonical form may expand to several tokens.
inline std::vector<std::string> normalize(std::string_view raw_text,
                                          const NormalizationTable& table = {}) {
  const std::u32string text = detail::decode_utf8(raw_text);
  std::vector<std::string> tokens;

  auto emit_word = [&](const std::string& word) {
    const auto it = table.find(word);
    if (it == table.end()) {
      tokens.push_back(word);
      return;
    }
    std::istringstream parts(it->second);
    std::string part;
    while (parts >> part) tokens.push_back(part);
  };

  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && detail::is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !detail::is_space(text[i])) ++i;
    if (start == i) break;
    std::u32string_view chunk(text.data() + start, i - start);

    // Trailing terminator run, e.g. "enak!!" or "ya...".
    std::size_t word_end = chunk.size();
    while (word_end > 0 && detail::is_terminator_char(chunk[word_end - 1])) --word_end;
    const bool has_terminator = word_end < chunk.size();
    const char32_t terminator = has_terminator ? chunk[word_end] : U'.';

    std::string word;
    for (std::size_t k = 0; k < word_end; ++k) {
      if (detail::is_word_char(chunk[k])) detail::append_utf8(word, detail::to_lower(chunk[k]));
    }
    if (!word.empty()) {
      emit_word(word);
    } else if (word_end > 0) {
      // Symbol-only chunk (":)", ":-(", an emoji, "-"): emoticon deletion.
      // A terminator glued to an emoticon goes with it.
      continue;
    }
    if (has_terminator) {
      tokens.push_back(std::string(1, static_cast<char>(terminator)));
    }
  }
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// Two-column UTF-8 TSV: surface \t canonical. Blank lines and '#' comments skipped.
inline NormalizationTable parse_normalization_table(std::string_view contents) {
  NormalizationTable table;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < contents.size()) {
    std::size_t eol = contents.find('\n', pos);
    if (eol == std::string_view::npos) eol = contents.size();
    std::string_view line = contents.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw DataError("normalization table line " + std::to_string(line_no) + ": expected two tab-separated columns");
    }
    table[std::string(line.substr(0, tab))] = std::string(line.substr(tab + 1));
  }
  return table;
}

inline NormalizationTable load_normalization_table(const std::filesystem::path& path) {
  return parse_normalization_table(read_file(path));
}

// ---------------------------------------------------------------------------
// JSONL corpus format: {"id": ..., "text": ..., "label": "positive"|"negative"}
// plus an optional "carrier": [begin, end] token span over the normalized text.

inline std::vector<Document> parse_corpus(std::string_view contents,
                                          const NormalizationTable& table = {}) {
  std::vector<Document> docs;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < contents.size()) {
    std::size_t eol = contents.find('\n', pos);
    if (eol == std::string_view::npos) eol = contents.size();
    std::string_view line = contents.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("malformed JSON on line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!record.is_object() || !record.contains("id") || !record["id"].is_string() ||
        !record.contains("text") || !record["text"].is_string() || !record.contains("label") ||
        !record["label"].is_string()) {
      throw DataError("malformed record on line " + std::to_string(line_no) +
                      ": expected string fields id, text, label");
    }

    Document doc;
    doc.id = record["id"].get<std::string>();
    try {
      doc.label = parse_label(record["label"].get<std::string>());
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " on line " + std::to_string(line_no));
    }
    doc.tokens = normalize(record["text"].get<std::string>(), table);
    const bool has_word = std::any_of(doc.tokens.begin(), doc.tokens.end(),
                                      [](const std::string& t) { return !is_sentence_terminator(t); });
    if (!has_word) {
      throw DataError("document \"" + doc.id + "\" is empty after normalization (line " +
                      std::to_string(line_no) + ")");
    }
    if (record.contains("carrier")) {
      const auto& c = record["carrier"];
      if (!c.is_array() || c.size() != 2 || !c[0].is_number_unsigned() || !c[1].is_number_unsigned()) {
        throw DataError("malformed carrier span on line " + std::to_string(line_no));
      }
      TokenSpan span{c[0].get<std::size_t>(), c[1].get<std::size_t>()};
      if (span.begin >= span.end || span.end > doc.tokens.size()) {
        throw DataError("carrier span out of range on line " + std::to_string(line_no));
      }
      doc.carrier = span;
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<Document> load_corpus(const std::filesystem::path& path,
                                         const NormalizationTable& table = {}) {
  return parse_corpus(read_file(path), table);
}

inline std::string serialize_corpus(const std::vector<Document>& docs) {
  std::string out;
  for (const auto& doc : docs) {
    nlohmann::ordered_json record;
    record["id"] = doc.id;
    record["text"] = join_tokens(doc.tokens);
    record["label"] = label_name(doc.label);
    if (doc.carrier) record["carrier"] = {doc.carrier->begin, doc.carrier->end};
    out += record.dump();
    out.push_back('\n');
  }
  return out;
}

inline void save_corpus(const std::vector<Document>& docs, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_corpus(docs));
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr std::string_view kUnkToken = "<unk>";

class Vocabulary {
 public:
  static constexpr std::size_t kUnk = 0;

  Vocabulary() { tokens_.emplace_back(kUnkToken); counts_.push_back(0); }

  // Entries must already be in index order; index 0 (UNK) is implicit.
  static Vocabulary from_entries(const std::vector<std::pair<std::string, std::uint64_t>>& entries,
                                 std::uint64_t unk_count, std::uint64_t min_count) {
    Vocabulary v;
    v.counts_[0] = unk_count;
    v.min_count_ = min_count;
    for (const auto& [token, count] : entries) {
      if (token == kUnkToken || v.index_.count(token)) {
        throw DataError("vocabulary: duplicate or reserved token \"" + token + "\"");
      }
      v.index_.emplace(token, v.tokens_.size());
      v.tokens_.push_back(token);
      v.counts_.push_back(count);
    }
    return v;
  }

  // Number of entries including UNK.
  std::size_t size() const { return tokens_.size(); }

  // UNK for out-of-vocabulary tokens.
  std::size_t index(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  // For UNK this is the number of corpus tokens that fell below min_count.
  std::uint64_t count(std::size_t i) const { return counts_.at(i); }
  std::uint64_t min_count() const { return min_count_; }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(index(t));
    return ids;
  }

  // Fingerprint of token order; artifacts built on different vocabularies
  // refuse to combine.
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a("vocab");
    for (const auto& t : tokens_) {
      h = fnv1a(t, h);
      h = fnv1a("\x1f", h);
    }
    return h;
  }

  bool operator==(const Vocabulary& o) const {
    return tokens_ == o.tokens_ && counts_ == o.counts_ && min_count_ == o.min_count_;
  }

  void write(BinaryWriter& w) const {
    w.u64(min_count_);
    w.u64(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      w.str(tokens_[i]);
      w.u64(counts_[i]);
    }
  }

  static Vocabulary read(BinaryReader& r) {
    const std::uint64_t min_count = r.u64();
    const std::uint64_t n = r.u64();
    if (n == 0) throw DataError("corrupt vocabulary (no UNK entry)");
    std::string unk = r.str();
    const std::uint64_t unk_count = r.u64();
    if (unk != kUnkToken) throw DataError("corrupt vocabulary (index 0 is not UNK)");
    std::vector<std::pair<std::string, std::uint64_t>> entries;
    for (std::uint64_t i = 1; i < n; ++i) {
      std::string t = r.str();
      entries.emplace_back(std::move(t), r.u64());
    }
    return from_entries(entries, unk_count, min_count);
  }

  std::string to_tsv() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      out += std::to_string(i) + '\t' + tokens_[i] + '\t' + std::to_string(counts_[i]) + '\n';
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t min_count_ = 1;
};

// Keeps tokens with frequency >= min_count, ordered by descending frequency
// with lexicographic tie-break. Index 0 is always UNK.
inline Vocabulary build_vocabulary(const std::vector<Document>& docs, std::uint64_t min_count = 1) {
  if (docs.empty()) throw UsageError("build_vocabulary: empty document list");
  if (min_count == 0) throw UsageError("build_vocabulary: min_count must be positive");
  std::map<std::string, std::uint64_t> freq;
  for (const auto& d : docs) {
    for (const auto& t : d.tokens) ++freq[t];
  }
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  std::uint64_t dropped = 0;
  for (auto& [token, count] : freq) {
    if (count >= min_count) {
      kept.emplace_back(token, count);
    } else {
      dropped += count;
    }
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return Vocabulary::from_entries(kept, dropped, min_count);
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t vocab_size = 0;  // distinct tokens, UNK excluded
  std::size_t max_sequence_length = 0;

  std::size_t total() const { return positive + negative; }
};

inline CorpusStats corpus_stats(const std::vector<Document>& docs) {
  CorpusStats s;
  std::unordered_map<std::string, int> distinct;
  for (const auto& d : docs) {
    (d.label == Label::kPositive ? s.positive : s.negative)++;
    s.max_sequence_length = std::max(s.max_sequence_length, d.tokens.size());
    for (const auto& t : d.tokens) distinct.emplace(t, 0);
  }
  s.vocab_size = distinct.size();
  return s;
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  std::vector<Document> train;
  std::vector<Document> validation;
};

// Seeded shuffle, then the first round(fraction * N) documents become validation.
inline Split split(std::vector<Document> docs, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw UsageError("split: validation fraction must lie in (0, 1)");
  }
  if (docs.size() < 2) throw UsageError("split: need at least 2 documents");
  Rng rng(seed);
  rng.shuffle(docs);
  const auto n_valid =
      static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(docs.size())));
  Split out;
  out.validation.assign(std::make_move_iterator(docs.begin()),
                        std::make_move_iterator(docs.begin() + static_cast<std::ptrdiff_t>(n_valid)));
  out.train.assign(std::make_move_iterator(docs.begin() + static_cast<std::ptrdiff_t>(n_valid)),
                   std::make_move_iterator(docs.end()));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class PositionMode { kFirst, kMiddle, kLast, kMixed };

inline PositionMode parse_position_mode(std::string_view s) {
  if (s == "sentiment-first" || s == "first") return PositionMode::kFirst;
  if (s == "sentiment-middle" || s == "middle") return PositionMode::kMiddle;
  if (s == "sentiment-last" || s == "last") return PositionMode::kLast;
  if (s == "mixed") return PositionMode::kMixed;
  throw UsageError("unknown position mode \"" + std::string(s) + "\"");
}

inline const char* position_mode_name(PositionMode m) {
  switch (m) {
    case PositionMode::kFirst: return "sentiment-first";
    case PositionMode::kMiddle: return "sentiment-middle";
    case PositionMode::kLast: return "sentiment-last";
    case PositionMode::kMixed: return "mixed";
  }
  return "mixed";
}

namespace phrase_bank {

inline const std::vector<std::string_view>& positive() {
  static const std::vector<std::string_view> bank = {
      "makanannya enak sekali",
      "saya sangat puas dengan pelayanannya",
      "pengirimannya cepat dan barangnya bagus",
      "harganya murah dan rasanya mantap",
      "aplikasinya sangat membantu saya",
      "saya suka sekali dengan tempat ini",
      "pelayannya ramah dan sopan",
      "pokoknya recommended banget",
  };
  return bank;
}

inline const std::vector<std::string_view>& negative() {
  static const std::vector<std::string_view> bank = {
      "makanannya tidak enak sama sekali",
      "saya kecewa dengan pelayanannya",
      "pengirimannya lambat dan barangnya rusak",
      "harganya mahal dan rasanya hambar",
      "aplikasinya sering error dan lemot",
      "saya tidak suka dengan tempat ini",
      "pelayannya judes dan kasar",
      "pokoknya tidak recommended",
  };
  return bank;
}

inline const std::vector<std::string_view>& neutral() {
  static const std::vector<std::string_view> bank = {
      "saya datang ke sana kemarin sore",
      "tempatnya ada di dekat stasiun",
      "kami memesan dua porsi nasi goreng",
      "pesanan dikirim lewat kurir biasa",
      "hari itu cuaca agak mendung",
      "saya pergi bersama teman kantor",
      "menunya ditulis di papan depan",
      "barangnya dipesan minggu lalu",
      "ada banyak orang yang antre",
      "kami duduk di dekat jendela",
      "pembayarannya bisa pakai kartu",
      "jaraknya sekitar dua kilometer dari rumah",
      "saya baru pertama kali ke sini",
      "tokonya buka dari pagi sampai malam",
      "parkirannya cukup luas",
      "saya pesan lewat aplikasi",
  };
  return bank;
}

}  // namespace phrase_bank

// Each document is two or three neutral filler sentences plus one polar
// carrier sentence, every sentence closed by ".". The carrier span covers the
// carrier sentence including its terminator.
inline std::vector<Document> synth_corpus(std::size_t n_docs, PositionMode mode, std::uint64_t seed) {
  if (n_docs < 2) throw UsageError("synth_corpus: need at least 2 documents");
  Rng rng(seed);
  std::vector<Label> labels(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) labels[i] = i % 2 == 0 ? Label::kPositive : Label::kNegative;
  rng.shuffle(labels);

  auto sentence = [](std::string_view phrase) {
    std::vector<std::string> toks;
    std::istringstream in{std::string(phrase)};
    std::string t;
    while (in >> t) toks.push_back(t);
    toks.emplace_back(".");
    return toks;
  };

  const auto& fillers = phrase_bank::neutral();
  std::vector<Document> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const Label label = labels[i];
    const auto& carriers = label == Label::kPositive ? phrase_bank::positive() : phrase_bank::negative();
    const auto carrier = sentence(carriers[rng.below(carriers.size())]);

    const std::size_t n_fill = 2 + rng.below(2);
    // Distinct filler sentences.
    std::vector<std::size_t> order(fillers.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    rng.shuffle(order);

    PositionMode where = mode;
    if (mode == PositionMode::kMixed) {
      static constexpr PositionMode kChoices[] = {PositionMode::kFirst, PositionMode::kMiddle,
                                                  PositionMode::kLast};
      where = kChoices[rng.below(3)];
    }
    std::size_t slot = 0;  // number of filler sentences before the carrier
    switch (where) {
      case PositionMode::kFirst: slot = 0; break;
      case PositionMode::kLast: slot = n_fill; break;
      default: slot = 1 + rng.below(n_fill - 1); break;
    }

    Document doc;
    char id[64];
    std::snprintf(id, sizeof id, "%s-%05zu", position_mode_name(mode), i);
    doc.id = id;
    doc.label = label;
    for (std::size_t k = 0; k <= n_fill; ++k) {
      if (k == slot) {
        const std::size_t begin = doc.tokens.size();
        doc.tokens.insert(doc.tokens.end(), carrier.begin(), carrier.end());
        doc.carrier = TokenSpan{begin, doc.tokens.size()};
      }
      if (k < n_fill) {
        const auto filler = sentence(fillers[order[k]]);
        doc.tokens.insert(doc.tokens.end(), filler.begin(), filler.end());
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace pvsent
